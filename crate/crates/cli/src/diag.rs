//! Machine-readable diagnostics and exit codes.

use std::fmt;

use cashgof::Error;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Code {
    #[serde(rename = "E_IO")]
    Io,
    #[serde(rename = "E_SCHEMA")]
    Schema,
    #[serde(rename = "E_INCOMPATIBLE")]
    Incompatible,
    #[serde(rename = "E_CHECKSUM")]
    Checksum,
    #[serde(rename = "E_SEED_REQUIRED")]
    SeedRequired,
    #[serde(rename = "E_RUNTIME")]
    Runtime,
}

impl Code {
    pub fn exit_code(self) -> i32 {
        match self {
            Code::Runtime => 1,
            _ => 2,
        }
    }
}

#[derive(Debug)]
pub struct Diagnostic {
    pub code: Code,
    pub message: String,
}

impl Diagnostic {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "code": self.code,
            "exit": self.code.exit_code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Diagnostic {}

/// Classify a library error raised while loading inputs.
pub fn input_error(context: &str, e: Error) -> Diagnostic {
    let code = match &e {
        Error::Io(_) => Code::Io,
        Error::CorruptTable(_) | Error::TableValidation(_) => Code::Checksum,
        _ => Code::Schema,
    };
    Diagnostic::new(code, format!("{context}: {e}"))
}

/// Attach a diagnostic code to input-stage failures.
pub trait InputContext<T> {
    fn input(self, context: &str) -> Result<T, Diagnostic>;
    fn with_code(self, code: Code, context: &str) -> Result<T, Diagnostic>;
}

impl<T> InputContext<T> for Result<T, Error> {
    fn input(self, context: &str) -> Result<T, Diagnostic> {
        self.map_err(|e| input_error(context, e))
    }

    fn with_code(self, code: Code, context: &str) -> Result<T, Diagnostic> {
        self.map_err(|e| Diagnostic::new(code, format!("{context}: {e}")))
    }
}

/// Map any error to its code, defaulting to a runtime failure.
pub fn classify(e: &anyhow::Error) -> Diagnostic {
    match e.downcast_ref::<Diagnostic>() {
        Some(d) => Diagnostic::new(d.code, d.message.clone()),
        None => Diagnostic::new(Code::Runtime, format!("{e:#}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_exits() {
        assert_eq!(Code::Runtime.exit_code(), 1);
        assert_eq!(Code::Checksum.exit_code(), 2);
        let d = input_error("table", Error::CorruptTable("bad digest".into()));
        assert_eq!(d.code, Code::Checksum);
        let v: serde_json::Value = serde_json::from_str(&d.to_json()).unwrap();
        assert_eq!(v["code"], "E_CHECKSUM");
        assert_eq!(v["exit"], 2);
    }

    #[test]
    fn unknown_errors_are_runtime() {
        let e = anyhow::anyhow!("fit diverged");
        assert_eq!(classify(&e).code, Code::Runtime);
        let e = anyhow::Error::new(Diagnostic::new(Code::SeedRequired, "x"));
        assert_eq!(classify(&e).code, Code::SeedRequired);
    }
}
