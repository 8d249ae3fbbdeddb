//! Convert a whitespace-separated channel dump into the dataset CSV read by `cashgof`.
//!
//! Input lines: `e_lo e_hi counts [background]`, one per channel, energies increasing.
//! Lines starting with `#` and blank lines are skipped.
//!
//! Usage: `convert_observation <dump.txt> <exposure_seconds> <out.csv>`

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};

use anyhow::{bail, Context, Result};
use cashgof::dataset::BinnedDataset;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [input, exposure, out] = args.as_slice() else {
        bail!("usage: convert_observation <dump.txt> <exposure_seconds> <out.csv>");
    };
    let exposure: f64 = exposure.parse().context("exposure must be a number")?;

    let mut edges = Vec::new();
    let mut counts = Vec::new();
    let mut background = Vec::new();
    for (k, line) in BufReader::new(File::open(input).with_context(|| format!("open {input}"))?)
        .lines()
        .enumerate()
    {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&f.len()) {
            bail!("line {}: expected `e_lo e_hi counts [background]`", k + 1);
        }
        let lo: f64 = f[0].parse().with_context(|| format!("line {}: e_lo", k + 1))?;
        let hi: f64 = f[1].parse().with_context(|| format!("line {}: e_hi", k + 1))?;
        match edges.last() {
            None => edges.push(lo),
            Some(&prev) if prev != lo => bail!("line {}: channels must be contiguous", k + 1),
            _ => {}
        }
        edges.push(hi);
        counts.push(f[2].parse::<u64>().with_context(|| format!("line {}: counts", k + 1))?);
        if let Some(b) = f.get(3) {
            background.push(
                b.parse::<f64>()
                    .with_context(|| format!("line {}: background", k + 1))?,
            );
        }
    }
    let background = match background.len() {
        0 => None,
        n if n == counts.len() => Some(background),
        _ => bail!("background must be given on every line or none"),
    };
    let data = BinnedDataset::new(counts, edges, exposure, background)?;
    data.write_csv(BufWriter::new(
        File::create(out).with_context(|| format!("create {out}"))?,
    ))?;
    Ok(())
}
