use std::fs;
use std::path::Path;

use clap::ValueEnum;
use rayon::prelude::*;
use serde_json::json;
use viralsim::sim::{metrics, run as simulate, Metrics};

use crate::{load_scenario, Failure};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedRange {
    pub first: u64,
    pub last: u64,
}

pub fn parse_seed_range(s: &str) -> Result<SeedRange, String> {
    let (a, b) = s
        .split_once("..=")
        .or_else(|| s.split_once(".."))
        .ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let first: u64 = a.trim().parse().map_err(|_| format!("bad seed {a:?}"))?;
    let last: u64 = b.trim().parse().map_err(|_| format!("bad seed {b:?}"))?;
    if last < first {
        return Err(format!("empty seed range {s}"));
    }
    Ok(SeedRange { first, last })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Trace,
    Summary,
    Infection,
    Transfers,
}

struct SeedOutput {
    seed: u64,
    metrics: Metrics,
    trace_digest: String,
    files: Vec<String>,
}

fn write(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub fn run(scenario_path: &Path, seeds: SeedRange, out: &Path, emit: &[Emit], quiet: bool) -> Result<(), Failure> {
    let scenario = load_scenario(scenario_path)?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let name = scenario.name.clone();

    let outputs: Result<Vec<SeedOutput>, Failure> = (seeds.first..=seeds.last)
        .into_par_iter()
        .map(|seed| {
            let trace = simulate(&scenario, seed);
            let m = metrics(&trace);
            let stem = format!("{name}.seed{seed}");
            let mut files = Vec::new();
            let mut put = |suffix: &str, body: String| -> Result<(), Failure> {
                let file = format!("{stem}.{suffix}");
                write(&out.join(&file), &body)?;
                files.push(file);
                Ok(())
            };
            if emit.contains(&Emit::Trace) {
                put("trace.jsonl", trace.to_jsonl())?;
            }
            if emit.contains(&Emit::Summary) {
                put("summary.json", m.summary_json())?;
            }
            if emit.contains(&Emit::Infection) {
                put("infection.csv", m.infection_csv())?;
            }
            if emit.contains(&Emit::Transfers) {
                put("transfers.csv", m.transfers_csv())?;
            }
            Ok(SeedOutput { seed, metrics: m, trace_digest: trace.digest().to_hex(), files })
        })
        .collect();
    let outputs = outputs?;

    let manifest = json!({
        "tool": concat!("viralsim ", env!("CARGO_PKG_VERSION")),
        "scenario": scenario_path.display().to_string(),
        "scenario_name": name,
        "scenario_hash": scenario.source_hash.to_hex(),
        "seeds": [seeds.first, seeds.last],
        "runs": outputs.iter().map(|o| json!({
            "seed": o.seed,
            "trace_digest": o.trace_digest,
            "files": o.files,
        })).collect::<Vec<_>>(),
    });
    let manifest_body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write(&out.join(format!("{name}.manifest.json")), &manifest_body)?;

    if !quiet {
        println!("{:>6}  {:>9}  {:>9}  {:>7}  {:>7}  {:>10}  {:>10}", "seed", "infected", "delivered", "blocked", "escapes", "mean_xfer", "end_s");
        for o in &outputs {
            let m = &o.metrics;
            println!(
                "{:>6}  {:>4}/{:<4}  {:>9}  {:>7}  {:>7}  {:>10}  {:>10.1}",
                o.seed,
                m.final_infected(),
                m.devices,
                m.delivered_count,
                m.blocked_count,
                m.escape_times.len(),
                m.mean_transfer_seconds.map_or("-".to_string(), |s| format!("{s:.1}")),
                m.end_time.as_secs_f64(),
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seed_range("1..10").unwrap(), SeedRange { first: 1, last: 10 });
        assert_eq!(parse_seed_range("3..=3").unwrap(), SeedRange { first: 3, last: 3 });
        assert!(parse_seed_range("5..1").is_err());
        assert!(parse_seed_range("x").is_err());
    }
}
