use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use viralsim::sim::{metrics, Trace};

use crate::Failure;

fn p50(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Per-metric mean, min, max and median across traces of one scenario.
pub fn aggregate(traces: &[Trace]) -> Result<String, String> {
    let first = traces.first().ok_or("no traces given")?;
    for t in traces {
        if t.scenario_hash() != first.scenario_hash() {
            return Err(format!(
                "IncompatibleTraces: scenario {} ({}) differs from {} ({})",
                t.scenario_name(),
                t.scenario_hash().short(),
                first.scenario_name(),
                first.scenario_hash().short()
            ));
        }
    }
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in traces {
        for (k, v) in metrics(t).summary() {
            let x = match v {
                Value::Number(n) => n.as_f64(),
                Value::Bool(b) => Some(if b { 1.0 } else { 0.0 }),
                _ => None,
            };
            if let Some(x) = x {
                values.entry(k).or_default().push(x);
            }
        }
    }
    let mut out = String::from("metric,n,mean,min,max,p50\n");
    for (k, mut xs) in values {
        xs.sort_by(f64::total_cmp);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        out.push_str(&format!("{k},{},{mean:.3},{:.3},{:.3},{:.3}\n", xs.len(), xs[0], xs[xs.len() - 1], p50(&xs)));
    }
    Ok(out)
}

pub fn report(paths: &[PathBuf], out: Option<&Path>) -> Result<(), Failure> {
    let mut traces = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
        traces.push(Trace::from_jsonl(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?);
    }
    let csv = aggregate(&traces).map_err(Failure::Runtime)?;
    match out {
        Some(path) => fs::write(path, csv).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display()))),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
