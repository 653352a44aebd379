//! Summaries computed from a finished trace alone.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};

use crate::device::InstallOutcome;
use crate::model::{DeviceId, StrainId};
use crate::mutation::{fitness, Fitness, ReachMode};
use crate::sim::trace::{Trace, TraceEvent, TransferOutcome};
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq)]
pub struct PairStats {
    pub count: usize,
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub devices: usize,
    /// (time, devices with at least one installed package), one point per change.
    pub infection_curve: Vec<(SimTime, usize)>,
    pub fitness: BTreeMap<StrainId, Fitness>,
    pub escape_times: BTreeMap<StrainId, f64>,
    pub delivered_count: usize,
    pub blocked_count: usize,
    pub out_of_time_count: usize,
    pub corrupted_count: usize,
    pub replay_count: usize,
    pub cache_hit_ratio: Option<f64>,
    pub mean_transfer_seconds: Option<f64>,
    pub mean_build_seconds: Option<f64>,
    /// Delivered, non-replayed transfers grouped by (sender class, receiver class).
    pub transfer_pairs: BTreeMap<(String, String), PairStats>,
    pub end_time: SimTime,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn metrics(trace: &Trace) -> Metrics {
    let mut infected: BTreeSet<DeviceId> = BTreeSet::new();
    let mut curve = Vec::new();
    let mut counts = BTreeMap::<TransferOutcome, usize>::new();
    let mut replay_count = 0;
    let mut transfer_secs = Vec::new();
    let mut pair_secs: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut build_secs = Vec::new();
    let mut escape_times = BTreeMap::new();
    let (mut hits, mut misses) = (0u64, 0u64);
    let mut end_time = SimTime::ZERO;

    for ev in trace.events() {
        if let Some(t) = ev.time() {
            end_time = end_time.max(t);
        }
        match ev {
            TraceEvent::Install { t, device, outcome: InstallOutcome::Updated | InstallOutcome::SideBySide, .. } =>
            {
                if infected.insert(device.clone()) {
                    curve.push((*t, infected.len()));
                }
            }
            TraceEvent::Transfer { outcome, replay, duration_ms, sender_class, receiver_class, .. } => {
                if *replay {
                    replay_count += 1;
                    continue;
                }
                *counts.entry(*outcome).or_default() += 1;
                if *outcome == TransferOutcome::Delivered {
                    let secs = *duration_ms as f64 / 1000.0;
                    transfer_secs.push(secs);
                    pair_secs.entry((sender_class.clone(), receiver_class.clone())).or_default().push(secs);
                }
            }
            TraceEvent::BuildEnd { duration_ms, .. } => build_secs.push(*duration_ms as f64 / 1000.0),
            TraceEvent::Escape { t, strain, .. } => {
                escape_times.entry(*strain).or_insert(t.as_secs_f64());
            }
            TraceEvent::DeviceFinal { cache_hits, cache_misses, .. } => {
                hits += cache_hits;
                misses += cache_misses;
            }
            _ => {}
        }
    }
    if curve.is_empty() {
        curve.push((SimTime::ZERO, 0));
    }

    let fitness = trace
        .lineage()
        .iter()
        .map(|(s, _)| (*s, fitness(trace, s, ReachMode::StrainOnly).expect("strain is in the lineage")))
        .collect();
    let transfer_pairs = pair_secs
        .into_iter()
        .map(|(k, v)| {
            let stats = PairStats {
                count: v.len(),
                mean_seconds: mean(&v).expect("non-empty"),
                min_seconds: v.iter().copied().fold(f64::INFINITY, f64::min),
                max_seconds: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            (k, stats)
        })
        .collect();
    let count = |o| counts.get(&o).copied().unwrap_or(0);
    Metrics {
        devices: trace.devices().len(),
        infection_curve: curve,
        fitness,
        escape_times,
        delivered_count: count(TransferOutcome::Delivered),
        blocked_count: count(TransferOutcome::Blocked),
        out_of_time_count: count(TransferOutcome::OutOfTime),
        corrupted_count: count(TransferOutcome::CorruptedDelivered),
        replay_count,
        cache_hit_ratio: (hits + misses > 0).then(|| hits as f64 / (hits + misses) as f64),
        mean_transfer_seconds: mean(&transfer_secs),
        mean_build_seconds: mean(&build_secs),
        transfer_pairs,
        end_time,
    }
}

impl Metrics {
    pub fn final_infected(&self) -> usize {
        self.infection_curve.last().map_or(0, |p| p.1)
    }

    /// Infected count at time `t`.
    pub fn infected_at(&self, t: SimTime) -> usize {
        self.infection_curve.iter().take_while(|p| p.0 <= t).last().map_or(0, |p| p.1)
    }

    pub fn first_escape_seconds(&self) -> Option<f64> {
        self.escape_times.values().copied().reduce(f64::min)
    }

    /// Flat key/value view. Keys are stable; absent quantities are null.
    pub fn summary(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("devices", json!(self.devices));
        put("final_infected", json!(self.final_infected()));
        put("strains", json!(self.fitness.len()));
        put("escape_count", json!(self.escape_times.len()));
        put("escape_time", json!(self.first_escape_seconds()));
        put("delivered_count", json!(self.delivered_count));
        put("blocked_count", json!(self.blocked_count));
        put("out_of_time_count", json!(self.out_of_time_count));
        put("corrupted_count", json!(self.corrupted_count));
        put("replay_count", json!(self.replay_count));
        put("cache_hit_ratio", json!(self.cache_hit_ratio));
        put("mean_transfer_s", json!(self.mean_transfer_seconds));
        put("mean_build_s", json!(self.mean_build_seconds));
        put("end_time_s", json!(self.end_time.as_secs_f64()));
        for ((s, r), stats) in &self.transfer_pairs {
            put(&format!("transfer_mean_s.{s}->{r}"), json!(stats.mean_seconds));
        }
        for (strain, f) in &self.fitness {
            let k = strain.short();
            put(&format!("strain.{k}.devices_reached"), json!(f.devices_reached));
            put(&format!("strain.{k}.survived_blacklist"), json!(f.survived_blacklist));
            put(&format!("strain.{k}.escape_time"), json!(f.escape_time));
        }
        m
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn infection_csv(&self) -> String {
        let mut out = String::from("time_s,infected\n");
        for (t, n) in &self.infection_curve {
            out.push_str(&format!("{:.3},{n}\n", t.as_secs_f64()));
        }
        out
    }

    pub fn transfers_csv(&self) -> String {
        let mut out = String::from("sender_class,receiver_class,count,mean_s,min_s,max_s\n");
        for ((s, r), p) in &self.transfer_pairs {
            out.push_str(&format!(
                "{s},{r},{},{:.3},{:.3},{:.3}\n",
                p.count, p.mean_seconds, p.min_seconds, p.max_seconds
            ));
        }
        out
    }
}
