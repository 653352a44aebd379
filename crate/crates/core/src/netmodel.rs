//! Regions, proximity encounters and beam-transfer timing.
//!
//! A beam transfer has a fixed handshake phase followed by a bulk phase at
//! the directional rate of the (sender class, receiver class) pair. Rates
//! are calibrated from measured end-to-end transfer times of a package of
//! known size.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::model::{DeviceId, RegionId};
use crate::time::{SimDuration, SimTime};

/// Size of the reference package used for the transfer measurements, taken
/// as decimal megabytes.
pub const REFERENCE_PACKAGE_BYTES: f64 = 30.1e6;

/// Mean seconds to beam the reference package, sender → receiver. The two
/// same-class cells for the Nexus 5 and Nexus 10 were never measured.
pub const MEASURED_TRANSFER_SECONDS: [(&str, &str, f64); 14] = [
    ("galaxy_nexus", "galaxy_nexus", 227.0),
    ("galaxy_nexus", "nexus_5", 221.0),
    ("galaxy_nexus", "nexus_6", 209.0),
    ("galaxy_nexus", "nexus_10", 419.0),
    ("nexus_5", "galaxy_nexus", 211.0),
    ("nexus_5", "nexus_6", 149.0),
    ("nexus_5", "nexus_10", 360.0),
    ("nexus_6", "galaxy_nexus", 198.0),
    ("nexus_6", "nexus_5", 147.0),
    ("nexus_6", "nexus_6", 139.0),
    ("nexus_6", "nexus_10", 357.0),
    ("nexus_10", "galaxy_nexus", 409.0),
    ("nexus_10", "nexus_5", 400.0),
    ("nexus_10", "nexus_6", 359.0),
];

pub type ClassPair = (String, String);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("no transfer rate for {sender} -> {receiver}")]
    UnknownPair { sender: String, receiver: String },
    #[error("measured {measured}s for {sender} -> {receiver} does not exceed handshake {handshake}s")]
    NonPositiveRate { sender: String, receiver: String, measured: f64, handshake: f64 },
    #[error("unknown region {0}")]
    UnknownRegion(RegionId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("invalid encounter: {0}")]
    InvalidEncounter(String),
    #[error("rate table line {line}: {message}")]
    Table { line: u64, message: String },
}

/// How to fill same-class cells absent from a measured table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    None,
    /// Geometric mean of the class's mean sending time and mean receiving
    /// time over its measured cells.
    #[default]
    GeometricMean,
}

pub fn measured_table() -> BTreeMap<ClassPair, f64> {
    MEASURED_TRANSFER_SECONDS.iter().map(|(s, r, t)| ((s.to_string(), r.to_string()), *t)).collect()
}

/// Fills missing diagonal cells for `classes`. Returns the pairs filled.
pub fn impute_missing(
    table: &mut BTreeMap<ClassPair, f64>,
    classes: &BTreeSet<String>,
    rule: Imputation,
) -> BTreeSet<ClassPair> {
    let mut filled = BTreeSet::new();
    if rule == Imputation::None {
        return filled;
    }
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let mut additions = Vec::new();
    for class in classes {
        let pair = (class.clone(), class.clone());
        if table.contains_key(&pair) {
            continue;
        }
        let row = mean(table.iter().filter(|((s, _), _)| s == class).map(|(_, v)| *v).collect());
        let col = mean(table.iter().filter(|((_, r), _)| r == class).map(|(_, v)| *v).collect());
        if let (Some(row), Some(col)) = (row, col) {
            additions.push((pair, (row * col).sqrt()));
        }
    }
    for (pair, secs) in additions {
        filled.insert(pair.clone());
        table.insert(pair, secs);
    }
    filled
}

/// Parses a `sender_class,receiver_class,seconds` table with a header row.
pub fn read_rate_table<R: Read>(reader: R) -> Result<BTreeMap<ClassPair, f64>, NetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| NetError::Table {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(NetError::Table { line, message: format!("expected 3 fields, found {}", rec.len()) });
        }
        let seconds: f64 = rec[2]
            .parse()
            .map_err(|_| NetError::Table { line, message: format!("bad seconds value {:?}", &rec[2]) })?;
        if !seconds.is_finite() || seconds <= 0.0 {
            return Err(NetError::Table { line, message: format!("seconds must be positive, got {seconds}") });
        }
        let pair = (rec[0].to_string(), rec[1].to_string());
        if out.insert(pair.clone(), seconds).is_some() {
            return Err(NetError::Table { line, message: format!("duplicate pair {} -> {}", pair.0, pair.1) });
        }
    }
    Ok(out)
}

/// Directional bulk rates in bytes per second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    rates: BTreeMap<String, BTreeMap<String, f64>>,
    pub handshake_seconds: f64,
}

impl RateMatrix {
    pub fn new(handshake_seconds: f64) -> Self {
        Self { rates: BTreeMap::new(), handshake_seconds }
    }

    pub fn set_rate(&mut self, sender: &str, receiver: &str, bytes_per_second: f64) {
        assert!(bytes_per_second > 0.0 && bytes_per_second.is_finite(), "rates must be positive");
        self.rates.entry(sender.to_string()).or_default().insert(receiver.to_string(), bytes_per_second);
    }

    pub fn rate(&self, sender: &str, receiver: &str) -> Result<f64, NetError> {
        self.rates.get(sender).and_then(|row| row.get(receiver)).copied().ok_or_else(|| NetError::UnknownPair {
            sender: sender.to_string(),
            receiver: receiver.to_string(),
        })
    }

    pub fn contains(&self, sender: &str, receiver: &str) -> bool {
        self.rate(sender, receiver).is_ok()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.rates.iter().flat_map(|(s, row)| row.iter().map(move |(r, v)| (s.as_str(), r.as_str(), *v)))
    }

    /// Handshake plus bulk time for `size_bytes`.
    pub fn transfer_duration(&self, sender: &str, receiver: &str, size_bytes: f64) -> Result<f64, NetError> {
        Ok(self.handshake_seconds + size_bytes / self.rate(sender, receiver)?)
    }
}

/// Derives rates so that a `size_bytes` transfer reproduces each measured
/// time: `rate = size / (measured - handshake)`.
pub fn calibrate_rates(
    table: &BTreeMap<ClassPair, f64>,
    size_bytes: f64,
    handshake_seconds: f64,
) -> Result<RateMatrix, NetError> {
    let mut m = RateMatrix::new(handshake_seconds);
    for ((s, r), measured) in table {
        if *measured <= handshake_seconds {
            return Err(NetError::NonPositiveRate {
                sender: s.clone(),
                receiver: r.clone(),
                measured: *measured,
                handshake: handshake_seconds,
            });
        }
        m.set_rate(s, r, size_bytes / (measured - handshake_seconds));
    }
    Ok(m)
}

/// Free-function form of [`RateMatrix::transfer_duration`].
pub fn transfer_duration(matrix: &RateMatrix, sender: &str, receiver: &str, size_bytes: f64) -> Result<f64, NetError> {
    matrix.transfer_duration(sender, receiver, size_bytes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encounter {
    pub time: SimTime,
    pub a: DeviceId,
    pub b: DeviceId,
    pub duration_available: SimDuration,
}

impl Encounter {
    pub fn new(time: SimTime, a: DeviceId, b: DeviceId, duration_available: SimDuration) -> Result<Self, NetError> {
        if a == b {
            return Err(NetError::InvalidEncounter(format!("device {a} cannot meet itself")));
        }
        if duration_available == SimDuration::ZERO {
            return Err(NetError::InvalidEncounter("window must be positive".into()));
        }
        Ok(Self { time, a, b, duration_available })
    }
}

/// Timing of one beam transfer attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferPlan {
    pub handshake_start: SimTime,
    pub bulk_start: SimTime,
    pub bulk_end: SimTime,
    pub window_end: SimTime,
}

impl TransferPlan {
    pub fn new(start: SimTime, handshake: SimDuration, total: SimDuration, window: SimDuration) -> Self {
        Self { handshake_start: start, bulk_start: start + handshake, bulk_end: start + total, window_end: start + window }
    }

    /// Whether the bulk phase completes inside the encounter window.
    pub fn fits(&self) -> bool {
        self.bulk_end <= self.window_end
    }

    pub fn duration(&self) -> SimDuration {
        self.bulk_end - self.handshake_start
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: RegionId,
    pub internet_up: bool,
    pub members: BTreeSet<DeviceId>,
}

/// Region membership and internet state.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Regions {
    regions: BTreeMap<RegionId, Region>,
    location: BTreeMap<DeviceId, RegionId>,
}

impl Regions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_region(&mut self, id: RegionId, internet_up: bool) {
        self.regions.insert(id.clone(), Region { region_id: id, internet_up, members: BTreeSet::new() });
    }

    /// Places (or moves) a device; a device is in exactly one region.
    pub fn place(&mut self, device: DeviceId, region: &RegionId) -> Result<Option<RegionId>, NetError> {
        if !self.regions.contains_key(region) {
            return Err(NetError::UnknownRegion(region.clone()));
        }
        let previous = self.location.insert(device.clone(), region.clone());
        if let Some(prev) = &previous {
            self.regions.get_mut(prev).expect("known region").members.remove(&device);
        }
        self.regions.get_mut(region).expect("checked").members.insert(device);
        Ok(previous)
    }

    pub fn get(&self, id: &RegionId) -> Option<&Region> {
        self.regions.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Region> {
        self.regions.values()
    }

    pub fn region_of(&self, device: &DeviceId) -> Option<&RegionId> {
        self.location.get(device)
    }

    /// Sets a region's internet state. Proximity links are unaffected.
    pub fn kill_switch(&mut self, region: &RegionId, up: bool) -> Result<(), NetError> {
        let r = self.regions.get_mut(region).ok_or_else(|| NetError::UnknownRegion(region.clone()))?;
        r.internet_up = up;
        Ok(())
    }

    /// Whether the device currently has an internet uplink.
    pub fn uplink_check(&self, device: &DeviceId) -> bool {
        self.location
            .get(device)
            .and_then(|r| self.regions.get(r))
            .is_some_and(|r| r.internet_up)
    }

    pub fn same_region(&self, a: &DeviceId, b: &DeviceId) -> bool {
        matches!((self.location.get(a), self.location.get(b)), (Some(x), Some(y)) if x == y)
    }
}
