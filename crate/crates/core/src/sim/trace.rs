//! Run traces: one JSON record per line, fields in declaration order.

use serde::{Deserialize, Serialize};

use crate::adversary::BlockReason;
use crate::canonical::ContentHash;
use crate::device::{CompatResult, InstallOutcome};
use crate::model::{DeviceId, RegionId, StrainId};
use crate::mutation::{Lineage, LineageNode, MutationError};
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferOutcome {
    Delivered,
    OutOfTime,
    Blocked,
    CorruptedDelivered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPhase {
    HandshakeStart,
    BulkStart,
    BulkEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncounterKind {
    Scripted,
    Bridge,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstallCause {
    Seed,
    Transfer,
    Replay,
    SelfCompile,
    Mutation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstalledSummary {
    pub package: String,
    pub hash: ContentHash,
    pub strain: StrainId,
    pub cert: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceEvent {
    Header {
        seed: u64,
        scenario: String,
        scenario_hash: ContentHash,
        devices: Vec<DeviceId>,
    },
    Encounter {
        t: SimTime,
        enc: u64,
        kind: EncounterKind,
        a: DeviceId,
        b: DeviceId,
        window_ms: u64,
        sender: Option<DeviceId>,
    },
    Phase {
        t: SimTime,
        xfer: u64,
        phase: TransferPhase,
    },
    Transfer {
        t: SimTime,
        xfer: u64,
        from: DeviceId,
        to: DeviceId,
        sender_class: String,
        receiver_class: String,
        strain: StrainId,
        hash: ContentHash,
        cert: String,
        outcome: TransferOutcome,
        duration_ms: u64,
        observed: bool,
        delay_ms: u64,
        replay: bool,
        reason: Option<BlockReason>,
    },
    Verify {
        t: SimTime,
        xfer: u64,
        device: DeviceId,
        hash: ContentHash,
        ok: bool,
    },
    Stored {
        t: SimTime,
        device: DeviceId,
        hash: ContentHash,
        strain: StrainId,
        compat: CompatResult,
    },
    BuildStart {
        t: SimTime,
        device: DeviceId,
        strain: StrainId,
        cause: InstallCause,
        temperature: f64,
        throttle: f64,
    },
    BuildEnd {
        t: SimTime,
        device: DeviceId,
        strain: StrainId,
        hash: ContentHash,
        duration_ms: u64,
        cache_hits: u64,
        cache_misses: u64,
        temperature: f64,
    },
    BuildFailed {
        t: SimTime,
        device: DeviceId,
        strain: StrainId,
        error: String,
    },
    Install {
        t: SimTime,
        device: DeviceId,
        strain: StrainId,
        hash: ContentHash,
        package: String,
        cert: String,
        outcome: InstallOutcome,
        cause: InstallCause,
        xfer: Option<u64>,
        prev_hash: Option<ContentHash>,
    },
    Mutation {
        t: SimTime,
        device: DeviceId,
        parent: StrainId,
        child: StrainId,
        generation: u32,
        ops: Vec<String>,
        cert: String,
    },
    KillSwitch {
        t: SimTime,
        region: RegionId,
        up: bool,
    },
    Move {
        t: SimTime,
        device: DeviceId,
        from: RegionId,
        to: RegionId,
    },
    Uplink {
        t: SimTime,
        device: DeviceId,
        reachable: bool,
        observed: Option<ContentHash>,
    },
    UplinkCancelled {
        t: SimTime,
        device: DeviceId,
        region: RegionId,
    },
    Blacklist {
        t: SimTime,
        hash: Option<ContentHash>,
        cert: Option<String>,
        source: String,
    },
    Compromise {
        t: SimTime,
        device: DeviceId,
        ok: bool,
        hashes: Vec<ContentHash>,
        certs: Vec<String>,
    },
    Escape {
        t: SimTime,
        strain: StrainId,
        device: DeviceId,
        region: RegionId,
    },
    Stop {
        t: SimTime,
        reason: String,
    },
    DeviceFinal {
        device: DeviceId,
        class: String,
        region: RegionId,
        installed: Vec<InstalledSummary>,
        stored: usize,
        temperature: f64,
        compromised: bool,
        cache_hits: u64,
        cache_misses: u64,
    },
    Strain {
        strain: StrainId,
        parent: Option<StrainId>,
        generation: u32,
        birth_t: SimTime,
        birth_device: DeviceId,
    },
}

impl TraceEvent {
    /// Simulation time of timed records; header and footer records have none.
    pub fn time(&self) -> Option<SimTime> {
        use TraceEvent::*;
        match self {
            Encounter { t, .. }
            | Phase { t, .. }
            | Transfer { t, .. }
            | Verify { t, .. }
            | Stored { t, .. }
            | BuildStart { t, .. }
            | BuildEnd { t, .. }
            | BuildFailed { t, .. }
            | Install { t, .. }
            | Mutation { t, .. }
            | KillSwitch { t, .. }
            | Move { t, .. }
            | Uplink { t, .. }
            | UplinkCancelled { t, .. }
            | Blacklist { t, .. }
            | Compromise { t, .. }
            | Escape { t, .. }
            | Stop { t, .. } => Some(*t),
            Header { .. } | DeviceFinal { .. } | Strain { .. } => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("trace has no header record")]
    MissingHeader,
    #[error("trace lineage: {0}")]
    Lineage(#[from] MutationError),
}

/// An append-only, totally ordered run record.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    records: Vec<TraceEvent>,
    lineage: Lineage,
}

impl Trace {
    pub(crate) fn new(header: TraceEvent) -> Self {
        Self { records: vec![header], lineage: Lineage::new() }
    }

    pub(crate) fn push(&mut self, ev: TraceEvent) {
        debug_assert!(
            match (ev.time(), self.records.iter().rev().find_map(TraceEvent::time)) {
                (Some(t), Some(last)) => t >= last,
                _ => true,
            },
            "trace records must be appended in time order"
        );
        self.records.push(ev);
    }

    pub(crate) fn set_lineage(&mut self, lineage: Lineage) {
        self.lineage = lineage;
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.records
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    pub fn seed(&self) -> u64 {
        match &self.records[0] {
            TraceEvent::Header { seed, .. } => *seed,
            _ => unreachable!("first record is the header"),
        }
    }

    pub fn scenario_name(&self) -> &str {
        match &self.records[0] {
            TraceEvent::Header { scenario, .. } => scenario,
            _ => unreachable!("first record is the header"),
        }
    }

    pub fn scenario_hash(&self) -> ContentHash {
        match &self.records[0] {
            TraceEvent::Header { scenario_hash, .. } => *scenario_hash,
            _ => unreachable!("first record is the header"),
        }
    }

    pub fn devices(&self) -> &[DeviceId] {
        match &self.records[0] {
            TraceEvent::Header { devices, .. } => devices,
            _ => unreachable!("first record is the header"),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses a trace and rebuilds its lineage from the strain records.
    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|source| TraceError::Json { line: i + 1, source })?);
        }
        if !matches!(records.first(), Some(TraceEvent::Header { .. })) {
            return Err(TraceError::MissingHeader);
        }
        let mut lineage = Lineage::new();
        for r in &records {
            if let TraceEvent::Strain { strain, parent, generation, birth_t, birth_device } = r {
                lineage.insert(
                    *strain,
                    LineageNode {
                        parent: *parent,
                        generation: *generation,
                        birth_time: *birth_t,
                        birth_device: birth_device.clone(),
                    },
                )?;
            }
        }
        Ok(Self { records, lineage })
    }

    /// Digest of the serialized trace.
    pub fn digest(&self) -> ContentHash {
        ContentHash::of_raw(self.to_jsonl().as_bytes())
    }
}
