//! Scenario files: TOML in, a fully resolved and validated [`Scenario`] out.
//!
//! Validation collects every problem it can find rather than stopping at the
//! first, each tagged with the path of the offending entry.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::buildchain::BuildSettings;
use crate::canonical::ContentHash;
use crate::model::{Certificate, CpuArch, DeviceClass, DeviceId, Genome, PlatformSpec, RegionId, SourceUnit, Stage};
use crate::mutation::OpKind;
use crate::netmodel::{
    calibrate_rates, impute_missing, measured_table, read_rate_table, Imputation, RateMatrix, REFERENCE_PACKAGE_BYTES,
};
use crate::time::{SimDuration, SimTime};

const DEFAULT_STOP_SECONDS: f64 = 30.0 * 24.0 * 3600.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub location: String,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {col}: {message}")]
    Parse { line: usize, col: usize, message: String },
    #[error("{}", join_errors(.0))]
    Invalid(Vec<ValidationError>),
}

fn join_errors(errs: &[ValidationError]) -> String {
    errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

impl ScenarioError {
    pub fn errors(&self) -> Vec<String> {
        match self {
            ScenarioError::Invalid(errs) => errs.iter().map(ToString::to_string).collect(),
            other => vec![other.to_string()],
        }
    }
}

// ---- raw file shape -------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    scenario: RawMeta,
    #[serde(default)]
    class: Vec<RawClass>,
    #[serde(default)]
    region: Vec<RawRegion>,
    #[serde(default)]
    device: Vec<RawDevice>,
    #[serde(default)]
    device_group: Vec<RawGroup>,
    #[serde(default)]
    rates: RawRates,
    genome: Option<RawGenome>,
    origin: RawOrigin,
    #[serde(default)]
    encounter: Vec<RawEncounter>,
    #[serde(default)]
    random_encounters: Vec<RawRandom>,
    #[serde(default)]
    kill_switch: Vec<RawKill>,
    #[serde(default)]
    uplink: Vec<RawRepeat>,
    #[serde(default, rename = "move")]
    moves: Vec<RawMove>,
    #[serde(default)]
    build: Vec<RawRepeat>,
    #[serde(default)]
    mutation: RawMutation,
    adversary: Option<RawAdversary>,
}

fn yes() -> bool {
    true
}
fn one() -> u32 {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    name: String,
    stop_time: Option<f64>,
    #[serde(default)]
    stop_when_all_infected: bool,
    package_base_bytes: Option<u64>,
    package_bytes: Option<u64>,
    #[serde(default = "yes")]
    rebuild_on_receive: bool,
    #[serde(default = "yes")]
    embed_genome: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    name: String,
    preset: Option<String>,
    stage_costs: Option<BTreeMap<String, f64>>,
    heat_per_build: Option<f64>,
    cool_rate: Option<f64>,
    throttle_threshold: Option<f64>,
    throttle_factor: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    id: String,
    #[serde(default = "yes")]
    internet: bool,
}

fn default_api() -> u32 {
    21
}
fn default_arch() -> String {
    "armv7".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDevice {
    id: String,
    class: String,
    region: String,
    #[serde(default = "default_api")]
    api: u32,
    #[serde(default = "default_arch")]
    arch: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroup {
    prefix: String,
    count: u32,
    class: String,
    region: String,
    #[serde(default = "default_api")]
    api: u32,
    #[serde(default = "default_arch")]
    arch: String,
}

fn default_calibration() -> f64 {
    REFERENCE_PACKAGE_BYTES
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRates {
    table: Option<String>,
    #[serde(default = "default_calibration")]
    calibration_bytes: f64,
    #[serde(default)]
    handshake_seconds: f64,
    #[serde(default)]
    impute: Imputation,
}

impl Default for RawRates {
    fn default() -> Self {
        Self {
            table: None,
            calibration_bytes: REFERENCE_PACKAGE_BYTES,
            handshake_seconds: 0.0,
            impute: Imputation::default(),
        }
    }
}

#[derive(Deserialize, Clone)]
#[serde(untagged)]
enum RawBlob {
    Text(String),
    Fill { fill_bytes: u64 },
}

impl RawBlob {
    fn bytes(&self, name: &str) -> Vec<u8> {
        match self {
            RawBlob::Text(s) => s.as_bytes().to_vec(),
            // Deterministic filler whose content depends on the entry name.
            RawBlob::Fill { fill_bytes } => {
                let seed = ContentHash::of_raw(name.as_bytes());
                let pattern = seed.as_bytes();
                (0..*fill_bytes as usize).map(|i| pattern[i % pattern.len()]).collect()
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenome {
    package: String,
    display_name: Option<String>,
    icon: Option<String>,
    #[serde(default)]
    manifest: BTreeMap<String, String>,
    #[serde(default)]
    sources: BTreeMap<String, RawBlob>,
    #[serde(default)]
    resources: BTreeMap<String, RawBlob>,
    #[serde(default)]
    assets: BTreeMap<String, RawBlob>,
    #[serde(default)]
    libraries: BTreeMap<String, RawBlob>,
    #[serde(default)]
    traits: Vec<String>,
    #[serde(default = "yes")]
    carries_build_tools: bool,
    #[serde(default = "yes")]
    carries_libraries_source: bool,
    min_api: Option<u32>,
    api_window: Option<u32>,
    archs: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOrigin {
    device: Option<String>,
    #[serde(default)]
    devices: Vec<String>,
    cert: Option<String>,
    #[serde(default)]
    debug_cert: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEncounter {
    at: f64,
    from: String,
    to: String,
    window: f64,
    #[serde(default)]
    bridge: bool,
    #[serde(default = "one")]
    repeat: u32,
    #[serde(default)]
    every: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRandom {
    region: String,
    rate_per_hour: f64,
    window: f64,
    #[serde(default)]
    start: f64,
    stop: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKill {
    at: f64,
    region: String,
    #[serde(default)]
    up: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRepeat {
    at: f64,
    device: String,
    #[serde(default = "one")]
    repeat: u32,
    #[serde(default)]
    every: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMove {
    at: f64,
    device: String,
    region: String,
}

#[derive(Deserialize, Clone, Copy, Debug, Default, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    None,
    EveryKTransfers,
    OnBlock,
}

fn default_ops() -> Vec<OpKind> {
    vec![OpKind::RenameDisplay, OpKind::EditSource]
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMutation {
    #[serde(default)]
    policy: PolicyKind,
    #[serde(default = "one")]
    k: u32,
    #[serde(default = "default_ops")]
    ops: Vec<OpKind>,
    #[serde(default = "one")]
    ops_per_mutation: u32,
    #[serde(default = "yes")]
    resign_on_cert_block: bool,
}

impl Default for RawMutation {
    fn default() -> Self {
        Self { policy: PolicyKind::None, k: 1, ops: default_ops(), ops_per_mutation: 1, resign_on_cert_block: true }
    }
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum RawMonitoring {
    InternetOnly,
    AllLinks,
}

fn default_probability() -> f64 {
    1.0
}
fn default_replay_after() -> f64 {
    60.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdversary {
    monitoring: RawMonitoring,
    #[serde(default = "default_probability")]
    probability: f64,
    #[serde(default)]
    compromise_budget: u32,
    #[serde(default)]
    delay_probability: f64,
    #[serde(default)]
    delay_seconds: f64,
    #[serde(default)]
    modify_probability: f64,
    #[serde(default)]
    replay_probability: f64,
    #[serde(default = "default_replay_after")]
    replay_after: f64,
    #[serde(default)]
    action: Vec<RawAction>,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ActionName {
    /// Blacklist the hash of every origin package.
    BlacklistOrigin,
    /// Blacklist every hash observed so far.
    BlacklistObserved,
    BlacklistCert,
    Compromise,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAction {
    at: f64,
    kind: ActionName,
    cert: Option<String>,
    device: Option<String>,
    #[serde(default = "yes")]
    blacklist_revealed: bool,
    #[serde(default = "one")]
    repeat: u32,
    #[serde(default)]
    every: f64,
}

// ---- resolved scenario ----------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceSpec {
    pub id: DeviceId,
    pub class: String,
    pub region: RegionId,
    pub platform: PlatformSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedEncounter {
    pub at: SimTime,
    pub from: DeviceId,
    pub to: DeviceId,
    pub window: SimDuration,
    pub bridge: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomEncounters {
    pub region: RegionId,
    pub rate_per_hour: f64,
    pub window: SimDuration,
    pub start: SimTime,
    pub stop: Option<SimTime>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MutationPolicy {
    pub policy: PolicyKind,
    pub k: u32,
    pub ops: Vec<OpKind>,
    pub ops_per_mutation: u32,
    pub resign_on_cert_block: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdversaryAction {
    BlacklistOrigin,
    BlacklistObserved,
    BlacklistCert(String),
    Compromise { device: DeviceId, blacklist_revealed: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryConfig {
    pub monitoring: crate::adversary::Monitoring,
    pub compromise_budget: u32,
    pub delay_probability: f64,
    pub delay: SimDuration,
    pub modify_probability: f64,
    pub replay_probability: f64,
    pub replay_after: SimDuration,
    pub actions: Vec<(SimTime, AdversaryAction)>,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    /// Digest of the scenario file and every file it references.
    pub source_hash: ContentHash,
    pub stop_time: SimTime,
    pub stop_when_all_infected: bool,
    pub rebuild_on_receive: bool,
    pub build_settings: BuildSettings,
    pub classes: BTreeMap<String, Arc<DeviceClass>>,
    pub regions: Vec<(RegionId, bool)>,
    pub devices: Vec<DeviceSpec>,
    pub rates: RateMatrix,
    pub genome: Arc<Genome>,
    pub origin_devices: Vec<DeviceId>,
    pub origin_cert: Certificate,
    pub encounters: Vec<ScriptedEncounter>,
    pub random_encounters: Vec<RandomEncounters>,
    pub kill_switches: Vec<(SimTime, RegionId, bool)>,
    pub uplinks: Vec<(SimTime, DeviceId)>,
    pub moves: Vec<(SimTime, DeviceId, RegionId)>,
    pub builds: Vec<(SimTime, DeviceId)>,
    pub mutation: MutationPolicy,
    pub adversary: Option<AdversaryConfig>,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

struct Ctx {
    errors: Vec<ValidationError>,
}

impl Ctx {
    fn err(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.errors.push(ValidationError { location: location.into(), message: message.into() });
    }

    fn time(&mut self, location: impl Into<String>, secs: f64) -> SimTime {
        if !(secs.is_finite() && secs >= 0.0) {
            self.err(location, format!("time must be a non-negative number, got {secs}"));
            return SimTime::ZERO;
        }
        SimTime::from_secs_f64(secs)
    }

    fn positive(&mut self, location: impl Into<String>, secs: f64) -> SimDuration {
        if !(secs.is_finite() && secs > 0.0) {
            self.err(location, format!("must be positive, got {secs}"));
            return SimDuration::from_millis(1);
        }
        SimDuration::from_secs_f64(secs)
    }

    fn probability(&mut self, location: impl Into<String>, p: f64) -> f64 {
        if !(0.0..=1.0).contains(&p) {
            self.err(location, format!("probability must lie in [0, 1], got {p}"));
            return 0.0;
        }
        p
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let src = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
        Self::from_toml_str(&src, path.parent())
    }

    /// Parses and validates a scenario. Relative file references resolve
    /// against `base_dir`.
    pub fn from_toml_str(src: &str, base_dir: Option<&Path>) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(src).map_err(|e| {
            let (line, col) = e.span().map_or((1, 1), |s| line_col(src, s.start));
            ScenarioError::Parse { line, col, message: e.message().trim().to_string() }
        })?;
        let mut hash_input = src.as_bytes().to_vec();
        let mut cx = Ctx { errors: Vec::new() };

        // classes
        let mut classes: BTreeMap<String, Arc<DeviceClass>> = BTreeMap::new();
        for (i, c) in raw.class.iter().enumerate() {
            let loc = format!("class[{i}] ({})", c.name);
            if classes.contains_key(&c.name) {
                cx.err(&loc, "duplicate class name");
                continue;
            }
            if let Some(class) = resolve_class(&mut cx, &loc, c) {
                classes.insert(c.name.clone(), Arc::new(class));
            }
        }

        // regions
        let mut regions = Vec::new();
        let mut region_ids = BTreeSet::new();
        for (i, r) in raw.region.iter().enumerate() {
            if !region_ids.insert(RegionId(r.id.clone())) {
                cx.err(format!("region[{i}] ({})", r.id), "duplicate region id");
            }
            regions.push((RegionId(r.id.clone()), r.internet));
        }
        if regions.is_empty() {
            cx.err("region", "at least one region is required");
        }

        // devices
        let mut devices: Vec<DeviceSpec> = Vec::new();
        let mut device_ids = BTreeSet::new();
        let mut add_device = |cx: &mut Ctx, loc: String, id: String, class: &str, region: &str, api: u32, arch: &str| {
            if !device_ids.insert(DeviceId(id.clone())) {
                cx.err(&loc, format!("duplicate device id {id}"));
                return;
            }
            if !classes.contains_key(class) {
                match DeviceClass::preset(class) {
                    Some(p) => {
                        classes.insert(class.to_string(), Arc::new(p));
                    }
                    None => cx.err(format!("{loc}.class"), format!("unknown class {class}")),
                }
            }
            if !region_ids.contains(&RegionId(region.to_string())) {
                cx.err(format!("{loc}.region"), format!("unknown region {region}"));
            }
            let arch: CpuArch = match arch.parse() {
                Ok(a) => a,
                Err(_) => {
                    cx.err(format!("{loc}.arch"), format!("unknown cpu architecture {arch}"));
                    CpuArch::Armv7
                }
            };
            let platform = match PlatformSpec::new(api, arch) {
                Ok(p) => p,
                Err(e) => {
                    cx.err(format!("{loc}.api"), e.to_string());
                    PlatformSpec { api_level: 1, cpu_arch: arch }
                }
            };
            devices.push(DeviceSpec {
                id: DeviceId(id),
                class: class.to_string(),
                region: RegionId(region.to_string()),
                platform,
            });
        };
        for (i, d) in raw.device.iter().enumerate() {
            add_device(&mut cx, format!("device[{i}] ({})", d.id), d.id.clone(), &d.class, &d.region, d.api, &d.arch);
        }
        for (i, g) in raw.device_group.iter().enumerate() {
            if g.count == 0 {
                cx.err(format!("device_group[{i}].count"), "count must be positive");
            }
            let width = g.count.to_string().len();
            for n in 1..=g.count {
                let id = format!("{}{:0width$}", g.prefix, n);
                add_device(&mut cx, format!("device_group[{i}] ({id})"), id, &g.class, &g.region, g.api, &g.arch);
            }
        }
        if devices.is_empty() {
            cx.err("device", "at least one device is required");
        }
        let class_of: BTreeMap<DeviceId, String> = devices.iter().map(|d| (d.id.clone(), d.class.clone())).collect();
        let check_device = |cx: &mut Ctx, loc: String, id: &str| -> DeviceId {
            let id = DeviceId(id.to_string());
            if !class_of.contains_key(&id) {
                cx.err(loc, format!("unknown device {id}"));
            }
            id
        };
        let check_region = |cx: &mut Ctx, loc: String, id: &str| -> RegionId {
            let id = RegionId(id.to_string());
            if !region_ids.contains(&id) {
                cx.err(loc, format!("unknown region {id}"));
            }
            id
        };

        // rates
        let rates = {
            let loc = "rates";
            let mut table = match &raw.rates.table {
                None => measured_table(),
                Some(rel) => {
                    let path = base_dir.map_or_else(|| PathBuf::from(rel), |b| b.join(rel));
                    match std::fs::read(&path) {
                        Ok(bytes) => {
                            hash_input.extend_from_slice(&bytes);
                            read_rate_table(bytes.as_slice()).unwrap_or_else(|e| {
                                cx.err(format!("{loc}.table ({})", path.display()), e.to_string());
                                BTreeMap::new()
                            })
                        }
                        Err(e) => {
                            cx.err(format!("{loc}.table"), format!("cannot read {}: {e}", path.display()));
                            BTreeMap::new()
                        }
                    }
                }
            };
            let used: BTreeSet<String> = classes.keys().cloned().collect();
            impute_missing(&mut table, &used, raw.rates.impute);
            if !(raw.rates.calibration_bytes > 0.0) {
                cx.err(format!("{loc}.calibration_bytes"), "must be positive");
            }
            if !(raw.rates.handshake_seconds >= 0.0) {
                cx.err(format!("{loc}.handshake_seconds"), "must be non-negative");
            }
            calibrate_rates(&table, raw.rates.calibration_bytes, raw.rates.handshake_seconds).unwrap_or_else(|e| {
                cx.err(loc, e.to_string());
                RateMatrix::new(raw.rates.handshake_seconds)
            })
        };
        let check_pair = |cx: &mut Ctx, loc: String, from: &DeviceId, to: &DeviceId| {
            if let (Some(s), Some(r)) = (class_of.get(from), class_of.get(to)) {
                if !rates.contains(s, r) {
                    cx.err(loc, format!("UnknownPair: no transfer rate for {s} -> {r}"));
                }
            }
        };

        // genome
        let genome = match &raw.genome {
            None => default_genome(),
            Some(g) => resolve_genome(&mut cx, g),
        };

        // origin
        let mut origin_devices = Vec::new();
        for (i, id) in raw.origin.device.iter().chain(&raw.origin.devices).enumerate() {
            let d = check_device(&mut cx, format!("origin.devices[{i}]"), id);
            if origin_devices.contains(&d) {
                cx.err(format!("origin.devices[{i}]"), format!("device {d} listed twice"));
            }
            origin_devices.push(d);
        }
        if origin_devices.is_empty() {
            cx.err("origin", "an origin device is required");
        }
        let origin_cert = match (&raw.origin.cert, raw.origin.debug_cert) {
            (_, true) => Certificate::debug(),
            (Some(id), false) => Certificate::new(id.clone(), false),
            (None, false) => Certificate::new("origin", false),
        };

        // schedule
        let mut encounters = Vec::new();
        for (i, e) in raw.encounter.iter().enumerate() {
            let loc = format!("encounter[{i}]");
            let at = cx.time(format!("{loc}.at"), e.at);
            let from = check_device(&mut cx, format!("{loc}.from"), &e.from);
            let to = check_device(&mut cx, format!("{loc}.to"), &e.to);
            if from == to {
                cx.err(&loc, "a device cannot meet itself");
            }
            let window = cx.positive(format!("{loc}.window"), e.window);
            if e.repeat == 0 {
                cx.err(format!("{loc}.repeat"), "repeat must be positive");
            }
            if e.repeat > 1 && !(e.every > 0.0) {
                cx.err(format!("{loc}.every"), "repeated encounters need a positive interval");
            }
            check_pair(&mut cx, loc.clone(), &from, &to);
            let every = SimDuration::from_secs_f64(e.every.max(0.0));
            for n in 0..e.repeat as u64 {
                encounters.push(ScriptedEncounter {
                    at: at + SimDuration(every.0 * n),
                    from: from.clone(),
                    to: to.clone(),
                    window,
                    bridge: e.bridge,
                });
            }
        }

        let mut moves = Vec::new();
        for (i, m) in raw.moves.iter().enumerate() {
            let loc = format!("move[{i}]");
            let at = cx.time(format!("{loc}.at"), m.at);
            let d = check_device(&mut cx, format!("{loc}.device"), &m.device);
            let r = check_region(&mut cx, format!("{loc}.region"), &m.region);
            moves.push((at, d, r));
        }

        let mut random_encounters = Vec::new();
        for (i, r) in raw.random_encounters.iter().enumerate() {
            let loc = format!("random_encounters[{i}]");
            let region = check_region(&mut cx, format!("{loc}.region"), &r.region);
            if !(r.rate_per_hour.is_finite() && r.rate_per_hour > 0.0) {
                cx.err(format!("{loc}.rate_per_hour"), "must be positive");
            }
            let window = cx.positive(format!("{loc}.window"), r.window);
            let start = cx.time(format!("{loc}.start"), r.start);
            let stop = r.stop.map(|s| cx.time(format!("{loc}.stop"), s));
            // Every class pair that can meet in this region needs a rate.
            let members: BTreeSet<&String> = devices
                .iter()
                .filter(|d| d.region == region)
                .map(|d| &d.id.0)
                .chain(moves.iter().filter(|m| m.2 == region).map(|m| &m.1 .0))
                .collect();
            let member_classes: BTreeSet<&String> =
                members.iter().filter_map(|id| class_of.get(&DeviceId((*id).clone()))).collect();
            for s in &member_classes {
                for t in &member_classes {
                    if !rates.contains(s, t) {
                        cx.err(&loc, format!("UnknownPair: no transfer rate for {s} -> {t}"));
                    }
                }
            }
            random_encounters.push(RandomEncounters { region, rate_per_hour: r.rate_per_hour, window, start, stop });
        }

        let mut kill_switches = Vec::new();
        for (i, k) in raw.kill_switch.iter().enumerate() {
            let at = cx.time(format!("kill_switch[{i}].at"), k.at);
            let r = check_region(&mut cx, format!("kill_switch[{i}].region"), &k.region);
            kill_switches.push((at, r, k.up));
        }

        let expand = |cx: &mut Ctx, what: &str, items: &[RawRepeat]| {
            let mut out = Vec::new();
            for (i, u) in items.iter().enumerate() {
                let loc = format!("{what}[{i}]");
                let at = cx.time(format!("{loc}.at"), u.at);
                let d = check_device(cx, format!("{loc}.device"), &u.device);
                if u.repeat > 1 && !(u.every > 0.0) {
                    cx.err(format!("{loc}.every"), "repeated events need a positive interval");
                }
                let every = SimDuration::from_secs_f64(u.every.max(0.0));
                for n in 0..u.repeat as u64 {
                    out.push((at + SimDuration(every.0 * n), d.clone()));
                }
            }
            out
        };
        let uplinks = expand(&mut cx, "uplink", &raw.uplink);
        let builds = expand(&mut cx, "build", &raw.build);

        let m = &raw.mutation;
        if m.policy != PolicyKind::None && m.ops.is_empty() {
            cx.err("mutation.ops", "a mutation policy needs at least one op kind");
        }
        if m.k == 0 {
            cx.err("mutation.k", "k must be positive");
        }
        if m.ops_per_mutation == 0 {
            cx.err("mutation.ops_per_mutation", "must be positive");
        }
        let mutation = MutationPolicy {
            policy: m.policy,
            k: m.k.max(1),
            ops: m.ops.clone(),
            ops_per_mutation: m.ops_per_mutation.max(1),
            resign_on_cert_block: m.resign_on_cert_block,
        };

        let adversary = raw.adversary.as_ref().map(|a| {
            let p = cx.probability("adversary.probability", a.probability);
            let monitoring = match a.monitoring {
                RawMonitoring::InternetOnly => crate::adversary::Monitoring::InternetOnly,
                RawMonitoring::AllLinks => crate::adversary::Monitoring::AllLinks { probability: p },
            };
            let delay_probability = cx.probability("adversary.delay_probability", a.delay_probability);
            let modify_probability = cx.probability("adversary.modify_probability", a.modify_probability);
            let replay_probability = cx.probability("adversary.replay_probability", a.replay_probability);
            if !(a.delay_seconds >= 0.0) {
                cx.err("adversary.delay_seconds", "must be non-negative");
            }
            let replay_after = cx.positive("adversary.replay_after", a.replay_after);
            let mut actions = Vec::new();
            for (i, act) in a.action.iter().enumerate() {
                let loc = format!("adversary.action[{i}]");
                let at = cx.time(format!("{loc}.at"), act.at);
                let action = match act.kind {
                    ActionName::BlacklistOrigin => AdversaryAction::BlacklistOrigin,
                    ActionName::BlacklistObserved => AdversaryAction::BlacklistObserved,
                    ActionName::BlacklistCert => match &act.cert {
                        Some(c) => AdversaryAction::BlacklistCert(c.clone()),
                        None => {
                            cx.err(format!("{loc}.cert"), "blacklist_cert needs a cert id");
                            continue;
                        }
                    },
                    ActionName::Compromise => match &act.device {
                        Some(d) => AdversaryAction::Compromise {
                            device: check_device(&mut cx, format!("{loc}.device"), d),
                            blacklist_revealed: act.blacklist_revealed,
                        },
                        None => {
                            cx.err(format!("{loc}.device"), "compromise needs a device");
                            continue;
                        }
                    },
                };
                if act.repeat > 1 && !(act.every > 0.0) {
                    cx.err(format!("{loc}.every"), "repeated actions need a positive interval");
                }
                let every = SimDuration::from_secs_f64(act.every.max(0.0));
                for n in 0..act.repeat.max(1) as u64 {
                    actions.push((at + SimDuration(every.0 * n), action.clone()));
                }
            }
            AdversaryConfig {
                monitoring,
                compromise_budget: a.compromise_budget,
                delay_probability,
                delay: SimDuration::from_secs_f64(a.delay_seconds.max(0.0)),
                modify_probability,
                replay_probability,
                replay_after,
                actions,
            }
        });

        let stop_time = cx.time("scenario.stop_time", raw.scenario.stop_time.unwrap_or(DEFAULT_STOP_SECONDS));
        let defaults = BuildSettings::default();
        let build_settings = BuildSettings {
            package_base_bytes: raw.scenario.package_base_bytes.unwrap_or(defaults.package_base_bytes),
            embed_genome: raw.scenario.embed_genome,
            min_package_bytes: raw.scenario.package_bytes.unwrap_or(0),
        };

        if !cx.errors.is_empty() {
            return Err(ScenarioError::Invalid(cx.errors));
        }
        Ok(Scenario {
            name: raw.scenario.name,
            source_hash: ContentHash::of_raw(&hash_input),
            stop_time,
            stop_when_all_infected: raw.scenario.stop_when_all_infected,
            rebuild_on_receive: raw.scenario.rebuild_on_receive,
            build_settings,
            classes,
            regions,
            devices,
            rates,
            genome: Arc::new(genome),
            origin_devices,
            origin_cert,
            encounters,
            random_encounters,
            kill_switches,
            uplinks,
            moves,
            builds,
            mutation,
            adversary,
        })
    }

    pub fn class_of(&self, device: &DeviceId) -> Option<&str> {
        self.devices.iter().find(|d| &d.id == device).map(|d| d.class.as_str())
    }
}

fn resolve_class(cx: &mut Ctx, loc: &str, c: &RawClass) -> Option<DeviceClass> {
    let base = match &c.preset {
        Some(p) => match DeviceClass::preset(p) {
            Some(class) => Some(class),
            None => {
                cx.err(format!("{loc}.preset"), format!("unknown preset {p}"));
                return None;
            }
        },
        None => None,
    };
    let mut costs = base.as_ref().map(|b| b.base_stage_costs.clone()).unwrap_or_default();
    if let Some(given) = &c.stage_costs {
        for (name, secs) in given {
            match Stage::ALL.iter().find(|s| s.as_str() == name) {
                Some(stage) => {
                    costs.insert(*stage, *secs);
                }
                None => cx.err(format!("{loc}.stage_costs.{name}"), "unknown build stage"),
            }
        }
    }
    if let Some(missing) = Stage::ALL.iter().find(|s| !costs.contains_key(s)) {
        cx.err(format!("{loc}.stage_costs"), format!("missing cost for stage {missing}"));
        return None;
    }
    let mut thermal = base.map(|b| b.thermal).unwrap_or(crate::model::ThermalParams {
        heat_per_build: 1.0,
        cool_rate: 1.0,
        throttle_threshold: 1000.0,
        throttle_factor: 1.0,
    });
    if let Some(v) = c.heat_per_build {
        thermal.heat_per_build = v;
    }
    if let Some(v) = c.cool_rate {
        thermal.cool_rate = v;
    }
    if let Some(v) = c.throttle_threshold {
        thermal.throttle_threshold = v;
    }
    if let Some(v) = c.throttle_factor {
        thermal.throttle_factor = v;
    }
    match DeviceClass::new(c.name.clone(), costs, thermal) {
        Ok(class) => Some(class),
        Err(e) => {
            cx.err(loc, e.to_string());
            None
        }
    }
}

fn resolve_genome(cx: &mut Ctx, g: &RawGenome) -> Genome {
    let mut b = Genome::builder(g.package.clone())
        .carries_build_tools(g.carries_build_tools)
        .carries_libraries_source(g.carries_libraries_source);
    if let Some(n) = &g.display_name {
        b = b.display_name(n.clone());
    }
    if let Some(i) = &g.icon {
        b = b.icon(i.clone());
    }
    for (k, v) in &g.manifest {
        b = b.manifest_entry(k.clone(), v.clone());
    }
    for (k, v) in &g.sources {
        b = b.source(k.clone(), SourceUnit::new(v.bytes(k)));
    }
    for (k, v) in &g.resources {
        b = b.resource(k.clone(), v.bytes(k));
    }
    for (k, v) in &g.assets {
        b = b.asset(k.clone(), v.bytes(k));
    }
    for (k, v) in &g.libraries {
        b = b.library(k.clone(), v.bytes(k));
    }
    for t in &g.traits {
        b = b.trait_tag(t.clone());
    }
    if let Some(api) = g.min_api {
        b = b.min_api_level(api);
    }
    if let Some(w) = g.api_window {
        b = b.api_window(w);
    }
    if let Some(archs) = &g.archs {
        let mut parsed = Vec::new();
        for a in archs {
            match a.parse::<CpuArch>() {
                Ok(x) => parsed.push(x),
                Err(_) => cx.err("genome.archs", format!("unknown cpu architecture {a}")),
            }
        }
        b = b.supported_archs(parsed);
    }
    b.build().unwrap_or_else(|e| {
        cx.err("genome", e.to_string());
        default_genome()
    })
}

/// The genome used when a scenario does not define one.
pub fn default_genome() -> Genome {
    Genome::builder("org.viralsim.app")
        .display_name("Viral")
        .manifest_entry("permission", "BLUETOOTH")
        .source("Main", SourceUnit::new("class Main { void spread() {} }"))
        .source("Beam", SourceUnit::new("class Beam { void send() {} }"))
        .resource("icon", "icon-png")
        .library("support", "support-jar")
        .trait_tag("chat")
        .build()
        .expect("default genome is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[scenario]
name = "minimal"

[[region]]
id = "r"

[[device]]
id = "a"
class = "nexus_5"
region = "r"

[[device]]
id = "b"
class = "nexus_6"
region = "r"

[origin]
device = "a"

[[encounter]]
at = 10
from = "a"
to = "b"
window = 600
"#;

    #[test]
    fn minimal_scenario_resolves() {
        let s = Scenario::from_toml_str(MINIMAL, None).unwrap();
        assert_eq!(s.devices.len(), 2);
        assert_eq!(s.encounters.len(), 1);
        assert!(s.rates.contains("nexus_5", "nexus_6"));
        assert_eq!(s.class_of(&DeviceId::from("b")), Some("nexus_6"));
    }

    #[test]
    fn parse_error_has_position() {
        let err = Scenario::from_toml_str("[scenario]\nname = \n", None).unwrap_err();
        match err {
            ScenarioError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn all_errors_reported_with_locations() {
        let src = MINIMAL.replace("to = \"b\"", "to = \"zz\"").replace("class = \"nexus_6\"", "class = \"nope\"");
        let errs = Scenario::from_toml_str(&src, None).unwrap_err().errors();
        assert!(errs.iter().any(|e| e.starts_with("encounter[0].to") && e.contains("zz")), "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("device[1] (b).class")), "{errs:?}");
    }

    #[test]
    fn missing_pair_named() {
        let src = MINIMAL.replace("class = \"nexus_6\"", "class = \"nexus_5\"")
            + "\n[rates]\nimpute = \"none\"\n";
        let errs = Scenario::from_toml_str(&src, None).unwrap_err().errors();
        assert!(errs.iter().any(|e| e.contains("UnknownPair") && e.contains("nexus_5 -> nexus_5")), "{errs:?}");
    }

    #[test]
    fn negative_cool_rate_rejected() {
        let src = MINIMAL.to_string() + "\n[[class]]\nname = \"hot\"\npreset = \"nexus_5\"\ncool_rate = -1.0\n";
        let errs = Scenario::from_toml_str(&src, None).unwrap_err().errors();
        assert!(errs.iter().any(|e| e.starts_with("class[0] (hot)")), "{errs:?}");
    }

    #[test]
    fn groups_expand_with_padded_ids() {
        let src = MINIMAL.to_string()
            + "\n[[device_group]]\nprefix = \"p\"\ncount = 12\nclass = \"nexus_6\"\nregion = \"r\"\n";
        let s = Scenario::from_toml_str(&src, None).unwrap();
        assert_eq!(s.devices.len(), 14);
        assert!(s.devices.iter().any(|d| d.id.0 == "p01"));
        assert!(s.devices.iter().any(|d| d.id.0 == "p12"));
    }
}
