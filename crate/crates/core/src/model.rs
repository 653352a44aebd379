//! Domain types shared by the build chain, devices, mutation and the engine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::buildchain::BuildCache;
use crate::canonical::{canonical_hash, Blob, Canonical, ContentHash, Encoder};
use crate::time::SimTime;

/// Identity of a distinct genome content.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrainId(pub ContentHash);

impl StrainId {
    pub fn short(&self) -> String {
        self.0.short()
    }
}

impl fmt::Debug for StrainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StrainId({})", self.0.short())
    }
}

impl fmt::Display for StrainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl Canonical for StrainId {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.0)
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub String);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DeviceId {
    fn from(s: &str) -> Self {
        DeviceId(s.to_string())
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(pub String);

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RegionId {
    fn from(s: &str) -> Self {
        RegionId(s.to_string())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpuArch {
    Armv7,
    Arm64,
    X86,
    X86_64,
}

impl CpuArch {
    pub const ALL: [CpuArch; 4] = [CpuArch::Armv7, CpuArch::Arm64, CpuArch::X86, CpuArch::X86_64];

    pub fn as_str(self) -> &'static str {
        match self {
            CpuArch::Armv7 => "armv7",
            CpuArch::Arm64 => "arm64",
            CpuArch::X86 => "x86",
            CpuArch::X86_64 => "x86_64",
        }
    }
}

impl FromStr for CpuArch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CpuArch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown cpu architecture {s:?}"))
    }
}

impl fmt::Display for CpuArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Canonical for CpuArch {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(self.as_str())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct PlatformSpec {
    pub api_level: u32,
    pub cpu_arch: CpuArch,
}

impl PlatformSpec {
    pub fn new(api_level: u32, cpu_arch: CpuArch) -> Result<Self, ModelError> {
        if api_level == 0 {
            return Err(ModelError::InvalidPlatform("api_level must be at least 1".into()));
        }
        Ok(Self { api_level, cpu_arch })
    }
}

impl fmt::Display for PlatformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "api{}/{}", self.api_level, self.cpu_arch)
    }
}

impl Canonical for PlatformSpec {
    fn encode(&self, enc: &mut Encoder) {
        enc.record("PlatformSpec", 2);
        self.api_level.encode(enc);
        self.cpu_arch.encode(enc);
    }
}

/// A signing identity. The key never leaves this type; only the build
/// chain's signing step can produce signatures with it.
#[derive(Clone, PartialEq, Eq)]
pub struct Certificate {
    cert_id: String,
    is_debug: bool,
    key: [u8; 32],
}

/// Identity of the stock debug key shipped inside every app build.
pub const DEBUG_CERT_ID: &str = "android-debug";

impl Certificate {
    pub fn new(cert_id: impl Into<String>, is_debug: bool) -> Self {
        let cert_id = cert_id.into();
        let key = *ContentHash::of_raw(format!("viralsim/cert-key/{cert_id}").as_bytes()).as_bytes();
        Self { cert_id, is_debug, key }
    }

    pub fn debug() -> Self {
        Self::new(DEBUG_CERT_ID, true)
    }

    pub fn cert_id(&self) -> &str {
        &self.cert_id
    }

    pub fn is_debug(&self) -> bool {
        self.is_debug
    }

    pub(crate) fn sign_digest(&self, digest: &ContentHash) -> ContentHash {
        let mut msg = Vec::with_capacity(80);
        msg.extend_from_slice(b"viralsim/sig");
        msg.extend_from_slice(&self.key);
        msg.extend_from_slice(digest.as_bytes());
        ContentHash::of_raw(&msg)
    }

    pub(crate) fn check_digest(&self, digest: &ContentHash, signature: &ContentHash) -> bool {
        self.sign_digest(digest) == *signature
    }
}

impl fmt::Debug for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Certificate")
            .field("cert_id", &self.cert_id)
            .field("is_debug", &self.is_debug)
            .finish_non_exhaustive()
    }
}

impl Canonical for Certificate {
    fn encode(&self, enc: &mut Encoder) {
        enc.record("Certificate", 2);
        self.cert_id.encode(enc);
        self.is_debug.encode(enc);
    }
}

/// One compilable source unit with its declared resource references.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct SourceUnit {
    pub bytes: Blob,
    pub resource_refs: BTreeSet<String>,
}

impl SourceUnit {
    pub fn new(bytes: impl Into<Blob>) -> Self {
        Self { bytes: bytes.into(), resource_refs: BTreeSet::new() }
    }

    pub fn with_refs<I, S>(bytes: impl Into<Blob>, refs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { bytes: bytes.into(), resource_refs: refs.into_iter().map(Into::into).collect() }
    }
}

impl Canonical for SourceUnit {
    fn encode(&self, enc: &mut Encoder) {
        enc.record("SourceUnit", 2);
        self.bytes.encode(enc);
        self.resource_refs.encode(enc);
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("package_name must not be empty")]
    EmptyPackageName,
    #[error("duplicate {map} entry {name:?}")]
    DuplicateName { map: &'static str, name: String },
    #[error("genome supports no cpu architecture")]
    NoSupportedArch,
    #[error("invalid platform: {0}")]
    InvalidPlatform(String),
    #[error("invalid device class {class:?}: {reason}")]
    InvalidDeviceClass { class: String, reason: String },
}

/// The app's self-description: everything needed to rebuild it, and the
/// unit of mutation and replication.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Genome {
    pub(crate) package_name: String,
    pub(crate) display_name: String,
    pub(crate) icon_id: String,
    pub(crate) manifest: BTreeMap<String, String>,
    pub(crate) sources: BTreeMap<String, SourceUnit>,
    pub(crate) resources: BTreeMap<String, Blob>,
    pub(crate) assets: BTreeMap<String, Blob>,
    pub(crate) libraries: BTreeMap<String, Blob>,
    pub(crate) traits: BTreeSet<String>,
    pub(crate) carries_build_tools: bool,
    pub(crate) carries_libraries_source: bool,
    pub(crate) min_api_level: u32,
    pub(crate) api_window: u32,
    pub(crate) supported_archs: BTreeSet<CpuArch>,
    pub(crate) generation: u32,
    pub(crate) strain_id: StrainId,
    pub(crate) parent_strain: Option<StrainId>,
}

impl Genome {
    pub fn builder(package_name: impl Into<String>) -> GenomeBuilder {
        GenomeBuilder::new(package_name)
    }

    pub fn package_name(&self) -> &str {
        &self.package_name
    }
    pub fn display_name(&self) -> &str {
        &self.display_name
    }
    pub fn icon_id(&self) -> &str {
        &self.icon_id
    }
    pub fn manifest(&self) -> &BTreeMap<String, String> {
        &self.manifest
    }
    pub fn sources(&self) -> &BTreeMap<String, SourceUnit> {
        &self.sources
    }
    pub fn resources(&self) -> &BTreeMap<String, Blob> {
        &self.resources
    }
    pub fn assets(&self) -> &BTreeMap<String, Blob> {
        &self.assets
    }
    pub fn libraries(&self) -> &BTreeMap<String, Blob> {
        &self.libraries
    }
    pub fn traits(&self) -> &BTreeSet<String> {
        &self.traits
    }
    pub fn carries_build_tools(&self) -> bool {
        self.carries_build_tools
    }
    pub fn carries_libraries_source(&self) -> bool {
        self.carries_libraries_source
    }
    pub fn min_api_level(&self) -> u32 {
        self.min_api_level
    }
    /// Number of API levels above the build target a package still runs on.
    pub fn api_window(&self) -> u32 {
        self.api_window
    }
    pub fn supported_archs(&self) -> &BTreeSet<CpuArch> {
        &self.supported_archs
    }
    pub fn generation(&self) -> u32 {
        self.generation
    }
    pub fn strain_id(&self) -> StrainId {
        self.strain_id
    }
    pub fn parent_strain(&self) -> Option<StrainId> {
        self.parent_strain
    }

    /// Whether a device platform lies inside the range this genome can be
    /// rebuilt for.
    pub fn supports(&self, platform: &PlatformSpec) -> bool {
        self.supported_archs.contains(&platform.cpu_arch) && platform.api_level >= self.min_api_level
    }

    fn encode_content(&self, enc: &mut Encoder) {
        enc.record("Genome", 15);
        self.package_name.encode(enc);
        self.display_name.encode(enc);
        self.icon_id.encode(enc);
        self.manifest.encode(enc);
        self.sources.encode(enc);
        self.resources.encode(enc);
        self.assets.encode(enc);
        self.libraries.encode(enc);
        self.traits.encode(enc);
        self.carries_build_tools.encode(enc);
        self.carries_libraries_source.encode(enc);
        self.min_api_level.encode(enc);
        self.api_window.encode(enc);
        self.supported_archs.encode(enc);
        self.generation.encode(enc);
    }

    /// Content hash over every field except the lineage links.
    pub fn derive_strain_id(&self) -> StrainId {
        let mut enc = Encoder::new();
        self.encode_content(&mut enc);
        StrainId(ContentHash::of_raw(&enc.into_bytes()))
    }

    pub(crate) fn reseal(&mut self) {
        self.strain_id = self.derive_strain_id();
    }

    /// Total bytes of all source units.
    pub fn source_bytes(&self) -> u64 {
        self.sources.values().map(|s| s.bytes.len() as u64).sum()
    }
}

/// Free-function form of [`Genome::derive_strain_id`].
pub fn derive_strain_id(genome: &Genome) -> StrainId {
    genome.derive_strain_id()
}

impl Canonical for Genome {
    fn encode(&self, enc: &mut Encoder) {
        enc.record("GenomeWithLineage", 3);
        self.encode_content(enc);
        self.strain_id.encode(enc);
        self.parent_strain.encode(enc);
    }
}

/// Builds a [`Genome`], rejecting duplicate names as they are added.
#[derive(Debug, Clone)]
pub struct GenomeBuilder {
    genome: Genome,
    duplicate: Option<ModelError>,
}

impl GenomeBuilder {
    pub fn new(package_name: impl Into<String>) -> Self {
        let package_name = package_name.into();
        Self {
            genome: Genome {
                display_name: package_name.clone(),
                package_name,
                icon_id: "ic_launcher".into(),
                manifest: BTreeMap::new(),
                sources: BTreeMap::new(),
                resources: BTreeMap::new(),
                assets: BTreeMap::new(),
                libraries: BTreeMap::new(),
                traits: BTreeSet::new(),
                carries_build_tools: false,
                carries_libraries_source: false,
                min_api_level: 1,
                api_window: 2,
                supported_archs: CpuArch::ALL.into_iter().collect(),
                generation: 0,
                strain_id: StrainId(ContentHash::from_bytes([0; 32])),
                parent_strain: None,
            },
            duplicate: None,
        }
    }

    fn note_dup(&mut self, map: &'static str, name: &str, was_present: bool) {
        if was_present && self.duplicate.is_none() {
            self.duplicate = Some(ModelError::DuplicateName { map, name: name.to_string() });
        }
    }

    pub fn display_name(mut self, name: impl Into<String>) -> Self {
        self.genome.display_name = name.into();
        self
    }

    pub fn icon(mut self, icon_id: impl Into<String>) -> Self {
        self.genome.icon_id = icon_id.into();
        self
    }

    pub fn manifest_entry(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        let key = key.into();
        let dup = self.genome.manifest.insert(key.clone(), value.into()).is_some();
        self.note_dup("manifest", &key, dup);
        self
    }

    pub fn source(mut self, name: impl Into<String>, unit: SourceUnit) -> Self {
        let name = name.into();
        let dup = self.genome.sources.insert(name.clone(), unit).is_some();
        self.note_dup("sources", &name, dup);
        self
    }

    pub fn resource(mut self, name: impl Into<String>, bytes: impl Into<Blob>) -> Self {
        let name = name.into();
        let dup = self.genome.resources.insert(name.clone(), bytes.into()).is_some();
        self.note_dup("resources", &name, dup);
        self
    }

    pub fn asset(mut self, name: impl Into<String>, bytes: impl Into<Blob>) -> Self {
        let name = name.into();
        let dup = self.genome.assets.insert(name.clone(), bytes.into()).is_some();
        self.note_dup("assets", &name, dup);
        self
    }

    pub fn library(mut self, name: impl Into<String>, bytes: impl Into<Blob>) -> Self {
        let name = name.into();
        let dup = self.genome.libraries.insert(name.clone(), bytes.into()).is_some();
        self.note_dup("libraries", &name, dup);
        self
    }

    pub fn trait_tag(mut self, tag: impl Into<String>) -> Self {
        let tag = tag.into();
        let dup = !self.genome.traits.insert(tag.clone());
        self.note_dup("traits", &tag, dup);
        self
    }

    pub fn carries_build_tools(mut self, yes: bool) -> Self {
        self.genome.carries_build_tools = yes;
        self
    }

    pub fn carries_libraries_source(mut self, yes: bool) -> Self {
        self.genome.carries_libraries_source = yes;
        self
    }

    pub fn min_api_level(mut self, level: u32) -> Self {
        self.genome.min_api_level = level;
        self
    }

    pub fn api_window(mut self, window: u32) -> Self {
        self.genome.api_window = window;
        self
    }

    pub fn supported_archs(mut self, archs: impl IntoIterator<Item = CpuArch>) -> Self {
        self.genome.supported_archs = archs.into_iter().collect();
        self
    }

    pub fn build(self) -> Result<Genome, ModelError> {
        if let Some(err) = self.duplicate {
            return Err(err);
        }
        let mut genome = self.genome;
        if genome.package_name.is_empty() {
            return Err(ModelError::EmptyPackageName);
        }
        if genome.supported_archs.is_empty() {
            return Err(ModelError::NoSupportedArch);
        }
        genome.reseal();
        Ok(genome)
    }
}

/// The six stages of the on-device build chain, in execution order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ResourceCompile,
    SourceCompile,
    BytecodeConvert,
    DexMerge,
    Assemble,
    Sign,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::ResourceCompile,
        Stage::SourceCompile,
        Stage::BytecodeConvert,
        Stage::DexMerge,
        Stage::Assemble,
        Stage::Sign,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ResourceCompile => "resource_compile",
            Stage::SourceCompile => "source_compile",
            Stage::BytecodeConvert => "bytecode_convert",
            Stage::DexMerge => "dex_merge",
            Stage::Assemble => "assemble",
            Stage::Sign => "sign",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct ThermalParams {
    /// Degrees added when a build completes.
    pub heat_per_build: f64,
    /// Degrees shed per idle second.
    pub cool_rate: f64,
    pub throttle_threshold: f64,
    pub throttle_factor: f64,
}

impl ThermalParams {
    /// Build-cost multiplier at `temperature`: 1 below the threshold,
    /// `throttle_factor` at or above it.
    pub fn throttle_multiplier(&self, temperature: f64) -> f64 {
        if temperature >= self.throttle_threshold {
            self.throttle_factor
        } else {
            1.0
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct DeviceClass {
    pub class_name: String,
    pub base_stage_costs: BTreeMap<Stage, f64>,
    pub thermal: ThermalParams,
}

impl DeviceClass {
    pub fn new(
        class_name: impl Into<String>,
        base_stage_costs: BTreeMap<Stage, f64>,
        thermal: ThermalParams,
    ) -> Result<Self, ModelError> {
        let class = Self { class_name: class_name.into(), base_stage_costs, thermal };
        class.validate()?;
        Ok(class)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::InvalidDeviceClass { class: self.class_name.clone(), reason };
        for stage in Stage::ALL {
            match self.base_stage_costs.get(&stage) {
                None => return Err(fail(format!("missing cost for stage {stage}"))),
                Some(c) if !(c.is_finite() && *c > 0.0) => {
                    return Err(fail(format!("cost for stage {stage} must be > 0, got {c}")))
                }
                _ => {}
            }
        }
        let t = &self.thermal;
        for (name, v) in [
            ("heat_per_build", t.heat_per_build),
            ("cool_rate", t.cool_rate),
            ("throttle_threshold", t.throttle_threshold),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(fail(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(t.throttle_factor.is_finite() && t.throttle_factor >= 1.0) {
            return Err(fail(format!("throttle_factor must be >= 1, got {}", t.throttle_factor)));
        }
        Ok(())
    }

    pub fn stage_cost(&self, stage: Stage) -> f64 {
        self.base_stage_costs[&stage]
    }

    pub fn base_build_seconds(&self) -> f64 {
        Stage::ALL.iter().map(|s| self.stage_cost(*s)).sum()
    }

    /// Built-in classes for the four handsets of the reference measurements.
    /// Stage costs are illustrative; only their ordering (the Galaxy Nexus
    /// being the slowest builder and the Nexus 5 throttling) is meaningful.
    pub fn preset(name: &str) -> Option<DeviceClass> {
        let (costs, thermal): ([f64; 6], ThermalParams) = match name {
            "galaxy_nexus" => (
                [14.0, 48.0, 66.0, 11.0, 9.0, 6.0],
                ThermalParams { heat_per_build: 4.0, cool_rate: 0.1, throttle_threshold: 1000.0, throttle_factor: 1.2 },
            ),
            "nexus_5" => (
                [4.0, 15.0, 20.0, 3.0, 3.0, 2.0],
                ThermalParams { heat_per_build: 20.0, cool_rate: 0.1, throttle_threshold: 40.0, throttle_factor: 1.8 },
            ),
            "nexus_6" => (
                [3.5, 13.0, 17.0, 3.0, 2.5, 2.0],
                ThermalParams { heat_per_build: 8.0, cool_rate: 0.2, throttle_threshold: 1000.0, throttle_factor: 1.2 },
            ),
            "nexus_10" => (
                [4.5, 17.0, 23.0, 3.5, 3.0, 2.0],
                ThermalParams { heat_per_build: 6.0, cool_rate: 0.2, throttle_threshold: 1000.0, throttle_factor: 1.2 },
            ),
            _ => return None,
        };
        let base_stage_costs = Stage::ALL.into_iter().zip(costs).collect();
        Some(DeviceClass { class_name: name.to_string(), base_stage_costs, thermal })
    }

    pub const PRESET_NAMES: [&'static str; 4] = ["galaxy_nexus", "nexus_5", "nexus_6", "nexus_10"];
}

/// A built, signed, installable package.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedPackage {
    pub package_name: String,
    pub content_hash: ContentHash,
    pub cert: Certificate,
    pub built_for: PlatformSpec,
    pub strain_id: StrainId,
    pub embedded_genome: Option<Arc<Genome>>,
    pub size_bytes: u64,
    pub corrupted: bool,
    pub(crate) body_hash: ContentHash,
    pub(crate) signature: ContentHash,
}

impl SignedPackage {
    pub(crate) fn content_hash_for(body_hash: &ContentHash, cert: &Certificate) -> ContentHash {
        canonical_hash(&("SignedPackage".to_string(), *body_hash, cert))
    }

    /// True iff the package is intact and its signature checks out against
    /// the certificate it carries.
    pub fn verify(&self) -> bool {
        self.verify_with(&self.cert)
    }

    pub fn verify_with(&self, cert: &Certificate) -> bool {
        !self.corrupted
            && self.cert == *cert
            && Self::content_hash_for(&self.body_hash, cert) == self.content_hash
            && cert.check_digest(&self.content_hash, &self.signature)
    }

    pub fn signature(&self) -> ContentHash {
        self.signature
    }
}

/// Free-function form of [`SignedPackage::verify`].
pub fn verify(pkg: &SignedPackage) -> bool {
    pkg.verify()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstalledEntry {
    pub package: SignedPackage,
    pub install_time: SimTime,
    /// Monotone per-device counter, breaks install-time ties.
    pub install_seq: u64,
}

/// Mutable per-device state, owned by the event loop.
#[derive(Clone, Debug)]
pub struct DeviceState {
    pub device_id: DeviceId,
    pub class: Arc<DeviceClass>,
    pub platform: PlatformSpec,
    pub region: RegionId,
    pub installed: BTreeMap<String, InstalledEntry>,
    pub temperature: f64,
    pub compromised: bool,
    pub cache: Option<BuildCache>,
    /// Packages received but not runnable here, kept for a later rebuild.
    pub stored: Vec<SignedPackage>,
    pub(crate) thermal_clock: SimTime,
    pub(crate) next_install_seq: u64,
}

impl DeviceState {
    pub fn new(device_id: DeviceId, class: Arc<DeviceClass>, platform: PlatformSpec, region: RegionId) -> Self {
        Self {
            device_id,
            class,
            platform,
            region,
            installed: BTreeMap::new(),
            temperature: 0.0,
            compromised: false,
            cache: None,
            stored: Vec::new(),
            thermal_clock: SimTime::ZERO,
            next_install_seq: 0,
        }
    }

    /// The most recently installed package, the one this device beams.
    pub fn current_package(&self) -> Option<&SignedPackage> {
        self.installed
            .values()
            .max_by_key(|e| (e.install_time, e.install_seq))
            .map(|e| &e.package)
    }

    pub fn is_infected(&self) -> bool {
        !self.installed.is_empty()
    }

    /// Whether the device has this exact package, installed or stored.
    pub fn holds_hash(&self, hash: &ContentHash) -> bool {
        self.installed.values().any(|e| e.package.content_hash == *hash)
            || self.stored.iter().any(|p| p.content_hash == *hash)
    }
}
