//! The embedded app factory.
//!
//! Six stages run in a fixed order: resource compile, source compile,
//! bytecode conversion, dex merge, assemble and sign. Compilation is
//! symbolic: each stage combines content hashes of its inputs, checking
//! declared resource references along the way. Bytecode conversion is cached
//! per unit by the unit's content hash, so an unchanged library is converted
//! once per device.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_hash, Blob, Canonical, ContentHash, Encoder};
use crate::model::{Certificate, DeviceClass, Genome, PlatformSpec, SignedPackage, SourceUnit, Stage, StrainId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BuildError {
    #[error("duplicate resource {0:?}")]
    DuplicateResource(String),
    #[error("source unit {unit:?} references unknown resource {resource:?}")]
    UnresolvedResource { unit: String, resource: String },
    #[error("cannot merge an empty list of dex units")]
    EmptyMerge,
    #[error("dex unit {0:?} appears twice with different contents")]
    ConflictingUnit(String),
    #[error("build inputs were not produced from the supplied genome")]
    GenomeMismatch,
    #[error("genome {strain} cannot be built for {platform}")]
    UnsupportedPlatform { strain: String, platform: PlatformSpec },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildSettings {
    /// Fixed package overhead: platform jar, keystore, native tooling.
    pub package_base_bytes: u64,
    /// Whether the package carries its own genome.
    pub embed_genome: bool,
    /// Packages smaller than this are padded up to it.
    pub min_package_bytes: u64,
}

impl Default for BuildSettings {
    fn default() -> Self {
        Self { package_base_bytes: 1_000_000, embed_genome: true, min_package_bytes: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompiledResources {
    pub binary_blob_hash: ContentHash,
    /// Dense ids `1..=N` in lexicographic resource-name order.
    pub resource_index: BTreeMap<String, u32>,
    pub size_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    AppSource,
    Library,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BytecodeUnit {
    pub unit_name: String,
    pub input_hash: ContentHash,
    pub output_hash: ContentHash,
    pub kind: UnitKind,
    pub size_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DexComponent {
    pub hash: ContentHash,
    pub size_bytes: u64,
}

impl Canonical for DexComponent {
    fn encode(&self, enc: &mut Encoder) {
        enc.record("DexComponent", 2);
        self.hash.encode(enc);
        self.size_bytes.encode(enc);
    }
}

/// A converted (and possibly merged) executable. Merging is a union over
/// named components, so it is associative, commutative and idempotent on
/// singletons.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DexUnit {
    pub merged_from: Vec<String>,
    pub components: BTreeMap<String, DexComponent>,
    pub output_hash: ContentHash,
}

impl DexUnit {
    fn from_components(components: BTreeMap<String, DexComponent>) -> Self {
        let output_hash = canonical_hash(&("dex".to_string(), components.clone()));
        Self { merged_from: components.keys().cloned().collect(), components, output_hash }
    }

    pub fn size_bytes(&self) -> u64 {
        self.components.values().map(|c| c.size_bytes).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildCache {
    entries: BTreeMap<ContentHash, DexUnit>,
    hits: u64,
    misses: u64,
}

impl BuildCache {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn hits(&self) -> u64 {
        self.hits
    }
    pub fn misses(&self) -> u64 {
        self.misses
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn contains(&self, key: &ContentHash) -> bool {
        self.entries.contains_key(key)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub stage_durations: BTreeMap<Stage, f64>,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub total_seconds: f64,
    pub throttle_multiplier: f64,
}

/// Package contents before signing.
#[derive(Clone, Debug, PartialEq)]
pub struct UnsignedPackage {
    pub package_name: String,
    pub built_for: PlatformSpec,
    pub strain_id: StrainId,
    pub embedded_genome: Option<Arc<Genome>>,
    pub genome_hash: ContentHash,
    pub resources_hash: ContentHash,
    pub dex_hash: ContentHash,
    pub assets_hash: ContentHash,
    pub native_hash: ContentHash,
    pub size_bytes: u64,
}

impl UnsignedPackage {
    pub fn body_hash(&self) -> ContentHash {
        let mut enc = Encoder::new();
        enc.record("UnsignedPackage", 9);
        self.package_name.encode(&mut enc);
        self.built_for.encode(&mut enc);
        self.strain_id.encode(&mut enc);
        self.embedded_genome.is_some().encode(&mut enc);
        self.genome_hash.encode(&mut enc);
        self.resources_hash.encode(&mut enc);
        self.dex_hash.encode(&mut enc);
        self.assets_hash.encode(&mut enc);
        (self.native_hash, self.size_bytes).encode(&mut enc);
        ContentHash::of_raw(&enc.into_bytes())
    }
}

fn blob_total<'a>(blobs: impl Iterator<Item = &'a Blob>) -> u64 {
    blobs.map(|b| b.len() as u64).sum()
}

/// Compiles the manifest and resources into one binary blob plus the
/// resource id table.
pub fn compile_resources<'a>(
    manifest: &BTreeMap<String, String>,
    resources: impl IntoIterator<Item = (&'a str, &'a Blob)>,
    assets: &BTreeMap<String, Blob>,
) -> Result<CompiledResources, BuildError> {
    let mut map: BTreeMap<String, Blob> = BTreeMap::new();
    for (name, bytes) in resources {
        if map.insert(name.to_string(), bytes.clone()).is_some() {
            return Err(BuildError::DuplicateResource(name.to_string()));
        }
    }
    let resource_index = map.keys().enumerate().map(|(i, k)| (k.clone(), i as u32 + 1)).collect();
    let mut enc = Encoder::new();
    enc.record("ResourceTriple", 3);
    manifest.encode(&mut enc);
    map.encode(&mut enc);
    assets.encode(&mut enc);
    Ok(CompiledResources {
        binary_blob_hash: ContentHash::of_raw(&enc.into_bytes()),
        resource_index,
        size_bytes: blob_total(map.values()),
    })
}

pub const APP_UNIT: &str = "src:app";

pub fn library_unit_name(library: &str) -> String {
    format!("lib:{library}")
}

/// Compiles all app sources into a single bytecode unit.
pub fn compile_sources(
    sources: &BTreeMap<String, SourceUnit>,
    resource_index: &BTreeMap<String, u32>,
    libraries: &BTreeMap<String, Blob>,
) -> Result<BytecodeUnit, BuildError> {
    for (unit, src) in sources {
        if let Some(missing) = src.resource_refs.iter().find(|r| !resource_index.contains_key(*r)) {
            return Err(BuildError::UnresolvedResource { unit: unit.clone(), resource: missing.clone() });
        }
    }
    let input_hash = canonical_hash(sources);
    let mut lib_hashes: Vec<ContentHash> = libraries.values().map(canonical_hash).collect();
    lib_hashes.sort();
    let mut enc = Encoder::new();
    enc.record("CompiledSources", 3);
    input_hash.encode(&mut enc);
    resource_index.encode(&mut enc);
    lib_hashes.encode(&mut enc);
    Ok(BytecodeUnit {
        unit_name: APP_UNIT.to_string(),
        input_hash,
        output_hash: ContentHash::of_raw(&enc.into_bytes()),
        kind: UnitKind::AppSource,
        size_bytes: blob_total(sources.values().map(|s| &s.bytes)),
    })
}

/// A prebuilt library jar as a bytecode unit.
pub fn library_unit(name: &str, bytes: &Blob) -> BytecodeUnit {
    let unit_name = library_unit_name(name);
    let input_hash = canonical_hash(bytes);
    BytecodeUnit {
        output_hash: canonical_hash(&(unit_name.clone(), input_hash)),
        unit_name,
        input_hash,
        kind: UnitKind::Library,
        size_bytes: bytes.len() as u64,
    }
}

fn convert_uncached(unit: &BytecodeUnit) -> DexUnit {
    let converted = canonical_hash(&("dx".to_string(), unit.output_hash));
    let mut components = BTreeMap::new();
    components.insert(unit.unit_name.clone(), DexComponent { hash: converted, size_bytes: unit.size_bytes });
    DexUnit::from_components(components)
}

/// Converts one unit, reusing a cached result keyed by the unit's output
/// hash. Returns whether the cache was hit.
pub fn convert_bytecode(unit: &BytecodeUnit, cache: &mut BuildCache) -> (DexUnit, bool) {
    if let Some(dex) = cache.entries.get(&unit.output_hash) {
        cache.hits += 1;
        return (dex.clone(), true);
    }
    cache.misses += 1;
    let dex = convert_uncached(unit);
    cache.entries.insert(unit.output_hash, dex.clone());
    (dex, false)
}

pub fn merge_dex(units: &[DexUnit]) -> Result<DexUnit, BuildError> {
    if units.is_empty() {
        return Err(BuildError::EmptyMerge);
    }
    let mut components: BTreeMap<String, DexComponent> = BTreeMap::new();
    for unit in units {
        for (name, comp) in &unit.components {
            match components.get(name) {
                Some(existing) if existing != comp => return Err(BuildError::ConflictingUnit(name.clone())),
                _ => {
                    components.insert(name.clone(), *comp);
                }
            }
        }
    }
    Ok(DexUnit::from_components(components))
}

/// All bytecode units of a genome: libraries in name order, then the app.
fn genome_units(genome: &Genome, resource_index: &BTreeMap<String, u32>) -> Result<Vec<BytecodeUnit>, BuildError> {
    let mut units: Vec<BytecodeUnit> =
        genome.libraries().iter().map(|(name, bytes)| library_unit(name, bytes)).collect();
    units.push(compile_sources(genome.sources(), resource_index, genome.libraries())?);
    Ok(units)
}

fn expected_dex(genome: &Genome) -> Result<(CompiledResources, DexUnit), BuildError> {
    let cr = compile_resources(
        genome.manifest(),
        genome.resources().iter().map(|(k, v)| (k.as_str(), v)),
        genome.assets(),
    )?;
    let leaves: Vec<DexUnit> = genome_units(genome, &cr.resource_index)?.iter().map(convert_uncached).collect();
    let dex = merge_dex(&leaves)?;
    Ok((cr, dex))
}

/// Combines compiled resources, the merged dex, assets and native libraries
/// into an unsigned package that embeds its own genome.
pub fn assemble_package(
    cr: &CompiledResources,
    dex: &DexUnit,
    assets: &BTreeMap<String, Blob>,
    native_libs: &BTreeMap<String, Blob>,
    genome: &Arc<Genome>,
    platform: PlatformSpec,
    settings: &BuildSettings,
) -> Result<UnsignedPackage, BuildError> {
    let (expected_cr, expected_dex) = expected_dex(genome)?;
    if expected_cr.binary_blob_hash != cr.binary_blob_hash || expected_dex.output_hash != dex.output_hash {
        return Err(BuildError::GenomeMismatch);
    }
    let size_bytes = settings.package_base_bytes
        + cr.size_bytes
        + dex.size_bytes()
        + blob_total(assets.values())
        + blob_total(native_libs.values());
    let size_bytes = size_bytes.max(settings.min_package_bytes);
    Ok(UnsignedPackage {
        package_name: genome.package_name().to_string(),
        built_for: platform,
        strain_id: genome.strain_id(),
        embedded_genome: settings.embed_genome.then(|| Arc::clone(genome)),
        genome_hash: canonical_hash(genome.as_ref()),
        resources_hash: cr.binary_blob_hash,
        dex_hash: dex.output_hash,
        assets_hash: canonical_hash(assets),
        native_hash: canonical_hash(native_libs),
        size_bytes,
    })
}

pub fn sign_package(unsigned: UnsignedPackage, cert: &Certificate) -> SignedPackage {
    let body_hash = unsigned.body_hash();
    let content_hash = SignedPackage::content_hash_for(&body_hash, cert);
    SignedPackage {
        package_name: unsigned.package_name,
        content_hash,
        cert: cert.clone(),
        built_for: unsigned.built_for,
        strain_id: unsigned.strain_id,
        embedded_genome: unsigned.embedded_genome,
        size_bytes: unsigned.size_bytes,
        corrupted: false,
        body_hash,
        signature: cert.sign_digest(&content_hash),
    }
}

/// Runs the whole chain. Stage time is the class's base cost scaled by the
/// throttle multiplier at `temperature`; conversion is charged per cache
/// miss, each miss costing an equal share of the stage's base cost.
pub fn full_build(
    genome: &Arc<Genome>,
    platform: PlatformSpec,
    cert: &Certificate,
    cache: &mut BuildCache,
    class: &DeviceClass,
    temperature: f64,
    settings: &BuildSettings,
) -> Result<(SignedPackage, BuildReport), BuildError> {
    if !genome.supports(&platform) {
        return Err(BuildError::UnsupportedPlatform { strain: genome.strain_id().short(), platform });
    }
    let mult = class.thermal.throttle_multiplier(temperature);
    let mut stage_durations = BTreeMap::new();

    let cr = compile_resources(
        genome.manifest(),
        genome.resources().iter().map(|(k, v)| (k.as_str(), v)),
        genome.assets(),
    )?;
    stage_durations.insert(Stage::ResourceCompile, class.stage_cost(Stage::ResourceCompile) * mult);

    let units = genome_units(genome, &cr.resource_index)?;
    stage_durations.insert(Stage::SourceCompile, class.stage_cost(Stage::SourceCompile) * mult);

    let (mut hits, mut misses) = (0u64, 0u64);
    let mut converted = Vec::with_capacity(units.len());
    for unit in &units {
        let (dex, hit) = convert_bytecode(unit, cache);
        if hit {
            hits += 1;
        } else {
            misses += 1;
        }
        converted.push(dex);
    }
    let per_unit = class.stage_cost(Stage::BytecodeConvert) / units.len() as f64;
    stage_durations.insert(Stage::BytecodeConvert, per_unit * misses as f64 * mult);

    let dex = merge_dex(&converted)?;
    stage_durations.insert(Stage::DexMerge, class.stage_cost(Stage::DexMerge) * mult);

    let unsigned = assemble_package(&cr, &dex, genome.assets(), &BTreeMap::new(), genome, platform, settings)?;
    stage_durations.insert(Stage::Assemble, class.stage_cost(Stage::Assemble) * mult);

    let pkg = sign_package(unsigned, cert);
    stage_durations.insert(Stage::Sign, class.stage_cost(Stage::Sign) * mult);

    let total_seconds = Stage::ALL.iter().map(|s| stage_durations[s]).sum();
    Ok((
        pkg,
        BuildReport { stage_durations, cache_hits: hits, cache_misses: misses, total_seconds, throttle_multiplier: mult },
    ))
}
