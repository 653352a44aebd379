//! Strain mutation, re-signing, lineage tracking and per-strain fitness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::IteratorRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::buildchain::{full_build, BuildCache, BuildError, BuildReport, BuildSettings};
use crate::canonical::Blob;
use crate::device::InstallOutcome;
use crate::model::{Certificate, DeviceClass, DeviceId, Genome, SignedPackage, StrainId};
use crate::sim::trace::{Trace, TraceEvent, TransferOutcome};
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MutationOp {
    RenamePackage(String),
    RenameDisplay(String),
    SwapIcon(String),
    AddTrait(String),
    RemoveTrait(String),
    EditSource { unit: String, bytes: Blob },
    AddLibrary { name: String, bytes: Blob },
    RemoveLibrary(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    RenamePackage,
    RenameDisplay,
    SwapIcon,
    AddTrait,
    RemoveTrait,
    EditSource,
    AddLibrary,
    RemoveLibrary,
}

impl OpKind {
    /// Kinds that change appearance but never functionality.
    pub fn is_appearance_only(self) -> bool {
        matches!(self, OpKind::RenamePackage | OpKind::RenameDisplay | OpKind::SwapIcon)
    }
}

impl MutationOp {
    pub fn kind(&self) -> OpKind {
        match self {
            MutationOp::RenamePackage(_) => OpKind::RenamePackage,
            MutationOp::RenameDisplay(_) => OpKind::RenameDisplay,
            MutationOp::SwapIcon(_) => OpKind::SwapIcon,
            MutationOp::AddTrait(_) => OpKind::AddTrait,
            MutationOp::RemoveTrait(_) => OpKind::RemoveTrait,
            MutationOp::EditSource { .. } => OpKind::EditSource,
            MutationOp::AddLibrary { .. } => OpKind::AddLibrary,
            MutationOp::RemoveLibrary(_) => OpKind::RemoveLibrary,
        }
    }
}

impl fmt::Display for MutationOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MutationOp::RenamePackage(n) => write!(f, "rename_package({n})"),
            MutationOp::RenameDisplay(n) => write!(f, "rename_display({n})"),
            MutationOp::SwapIcon(n) => write!(f, "swap_icon({n})"),
            MutationOp::AddTrait(n) => write!(f, "add_trait({n})"),
            MutationOp::RemoveTrait(n) => write!(f, "remove_trait({n})"),
            MutationOp::EditSource { unit, bytes } => write!(f, "edit_source({unit},{}B)", bytes.len()),
            MutationOp::AddLibrary { name, bytes } => write!(f, "add_library({name},{}B)", bytes.len()),
            MutationOp::RemoveLibrary(n) => write!(f, "remove_library({n})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MutationError {
    #[error("invalid mutation {op}: {reason}")]
    InvalidOp { op: String, reason: String },
    #[error("unknown strain {0}")]
    UnknownStrain(StrainId),
    #[error("lineage conflict for strain {strain}: {reason}")]
    LineageConflict { strain: StrainId, reason: String },
    #[error("package carries no genome to rebuild from")]
    NoEmbeddedGenome,
    #[error(transparent)]
    Build(#[from] BuildError),
}

fn invalid(op: &MutationOp, reason: impl Into<String>) -> MutationError {
    MutationError::InvalidOp { op: op.to_string(), reason: reason.into() }
}

fn apply(genome: &mut Genome, op: &MutationOp) -> Result<(), MutationError> {
    match op {
        MutationOp::RenamePackage(name) => {
            if name.is_empty() {
                return Err(invalid(op, "package name must not be empty"));
            }
            if *name == genome.package_name {
                return Err(invalid(op, "package name unchanged"));
            }
            genome.package_name = name.clone();
        }
        MutationOp::RenameDisplay(name) => {
            if *name == genome.display_name {
                return Err(invalid(op, "display name unchanged"));
            }
            genome.display_name = name.clone();
        }
        MutationOp::SwapIcon(icon) => {
            if *icon == genome.icon_id {
                return Err(invalid(op, "icon unchanged"));
            }
            genome.icon_id = icon.clone();
        }
        MutationOp::AddTrait(t) => {
            if !genome.traits.insert(t.clone()) {
                return Err(invalid(op, "trait already present"));
            }
        }
        MutationOp::RemoveTrait(t) => {
            if !genome.traits.remove(t) {
                return Err(invalid(op, "trait not present"));
            }
        }
        MutationOp::EditSource { unit, bytes } => {
            let src = genome.sources.get_mut(unit).ok_or_else(|| invalid(op, "no such source unit"))?;
            if src.bytes == *bytes {
                return Err(invalid(op, "source unchanged"));
            }
            src.bytes = bytes.clone();
        }
        MutationOp::AddLibrary { name, bytes } => {
            if genome.libraries.contains_key(name) {
                return Err(invalid(op, "library already present"));
            }
            genome.libraries.insert(name.clone(), bytes.clone());
        }
        MutationOp::RemoveLibrary(name) => {
            if genome.libraries.remove(name).is_none() {
                return Err(invalid(op, "library not present"));
            }
        }
    }
    Ok(())
}

/// Produces a child strain one generation down. Ops apply in order, each
/// validated against the genome as left by the previous op.
pub fn mutate(genome: &Genome, ops: &[MutationOp]) -> Result<Genome, MutationError> {
    if ops.is_empty() {
        return Err(MutationError::InvalidOp { op: "[]".into(), reason: "empty mutation is not a new strain".into() });
    }
    let mut child = genome.clone();
    for op in ops {
        apply(&mut child, op)?;
    }
    child.generation = genome.generation + 1;
    child.parent_strain = Some(genome.strain_id);
    child.reseal();
    Ok(child)
}

const DISPLAY_NAMES: [&str; 6] = ["Calculator", "Notes", "Flashlight", "Weather", "Compass", "Clock"];
const TRAIT_POOL: [&str; 7] = ["chat", "file_share", "map", "news", "voice", "mesh_relay", "photo"];

fn strip_marker(name: &str) -> &str {
    match name.rsplit_once(".m") {
        Some((root, tail)) if tail.len() == 8 && tail.bytes().all(|b| b.is_ascii_hexdigit()) => root,
        _ => name,
    }
}

/// Draws a concrete op of `kind` applicable to `genome`, or `None` when the
/// genome offers nothing to act on (e.g. removing a trait from none).
pub fn random_op<R: RngCore + ?Sized>(genome: &Genome, kind: OpKind, rng: &mut R) -> Option<MutationOp> {
    let token: u32 = rng.random();
    Some(match kind {
        OpKind::RenamePackage => {
            MutationOp::RenamePackage(format!("{}.m{token:08x}", strip_marker(&genome.package_name)))
        }
        OpKind::RenameDisplay => {
            let base = DISPLAY_NAMES[(token as usize) % DISPLAY_NAMES.len()];
            MutationOp::RenameDisplay(format!("{base} {:04x}", token >> 16))
        }
        OpKind::SwapIcon => MutationOp::SwapIcon(format!("ic_{token:08x}")),
        OpKind::AddTrait => {
            let fresh = TRAIT_POOL.iter().filter(|t| !genome.traits.contains(**t)).choose(rng);
            MutationOp::AddTrait(fresh.map_or_else(|| format!("trait_{token:08x}"), |t| t.to_string()))
        }
        OpKind::RemoveTrait => MutationOp::RemoveTrait(genome.traits.iter().choose(rng)?.clone()),
        OpKind::EditSource => {
            let (unit, src) = genome.sources.iter().choose(rng)?;
            let mut bytes = src.bytes.as_slice().to_vec();
            bytes.extend_from_slice(format!("\n// rev {token:08x}").as_bytes());
            MutationOp::EditSource { unit: unit.clone(), bytes: Blob::new(bytes) }
        }
        OpKind::AddLibrary => {
            let mut bytes = vec![0u8; 64];
            rng.fill_bytes(&mut bytes);
            MutationOp::AddLibrary { name: format!("lib_{token:08x}"), bytes: Blob::new(bytes) }
        }
        OpKind::RemoveLibrary => MutationOp::RemoveLibrary(genome.libraries.keys().choose(rng)?.clone()),
    })
}

/// Picks one applicable kind from `kinds` uniformly and draws an op for it.
pub fn random_mutation<R: RngCore + ?Sized>(genome: &Genome, kinds: &[OpKind], rng: &mut R) -> Option<MutationOp> {
    let mut candidates: Vec<OpKind> = kinds.to_vec();
    while !candidates.is_empty() {
        let i = rng.random_range(0..candidates.len());
        if let Some(op) = random_op(genome, candidates[i], rng) {
            return Some(op);
        }
        candidates.swap_remove(i);
    }
    None
}

/// Rebuilds a package's embedded genome for the same target under a new
/// certificate.
pub fn resign(
    pkg: &SignedPackage,
    new_cert: &Certificate,
    cache: &mut BuildCache,
    class: &DeviceClass,
    temperature: f64,
    settings: &BuildSettings,
) -> Result<(SignedPackage, BuildReport), MutationError> {
    let genome: &Arc<Genome> = pkg.embedded_genome.as_ref().ok_or(MutationError::NoEmbeddedGenome)?;
    Ok(full_build(genome, pkg.built_for, new_cert, cache, class, temperature, settings)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageNode {
    pub parent: Option<StrainId>,
    pub generation: u32,
    pub birth_time: SimTime,
    pub birth_device: DeviceId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lineage {
    nodes: BTreeMap<StrainId, LineageNode>,
}

impl Lineage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a strain. Parents must already be present, so the graph stays
    /// acyclic. Re-inserting an identical record is a no-op and returns
    /// `false`.
    pub fn insert(&mut self, strain: StrainId, node: LineageNode) -> Result<bool, MutationError> {
        let conflict = |reason: &str| MutationError::LineageConflict { strain, reason: reason.into() };
        match node.parent {
            None if node.generation != 0 => return Err(conflict("root must have generation 0")),
            Some(parent) => {
                let p = self.nodes.get(&parent).ok_or(MutationError::UnknownStrain(parent))?;
                if node.generation != p.generation + 1 {
                    return Err(conflict("generation must be parent generation + 1"));
                }
            }
            None => {}
        }
        if let Some(existing) = self.nodes.get(&strain) {
            if existing.parent == node.parent && existing.generation == node.generation {
                return Ok(false);
            }
            return Err(conflict("strain already recorded with different ancestry"));
        }
        self.nodes.insert(strain, node);
        Ok(true)
    }

    /// Records a genome's strain. Two lines can converge on identical
    /// content (siblings adding the same two traits in opposite order); the
    /// strain is the same, so the first recorded ancestry stands and the
    /// repeat is a no-op.
    pub fn insert_genome(&mut self, genome: &Genome, birth_time: SimTime, birth_device: DeviceId) -> Result<bool, MutationError> {
        if self.nodes.contains_key(&genome.strain_id()) {
            return Ok(false);
        }
        self.insert(
            genome.strain_id(),
            LineageNode { parent: genome.parent_strain(), generation: genome.generation(), birth_time, birth_device },
        )
    }

    pub fn get(&self, strain: &StrainId) -> Option<&LineageNode> {
        self.nodes.get(strain)
    }

    pub fn contains(&self, strain: &StrainId) -> bool {
        self.nodes.contains_key(strain)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StrainId, &LineageNode)> {
        self.nodes.iter()
    }

    /// Ancestors nearest first, ending at the generation-0 root.
    pub fn ancestors(&self, strain: &StrainId) -> Result<Vec<StrainId>, MutationError> {
        let mut node = self.nodes.get(strain).ok_or(MutationError::UnknownStrain(*strain))?;
        let mut out = Vec::with_capacity(node.generation as usize);
        while let Some(parent) = node.parent {
            out.push(parent);
            node = self.nodes.get(&parent).ok_or(MutationError::UnknownStrain(parent))?;
        }
        Ok(out)
    }

    /// The strain together with all its descendants.
    pub fn subtree(&self, strain: &StrainId) -> Result<BTreeSet<StrainId>, MutationError> {
        if !self.nodes.contains_key(strain) {
            return Err(MutationError::UnknownStrain(*strain));
        }
        let mut children: BTreeMap<StrainId, Vec<StrainId>> = BTreeMap::new();
        for (id, node) in &self.nodes {
            if let Some(p) = node.parent {
                children.entry(p).or_default().push(*id);
            }
        }
        let mut out = BTreeSet::new();
        let mut stack = vec![*strain];
        while let Some(s) = stack.pop() {
            if out.insert(s) {
                stack.extend(children.get(&s).into_iter().flatten().copied());
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReachMode {
    StrainOnly,
    Subtree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fitness {
    pub devices_reached: usize,
    /// True when no transfer of this strain was ever blocked.
    pub survived_blacklist: bool,
    pub escape_time: Option<f64>,
}

/// Spread and survival metrics for one strain, read off a finished trace.
pub fn fitness(trace: &Trace, strain: &StrainId, mode: ReachMode) -> Result<Fitness, MutationError> {
    let lineage = trace.lineage();
    let members = match mode {
        ReachMode::StrainOnly => {
            if !lineage.contains(strain) {
                return Err(MutationError::UnknownStrain(*strain));
            }
            BTreeSet::from([*strain])
        }
        ReachMode::Subtree => lineage.subtree(strain)?,
    };
    let mut devices = BTreeSet::new();
    let mut blocked = false;
    let mut escape_time = None;
    for ev in trace.events() {
        match ev {
            TraceEvent::Install { device, strain: s, outcome, .. }
                if members.contains(s) && matches!(outcome, InstallOutcome::Updated | InstallOutcome::SideBySide) =>
            {
                devices.insert(device.clone());
            }
            TraceEvent::Transfer { strain: s, outcome: TransferOutcome::Blocked, .. } if s == strain => {
                blocked = true;
            }
            TraceEvent::Escape { t, strain: s, .. } if s == strain && escape_time.is_none() => {
                escape_time = Some(t.as_secs_f64());
            }
            _ => {}
        }
    }
    Ok(Fitness { devices_reached: devices.len(), survived_blacklist: !blocked, escape_time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SourceUnit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn genome() -> Genome {
        Genome::builder("org.example.viral")
            .display_name("Viral")
            .source("Main", SourceUnit::new("class Main {}"))
            .library("okio", "jar")
            .trait_tag("chat")
            .build()
            .unwrap()
    }

    #[test]
    fn empty_ops_rejected() {
        assert!(matches!(mutate(&genome(), &[]), Err(MutationError::InvalidOp { .. })));
    }

    #[test]
    fn rename_display_keeps_traits() {
        let g = genome();
        let child = mutate(&g, &[MutationOp::RenameDisplay("calc".into())]).unwrap();
        assert_eq!(child.traits(), g.traits());
        assert_ne!(child.strain_id(), g.strain_id());
        assert_eq!(child.parent_strain(), Some(g.strain_id()));
        assert_eq!(child.generation(), 1);
    }

    #[test]
    fn add_trait_grows_traits() {
        let g = genome();
        let child = mutate(&g, &[MutationOp::AddTrait("map".into())]).unwrap();
        assert_eq!(child.traits().len(), g.traits().len() + 1);
        assert_eq!(child.generation(), g.generation() + 1);
    }

    #[test]
    fn invalid_ops() {
        let g = genome();
        for op in [
            MutationOp::RemoveTrait("absent".into()),
            MutationOp::AddTrait("chat".into()),
            MutationOp::RemoveLibrary("nope".into()),
            MutationOp::AddLibrary { name: "okio".into(), bytes: Blob::from("x") },
            MutationOp::EditSource { unit: "Missing".into(), bytes: Blob::from("x") },
            MutationOp::EditSource { unit: "Main".into(), bytes: Blob::from("class Main {}") },
            MutationOp::RenamePackage(String::new()),
            MutationOp::RenameDisplay("Viral".into()),
        ] {
            assert!(matches!(mutate(&g, &[op]), Err(MutationError::InvalidOp { .. })));
        }
    }

    #[test]
    fn ops_validate_sequentially() {
        let g = genome();
        let ops = [MutationOp::AddTrait("map".into()), MutationOp::RemoveTrait("map".into())];
        let child = mutate(&g, &ops).unwrap();
        assert_eq!(child.traits(), g.traits());
        assert_ne!(child.strain_id(), g.strain_id());
    }

    #[test]
    fn random_ops_apply_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = genome();
        for kind in [
            OpKind::RenamePackage,
            OpKind::RenameDisplay,
            OpKind::SwapIcon,
            OpKind::AddTrait,
            OpKind::RemoveTrait,
            OpKind::EditSource,
            OpKind::AddLibrary,
            OpKind::RemoveLibrary,
        ] {
            let op = random_op(&g, kind, &mut rng).unwrap();
            assert_eq!(op.kind(), kind);
            g = mutate(&g, &[op]).unwrap();
        }
        assert_eq!(g.generation(), 8);
        assert!(g.package_name().starts_with("org.example.viral.m"));
        let renamed = mutate(&g, &[random_op(&g, OpKind::RenamePackage, &mut rng).unwrap()]).unwrap();
        assert_eq!(renamed.package_name().matches(".m").count(), 1);
    }

    #[test]
    fn random_mutation_skips_inapplicable_kinds() {
        let bare = Genome::builder("p").build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op = random_mutation(&bare, &[OpKind::RemoveTrait, OpKind::RemoveLibrary, OpKind::SwapIcon], &mut rng);
        assert_eq!(op.unwrap().kind(), OpKind::SwapIcon);
        assert!(random_mutation(&bare, &[OpKind::RemoveTrait], &mut rng).is_none());
    }

    fn node(parent: Option<StrainId>, generation: u32) -> LineageNode {
        LineageNode { parent, generation, birth_time: SimTime(0), birth_device: DeviceId::from("d") }
    }

    #[test]
    fn lineage_chain() {
        let mut lin = Lineage::new();
        let root = genome();
        lin.insert_genome(&root, SimTime(0), DeviceId::from("d")).unwrap();
        assert!(lin.ancestors(&root.strain_id()).unwrap().is_empty());
        let mut chain = vec![root.clone()];
        for i in 0..5 {
            let next = mutate(chain.last().unwrap(), &[MutationOp::SwapIcon(format!("i{i}"))]).unwrap();
            lin.insert_genome(&next, SimTime(i), DeviceId::from("d")).unwrap();
            chain.push(next);
        }
        assert_eq!(lin.ancestors(&chain[1].strain_id()).unwrap(), vec![root.strain_id()]);
        let tip = chain.last().unwrap();
        let expected: Vec<StrainId> = chain[..5].iter().rev().map(|g| g.strain_id()).collect();
        assert_eq!(lin.ancestors(&tip.strain_id()).unwrap(), expected);
        assert_eq!(lin.subtree(&root.strain_id()).unwrap().len(), 6);
        assert_eq!(lin.subtree(&tip.strain_id()).unwrap().len(), 1);
    }

    #[test]
    fn lineage_rejects_bad_records() {
        let mut lin = Lineage::new();
        let g = genome();
        let s = g.strain_id();
        assert!(lin.insert(s, node(None, 1)).is_err());
        assert!(matches!(
            lin.insert(s, node(Some(StrainId(crate::ContentHash::of_raw(b"x"))), 1)),
            Err(MutationError::UnknownStrain(_))
        ));
        assert!(lin.insert(s, node(None, 0)).unwrap());
        assert!(!lin.insert(s, node(None, 0)).unwrap());
        let child = StrainId(crate::ContentHash::of_raw(b"c"));
        assert!(lin.insert(child, node(Some(s), 2)).is_err());
        assert!(matches!(lin.ancestors(&child), Err(MutationError::UnknownStrain(_))));
    }
}
