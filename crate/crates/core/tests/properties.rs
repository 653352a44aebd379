use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use viralsim::adversary::{AdversaryState, BlockReason, Decision};
use viralsim::buildchain::{full_build, BuildCache, BuildSettings};
use viralsim::model::{Certificate, CpuArch, DeviceClass, DeviceId, Genome, PlatformSpec, SourceUnit};
use viralsim::mutation::{mutate, random_mutation, random_op, Lineage, OpKind};
use viralsim::time::SimTime;

const ALL_KINDS: [OpKind; 8] = [
    OpKind::RenamePackage,
    OpKind::RenameDisplay,
    OpKind::SwapIcon,
    OpKind::AddTrait,
    OpKind::RemoveTrait,
    OpKind::EditSource,
    OpKind::AddLibrary,
    OpKind::RemoveLibrary,
];

fn platform() -> PlatformSpec {
    PlatformSpec::new(21, CpuArch::Armv7).unwrap()
}

fn nexus_5() -> DeviceClass {
    DeviceClass::preset("nexus_5").unwrap()
}

fn genome_from(sources: &[String], libs: &[Vec<u8>], traits: &[String]) -> Genome {
    let mut b = Genome::builder("org.example.app").resource("icon", "png");
    for (i, s) in sources.iter().enumerate() {
        b = b.source(format!("Unit{i}"), SourceUnit::new(s.as_str()));
    }
    for (i, l) in libs.iter().enumerate() {
        b = b.library(format!("lib{i}"), l.clone());
    }
    for t in traits {
        b = b.trait_tag(t.as_str());
    }
    b.build().unwrap()
}

fn genome_strategy() -> impl Strategy<Value = Genome> {
    (
        prop::collection::vec("[a-z{} ;]{1,40}", 1..5),
        prop::collection::vec(prop::collection::vec(any::<u8>(), 1..32), 0..4),
        prop::collection::btree_set("[a-z_]{1,8}", 0..4),
    )
        .prop_map(|(s, l, t)| genome_from(&s, &l, &t.into_iter().collect::<Vec<_>>()))
}

#[test]
fn thousand_distinct_genomes_distinct_digests() {
    let mut strains = BTreeSet::new();
    for i in 0..1000 {
        let g = genome_from(&[format!("class Main {{ int v = {i}; }}")], &[], &[]);
        assert!(strains.insert(g.strain_id()), "collision at {i}");
    }
    let a = genome_from(&["x".into()], &[b"lib".to_vec()], &["chat".into()]);
    let b = genome_from(&["x".into()], &[b"lib".to_vec()], &["chat".into()]);
    assert_eq!(a.strain_id(), b.strain_id());
}

#[test]
fn single_byte_edits_avalanche() {
    let base_src = "class Main { void spread() { beam(); } }".to_string();
    let base = genome_from(std::slice::from_ref(&base_src), &[], &[]);
    let base_bits = base.strain_id().0.as_bytes().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total = 0u32;
    let n = 200;
    for _ in 0..n {
        let mut bytes = base_src.clone().into_bytes();
        let i = rand::Rng::random_range(&mut rng, 0..bytes.len());
        let bit = rand::Rng::random_range(&mut rng, 0..7u8);
        bytes[i] ^= 1 << bit;
        let edited = genome_from(&[String::from_utf8_lossy(&bytes).into_owned()], &[], &[]);
        let id = edited.strain_id();
        assert_ne!(id, base.strain_id());
        total += id.0.as_bytes().iter().zip(&base_bits).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>();
    }
    let mean = total as f64 / n as f64;
    // 256 bits, half expected to flip; 200 samples put the mean within a
    // few tenths of a bit of 128.
    assert!((mean - 128.0).abs() < 4.0, "mean flipped bits {mean}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cache_is_transparent(g in genome_strategy()) {
        let g = Arc::new(g);
        let cert = Certificate::new("c", false);
        let settings = BuildSettings::default();
        let class = nexus_5();
        let (cold, cold_report) = full_build(&g, platform(), &cert, &mut BuildCache::new(), &class, 0.0, &settings).unwrap();
        let mut warm_cache = BuildCache::new();
        full_build(&g, platform(), &cert, &mut warm_cache, &class, 0.0, &settings).unwrap();
        let (warm, warm_report) = full_build(&g, platform(), &cert, &mut warm_cache, &class, 0.0, &settings).unwrap();
        prop_assert_eq!(&cold, &warm);
        prop_assert_eq!(warm_report.cache_misses, 0);
        prop_assert_eq!(warm_report.cache_hits, cold_report.cache_misses);
        prop_assert!(warm_report.total_seconds <= cold_report.total_seconds);
        prop_assert!(warm.verify());
    }

    #[test]
    fn lineage_stays_a_tree(g in genome_strategy(), seed in any::<u64>(), steps in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lineage = Lineage::new();
        let origin = DeviceId::from("o");
        lineage.insert_genome(&g, SimTime::ZERO, origin.clone()).unwrap();
        let mut pool = vec![g];
        for step in 0..steps {
            let parent = pool[rand::Rng::random_range(&mut rng, 0..pool.len())].clone();
            let Some(op) = random_mutation(&parent, &ALL_KINDS, &mut rng) else { continue };
            let child = mutate(&parent, &[op]).unwrap();
            prop_assert_eq!(child.generation(), parent.generation() + 1);
            prop_assert_eq!(child.parent_strain(), Some(parent.strain_id()));
            lineage.insert_genome(&child, SimTime(step as u64 + 1), origin.clone()).unwrap();
            pool.push(child);
        }
        for (strain, node) in lineage.iter() {
            let ancestors = lineage.ancestors(strain).unwrap();
            prop_assert_eq!(ancestors.len() as u32, node.generation);
            prop_assert!(!ancestors.contains(strain));
            let distinct: BTreeSet<_> = ancestors.iter().collect();
            prop_assert_eq!(distinct.len(), ancestors.len());
        }
    }

    #[test]
    fn any_mutation_evades_a_hash_listing(g in genome_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cert = Certificate::new("origin", false);
        let settings = BuildSettings::default();
        let class = nexus_5();
        let mut cache = BuildCache::new();
        let (parent_pkg, _) = full_build(&Arc::new(g.clone()), platform(), &cert, &mut cache, &class, 0.0, &settings).unwrap();
        let Some(op) = random_mutation(&g, &ALL_KINDS, &mut rng) else { return Ok(()) };
        let child = Arc::new(mutate(&g, &[op]).unwrap());
        let (child_pkg, _) = full_build(&child, platform(), &cert, &mut cache, &class, 0.0, &settings).unwrap();

        let mut adv = AdversaryState::passive();
        adv.blacklist_hash(SimTime::ZERO, parent_pkg.content_hash, "test");
        prop_assert_eq!(adv.block_decision(SimTime::ZERO, &parent_pkg), Decision::Block(BlockReason::HashListed));
        prop_assert_eq!(adv.block_decision(SimTime::ZERO, &child_pkg), Decision::Allow);
        adv.blacklist_cert(SimTime::ZERO, "origin", "test");
        prop_assert_eq!(adv.block_decision(SimTime::ZERO, &child_pkg), Decision::Block(BlockReason::CertListed));
        adv.audit().unwrap();
    }

    #[test]
    fn appearance_ops_keep_function(g in genome_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in [OpKind::RenamePackage, OpKind::RenameDisplay, OpKind::SwapIcon] {
            prop_assert!(kind.is_appearance_only());
            let op = random_op(&g, kind, &mut rng).unwrap();
            let child = mutate(&g, &[op]).unwrap();
            prop_assert_eq!(child.traits(), g.traits());
            prop_assert_eq!(child.sources(), g.sources());
            prop_assert_eq!(child.libraries(), g.libraries());
            prop_assert_ne!(child.strain_id(), g.strain_id());
        }
    }
}

#[test]
fn converging_lines_keep_first_ancestry() {
    use viralsim::mutation::MutationOp::AddTrait;
    let g = genome_from(&["class Main {}".into()], &[], &[]);
    let a = mutate(&g, &[AddTrait("x".into())]).unwrap();
    let b = mutate(&g, &[AddTrait("y".into())]).unwrap();
    let ay = mutate(&a, &[AddTrait("y".into())]).unwrap();
    let bx = mutate(&b, &[AddTrait("x".into())]).unwrap();
    assert_eq!(ay.strain_id(), bx.strain_id());

    let mut lineage = Lineage::new();
    let d = DeviceId::from("d");
    for (i, genome) in [&g, &a, &b, &ay].into_iter().enumerate() {
        assert!(lineage.insert_genome(genome, SimTime(i as u64), d.clone()).unwrap());
    }
    assert!(!lineage.insert_genome(&bx, SimTime(9), d).unwrap());
    assert_eq!(lineage.get(&bx.strain_id()).unwrap().parent, Some(a.strain_id()));
}
