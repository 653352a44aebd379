//! The event loop.
//!
//! One run is single-threaded and owns all state. Every random choice comes
//! from a labelled stream, so a (scenario, seed) pair fixes the trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::adversary::{AdversaryState, BlockReason, Decision, LinkKind};
use crate::buildchain::{full_build, BuildCache, BuildReport};
use crate::canonical::ContentHash;
use crate::device::{check_compat, install, self_compile, thermal_update, CompatResult, InstallOutcome};
use crate::model::{Certificate, DeviceClass, DeviceId, DeviceState, Genome, RegionId, SignedPackage, StrainId};
use crate::mutation::{mutate, random_mutation, random_op, Lineage, MutationOp, OpKind};
use crate::netmodel::{Regions, TransferPlan};
use crate::sim::queue::{EventId, EventQueue};
use crate::sim::rng::{RngStreams, SimRng};
use crate::sim::scenario::{AdversaryAction, AdversaryConfig, PolicyKind, Scenario};
use crate::sim::trace::{
    EncounterKind, InstallCause, InstalledSummary, Trace, TraceEvent, TransferOutcome, TransferPhase,
};
use crate::time::{SimDuration, SimTime};

/// Sender name used for packages the adversary re-sends.
pub const ADVERSARY: &str = "adversary";

/// Everything a run leaves behind. Most callers only need the trace.
pub struct RunResult {
    pub trace: Trace,
    pub devices: BTreeMap<DeviceId, DeviceState>,
    pub adversary: AdversaryState,
    pub lineage: Lineage,
    /// Certificates the app itself created; the adversary holds none.
    pub issued_certs: BTreeSet<String>,
}

pub fn run(scenario: &Scenario, seed: u64) -> Trace {
    run_detailed(scenario, seed).trace
}

pub fn run_detailed(scenario: &Scenario, seed: u64) -> RunResult {
    let mut w = World::new(scenario, seed);
    w.schedule_initial();
    w.run_loop();
    w.finish()
}

enum Ev {
    Seed,
    Encounter { from: DeviceId, to: DeviceId, window: SimDuration, kind: EncounterKind },
    RandomEncounter { idx: usize },
    BulkStart { xfer: u64 },
    TransferEnd { xfer: u64 },
    Replay { hash: ContentHash, to: DeviceId },
    BuildEnd { device: DeviceId },
    ScriptedBuild { device: DeviceId },
    KillSwitch { region: RegionId, up: bool },
    Uplink { device: DeviceId },
    Move { device: DeviceId, region: RegionId },
    Adversary { action: AdversaryAction },
}

struct InFlight {
    from: DeviceId,
    to: DeviceId,
    pkg: SignedPackage,
    plan: TransferPlan,
    observed: bool,
    delay: SimDuration,
    modify: bool,
}

struct BuildJob {
    genome: Arc<Genome>,
    cert: Certificate,
    cause: InstallCause,
    xfer: Option<u64>,
}

struct Running {
    job: BuildJob,
    pkg: SignedPackage,
    report: BuildReport,
}

struct Birth {
    region: RegionId,
    offline: bool,
}

struct Streams {
    encounters: Vec<SimRng>,
    observe: SimRng,
    delay: SimRng,
    modify: SimRng,
    replay: SimRng,
    mutation: SimRng,
}

struct World<'a> {
    s: &'a Scenario,
    queue: EventQueue<Ev>,
    trace: Trace,
    now: SimTime,
    devices: BTreeMap<DeviceId, DeviceState>,
    regions: Regions,
    adv: AdversaryState,
    adv_cfg: Option<&'a AdversaryConfig>,
    rng: Streams,
    lineage: Lineage,
    births: BTreeMap<StrainId, Birth>,
    escaped: BTreeSet<StrainId>,
    in_flight: BTreeMap<u64, InFlight>,
    next_xfer: u64,
    next_enc: u64,
    build_queue: BTreeMap<DeviceId, VecDeque<BuildJob>>,
    building: BTreeMap<DeviceId, Running>,
    /// Scripted uplinks not yet fired, with their due time.
    pending_uplinks: BTreeMap<EventId, (SimTime, DeviceId)>,
    sent: BTreeMap<DeviceId, u32>,
    mutating: BTreeSet<DeviceId>,
    cert_counter: u32,
    issued_certs: BTreeSet<String>,
    origin_hashes: BTreeSet<ContentHash>,
}

impl<'a> World<'a> {
    fn new(s: &'a Scenario, seed: u64) -> Self {
        let mut streams = RngStreams::new(seed);
        let mut take = |label: &str| streams.stream(label).expect("engine labels are unique");
        let encounters = s
            .random_encounters
            .iter()
            .enumerate()
            .map(|(i, r)| take(&format!("encounters.{i}.{}", r.region)))
            .collect();
        let rng = Streams {
            encounters,
            observe: take("adversary.observe"),
            delay: take("adversary.delay"),
            modify: take("adversary.modify"),
            replay: take("adversary.replay"),
            mutation: take("mutation"),
        };

        let mut regions = Regions::new();
        for (id, up) in &s.regions {
            regions.add_region(id.clone(), *up);
        }
        let mut devices = BTreeMap::new();
        for d in &s.devices {
            regions.place(d.id.clone(), &d.region).expect("validated region");
            let class: Arc<DeviceClass> = Arc::clone(&s.classes[&d.class]);
            devices.insert(d.id.clone(), DeviceState::new(d.id.clone(), class, d.platform, d.region.clone()));
        }
        let adv = match &s.adversary {
            Some(cfg) => AdversaryState::new(cfg.monitoring, cfg.compromise_budget),
            None => AdversaryState::passive(),
        };
        let header = TraceEvent::Header {
            seed,
            scenario: s.name.clone(),
            scenario_hash: s.source_hash,
            devices: s.devices.iter().map(|d| d.id.clone()).collect(),
        };
        Self {
            s,
            queue: EventQueue::new(),
            trace: Trace::new(header),
            now: SimTime::ZERO,
            devices,
            regions,
            adv,
            adv_cfg: s.adversary.as_ref(),
            rng,
            lineage: Lineage::new(),
            births: BTreeMap::new(),
            escaped: BTreeSet::new(),
            in_flight: BTreeMap::new(),
            next_xfer: 0,
            next_enc: 0,
            build_queue: BTreeMap::new(),
            building: BTreeMap::new(),
            pending_uplinks: BTreeMap::new(),
            sent: BTreeMap::new(),
            mutating: BTreeSet::new(),
            cert_counter: 0,
            issued_certs: BTreeSet::from([s.origin_cert.cert_id().to_string()]),
            origin_hashes: BTreeSet::new(),
        }
    }

    fn emit(&mut self, ev: TraceEvent) {
        self.trace.push(ev);
    }

    fn schedule_initial(&mut self) {
        let s = self.s;
        // Network state set for t = 0 applies before the app appears.
        for (at, region, up) in &s.kill_switches {
            self.queue.push(*at, Ev::KillSwitch { region: region.clone(), up: *up });
        }
        for (at, device, region) in &s.moves {
            self.queue.push(*at, Ev::Move { device: device.clone(), region: region.clone() });
        }
        self.queue.push(SimTime::ZERO, Ev::Seed);
        for (at, device) in &s.uplinks {
            let id = self.queue.push(*at, Ev::Uplink { device: device.clone() });
            self.pending_uplinks.insert(id, (*at, device.clone()));
        }
        for e in &s.encounters {
            let kind = if e.bridge { EncounterKind::Bridge } else { EncounterKind::Scripted };
            self.queue.push(e.at, Ev::Encounter { from: e.from.clone(), to: e.to.clone(), window: e.window, kind });
        }
        for (at, device) in &s.builds {
            self.queue.push(*at, Ev::ScriptedBuild { device: device.clone() });
        }
        if let Some(cfg) = self.adv_cfg {
            for (at, action) in &cfg.actions {
                self.queue.push(*at, Ev::Adversary { action: action.clone() });
            }
        }
        for idx in 0..s.random_encounters.len() {
            let start = s.random_encounters[idx].start;
            self.schedule_random(idx, start);
        }
    }

    fn run_loop(&mut self) {
        let stop_time = self.s.stop_time;
        loop {
            let Some((t, id, ev)) = self.queue.pop() else {
                self.emit(TraceEvent::Stop { t: self.now, reason: "quiescent".into() });
                return;
            };
            if t > stop_time {
                self.emit(TraceEvent::Stop { t: stop_time, reason: "time_limit".into() });
                return;
            }
            self.now = t;
            self.handle(id, ev);
            if self.s.stop_when_all_infected && self.devices.values().all(DeviceState::is_infected) {
                self.emit(TraceEvent::Stop { t: self.now, reason: "all_infected".into() });
                return;
            }
        }
    }

    fn handle(&mut self, id: EventId, ev: Ev) {
        match ev {
            Ev::Seed => self.seed_origin(),
            Ev::Encounter { from, to, window, kind } => self.scripted_encounter(from, to, window, kind),
            Ev::RandomEncounter { idx } => self.random_encounter(idx),
            Ev::BulkStart { xfer } => self.emit(TraceEvent::Phase { t: self.now, xfer, phase: TransferPhase::BulkStart }),
            Ev::TransferEnd { xfer } => self.finish_transfer(xfer),
            Ev::Replay { hash, to } => self.replay(hash, to),
            Ev::BuildEnd { device } => self.finish_build(device),
            Ev::ScriptedBuild { device } => self.scripted_build(device),
            Ev::KillSwitch { region, up } => self.kill_switch(region, up),
            Ev::Uplink { device } => {
                self.pending_uplinks.remove(&id);
                self.uplink(device);
            }
            Ev::Move { device, region } => {
                let from = self.regions.place(device.clone(), &region).expect("validated").expect("placed at start");
                self.devices.get_mut(&device).expect("validated").region = region.clone();
                self.emit(TraceEvent::Move { t: self.now, device, from, to: region });
            }
            Ev::Adversary { action } => self.adversary_action(action),
        }
    }

    // ---- origin, install, escape -----------------------------------------

    fn record_birth(&mut self, genome: &Genome, device: &DeviceId) {
        let region = self.regions.region_of(device).expect("placed").clone();
        let offline = !self.regions.get(&region).expect("known").internet_up;
        self.lineage.insert_genome(genome, self.now, device.clone()).expect("lineage parents precede children");
        self.births.entry(genome.strain_id()).or_insert(Birth { region, offline });
    }

    fn seed_origin(&mut self) {
        let s = self.s;
        let first = s.origin_devices[0].clone();
        self.record_birth(&s.genome, &first);
        for id in &s.origin_devices {
            let dev = self.devices.get_mut(id).expect("validated");
            let cache = dev.cache.get_or_insert_with(BuildCache::new);
            let built = full_build(&s.genome, dev.platform, &s.origin_cert, cache, &dev.class, 0.0, &s.build_settings);
            match built {
                Ok((pkg, _)) => {
                    self.origin_hashes.insert(pkg.content_hash);
                    self.do_install(id, pkg, InstallCause::Seed, None);
                }
                Err(e) => self.emit(TraceEvent::BuildFailed {
                    t: self.now,
                    device: id.clone(),
                    strain: s.genome.strain_id(),
                    error: e.to_string(),
                }),
            }
        }
    }

    fn do_install(&mut self, device: &DeviceId, pkg: SignedPackage, cause: InstallCause, xfer: Option<u64>) -> InstallOutcome {
        let now = self.now;
        let dev = self.devices.get_mut(device).expect("known device");
        let prev_hash = dev.installed.get(&pkg.package_name).map(|e| e.package.content_hash);
        let outcome = install(dev, &pkg, now);
        self.emit(TraceEvent::Install {
            t: now,
            device: device.clone(),
            strain: pkg.strain_id,
            hash: pkg.content_hash,
            package: pkg.package_name.clone(),
            cert: pkg.cert.cert_id().to_string(),
            outcome,
            cause,
            xfer,
            prev_hash,
        });
        if outcome.is_installed() {
            self.check_escape(device, pkg.strain_id);
        }
        outcome
    }

    /// The first install of an offline-born strain on a connected device
    /// outside its birth region is that strain's escape.
    fn check_escape(&mut self, device: &DeviceId, strain: StrainId) {
        if self.escaped.contains(&strain) || !self.regions.uplink_check(device) {
            return;
        }
        let region = self.regions.region_of(device).expect("placed").clone();
        let Some(birth) = self.births.get(&strain) else { return };
        if birth.offline && birth.region != region {
            self.escaped.insert(strain);
            self.emit(TraceEvent::Escape { t: self.now, strain, device: device.clone(), region });
        }
    }

    // ---- encounters and transfers ----------------------------------------

    fn scripted_encounter(&mut self, from: DeviceId, to: DeviceId, window: SimDuration, kind: EncounterKind) {
        let enc = self.next_enc;
        self.next_enc += 1;
        let reachable = kind == EncounterKind::Bridge || self.regions.same_region(&from, &to);
        let pkg = if reachable { self.devices[&from].current_package().cloned() } else { None };
        self.emit(TraceEvent::Encounter {
            t: self.now,
            enc,
            kind,
            a: from.clone(),
            b: to.clone(),
            window_ms: window.as_millis(),
            sender: pkg.as_ref().map(|_| from.clone()),
        });
        if let Some(pkg) = pkg {
            self.start_transfer(from, to, pkg, window);
        }
    }

    fn schedule_random(&mut self, idx: usize, after: SimTime) {
        let cfg = &self.s.random_encounters[idx];
        let per_ms = cfg.rate_per_hour / 3_600_000.0;
        let gap: f64 = Exp::new(per_ms).expect("positive rate").sample(&mut self.rng.encounters[idx]);
        let at = after + SimDuration(gap.round().max(1.0) as u64);
        if at <= self.s.stop_time && cfg.stop.is_none_or(|stop| at <= stop) {
            self.queue.push(at, Ev::RandomEncounter { idx });
        }
    }

    fn random_encounter(&mut self, idx: usize) {
        let cfg = &self.s.random_encounters[idx];
        let window = cfg.window;
        let members: Vec<DeviceId> = self
            .regions
            .get(&cfg.region)
            .map(|r| r.members.iter().cloned().collect())
            .unwrap_or_default();
        if members.len() >= 2 {
            let rng = &mut self.rng.encounters[idx];
            let i = rng.random_range(0..members.len());
            let mut j = rng.random_range(0..members.len() - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (members[i].clone(), members[j].clone());
            let offer = |from: &DeviceId, to: &DeviceId| {
                self.devices[from]
                    .current_package()
                    .filter(|p| !self.devices[to].holds_hash(&p.content_hash))
                    .cloned()
            };
            let send = match offer(&a, &b) {
                Some(p) => Some((a.clone(), b.clone(), p)),
                None => offer(&b, &a).map(|p| (b.clone(), a.clone(), p)),
            };
            let enc = self.next_enc;
            self.next_enc += 1;
            self.emit(TraceEvent::Encounter {
                t: self.now,
                enc,
                kind: EncounterKind::Random,
                a,
                b,
                window_ms: window.as_millis(),
                sender: send.as_ref().map(|(from, _, _)| from.clone()),
            });
            if let Some((from, to, pkg)) = send {
                self.start_transfer(from, to, pkg, window);
            }
        }
        self.schedule_random(idx, self.now);
    }

    fn start_transfer(&mut self, from: DeviceId, to: DeviceId, pkg: SignedPackage, window: SimDuration) {
        let xfer = self.next_xfer;
        self.next_xfer += 1;
        let (sc, rc) = (self.devices[&from].class.class_name.clone(), self.devices[&to].class.class_name.clone());
        let secs = self.s.rates.transfer_duration(&sc, &rc, pkg.size_bytes as f64).expect("pairs validated at load");
        let handshake = SimDuration::from_secs_f64(self.s.rates.handshake_seconds);
        let mut plan = TransferPlan::new(self.now, handshake, SimDuration::from_secs_f64(secs), window);

        let observed = self.adv.observe(self.now, LinkKind::Proximity, &pkg, &mut self.rng.observe);
        let (mut delay, mut modify) = (SimDuration::ZERO, false);
        if let (true, Some(cfg)) = (observed, self.adv_cfg) {
            if cfg.delay_probability > 0.0 && self.rng.delay.random_bool(cfg.delay_probability) {
                delay = cfg.delay;
                plan = self.adv.delay(self.now, &pkg, plan, delay);
            }
            if cfg.modify_probability > 0.0 && self.rng.modify.random_bool(cfg.modify_probability) {
                modify = true;
            }
        }
        self.emit(TraceEvent::Phase { t: self.now, xfer, phase: TransferPhase::HandshakeStart });
        let end = if plan.fits() { plan.bulk_end } else { plan.window_end };
        if plan.bulk_start <= end {
            self.queue.push(plan.bulk_start, Ev::BulkStart { xfer });
        }
        self.queue.push(end, Ev::TransferEnd { xfer });
        self.in_flight.insert(xfer, InFlight { from, to, pkg, plan, observed, delay, modify });
    }

    fn finish_transfer(&mut self, xfer: u64) {
        let f = self.in_flight.remove(&xfer).expect("transfer in flight");
        let mut delivered = None;
        let mut reason = None;
        let outcome = if !f.plan.fits() {
            TransferOutcome::OutOfTime
        } else {
            self.emit(TraceEvent::Phase { t: self.now, xfer, phase: TransferPhase::BulkEnd });
            let decision = if f.observed { self.adv.block_decision(self.now, &f.pkg) } else { Decision::Allow };
            match decision {
                Decision::Block(r) => {
                    reason = Some(r);
                    TransferOutcome::Blocked
                }
                Decision::Allow if f.modify => {
                    delivered = Some(self.adv.modify(self.now, &f.pkg));
                    TransferOutcome::CorruptedDelivered
                }
                Decision::Allow => {
                    delivered = Some(f.pkg.clone());
                    TransferOutcome::Delivered
                }
            }
        };
        let duration = if outcome == TransferOutcome::OutOfTime {
            f.plan.window_end - f.plan.handshake_start
        } else {
            f.plan.duration()
        };
        self.emit(TraceEvent::Transfer {
            t: self.now,
            xfer,
            from: f.from.clone(),
            to: f.to.clone(),
            sender_class: self.devices[&f.from].class.class_name.clone(),
            receiver_class: self.devices[&f.to].class.class_name.clone(),
            strain: f.pkg.strain_id,
            hash: f.pkg.content_hash,
            cert: f.pkg.cert.cert_id().to_string(),
            outcome,
            duration_ms: duration.as_millis(),
            observed: f.observed,
            delay_ms: f.delay.as_millis(),
            replay: false,
            reason,
        });
        match outcome {
            TransferOutcome::Blocked => self.on_block(&f.from, reason.expect("blocked has a reason")),
            TransferOutcome::CorruptedDelivered | TransferOutcome::Delivered => {
                let pkg = delivered.expect("delivered package");
                let ok = self.receive(&f.to, pkg, xfer, InstallCause::Transfer);
                if ok && outcome == TransferOutcome::Delivered {
                    self.after_delivery(&f.from, &f.to, &f.pkg, f.observed);
                }
            }
            TransferOutcome::OutOfTime => {}
        }
    }

    fn after_delivery(&mut self, from: &DeviceId, to: &DeviceId, pkg: &SignedPackage, observed: bool) {
        let count = self.sent.entry(from.clone()).or_insert(0);
        *count += 1;
        let count = *count;
        if self.s.mutation.policy == PolicyKind::EveryKTransfers && count.is_multiple_of(self.s.mutation.k) {
            self.trigger_mutation(from, false);
        }
        if let (true, Some(cfg)) = (observed, self.adv_cfg) {
            if cfg.replay_probability > 0.0 && self.rng.replay.random_bool(cfg.replay_probability) {
                self.queue.push(self.now + cfg.replay_after, Ev::Replay { hash: pkg.content_hash, to: to.clone() });
            }
        }
    }

    fn replay(&mut self, hash: ContentHash, to: DeviceId) {
        let pkg = self.adv.replay(self.now, &hash, &to).expect("only observed packages are replayed");
        let xfer = self.next_xfer;
        self.next_xfer += 1;
        self.emit(TraceEvent::Transfer {
            t: self.now,
            xfer,
            from: DeviceId::from(ADVERSARY),
            to: to.clone(),
            sender_class: ADVERSARY.into(),
            receiver_class: self.devices[&to].class.class_name.clone(),
            strain: pkg.strain_id,
            hash: pkg.content_hash,
            cert: pkg.cert.cert_id().to_string(),
            outcome: TransferOutcome::Delivered,
            duration_ms: 0,
            observed: true,
            delay_ms: 0,
            replay: true,
            reason: None,
        });
        self.receive(&to, pkg, xfer, InstallCause::Replay);
    }

    /// Verify, then install, store-and-rebuild, or refuse. Returns whether
    /// the package verified.
    fn receive(&mut self, device: &DeviceId, pkg: SignedPackage, xfer: u64, cause: InstallCause) -> bool {
        let ok = pkg.verify();
        self.emit(TraceEvent::Verify { t: self.now, xfer, device: device.clone(), hash: pkg.content_hash, ok });
        if !ok {
            return false;
        }
        let dev = &self.devices[device];
        match check_compat(&pkg, &dev.platform) {
            CompatResult::RunnableAsIs | CompatResult::Unsupported => {
                self.do_install(device, pkg, cause, Some(xfer));
            }
            CompatResult::NeedsRebuild => {
                let already_built = dev
                    .installed
                    .values()
                    .any(|e| e.package.strain_id == pkg.strain_id && e.package.cert == pkg.cert);
                let queued = self.building.get(device).is_some_and(|r| same_job(&r.job, &pkg))
                    || self.build_queue.get(device).is_some_and(|q| q.iter().any(|j| same_job(j, &pkg)));
                if !dev.holds_hash(&pkg.content_hash) {
                    self.devices.get_mut(device).expect("known").stored.push(pkg.clone());
                    self.emit(TraceEvent::Stored {
                        t: self.now,
                        device: device.clone(),
                        hash: pkg.content_hash,
                        strain: pkg.strain_id,
                        compat: CompatResult::NeedsRebuild,
                    });
                }
                if self.s.rebuild_on_receive && !already_built && !queued {
                    let genome = Arc::clone(pkg.embedded_genome.as_ref().expect("rebuildable packages carry a genome"));
                    let job = BuildJob { genome, cert: pkg.cert.clone(), cause: InstallCause::SelfCompile, xfer: Some(xfer) };
                    self.enqueue_build(device, job);
                }
            }
        }
        true
    }

    // ---- builds ------------------------------------------------------------

    fn enqueue_build(&mut self, device: &DeviceId, job: BuildJob) {
        self.build_queue.entry(device.clone()).or_default().push_back(job);
        if !self.building.contains_key(device) {
            self.start_next_build(device);
        }
    }

    fn start_next_build(&mut self, device: &DeviceId) {
        let settings = self.s.build_settings;
        while let Some(job) = self.build_queue.get_mut(device).and_then(VecDeque::pop_front) {
            let now = self.now;
            let dev = self.devices.get_mut(device).expect("known");
            let temperature = thermal_update(dev, now);
            let throttle = dev.class.thermal.throttle_multiplier(temperature);
            match self_compile(dev, &job.genome, &job.cert, now, &settings) {
                Ok((pkg, report)) => {
                    self.emit(TraceEvent::BuildStart {
                        t: now,
                        device: device.clone(),
                        strain: job.genome.strain_id(),
                        cause: job.cause,
                        temperature,
                        throttle,
                    });
                    let end = now + SimDuration::from_secs_f64(report.total_seconds);
                    self.queue.push(end, Ev::BuildEnd { device: device.clone() });
                    self.building.insert(device.clone(), Running { job, pkg, report });
                    return;
                }
                Err(e) => {
                    self.emit(TraceEvent::BuildFailed {
                        t: now,
                        device: device.clone(),
                        strain: job.genome.strain_id(),
                        error: e.to_string(),
                    });
                    if job.cause == InstallCause::Mutation {
                        self.mutating.remove(device);
                    }
                }
            }
        }
    }

    fn finish_build(&mut self, device: DeviceId) {
        let r = self.building.remove(&device).expect("build running");
        let dev = &self.devices[&device];
        self.emit(TraceEvent::BuildEnd {
            t: self.now,
            device: device.clone(),
            strain: r.pkg.strain_id,
            hash: r.pkg.content_hash,
            duration_ms: SimDuration::from_secs_f64(r.report.total_seconds).as_millis(),
            cache_hits: r.report.cache_hits,
            cache_misses: r.report.cache_misses,
            temperature: dev.temperature,
        });
        self.do_install(&device, r.pkg, r.job.cause, r.job.xfer);
        if r.job.cause == InstallCause::Mutation {
            self.mutating.remove(&device);
        }
        self.start_next_build(&device);
    }

    fn scripted_build(&mut self, device: DeviceId) {
        let Some(pkg) = self.devices[&device].current_package() else { return };
        let Some(genome) = pkg.embedded_genome.clone() else { return };
        let job = BuildJob { genome, cert: pkg.cert.clone(), cause: InstallCause::SelfCompile, xfer: None };
        self.enqueue_build(&device, job);
    }

    // ---- mutation ----------------------------------------------------------

    fn on_block(&mut self, sender: &DeviceId, reason: BlockReason) {
        if self.s.mutation.policy == PolicyKind::OnBlock {
            let resign = reason == BlockReason::CertListed && self.s.mutation.resign_on_cert_block;
            self.trigger_mutation(sender, resign);
        }
    }

    fn trigger_mutation(&mut self, device: &DeviceId, resign: bool) {
        if self.mutating.contains(device) {
            return;
        }
        let Some(pkg) = self.devices[device].current_package().cloned() else { return };
        let Some(genome) = pkg.embedded_genome.clone() else { return };
        let policy = &self.s.mutation;
        let mut ops: Vec<MutationOp> = Vec::new();
        if resign {
            ops.extend(random_op(&genome, OpKind::RenamePackage, &mut self.rng.mutation));
        }
        let mut scratch = (*genome).clone();
        for _ in 0..policy.ops_per_mutation {
            let Some(op) = random_mutation(&scratch, &policy.ops, &mut self.rng.mutation) else { break };
            match mutate(&scratch, std::slice::from_ref(&op)) {
                Ok(next) => {
                    scratch = next;
                    ops.push(op);
                }
                Err(_) => break,
            }
        }
        let Ok(child) = mutate(&genome, &ops) else { return };
        let cert = if resign {
            self.cert_counter += 1;
            let id = format!("{}-r{}", self.s.origin_cert.cert_id(), self.cert_counter);
            self.issued_certs.insert(id.clone());
            Certificate::new(id, false)
        } else {
            pkg.cert.clone()
        };
        self.record_birth(&child, device);
        self.emit(TraceEvent::Mutation {
            t: self.now,
            device: device.clone(),
            parent: genome.strain_id(),
            child: child.strain_id(),
            generation: child.generation(),
            ops: ops.iter().map(ToString::to_string).collect(),
            cert: cert.cert_id().to_string(),
        });
        self.mutating.insert(device.clone());
        let job = BuildJob { genome: Arc::new(child), cert, cause: InstallCause::Mutation, xfer: None };
        self.enqueue_build(device, job);
    }

    // ---- network and adversary --------------------------------------------

    fn kill_switch(&mut self, region: RegionId, up: bool) {
        self.regions.kill_switch(&region, up).expect("validated region");
        self.emit(TraceEvent::KillSwitch { t: self.now, region: region.clone(), up });
        if !up {
            // Uplinks due while the region is dark are dropped; those due
            // after the next scripted restore still go ahead.
            let restore = self
                .s
                .kill_switches
                .iter()
                .filter(|(at, r, up)| *up && *r == region && *at >= self.now)
                .map(|(at, _, _)| *at)
                .min();
            let doomed: Vec<(EventId, DeviceId)> = self
                .pending_uplinks
                .iter()
                .filter(|(_, (at, d))| {
                    self.regions.region_of(d) == Some(&region) && restore.is_none_or(|r| *at < r)
                })
                .map(|(id, (_, d))| (*id, d.clone()))
                .collect();
            for (id, device) in doomed {
                self.queue.cancel(id);
                self.pending_uplinks.remove(&id);
                self.emit(TraceEvent::UplinkCancelled { t: self.now, device, region: region.clone() });
            }
        }
    }

    fn uplink(&mut self, device: DeviceId) {
        let reachable = self.regions.uplink_check(&device);
        let mut observed = None;
        if reachable {
            if let Some(pkg) = self.devices[&device].current_package().cloned() {
                self.adv.observe(self.now, LinkKind::Internet, &pkg, &mut self.rng.observe);
                observed = Some(pkg.content_hash);
            }
        }
        self.emit(TraceEvent::Uplink { t: self.now, device, reachable, observed });
    }

    fn blacklist_hash(&mut self, hash: ContentHash, source: &str) {
        if self.adv.blacklist_hash(self.now, hash, source) {
            self.emit(TraceEvent::Blacklist { t: self.now, hash: Some(hash), cert: None, source: source.into() });
        }
    }

    fn blacklist_cert(&mut self, cert: &str, source: &str) {
        if self.adv.blacklist_cert(self.now, cert, source) {
            self.emit(TraceEvent::Blacklist {
                t: self.now,
                hash: None,
                cert: Some(cert.to_string()),
                source: source.into(),
            });
        }
    }

    fn adversary_action(&mut self, action: AdversaryAction) {
        match action {
            AdversaryAction::BlacklistOrigin => {
                for h in self.origin_hashes.clone() {
                    self.blacklist_hash(h, "origin");
                }
            }
            AdversaryAction::BlacklistObserved => {
                for h in self.adv.observed.clone() {
                    self.blacklist_hash(h, "observed");
                }
            }
            AdversaryAction::BlacklistCert(c) => self.blacklist_cert(&c, "scripted"),
            AdversaryAction::Compromise { device, blacklist_revealed } => {
                let dev = self.devices.get_mut(&device).expect("validated");
                match self.adv.compromise(self.now, dev) {
                    Ok(rev) => {
                        self.emit(TraceEvent::Compromise {
                            t: self.now,
                            device: device.clone(),
                            ok: true,
                            hashes: rev.package_hashes.iter().copied().collect(),
                            certs: rev.cert_ids.iter().cloned().collect(),
                        });
                        if blacklist_revealed {
                            for h in rev.package_hashes {
                                self.blacklist_hash(h, "compromise");
                            }
                            for c in rev.cert_ids {
                                self.blacklist_cert(&c, "compromise");
                            }
                        }
                    }
                    Err(_) => self.emit(TraceEvent::Compromise {
                        t: self.now,
                        device,
                        ok: false,
                        hashes: Vec::new(),
                        certs: Vec::new(),
                    }),
                }
            }
        }
    }

    // ---- wrap-up -------------------------------------------------------------

    fn finish(mut self) -> RunResult {
        for (id, dev) in &self.devices {
            let (hits, misses) = dev.cache.as_ref().map_or((0, 0), |c| (c.hits(), c.misses()));
            let installed = dev
                .installed
                .values()
                .map(|e| InstalledSummary {
                    package: e.package.package_name.clone(),
                    hash: e.package.content_hash,
                    strain: e.package.strain_id,
                    cert: e.package.cert.cert_id().to_string(),
                })
                .collect();
            self.trace.push(TraceEvent::DeviceFinal {
                device: id.clone(),
                class: dev.class.class_name.clone(),
                region: dev.region.clone(),
                installed,
                stored: dev.stored.len(),
                temperature: dev.temperature,
                compromised: dev.compromised,
                cache_hits: hits,
                cache_misses: misses,
            });
        }
        let mut strains: Vec<_> = self.lineage.iter().map(|(s, n)| (*s, n.clone())).collect();
        strains.sort_by_key(|(s, n)| (n.generation, n.birth_time, *s));
        for (strain, node) in strains {
            self.trace.push(TraceEvent::Strain {
                strain,
                parent: node.parent,
                generation: node.generation,
                birth_t: node.birth_time,
                birth_device: node.birth_device,
            });
        }
        self.trace.set_lineage(self.lineage.clone());
        RunResult {
            trace: self.trace,
            devices: self.devices,
            adversary: self.adv,
            lineage: self.lineage,
            issued_certs: self.issued_certs,
        }
    }
}

fn same_job(job: &BuildJob, pkg: &SignedPackage) -> bool {
    job.genome.strain_id() == pkg.strain_id && job.cert == pkg.cert
}
