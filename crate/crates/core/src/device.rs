//! Install/update rules, platform compatibility, on-device self-compilation
//! and the thermal model.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::buildchain::{full_build, BuildCache, BuildError, BuildReport, BuildSettings};
use crate::model::{Certificate, DeviceState, Genome, InstalledEntry, PlatformSpec, SignedPackage};
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompatResult {
    RunnableAsIs,
    NeedsRebuild,
    Unsupported,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstallOutcome {
    Updated,
    SideBySide,
    Rejected,
    Incompatible,
}

impl InstallOutcome {
    /// Whether the package ended up installed.
    pub fn is_installed(self) -> bool {
        matches!(self, InstallOutcome::Updated | InstallOutcome::SideBySide)
    }
}

/// A package runs as-is when built for the same architecture and the device
/// API level lies in `[built_for, built_for + api_window]`. Otherwise it can
/// be rebuilt when it carries a genome that supports the device.
pub fn check_compat(pkg: &SignedPackage, platform: &PlatformSpec) -> CompatResult {
    let window = pkg.embedded_genome.as_ref().map_or(2, |g| g.api_window());
    let built = pkg.built_for;
    if built.cpu_arch == platform.cpu_arch
        && built.api_level <= platform.api_level
        && platform.api_level <= built.api_level.saturating_add(window)
    {
        return CompatResult::RunnableAsIs;
    }
    match &pkg.embedded_genome {
        Some(genome) if genome.supports(platform) => CompatResult::NeedsRebuild,
        _ => CompatResult::Unsupported,
    }
}

/// Applies the package-manager rules: same name and certificate replaces,
/// a new name installs alongside, a certificate clash is refused.
/// The caller must have verified the package.
pub fn install(dev: &mut DeviceState, pkg: &SignedPackage, now: SimTime) -> InstallOutcome {
    debug_assert!(pkg.verify(), "unverified package reached install");
    if check_compat(pkg, &dev.platform) == CompatResult::Unsupported {
        return InstallOutcome::Incompatible;
    }
    let outcome = match dev.installed.get(&pkg.package_name) {
        Some(existing) if existing.package.cert != pkg.cert => return InstallOutcome::Rejected,
        Some(_) => InstallOutcome::Updated,
        None => InstallOutcome::SideBySide,
    };
    let install_seq = dev.next_install_seq;
    dev.next_install_seq += 1;
    dev.installed.insert(
        pkg.package_name.clone(),
        InstalledEntry { package: pkg.clone(), install_time: now, install_seq },
    );
    outcome
}

/// Cools `temperature` over `elapsed_seconds` of idle time.
pub fn cool(temperature: f64, cool_rate: f64, elapsed_seconds: f64) -> f64 {
    assert!(elapsed_seconds >= 0.0, "elapsed time must be non-negative");
    (temperature - cool_rate * elapsed_seconds).max(0.0)
}

/// Brings the device's temperature up to `now`, cooling for the idle time
/// since its last thermal update.
pub fn thermal_update(dev: &mut DeviceState, now: SimTime) -> f64 {
    let elapsed = now.saturating_since(dev.thermal_clock).as_secs_f64();
    dev.temperature = cool(dev.temperature, dev.class.thermal.cool_rate, elapsed);
    dev.thermal_clock = dev.thermal_clock.max(now);
    dev.temperature
}

/// Adds one build's worth of heat. A throttled device holds at its
/// threshold rather than heating further.
pub fn apply_build_heat(dev: &mut DeviceState, finished_at: SimTime) {
    let t = &dev.class.thermal;
    let heated = dev.temperature + t.heat_per_build;
    dev.temperature = if heated >= t.throttle_threshold { t.throttle_threshold } else { heated };
    dev.thermal_clock = dev.thermal_clock.max(finished_at);
}

/// Rebuilds `genome` for this device with its own build chain.
///
/// Cools the device for idle time up to `now`, builds with the current
/// throttle state, then heats the device as of the build's completion.
pub fn self_compile(
    dev: &mut DeviceState,
    genome: &Arc<Genome>,
    cert: &Certificate,
    now: SimTime,
    settings: &BuildSettings,
) -> Result<(SignedPackage, BuildReport), BuildError> {
    thermal_update(dev, now);
    let class = Arc::clone(&dev.class);
    let temperature = dev.temperature;
    let platform = dev.platform;
    let cache = dev.cache.get_or_insert_with(BuildCache::new);
    let (pkg, report) = full_build(genome, platform, cert, cache, &class, temperature, settings)?;
    let finished = now + crate::time::SimDuration::from_secs_f64(report.total_seconds);
    apply_build_heat(dev, finished);
    Ok((pkg, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CpuArch, DeviceClass, DeviceId, RegionId, SourceUnit, ThermalParams};
    use crate::time::SimDuration;

    fn genome(name: &str) -> Arc<Genome> {
        Arc::new(
            Genome::builder(name)
                .source("Main", SourceUnit::new("class Main {}"))
                .library("lib", "jar")
                .supported_archs([CpuArch::Armv7, CpuArch::Arm64])
                .build()
                .unwrap(),
        )
    }

    fn device(class: DeviceClass, platform: PlatformSpec) -> DeviceState {
        DeviceState::new(DeviceId::from("d"), Arc::new(class), platform, RegionId::from("r"))
    }

    fn p(api: u32, arch: CpuArch) -> PlatformSpec {
        PlatformSpec::new(api, arch).unwrap()
    }

    fn build(g: &Arc<Genome>, platform: PlatformSpec, cert: &Certificate) -> SignedPackage {
        let class = DeviceClass::preset("nexus_6").unwrap();
        full_build(g, platform, cert, &mut BuildCache::new(), &class, 0.0, &BuildSettings::default()).unwrap().0
    }

    #[test]
    fn compat_cases() {
        let g = genome("a");
        let pkg = build(&g, p(19, CpuArch::Arm64), &Certificate::debug());
        assert_eq!(check_compat(&pkg, &p(19, CpuArch::Arm64)), CompatResult::RunnableAsIs);
        assert_eq!(check_compat(&pkg, &p(21, CpuArch::Arm64)), CompatResult::RunnableAsIs);
        assert_eq!(check_compat(&pkg, &p(22, CpuArch::Arm64)), CompatResult::NeedsRebuild);
        assert_eq!(check_compat(&pkg, &p(18, CpuArch::Arm64)), CompatResult::NeedsRebuild);
        assert_eq!(check_compat(&pkg, &p(19, CpuArch::Armv7)), CompatResult::NeedsRebuild);
        assert_eq!(check_compat(&pkg, &p(19, CpuArch::X86)), CompatResult::Unsupported);

        let stripped_settings = BuildSettings { embed_genome: false, ..BuildSettings::default() };
        let class = DeviceClass::preset("nexus_6").unwrap();
        let (stripped, _) = full_build(
            &g,
            p(19, CpuArch::Arm64),
            &Certificate::debug(),
            &mut BuildCache::new(),
            &class,
            0.0,
            &stripped_settings,
        )
        .unwrap();
        assert_eq!(check_compat(&stripped, &p(19, CpuArch::Armv7)), CompatResult::Unsupported);
    }

    #[test]
    fn install_rules() {
        let plat = p(19, CpuArch::Armv7);
        let mut dev = device(DeviceClass::preset("nexus_5").unwrap(), plat);
        let x = Certificate::new("x", false);
        let y = Certificate::new("y", false);
        let a1 = build(&genome("A"), plat, &x);
        assert_eq!(install(&mut dev, &a1, SimTime(0)), InstallOutcome::SideBySide);
        let a2 = build(&Arc::new(genome("A").as_ref().clone()), plat, &x);
        assert_eq!(install(&mut dev, &a2, SimTime(1)), InstallOutcome::Updated);
        assert_eq!(dev.installed.len(), 1);
        let a_y = build(&genome("A"), plat, &y);
        let before = dev.installed.clone();
        assert_eq!(install(&mut dev, &a_y, SimTime(2)), InstallOutcome::Rejected);
        assert_eq!(dev.installed, before);
        let b = build(&genome("B"), plat, &y);
        assert_eq!(install(&mut dev, &b, SimTime(3)), InstallOutcome::SideBySide);
        assert_eq!(dev.installed.len(), 2);
        assert_eq!(dev.current_package().unwrap().package_name, "B");
    }

    #[test]
    fn self_compile_makes_runnable_package_embedding_genome() {
        let g = genome("A");
        let foreign = build(&g, p(21, CpuArch::Arm64), &Certificate::debug());
        let plat = p(19, CpuArch::Armv7);
        let mut dev = device(DeviceClass::preset("nexus_5").unwrap(), plat);
        assert_eq!(check_compat(&foreign, &plat), CompatResult::NeedsRebuild);
        let embedded = foreign.embedded_genome.clone().unwrap();
        let (local, report) = self_compile(&mut dev, &embedded, &foreign.cert, SimTime(0), &BuildSettings::default())
            .unwrap();
        assert_eq!(check_compat(&local, &plat), CompatResult::RunnableAsIs);
        assert_eq!(local.embedded_genome.as_deref(), Some(g.as_ref()));
        assert!(report.total_seconds > 0.0);
        assert!(install(&mut dev, &local, SimTime(1)).is_installed());
    }

    #[test]
    fn thermal_cooling_clamps() {
        assert_eq!(cool(10.0, 1.0, 0.0), 10.0);
        assert_eq!(cool(10.0, 1.0, 20.0), 0.0);
        assert_eq!(cool(10.0, 0.5, 4.0), 8.0);
    }

    fn hot_class() -> DeviceClass {
        let mut c = DeviceClass::preset("nexus_5").unwrap();
        c.thermal = ThermalParams { heat_per_build: 10.0, cool_rate: 1.0, throttle_threshold: 25.0, throttle_factor: 2.0 };
        c
    }

    #[test]
    fn heat_then_cool_restores_multiplier() {
        // step-sequence oracle: temperatures after each build/idle step
        let plat = p(19, CpuArch::Armv7);
        let mut dev = device(hot_class(), plat);
        let t = dev.class.thermal;
        let mut expected = 0.0_f64;
        let mut now = SimTime(0);
        for _ in 0..3 {
            assert_eq!(thermal_update(&mut dev, now), expected);
            apply_build_heat(&mut dev, now);
            expected = (expected + t.heat_per_build).min(t.throttle_threshold);
        }
        assert_eq!(dev.temperature, 25.0);
        assert_eq!(t.throttle_multiplier(dev.temperature), 2.0);
        now += SimDuration::from_secs_f64(25.0);
        thermal_update(&mut dev, now);
        assert_eq!(dev.temperature, 0.0);
        assert_eq!(t.throttle_multiplier(dev.temperature), 1.0);
    }

    #[test]
    fn consecutive_builds_slow_down_until_cooled() {
        let g = genome("A");
        let plat = p(19, CpuArch::Armv7);
        let mut dev = device(hot_class(), plat);
        let cert = Certificate::debug();
        let settings = BuildSettings::default();
        let mut now = SimTime(0);
        let mut times = Vec::new();
        for _ in 0..5 {
            let (_, r) = self_compile(&mut dev, &g, &cert, now, &settings).unwrap();
            now += SimDuration::from_secs_f64(r.total_seconds);
            times.push(r.total_seconds);
        }
        // build 1 cold cache; builds 2,3 warm unthrottled; 4,5 throttled
        assert!(times[1] < times[0]);
        assert_eq!(times[1], times[2]);
        assert!((times[3] - 2.0 * times[2]).abs() < 1e-9);
        assert_eq!(times[3], times[4]);
        now += SimDuration::from_secs_f64(25.0);
        let (_, r) = self_compile(&mut dev, &g, &cert, now, &settings).unwrap();
        assert_eq!(r.total_seconds, times[1]);
    }

    #[test]
    fn replication_closure_same_cert_never_rejected() {
        let g = genome("A");
        let plat = p(19, CpuArch::Armv7);
        let mut dev = device(DeviceClass::preset("nexus_5").unwrap(), plat);
        let settings = BuildSettings::default();
        let (first, _) = self_compile(&mut dev, &g, &Certificate::debug(), SimTime(0), &settings).unwrap();
        assert_eq!(install(&mut dev, &first, SimTime(0)), InstallOutcome::SideBySide);
        let (second, _) = self_compile(&mut dev, &g, &Certificate::debug(), SimTime(100_000), &settings).unwrap();
        assert_eq!(second.content_hash, first.content_hash);
        assert_eq!(install(&mut dev, &second, SimTime(100_000)), InstallOutcome::Updated);
    }
}
