//! The censoring adversary.
//!
//! It may observe, block, delay, replay and modify traffic on links it
//! monitors, keep hash and certificate blacklists, and compromise a bounded
//! number of devices. It holds no signing keys: every package it emits is
//! either a byte-identical replay or marked corrupted.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::ContentHash;
use crate::model::{DeviceId, DeviceState, SignedPackage, StrainId};
use crate::netmodel::TransferPlan;
use crate::time::{SimDuration, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Monitoring {
    /// Only internet traffic is watched; proximity beaming goes unseen.
    InternetOnly,
    /// Every link is watched; each proximity transfer is seen with
    /// probability `probability`.
    AllLinks { probability: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Proximity,
    Internet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockReason {
    HashListed,
    CertListed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Allow,
    Block(BlockReason),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ActionKind {
    Observed { hash: ContentHash },
    BlacklistHash { hash: ContentHash, source: String },
    BlacklistCert { cert: String, source: String },
    Decided { hash: ContentHash, cert: String, decision: Decision },
    Delayed { hash: ContentHash, extra_ms: u64 },
    Modified { hash: ContentHash },
    Replayed { hash: ContentHash, to: DeviceId },
    Compromised { device: DeviceId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedAction {
    pub t: SimTime,
    #[serde(flatten)]
    pub kind: ActionKind,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdversaryError {
    #[error("compromise budget exhausted")]
    BudgetExhausted,
    #[error("package {0} was never observed")]
    NotObserved(ContentHash),
}

/// What a compromised device gives away.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Revealed {
    pub strains: BTreeSet<StrainId>,
    pub package_hashes: BTreeSet<ContentHash>,
    pub cert_ids: BTreeSet<String>,
}

#[derive(Clone, Debug)]
pub struct AdversaryState {
    pub hash_blacklist: BTreeSet<ContentHash>,
    pub cert_blacklist: BTreeSet<String>,
    pub observed: BTreeSet<ContentHash>,
    pub monitoring: Monitoring,
    captured: BTreeMap<ContentHash, SignedPackage>,
    compromise_budget: u32,
    actions_log: Vec<LoggedAction>,
}

impl AdversaryState {
    pub fn new(monitoring: Monitoring, compromise_budget: u32) -> Self {
        Self {
            hash_blacklist: BTreeSet::new(),
            cert_blacklist: BTreeSet::new(),
            observed: BTreeSet::new(),
            monitoring,
            captured: BTreeMap::new(),
            compromise_budget,
            actions_log: Vec::new(),
        }
    }

    /// An adversary that watches nothing and blocks nothing.
    pub fn passive() -> Self {
        Self::new(Monitoring::InternetOnly, 0)
    }

    pub fn compromise_budget(&self) -> u32 {
        self.compromise_budget
    }

    pub fn actions_log(&self) -> &[LoggedAction] {
        &self.actions_log
    }

    fn log(&mut self, t: SimTime, kind: ActionKind) {
        self.actions_log.push(LoggedAction { t, kind });
    }

    /// Decides whether a transfer on `link` is seen and, if so, records the
    /// package. Proximity links under probabilistic monitoring consume one
    /// draw from `rng`. Observation never alters the transfer.
    pub fn observe<R: Rng + ?Sized>(&mut self, t: SimTime, link: LinkKind, pkg: &SignedPackage, rng: &mut R) -> bool {
        let seen = match (self.monitoring, link) {
            (_, LinkKind::Internet) => true,
            (Monitoring::InternetOnly, LinkKind::Proximity) => false,
            (Monitoring::AllLinks { probability }, LinkKind::Proximity) => rng.random_bool(probability.clamp(0.0, 1.0)),
        };
        if seen {
            self.observed.insert(pkg.content_hash);
            self.captured.entry(pkg.content_hash).or_insert_with(|| pkg.clone());
            self.log(t, ActionKind::Observed { hash: pkg.content_hash });
        }
        seen
    }

    pub fn blacklist_hash(&mut self, t: SimTime, hash: ContentHash, source: &str) -> bool {
        let added = self.hash_blacklist.insert(hash);
        if added {
            self.log(t, ActionKind::BlacklistHash { hash, source: source.to_string() });
        }
        added
    }

    pub fn blacklist_cert(&mut self, t: SimTime, cert_id: &str, source: &str) -> bool {
        let added = self.cert_blacklist.insert(cert_id.to_string());
        if added {
            self.log(t, ActionKind::BlacklistCert { cert: cert_id.to_string(), source: source.to_string() });
        }
        added
    }

    /// Blocks iff the package hash or its certificate is blacklisted.
    pub fn block_decision(&mut self, t: SimTime, pkg: &SignedPackage) -> Decision {
        let decision = if self.hash_blacklist.contains(&pkg.content_hash) {
            Decision::Block(BlockReason::HashListed)
        } else if self.cert_blacklist.contains(pkg.cert.cert_id()) {
            Decision::Block(BlockReason::CertListed)
        } else {
            Decision::Allow
        };
        self.log(
            t,
            ActionKind::Decided { hash: pkg.content_hash, cert: pkg.cert.cert_id().to_string(), decision },
        );
        decision
    }

    /// Pushes a transfer's completion back by `extra`.
    pub fn delay(&mut self, t: SimTime, pkg: &SignedPackage, plan: TransferPlan, extra: SimDuration) -> TransferPlan {
        self.log(t, ActionKind::Delayed { hash: pkg.content_hash, extra_ms: extra.as_millis() });
        TransferPlan { bulk_end: plan.bulk_end + extra, ..plan }
    }

    /// Tampers with a package in flight. Without the signing key the result
    /// can only fail verification.
    pub fn modify(&mut self, t: SimTime, pkg: &SignedPackage) -> SignedPackage {
        self.log(t, ActionKind::Modified { hash: pkg.content_hash });
        SignedPackage { corrupted: true, ..pkg.clone() }
    }

    /// Re-sends a previously observed package, byte for byte.
    pub fn replay(&mut self, t: SimTime, hash: &ContentHash, to: &DeviceId) -> Result<SignedPackage, AdversaryError> {
        let pkg = self.captured.get(hash).cloned().ok_or(AdversaryError::NotObserved(*hash))?;
        self.log(t, ActionKind::Replayed { hash: *hash, to: to.clone() });
        Ok(pkg)
    }

    /// Reads out a device's storage. Costs one unit of budget.
    pub fn compromise(&mut self, t: SimTime, dev: &mut DeviceState) -> Result<Revealed, AdversaryError> {
        if self.compromise_budget == 0 {
            return Err(AdversaryError::BudgetExhausted);
        }
        self.compromise_budget -= 1;
        dev.compromised = true;
        let mut revealed = Revealed::default();
        for pkg in dev.installed.values().map(|e| &e.package).chain(dev.stored.iter()) {
            revealed.package_hashes.insert(pkg.content_hash);
            revealed.cert_ids.insert(pkg.cert.cert_id().to_string());
            if let Some(g) = &pkg.embedded_genome {
                revealed.strains.insert(g.strain_id());
            }
        }
        self.log(t, ActionKind::Compromised { device: dev.device_id.clone() });
        Ok(revealed)
    }

    /// Replays the action log and checks that every block was backed by a
    /// blacklist entry present at decision time.
    pub fn audit(&self) -> Result<(), String> {
        audit_actions(&self.actions_log)
    }
}

pub fn audit_actions(log: &[LoggedAction]) -> Result<(), String> {
    let mut hashes = BTreeSet::new();
    let mut certs = BTreeSet::new();
    for entry in log {
        match &entry.kind {
            ActionKind::BlacklistHash { hash, .. } => {
                hashes.insert(*hash);
            }
            ActionKind::BlacklistCert { cert, .. } => {
                certs.insert(cert.clone());
            }
            ActionKind::Decided { hash, cert, decision } => {
                let ok = match decision {
                    Decision::Block(BlockReason::HashListed) => hashes.contains(hash),
                    Decision::Block(BlockReason::CertListed) => certs.contains(cert),
                    Decision::Allow => !hashes.contains(hash) && !certs.contains(cert),
                };
                if !ok {
                    return Err(format!("decision {decision:?} for {} at {} not backed by blacklist", hash.short(), entry.t));
                }
            }
            _ => {}
        }
    }
    Ok(())
}
