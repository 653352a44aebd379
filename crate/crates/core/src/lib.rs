//! Deterministic discrete-event simulation of autonomous, self-compiling
//! apps that mutate and spread device-to-device under network disruption.

pub mod adversary;
pub mod buildchain;
pub mod canonical;
pub mod device;
pub mod model;
pub mod mutation;
pub mod netmodel;
pub mod sim;
pub mod time;

pub use canonical::{canonical_hash, Canonical, ContentHash};
pub use model::{Certificate, DeviceClass, DeviceState, Genome, PlatformSpec, SignedPackage, StrainId};
pub use time::{SimDuration, SimTime};
