//! Deterministic discrete-event network simulator and baseline overlays.

mod baseline;
mod config;
mod fec;
mod link;
mod sim;

pub use baseline::{BaselinePath, FlatChord, XorId, XorOverlay};
pub use config::{auto_height, ChurnSchedule, ConfigError, SimConfig};
pub use fec::{fec_decode, fec_encode, frame_delivery_probability, FecError, FecFrame, Shard};
pub use link::{link_latency, LinkModel, VelocityField};
pub use sim::{
    Action, BroadcastReport, ChurnOutcome, Delivery, MessageKind, SimError, SimEvent, SimMetrics, Simulator,
};
