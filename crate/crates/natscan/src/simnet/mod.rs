//! Deterministic discrete-event simulator: ground-truth topologies with
//! configurable IPID policies, retransmission behavior, ingress filtering,
//! NAT-penetration holes, cross-traffic noise and packet loss.

mod config;
mod engine;
mod log;

pub use config::{
    ConfigError, FilterPolicy, InternalHost, IpidPolicy, OutpostConfig, RetransBehavior, Scenario,
};
pub use engine::{FlowKey, SimNet};
pub use log::{dump_jsonl, load_jsonl, EventKind, LogEntry};
