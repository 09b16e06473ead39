//! NAT-penetration testing over the shared-IPID TCP/IP side channel.
//!
//! The library infers whether spoofed-source packets can reach hosts
//! behind a NAT gateway, using only the gateway's globally shared IPID
//! counter as the observable. The pipeline runs in three stages:
//! pre-filtering (liveness and an IPID-zero screen), outpost selection
//! (shared-counter check, spoofability check, local check), and
//! NAT-penetration detection (retransmission timing, calibration, and the
//! timing-anchored decision maker).
//!
//! All traffic flows through a [`transport::Transport`]; the shipped
//! backends are a deterministic discrete-event simulator with full ground
//! truth ([`simnet`]) and a trace replayer. There is no raw-socket
//! backend: scans run against simulated or recorded topologies only.

pub mod detect;
pub mod model;
pub mod outpost;
pub mod pipeline;
pub mod prefilter;
pub mod probe;
pub mod rate;
pub mod report;
pub mod rng;
pub mod simnet;
pub mod transport;

pub use model::{ipid_delta, is_forward_step, Cidr, IpidSeries, OutpostOutcome, Packet, PenetrationOutcome, TcpFlags};
