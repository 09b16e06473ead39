//! The seam between scanner and network: send packets (optionally with a
//! spoofed source), receive matching responses within a timeout, suppress
//! the scanner's own kernel RSTs for chosen flows, and wait on the
//! backend's clock.
//!
//! Two backends ship: the authoritative simulator backend and a
//! trace-replay backend that re-drives recorded runs for offline decision
//! testing. No raw-socket backend exists.

mod sim;
mod trace;

use std::net::Ipv4Addr;

use thiserror::Error;

pub use self::sim::SimTransport;
pub use self::trace::TraceTransport;
use crate::model::{Packet, TcpFlags};
use crate::simnet::FlowKey;

/// What a backend can do; stages that need a capability must check it
/// before sending anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransportCaps {
    pub can_spoof_source: bool,
    pub accepts_unsolicited_synack: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("backend cannot send spoofed-source packets")]
    SpoofUnsupported,
}

/// Response matcher: remote endpoint plus our local port. Sequence numbers
/// are deliberately not matched; the probes are stateless.
#[derive(Debug, Clone, Copy)]
pub struct FlowFilter {
    pub remote_ip: Ipv4Addr,
    pub remote_port: u16,
    pub local_port: u16,
    pub flags: Option<TcpFlags>,
}

impl FlowFilter {
    pub fn matches(&self, pkt: &Packet) -> bool {
        pkt.src_ip == self.remote_ip
            && pkt.src_port == self.remote_port
            && pkt.dst_port == self.local_port
            && self.flags.map_or(true, |f| f == pkt.flags)
    }
}

/// A packet that matched a filter, with its arrival time on the backend
/// clock.
#[derive(Debug, Clone, Copy)]
pub struct Received {
    pub at_ms: u64,
    pub pkt: Packet,
}

/// Token for an active local-RST suppression; hand it back to
/// [`Transport::release_local_rst`] to restore normal kernel behavior.
#[derive(Debug)]
#[must_use = "suppression stays active until the guard is released"]
pub struct RstGuard {
    pub(crate) flow: FlowKey,
}

impl RstGuard {
    pub fn flow(&self) -> FlowKey {
        self.flow
    }
}

pub trait Transport {
    fn caps(&self) -> TransportCaps;

    fn scanner_ip(&self) -> Ipv4Addr;

    fn now_ms(&self) -> u64;

    /// Puts a packet on the wire at the current time, honoring the
    /// politeness budget. Spoofed sources require the spoofing capability.
    fn send(&mut self, pkt: Packet) -> Result<(), TransportError>;

    /// First packet matching `filter` that arrives within `timeout_ms`.
    /// On a match the clock stands at (or past) the arrival instant.
    fn recv_match(&mut self, filter: &FlowFilter, timeout_ms: u64) -> Option<Received>;

    /// Advances the backend clock; for the simulator this runs the world.
    fn wait_until_ms(&mut self, t_ms: u64);

    /// Blocks (in virtual time) until the politeness budget fully funds a
    /// timed sequence of `n` sends spread over `span_ms`, so the sequence
    /// keeps its cadence once started. Backends without a budget no-op.
    fn reserve_sends(&mut self, n: u32, span_ms: u64);

    /// While the guard is active the scanner emits no RST for inbound
    /// SYN-ACKs on that flow, forcing the remote side to retransmit.
    fn suppress_local_rst(&mut self, flow: FlowKey) -> RstGuard;

    fn release_local_rst(&mut self, guard: RstGuard);

    /// Scanner-originated packets sent so far (kernel-path RSTs included).
    fn sent_count(&self) -> u64;
}
