//! Stage-one pre-filtering: a SYN liveness probe and a SYN-ACK/RST probe
//! with the IPID-zero screen. Two probe packets per target; live targets
//! additionally cost one teardown RST.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::model::Packet;
use crate::model::TcpFlags;
use crate::rng::ScanRng;
use crate::transport::{FlowFilter, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefilterResult {
    pub target: Ipv4Addr,
    pub alive: bool,
    pub rst_seen: bool,
    pub first_ipid: Option<u16>,
    pub passed: bool,
}

/// Liveness: does the target complete the first handshake step on this
/// port? The kernel path answers the SYN-ACK with a teardown RST, so no
/// connection is left half-open.
pub fn syn_probe<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    target: Ipv4Addr,
    port: u16,
) -> bool {
    let sport = rng.local_port();
    let syn = Packet::new(tx.scanner_ip(), target, sport, port, TcpFlags::Syn, rng.seq(), 0, rng.ipid());
    if tx.send(syn).is_err() {
        return false;
    }
    let filter = FlowFilter {
        remote_ip: target,
        remote_port: port,
        local_port: sport,
        flags: Some(TcpFlags::SynAck),
    };
    tx.recv_match(&filter, 1000).is_some()
}

/// One unsolicited SYN-ACK; records the responding RST's IPID if any.
pub fn synack_probe<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    target: Ipv4Addr,
    port: u16,
) -> (bool, Option<u16>) {
    let sport = rng.local_port();
    let probe = Packet::new(
        tx.scanner_ip(),
        target,
        sport,
        port,
        TcpFlags::SynAck,
        rng.seq(),
        rng.seq(),
        rng.ipid(),
    );
    if tx.send(probe).is_err() {
        return (false, None);
    }
    let filter = FlowFilter {
        remote_ip: target,
        remote_port: port,
        local_port: sport,
        flags: Some(TcpFlags::Rst),
    };
    match tx.recv_match(&filter, 1000) {
        Some(r) => (true, Some(r.pkt.ipid)),
        None => (false, None),
    }
}

/// Runs both filters. A target passes iff it is alive, answers unsolicited
/// SYN-ACKs with RST, and that RST carries a nonzero IPID (a shared
/// counter sitting at zero is vanishingly unlikely, so zero marks
/// constant-zero stampers).
pub fn run_prefilter<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    target: Ipv4Addr,
    port: u16,
) -> PrefilterResult {
    let alive = syn_probe(tx, rng, target, port);
    if !alive {
        return PrefilterResult { target, alive, rst_seen: false, first_ipid: None, passed: false };
    }
    tx.wait_until_ms(tx.now_ms() + 1000);
    let (rst_seen, first_ipid) = synack_probe(tx, rng, target, port);
    let passed = alive && rst_seen && first_ipid.is_some_and(|v| v != 0);
    PrefilterResult { target, alive, rst_seen, first_ipid, passed }
}
