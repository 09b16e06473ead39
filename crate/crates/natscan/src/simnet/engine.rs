//! Deterministic discrete-event network engine.
//!
//! A single virtual clock drives everything: scanner stimuli are injected
//! at the current time, host responses, retransmissions and cross-traffic
//! noise are queued events, and identical (scenario, stimulus) inputs yield
//! bit-identical event logs. Ties are broken by insertion order.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FilterPolicy, IpidPolicy, OutpostConfig, Scenario};
use super::log::{EventKind, LogEntry};
use crate::model::{is_private_addr, Packet, TcpFlags};

/// Flow identity from the owning host's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowKey {
    pub peer_ip: Ipv4Addr,
    pub peer_port: u16,
    pub local_port: u16,
}

#[derive(Debug, Clone, Copy)]
enum Origin {
    Scanner,
    Outpost(usize),
    Internal(usize),
}

/// Where a routed packet lands. Private addresses are scoped to one
/// outpost's LAN, so delivery carries the LAN index explicitly.
#[derive(Debug, Clone, Copy)]
enum NodeRef {
    Scanner,
    Outpost(usize),
    Internal(usize),
}

#[derive(Debug, Clone)]
enum EventBody {
    Arrival { pkt: Packet, at: NodeRef, from_scanner: bool, spoofed: bool },
    Retrans { outpost: usize, flow: FlowKey, gen: u64, attempt: u32 },
    Noise { outpost: usize },
}

#[derive(Debug, Clone)]
struct QueuedEvent {
    time_ms: u64,
    seq: u64,
    body: EventBody,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.time_ms == other.time_ms && self.seq == other.seq
    }
}
impl Eq for QueuedEvent {}
impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time_ms, self.seq).cmp(&(other.time_ms, other.seq))
    }
}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

enum IpidState {
    Global(u16),
    PerFlow { initial: u16, counters: HashMap<Ipv4Addr, u16> },
    Random,
    Constant(u16),
}

impl IpidState {
    fn stamp(&mut self, remote: Ipv4Addr, rng: &mut ChaCha8Rng) -> u16 {
        match self {
            IpidState::Global(c) => {
                *c = c.wrapping_add(1);
                *c
            }
            IpidState::PerFlow { initial, counters } => {
                let c = counters.entry(remote).or_insert(*initial);
                *c = c.wrapping_add(1);
                *c
            }
            IpidState::Random => rng.gen(),
            IpidState::Constant(v) => *v,
        }
    }
}

struct FlowState {
    gen: u64,
    syn_seq: u32,
}

struct OutpostState {
    cfg: OutpostConfig,
    ipid: IpidState,
    flows: HashMap<FlowKey, FlowState>,
    alive: HashMap<Ipv4Addr, bool>,
    rng_noise: ChaCha8Rng,
    rng_ipid: ChaCha8Rng,
    rng_loss: ChaCha8Rng,
    rng_jitter: ChaCha8Rng,
}

fn purpose_rng(seed: u64, outpost: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((outpost as u64) << 3) | purpose);
    rng
}

fn exp_interval_ms(rng: &mut ChaCha8Rng, rate_pps: f64) -> u64 {
    // Strictly positive uniform draw keeps ln() finite.
    let u: f64 = 1.0 - rng.gen::<f64>();
    let secs = -u.ln() / rate_pps;
    ((secs * 1000.0).round() as u64).max(1)
}

/// One simulated world. Single-threaded by contract: all access is
/// serialized through the event loop; run independent instances for
/// parallel scans.
pub struct SimNet {
    scenario: Scenario,
    clock_ms: u64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<QueuedEvent>>,
    outposts: Vec<OutpostState>,
    outpost_index: HashMap<Ipv4Addr, usize>,
    internal_ipid: HashMap<(usize, Ipv4Addr), u16>,
    scanner_inbox: Vec<(u64, Packet)>,
    scanner_ipid: u16,
    suppressed: HashSet<FlowKey>,
    log: Vec<LogEntry>,
}

impl SimNet {
    pub fn new(scenario: Scenario) -> Self {
        let mut outpost_index = HashMap::new();
        let mut outposts = Vec::new();
        for (i, cfg) in scenario.outposts.iter().enumerate() {
            outpost_index.insert(cfg.public_ip, i);
            let mut alive = HashMap::new();
            for h in &cfg.internal_hosts {
                alive.insert(h.ip, h.alive);
            }
            let ipid = match cfg.ipid {
                IpidPolicy::Global { initial } => IpidState::Global(initial),
                IpidPolicy::PerFlow { initial } => {
                    IpidState::PerFlow { initial, counters: HashMap::new() }
                }
                IpidPolicy::Random { .. } => IpidState::Random,
                IpidPolicy::Constant { value } => IpidState::Constant(value),
            };
            let rng_ipid = match cfg.ipid {
                IpidPolicy::Random { seed: Some(seed) } => ChaCha8Rng::seed_from_u64(seed),
                _ => purpose_rng(scenario.rng_seed, i, 1),
            };
            outposts.push(OutpostState {
                cfg: cfg.clone(),
                ipid,
                flows: HashMap::new(),
                alive,
                rng_noise: purpose_rng(scenario.rng_seed, i, 0),
                rng_ipid,
                rng_loss: purpose_rng(scenario.rng_seed, i, 2),
                rng_jitter: purpose_rng(scenario.rng_seed, i, 3),
            });
        }
        let mut net = SimNet {
            scenario,
            clock_ms: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            outposts,
            outpost_index,
            internal_ipid: HashMap::new(),
            scanner_inbox: Vec::new(),
            scanner_ipid: 0,
            suppressed: HashSet::new(),
            log: Vec::new(),
        };
        for i in 0..net.outposts.len() {
            let rate = net.outposts[i].cfg.noise_pps;
            if rate > 0.0 {
                let dt = exp_interval_ms(&mut net.outposts[i].rng_noise, rate);
                net.schedule(dt, EventBody::Noise { outpost: i });
            }
        }
        net
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn scanner_ip(&self) -> Ipv4Addr {
        self.scenario.scanner_ip
    }

    pub fn now_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// Scanner-originated records only (the stimulus log).
    pub fn stimulus_log(&self) -> Vec<LogEntry> {
        self.log.iter().copied().filter(|e| e.from_scanner).collect()
    }

    pub fn suppress_scanner_rst(&mut self, flow: FlowKey) {
        self.suppressed.insert(flow);
    }

    pub fn release_scanner_rst(&mut self, flow: FlowKey) {
        self.suppressed.remove(&flow);
    }

    /// Toggles an internal host behind one gateway mid-run; unknown
    /// addresses are ignored.
    pub fn set_internal_alive(&mut self, outpost_ip: Ipv4Addr, host: Ipv4Addr, alive: bool) {
        if let Some(&i) = self.outpost_index.get(&outpost_ip) {
            if self.outposts[i].alive.contains_key(&host) {
                self.outposts[i].alive.insert(host, alive);
            }
        }
    }

    /// Current global counter value, for ground-truth conservation checks.
    pub fn global_counter(&self, outpost_ip: Ipv4Addr) -> Option<u16> {
        let i = *self.outpost_index.get(&outpost_ip)?;
        match self.outposts[i].ipid {
            IpidState::Global(c) => Some(c),
            _ => None,
        }
    }

    /// Retransmission events still backed by a live flow at this outpost.
    pub fn pending_live_retrans(&self, outpost_ip: Ipv4Addr) -> usize {
        let Some(&idx) = self.outpost_index.get(&outpost_ip) else {
            return 0;
        };
        self.queue
            .iter()
            .filter(|Reverse(ev)| match &ev.body {
                EventBody::Retrans { outpost, flow, gen, .. } if *outpost == idx => self.outposts
                    [idx]
                    .flows
                    .get(flow)
                    .is_some_and(|f| f.gen == *gen),
                _ => false,
            })
            .count()
    }

    fn schedule(&mut self, delay_ms: u64, body: EventBody) {
        let ev = QueuedEvent { time_ms: self.clock_ms + delay_ms, seq: self.next_seq, body };
        self.next_seq += 1;
        self.queue.push(Reverse(ev));
    }

    fn record(&mut self, pkt: &Packet, kind: EventKind, from_scanner: bool) {
        self.log.push(LogEntry {
            time_ms: self.clock_ms,
            src: pkt.src_ip,
            dst: pkt.dst_ip,
            flags: pkt.flags,
            ipid: pkt.ipid,
            kind,
            from_scanner,
        });
    }

    /// Injects a scanner stimulus at the current virtual time.
    pub fn inject_from_scanner(&mut self, pkt: Packet) {
        self.route(pkt, Origin::Scanner);
    }

    /// Convenience wrapper mirroring the host state machine contract:
    /// inject one stimulus, run the world for `horizon_ms`, and return
    /// everything that came back toward the scanner.
    pub fn deliver(&mut self, pkt: Packet, horizon_ms: u64) -> Vec<(u64, Packet)> {
        self.inject_from_scanner(pkt);
        let t = self.clock_ms + horizon_ms;
        self.advance_to(t);
        self.drain_scanner_inbox()
    }

    pub fn drain_scanner_inbox(&mut self) -> Vec<(u64, Packet)> {
        std::mem::take(&mut self.scanner_inbox)
    }

    pub fn peek_next_event_ms(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(ev)| ev.time_ms)
    }

    /// Processes the next event if it is due at or before `limit_ms`.
    /// Returns the event's timestamp, leaving the clock there.
    pub fn step_upto(&mut self, limit_ms: u64) -> Option<u64> {
        let due = self.peek_next_event_ms()?;
        if due > limit_ms {
            return None;
        }
        let Reverse(ev) = self.queue.pop().expect("peeked event vanished");
        self.clock_ms = self.clock_ms.max(ev.time_ms);
        self.dispatch(ev.body);
        Some(ev.time_ms)
    }

    /// Processes every event due at or before `t_ms` in timestamp order
    /// (insertion order on ties), then sets the clock to `t_ms`.
    pub fn advance_to(&mut self, t_ms: u64) {
        while self.step_upto(t_ms).is_some() {}
        self.clock_ms = self.clock_ms.max(t_ms);
    }

    fn link_outpost(&self, pkt: &Packet, origin: Origin) -> Option<usize> {
        match origin {
            Origin::Outpost(i) | Origin::Internal(i) => Some(i),
            Origin::Scanner => self.outpost_index.get(&pkt.dst_ip).copied(),
        }
    }

    /// Resolves a packet's fate at emission time: routing, per-link loss,
    /// ingress filtering. Survivors are scheduled as arrivals after jitter.
    fn route(&mut self, pkt: Packet, origin: Origin) {
        let from_scanner = matches!(origin, Origin::Scanner);
        let spoofed = from_scanner && pkt.src_ip != self.scenario.scanner_ip;

        // Routing: does the destination exist on a reachable link?
        let dst_node = if pkt.dst_ip == self.scenario.scanner_ip {
            if from_scanner {
                None
            } else {
                Some(NodeRef::Scanner)
            }
        } else if let Some(&i) = self.outpost_index.get(&pkt.dst_ip) {
            Some(NodeRef::Outpost(i))
        } else if is_private_addr(pkt.dst_ip) {
            // Private space is reachable only from its own gateway, and
            // only through an open NAT-penetration hole to a live host.
            match origin {
                Origin::Outpost(i) => {
                    let o = &self.outposts[i];
                    if o.cfg.hole && o.alive.get(&pkt.dst_ip).copied().unwrap_or(false) {
                        Some(NodeRef::Internal(i))
                    } else {
                        None
                    }
                }
                _ => None,
            }
        } else {
            None
        };
        let Some(at) = dst_node else {
            self.record(&pkt, EventKind::DropUnroutable, from_scanner);
            return;
        };

        let link = self.link_outpost(&pkt, origin);

        // Per-link random loss.
        if self.scenario.link_loss_prob > 0.0 {
            if let Some(i) = link {
                let p: f64 = self.outposts[i].rng_loss.gen();
                if p < self.scenario.link_loss_prob {
                    self.record(&pkt, EventKind::DropLoss, from_scanner);
                    return;
                }
            }
        }

        // Ingress filtering on the WAN side of the destination gateway.
        if from_scanner {
            if let NodeRef::Outpost(i) = at {
                let dropped = match self.outposts[i].cfg.filter {
                    FilterPolicy::BlockAllSpoofed => spoofed,
                    FilterPolicy::BlockPrivateSourceOnly => is_private_addr(pkt.src_ip),
                    FilterPolicy::NoFiltering => false,
                };
                if dropped {
                    self.record(&pkt, EventKind::DropFilter, from_scanner);
                    return;
                }
            }
        }

        self.record(&pkt, EventKind::Deliver, from_scanner);
        let jitter = match link {
            Some(i) if self.scenario.jitter_ms > 0 => {
                self.outposts[i].rng_jitter.gen_range(0..=self.scenario.jitter_ms)
            }
            _ => 0,
        };
        self.schedule(jitter, EventBody::Arrival { pkt, at, from_scanner, spoofed });
    }

    fn dispatch(&mut self, body: EventBody) {
        match body {
            EventBody::Arrival { pkt, at, from_scanner, spoofed } => match at {
                NodeRef::Scanner => self.scanner_arrival(pkt),
                NodeRef::Outpost(i) => self.outpost_arrival(i, pkt, from_scanner, spoofed),
                NodeRef::Internal(i) => self.internal_arrival(i, pkt),
            },
            EventBody::Retrans { outpost, flow, gen, attempt } => {
                let live = self.outposts[outpost]
                    .flows
                    .get(&flow)
                    .is_some_and(|f| f.gen == gen);
                if live {
                    self.emit_syn_ack(outpost, flow, attempt);
                }
            }
            EventBody::Noise { outpost } => {
                let ipid = self.stamp_outpost(outpost, Ipv4Addr::UNSPECIFIED);
                let src = self.outposts[outpost].cfg.public_ip;
                self.log.push(LogEntry {
                    time_ms: self.clock_ms,
                    src,
                    dst: Ipv4Addr::UNSPECIFIED,
                    flags: TcpFlags::SynAck,
                    ipid,
                    kind: EventKind::Noise,
                    from_scanner: false,
                });
                let rate = self.outposts[outpost].cfg.noise_pps;
                let dt = exp_interval_ms(&mut self.outposts[outpost].rng_noise, rate);
                self.schedule(dt, EventBody::Noise { outpost });
            }
        }
    }

    fn scanner_arrival(&mut self, pkt: Packet) {
        self.scanner_inbox.push((self.clock_ms, pkt));
        if pkt.flags == TcpFlags::SynAck {
            let flow = FlowKey {
                peer_ip: pkt.src_ip,
                peer_port: pkt.src_port,
                local_port: pkt.dst_port,
            };
            if !self.suppressed.contains(&flow) {
                // Kernel path: an unexpected SYN-ACK is answered with RST
                // unless the scanner is deliberately dropping them.
                self.scanner_ipid = self.scanner_ipid.wrapping_add(1);
                let rst = Packet::new(
                    self.scenario.scanner_ip,
                    pkt.src_ip,
                    pkt.dst_port,
                    pkt.src_port,
                    TcpFlags::Rst,
                    pkt.ack,
                    0,
                    self.scanner_ipid,
                );
                self.route(rst, Origin::Scanner);
            }
        }
    }

    fn stamp_outpost(&mut self, idx: usize, remote: Ipv4Addr) -> u16 {
        let o = &mut self.outposts[idx];
        o.ipid.stamp(remote, &mut o.rng_ipid)
    }

    fn emit_syn_ack(&mut self, idx: usize, flow: FlowKey, attempt: u32) {
        let syn_seq = self.outposts[idx].flows[&flow].syn_seq;
        let ipid = self.stamp_outpost(idx, flow.peer_ip);
        let pkt = Packet::new(
            self.outposts[idx].cfg.public_ip,
            flow.peer_ip,
            flow.local_port,
            flow.peer_port,
            TcpFlags::SynAck,
            0,
            syn_seq.wrapping_add(1),
            ipid,
        );
        self.route(pkt, Origin::Outpost(idx));
        let offsets = self.outposts[idx].cfg.retrans.offsets_s();
        if (attempt as usize) < offsets.len() {
            let first_emit_delay = if attempt == 0 {
                0
            } else {
                offsets[attempt as usize - 1] as u64 * 1000
            };
            let delay = offsets[attempt as usize] as u64 * 1000 - first_emit_delay;
            let gen = self.outposts[idx].flows[&flow].gen;
            self.schedule(delay, EventBody::Retrans { outpost: idx, flow, gen, attempt: attempt + 1 });
        }
    }

    fn emit_rst(&mut self, idx: usize, dst_ip: Ipv4Addr, src_port: u16, dst_port: u16, seq: u32) {
        let ipid = self.stamp_outpost(idx, dst_ip);
        let pkt = Packet::new(
            self.outposts[idx].cfg.public_ip,
            dst_ip,
            src_port,
            dst_port,
            TcpFlags::Rst,
            seq,
            0,
            ipid,
        );
        self.route(pkt, Origin::Outpost(idx));
    }

    fn outpost_arrival(&mut self, idx: usize, pkt: Packet, _from_scanner: bool, _spoofed: bool) {
        let flow = FlowKey {
            peer_ip: pkt.src_ip,
            peer_port: pkt.src_port,
            local_port: pkt.dst_port,
        };
        match pkt.flags {
            TcpFlags::Syn => {
                if self.outposts[idx].cfg.drop_inbound_syn {
                    return;
                }
                if self.outposts[idx].cfg.open_ports.contains(&pkt.dst_port) {
                    if self.outposts[idx].flows.contains_key(&flow) {
                        // Duplicated SYN: the stack re-sends the SYN-ACK but
                        // keeps the existing retransmission state.
                        let ipid = self.stamp_outpost(idx, flow.peer_ip);
                        let syn_seq = self.outposts[idx].flows[&flow].syn_seq;
                        let dup = Packet::new(
                            self.outposts[idx].cfg.public_ip,
                            flow.peer_ip,
                            flow.local_port,
                            flow.peer_port,
                            TcpFlags::SynAck,
                            0,
                            syn_seq.wrapping_add(1),
                            ipid,
                        );
                        self.route(dup, Origin::Outpost(idx));
                    } else {
                        let gen = self.next_seq;
                        self.outposts[idx]
                            .flows
                            .insert(flow, FlowState { gen, syn_seq: pkt.seq });
                        self.emit_syn_ack(idx, flow, 0);
                    }
                } else {
                    // Closed port: reset the attempt.
                    self.emit_rst(idx, pkt.src_ip, pkt.dst_port, pkt.src_port, 0);
                }
            }
            TcpFlags::SynAck => {
                // No outbound connections exist in this world, so every
                // inbound SYN-ACK is unsolicited.
                if self.outposts[idx].cfg.rst_to_unsolicited_synack {
                    self.emit_rst(idx, pkt.src_ip, pkt.dst_port, pkt.src_port, pkt.ack);
                }
            }
            TcpFlags::Rst | TcpFlags::RstAck => {
                self.outposts[idx].flows.remove(&flow);
            }
        }
    }

    fn internal_arrival(&mut self, outpost_idx: usize, pkt: Packet) {
        if pkt.flags == TcpFlags::SynAck {
            // Normal stack: an unsolicited SYN-ACK is reset immediately.
            let ctr = self.internal_ipid.entry((outpost_idx, pkt.dst_ip)).or_insert(0);
            *ctr = ctr.wrapping_add(1);
            let rst = Packet::new(
                pkt.dst_ip,
                pkt.src_ip,
                pkt.dst_port,
                pkt.src_port,
                TcpFlags::Rst,
                pkt.ack,
                0,
                *ctr,
            );
            self.route(rst, Origin::Internal(outpost_idx));
        }
    }
}
