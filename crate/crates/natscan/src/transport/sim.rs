//! Simulator-backed transport: the scanner's blocking calls drive the
//! discrete-event world, so waiting costs virtual time only.

use std::net::Ipv4Addr;

use super::{FlowFilter, Received, RstGuard, Transport, TransportCaps, TransportError};
use crate::model::Packet;
use crate::rate::RateBudget;
use crate::simnet::{FlowKey, LogEntry, Scenario, SimNet};

pub struct SimTransport {
    net: SimNet,
    inbox: Vec<(u64, Packet)>,
    budget: Option<RateBudget>,
    prepaid: u32,
    sent: u64,
}

impl SimTransport {
    pub fn new(scenario: Scenario) -> Self {
        SimTransport { net: SimNet::new(scenario), inbox: Vec::new(), budget: None, prepaid: 0, sent: 0 }
    }

    pub fn with_budget(scenario: Scenario, budget: RateBudget) -> Self {
        let mut t = Self::new(scenario);
        t.budget = Some(budget);
        t
    }

    pub fn net(&self) -> &SimNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut SimNet {
        &mut self.net
    }

    /// Scanner-originated records, for politeness audits and budgets.
    pub fn stimulus_log(&self) -> Vec<LogEntry> {
        self.net.stimulus_log()
    }

    fn pull_inbox(&mut self) {
        self.inbox.extend(self.net.drain_scanner_inbox());
    }

    fn find_match(&mut self, filter: &FlowFilter) -> Option<Received> {
        let pos = self.inbox.iter().position(|(_, p)| filter.matches(p))?;
        let (at_ms, pkt) = self.inbox.remove(pos);
        Some(Received { at_ms, pkt })
    }
}

impl Transport for SimTransport {
    fn caps(&self) -> TransportCaps {
        TransportCaps { can_spoof_source: true, accepts_unsolicited_synack: true }
    }

    fn scanner_ip(&self) -> Ipv4Addr {
        self.net.scanner_ip()
    }

    fn now_ms(&self) -> u64 {
        self.net.now_ms()
    }

    fn send(&mut self, pkt: Packet) -> Result<(), TransportError> {
        if pkt.src_ip != self.net.scanner_ip() && !self.caps().can_spoof_source {
            return Err(TransportError::SpoofUnsupported);
        }
        if let Some(budget) = &mut self.budget {
            if self.prepaid > 0 {
                self.prepaid -= 1;
            } else {
                let t = budget.admit(self.net.now_ms(), 1, 0);
                if t > self.net.now_ms() {
                    self.net.advance_to(t);
                }
            }
            budget.note_send(self.net.now_ms());
        }
        self.net.inject_from_scanner(pkt);
        self.pull_inbox();
        self.sent += 1;
        Ok(())
    }

    fn recv_match(&mut self, filter: &FlowFilter, timeout_ms: u64) -> Option<Received> {
        let deadline = self.net.now_ms() + timeout_ms;
        loop {
            self.pull_inbox();
            if let Some(r) = self.find_match(filter) {
                return Some(r);
            }
            match self.net.peek_next_event_ms() {
                Some(t) if t <= deadline => {
                    self.net.step_upto(deadline);
                }
                _ => {
                    self.net.advance_to(deadline);
                    self.pull_inbox();
                    return self.find_match(filter);
                }
            }
        }
    }

    fn wait_until_ms(&mut self, t_ms: u64) {
        if t_ms > self.net.now_ms() {
            self.net.advance_to(t_ms);
            self.pull_inbox();
        }
    }

    fn reserve_sends(&mut self, n: u32, span_ms: u64) {
        let Some(budget) = &mut self.budget else { return };
        if self.prepaid >= n {
            return;
        }
        let extra = n - self.prepaid;
        let t = budget.admit(self.net.now_ms(), extra, span_ms);
        if t > self.net.now_ms() {
            self.net.advance_to(t);
            self.pull_inbox();
        }
        self.prepaid = n;
    }

    fn suppress_local_rst(&mut self, flow: FlowKey) -> RstGuard {
        self.net.suppress_scanner_rst(flow);
        RstGuard { flow }
    }

    fn release_local_rst(&mut self, guard: RstGuard) {
        self.net.release_scanner_rst(guard.flow);
    }

    fn sent_count(&self) -> u64 {
        self.sent
    }
}
