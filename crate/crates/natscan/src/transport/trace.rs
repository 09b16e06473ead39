//! Trace-replay transport: re-drives a recorded event-log dump through the
//! scanner logic, for offline decision-maker testing.
//!
//! Replay runs in lockstep with the recording: each send is anchored to
//! the next matching scanner-originated record (advancing the replay clock
//! to the recorded emission time), and receives consume recorded inbound
//! deliveries. Ports and sequence numbers are not part of the dump format,
//! so matching is by address, flags and time.

use std::net::Ipv4Addr;

use super::{FlowFilter, Received, RstGuard, Transport, TransportCaps, TransportError};
use crate::model::{Packet, TcpFlags};
use crate::simnet::{EventKind, FlowKey, LogEntry};

pub struct TraceTransport {
    scanner_ip: Ipv4Addr,
    records: Vec<LogEntry>,
    used: Vec<bool>,
    clock_ms: u64,
    suppressed: Vec<FlowKey>,
    sent: u64,
}

impl TraceTransport {
    pub fn new(scanner_ip: Ipv4Addr, records: Vec<LogEntry>) -> Self {
        let used = vec![false; records.len()];
        TraceTransport { scanner_ip, records, used, clock_ms: 0, suppressed: Vec::new(), sent: 0 }
    }

    /// Keeps only records involving `ip`, so one target's session can be
    /// replayed out of a multi-target trace.
    pub fn filtered_for_target(scanner_ip: Ipv4Addr, records: &[LogEntry], ip: Ipv4Addr) -> Self {
        let slice: Vec<LogEntry> = records
            .iter()
            .copied()
            .filter(|e| e.src == ip || e.dst == ip)
            .collect();
        Self::new(scanner_ip, slice)
    }

    fn consume_outbound(&mut self, pkt: &Packet) {
        let spoofed = pkt.src_ip != self.scanner_ip;
        let found = self.records.iter().enumerate().position(|(i, e)| {
            !self.used[i]
                && e.from_scanner
                && e.time_ms >= self.clock_ms.saturating_sub(1)
                && e.dst == pkt.dst_ip
                && e.flags == pkt.flags
                && (!spoofed || e.src == pkt.src_ip)
        });
        if let Some(i) = found {
            self.used[i] = true;
            self.clock_ms = self.clock_ms.max(self.records[i].time_ms);
        }
        // A send with no recorded counterpart simply floats at the current
        // clock; subsequent receives will time out just as the original
        // run's would have.
    }

    fn consume_kernel_rst(&mut self, toward: Ipv4Addr) {
        let found = self.records.iter().enumerate().position(|(i, e)| {
            !self.used[i]
                && e.from_scanner
                && e.src == self.scanner_ip
                && e.dst == toward
                && e.flags == TcpFlags::Rst
                && e.time_ms >= self.clock_ms
        });
        if let Some(i) = found {
            self.used[i] = true;
        }
    }
}

impl Transport for TraceTransport {
    fn caps(&self) -> TransportCaps {
        TransportCaps { can_spoof_source: true, accepts_unsolicited_synack: true }
    }

    fn scanner_ip(&self) -> Ipv4Addr {
        self.scanner_ip
    }

    fn now_ms(&self) -> u64 {
        self.clock_ms
    }

    fn send(&mut self, pkt: Packet) -> Result<(), TransportError> {
        self.consume_outbound(&pkt);
        self.sent += 1;
        Ok(())
    }

    fn recv_match(&mut self, filter: &FlowFilter, timeout_ms: u64) -> Option<Received> {
        let deadline = self.clock_ms + timeout_ms;
        let found = self.records.iter().enumerate().position(|(i, e)| {
            !self.used[i]
                && !e.from_scanner
                && e.kind == EventKind::Deliver
                && e.dst == self.scanner_ip
                && e.src == filter.remote_ip
                && filter.flags.map_or(true, |f| f == e.flags)
                && e.time_ms <= deadline
        })?;
        self.used[found] = true;
        let rec = self.records[found];
        self.clock_ms = self.clock_ms.max(rec.time_ms);
        // Rebuild the packet shape the filter expects; ports are not part
        // of the dump format.
        let pkt = Packet::new(
            rec.src,
            rec.dst,
            filter.remote_port,
            filter.local_port,
            rec.flags,
            0,
            0,
            rec.ipid,
        );
        if rec.flags == TcpFlags::SynAck {
            let flow = FlowKey {
                peer_ip: rec.src,
                peer_port: filter.remote_port,
                local_port: filter.local_port,
            };
            if !self.suppressed.contains(&flow) {
                self.consume_kernel_rst(rec.src);
            }
        }
        Some(Received { at_ms: rec.time_ms, pkt })
    }

    fn wait_until_ms(&mut self, t_ms: u64) {
        self.clock_ms = self.clock_ms.max(t_ms);
    }

    fn reserve_sends(&mut self, _n: u32, _span_ms: u64) {
        // The recorded timeline already carries the original pacing.
    }

    fn suppress_local_rst(&mut self, flow: FlowKey) -> RstGuard {
        self.suppressed.push(flow);
        RstGuard { flow }
    }

    fn release_local_rst(&mut self, guard: RstGuard) {
        self.suppressed.retain(|f| *f != guard.flow);
    }

    fn sent_count(&self) -> u64 {
        self.sent
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(
        time_ms: u64,
        src: Ipv4Addr,
        dst: Ipv4Addr,
        flags: TcpFlags,
        ipid: u16,
        from_scanner: bool,
    ) -> LogEntry {
        LogEntry { time_ms, src, dst, flags, ipid, kind: EventKind::Deliver, from_scanner }
    }

    #[test]
    fn replays_probe_and_response_in_lockstep() {
        let scanner = Ipv4Addr::new(198, 51, 100, 9);
        let outpost = Ipv4Addr::new(203, 0, 113, 5);
        let records = vec![
            entry(2_000, scanner, outpost, TcpFlags::SynAck, 1, true),
            entry(2_000, outpost, scanner, TcpFlags::Rst, 501, false),
            entry(3_000, scanner, outpost, TcpFlags::SynAck, 2, true),
            entry(3_000, outpost, scanner, TcpFlags::Rst, 502, false),
        ];
        let mut tx = TraceTransport::new(scanner, records);
        tx.send(Packet::new(scanner, outpost, 40000, 80, TcpFlags::SynAck, 0, 0, 1)).unwrap();
        assert_eq!(tx.now_ms(), 2_000);
        let filt = FlowFilter { remote_ip: outpost, remote_port: 80, local_port: 40000, flags: Some(TcpFlags::Rst) };
        let r = tx.recv_match(&filt, 1000).unwrap();
        assert_eq!(r.pkt.ipid, 501);
        tx.send(Packet::new(scanner, outpost, 40001, 80, TcpFlags::SynAck, 0, 0, 2)).unwrap();
        let filt = FlowFilter { remote_ip: outpost, remote_port: 80, local_port: 40001, flags: Some(TcpFlags::Rst) };
        let r = tx.recv_match(&filt, 1000).unwrap();
        assert_eq!(r.pkt.ipid, 502);
    }

    #[test]
    fn missing_response_times_out_like_the_original() {
        let scanner = Ipv4Addr::new(198, 51, 100, 9);
        let outpost = Ipv4Addr::new(203, 0, 113, 5);
        let records = vec![
            entry(1_000, scanner, outpost, TcpFlags::SynAck, 1, true),
            // Response was lost in the original run: drop record only.
            LogEntry {
                time_ms: 1_000,
                src: outpost,
                dst: scanner,
                flags: TcpFlags::Rst,
                ipid: 77,
                kind: EventKind::DropLoss,
                from_scanner: false,
            },
        ];
        let mut tx = TraceTransport::new(scanner, records);
        tx.send(Packet::new(scanner, outpost, 40000, 80, TcpFlags::SynAck, 0, 0, 1)).unwrap();
        let filt = FlowFilter { remote_ip: outpost, remote_port: 80, local_port: 40000, flags: Some(TcpFlags::Rst) };
        assert!(tx.recv_match(&filt, 1000).is_none());
    }
}
