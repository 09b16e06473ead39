//! Simulator event log and its line-delimited dump format.

use std::io::{self, BufRead, Write};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::model::TcpFlags;

/// Final fate of an emitted packet, resolved at emission time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// Reached its destination (delivery is scheduled after link jitter).
    Deliver,
    /// Dropped by per-link random loss.
    DropLoss,
    /// Dropped by the gateway's ingress filter.
    DropFilter,
    /// Destination does not exist in the topology (or the NAT hole is
    /// closed for an inward packet).
    DropUnroutable,
    /// Cross-traffic emission advancing the host's counter.
    Noise,
}

/// One record per emitted packet, stamped with the emission time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub time_ms: u64,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub flags: TcpFlags,
    pub ipid: u16,
    pub kind: EventKind,
    /// True for packets the scanner put on the wire (including spoofed
    /// ones and kernel-path RSTs); the offline politeness audit keys on it.
    pub from_scanner: bool,
}

pub fn dump_jsonl<W: Write>(entries: &[LogEntry], mut w: W) -> io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_jsonl<R: BufRead>(r: R) -> io::Result<Vec<LogEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LogEntry = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("trace line {}: {e}", lineno + 1),
            )
        })?;
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_and_load_round_trip() {
        let entries = vec![
            LogEntry {
                time_ms: 12,
                src: Ipv4Addr::new(198, 51, 100, 9),
                dst: Ipv4Addr::new(203, 0, 113, 5),
                flags: TcpFlags::SynAck,
                ipid: 7,
                kind: EventKind::Deliver,
                from_scanner: true,
            },
            LogEntry {
                time_ms: 13,
                src: Ipv4Addr::new(203, 0, 113, 5),
                dst: Ipv4Addr::new(198, 51, 100, 9),
                flags: TcpFlags::Rst,
                ipid: 501,
                kind: EventKind::Deliver,
                from_scanner: false,
            },
        ];
        let mut buf = Vec::new();
        dump_jsonl(&entries, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"flags\":\"SA\""));
        let back = load_jsonl(&buf[..]).unwrap();
        assert_eq!(back, entries);
    }
}
