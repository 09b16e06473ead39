//! Shared domain types: packets, IPID arithmetic, probe series, verdict outcomes.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The IPID field is a 16-bit counter; all deltas are taken mod 2^16.
pub const IPID_MODULUS: u32 = 1 << 16;
/// Half-range threshold used to disambiguate wrapped forward steps.
pub const IPID_HALF_RANGE: u32 = 1 << 15;

/// Wraparound distance from `a` to `b` on the 16-bit counter circle.
///
/// Returns `(b - a) mod 65536`, always in `[0, 65535]`.
pub fn ipid_delta(a: u16, b: u16) -> u16 {
    b.wrapping_sub(a)
}

/// Serial-number style forward comparison: a step is forward iff its
/// mod-65536 delta lies in `[1, 32768)`. A delta of 0 or anything at or
/// beyond the half range counts as a non-increase.
pub fn is_forward_step(a: u16, b: u16) -> bool {
    let d = ipid_delta(a, b) as u32;
    d >= 1 && d < IPID_HALF_RANGE
}

/// RFC 1918 private-address check. `Ipv4Addr::is_private` covers exactly
/// the three RFC 1918 blocks; wrapped here so call sites read as domain
/// vocabulary and tests can pin it against an independent range table.
pub fn is_private_addr(ip: Ipv4Addr) -> bool {
    ip.is_private()
}

/// The four TCP flag combinations the protocol subset uses. Anything else
/// is unrepresentable by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TcpFlags {
    #[serde(rename = "S")]
    Syn,
    #[serde(rename = "SA")]
    SynAck,
    #[serde(rename = "R")]
    Rst,
    #[serde(rename = "RA")]
    RstAck,
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TcpFlags::Syn => "S",
            TcpFlags::SynAck => "SA",
            TcpFlags::Rst => "R",
            TcpFlags::RstAck => "RA",
        };
        f.write_str(s)
    }
}

impl FromStr for TcpFlags {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "S" => Ok(TcpFlags::Syn),
            "SA" => Ok(TcpFlags::SynAck),
            "R" => Ok(TcpFlags::Rst),
            "RA" => Ok(TcpFlags::RstAck),
            other => Err(format!("unknown flag combination {other:?}")),
        }
    }
}

/// Minimal TCP/IPv4 header model carried through simulator and scanner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub flags: TcpFlags,
    pub seq: u32,
    pub ack: u32,
    pub ipid: u16,
}

impl Packet {
    pub fn new(
        src_ip: Ipv4Addr,
        dst_ip: Ipv4Addr,
        src_port: u16,
        dst_port: u16,
        flags: TcpFlags,
        seq: u32,
        ack: u32,
        ipid: u16,
    ) -> Self {
        Packet { src_ip, dst_ip, src_port, dst_port, flags, seq, ack, ipid }
    }
}

/// One probe slot: seconds since series start, plus the observed IPID or
/// `None` when the probe timed out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpidSample {
    pub offset_s: u32,
    pub value: Option<u16>,
}

/// A timestamped IPID series `ipids(T, N)`: one sample every `interval_s`
/// seconds, `None` entries marking timeouts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpidSeries {
    interval_s: u32,
    samples: Vec<IpidSample>,
}

impl IpidSeries {
    /// Builds a series from raw per-slot values; offsets are derived as
    /// `i * interval_s` so the spacing invariant holds by construction.
    pub fn from_values(interval_s: u32, values: Vec<Option<u16>>) -> Self {
        assert!(interval_s > 0, "probe interval must be positive");
        let samples = values
            .into_iter()
            .enumerate()
            .map(|(i, value)| IpidSample { offset_s: i as u32 * interval_s, value })
            .collect();
        IpidSeries { interval_s, samples }
    }

    pub fn interval_s(&self) -> u32 {
        self.interval_s
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[IpidSample] {
        &self.samples
    }

    /// Value at slot `i`, flattening the missing-sample layer.
    pub fn value(&self, i: usize) -> Option<u16> {
        self.samples.get(i).and_then(|s| s.value)
    }

    pub fn none_count(&self) -> usize {
        self.samples.iter().filter(|s| s.value.is_none()).count()
    }

    /// First sample that actually observed a value.
    pub fn first_known(&self) -> Option<IpidSample> {
        self.samples.iter().copied().find(|s| s.value.is_some())
    }

    /// Last sample that actually observed a value.
    pub fn last_known(&self) -> Option<IpidSample> {
        self.samples.iter().rev().copied().find(|s| s.value.is_some())
    }

    /// Adjacent known-value pairs, bridging `None` gaps: yields
    /// `(gap_intervals, earlier, later)` for each consecutive pair of
    /// observed samples.
    pub fn known_pairs(&self) -> Vec<(u32, u16, u16)> {
        let mut out = Vec::new();
        let mut prev: Option<(usize, u16)> = None;
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(v) = s.value {
                if let Some((pi, pv)) = prev {
                    out.push(((i - pi) as u32, pv, v));
                }
                prev = Some((i, v));
            }
        }
        out
    }
}

/// Outpost qualification funnel outcome. Later variants are only reachable
/// after every earlier stage check passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutpostOutcome {
    NotAlive,
    NoRstResponse,
    ZeroIpid,
    TooNoisy,
    NotSharedIpid,
    SpoofedPublicFiltered,
    SpoofedPrivateFiltered,
    QualifiedOutpost,
}

impl OutpostOutcome {
    /// Funnel position, used to assert the stage-ordering invariant.
    pub fn stage_rank(self) -> u8 {
        match self {
            OutpostOutcome::NotAlive => 0,
            OutpostOutcome::NoRstResponse => 1,
            OutpostOutcome::ZeroIpid => 2,
            OutpostOutcome::TooNoisy => 3,
            OutpostOutcome::NotSharedIpid => 4,
            OutpostOutcome::SpoofedPublicFiltered => 5,
            OutpostOutcome::SpoofedPrivateFiltered => 6,
            OutpostOutcome::QualifiedOutpost => 7,
        }
    }
}

/// Per-address penetration decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenetrationOutcome {
    HolePresent,
    HoleAbsent,
    Inconclusive,
}

/// IPv4 CIDR prefix with host iteration and prefix truncation, enough for
/// sweep targets and subnet clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cidr {
    network: u32,
    prefix_len: u8,
}

impl Cidr {
    pub fn new(addr: Ipv4Addr, prefix_len: u8) -> Result<Self, String> {
        if prefix_len > 32 {
            return Err(format!("prefix length {prefix_len} out of range"));
        }
        let network = u32::from(addr) & Self::mask(prefix_len);
        Ok(Cidr { network, prefix_len })
    }

    fn mask(prefix_len: u8) -> u32 {
        if prefix_len == 0 {
            0
        } else {
            u32::MAX << (32 - prefix_len)
        }
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    pub fn network(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.network)
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask(self.prefix_len) == self.network
    }

    /// Usable host addresses. For prefixes shorter than /31 the network and
    /// broadcast addresses are skipped; /31 and /32 yield every address.
    pub fn hosts(&self) -> impl Iterator<Item = Ipv4Addr> {
        let size = 1u64 << (32 - self.prefix_len);
        let (lo, hi) = if self.prefix_len >= 31 {
            (0, size)
        } else {
            (1, size - 1)
        };
        let base = self.network;
        (lo..hi).map(move |off| Ipv4Addr::from(base + off as u32))
    }

    /// Truncates an address to its enclosing prefix of the given length.
    pub fn truncate(ip: Ipv4Addr, prefix_len: u8) -> Ipv4Addr {
        Ipv4Addr::from(u32::from(ip) & Self::mask(prefix_len))
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network(), self.prefix_len)
    }
}

impl FromStr for Cidr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s
            .split_once('/')
            .ok_or_else(|| format!("expected a.b.c.d/len, got {s:?}"))?;
        let addr: Ipv4Addr = addr.parse().map_err(|e| format!("bad address in {s:?}: {e}"))?;
        let len: u8 = len.parse().map_err(|e| format!("bad prefix length in {s:?}: {e}"))?;
        Cidr::new(addr, len)
    }
}

impl Serialize for Cidr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cidr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn delta_examples() {
        assert_eq!(ipid_delta(100, 105), 5);
        assert_eq!(ipid_delta(65534, 1), 3);
        assert_eq!(ipid_delta(7, 7), 0);
    }

    #[test]
    fn forward_step_examples() {
        assert!(is_forward_step(10, 11));
        assert!(!is_forward_step(11, 10)); // delta 65535, beyond half range
        assert!(is_forward_step(65530, 4)); // wraps with delta 10
        assert!(!is_forward_step(7, 7));
    }

    // Independent oracle: walk the counter forward one tick at a time (the
    // 17-bit loop crosses the wrap boundary) and check whether `b` is
    // reachable from `a` in fewer than 32768 increments.
    fn forward_oracle(a: u16, b: u16) -> bool {
        let mut v = a;
        for _ in 1..IPID_HALF_RANGE {
            v = v.wrapping_add(1);
            if v == b {
                return true;
            }
        }
        false
    }

    #[test]
    fn forward_step_matches_brute_force_near_wrap() {
        for a in (65520..=65535).chain(0..=16) {
            for b in (65520..=65535).chain(0..=16) {
                assert_eq!(is_forward_step(a, b), forward_oracle(a, b), "a={a} b={b}");
            }
        }
    }

    #[test]
    fn flags_round_trip() {
        for f in [TcpFlags::Syn, TcpFlags::SynAck, TcpFlags::Rst, TcpFlags::RstAck] {
            assert_eq!(f.to_string().parse::<TcpFlags>().unwrap(), f);
        }
        assert!("FPU".parse::<TcpFlags>().is_err());
    }

    #[test]
    fn series_offsets_and_pairs() {
        let s = IpidSeries::from_values(2, vec![Some(10), None, Some(14), Some(15)]);
        assert_eq!(s.samples()[2].offset_s, 4);
        assert_eq!(s.none_count(), 1);
        assert_eq!(s.known_pairs(), vec![(2, 10, 14), (1, 14, 15)]);
        assert_eq!(s.first_known().unwrap().value, Some(10));
        assert_eq!(s.last_known().unwrap().offset_s, 6);
    }

    #[test]
    fn cidr_basics() {
        let c: Cidr = "192.168.1.16/28".parse().unwrap();
        assert_eq!(c.network(), Ipv4Addr::new(192, 168, 1, 16));
        let hosts: Vec<_> = c.hosts().collect();
        assert_eq!(hosts.len(), 14);
        assert_eq!(hosts[0], Ipv4Addr::new(192, 168, 1, 17));
        assert_eq!(*hosts.last().unwrap(), Ipv4Addr::new(192, 168, 1, 30));
        assert!(c.contains(Ipv4Addr::new(192, 168, 1, 23)));
        assert!(!c.contains(Ipv4Addr::new(192, 168, 1, 33)));
        let single: Cidr = "10.0.0.7/32".parse().unwrap();
        assert_eq!(single.hosts().collect::<Vec<_>>(), vec![Ipv4Addr::new(10, 0, 0, 7)]);
        assert_eq!(
            Cidr::truncate(Ipv4Addr::new(1, 2, 3, 200), 24),
            Ipv4Addr::new(1, 2, 3, 0)
        );
    }

    #[test]
    fn outcome_ranks_are_monotone() {
        let order = [
            OutpostOutcome::NotAlive,
            OutpostOutcome::NoRstResponse,
            OutpostOutcome::ZeroIpid,
            OutpostOutcome::TooNoisy,
            OutpostOutcome::NotSharedIpid,
            OutpostOutcome::SpoofedPublicFiltered,
            OutpostOutcome::SpoofedPrivateFiltered,
            OutpostOutcome::QualifiedOutpost,
        ];
        for w in order.windows(2) {
            assert!(w[0].stage_rank() < w[1].stage_rank());
        }
    }

    // Independent RFC 1918 range table, kept separate from the
    // implementation path on purpose.
    fn in_private_table(ip: Ipv4Addr) -> bool {
        let v = u32::from(ip);
        let in_range = |net: [u8; 4], len: u8| {
            let base = u32::from(Ipv4Addr::from(net));
            let mask = if len == 0 { 0 } else { u32::MAX << (32 - len) };
            v & mask == base
        };
        in_range([10, 0, 0, 0], 8) || in_range([172, 16, 0, 0], 12) || in_range([192, 168, 0, 0], 16)
    }

    proptest! {
        #[test]
        fn delta_sum_is_zero_or_modulus(a: u16, b: u16) {
            let s = ipid_delta(a, b) as u32 + ipid_delta(b, a) as u32;
            prop_assert!(s == 0 || s == IPID_MODULUS);
        }

        #[test]
        fn forward_step_antisymmetric(a: u16, b: u16) {
            if a != b {
                prop_assert!(!(is_forward_step(a, b) && is_forward_step(b, a)));
            }
        }

        #[test]
        fn private_classification_matches_range_table(bits: u32) {
            let ip = Ipv4Addr::from(bits);
            prop_assert_eq!(is_private_addr(ip), in_private_table(ip));
        }
    }
}
