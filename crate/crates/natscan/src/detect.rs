//! NAT-penetration detection: per-outpost retransmission timing, timer
//! calibration, the K-spoofed-packet probe, and the timing-anchored
//! decision maker.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ipid_delta, Cidr, IpidSeries, Packet, PenetrationOutcome, TcpFlags};
use crate::outpost::dominating_burst_size;
use crate::probe::{estimate_noise, probe_series_at, NoiseEstimate, ProbeParams};
use crate::rng::ScanRng;
use crate::simnet::FlowKey;
use crate::transport::{FlowFilter, Transport};

/// Measured (and possibly calibrated) retransmission offsets in seconds,
/// relative to the first SYN-ACK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetransSchedule {
    pub offsets_s: Vec<u32>,
    pub calibrated: bool,
}

impl RetransSchedule {
    pub fn new(offsets_s: Vec<u32>) -> Self {
        RetransSchedule { offsets_s, calibrated: false }
    }

    /// The doubling pattern: treating the first offset as the first gap,
    /// every successive gap is exactly twice the previous one.
    pub fn conforms(offsets: &[u32]) -> bool {
        if offsets.is_empty() || offsets[0] == 0 {
            return false;
        }
        let mut prev_gap = offsets[0];
        for w in offsets.windows(2) {
            if w[1] <= w[0] {
                return false;
            }
            let gap = w[1] - w[0];
            if gap != 2 * prev_gap {
                return false;
            }
            prev_gap = gap;
        }
        true
    }
}

/// Repairs a uniform one-second shift: a pattern-conforming schedule is a
/// fixed point; otherwise the +1 and -1 shifted variants are tried and
/// adopted only when exactly one of them conforms.
pub fn calibrate(r: &RetransSchedule) -> RetransSchedule {
    if RetransSchedule::conforms(&r.offsets_s) {
        return RetransSchedule { offsets_s: r.offsets_s.clone(), calibrated: true };
    }
    let plus: Vec<u32> = r.offsets_s.iter().map(|o| o + 1).collect();
    let minus: Option<Vec<u32>> = if r.offsets_s.iter().all(|&o| o > 1) {
        Some(r.offsets_s.iter().map(|o| o - 1).collect())
    } else {
        None
    };
    let plus_ok = RetransSchedule::conforms(&plus);
    let minus_ok = minus.as_deref().is_some_and(RetransSchedule::conforms);
    match (plus_ok, minus_ok) {
        (true, false) => RetransSchedule { offsets_s: plus, calibrated: true },
        (false, true) => RetransSchedule { offsets_s: minus.unwrap(), calibrated: true },
        _ => RetransSchedule { offsets_s: r.offsets_s.clone(), calibrated: false },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    /// Spoofed-packet count; derived from the fresh noise estimate when
    /// unset.
    pub k: Option<u32>,
    /// Politeness ceiling on the derived K; the burst plus observation
    /// series must fit the per-target sliding-window budget.
    pub k_cap: u32,
    pub observe_window_s: u32,
    pub post_send_delay_ms: u64,
    pub neighbor_extension: bool,
    pub noise_threshold_pps: f64,
    /// A prior noise rate (typically from the qualification stage, which
    /// watched the host longer); the short per-address estimate is floored
    /// at it when sizing K and the decision bands.
    pub noise_floor_pps: f64,
    pub pre_series: ProbeParams,
    /// Confident verdicts need at least this many checked offsets.
    pub min_offsets: u32,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            k: None,
            k_cap: 7,
            observe_window_s: 25,
            post_send_delay_ms: 500,
            neighbor_extension: true,
            noise_threshold_pps: 6.0,
            noise_floor_pps: 0.0,
            pre_series: ProbeParams { n: 6, interval_s: 1, timeout_s: 1 },
            min_offsets: 2,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("no SYN-ACK arrived for the timing probe")]
    NoResponse,
    #[error("pre-burst series too noisy ({rate_pps:.2} pps); outpost needs re-qualification")]
    NoisySeriesAbort { rate_pps: f64 },
    #[error("required samples and their extension neighbors are all missing")]
    MissingSamples,
    #[error("fewer than the required calibrated offsets fall inside the series span")]
    SpanTooShort,
}

/// Measures when the outpost retransmits an unanswered SYN-ACK: one SYN
/// with local RSTs suppressed, arrivals recorded for `observe_window_s`
/// seconds, then the flow is reset.
pub fn measure_retrans<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    outpost: Ipv4Addr,
    port: u16,
    observe_window_s: u32,
) -> Result<RetransSchedule, DetectError> {
    tx.reserve_sends(2, observe_window_s as u64 * 1000);
    let sport = rng.local_port();
    let flow = FlowKey { peer_ip: outpost, peer_port: port, local_port: sport };
    let guard = tx.suppress_local_rst(flow);
    let syn = Packet::new(tx.scanner_ip(), outpost, sport, port, TcpFlags::Syn, rng.seq(), 0, rng.ipid());
    let _ = tx.send(syn);
    let filter = FlowFilter {
        remote_ip: outpost,
        remote_port: port,
        local_port: sport,
        flags: Some(TcpFlags::SynAck),
    };
    let Some(first) = tx.recv_match(&filter, 1500) else {
        tx.release_local_rst(guard);
        return Err(DetectError::NoResponse);
    };
    let t0 = first.at_ms;
    let window_end = t0 + observe_window_s as u64 * 1000;
    let mut offsets = Vec::new();
    while tx.now_ms() < window_end {
        let remaining = window_end - tx.now_ms();
        match tx.recv_match(&filter, remaining) {
            Some(r) => {
                let offset = ((r.at_ms - t0 + 500) / 1000) as u32;
                if offset > 0 && offsets.last() != Some(&offset) {
                    offsets.push(offset);
                }
            }
            None => break,
        }
    }
    tx.release_local_rst(guard);
    let rst = Packet::new(tx.scanner_ip(), outpost, sport, port, TcpFlags::Rst, rng.seq(), 0, rng.ipid());
    let _ = tx.send(rst);
    Ok(RetransSchedule::new(offsets))
}

/// Everything the penetration probe produced for one private address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenetrationProbeOutput {
    pub pre: IpidSeries,
    pub post: IpidSeries,
    pub k: u32,
    pub noise: NoiseEstimate,
}

/// Sends K spoofed SYNs (distinct sequence numbers, ports and IPIDs, so
/// each elicits its own retransmitting flow), brackets them with IPID
/// series, and ends the flows with K matching spoofed RSTs after the
/// observation series completes.
pub fn penetration_probe<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    outpost: Ipv4Addr,
    port: u16,
    private_ip: Ipv4Addr,
    schedule: &RetransSchedule,
    params: &DetectionParams,
) -> Result<PenetrationProbeOutput, DetectError> {
    let Some(&max_offset) = schedule.offsets_s.iter().max() else {
        return Err(DetectError::SpanTooShort);
    };

    let n5 = params.pre_series.n;
    tx.reserve_sends(n5, n5 as u64 * 1000);
    let anchor5 = tx.now_ms();
    let pre = probe_series_at(tx, rng, outpost, port, &params.pre_series, anchor5);
    let measured = estimate_noise(&pre).map_err(|_| DetectError::MissingSamples)?;
    if measured.rate_pps > params.noise_threshold_pps {
        return Err(DetectError::NoisySeriesAbort { rate_pps: measured.rate_pps });
    }
    let noise = NoiseEstimate {
        rate_pps: measured.rate_pps.max(params.noise_floor_pps),
        valid_pairs: measured.valid_pairs,
    };
    let k = params.k.unwrap_or_else(|| dominating_burst_size(&noise, 1, params.k_cap));

    let n6 = max_offset + 2;
    tx.reserve_sends(k + n6, 1000 + n6 as u64 * 1000);
    let burst_start = tx.now_ms() + 50;
    let step = (500 / k as u64).max(1);
    let mut sports = Vec::with_capacity(k as usize);
    for i in 0..k {
        tx.wait_until_ms(burst_start + i as u64 * step);
        let sport = rng.local_port();
        sports.push(sport);
        let syn =
            Packet::new(private_ip, outpost, sport, port, TcpFlags::Syn, rng.seq(), 0, rng.ipid());
        let _ = tx.send(syn);
    }
    let last_send = tx.now_ms();
    tx.wait_until_ms(last_send + params.post_send_delay_ms);

    let anchor6 = tx.now_ms();
    let series6 = ProbeParams { n: n6, interval_s: 1, timeout_s: 1 };
    let post = probe_series_at(tx, rng, outpost, port, &series6, anchor6);

    // End the retransmissions the burst left behind.
    tx.reserve_sends(k, k as u64 * 200);
    for sport in sports {
        let rst =
            Packet::new(private_ip, outpost, sport, port, TcpFlags::Rst, rng.seq(), 0, rng.ipid());
        let _ = tx.send(rst);
        tx.wait_until_ms(tx.now_ms() + 100);
    }
    Ok(PenetrationProbeOutput { pre, post, k, noise })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WindowRead {
    Missing,
    Ambiguous,
    Present,
    Absent,
}

fn read_window(
    series: &IpidSeries,
    a: usize,
    b: usize,
    k: u32,
    noise_rate: f64,
) -> WindowRead {
    let (Some(va), Some(vb)) = (series.value(a), series.value(b)) else {
        return WindowRead::Missing;
    };
    let g = (b - a) as u32;
    let budget = (noise_rate * g as f64).ceil() as u32 + 1;
    let inc = ipid_delta(va, vb) as u32;
    // The probe itself contributes one packet per second of window, so a
    // quiet window reads g and a retransmitting one reads k+g.
    let in_absent = inc >= k + g && inc <= k + g + budget;
    let in_present = inc >= g && inc <= g + budget;
    match (in_absent, in_present) {
        (true, false) => WindowRead::Absent,
        (false, true) => WindowRead::Present,
        _ => WindowRead::Ambiguous,
    }
}

/// The decision maker: at the first `min_offsets` calibrated offsets
/// inside the series span, the one-second increment must read K+1
/// (retransmission landed: penetration hole absent) or 1 (nothing
/// retransmitted: hole present). When the strict window is unreadable and
/// neighbor extension is on, the two-second windows around the offset are
/// consulted; they must agree. Any other pattern refuses to conclude.
pub fn decide(
    series: &IpidSeries,
    schedule: &RetransSchedule,
    k: u32,
    noise: &NoiseEstimate,
    neighbor_extension: bool,
    min_offsets: u32,
) -> Result<PenetrationOutcome, DetectError> {
    let n = series.len();
    let in_span: Vec<usize> = schedule
        .offsets_s
        .iter()
        .map(|&t| t as usize)
        .filter(|&t| t >= 1 && t < n)
        .take(min_offsets.max(1) as usize)
        .collect();
    if (in_span.len() as u32) < min_offsets {
        return Err(DetectError::SpanTooShort);
    }

    let mut classes = Vec::with_capacity(in_span.len());
    for &t in &in_span {
        let strict = read_window(series, t - 1, t, k, noise.rate_pps);
        let class = match strict {
            WindowRead::Present | WindowRead::Absent => strict,
            _ if neighbor_extension => {
                let mut wides = Vec::new();
                if t + 1 < n {
                    wides.push(read_window(series, t - 1, t + 1, k, noise.rate_pps));
                }
                if t >= 2 {
                    wides.push(read_window(series, t - 2, t, k, noise.rate_pps));
                }
                if strict == WindowRead::Missing
                    && !wides.is_empty()
                    && wides.iter().all(|w| *w == WindowRead::Missing)
                {
                    return Err(DetectError::MissingSamples);
                }
                let definite: Vec<WindowRead> = wides
                    .into_iter()
                    .filter(|w| matches!(w, WindowRead::Present | WindowRead::Absent))
                    .collect();
                match definite.as_slice() {
                    [] => WindowRead::Ambiguous,
                    [first, rest @ ..] => {
                        if rest.iter().all(|w| w == first) {
                            *first
                        } else {
                            // The widened windows disagree; refuse rather
                            // than pick a direction.
                            WindowRead::Ambiguous
                        }
                    }
                }
            }
            WindowRead::Missing => return Err(DetectError::MissingSamples),
            WindowRead::Ambiguous => WindowRead::Ambiguous,
        };
        classes.push(class);
    }
    if classes.iter().all(|c| *c == WindowRead::Absent) {
        Ok(PenetrationOutcome::HoleAbsent)
    } else if classes.iter().all(|c| *c == WindowRead::Present) {
        Ok(PenetrationOutcome::HolePresent)
    } else {
        Ok(PenetrationOutcome::Inconclusive)
    }
}

/// Per-address verdict with the evidence that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenetrationVerdict {
    pub outcome: PenetrationOutcome,
    pub probed_private_ip: Ipv4Addr,
    pub evidence: DetectionEvidence,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionEvidence {
    pub schedule: Option<RetransSchedule>,
    pub ipids6: Option<IpidSeries>,
    pub k: Option<u32>,
    pub noise: Option<NoiseEstimate>,
    pub error: Option<String>,
}

/// Measures and calibrates the outpost's retransmission schedule once
/// (retrying the timing probe a single time on silence), then probes every
/// usable address in the subnet. Per-address failures become Inconclusive
/// entries rather than aborting the sweep.
pub fn sweep_private_range<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    outpost: Ipv4Addr,
    port: u16,
    subnet: Cidr,
    params: &DetectionParams,
) -> (RetransSchedule, Vec<PenetrationVerdict>) {
    let measured = match measure_retrans(tx, rng, outpost, port, params.observe_window_s) {
        Ok(m) => Ok(m),
        Err(DetectError::NoResponse) => {
            tx.wait_until_ms(tx.now_ms() + 2000);
            measure_retrans(tx, rng, outpost, port, params.observe_window_s)
        }
        Err(e) => Err(e),
    };
    let schedule = match measured {
        Ok(m) => calibrate(&m),
        Err(e) => {
            let verdicts = subnet
                .hosts()
                .map(|ip| PenetrationVerdict {
                    outcome: PenetrationOutcome::Inconclusive,
                    probed_private_ip: ip,
                    evidence: DetectionEvidence {
                        error: Some(e.to_string()),
                        ..DetectionEvidence::default()
                    },
                })
                .collect();
            return (RetransSchedule::new(Vec::new()), verdicts);
        }
    };

    let mut verdicts = Vec::new();
    for ip in subnet.hosts() {
        let verdict = probe_one(tx, rng, outpost, port, ip, &schedule, params);
        verdicts.push(verdict);
    }
    (schedule, verdicts)
}

/// One address: penetration probe plus decision, errors folded into an
/// Inconclusive verdict carrying the failure.
pub fn probe_one<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    outpost: Ipv4Addr,
    port: u16,
    private_ip: Ipv4Addr,
    schedule: &RetransSchedule,
    params: &DetectionParams,
) -> PenetrationVerdict {
    match penetration_probe(tx, rng, outpost, port, private_ip, schedule, params) {
        Ok(out) => {
            let decision = decide(
                &out.post,
                schedule,
                out.k,
                &out.noise,
                params.neighbor_extension,
                params.min_offsets,
            );
            let (outcome, error) = match decision {
                Ok(o) => (o, None),
                Err(e) => (PenetrationOutcome::Inconclusive, Some(e.to_string())),
            };
            PenetrationVerdict {
                outcome,
                probed_private_ip: private_ip,
                evidence: DetectionEvidence {
                    schedule: Some(schedule.clone()),
                    ipids6: Some(out.post),
                    k: Some(out.k),
                    noise: Some(out.noise),
                    error,
                },
            }
        }
        Err(e) => PenetrationVerdict {
            outcome: PenetrationOutcome::Inconclusive,
            probed_private_ip: private_ip,
            evidence: DetectionEvidence {
                schedule: Some(schedule.clone()),
                error: Some(e.to_string()),
                ..DetectionEvidence::default()
            },
        },
    }
}
