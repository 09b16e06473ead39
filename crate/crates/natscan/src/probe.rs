//! The IPID probe module: periodic SYN-ACK probing into an `ipids(T, N)`
//! series, shared-counter classification, and noise-rate estimation.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ipid_delta, is_forward_step, IpidSeries, Packet, TcpFlags};
use crate::rng::ScanRng;
use crate::transport::{FlowFilter, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub n: u32,
    pub interval_s: u32,
    pub timeout_s: u32,
}

impl ProbeParams {
    /// The shared-counter check series (N=10, T=1).
    pub fn ipid_check() -> Self {
        ProbeParams { n: 10, interval_s: 1, timeout_s: 1 }
    }

    /// The short bracketing series used around spoof bursts (N=4, T=1).
    pub fn boundary() -> Self {
        ProbeParams { n: 4, interval_s: 1, timeout_s: 1 }
    }
}

/// IPID interference attributable to the target's other connections,
/// after subtracting the probe's own one-packet-per-interval contribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub rate_pps: f64,
    pub valid_pairs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IpidClass {
    SharedMonotonic,
    TooManyNone,
    NotMonotonic,
    TooNoisy,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProbeError {
    #[error("fewer than two observed samples in the series")]
    InsufficientData,
}

/// Sends one unsolicited SYN-ACK per interval and records the responding
/// RST's IPID, or an absent value on timeout. Timeouts are data, not
/// errors. The caller is responsible for funding the sequence on the
/// politeness budget.
pub fn probe_series<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    target: Ipv4Addr,
    port: u16,
    params: &ProbeParams,
) -> IpidSeries {
    let anchor = tx.now_ms();
    probe_series_at(tx, rng, target, port, params, anchor)
}

/// As [`probe_series`], with sample 0 pinned to `anchor_ms` (or the
/// current time, whichever is later).
pub fn probe_series_at<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    target: Ipv4Addr,
    port: u16,
    params: &ProbeParams,
    anchor_ms: u64,
) -> IpidSeries {
    let anchor = anchor_ms.max(tx.now_ms());
    let mut values = Vec::with_capacity(params.n as usize);
    for i in 0..params.n {
        tx.wait_until_ms(anchor + (i * params.interval_s) as u64 * 1000);
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
            values.push(None);
            continue;
        }
        let filter = FlowFilter {
            remote_ip: target,
            remote_port: port,
            local_port: sport,
            flags: Some(TcpFlags::Rst),
        };
        values.push(tx.recv_match(&filter, params.timeout_s as u64 * 1000).map(|r| r.pkt.ipid));
    }
    IpidSeries::from_values(params.interval_s, values)
}

/// Noise rate over adjacent observed pairs: each pair spanning `g`
/// intervals contributes `delta - g` (the probe itself adds one packet per
/// interval); the total is divided by the spanned seconds and floored at
/// zero.
pub fn estimate_noise(series: &IpidSeries) -> Result<NoiseEstimate, ProbeError> {
    let pairs = series.known_pairs();
    if pairs.is_empty() {
        return Err(ProbeError::InsufficientData);
    }
    let mut noise_total: i64 = 0;
    let mut spanned_s: u64 = 0;
    for (g, a, b) in &pairs {
        noise_total += ipid_delta(*a, *b) as i64 - *g as i64;
        spanned_s += (*g * series.interval_s()) as u64;
    }
    let rate_pps = (noise_total.max(0) as f64) / (spanned_s as f64);
    Ok(NoiseEstimate { rate_pps, valid_pairs: pairs.len() as u32 })
}

/// Shared-counter screen over an `ipids0` series. Checks run in order:
/// too many timeouts, monotonicity (wrap-aware, across `None` gaps), then
/// the noise-rate threshold plus a burst bound on gap-bridging pairs.
pub fn classify_shared_ipid(series: &IpidSeries, max_none: u32, max_noise_pps: f64) -> IpidClass {
    if series.none_count() as u32 > max_none {
        return IpidClass::TooManyNone;
    }
    let pairs = series.known_pairs();
    if pairs.is_empty() {
        return IpidClass::TooManyNone;
    }
    for (_, a, b) in &pairs {
        if !is_forward_step(*a, *b) {
            return IpidClass::NotMonotonic;
        }
    }
    // Burst noise hidden behind a None gap: a bridging pair may not jump
    // further than the noise threshold allows, plus slack for stragglers.
    for (g, a, b) in &pairs {
        if *g >= 2 {
            let bound = *g as f64 * (max_noise_pps + 1.0) + 2.0;
            if f64::from(ipid_delta(*a, *b)) > bound {
                return IpidClass::TooNoisy;
            }
        }
    }
    match estimate_noise(series) {
        Ok(e) if e.rate_pps <= max_noise_pps => IpidClass::SharedMonotonic,
        Ok(_) => IpidClass::TooNoisy,
        Err(_) => IpidClass::TooManyNone,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate::RateBudget;
    use crate::simnet::{
        FilterPolicy, InternalHost, IpidPolicy, OutpostConfig, RetransBehavior, Scenario,
    };
    use crate::transport::SimTransport;
    use proptest::prelude::*;

    fn scenario(ipid: IpidPolicy, noise_pps: f64, loss: f64) -> Scenario {
        Scenario {
            scanner_ip: Ipv4Addr::new(198, 51, 100, 9),
            rng_seed: 11,
            link_loss_prob: loss,
            jitter_ms: 0,
            outposts: vec![OutpostConfig {
                public_ip: Ipv4Addr::new(203, 0, 113, 5),
                open_ports: vec![80],
                ipid,
                retrans: RetransBehavior::default(),
                filter: FilterPolicy::NoFiltering,
                hole: false,
                noise_pps,
                rst_to_unsolicited_synack: true,
                drop_inbound_syn: false,
                internal_hosts: vec![InternalHost { ip: Ipv4Addr::new(192, 168, 1, 17), alive: true }],
            }],
        }
    }

    fn target() -> Ipv4Addr {
        Ipv4Addr::new(203, 0, 113, 5)
    }

    #[test]
    fn noiseless_global_counter_series_increments_by_one() {
        let mut tx = SimTransport::new(scenario(IpidPolicy::Global { initial: 700 }, 0.0, 0.0));
        let mut rng = ScanRng::for_target(1, target());
        let params = ProbeParams { n: 4, interval_s: 1, timeout_s: 1 };
        let s = probe_series(&mut tx, &mut rng, target(), 80, &params);
        let values: Vec<_> = (0..4).map(|i| s.value(i).unwrap()).collect();
        assert_eq!(values, vec![701, 702, 703, 704]);
    }

    #[test]
    fn total_loss_yields_all_none() {
        let mut sc = scenario(IpidPolicy::Global { initial: 700 }, 0.0, 0.0);
        sc.link_loss_prob = 0.999_999;
        let mut tx = SimTransport::new(sc);
        let mut rng = ScanRng::for_target(1, target());
        let s = probe_series(&mut tx, &mut rng, target(), 80, &ProbeParams::boundary());
        assert_eq!(s.none_count(), 4);
    }

    #[test]
    fn noisy_host_deltas_average_probe_plus_noise() {
        // 1 self-increment plus ~2 noise packets per second.
        let mut total = 0f64;
        let mut count = 0usize;
        for seed in 0..20u64 {
            let mut sc = scenario(IpidPolicy::Global { initial: 0 }, 2.0, 0.0);
            sc.rng_seed = seed;
            let mut tx = SimTransport::new(sc);
            let mut rng = ScanRng::for_target(seed, target());
            let s = probe_series(&mut tx, &mut rng, target(), 80, &ProbeParams::ipid_check());
            for (g, a, b) in s.known_pairs() {
                total += f64::from(ipid_delta(a, b)) / f64::from(g);
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!((mean - 3.0).abs() < 0.4, "mean adjacent delta {mean}");
    }

    #[test]
    fn probe_cadence_holds_under_budget_reservation() {
        let mut tx = SimTransport::with_budget(
            scenario(IpidPolicy::Global { initial: 0 }, 0.0, 0.0),
            RateBudget::new(0.6, 10),
        );
        let mut rng = ScanRng::for_target(1, target());
        let params = ProbeParams::ipid_check();
        tx.reserve_sends(params.n, params.n as u64 * 1000);
        let t0 = tx.now_ms();
        let s = probe_series(&mut tx, &mut rng, target(), 80, &params);
        assert_eq!(s.none_count(), 0);
        // Ten sends, one per second, no budget stalls mid-series.
        let stim = tx.stimulus_log();
        let times: Vec<u64> = stim.iter().map(|e| e.time_ms - t0).collect();
        assert_eq!(times, (0..10).map(|i| i * 1000).collect::<Vec<_>>());
    }

    #[test]
    fn estimate_examples() {
        // Deltas all exactly 1 at T=1: no interference.
        let s = IpidSeries::from_values(1, (0..10).map(|i| Some(100 + i as u16)).collect());
        let e = estimate_noise(&s).unwrap();
        assert_eq!(e.rate_pps, 0.0);
        assert_eq!(e.valid_pairs, 9);

        // Deltas all 3: average noise increment 2 per interval.
        let s = IpidSeries::from_values(1, (0..10).map(|i| Some(100 + 3 * i as u16)).collect());
        assert_eq!(estimate_noise(&s).unwrap().rate_pps, 2.0);

        // A None gap: one pair spanning 2 s with delta 4 -> noise 2 -> 1 pps.
        let s = IpidSeries::from_values(1, vec![Some(10), None, Some(14)]);
        let e = estimate_noise(&s).unwrap();
        assert_eq!(e.rate_pps, 1.0);
        assert_eq!(e.valid_pairs, 1);

        let empty = IpidSeries::from_values(1, vec![None, Some(3), None]);
        assert_eq!(estimate_noise(&empty), Err(ProbeError::InsufficientData));
    }

    #[test]
    fn classify_ordering_and_buckets() {
        let mono = IpidSeries::from_values(1, (0..10).map(|i| Some(100 + i as u16)).collect());
        assert_eq!(classify_shared_ipid(&mono, 2, 6.0), IpidClass::SharedMonotonic);

        let mut vals: Vec<Option<u16>> = (0..10).map(|i| Some(100 + i as u16)).collect();
        vals[3] = None;
        vals[5] = None;
        vals[7] = None;
        let too_many = IpidSeries::from_values(1, vals);
        assert_eq!(classify_shared_ipid(&too_many, 2, 6.0), IpidClass::TooManyNone);

        let back = IpidSeries::from_values(1, vec![Some(5), Some(9), Some(7), Some(11)]);
        assert_eq!(classify_shared_ipid(&back, 2, 6.0), IpidClass::NotMonotonic);

        let constant = IpidSeries::from_values(1, vec![Some(42); 10]);
        assert_eq!(classify_shared_ipid(&constant, 2, 6.0), IpidClass::NotMonotonic);

        let noisy = IpidSeries::from_values(1, (0..10).map(|i| Some(100 + 9 * i as u16)).collect());
        assert_eq!(classify_shared_ipid(&noisy, 2, 6.0), IpidClass::TooNoisy);

        // Burst hidden behind a None gap: bound is g*(max+1)+2 = 16 at g=2.
        let burst = IpidSeries::from_values(
            1,
            vec![Some(0), Some(1), None, Some(30), Some(31), Some(32), Some(33), Some(34), Some(35), Some(36)],
        );
        assert_eq!(classify_shared_ipid(&burst, 2, 6.0), IpidClass::TooNoisy);
    }

    #[test]
    fn wraparound_series_is_still_monotonic() {
        let s = IpidSeries::from_values(1, vec![Some(65533), Some(65534), Some(65535), Some(0), Some(1)]);
        assert_eq!(classify_shared_ipid(&s, 2, 6.0), IpidClass::SharedMonotonic);
    }

    #[test]
    fn random_policy_rarely_looks_monotonic() {
        let mut not_monotonic = 0;
        for seed in 0..200u64 {
            let mut sc = scenario(IpidPolicy::Random { seed: None }, 0.0, 0.0);
            sc.rng_seed = seed;
            let mut tx = SimTransport::new(sc);
            let mut rng = ScanRng::for_target(seed, target());
            let s = probe_series(&mut tx, &mut rng, target(), 80, &ProbeParams::ipid_check());
            if classify_shared_ipid(&s, 2, 6.0) == IpidClass::NotMonotonic {
                not_monotonic += 1;
            }
        }
        assert!(not_monotonic >= 198, "only {not_monotonic}/200 flagged");
    }

    #[test]
    fn per_flow_host_looks_monotonic_on_a_single_flow() {
        // Cross-flow disambiguation belongs to the spoofability checker.
        let mut tx = SimTransport::new(scenario(IpidPolicy::PerFlow { initial: 250 }, 0.0, 0.0));
        let mut rng = ScanRng::for_target(1, target());
        let s = probe_series(&mut tx, &mut rng, target(), 80, &ProbeParams::ipid_check());
        assert_eq!(classify_shared_ipid(&s, 2, 6.0), IpidClass::SharedMonotonic);
    }

    proptest! {
        #[test]
        fn estimate_invariant_under_uniform_shift(shift: u16, vals in proptest::collection::vec(0u16..200, 2..12)) {
            let base: Vec<Option<u16>> = vals
                .iter()
                .scan(0u16, |acc, v| {
                    *acc = acc.wrapping_add(*v % 50 + 1);
                    Some(Some(*acc))
                })
                .collect();
            let shifted: Vec<Option<u16>> =
                base.iter().map(|v| v.map(|x| x.wrapping_add(shift))).collect();
            let a = estimate_noise(&IpidSeries::from_values(1, base)).unwrap();
            let b = estimate_noise(&IpidSeries::from_values(1, shifted)).unwrap();
            prop_assert_eq!(a.rate_pps, b.rate_pps);
        }
    }
}
