//! Outpost selection: the shared-counter check, the spoofability check
//! (spoofed public source) and the local check (spoofed private source,
//! confirmed by repetition).
//!
//! Spoof bursts use duplicated SYNs (same four-tuple, fresh sequence
//! numbers) so the target stacks retransmission state for the first packet
//! only; each burst is closed with one spoofed RST so the leftover
//! half-open flow stops retransmitting into the following measurements.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ipid_delta, IpidSeries, OutpostOutcome, Packet, TcpFlags};
use crate::probe::{
    classify_shared_ipid, estimate_noise, probe_series_at, IpidClass, NoiseEstimate, ProbeParams,
};
use crate::rng::ScanRng;
use crate::transport::Transport;

/// Spoofed packets needed to dominate the observed interference: at least
/// two, and twice the per-second noise estimate rounded up.
pub fn choose_m(noise: &NoiseEstimate) -> u32 {
    (2.0 * noise.rate_pps.ceil()).max(2.0) as u32
}

/// Burst size the verdict bands can actually separate: [`choose_m`]
/// raised so the received band's floor (M+1) clears the filtered band's
/// ceiling (1 + slack + expected noise) — at sub-1pps noise the bare 2x
/// rule leaves them touching — then capped for politeness.
pub fn dominating_burst_size(noise: &NoiseEstimate, slack: u32, cap: u32) -> u32 {
    let expected = noise.rate_pps.ceil() as u32;
    choose_m(noise).max(slack + expected + 1).max(2).min(cap.max(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpoofOutcome {
    SpoofReceived,
    SpoofFiltered,
    Inconclusive,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpoofError {
    #[error("boundary samples missing on both sides of the burst")]
    MissingSamples,
}

/// One measured spoof boundary: the increment between the last observed
/// pre-burst sample and the first observed post-burst sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReading {
    pub spoofed_src: Ipv4Addr,
    pub m: u32,
    pub pre_value: u16,
    pub post_value: u16,
    pub increment: u32,
    pub spanned_ms: u64,
    pub expected_noise: u32,
    pub outcome: SpoofOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpoofCheckParams {
    pub m: u32,
    pub series: ProbeParams,
    pub slack: u32,
}

/// Knobs for the full selection funnel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectParams {
    pub port: u16,
    pub public_spoof_src: Ipv4Addr,
    pub private_spoof_src: Ipv4Addr,
    pub ipid_probe: ProbeParams,
    pub boundary_series: ProbeParams,
    pub max_none: u32,
    pub noise_threshold_pps: f64,
    pub slack: u32,
    /// Politeness ceiling on M: the whole three-round funnel (23 + 3M
    /// packets) must stay inside the per-target sliding-window budget, so
    /// noisier hosts get the capped burst rather than a louder scan.
    pub m_cap: u32,
    /// Overrides the noise-derived M when set (cap still applies).
    pub fixed_m: Option<u32>,
}

impl Default for SelectParams {
    fn default() -> Self {
        SelectParams {
            port: 80,
            public_spoof_src: Ipv4Addr::new(198, 18, 7, 7),
            private_spoof_src: Ipv4Addr::new(192, 168, 1, 1),
            ipid_probe: ProbeParams::ipid_check(),
            boundary_series: ProbeParams::boundary(),
            max_none: 2,
            noise_threshold_pps: 6.0,
            slack: 1,
            m_cap: 7,
            fixed_m: None,
        }
    }
}

/// Selection verdict with the measurements that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutpostVerdict {
    pub outcome: OutpostOutcome,
    pub evidence: OutpostEvidence,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutpostEvidence {
    pub ipid_series: Option<IpidSeries>,
    pub ipid_class: Option<IpidClass>,
    pub noise: Option<NoiseEstimate>,
    pub m: Option<u32>,
    pub boundaries: Vec<BoundaryReading>,
}

fn classify_increment(increment: u32, m: u32, slack: u32, expected_noise: u32) -> SpoofOutcome {
    let in_received = increment >= m + 1 && increment <= m + 1 + slack + expected_noise;
    let in_filtered = increment >= 1 && increment <= 1 + slack + expected_noise;
    match (in_received, in_filtered) {
        (true, false) => SpoofOutcome::SpoofReceived,
        (false, true) => SpoofOutcome::SpoofFiltered,
        _ => SpoofOutcome::Inconclusive,
    }
}

/// Sends the M-duplicated-SYN burst right after `prior`'s last sample,
/// closes it with a spoofed RST, collects the post series on the next
/// one-second grid slot, and reads the boundary increment.
///
/// Returns the reading, the post series and the post series' anchor so
/// rounds can chain (the post series doubles as the next round's prior).
#[allow(clippy::too_many_arguments)]
fn boundary_round<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    target: Ipv4Addr,
    port: u16,
    spoofed_src: Ipv4Addr,
    m: u32,
    slack: u32,
    noise_rate: f64,
    prior: &IpidSeries,
    prior_anchor_ms: u64,
    series: &ProbeParams,
) -> Result<(BoundaryReading, IpidSeries, u64), SpoofError> {
    let pre = prior.last_known().ok_or(SpoofError::MissingSamples)?;
    let pre_time_ms = prior_anchor_ms + pre.offset_s as u64 * 1000;

    // The burst sits in the 300 ms right after the prior series resolved:
    // the tighter the boundary window, the less interference it admits.
    let burst_start = tx.now_ms() + 50;
    let step = (300 / m as u64).max(1);
    let sport = rng.local_port();
    for i in 0..m {
        tx.wait_until_ms(burst_start + i as u64 * step);
        let syn = Packet::new(spoofed_src, target, sport, port, TcpFlags::Syn, rng.seq(), 0, rng.ipid());
        let _ = tx.send(syn);
    }
    // Spoofed teardown: ends the single retransmitting flow the duplicated
    // SYNs created, keeping later series clean of its retransmissions. It
    // must land before the flow's first retransmission fires.
    tx.wait_until_ms(burst_start + 350);
    let rst = Packet::new(spoofed_src, target, sport, port, TcpFlags::Rst, rng.seq(), 0, rng.ipid());
    let _ = tx.send(rst);

    let post_anchor = tx.now_ms() + 200;
    let post = probe_series_at(tx, rng, target, port, series, post_anchor);

    let post_first = post.first_known().ok_or(SpoofError::MissingSamples)?;
    let post_time_ms = post_anchor + post_first.offset_s as u64 * 1000;
    let spanned_ms = post_time_ms - pre_time_ms;
    let expected_noise = (noise_rate * spanned_ms as f64 / 1000.0).ceil() as u32;
    let pre_value = pre.value.expect("last_known returned a value");
    let post_value = post_first.value.expect("first_known returned a value");
    let increment = ipid_delta(pre_value, post_value) as u32;
    let outcome = classify_increment(increment, m, slack, expected_noise);
    Ok((
        BoundaryReading {
            spoofed_src,
            m,
            pre_value,
            post_value,
            increment,
            spanned_ms,
            expected_noise,
            outcome,
        },
        post,
        post_anchor,
    ))
}

/// Standalone spoofability check: collects its own pre-series, runs one
/// burst with a spoofed public source, and classifies the boundary.
#[allow(clippy::too_many_arguments)]
pub fn spoof_check<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    target: Ipv4Addr,
    port: u16,
    spoofed_src: Ipv4Addr,
    params: &SpoofCheckParams,
    noise_rate: f64,
) -> Result<(SpoofOutcome, BoundaryReading), SpoofError> {
    let n = params.series.n;
    tx.reserve_sends(n + params.m + 1 + n, (2 * n) as u64 * 1000 + 700);
    let anchor = tx.now_ms();
    let pre = probe_series_at(tx, rng, target, port, &params.series, anchor);
    let (reading, _, _) = boundary_round(
        tx,
        rng,
        target,
        port,
        spoofed_src,
        params.m,
        params.slack,
        noise_rate,
        &pre,
        anchor,
        &params.series,
    )?;
    Ok((reading.outcome, reading))
}

/// Local check with confirmation: same mechanics as the spoofability
/// check but with a private spoofed source, chaining off the previous
/// round's post series; a SpoofReceived result must repeat to stand.
#[allow(clippy::too_many_arguments)]
pub fn local_check<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    target: Ipv4Addr,
    port: u16,
    private_src: Ipv4Addr,
    m: u32,
    slack: u32,
    noise_rate: f64,
    prior: &IpidSeries,
    prior_anchor_ms: u64,
    series: &ProbeParams,
) -> Result<(SpoofOutcome, Vec<BoundaryReading>), SpoofError> {
    tx.reserve_sends(m + 1 + series.n, series.n as u64 * 1000 + 700);
    let (first, post, post_anchor) = boundary_round(
        tx, rng, target, port, private_src, m, slack, noise_rate, prior, prior_anchor_ms, series,
    )?;
    if first.outcome != SpoofOutcome::SpoofReceived {
        return Ok((first.outcome, vec![first]));
    }
    tx.reserve_sends(m + 1 + series.n, series.n as u64 * 1000 + 700);
    let (second, _, _) = boundary_round(
        tx, rng, target, port, private_src, m, slack, noise_rate, &post, post_anchor, series,
    )?;
    let combined = match second.outcome {
        SpoofOutcome::SpoofReceived => SpoofOutcome::SpoofReceived,
        // The confirmation did not repeat; treat the pair as unreadable
        // rather than trusting either run.
        _ => SpoofOutcome::Inconclusive,
    };
    Ok((combined, vec![first, second]))
}

/// Runs the full selection funnel: shared-IPID check, spoofability check,
/// local check with confirmation. The first failing stage names the
/// verdict; boundary reads that cannot be trusted land in TooNoisy, and
/// series without usable boundary samples land in NoRstResponse.
pub fn select_outpost<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    target: Ipv4Addr,
    params: &SelectParams,
) -> OutpostVerdict {
    let mut evidence = OutpostEvidence::default();

    tx.reserve_sends(params.ipid_probe.n, params.ipid_probe.n as u64 * 1000);
    let anchor0 = tx.now_ms();
    let ipids0 = probe_series_at(tx, rng, target, params.port, &params.ipid_probe, anchor0);
    let class = classify_shared_ipid(&ipids0, params.max_none, params.noise_threshold_pps);
    evidence.ipid_class = Some(class);
    evidence.ipid_series = Some(ipids0.clone());
    match class {
        IpidClass::SharedMonotonic => {}
        IpidClass::TooManyNone => {
            return OutpostVerdict { outcome: OutpostOutcome::NoRstResponse, evidence }
        }
        IpidClass::NotMonotonic => {
            return OutpostVerdict { outcome: OutpostOutcome::NotSharedIpid, evidence }
        }
        IpidClass::TooNoisy => {
            return OutpostVerdict { outcome: OutpostOutcome::TooNoisy, evidence }
        }
    }
    let noise = estimate_noise(&ipids0).expect("monotonic series has pairs");
    evidence.noise = Some(noise);
    let m = params
        .fixed_m
        .unwrap_or_else(|| dominating_burst_size(&noise, params.slack, params.m_cap));
    evidence.m = Some(m);
    let series = params.boundary_series;

    // The three spoof rounds chain their series (each round's post series
    // is the next round's prior), so the whole funnel is admitted on the
    // politeness budget as one block: a budget stall between rounds would
    // stretch a boundary window and drown it in interference.
    let funnel_sends = 3 * series.n + 3 * (m + 1) + series.n;
    let funnel_span_ms = (4 * series.n) as u64 * 1000 + 2000;
    tx.reserve_sends(funnel_sends, funnel_span_ms);

    // Spoofability: public spoofed source.
    let anchor1 = tx.now_ms();
    let ipids1 = probe_series_at(tx, rng, target, params.port, &series, anchor1);
    let round1 = boundary_round(
        tx,
        rng,
        target,
        params.port,
        params.public_spoof_src,
        m,
        params.slack,
        noise.rate_pps,
        &ipids1,
        anchor1,
        &series,
    );
    let (r1, ipids2, anchor2) = match round1 {
        Ok(v) => v,
        Err(SpoofError::MissingSamples) => {
            return OutpostVerdict { outcome: OutpostOutcome::NoRstResponse, evidence }
        }
    };
    evidence.boundaries.push(r1);
    match r1.outcome {
        SpoofOutcome::SpoofReceived => {}
        SpoofOutcome::SpoofFiltered => {
            return OutpostVerdict { outcome: OutpostOutcome::SpoofedPublicFiltered, evidence }
        }
        SpoofOutcome::Inconclusive => {
            return OutpostVerdict { outcome: OutpostOutcome::TooNoisy, evidence }
        }
    }

    // Local check: private spoofed source, confirmed by repetition.
    let local = local_check(
        tx,
        rng,
        target,
        params.port,
        params.private_spoof_src,
        m,
        params.slack,
        noise.rate_pps,
        &ipids2,
        anchor2,
        &series,
    );
    match local {
        Ok((outcome, readings)) => {
            evidence.boundaries.extend(readings);
            let outcome = match outcome {
                SpoofOutcome::SpoofReceived => OutpostOutcome::QualifiedOutpost,
                SpoofOutcome::SpoofFiltered => OutpostOutcome::SpoofedPrivateFiltered,
                SpoofOutcome::Inconclusive => OutpostOutcome::TooNoisy,
            };
            OutpostVerdict { outcome, evidence }
        }
        Err(SpoofError::MissingSamples) => {
            OutpostVerdict { outcome: OutpostOutcome::NoRstResponse, evidence }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TcpFlags;
    use crate::simnet::{
        EventKind, FilterPolicy, InternalHost, IpidPolicy, OutpostConfig, RetransBehavior, Scenario,
    };
    use crate::transport::SimTransport;

    fn scenario(filter: FilterPolicy, ipid: IpidPolicy, noise_pps: f64, seed: u64) -> Scenario {
        Scenario {
            scanner_ip: Ipv4Addr::new(198, 51, 100, 9),
            rng_seed: seed,
            link_loss_prob: 0.0,
            jitter_ms: 0,
            outposts: vec![OutpostConfig {
                public_ip: Ipv4Addr::new(203, 0, 113, 5),
                open_ports: vec![80],
                ipid,
                retrans: RetransBehavior { first_interval_s: 1, count: 4, doubling: true },
                filter,
                hole: false,
                noise_pps,
                rst_to_unsolicited_synack: true,
                drop_inbound_syn: false,
                internal_hosts: vec![InternalHost { ip: Ipv4Addr::new(192, 168, 1, 1), alive: true }],
            }],
        }
    }

    fn target() -> Ipv4Addr {
        Ipv4Addr::new(203, 0, 113, 5)
    }

    #[test]
    fn choose_m_examples() {
        assert_eq!(choose_m(&NoiseEstimate { rate_pps: 0.0, valid_pairs: 9 }), 2);
        assert_eq!(choose_m(&NoiseEstimate { rate_pps: 2.0, valid_pairs: 9 }), 4);
        assert_eq!(choose_m(&NoiseEstimate { rate_pps: 3.5, valid_pairs: 9 }), 8);
    }

    #[test]
    fn increment_bands() {
        // m=2, noiseless: 3 is the spoof-received signature, 1 the filtered one.
        assert_eq!(classify_increment(3, 2, 1, 0), SpoofOutcome::SpoofReceived);
        assert_eq!(classify_increment(1, 2, 1, 0), SpoofOutcome::SpoofFiltered);
        assert_eq!(classify_increment(9, 2, 1, 0), SpoofOutcome::Inconclusive);
        // Overlapping bands are refused rather than guessed: m=2 with noise
        // budget 2 makes 3 sit in both bands.
        assert_eq!(classify_increment(3, 2, 1, 2), SpoofOutcome::Inconclusive);
    }

    #[test]
    fn zero_noise_verdicts_follow_filter_policy_exactly() {
        let cases = [
            (FilterPolicy::BlockAllSpoofed, OutpostOutcome::SpoofedPublicFiltered),
            (FilterPolicy::BlockPrivateSourceOnly, OutpostOutcome::SpoofedPrivateFiltered),
            (FilterPolicy::NoFiltering, OutpostOutcome::QualifiedOutpost),
        ];
        for (policy, expected) in cases {
            let mut tx =
                SimTransport::new(scenario(policy, IpidPolicy::Global { initial: 77 }, 0.0, 5));
            let mut rng = ScanRng::for_target(5, target());
            let params = SelectParams { fixed_m: Some(5), ..SelectParams::default() };
            let v = select_outpost(&mut tx, &mut rng, target(), &params);
            assert_eq!(v.outcome, expected, "{policy:?}");
        }
    }

    #[test]
    fn boundary_increment_is_m_plus_one_when_unfiltered() {
        let mut tx = SimTransport::new(scenario(
            FilterPolicy::NoFiltering,
            IpidPolicy::Global { initial: 42 },
            0.0,
            5,
        ));
        let mut rng = ScanRng::for_target(5, target());
        let params = SpoofCheckParams { m: 2, series: ProbeParams::boundary(), slack: 1 };
        let (outcome, reading) =
            spoof_check(&mut tx, &mut rng, target(), 80, Ipv4Addr::new(198, 18, 7, 7), &params, 0.0)
                .unwrap();
        assert_eq!(outcome, SpoofOutcome::SpoofReceived);
        assert_eq!(reading.increment, 3);
        assert!(reading.spanned_ms <= 1000, "boundary span {} ms", reading.spanned_ms);
    }

    #[test]
    fn blocked_burst_leaves_only_the_probes_own_increment() {
        let mut tx = SimTransport::new(scenario(
            FilterPolicy::BlockAllSpoofed,
            IpidPolicy::Global { initial: 42 },
            0.0,
            5,
        ));
        let mut rng = ScanRng::for_target(5, target());
        let params = SpoofCheckParams { m: 5, series: ProbeParams::boundary(), slack: 1 };
        let (outcome, reading) =
            spoof_check(&mut tx, &mut rng, target(), 80, Ipv4Addr::new(198, 18, 7, 7), &params, 0.0)
                .unwrap();
        assert_eq!(outcome, SpoofOutcome::SpoofFiltered);
        assert_eq!(reading.increment, 1);
    }

    #[test]
    fn per_flow_counter_host_fails_the_spoof_stage() {
        let mut tx = SimTransport::new(scenario(
            FilterPolicy::NoFiltering,
            IpidPolicy::PerFlow { initial: 9 },
            0.0,
            5,
        ));
        let mut rng = ScanRng::for_target(5, target());
        let v = select_outpost(&mut tx, &mut rng, target(), &SelectParams::default());
        // Spoofed packets advance a different per-flow counter; the probe
        // flow reads increment 1, indistinguishable from filtering.
        assert_eq!(v.outcome, OutpostOutcome::SpoofedPublicFiltered);
    }

    #[test]
    fn selection_packet_budget_holds() {
        let mut tx = SimTransport::new(scenario(
            FilterPolicy::NoFiltering,
            IpidPolicy::Global { initial: 1 },
            0.0,
            5,
        ));
        let mut rng = ScanRng::for_target(5, target());
        let m = 5u32;
        let params = SelectParams { fixed_m: Some(m), ..SelectParams::default() };
        let v = select_outpost(&mut tx, &mut rng, target(), &params);
        assert_eq!(v.outcome, OutpostOutcome::QualifiedOutpost);
        let stim = tx.stimulus_log();
        let probe_or_spoof =
            stim.iter().filter(|e| e.flags == TcpFlags::SynAck || e.flags == TcpFlags::Syn).count();
        let teardowns = stim.iter().filter(|e| e.flags == TcpFlags::Rst).count();
        let budget = 10 + (4 + 4 + m) + (4 + m) + (4 + m);
        assert!(probe_or_spoof as u32 <= budget, "{probe_or_spoof} > {budget}");
        assert!(teardowns <= 3, "{teardowns} teardown RSTs");
    }

    #[test]
    fn spoof_received_is_sound_against_ground_truth() {
        // Whenever the checker reports SpoofReceived, the simulator log
        // must show a spoofed packet accepted inbound at the target.
        for seed in 0..30u64 {
            let mut tx = SimTransport::new(scenario(
                FilterPolicy::NoFiltering,
                IpidPolicy::Global { initial: 7 },
                1.5,
                seed,
            ));
            let mut rng = ScanRng::for_target(seed, target());
            let v = select_outpost(&mut tx, &mut rng, target(), &SelectParams::default());
            let any_received = v
                .evidence
                .boundaries
                .iter()
                .any(|b| b.outcome == SpoofOutcome::SpoofReceived);
            if any_received {
                let accepted_spoof = tx.net().log().iter().any(|e| {
                    e.from_scanner
                        && e.src != tx.scanner_ip()
                        && e.dst == target()
                        && e.kind == EventKind::Deliver
                });
                assert!(accepted_spoof, "seed {seed}: SpoofReceived without accepted spoof");
            }
        }
    }

    #[test]
    fn noisy_verdicts_match_ground_truth_when_decided() {
        // Noise 2 pps, M = 4: decided verdicts must track FilterPolicy.
        let mut decided = 0;
        let mut correct = 0;
        for seed in 0..100u64 {
            let policy = match seed % 3 {
                0 => FilterPolicy::BlockAllSpoofed,
                1 => FilterPolicy::BlockPrivateSourceOnly,
                _ => FilterPolicy::NoFiltering,
            };
            let mut tx =
                SimTransport::new(scenario(policy, IpidPolicy::Global { initial: 7 }, 2.0, seed));
            let mut rng = ScanRng::for_target(seed, target());
            let params = SelectParams { fixed_m: Some(4), ..SelectParams::default() };
            let v = select_outpost(&mut tx, &mut rng, target(), &params);
            let expected = match policy {
                FilterPolicy::BlockAllSpoofed => OutpostOutcome::SpoofedPublicFiltered,
                FilterPolicy::BlockPrivateSourceOnly => OutpostOutcome::SpoofedPrivateFiltered,
                FilterPolicy::NoFiltering => OutpostOutcome::QualifiedOutpost,
            };
            match v.outcome {
                OutpostOutcome::TooNoisy | OutpostOutcome::NoRstResponse => {}
                got => {
                    decided += 1;
                    if got == expected {
                        correct += 1;
                    }
                }
            }
        }
        assert!(decided >= 60, "only {decided}/100 decided");
        let accuracy = correct as f64 / decided as f64;
        assert!(accuracy >= 0.95, "accuracy {accuracy:.3} ({correct}/{decided})");
    }

    #[test]
    fn constant_ipid_host_is_not_shared() {
        let mut tx = SimTransport::new(scenario(
            FilterPolicy::NoFiltering,
            IpidPolicy::Constant { value: 9 },
            0.0,
            5,
        ));
        let mut rng = ScanRng::for_target(5, target());
        let v = select_outpost(&mut tx, &mut rng, target(), &SelectParams::default());
        assert_eq!(v.outcome, OutpostOutcome::NotSharedIpid);
    }

    #[test]
    fn qualified_requires_every_boundary_received() {
        let mut tx = SimTransport::new(scenario(
            FilterPolicy::NoFiltering,
            IpidPolicy::Global { initial: 90 },
            0.0,
            5,
        ));
        let mut rng = ScanRng::for_target(5, target());
        let v = select_outpost(&mut tx, &mut rng, target(), &SelectParams::default());
        assert_eq!(v.outcome, OutpostOutcome::QualifiedOutpost);
        assert_eq!(v.evidence.boundaries.len(), 3);
        assert!(v
            .evidence
            .boundaries
            .iter()
            .all(|b| b.outcome == SpoofOutcome::SpoofReceived));
    }
}
