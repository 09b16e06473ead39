//! Subnet-level aggregation of scan results: qualified outposts clustered
//! by /24, /20 and /16 prefixes, plus cross-run intersections.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use serde::Serialize;

use crate::model::{Cidr, PenetrationOutcome};
use crate::pipeline::{ScanRecord, StageVerdict};
use crate::OutpostOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClusterCounts {
    pub ips: usize,
    pub subnets_24: usize,
    pub subnets_20: usize,
    pub subnets_16: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DetectCounts {
    pub hole_present: usize,
    pub hole_absent: usize,
    pub inconclusive: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub label: String,
    pub outposts: ClusterCounts,
    pub detect: DetectCounts,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterReport {
    pub runs: Vec<RunReport>,
    /// Present when two runs are compared: per-level intersection counts.
    pub intersection: Option<ClusterCounts>,
}

pub fn qualified_ips(records: &[ScanRecord]) -> BTreeSet<Ipv4Addr> {
    records
        .iter()
        .filter_map(|r| match &r.verdict {
            StageVerdict::Outpost { verdict }
                if verdict.outcome == OutpostOutcome::QualifiedOutpost =>
            {
                Some(r.target)
            }
            _ => None,
        })
        .collect()
}

pub fn detect_counts(records: &[ScanRecord]) -> DetectCounts {
    let mut counts = DetectCounts::default();
    for r in records {
        if let StageVerdict::Detect { verdict, .. } = &r.verdict {
            match verdict.outcome {
                PenetrationOutcome::HolePresent => counts.hole_present += 1,
                PenetrationOutcome::HoleAbsent => counts.hole_absent += 1,
                PenetrationOutcome::Inconclusive => counts.inconclusive += 1,
            }
        }
    }
    counts
}

fn prefixes(ips: &BTreeSet<Ipv4Addr>, len: u8) -> BTreeSet<Ipv4Addr> {
    ips.iter().map(|&ip| Cidr::truncate(ip, len)).collect()
}

pub fn cluster_counts(ips: &BTreeSet<Ipv4Addr>) -> ClusterCounts {
    ClusterCounts {
        ips: ips.len(),
        subnets_24: prefixes(ips, 24).len(),
        subnets_20: prefixes(ips, 20).len(),
        subnets_16: prefixes(ips, 16).len(),
    }
}

/// Per-level intersection between two runs, Table-style: how many IPs,
/// /24s, /20s and /16s appear in both.
pub fn intersection_counts(a: &BTreeSet<Ipv4Addr>, b: &BTreeSet<Ipv4Addr>) -> ClusterCounts {
    let level = |len: u8| prefixes(a, len).intersection(&prefixes(b, len)).count();
    ClusterCounts {
        ips: a.intersection(b).count(),
        subnets_24: level(24),
        subnets_20: level(20),
        subnets_16: level(16),
    }
}

pub fn build_report(runs: &[(String, Vec<ScanRecord>)]) -> ClusterReport {
    let sets: Vec<BTreeSet<Ipv4Addr>> = runs.iter().map(|(_, r)| qualified_ips(r)).collect();
    let run_reports = runs
        .iter()
        .zip(&sets)
        .map(|((label, records), ips)| RunReport {
            label: label.clone(),
            outposts: cluster_counts(ips),
            detect: detect_counts(records),
        })
        .collect();
    let intersection = match sets.as_slice() {
        [a, b] => Some(intersection_counts(a, b)),
        _ => None,
    };
    ClusterReport { runs: run_reports, intersection }
}

pub fn render_text(report: &ClusterReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>8} {:>12} {:>12} {:>12}",
        "run", "IPs", "/24 subnets", "/20 subnets", "/16 subnets"
    );
    for run in &report.runs {
        let c = run.outposts;
        let _ = writeln!(
            out,
            "{:<28} {:>8} {:>12} {:>12} {:>12}",
            run.label, c.ips, c.subnets_24, c.subnets_20, c.subnets_16
        );
    }
    if let Some(i) = report.intersection {
        let _ = writeln!(
            out,
            "{:<28} {:>8} {:>12} {:>12} {:>12}",
            "both", i.ips, i.subnets_24, i.subnets_20, i.subnets_16
        );
    }
    for run in &report.runs {
        let d = run.detect;
        if d.hole_present + d.hole_absent + d.inconclusive > 0 {
            let _ = writeln!(
                out,
                "{}: penetration verdicts: {} present, {} absent, {} inconclusive",
                run.label, d.hole_present, d.hole_absent, d.inconclusive
            );
        }
    }
    out
}
