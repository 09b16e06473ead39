//! Pipeline driver: stage sequencing, per-host politeness, result
//! persistence (append-only JSONL with a schema version) and crash-resume.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{sweep_private_range, DetectionParams, PenetrationVerdict};
use crate::model::Cidr;
use crate::outpost::{select_outpost, OutpostVerdict, SelectParams};
use crate::prefilter::{run_prefilter, PrefilterResult};
use crate::rate::RateBudget;
use crate::rng::ScanRng;
use crate::simnet::{ConfigError, Scenario};
use crate::transport::{SimTransport, Transport};
use crate::OutpostOutcome;

/// Bucket depth for the politeness limiter: the N=10 probe series bursts
/// ten packets at one per second, so the bucket must admit it.
pub const BURST_CAPACITY: u32 = 10;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(default = "default_port")]
    pub target_port: u16,
    #[serde(default = "default_rate")]
    pub max_rate_pps_per_host: f64,
    #[serde(default = "default_noise_threshold")]
    pub noise_threshold_pps: f64,
    #[serde(default = "default_private_probe")]
    pub private_probe_addr: Ipv4Addr,
    #[serde(default = "default_public_spoof")]
    pub public_spoof_addr: Ipv4Addr,
    #[serde(default)]
    pub sweep_subnet: Option<Cidr>,
    #[serde(default = "default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_port() -> u16 {
    80
}
fn default_rate() -> f64 {
    0.6
}
fn default_noise_threshold() -> f64 {
    6.0
}
fn default_private_probe() -> Ipv4Addr {
    Ipv4Addr::new(192, 168, 1, 1)
}
fn default_public_spoof() -> Ipv4Addr {
    Ipv4Addr::new(198, 18, 7, 7)
}
fn default_concurrency() -> usize {
    1
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            target_port: default_port(),
            max_rate_pps_per_host: default_rate(),
            noise_threshold_pps: default_noise_threshold(),
            private_probe_addr: default_private_probe(),
            public_spoof_addr: default_public_spoof(),
            sweep_subnet: None,
            concurrency_limit: default_concurrency(),
            rng_seed: 0,
        }
    }
}

impl ScanConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: ScanConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.max_rate_pps_per_host > 0.0) {
            return Err(ConfigError::Invalid("max_rate_pps_per_host must be positive".into()));
        }
        if self.concurrency_limit == 0 {
            return Err(ConfigError::Invalid("concurrency_limit must be at least 1".into()));
        }
        if !crate::model::is_private_addr(self.private_probe_addr) {
            return Err(ConfigError::Invalid(format!(
                "private_probe_addr {} must be RFC 1918",
                self.private_probe_addr
            )));
        }
        if crate::model::is_private_addr(self.public_spoof_addr) {
            return Err(ConfigError::Invalid(format!(
                "public_spoof_addr {} must be public",
                self.public_spoof_addr
            )));
        }
        if let Some(s) = self.sweep_subnet {
            if !crate::model::is_private_addr(s.network()) {
                return Err(ConfigError::Invalid(format!("sweep_subnet {s} must be private")));
            }
            if s.prefix_len() < 20 {
                return Err(ConfigError::Invalid(format!(
                    "sweep_subnet {s} is too large; use /20 or smaller"
                )));
            }
        }
        Ok(())
    }
}

/// One result-file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub schema: u32,
    pub target: Ipv4Addr,
    pub started_ms: u64,
    pub finished_ms: u64,
    pub packets_sent: u64,
    #[serde(flatten)]
    pub verdict: StageVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum StageVerdict {
    Prefilter { result: PrefilterResult },
    Outpost { verdict: OutpostVerdict },
    Detect { address: Ipv4Addr, verdict: PenetrationVerdict },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("transport lacks a required capability: {0}")]
    MissingCapability(String),
    #[error("cannot write results: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub targets: usize,
    pub scanned: usize,
    pub skipped: usize,
    pub qualified: usize,
    pub records: usize,
}

/// Holds the pipeline to the per-record politeness invariant: a stage's
/// span must be long enough that packets / elapsed stays at or under the
/// configured rate.
fn stage_cooldown<T: Transport + ?Sized>(tx: &mut T, started_ms: u64, sent: u64, rate_pps: f64) {
    if sent == 0 {
        return;
    }
    let min_span_ms = (sent as f64 / rate_pps * 1000.0).ceil() as u64;
    tx.wait_until_ms(started_ms + min_span_ms);
}

/// Runs the staged pipeline for one target over any transport. Stages
/// needing source spoofing abort up front when the backend cannot spoof.
pub fn scan_target_with<T: Transport + ?Sized>(
    tx: &mut T,
    rng: &mut ScanRng,
    cfg: &ScanConfig,
    target: Ipv4Addr,
) -> Result<Vec<ScanRecord>, PipelineError> {
    if !tx.caps().can_spoof_source {
        return Err(PipelineError::MissingCapability("can_spoof_source".into()));
    }
    if !tx.caps().accepts_unsolicited_synack {
        return Err(PipelineError::MissingCapability("accepts_unsolicited_synack".into()));
    }
    let rate = cfg.max_rate_pps_per_host;
    let mut records = Vec::new();

    let started = tx.now_ms();
    let sent_before = tx.sent_count();
    let pre = run_prefilter(tx, rng, target, cfg.target_port);
    stage_cooldown(tx, started, tx.sent_count() - sent_before, rate);
    records.push(ScanRecord {
        schema: SCHEMA_VERSION,
        target,
        started_ms: started,
        finished_ms: tx.now_ms(),
        packets_sent: tx.sent_count() - sent_before,
        verdict: StageVerdict::Prefilter { result: pre },
    });
    if !pre.passed {
        return Ok(records);
    }

    let started = tx.now_ms();
    let sent_before = tx.sent_count();
    let select_params = SelectParams {
        port: cfg.target_port,
        public_spoof_src: cfg.public_spoof_addr,
        private_spoof_src: cfg.private_probe_addr,
        noise_threshold_pps: cfg.noise_threshold_pps,
        ..SelectParams::default()
    };
    let verdict = select_outpost(tx, rng, target, &select_params);
    let outcome = verdict.outcome;
    let qualification_noise = verdict.evidence.noise.map(|n| n.rate_pps).unwrap_or(0.0);
    stage_cooldown(tx, started, tx.sent_count() - sent_before, rate);
    records.push(ScanRecord {
        schema: SCHEMA_VERSION,
        target,
        started_ms: started,
        finished_ms: tx.now_ms(),
        packets_sent: tx.sent_count() - sent_before,
        verdict: StageVerdict::Outpost { verdict },
    });
    if outcome != OutpostOutcome::QualifiedOutpost {
        return Ok(records);
    }

    if let Some(subnet) = cfg.sweep_subnet {
        let params = DetectionParams {
            noise_threshold_pps: cfg.noise_threshold_pps,
            noise_floor_pps: qualification_noise,
            ..DetectionParams::default()
        };
        let started = tx.now_ms();
        let sent_before = tx.sent_count();
        let (_schedule, verdicts) =
            sweep_private_range(tx, rng, target, cfg.target_port, subnet, &params);
        stage_cooldown(tx, started, tx.sent_count() - sent_before, rate);
        let finished = tx.now_ms();
        let per_addr_sent = (tx.sent_count() - sent_before) / verdicts.len().max(1) as u64;
        for v in verdicts {
            records.push(ScanRecord {
                schema: SCHEMA_VERSION,
                target,
                started_ms: started,
                finished_ms: finished,
                packets_sent: per_addr_sent,
                verdict: StageVerdict::Detect { address: v.probed_private_ip, verdict: v },
            });
        }
    }
    Ok(records)
}

/// Per-target scan in a fresh simulator world derived from the scenario,
/// budgeted and seeded per (config seed, target). Also returns the
/// world's event log for dumps and audits.
pub fn scan_target(
    scenario: &Scenario,
    cfg: &ScanConfig,
    target: Ipv4Addr,
) -> Result<(Vec<ScanRecord>, Vec<crate::simnet::LogEntry>), PipelineError> {
    let budget = RateBudget::new(cfg.max_rate_pps_per_host, BURST_CAPACITY);
    let mut tx = SimTransport::with_budget(scenario.clone(), budget);
    let mut rng = ScanRng::for_target(cfg.rng_seed, target);
    let records = scan_target_with(&mut tx, &mut rng, cfg, target)?;
    Ok((records, tx.net().log().to_vec()))
}

/// Full pipeline over every outpost in the scenario. Targets already in
/// `completed` are skipped (crash-resume); records stream to `out` in
/// scenario order, so identical (scenario, config, seed) inputs produce
/// byte-identical files. When `events_out` is given, every per-target
/// event log is dumped there (also in scenario order), usable as a replay
/// trace.
pub fn run_pipeline<W: Write>(
    scenario: &Scenario,
    cfg: &ScanConfig,
    completed: &HashSet<Ipv4Addr>,
    out: &mut W,
    mut events_out: Option<&mut dyn Write>,
) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    scenario.validate()?;
    let targets: Vec<Ipv4Addr> = scenario
        .outposts
        .iter()
        .map(|o| o.public_ip)
        .filter(|ip| !completed.contains(ip))
        .collect();

    type TargetOutput = Result<(Vec<ScanRecord>, Vec<crate::simnet::LogEntry>), PipelineError>;
    let results: Vec<TargetOutput> = if cfg.concurrency_limit > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.concurrency_limit)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            targets.par_iter().map(|&t| scan_target(scenario, cfg, t)).collect()
        })
    } else {
        targets.iter().map(|&t| scan_target(scenario, cfg, t)).collect()
    };

    let mut summary = RunSummary {
        targets: scenario.outposts.len(),
        skipped: completed.len(),
        ..RunSummary::default()
    };
    for result in results {
        let (records, events) = result?;
        summary.scanned += 1;
        for r in &records {
            if let StageVerdict::Outpost { verdict } = &r.verdict {
                if verdict.outcome == OutpostOutcome::QualifiedOutpost {
                    summary.qualified += 1;
                }
            }
            serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            summary.records += 1;
        }
        if let Some(w) = events_out.as_deref_mut() {
            crate::simnet::dump_jsonl(&events, w)?;
        }
    }
    out.flush()?;
    Ok(summary)
}

/// Loads a (possibly partial) result file.
pub fn load_records<R: BufRead>(r: R) -> std::io::Result<Vec<ScanRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScanRecord = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("result line {}: {e}", lineno + 1),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Targets whose work is already finished in `records`, given the sweep
/// configuration: failed prefilter, non-qualified outpost, or qualified
/// with every sweep address recorded.
pub fn completed_targets(records: &[ScanRecord], cfg: &ScanConfig) -> HashSet<Ipv4Addr> {
    let expected_sweep = cfg.sweep_subnet.map(|s| s.hosts().count()).unwrap_or(0);
    let mut done = HashSet::new();
    for r in records {
        match &r.verdict {
            StageVerdict::Prefilter { result } if !result.passed => {
                done.insert(r.target);
            }
            StageVerdict::Outpost { verdict } => {
                if verdict.outcome != OutpostOutcome::QualifiedOutpost || expected_sweep == 0 {
                    done.insert(r.target);
                }
            }
            _ => {}
        }
    }
    if expected_sweep > 0 {
        let mut detect_counts: std::collections::HashMap<Ipv4Addr, usize> =
            std::collections::HashMap::new();
        for r in records {
            if matches!(r.verdict, StageVerdict::Detect { .. }) {
                *detect_counts.entry(r.target).or_default() += 1;
            }
        }
        for (target, count) in detect_counts {
            if count >= expected_sweep {
                done.insert(target);
            }
        }
    }
    done
}
