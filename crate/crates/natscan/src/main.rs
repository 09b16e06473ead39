use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use natscan::detect::{sweep_private_range, DetectionParams};
use natscan::model::Cidr;
use natscan::outpost::{select_outpost, SelectParams};
use natscan::pipeline::{
    self, completed_targets, load_records, run_pipeline, ScanConfig,
};
use natscan::probe::{classify_shared_ipid, estimate_noise, probe_series, ProbeParams};
use natscan::rate::RateBudget;
use natscan::report;
use natscan::rng::ScanRng;
use natscan::simnet::{load_jsonl, Scenario};
use natscan::transport::{SimTransport, TraceTransport, Transport};
use natscan::OutpostOutcome;

#[derive(Parser)]
#[command(
    name = "natscan",
    version,
    about = "NAT-penetration testing over the shared-IPID side channel, against simulated or recorded topologies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline against a simulated topology.
    SimScan {
        /// Scenario file (TOML ground truth).
        scenario: PathBuf,
        /// Scan configuration file (TOML).
        config: PathBuf,
        /// Result file (JSONL, one record per line).
        out: PathBuf,
        /// Override the configured RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the target port.
        #[arg(long)]
        port: Option<u16>,
        /// Override the per-host rate cap (packets per second).
        #[arg(long)]
        rate: Option<f64>,
        /// Override the IPID noise threshold (packets per second).
        #[arg(long)]
        noise_threshold: Option<f64>,
        /// Override the number of concurrent target pipelines.
        #[arg(long)]
        concurrency: Option<usize>,
        /// Skip targets already completed in an existing result file.
        #[arg(long)]
        resume: bool,
        /// Also dump the simulator event log (JSONL), replayable later.
        #[arg(long)]
        dump_events: Option<PathBuf>,
    },
    /// Collect and classify one target's IPID series.
    Probe {
        scenario: PathBuf,
        target: Ipv4Addr,
        /// Number of probes.
        #[arg(short, long, default_value_t = 10)]
        n: u32,
        /// Seconds between probes.
        #[arg(short, long, default_value_t = 1)]
        t: u32,
        #[arg(long, default_value_t = 80)]
        port: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Qualify one outpost, then sweep a private subnet behind it.
    Detect {
        scenario: PathBuf,
        outpost: Ipv4Addr,
        subnet: Cidr,
        #[arg(long, default_value_t = 80)]
        port: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6.0)]
        noise_threshold: f64,
    },
    /// Cluster qualified outposts by /24, /20 and /16 subnets.
    Report {
        results: PathBuf,
        /// Second result file: adds per-level intersection counts.
        second: Option<PathBuf>,
        /// Also write a machine-readable summary.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Re-drive a recorded event trace through the scan pipeline.
    Replay {
        trace: PathBuf,
        config: PathBuf,
        /// Write records here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    /// Bad usage or configuration; nothing was executed.
    Usage(String),
    /// Failure mid-run; partial results are preserved.
    Runtime(String),
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{} does not exist", path.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::SimScan {
            scenario,
            config,
            out,
            seed,
            port,
            rate,
            noise_threshold,
            concurrency,
            resume,
            dump_events,
        } => {
            require_file(&scenario)?;
            require_file(&config)?;
            let scenario = Scenario::load(&scenario).map_err(usage)?;
            let mut cfg = ScanConfig::load(&config).map_err(usage)?;
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            if let Some(p) = port {
                cfg.target_port = p;
            }
            if let Some(r) = rate {
                cfg.max_rate_pps_per_host = r;
            }
            if let Some(n) = noise_threshold {
                cfg.noise_threshold_pps = n;
            }
            if let Some(c) = concurrency {
                cfg.concurrency_limit = c;
            }
            cfg.validate().map_err(usage)?;

            let completed: HashSet<Ipv4Addr> = if resume && out.is_file() {
                let records = load_records(BufReader::new(File::open(&out).map_err(runtime)?))
                    .map_err(runtime)?;
                completed_targets(&records, &cfg)
            } else {
                HashSet::new()
            };
            let file = if resume && out.is_file() {
                File::options().append(true).open(&out).map_err(runtime)?
            } else {
                File::create(&out).map_err(runtime)?
            };
            let mut writer = BufWriter::new(file);
            let mut events_writer = match &dump_events {
                Some(p) => Some(BufWriter::new(File::create(p).map_err(runtime)?)),
                None => None,
            };
            let summary = run_pipeline(
                &scenario,
                &cfg,
                &completed,
                &mut writer,
                events_writer.as_mut().map(|w| w as &mut dyn Write),
            )
            .map_err(runtime)?;
            if let Some(w) = events_writer.as_mut() {
                w.flush().map_err(runtime)?;
            }
            println!(
                "scanned {} of {} targets ({} skipped), {} qualified, {} records -> {}",
                summary.scanned,
                summary.targets,
                summary.skipped,
                summary.qualified,
                summary.records,
                out.display()
            );
            Ok(())
        }

        Command::Probe { scenario, target, n, t, port, seed } => {
            require_file(&scenario)?;
            if n < 2 {
                return Err(CliError::Usage("probe count must be at least 2".into()));
            }
            if t == 0 {
                return Err(CliError::Usage("probe interval must be positive".into()));
            }
            let scenario = Scenario::load(&scenario).map_err(usage)?;
            let mut tx =
                SimTransport::with_budget(scenario, RateBudget::new(0.6, pipeline::BURST_CAPACITY));
            let mut rng = ScanRng::for_target(seed, target);
            let params = ProbeParams { n, interval_s: t, timeout_s: 1 };
            tx.reserve_sends(n, (n * t) as u64 * 1000);
            let series = probe_series(&mut tx, &mut rng, target, port, &params);
            println!("ipids({t}, {n}) for {target}:{port}");
            let mut prev: Option<u16> = None;
            for s in series.samples() {
                match s.value {
                    Some(v) => {
                        let delta = prev
                            .map(|p| format!("+{}", natscan::ipid_delta(p, v)))
                            .unwrap_or_else(|| String::from(" "));
                        println!("  t+{:<3} {:>6}  {delta}", s.offset_s, v);
                        prev = Some(v);
                    }
                    None => println!("  t+{:<3}   None", s.offset_s),
                }
            }
            let class = classify_shared_ipid(&series, 2, 6.0);
            match estimate_noise(&series) {
                Ok(noise) => println!(
                    "classification: {class:?}, noise {:.2} pps over {} pairs",
                    noise.rate_pps, noise.valid_pairs
                ),
                Err(_) => println!("classification: {class:?}, noise unmeasurable"),
            }
            Ok(())
        }

        Command::Detect { scenario, outpost, subnet, port, seed, noise_threshold } => {
            require_file(&scenario)?;
            if !natscan::model::is_private_addr(subnet.network()) {
                return Err(CliError::Usage(format!("subnet {subnet} must be private")));
            }
            let scenario = Scenario::load(&scenario).map_err(usage)?;
            let mut tx =
                SimTransport::with_budget(scenario, RateBudget::new(0.6, pipeline::BURST_CAPACITY));
            let mut rng = ScanRng::for_target(seed, outpost);
            let select =
                SelectParams { port, noise_threshold_pps: noise_threshold, ..SelectParams::default() };
            let verdict = select_outpost(&mut tx, &mut rng, outpost, &select);
            println!("outpost {outpost}: {:?}", verdict.outcome);
            if verdict.outcome != OutpostOutcome::QualifiedOutpost {
                return Ok(());
            }
            let params =
                DetectionParams { noise_threshold_pps: noise_threshold, ..DetectionParams::default() };
            let (schedule, verdicts) =
                sweep_private_range(&mut tx, &mut rng, outpost, port, subnet, &params);
            println!(
                "retransmission offsets {:?} (calibrated: {})",
                schedule.offsets_s, schedule.calibrated
            );
            for v in &verdicts {
                println!("  {} {:?}", v.probed_private_ip, v.outcome);
            }
            let found = verdicts
                .iter()
                .filter(|v| v.outcome == natscan::PenetrationOutcome::HolePresent)
                .count();
            println!("{found} reachable private hosts in {subnet}");
            Ok(())
        }

        Command::Report { results, second, json } => {
            require_file(&results)?;
            if let Some(p) = &second {
                require_file(p)?;
            }
            let mut runs = Vec::new();
            for path in std::iter::once(&results).chain(second.as_ref()) {
                let records = load_records(BufReader::new(File::open(path).map_err(runtime)?))
                    .map_err(runtime)?;
                let label = path
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                runs.push((label, records));
            }
            let rep = report::build_report(&runs);
            print!("{}", report::render_text(&rep));
            if let Some(p) = json {
                let mut f = BufWriter::new(File::create(&p).map_err(runtime)?);
                serde_json::to_writer_pretty(&mut f, &rep).map_err(runtime)?;
                f.write_all(b"\n").map_err(runtime)?;
                f.flush().map_err(runtime)?;
            }
            Ok(())
        }

        Command::Replay { trace, config, out } => {
            require_file(&trace)?;
            require_file(&config)?;
            let cfg = ScanConfig::load(&config).map_err(usage)?;
            let records =
                load_jsonl(BufReader::new(File::open(&trace).map_err(runtime)?)).map_err(usage)?;
            // The scanner's own address shows up as the unspoofed (public)
            // source of its stimuli.
            let scanner_ip = records
                .iter()
                .find(|e| e.from_scanner && !natscan::model::is_private_addr(e.src))
                .map(|e| e.src)
                .ok_or_else(|| CliError::Usage("trace holds no scanner stimuli".into()))?;
            let mut targets: Vec<Ipv4Addr> = Vec::new();
            for e in &records {
                if e.from_scanner && e.dst != scanner_ip && !targets.contains(&e.dst) {
                    targets.push(e.dst);
                }
            }
            let mut sink: Box<dyn Write> = match &out {
                Some(p) => Box::new(BufWriter::new(File::create(p).map_err(runtime)?)),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut total = 0usize;
            for target in targets {
                let mut tx = TraceTransport::filtered_for_target(scanner_ip, &records, target);
                let mut rng = ScanRng::for_target(cfg.rng_seed, target);
                let recs =
                    pipeline::scan_target_with(&mut tx, &mut rng, &cfg, target).map_err(runtime)?;
                for r in &recs {
                    serde_json::to_writer(&mut sink, r).map_err(runtime)?;
                    sink.write_all(b"\n").map_err(runtime)?;
                    total += 1;
                }
            }
            sink.flush().map_err(runtime)?;
            eprintln!("replayed {total} records");
            Ok(())
        }
    }
}
