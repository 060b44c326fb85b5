use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kinhmd::device::read_export;
use kinhmd::safety::{calibrate_gain, CalibrationResponder, CalibrationResponse, ResponderTimeout, ScriptedCalibration};
use kinhmd::session::service::{serve, ServiceOptions};
use kinhmd::session::{
    plan_trials_with, replay_log, run_loop, run_session, summarize, Condition, OrderMode, RatingScale, Ratings, ScriptedResponder,
    SessionConfig, SourceKind, TrialPhase, TrialResponder,
};
use kinhmd::stimulus::synthesize_trace;
use kinhmd::CueingMode;

#[derive(Parser)]
#[command(name = "kinhmd", version, about = "Head-based force-feedback motion cueing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the double-step stimulus as a CSV trace.
    Stimulus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000.0)]
        rate: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Run the control loop against a source for a fixed duration.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        /// Save the live inputs as a replayable CSV trace.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Run a randomized block of trials with scripted or typed ratings.
    Trial {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        full_shuffle: bool,
        /// Directory for summary.txt and quartiles.csv.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Ask for ratings on stdin.
        #[arg(long)]
        interactive: bool,
    },
    /// Drive the simulated plant with a logged command stream and compare.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the operator console over WebSocket.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Per-user gain staircase.
    Calibrate {
        #[arg(long)]
        user: String,
        /// Probe acceleration, m/s^2.
        #[arg(long, default_value_t = 5.0)]
        probe: f64,
        /// Non-interactive: reject at this step (1-based).
        #[arg(long)]
        reject_at: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML session config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<SourceKind>,
    #[arg(long)]
    mode: Option<CueingMode>,
    #[arg(long)]
    gain: Option<f64>,
    /// Force magnitude limit, N.
    #[arg(long)]
    limit: Option<f64>,
    /// Force slew limit, N/s.
    #[arg(long)]
    jerk_limit: Option<f64>,
    /// Device log output (.jsonl or .jsonl.gz).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Trace CSV for `--source trace`.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    tick_rate: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<SessionConfig, Box<dyn std::error::Error>> {
        let mut cfg = match &self.config {
            Some(p) => SessionConfig::load(p)?,
            None => SessionConfig::default(),
        };
        if let Some(s) = self.source {
            cfg.source = s;
        }
        if let Some(m) = self.mode {
            cfg.cueing.mode = m;
        }
        if let Some(g) = self.gain {
            cfg.cueing.gain = g;
        }
        if let Some(l) = self.limit {
            cfg.safety.force_limit_n = l;
        }
        if let Some(j) = self.jerk_limit {
            cfg.safety.jerk_limit_n_per_s = j;
        }
        if let Some(p) = &self.log {
            cfg.log_path = Some(p.clone());
        }
        if let Some(p) = &self.trace {
            cfg.trace_path = Some(p.clone());
            if self.source.is_none() {
                cfg.source = SourceKind::TraceReplay;
            }
        }
        if let Some(r) = self.tick_rate {
            cfg.tick_rate_hz = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Stimulus { out, rate, common } => {
            let cfg = common.config()?;
            let trace = synthesize_trace(&cfg.stimulus, rate)?;
            trace.save(&out)?;
            println!("wrote {} samples ({:.3} s) to {}", trace.len(), trace.duration(), out.display());
        }
        Cmd::Run { common, duration, record } => {
            let cfg = common.config()?;
            let report = run_loop(&cfg, duration)?;
            println!("{}", report.summary_line());
            let peak = report.log.records().iter().map(|r| r.commanded.force.norm()).fold(0.0, f64::max);
            println!("peak force {peak:.3} N");
            for w in &report.warnings {
                log::warn!("{w}");
            }
            if let (Some(path), Some(trace)) = (record, &report.recorded_input) {
                trace.save(&path)?;
                println!("recorded {} input samples to {}", trace.len(), path.display());
            }
            if let Some(f) = report.fault {
                eprintln!("hard fault: {f}");
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Trial { common, reps, seed, full_shuffle, report, interactive } => {
            let cfg = common.config()?;
            let mode = if full_shuffle { OrderMode::FullShuffle } else { OrderMode::Block };
            let plan = plan_trials_with(&Condition::ALL, reps, seed, mode)?;
            let order: Vec<&str> = plan.order.iter().map(|c| c.as_str()).collect();
            println!("plan (seed {seed}): {}", order.join(" "));
            let outcome = if interactive {
                run_session(&cfg, &plan, &mut StdinResponder)?
            } else {
                run_session(&cfg, &plan, &mut ScriptedResponder::default())?
            };
            let summary = summarize(&outcome.records)?;
            print!("{}", summary.to_text());
            if let Some(dir) = report {
                summary.write_report(&dir)?;
                let records = serde_json::to_string_pretty(&outcome.records)?;
                std::fs::write(dir.join("trials.json"), records)?;
                println!("report written to {}", dir.display());
            }
        }
        Cmd::Replay { log, config } => {
            let cfg = match config {
                Some(p) => SessionConfig::load(p)?,
                None => SessionConfig::default(),
            };
            let records = read_export(&log)?;
            let rep = replay_log(&records, &cfg.plant)?;
            println!(
                "{} records, peak force {:.3} N, lean peak {:.2} mm, max position error {:.3e} m, identical: {}",
                rep.records,
                rep.peak_force_n,
                rep.lean_peak_m * 1e3,
                rep.max_position_error_m,
                rep.identical
            );
        }
        Cmd::Serve { port, host, reps, seed, common } => {
            let cfg = common.config()?;
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            let handle = serve(&cfg, addr, ServiceOptions { reps, seed })?;
            println!("console on ws://{}", handle.local_addr());
            handle.wait();
        }
        Cmd::Calibrate { user, probe, reject_at, out, common } => {
            let cfg = common.config()?;
            let result = match reject_at {
                Some(step) => {
                    calibrate_gain(&user, &mut ScriptedCalibration { reject_at: Some(step), timeout_at: None }, &cfg.safety, probe)?
                }
                None => calibrate_gain(&user, &mut StdinCalibration, &cfg.safety, probe)?,
            };
            println!(
                "user {}: accepted gain {:.4}{}",
                result.user_id,
                result.accepted_gain,
                if result.aborted { " (aborted)" } else { "" }
            );
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&result)?)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn prompt(text: &str) -> Option<String> {
    print!("{text}");
    io::stdout().flush().ok()?;
    let mut line = String::new();
    match io::stdin().lock().read_line(&mut line) {
        Ok(0) | Err(_) => None,
        Ok(_) => Some(line.trim().to_owned()),
    }
}

struct StdinResponder;

impl TrialResponder for StdinResponder {
    fn confirm_launch(&mut self, index: usize) -> bool {
        prompt(&format!("trial {index}: press enter to launch ")).is_some()
    }

    fn kill_requested(&mut self, _: usize, _: TrialPhase, _: f64) -> bool {
        false
    }

    fn rate(&mut self, index: usize, _condition: Condition) -> Option<Ratings> {
        loop {
            let mut v = [0i8; 3];
            for (slot, scale) in v.iter_mut().zip(RatingScale::ALL) {
                loop {
                    let line = prompt(&format!("  {} [{}..{}] ({}): ", scale.name, scale.min, scale.max, scale.description))?;
                    match line.parse::<i8>() {
                        Ok(x) if (scale.min..=scale.max).contains(&x) => {
                            *slot = x;
                            break;
                        }
                        _ => println!("  out of range"),
                    }
                }
            }
            match Ratings::new(v[0], v[1], v[2]) {
                Ok(r) => return Some(r),
                Err(e) => println!("trial {index}: {e}"),
            }
        }
    }
}

struct StdinCalibration;

impl CalibrationResponder for StdinCalibration {
    fn respond(&mut self, step: usize, gain: f64, peak: f64) -> Result<CalibrationResponse, ResponderTimeout> {
        loop {
            let line =
                prompt(&format!("step {step}: gain {gain:.3}, peak {peak:.2} N. ok / too strong? [o/s] ")).ok_or(ResponderTimeout)?;
            match line.as_str() {
                "o" | "ok" | "" => return Ok(CalibrationResponse::Accept),
                "s" | "strong" | "too strong" => return Ok(CalibrationResponse::TooStrong),
                _ => {}
            }
        }
    }
}
