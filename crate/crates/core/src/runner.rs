//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for invalid input, 2 when a run aborts
//! (active-infection cap, I/O failure, failed self-test).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::cipher::{self, CipherError, KeyPair};
use crate::config::{read_config, Command, ConfigError, RunConfig, SweepAxis};
use crate::epidemic::{run_ensemble, EnsembleSeries, EpidemicError, SimulationParams};
use crate::report::{emit_csv, emit_svg, ReportError, Series, SvgOptions};
use crate::world::{false_alert_rate, read_trace, World, WorldError, WorldEvent};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Epidemic(#[from] EpidemicError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} replicate(s) exceeded the active-infection cap; outputs were written with truncated series")]
    Truncated(u32),
    #[error("self-test failed: {0}")]
    SelfTest(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_)
            | RunError::Epidemic(EpidemicError::InvalidParams(_))
            | RunError::World(WorldError::InvalidConfig(_) | WorldError::Trace { .. }) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CommandArg {
    Epidemic,
    Sweep,
    World,
    CryptoSelftest,
}

impl From<CommandArg> for Command {
    fn from(c: CommandArg) -> Self {
        match c {
            CommandArg::Epidemic => Command::Epidemic,
            CommandArg::Sweep => Command::Sweep,
            CommandArg::World => Command::World,
            CommandArg::CryptoSelftest => Command::CryptoSelftest,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "proximity-sim", version, about = "Contact-tracing app co-simulator")]
struct Cli {
    command: CommandArg,
    /// Sweep axis as key=v1,v2,... (same as --sweep).
    axis: Option<String>,
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sweep: Option<String>,
    /// Shade the gap between baseline and app curves.
    #[arg(long)]
    shade: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Builds the run configuration from command-line arguments (program name first).
pub fn resolve_config<I, T>(argv: I) -> Result<RunConfig, Result<String, clap::Error>>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(Err)?;
    let command = Command::from(cli.command);
    let text = match &cli.config {
        Some(path) => fs::read_to_string(path).map_err(|e| Ok(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let config_err = |e: ConfigError| Ok(e.to_string());
    let mut cfg = read_config(&text, command).map_err(config_err)?;
    if cli.sweep.is_some() && cli.axis.is_some() {
        return Err(Ok("give the sweep axis either positionally or with --sweep, not both".into()));
    }
    if let Some(axis) = cli.sweep.as_deref().or(cli.axis.as_deref()) {
        cfg.sweep_axis = Some(SweepAxis::parse(axis).map_err(config_err)?);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    cfg.shade_protected |= cli.shade;
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cfg = match resolve_config(argv) {
        Ok(cfg) => cfg,
        Err(Err(clap_err)) => {
            let _ = clap_err.print();
            return if clap_err.use_stderr() { 1 } else { 0 };
        }
        Err(Ok(message)) => {
            eprintln!("error: {message}");
            return 1;
        }
    };
    let mut summary = Vec::new();
    let result = execute(&cfg, &mut summary);
    print!("{}", String::from_utf8_lossy(&summary));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a resolved configuration, writing a short summary to `out`.
pub fn execute(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), RunError> {
    match cfg.command {
        Command::Epidemic => run_epidemic(cfg, out),
        Command::Sweep => run_sweep(cfg, out),
        Command::World => run_world(cfg, out),
        Command::CryptoSelftest => crypto_selftest(cfg.seed, out),
    }
}

fn say(out: &mut dyn Write, line: String) {
    let _ = writeln!(out, "{line}");
}

fn prepare_dir(dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn baseline_params(params: &SimulationParams) -> SimulationParams {
    SimulationParams { efficiency: 0.0, ..params.clone() }
}

fn peak(series: &[f64]) -> (usize, f64) {
    series.iter().copied().enumerate().fold((0, f64::MIN), |best, (d, v)| if v > best.1 { (d, v) } else { best })
}

struct Labelled {
    label: String,
    ensemble: EnsembleSeries,
}

fn summary_csv(rows: &[Labelled]) -> String {
    let mut text = String::from("label,peak_day,peak_mean,final_day_mean,cumulative_mean,cumulative_std_error,truncated_replicates\n");
    for row in rows {
        let e = &row.ensemble;
        let (day, value) = peak(&e.mean);
        let last = e.days() - 1;
        text.push_str(&format!(
            "{},{day},{value},{},{},{},{}\n",
            row.label, e.mean[last], e.cumulative_mean[last], e.cumulative_std_error[last], e.truncated_replicates
        ));
    }
    text
}

fn write_curves(rows: &[Labelled], stem: &str, title: &str, cfg: &RunConfig, out: &mut dyn Write) -> Result<(), RunError> {
    prepare_dir(&cfg.output_dir)?;
    let series: Vec<Series> = rows.iter().map(|r| Series::new(r.label.clone(), r.ensemble.mean.clone())).collect();
    let csv = cfg.output_dir.join(format!("{stem}.csv"));
    let svg = cfg.output_dir.join(format!("{stem}.svg"));
    let summary = cfg.output_dir.join(format!("{stem}_summary.csv"));
    emit_csv(&series, &csv)?;
    let shade = (cfg.shade_protected && series.len() >= 2).then_some((0, 1));
    emit_svg(&series, &SvgOptions { title: title.to_string(), shade_between: shade }, &svg)?;
    fs::write(&summary, summary_csv(rows)).map_err(io_err(&summary))?;
    for row in rows {
        let e = &row.ensemble;
        let (day, value) = peak(&e.mean);
        say(out, format!("{}: peak {value:.1} on day {day}, cumulative {:.0}", row.label, e.cumulative_mean[e.days() - 1]));
    }
    say(out, format!("wrote {}, {} and {}", csv.display(), svg.display(), summary.display()));
    let truncated: u32 = rows.iter().map(|r| r.ensemble.truncated_replicates).sum();
    if truncated > 0 {
        return Err(RunError::Truncated(truncated));
    }
    Ok(())
}

fn run_epidemic(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), RunError> {
    let rows = vec![
        Labelled { label: "baseline".into(), ensemble: run_ensemble(&baseline_params(&cfg.params), cfg.seed)? },
        Labelled { label: "app".into(), ensemble: run_ensemble(&cfg.params, cfg.seed)? },
    ];
    write_curves(&rows, "epidemic", "daily new infected (ensemble mean)", cfg, out)
}

fn run_sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), RunError> {
    let axis = cfg.sweep_axis.as_ref().ok_or_else(|| ConfigError::Validation("sweep requires an axis".into()))?;
    let mut rows = vec![Labelled { label: "baseline".into(), ensemble: run_ensemble(&baseline_params(&cfg.params), cfg.seed)? }];
    for &value in &axis.values {
        let params = axis.apply(&cfg.params, value)?;
        rows.push(Labelled { label: axis.label(value), ensemble: run_ensemble(&params, cfg.seed)? });
    }
    write_curves(&rows, &format!("sweep_{}", axis.key), &format!("daily new infected by {}", axis.key), cfg, out)
}

fn is_protocol_event(e: &WorldEvent) -> bool {
    !matches!(e, WorldEvent::Contact { .. } | WorldEvent::Transmit { .. } | WorldEvent::Detect { .. })
}

fn run_world(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), RunError> {
    for warning in cfg.world.warnings() {
        eprintln!("warning: {warning}");
    }
    let mut world = match &cfg.trace {
        Some(path) => {
            let file = fs::File::open(path).map_err(io_err(path))?;
            World::with_trace(cfg.world.clone(), cfg.seed, read_trace(file)?)?
        }
        None => World::new(cfg.world.clone(), cfg.seed)?,
    };
    world.run();

    prepare_dir(&cfg.output_dir)?;
    let events = cfg.output_dir.join("world_events.log");
    fs::write(&events, world.trace_lines()).map_err(io_err(&events))?;
    let dispatch = cfg.output_dir.join("dispatch.log");
    let mut text = String::new();
    for e in world.log.iter().filter(|e| is_protocol_event(e)) {
        text.push_str(&e.to_string());
        text.push('\n');
    }
    fs::write(&dispatch, text).map_err(io_err(&dispatch))?;

    let s = &world.stats;
    let rate = match false_alert_rate(&world.log, cfg.world.infection_range, cfg.world.incubation_seconds) {
        Ok(r) => r.to_string(),
        Err(WorldError::EmptyLog) => "undefined".to_string(),
        Err(e) => return Err(e.into()),
    };
    let report = format!(
        "seed={}\ntracking_threshold={}\ninfection_range={}\nnoise_sigma={}\ntransmissions={}\ndetections={}\nuploads={}\n\
         red_notifications={}\nyellow_notifications={}\nerrors={}\nmax_server_residue={}\nfalse_alert_rate={rate}\n",
        cfg.seed,
        cfg.world.tracking_threshold,
        cfg.world.infection_range,
        cfg.world.radio.noise_sigma,
        s.transmissions,
        s.detections,
        s.uploads,
        s.red_notifications,
        s.yellow_notifications,
        s.errors,
        s.max_server_residue,
    );
    let report_path = cfg.output_dir.join("false_alerts.txt");
    fs::write(&report_path, &report).map_err(io_err(&report_path))?;
    let _ = out.write_all(report.as_bytes());
    say(out, format!("wrote {}, {} and {}", events.display(), dispatch.display(), report_path.display()));
    Ok(())
}

fn check(ok: bool, what: &str, out: &mut dyn Write) -> Result<(), RunError> {
    say(out, format!("{} {what}", if ok { "ok  " } else { "FAIL" }));
    if ok {
        Ok(())
    } else {
        Err(RunError::SelfTest(what.to_string()))
    }
}

/// Known-answer vector plus seeded round trips.
pub fn crypto_selftest(seed: u64, out: &mut dyn Write) -> Result<(), RunError> {
    let selftest = |e: CipherError| RunError::SelfTest(e.to_string());
    let toy = KeyPair::from_primes(&BigUint::from(61u32), &BigUint::from(53u32), 17).map_err(selftest)?;
    let c = cipher::encrypt(&toy.public, &BigUint::from(65u32)).map_err(selftest)?;
    check(c.ciphertext == BigUint::from(2790u32), "65^17 mod 3233 = 2790", out)?;
    check(cipher::decrypt(&toy.secret, &c).map_err(selftest)? == BigUint::from(65u32), "2790^2753 mod 3233 = 65", out)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut round_trips = 0;
    for (i, bits) in [64u32, 128, 256, 512].into_iter().enumerate() {
        let pair = cipher::generate_keypair(seed.wrapping_add(i as u64), bits).map_err(selftest)?;
        for _ in 0..50 {
            let m = cipher::random_plaintext(&pair.public, &mut rng);
            let env = cipher::encrypt(&pair.public, &m).map_err(selftest)?;
            if cipher::decrypt(&pair.secret, &env).map_err(selftest)? != m {
                return check(false, &format!("round trip with {bits}-bit key"), out);
            }
            round_trips += 1;
        }
    }
    check(true, &format!("{round_trips} random round trips"), out)?;
    let phone = "+393331234567";
    let encoded = cipher::encode_contact(phone).map_err(selftest)?;
    check(cipher::decode_contact(&encoded).map_err(selftest)? == phone, "contact encoding", out)
}
