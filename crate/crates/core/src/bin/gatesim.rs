//! Scenario runner.
//!
//! Every subcommand writes one artifact, to stdout or to `<out>/<cmd>.<ext>`.
//! The exit status reports configuration and IO problems only; a failed
//! attack is a successful run.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gatesim::layout::{generate_layout, PAGE_SIZE};
use gatesim::mitigation::{configure, evaluate_with, outcome_matrix};
use gatesim::report;
use gatesim::rng::{stream_rng, Stream};
use gatesim::scenario::{ConfigError, OutputFormat, ScenarioConfig};
use gatesim::search::locate_tables_multicore;
use gatesim::timing::measure;
use gatesim::parse_hex_addr;

#[derive(Parser, Debug)]
#[command(name = "gatesim", version, about = "GDT discovery and call-gate escalation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dump the generated address-space layout.
    Layout(Common),
    /// Per-sample timing of chosen addresses.
    Probe(ProbeArgs),
    /// Timing search for the IDT/GDT pair.
    Search(SearchArgs),
    /// Full chain under the configured mitigations.
    Exploit(Common),
    /// Mitigation lattice against a run of seeds.
    Matrix(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// key=value scenario file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cores: Option<usize>,
    #[arg(long = "noise-sigma", visible_alias = "noise")]
    noise_sigma: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    /// rdtscp | cpuid | thread
    #[arg(long)]
    timer: Option<String>,
    /// Probes per second.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    threshold: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    umip: bool,
    #[arg(long)]
    dte: bool,
    /// passthrough | spoof | deny
    #[arg(long)]
    vmm: Option<String>,
    #[arg(long)]
    kaiser: bool,
    #[arg(long = "dual-gdt")]
    dual_gdt: bool,
    /// readonly | split
    #[arg(long = "dual-gdt-mode")]
    dual_gdt_mode: Option<String>,
    /// umip | dte | kaiser | dual-gdt (repeatable, or comma separated)
    #[arg(long)]
    mitigation: Vec<String>,
    /// Output directory; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv | json
    #[arg(long)]
    format: Option<String>,
    /// Number of consecutive seeds for the matrix.
    #[arg(long)]
    seeds: Option<usize>,
    /// elevate | clear-pt | marker
    #[arg(long)]
    effect: Option<String>,
    /// Leave the gate installed after the payload returns.
    #[arg(long = "no-restore")]
    no_restore: bool,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Addresses to probe (hex). Defaults to core 0's IDT and the page below it.
    #[arg(long = "address", value_name = "HEX")]
    addresses: Vec<String>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    /// Stop at the first confirmed pair.
    #[arg(long = "stop-on-first")]
    stop_on_first: bool,
    /// Record every candidate (CSV output lists them).
    #[arg(long)]
    candidates: bool,
}

#[derive(Debug)]
enum RunError {
    Config(String),
    Io(String),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.to_string())
    }
}

fn scenario(c: &Common) -> Result<ScenarioConfig, RunError> {
    let mut cfg = ScenarioConfig::default();
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        cfg.merge_text(&text)?;
    }
    let mut set = |k: &str, v: Option<String>| -> Result<(), ConfigError> {
        match v {
            Some(v) => cfg.set(k, &v),
            None => Ok(()),
        }
    };
    set("seed", c.seed.map(|v| v.to_string()))?;
    set("cores", c.cores.map(|v| v.to_string()))?;
    set("noise_sigma", c.noise_sigma.map(|v| v.to_string()))?;
    set("samples", c.samples.map(|v| v.to_string()))?;
    set("timer", c.timer.clone())?;
    set("rate", c.rate.map(|v| v.to_string()))?;
    set("threshold", c.threshold.map(|v| v.to_string()))?;
    set("workers", c.workers.map(|v| v.to_string()))?;
    set("umip", c.umip.then(|| "true".into()))?;
    set("dte", c.dte.then(|| "true".into()))?;
    set("vmm", c.vmm.clone())?;
    set("kaiser", c.kaiser.then(|| "true".into()))?;
    set("dual_gdt", c.dual_gdt.then(|| "true".into()))?;
    set("dual_gdt_mode", c.dual_gdt_mode.clone())?;
    for m in &c.mitigation {
        set("mitigation", Some(m.clone()))?;
    }
    set("out", c.out.as_ref().map(|p| p.display().to_string()))?;
    set("format", c.format.clone())?;
    set("seeds", c.seeds.map(|v| v.to_string()))?;
    set("effect", c.effect.clone())?;
    set("restore", c.no_restore.then(|| "false".into()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn emit(cfg: &ScenarioConfig, name: &str, body: &str) -> Result<(), RunError> {
    match &cfg.output_dir {
        None => {
            print!("{body}");
            Ok(())
        }
        Some(dir) => {
            let io = |e: std::io::Error| RunError::Io(format!("{}: {e}", dir.display()));
            fs::create_dir_all(dir).map_err(io)?;
            let path = dir.join(format!("{name}.{}", cfg.format.extension()));
            fs::write(&path, body).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn layout_for(cfg: &ScenarioConfig) -> Result<gatesim::exploit::Machine, RunError> {
    let layout = generate_layout(cfg.seed, cfg.cores, cfg.mitigations.kaiser)
        .map_err(|e| RunError::Config(e.to_string()))?;
    Ok(configure(&cfg.mitigations, layout))
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Layout(c) => {
            let cfg = scenario(&c)?;
            let m = layout_for(&cfg)?;
            let dump = m.layout.dump();
            let body = match cfg.format {
                OutputFormat::Json => report::layout_json(&dump),
                OutputFormat::Csv => report::layout_csv(&dump),
            };
            emit(&cfg, "layout", &body)
        }
        Command::Probe(p) => {
            let cfg = scenario(&p.common)?;
            let m = layout_for(&cfg)?;
            let addrs = if p.addresses.is_empty() {
                let idt = m.layout.cores[0].idt_base;
                vec![idt, idt - PAGE_SIZE]
            } else {
                p.addresses
                    .iter()
                    .map(|a| parse_hex_addr(a).ok_or_else(|| RunError::Config(format!("malformed address {a:?}"))))
                    .collect::<Result<_, _>>()?
            };
            let timing = cfg.timing();
            let threshold = cfg.threshold.unwrap_or_else(|| timing.default_threshold());
            let mut results = Vec::new();
            for a in addrs {
                let mut rng = stream_rng(cfg.seed, Stream::Probe, a, 1);
                let r = measure(&m.layout, a, cfg.samples, &timing, &cfg.noise, threshold, true, &mut rng)
                    .map_err(|e| RunError::Config(e.to_string()))?;
                results.push(r);
            }
            let body = match cfg.format {
                OutputFormat::Csv => report::probe_csv(&results),
                OutputFormat::Json => report::probe_json(&results, &timing),
            };
            emit(&cfg, "probe", &body)
        }
        Command::Search(s) => {
            let mut cfg = scenario(&s.common)?;
            cfg.stop_on_first |= s.stop_on_first;
            let m = layout_for(&cfg)?;
            let mut sc = cfg.search_config();
            sc.record_candidates = s.candidates;
            let r = locate_tables_multicore(&m.layout, &sc).map_err(|e| RunError::Config(e.to_string()))?;
            let body = match cfg.format {
                OutputFormat::Json => report::search_json(&r),
                OutputFormat::Csv => report::search_csv(&r),
            };
            emit(&cfg, "search", &body)
        }
        Command::Exploit(c) => {
            let cfg = scenario(&c)?;
            let e = evaluate_with(&cfg.mitigations, cfg.seed, &cfg.eval_params())
                .map_err(|e| RunError::Config(e.to_string()))?;
            let body = match cfg.format {
                OutputFormat::Json => report::evaluation_json(&e),
                OutputFormat::Csv => report::evaluation_csv(&e),
            };
            emit(&cfg, "exploit", &body)
        }
        Command::Matrix(c) => {
            let mut cfg = scenario(&c)?;
            if c.format.is_none() && c.config.is_none() {
                cfg.format = OutputFormat::Csv;
            }
            let rows = outcome_matrix(&cfg.matrix_seeds(), cfg.mitigations.vmm_policy, &cfg.eval_params())
                .map_err(|e| RunError::Config(e.to_string()))?;
            let body = match cfg.format {
                OutputFormat::Csv => report::matrix_csv(&rows),
                OutputFormat::Json => report::matrix_json(&rows),
            };
            emit(&cfg, "matrix", &body)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Config(msg)) => {
            eprintln!("gatesim: configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(RunError::Io(msg)) => {
            eprintln!("gatesim: {msg}");
            ExitCode::from(1)
        }
    }
}
