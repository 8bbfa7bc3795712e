use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pimsim::compiler::{compile, DecoderGraph};
use pimsim::device::PimTopology;
use pimsim::harness::{
    compile_summary, dpa_check, emit_compile, emit_report, emit_sweep, emit_verify, functional_check, gen_trace,
    reproduce, save_trace, Config, FigureId, Format, MetricsReport, VerifyReport,
};
use pimsim::model::ModelConfig;
use pimsim::plan::ParallelismPlan;
use pimsim::scheduler::{simulate, sweep, WORKERS_ENV};

/// Models whose random weights stay under this many elements are checked
/// functionally as configured; larger ones fall back to the toy model.
const FUNCTIONAL_LIMIT: u64 = 1 << 24;

#[derive(Parser)]
#[command(name = "pimsim", version, about = "Multi-node PIM decode simulator and command-stack compiler")]
#[command(after_help = format!("Sweep worker threads are read from {WORKERS_ENV}."))]
struct Cli {
    /// JSON configuration; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the trace and weight seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "text")]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lower the configured model and plan into per-module programs.
    Compile,
    /// Check simulated decoding against the dense reference and loop expansion against relocation.
    Verify,
    /// Run the configured trace through the decode loop.
    Simulate {
        /// Also write the stage timeline as CSV (needs --out).
        #[arg(long)]
        timeline: bool,
    },
    /// Simulate every (tp, pp) split of the configured modules.
    Sweep,
    /// Run a scripted experiment and check its bounds.
    Reproduce {
        #[arg(value_enum)]
        figure_id: FigureId,
    },
    /// Write the configured trace as CSV.
    GenTrace,
}

enum Failure {
    Input(String),
    Acceptance(String),
}

fn input<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Input(e.to_string())
}

fn ext(f: Format) -> &'static str {
    match f {
        Format::Json => "json",
        Format::Csv => "csv",
        Format::Text => "txt",
    }
}

fn emit(out: Option<&Path>, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(input)?;
            fs::write(dir.join(name), bytes).map_err(input)
        }
        None => std::io::stdout().write_all(bytes).map_err(input),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.trace = cfg.trace.with_seed(s);
    }
    let seed = cli.seed.unwrap_or(42);
    let out = cli.out.as_deref();
    let fmt = cli.format;
    let file = |stem: &str| format!("{stem}.{}", ext(fmt));
    match cli.cmd {
        Cmd::Compile => {
            let sc = cfg.sim_config().map_err(input)?;
            let c =
                compile(&DecoderGraph::from_model(&sc.model), sc.plan, &sc.topo, sc.tokens_per_row).map_err(input)?;
            emit(out, &file("compile"), &emit_compile(&compile_summary(&c), fmt))
        }
        Cmd::Verify => {
            let sc = cfg.sim_config().map_err(input)?;
            let c =
                compile(&DecoderGraph::from_model(&sc.model), sc.plan, &sc.topo, sc.tokens_per_row).map_err(input)?;
            let l = &c.modules[0].attn;
            let cap = l.chunks * l.tb;
            let mut ts: Vec<u32> = [1, l.tb - 1, l.tb, l.tb + 1, 3 * l.tb + 5, sc.model.max_ctl / 2, sc.model.max_ctl]
                .into_iter()
                .filter(|&t| t >= 1 && t <= cap)
                .collect();
            ts.dedup();
            let dpa = dpa_check(&c, &ts, 4, seed).map_err(input)?;
            let small = sc.model.weight_elems_per_layer() * sc.model.n_layers as u64 <= FUNCTIONAL_LIMIT;
            let (model, topo, plan) = if small {
                (sc.model.clone(), sc.topo, sc.plan)
            } else {
                (ModelConfig::toy(), PimTopology::toy(), ParallelismPlan::new(1, 2))
            };
            let functional = functional_check(&model, &topo, plan, &[5, 9], 4, seed, 1e-4).map_err(input)?;
            let r = VerifyReport { functional, functional_model: model.name, dpa, dpa_model: sc.model.name };
            emit(out, &file("verify"), &emit_verify(&r, fmt))?;
            if r.pass() {
                Ok(())
            } else {
                Err(Failure::Acceptance("verification failed".into()))
            }
        }
        Cmd::Simulate { timeline } => {
            if timeline && out.is_none() {
                return Err(Failure::Input("--timeline needs --out".into()));
            }
            let mut sc = cfg.sim_config().map_err(input)?;
            sc.record_timeline = timeline;
            let trace = gen_trace(&cfg.trace).map_err(input)?;
            let (tl, r) = simulate(&trace, &sc).map_err(input)?;
            if let Some(dir) = out.filter(|_| timeline) {
                fs::create_dir_all(dir).map_err(input)?;
                tl.write_csv(fs::File::create(dir.join("timeline.csv")).map_err(input)?).map_err(input)?;
            }
            emit(out, &file("simulate"), &emit_report(&MetricsReport::new(&cfg, &r), fmt))
        }
        Cmd::Sweep => {
            let sc = cfg.sim_config().map_err(input)?;
            let trace = gen_trace(&cfg.trace).map_err(input)?;
            let grid = ParallelismPlan::grid(sc.topo.modules());
            emit(out, &file("sweep"), &emit_sweep(&sweep(&trace, &sc, &grid), fmt))
        }
        Cmd::Reproduce { figure_id } => {
            let b = reproduce(figure_id, seed).map_err(input)?;
            let name = serde_json::to_value(figure_id).ok().and_then(|v| v.as_str().map(str::to_lowercase));
            emit(out, &file(&name.unwrap_or_else(|| "reproduce".into())), &b.emit(fmt))?;
            if b.pass() {
                Ok(())
            } else {
                Err(Failure::Acceptance(b.diff()))
            }
        }
        Cmd::GenTrace => {
            let trace = gen_trace(&cfg.trace).map_err(input)?;
            let mut buf = Vec::new();
            save_trace(&trace, &mut buf).map_err(input)?;
            emit(out, "trace.csv", &buf)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Acceptance(diff)) => {
            eprintln!("acceptance failure\n{diff}");
            ExitCode::from(2)
        }
    }
}
