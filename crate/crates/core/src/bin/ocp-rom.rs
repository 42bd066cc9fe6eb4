use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ocp_rom::harness::{build_definition, build_offline, emit_results, run_study, DistSpec, StudyConfig};
use ocp_rom::ocp::{solve, CaseName};
use ocp_rom::quadrature::RuleKind;
use ocp_rom::rom::{solve_online, OnlineMode, ReducedModel};
use ocp_rom::wpod::PodFormulation;

#[derive(Parser)]
#[command(name = "ocp-rom", version, about = "Reduced-order models for parametrized optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the structured analog mesh of a case.
    MeshGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-order KKT solve at one parameter.
    TruthSolve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training snapshots, weighted POD and projection; writes a model directory.
    Offline {
        #[command(flatten)]
        common: Common,
        /// Modes per field.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reduced solve at one parameter from a saved model.
    Online {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error and speedup study over a range of N; writes CSV files.
    Study {
        #[command(flatten)]
        common: Common,
        /// Largest N (the range is 1..=N).
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
        #[arg(long)]
        no_timing: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags shared by all subcommands; they override the JSON config.
#[derive(Args)]
struct Common {
    /// JSON study configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    case: Option<CaseName>,
    /// Cells per side of the analog mesh.
    #[arg(long)]
    cells: Option<usize>,
    /// Mesh file instead of the analog mesh.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rule: Option<RuleKind>,
    /// Training nodes (sampled rules) or nodes per dimension (tensor rules).
    #[arg(long)]
    size: Option<usize>,
    /// Law per parameter component, repeatable; a single value applies to all.
    #[arg(long)]
    dist: Vec<DistSpec>,
    #[arg(long)]
    no_aggregation: bool,
    #[arg(long)]
    pod: Option<PodFormulation>,
    #[arg(long)]
    nl_mode: Option<OnlineMode>,
    #[arg(long)]
    alpha: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<StudyConfig, Box<dyn std::error::Error>> {
        let mut cfg = match (&self.config, self.case) {
            (Some(p), _) => StudyConfig::load(p)?,
            (None, Some(c)) => StudyConfig::new(c),
            (None, None) => return Err("either --config or --case is required".into()),
        };
        if let Some(c) = self.case {
            cfg.case = c;
        }
        if let Some(c) = self.cells {
            cfg.mesh.cells = c;
        }
        if let Some(p) = &self.mesh {
            cfg.mesh.path = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.rule {
            cfg.training_rule = r;
        }
        if let Some(s) = self.size {
            cfg.training_size = s;
        }
        if !self.dist.is_empty() {
            cfg.distribution = self.dist.clone();
        }
        if self.no_aggregation {
            cfg.aggregated = false;
        }
        if let Some(p) = self.pod {
            cfg.pod = p;
        }
        if let Some(m) = self.nl_mode {
            cfg.nl_mode = m;
        }
        if self.alpha.is_some() {
            cfg.alpha = self.alpha;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(out: &Option<PathBuf>, value: &serde_json::Value) -> Result<(), Box<dyn std::error::Error>> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            use std::io::Write;
            if let Err(e) = writeln!(std::io::stdout(), "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::MeshGen { common, out } => {
            let cfg = common.config()?;
            let mesh = cfg.mesh.build(cfg.case)?;
            mesh.save(&out)?;
            eprintln!("{} vertices, {} triangles -> {}", mesh.num_vertices(), mesh.num_triangles(), out.display());
        }
        Command::TruthSolve { common, mu, out } => {
            let cfg = common.config()?;
            let def = build_definition(&cfg)?;
            let s = solve(&def, &mu, &cfg.newton)?;
            write_json(&out, &serde_json::to_value(&s)?)?;
            eprintln!("J = {:.10e}, residual {:.2e}, {} Newton iterations", s.objective, s.residual, s.iterations);
        }
        Command::Offline { common, n, out } => {
            let cfg = common.config()?;
            let def = build_definition(&cfg)?;
            let (model, _) = build_offline(&cfg, &def, n)?;
            model.save(&out)?;
            eprintln!("reduced system size {} -> {}", model.system_size(), out.display());
        }
        Command::Online { common, model, mu, out } => {
            let mut rom = ReducedModel::load(&model)?;
            if let Some(m) = common.nl_mode {
                rom.mode = m;
            }
            let cfg = if common.config.is_some() || common.case.is_some() {
                Some(common.config()?)
            } else {
                None
            };
            let def = match (&cfg, rom.mode) {
                (Some(c), OnlineMode::FullOrder) => Some(build_definition(c)?),
                _ => None,
            };
            let opts = cfg.map(|c| c.newton).unwrap_or_default();
            let s = solve_online(&rom, def.as_ref(), &mu, &opts)?;
            write_json(
                &out,
                &serde_json::json!({
                    "mu": s.mu,
                    "objective": s.objective,
                    "y_n": s.y_n,
                    "u_n": s.u_n,
                    "p_n": s.p_n,
                    "iterations": s.iterations,
                    "online_time": s.online_time,
                }),
            )?;
        }
        Command::Study {
            common,
            n_max,
            test_size,
            no_timing,
            out,
        } => {
            let mut cfg = common.config()?;
            if let Some(n) = n_max {
                cfg.n_values = (1..=n).collect();
            }
            if let Some(t) = test_size {
                cfg.test_size = t;
            }
            if no_timing {
                cfg.timing = false;
            }
            if let Some(o) = out {
                cfg.output = o;
            }
            let report = run_study(&cfg)?;
            for p in emit_results(&report, &cfg.output)? {
                eprintln!("wrote {}", p.display());
            }
            if !report.failures.is_empty() {
                eprintln!("{} reduced solves failed", report.failures.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
