//! Command-line front end: theory checks, pipeline stages and reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drafteu::evaluation::CostMode;
use drafteu::exec;
use drafteu::models::{AutoregressiveModel, Provenance};
use drafteu::pipeline::experiment::{
    assemble_report, build_world, draft_template, estimate, evaluate, load_family, load_model, run_seed, save_family,
    save_member_logs, save_model, train_drafts, train_proxy, Estimates, World,
};
use drafteu::pipeline::config::ProxyKind;
use drafteu::pipeline::report::{load_report, write_report_files};
use drafteu::pipeline::{emit_report, run_experiment, verify_theory, ExperimentConfig, ReportFormat};
use drafteu::{Error, Result};

const EXIT_INVALID: u8 = 1;
const EXIT_THEORY: u8 = 2;
const EXIT_TRAINING: u8 = 3;

#[derive(Parser)]
#[command(name = "drafteu", version, about = "Epistemic uncertainty from draft-model ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the EU identities on randomized instances.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one term on purpose; the check must then fail.
        #[arg(long)]
        self_test: bool,
    },
    /// Build the task, the target family and the generated corpus.
    GenData(Common),
    /// Train the draft family on the generated corpus.
    TrainDrafts(Common),
    /// Distill the mixture proxy from the target family.
    TrainPmix(Common),
    /// Generate evaluation sequences and per-token EU traces.
    Estimate(Common),
    /// Score the traces and write a single-run report.
    Evaluate(Common),
    /// Run every stage for every configured run.
    Run(Common),
    /// Render a saved report.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "table")]
        format: String,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    cost_mode: Option<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        if let Some(m) = &self.cost_mode {
            cfg.eval.cost_mode = m.parse::<CostMode>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INVALID) } else { ExitCode::SUCCESS };
        }
    };
    match exec::with_workers(exec::workers_from_env(), || dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::TrainingFailure { .. } => EXIT_TRAINING,
                _ => EXIT_INVALID,
            })
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::VerifyTheory { trials, tolerance, seed, self_test } => {
            let result = verify_theory(trials, seed, tolerance, self_test)?;
            print!("{}", result.to_text());
            return Ok(if result.passed() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_THEORY) });
        }
        Command::GenData(c) => {
            let cfg = c.config()?;
            let world = build_world(&cfg, run_seed(&cfg, 0))?;
            world.save(&c.out)?;
            std::fs::write(c.out.join("config.toml"), cfg.to_toml()?)?;
            println!("wrote {} records to {}", world.corpus.len(), c.out.display());
        }
        Command::TrainDrafts(c) => {
            let cfg = c.config()?;
            let seed = run_seed(&cfg, 0);
            let world = World::load(&c.out)?;
            let template = draft_template(&cfg, seed, &world)?;
            let (drafts, logs) = train_drafts(&cfg, seed, &world, &template)?;
            save_family(&c.out, "draft", &drafts, "draft_family")?;
            save_member_logs(&c.out.join("logs"), &logs)?;
            println!("trained {} drafts", drafts.len());
        }
        Command::TrainPmix(c) => {
            let cfg = c.config()?;
            let world = World::load(&c.out)?;
            match train_proxy(&cfg, run_seed(&cfg, 0), &world)? {
                Some(pmix) => {
                    save_model(&c.out, "pmix", &pmix, "pmix")?;
                    println!("trained pmix");
                }
                None => println!("proxy is the raw family average; nothing to train"),
            }
        }
        Command::Estimate(c) => {
            let cfg = c.config()?;
            let world = World::load(&c.out)?;
            let drafts = load_family(&c.out, "draft", Provenance::DraftFamily)?;
            let pmix = load_pmix(&cfg, &c.out)?;
            let est = estimate(&cfg, run_seed(&cfg, 0), &world, &drafts, pmix.as_ref())?;
            est.save(&c.out, 0)?;
            println!("scored {} generations", est.responses.len());
        }
        Command::Evaluate(c) => {
            let cfg = c.config()?;
            let est = Estimates::load(&c.out, 0)?;
            let metrics = evaluate(&cfg, 0, run_seed(&cfg, 0), &est)?;
            let report = assemble_report(&cfg, vec![(0, Ok(metrics))])?;
            write_report_files(&report, &c.out)?;
            print!("{}", ReportFormat::Table.render(&report)?);
        }
        Command::Run(c) => {
            let cfg = c.config()?;
            let report = run_experiment(&cfg, Some(&c.out))?;
            print!("{}", ReportFormat::Table.render(&report)?);
        }
        Command::Report { out, format } => {
            let format: ReportFormat = format.parse()?;
            let report = load_report(&out.join("report.json"))?;
            let path = emit_report(&report, format, &out)?;
            println!("{}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_pmix(cfg: &ExperimentConfig, dir: &Path) -> Result<Option<AutoregressiveModel>> {
    match cfg.proxy.kind {
        ProxyKind::DistilledMix => Ok(Some(load_model(dir, "pmix")?)),
        ProxyKind::RawFamilyAverage => Ok(None),
    }
}
