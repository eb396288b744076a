//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, datagen, SampleBuilder, TemplateSet};
use crate::error::{Error, Result};
use crate::eval;
use crate::gradcheck;
use crate::model::{MileModel, ModelConfig};
use crate::train::{self, Paradigm, RunOutput, TrainData};
use crate::tuning::{apply_plan, plan_report, TuningPlan};

#[derive(Debug, Parser)]
#[command(name = "mile", version, about = "Tune, evaluate and account a small vision-language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model as described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for loss.csv and checkpoints.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a resumable checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        plan: Option<TuningPlan>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_paradigm)]
        paradigm: Option<Paradigm>,
    },
    /// Exact-match evaluation on the original-format benchmark.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Adapter checkpoint applied on top of the base model.
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Benchmark JSONL; defaults to `[data] eval`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print exact total and trainable parameter counts for a plan.
    CountParams {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        plan: Option<TuningPlan>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// IA3 sites: `all` attention layers or `self` attention only.
        #[arg(long, value_parser = ["all", "self"])]
        ia3_sites: Option<String>,
    },
    /// Convert raw QA records to instruction format.
    GenInstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        distractors: usize,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Finite-difference gradient check of the micro model in f64.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tol: f64,
        /// Check one plan instead of the built-in set.
        #[arg(long)]
        plan: Option<TuningPlan>,
    },
}

fn parse_paradigm(s: &str) -> std::result::Result<Paradigm, String> {
    match s {
        "origin" => Ok(Paradigm::Origin),
        "instruct" => Ok(Paradigm::Instruct),
        "origin_then_instruct" => Ok(Paradigm::OriginThenInstruct),
        _ => Err(format!("unknown paradigm `{s}` (origin, instruct, origin_then_instruct)")),
    }
}

/// Parses `args` and runs the command. Returns the process exit code: 0 on
/// success, 2 for usage or config errors, 1 otherwise.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Parse { .. } | Error::Config(_) | Error::Plan(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("config has no [data] {what} path")))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::CountParams {
            config,
            plan,
            csv,
            ia3_sites,
        } => {
            let cfg = load_config(&config)?;
            let mut model: ModelConfig = cfg.model;
            if let Some(s) = ia3_sites {
                model.ia3_cross_attn = s == "all";
            }
            let report = plan_report(&model, &plan.unwrap_or(cfg.plan))?;
            println!("{report}");
            if let Some(path) = csv {
                data::records::write_text(&path, &report.to_csv())?;
            }
            Ok(())
        }
        Command::GenInstruct {
            input,
            out,
            seed,
            distractors,
            templates,
        } => {
            let records = data::records::read_qa_records(&input)?;
            let templates = match templates {
                Some(p) => TemplateSet::load(&p)?,
                None => TemplateSet::builtin(),
            };
            let (generated, manifest) = datagen::generate_dataset(&records, seed, distractors, &templates)?;
            let violations = datagen::validate(&records, &generated, &templates, distractors);
            if let Some(v) = violations.first() {
                return Err(Error::Input(format!(
                    "{} generated records fail validation; first at record {}: {}",
                    violations.len(),
                    v.index,
                    v.message
                )));
            }
            datagen::write_dataset(&out, &generated, &manifest)?;
            println!(
                "wrote {} records ({} open, {} closed) to {}",
                manifest.records_out,
                manifest.open,
                manifest.closed,
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck { seed, tol, plan } => {
            let plans = plan.map(|p| vec![p]).unwrap_or_else(gradcheck::default_plans);
            let mut failed = 0;
            for p in plans {
                let r = gradcheck::gradcheck(&ModelConfig::micro(), &p, seed, tol)?;
                println!(
                    "{:<20} {:>3} tensors {:>6} entries  max rel err {:.2e}  {}",
                    p.to_string(),
                    r.tensors,
                    r.entries,
                    r.max_rel_err,
                    if r.passed() { "ok" } else { "FAILED" }
                );
                for m in r.failures.iter().take(5) {
                    println!("    {}[{}]: analytic {:e} numeric {:e}", m.tensor, m.index, m.analytic, m.numeric);
                }
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Input(format!("gradient check failed for {failed} plan(s)")));
            }
            Ok(())
        }
        Command::Train {
            config,
            out,
            resume,
            plan,
            epochs,
            lr,
            seed,
            paradigm,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(p) = plan {
                cfg.plan = p;
            }
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.base_lr = lr.unwrap_or(t.base_lr);
            t.seed = seed.unwrap_or(t.seed);
            t.paradigm = paradigm.unwrap_or(t.paradigm);
            t.validate()?;

            let builder = SampleBuilder {
                image_size: cfg.model.image_size,
                max_text_len: cfg.model.max_text_len,
                base_dir: cfg.image_dir(),
            };
            let needs = |p: Paradigm, origin: bool| match p {
                Paradigm::Origin => origin,
                Paradigm::Instruct => !origin,
                Paradigm::OriginThenInstruct => true,
            };
            let origin = if needs(cfg.train.paradigm, true) {
                let recs = data::records::read_qa_records(required(&cfg.data.origin, "origin")?)?;
                Some(builder.origin::<f32>(&recs)?)
            } else {
                None
            };
            let instruct = if needs(cfg.train.paradigm, false) {
                let recs = data::records::read_instruction_records(required(&cfg.data.instruct, "instruct")?)?;
                Some(builder.instruct::<f32>(&recs)?)
            } else {
                None
            };
            let data = TrainData {
                origin: origin.as_deref(),
                instruct: instruct.as_deref(),
            };
            let output = RunOutput::in_dir(&out);
            let log = match resume {
                Some(ckpt) => train::resume::<f32>(&ckpt, &cfg.train, &data, &output)?.1,
                None => {
                    let mut model = MileModel::<f32>::new(cfg.model.clone())?;
                    apply_plan(&mut model, &cfg.plan)?;
                    train::train(&mut model, &cfg.train, &data, &output, None)?
                }
            };
            for e in &log.epochs {
                println!("{} epoch {:>4}  mean loss {:.5}", e.stage, e.epoch, e.mean_loss);
            }
            println!(
                "{} steps in {:.1}s; loss log {}; checkpoint {}",
                log.steps.len(),
                log.wall_clock_secs,
                output.loss_csv().expect("output dir set").display(),
                log.checkpoint.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint: ckpt,
            adapters,
            data: bench,
            max_len,
            threads,
            csv,
        } => {
            let cfg = load_config(&config)?;
            let mut model = MileModel::<f32>::new(cfg.model.clone())?;
            if let Some(p) = &ckpt {
                checkpoint::load_into(p, &mut model)?;
            }
            if let Some(p) = &adapters {
                checkpoint::load_adapters(p, &mut model)?;
            }
            if ckpt.is_none() && adapters.is_none() {
                return Err(Error::Config("eval needs --checkpoint and/or --adapters".into()));
            }
            let bench = match bench {
                Some(b) => b,
                None => required(&cfg.data.eval, "eval")?.to_path_buf(),
            };
            let records = data::records::read_qa_records(&bench)?;
            let (report, _) = eval::evaluate(&model, &records, cfg.image_dir(), max_len, threads)?;
            println!("{report}");
            if let Some(path) = csv {
                data::records::write_text(&path, &report.to_csv())?;
            }
            Ok(())
        }
    }
}
