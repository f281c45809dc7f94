use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scvm::checkpoint::Checkpoint;
use scvm::config::Config;
use scvm::gradcheck::GRAD_TOLERANCE;
use scvm::harness::run_suite;
use scvm::inspect::{inspect_gates, write_csv};
use scvm::model::ModelInput;
use scvm::synth::{dataset_sample, generate_sample, write_dataset, ProxyLanguageSpace, TaskSpec};
use scvm::train::{evaluate, restore, EvalReport, Phase, Trainer};
use scvm::{Error, OpKind, Precision, Real};

#[derive(Parser)]
#[command(name = "scvm", about = "Cross-layer memory for a miniature vision transformer")]
struct Cli {
    #[command(flatten)]
    ablation: Ablation,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Switches that apply to every command that builds or runs a model.
#[derive(Args)]
struct Ablation {
    /// Feed a zero question vector into the memory cell.
    #[arg(long, global = true)]
    disable_tmsu_text: bool,
    /// Replace the token gate with the identity.
    #[arg(long, global = true)]
    disable_tag: bool,
    /// Alignment weight; 0 drops the alignment term.
    #[arg(long, global = true)]
    lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train: baseline pretraining (unless disabled), then the memory phase.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Pretrain backbone and head first, then freeze the backbone (default).
        #[arg(long, conflicts_with = "no_pretrain_baseline")]
        pretrain_baseline: bool,
        /// Skip baseline pretraining and train everything from init.
        #[arg(long)]
        no_pretrain_baseline: bool,
        /// Train only the text projection and head on the frozen baseline,
        /// with the memory loop off. The paired control for the memory phase.
        #[arg(long)]
        control: bool,
    },
    /// Accuracy with a per-family breakdown.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every gradient in 64-bit mode.
    Gradcheck {
        /// Corrupt one primitive's backward pass to exercise the harness.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Per-layer gate statistics for one sample, as CSV.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic samples in the binary dataset format.
    Dataset {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

impl Ablation {
    fn apply(&self, cfg: &mut Config) {
        if self.disable_tmsu_text {
            cfg.model.scvm.text_conditioning = false;
        }
        if self.disable_tag {
            cfg.model.scvm.tag = false;
        }
        if let Some(l) = self.lambda {
            cfg.train.lambda = l;
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    Ok(match path {
        Some(p) => Config::load(p).map_err(Error::from)?,
        None => Config::default(),
    })
}

fn load_checkpoint(path: &Path, ablation: &Ablation) -> Result<Checkpoint, Failure> {
    let mut ck = Checkpoint::load(path).map_err(Error::from)?;
    ablation.apply(&mut ck.config);
    Ok(ck)
}

fn print_report(r: &EvalReport) {
    println!("accuracy {:.4} over {} samples", r.accuracy, r.n);
    for f in &r.families {
        println!("  {:<16} {:.4} ({}/{})", f.family, f.accuracy, f.correct, f.total);
    }
    if let Some(a) = r.mean_align {
        println!("mean alignment loss {a:.4}");
    }
}

fn train<T: Real>(cfg: Config, out: &Path, control: bool) -> Result<(), Failure> {
    let mut t = Trainer::<T>::new(cfg)?.with_output(out)?;
    if control {
        if t.cfg.train.pretrain_baseline {
            t.run_phase(Phase::Pretrain)?;
        }
        t.run_phase(Phase::Control)?;
    } else {
        t.run()?;
    }
    let r = t.evaluate(t.cfg.train.eval_seed, t.cfg.train.eval_samples)?;
    print_report(&r);
    println!("checkpoints and metrics.jsonl written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train {
            config,
            out,
            seed,
            steps,
            pretrain_baseline,
            no_pretrain_baseline,
            control,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cli.ablation.apply(&mut cfg);
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
                cfg.train.warmup_steps = s * 3 / 100;
            }
            if pretrain_baseline || no_pretrain_baseline {
                cfg.train.pretrain_baseline = pretrain_baseline;
            }
            if control && !cfg.train.pretrain_baseline {
                return Err(Failure::Usage("--control needs baseline pretraining".into()));
            }
            match cfg.train.precision {
                Precision::F32 => train::<f32>(cfg, &out, control),
                Precision::F64 => train::<f64>(cfg, &out, control),
            }
        }
        Cmd::Eval { ckpt, n, seed } => {
            let ck = load_checkpoint(&ckpt, &cli.ablation)?;
            let (model, store) = restore(&ck)?;
            let lang = ProxyLanguageSpace::new(ck.config.task.language_seed, ck.config.model.scvm.d_llm);
            let r = evaluate(&model, &store, &lang, &ck.config, seed, n)?;
            print_report(&r);
            Ok(())
        }
        Cmd::Gradcheck { corrupt } => {
            let fault = match corrupt {
                Some(name) => {
                    Some(OpKind::from_name(&name).ok_or_else(|| Failure::Usage(format!("unknown op `{name}`")))?)
                }
                None => None,
            };
            let results = run_suite(fault)?;
            let mut failed = Vec::new();
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<24} max rel err {:.3e}  ({} coords, {:.2}s)  {verdict}",
                    r.name, r.report.max_rel_error, r.report.coordinates, r.seconds
                );
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            if failed.is_empty() {
                println!("all {} checks below {GRAD_TOLERANCE:e}", results.len());
                Ok(())
            } else {
                Err(Failure::Numerical(format!(
                    "gradient check failed: {}",
                    failed.join(", ")
                )))
            }
        }
        Cmd::Inspect { ckpt, seed, out } => {
            let ck = load_checkpoint(&ckpt, &cli.ablation)?;
            let (model, store) = restore(&ck)?;
            let lang = ProxyLanguageSpace::new(ck.config.task.language_seed, ck.config.model.scvm.d_llm);
            let input = ModelInput::from_sample(&generate_sample(seed, &ck.config.task), &lang)?;
            let records = inspect_gates(&model, &store, &input, None)?;
            let file = File::create(&out).map_err(io(&out))?;
            write_csv(BufWriter::new(file), &records).map_err(io(&out))?;
            println!("{} layers written to {}", records.len(), out.display());
            Ok(())
        }
        Cmd::Dataset { seed, n, out, config } => {
            let spec: TaskSpec = load_config(config.as_deref())?.task;
            let samples: Vec<_> = (0..n).map(|i| dataset_sample(seed, i, &spec)).collect();
            let file = File::create(&out).map_err(io(&out))?;
            write_dataset(BufWriter::new(file), &samples).map_err(Error::from)?;
            println!("{n} samples written to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (1, m),
                Failure::Numerical(m) => (2, m),
                Failure::Io(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
