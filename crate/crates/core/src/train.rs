//! Training loop, evaluation and the two-phase recipe.
//!
//! Phase `pretrain` trains backbone, text projection and head with the memory
//! loop off. Phase `memory` then freezes the backbone (when configured) and
//! trains the memory modules, text projection and head at `lr_max` with the
//! alignment term. A `control` run is the same second phase with the memory
//! loop off, so only the text projection and head move.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::Config;
use crate::error::{io_err, Error, Result};
use crate::model::{ModelInput, ScvmModel};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{Binder, ParamGroup, ParamStore};
use crate::scvm::InitScheme;
use crate::synth::{dataset_sample, Family, ProxyLanguageSpace};
use crate::tensor::{Real, Tensor};
use crate::Graph;

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub step: u64,
    pub lr: f64,
    pub loss_task: f64,
    /// Absent when the memory loop is off.
    pub loss_align: Option<f64>,
    pub loss_total: f64,
    pub lambda: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Memory,
    Control,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Memory => "memory",
            Phase::Control => "control",
        }
    }

    /// Offset mixed into the dataset seed so phases draw distinct batches,
    /// while the memory and control phases see identical ones.
    fn stream(self) -> u64 {
        match self {
            Phase::Pretrain => 0x9e37_79b9_7f4a_7c15,
            Phase::Memory | Phase::Control => 0x632b_e59b_d9b4_e019,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub family: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub families: Vec<FamilyScore>,
    /// Mean alignment loss when the memory loop is on.
    pub mean_align: Option<f64>,
}

impl EvalReport {
    pub fn family(&self, f: Family) -> &FamilyScore {
        self.families
            .iter()
            .find(|s| s.family == f.name())
            .expect("every family is reported")
    }
}

/// Training state for one run.
pub struct Trainer<T> {
    pub cfg: Config,
    pub model: ScvmModel,
    pub store: ParamStore<T>,
    pub language: ProxyLanguageSpace,
    pub optimizer: Option<AdamW<T>>,
    /// Steps taken in the current phase.
    pub step: u64,
    pub metrics: Vec<MetricsRecord>,
    out_dir: Option<PathBuf>,
    metrics_out: Option<BufWriter<File>>,
}

/// Rebuilds the model described by a checkpoint and checks that the stored
/// parameters match its layout name for name.
pub fn restore(ck: &Checkpoint) -> Result<(ScvmModel, ParamStore<f32>)> {
    let (model, fresh) = ScvmModel::build(&ck.config.model, InitScheme::Identity, 0)?;
    let layout_ok = fresh.len() == ck.params.len()
        && fresh
            .iter()
            .zip(ck.params.iter())
            .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
    if !layout_ok {
        return Err(CheckpointError::Malformed("parameters do not match the configured model".into()).into());
    }
    Ok((model, ck.params.clone()))
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = ScvmModel::build(&cfg.model, InitScheme::Identity, cfg.train.seed)?;
        let language = ProxyLanguageSpace::new(cfg.task.language_seed, cfg.model.scvm.d_llm);
        Ok(Self {
            cfg,
            model,
            store: store.cast(),
            language,
            optimizer: None,
            step: 0,
            metrics: Vec::new(),
            out_dir: None,
            metrics_out: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, store) = restore(ck)?;
        let language = ProxyLanguageSpace::new(ck.config.task.language_seed, ck.config.model.scvm.d_llm);
        Ok(Self {
            cfg: ck.config.clone(),
            model,
            store: store.cast(),
            language,
            optimizer: ck.optimizer.as_ref().map(|o| AdamW {
                cfg: o.cfg,
                step: o.step,
                m: o.m.iter().map(Tensor::cast).collect(),
                v: o.v.iter().map(Tensor::cast).collect(),
            }),
            step: ck.step,
            metrics: Vec::new(),
            out_dir: None,
            metrics_out: None,
        })
    }

    /// In-memory copy of the current state without output files or metrics,
    /// for branching runs from a shared starting point.
    pub fn fork(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            model: self.model.clone(),
            store: self.store.clone(),
            language: self.language.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            metrics: Vec::new(),
            out_dir: None,
            metrics_out: None,
        }
    }

    /// Writes `metrics.jsonl` and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("metrics.jsonl");
        let file = File::create(&path).map_err(io_err(&path))?;
        self.metrics_out = Some(BufWriter::new(file));
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut config = self.cfg.clone();
        config.model = self.model.cfg.clone();
        Checkpoint {
            config,
            step: self.step,
            params: self.store.cast(),
            optimizer: self.optimizer.as_ref().map(|o| AdamW {
                cfg: o.cfg,
                step: o.step,
                m: o.m.iter().map(Tensor::cast).collect(),
                v: o.v.iter().map(Tensor::cast).collect(),
            }),
        }
    }

    fn save(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join(name);
            self.checkpoint().save(&path).map_err(|e| match e {
                CheckpointError::Io(source) => Error::Io { path, source },
                e => e.into(),
            })?;
        }
        Ok(())
    }

    fn emit(&mut self, rec: MetricsRecord) -> Result<()> {
        if let (Some(out), Some(dir)) = (&mut self.metrics_out, &self.out_dir) {
            let path = dir.join("metrics.jsonl");
            let line = serde_json::to_string(&rec).expect("metrics serialise");
            writeln!(out, "{line}")
                .and_then(|_| out.flush())
                .map_err(io_err(path))?;
        }
        self.metrics.push(rec);
        Ok(())
    }

    /// Sets trainable groups and the memory switch for a phase.
    fn configure(&mut self, phase: Phase) {
        let s = &mut self.store;
        let freeze_backbone = self.cfg.model.backbone.freeze_backbone;
        for g in [
            ParamGroup::Backbone,
            ParamGroup::Summary,
            ParamGroup::Text,
            ParamGroup::Tmsu,
            ParamGroup::Tag,
            ParamGroup::Head,
            ParamGroup::Align,
        ] {
            let trainable = match (phase, g) {
                (_, ParamGroup::Head | ParamGroup::Text) => true,
                (Phase::Pretrain, ParamGroup::Backbone) => true,
                (Phase::Pretrain, _) => false,
                (_, ParamGroup::Backbone) => !freeze_backbone,
                (Phase::Memory, _) => true,
                (Phase::Control, _) => false,
            };
            s.set_frozen(g, !trainable);
        }
        self.model.cfg.scvm.enabled = match phase {
            Phase::Pretrain | Phase::Control => false,
            Phase::Memory => self.cfg.model.scvm.enabled,
        };
    }

    fn input(&self, seed: u64, index: u64) -> Result<ModelInput<T>> {
        let sample = dataset_sample(seed, index, &self.cfg.task);
        Ok(ModelInput::from_sample(&sample, &self.language)?.cast())
    }

    /// One optimisation step over a batch; returns the metrics record.
    fn train_step(&mut self, phase: Phase, lr: f64, lambda: f64) -> Result<MetricsRecord> {
        let b = self.cfg.train.batch_size;
        let seed = self.cfg.train.seed ^ phase.stream();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.store.len()];
        let (mut task, mut align, mut total) = (0.0, 0.0, 0.0);
        let mut has_align = false;
        for k in 0..b {
            let input = self.input(seed, self.step * b as u64 + k as u64)?;
            let mut g = Graph::new();
            let mut p = Binder::new(&self.store);
            let f = self.model.forward(&mut g, &mut p, &input, lambda)?;
            let align_var = match f.loss_align {
                Some(a) => Some(a),
                None => self
                    .model
                    .alignment(&mut g, &mut p, &f.encoded, &input.answer_embedding)?,
            };
            g.backward(f.loss_total)?;
            task += g.value(f.loss_task).item().as_f64();
            total += g.value(f.loss_total).item().as_f64();
            if let Some(a) = align_var {
                align += g.value(a).item().as_f64();
                has_align = true;
            }
            // Sum in sample order for a deterministic reduction.
            for (acc, grad) in grads.iter_mut().zip(p.grads(&g)) {
                match (acc.as_mut(), grad) {
                    (Some(acc), Some(gr)) => acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, &x)| *a = *a + x),
                    (None, Some(gr)) => *acc = Some(gr),
                    _ => {}
                }
            }
        }
        let inv = T::lit(1.0 / b as f64);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * inv);
        }
        let opt = self.optimizer.as_mut().expect("optimizer set by run_phase");
        opt.step(&mut self.store, &grads, lr)?;
        self.step += 1;
        let n = b as f64;
        let loss_align = has_align.then_some(align / n);
        Ok(MetricsRecord {
            phase: phase.name().into(),
            step: self.step,
            lr,
            loss_task: task / n,
            loss_align,
            // λ·align is added per sample, so the batch means satisfy the
            // logged identity up to rounding.
            loss_total: total / n,
            lambda,
            eval_accuracy: None,
        })
    }

    /// Runs one phase from a fresh optimizer.
    pub fn run_phase(&mut self, phase: Phase) -> Result<()> {
        let t = self.cfg.train.clone();
        self.configure(phase);
        let (steps, lr_max, lambda) = match phase {
            Phase::Pretrain => (t.pretrain_steps, t.pretrain_lr, 0.0),
            Phase::Memory => (t.total_steps, t.lr_max, t.lambda),
            Phase::Control => (t.total_steps, t.lr_max, 0.0),
        };
        let warmup = if steps == t.total_steps {
            t.warmup_steps
        } else {
            steps * 3 / 100
        };
        self.optimizer = Some(AdamW::new(
            AdamWConfig {
                betas: t.betas,
                eps: t.eps,
                weight_decay: t.weight_decay,
            },
            &self.store,
        ));
        self.step = 0;
        for s in 0..steps {
            let lr = cosine_lr(s + 1, lr_max, warmup, steps);
            let mut rec = match self.train_step(phase, lr, lambda) {
                Ok(r) => r,
                Err(e) if e.is_numerical() => {
                    // The optimizer rejects non-finite gradients before it
                    // touches any parameter, so the current state is good.
                    self.save("last-good.scvm")?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let done = s + 1 == steps;
            if t.eval_every > 0 && (self.step as usize % t.eval_every == 0 || done) {
                rec.eval_accuracy = Some(self.evaluate(t.eval_seed, t.eval_samples)?.accuracy);
            }
            self.emit(rec)?;
            if t.checkpoint_every > 0 && self.step as usize % t.checkpoint_every == 0 {
                self.save(&format!("{}-{:06}.scvm", phase.name(), self.step))?;
            }
        }
        self.save(&format!("{}-final.scvm", phase.name()))
    }

    /// The configured recipe: optional pretraining, then the memory phase.
    pub fn run(&mut self) -> Result<()> {
        if self.cfg.train.pretrain_baseline {
            self.run_phase(Phase::Pretrain)?;
        }
        self.run_phase(Phase::Memory)?;
        self.save("final.scvm")
    }

    /// Accuracy on samples `0..n` of dataset `seed`. Never mutates parameters.
    pub fn evaluate(&self, seed: u64, n: usize) -> Result<EvalReport> {
        evaluate(&self.model, &self.store, &self.language, &self.cfg, seed, n)
    }
}

/// Accuracy with a per-family breakdown and, when the memory loop runs, the
/// mean alignment loss.
pub fn evaluate<T: Real>(
    model: &ScvmModel,
    store: &ParamStore<T>,
    language: &ProxyLanguageSpace,
    cfg: &Config,
    seed: u64,
    n: usize,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::Config(crate::config::ConfigError::Invalid(
            "evaluation needs n ≥ 1".into(),
        )));
    }
    let mut correct = [0usize; 3];
    let mut total = [0usize; 3];
    let mut align = 0.0;
    let mut has_align = false;
    for i in 0..n as u64 {
        let sample = dataset_sample(seed, i, &cfg.task);
        let input: ModelInput<T> = ModelInput::from_sample(&sample, language)?.cast();
        let mut g = Graph::new();
        let mut p = Binder::new(store);
        let enc = model.encode(&mut g, &mut p, &input.image, &input.question, None)?;
        let proj = model.projector.bind(&mut g, &mut p)?;
        let head = model.head.bind(&mut g, &mut p)?;
        let logits = crate::objective::task_logits(&mut g, enc.features, enc.t, &proj, &head)?;
        let data = g.value(logits).data();
        let pred = (0..data.len()).fold(0, |best, j| if data[j] > data[best] { j } else { best });
        let f = Family::ALL.iter().position(|&f| f == sample.family).unwrap();
        total[f] += 1;
        if pred == input.answer {
            correct[f] += 1;
        }
        if let Some(a) = model.alignment(&mut g, &mut p, &enc, &input.answer_embedding)? {
            align += g.value(a).item().as_f64();
            has_align = true;
        }
    }
    let families = Family::ALL
        .iter()
        .enumerate()
        .map(|(k, f)| FamilyScore {
            family: f.name().into(),
            correct: correct[k],
            total: total[k],
            accuracy: if total[k] == 0 {
                0.0
            } else {
                correct[k] as f64 / total[k] as f64
            },
        })
        .collect();
    Ok(EvalReport {
        n,
        accuracy: correct.iter().sum::<usize>() as f64 / n as f64,
        families,
        mean_align: has_align.then_some(align / n as f64),
    })
}
