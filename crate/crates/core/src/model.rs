//! The full model: backbone with the memory loop, text projection, task
//! head and alignment term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::objective::{self, HeadParams, ProjectorParams, ProjectorWeights};
use crate::params::{xavier_uniform, Binder, ParamGroup, ParamId, ParamStore};
use crate::scvm::{
    multi_view_summarize, project_text, tag_modulate, tmsu_update, InitScheme, LayerSummary, TagParams, TagStep,
    TmsuParams, TmsuStep,
};
use crate::synth::{ProxyLanguageSpace, Sample};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct ScvmModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    /// Per-layer summary projections `W_y^l`, `[3D, D]`.
    pub summarizers: Vec<ParamId>,
    /// Text projection `W_t`, `[D_llm, D]`.
    pub text: ParamId,
    pub tmsu: TmsuParams,
    pub tag: TagParams,
    pub projector: ProjectorParams,
    /// Separate alignment projector, present when the projector is not shared.
    pub align_projector: Option<ProjectorParams>,
    pub head: HeadParams,
}

/// One sample in model form.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// `H×W×C`
    pub image: Tensor<T>,
    /// Question hidden states, `T_q × D_llm`.
    pub question: Tensor<T>,
    pub answer: usize,
    /// Answer embedding `a`, length `D_llm`.
    pub answer_embedding: Tensor<T>,
}

impl ModelInput<f32> {
    pub fn from_sample(sample: &Sample, language: &ProxyLanguageSpace) -> Result<Self> {
        Ok(Self {
            image: sample.image.clone(),
            question: language.embed_question(&sample.question_tokens)?,
            answer: sample.answer_id as usize,
            answer_embedding: language.embed_answer(sample.answer_id)?.a,
        })
    }
}

impl<T: Real> ModelInput<T> {
    pub fn cast<U: Real>(&self) -> ModelInput<U> {
        ModelInput {
            image: self.image.cast(),
            question: self.question.cast(),
            answer: self.answer,
            answer_embedding: self.answer_embedding.cast(),
        }
    }
}

/// Per-layer intermediate values.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    /// Block output before modulation.
    pub x: Var,
    /// Features passed to the next block.
    pub x_hat: Var,
    pub summary: LayerSummary,
    pub tmsu: TmsuStep,
    pub tag: Option<TagStep>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub features: Var,
    /// Text vector `t`.
    pub t: Var,
    /// Final memory `c^L`; absent when the memory loop is disabled.
    pub memory: Option<Var>,
    pub traces: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub encoded: Encoded,
    pub logits: Var,
    pub loss_task: Var,
    pub loss_align: Option<Var>,
    pub loss_total: Var,
}

impl ScvmModel {
    /// Allocates every parameter, including the memory modules even when
    /// they are switched off, so the parameter layout never depends on the
    /// ablation flags.
    pub fn build(cfg: &ModelConfig, scheme: InitScheme, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&cfg.backbone, &mut store, &mut rng)?;
        let projector = ProjectorParams::new(cfg, &mut store, &mut rng, ParamGroup::Head, "head.proj")?;
        let head = HeadParams::new(cfg, &mut store, &mut rng)?;
        let (d, dl) = (cfg.backbone.dim, cfg.scvm.d_llm);
        let text = store.add("text.w", xavier_uniform(&mut rng, dl, d), ParamGroup::Text, true)?;
        let summarizers = (0..cfg.backbone.layers)
            .map(|l| {
                let w = xavier_uniform(&mut rng, 3 * d, d);
                store.add(format!("summary.{l}.w"), w, ParamGroup::Summary, true)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tmsu = TmsuParams::new(cfg, &mut store, &mut rng, scheme)?;
        let tag = TagParams::new(cfg, &mut store, &mut rng, scheme)?;
        let align_projector = if cfg.scvm.share_projector {
            None
        } else {
            Some(ProjectorParams::new(
                cfg,
                &mut store,
                &mut rng,
                ParamGroup::Align,
                "align.proj",
            )?)
        };
        if cfg.backbone.freeze_backbone {
            store.set_frozen(ParamGroup::Backbone, true);
        }
        let model = Self {
            cfg: cfg.clone(),
            backbone,
            summarizers,
            text,
            tmsu,
            tag,
            projector,
            align_projector,
            head,
        };
        Ok((model, store))
    }

    /// Runs the backbone with the memory loop. `initial_memory` overrides
    /// the zero start state `c^0`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        image: &Tensor<T>,
        question: &Tensor<T>,
        initial_memory: Option<&Tensor<T>>,
    ) -> Result<Encoded> {
        let s = &self.cfg.scvm;
        let d = self.cfg.backbone.dim;
        let q = g.constant(question.clone())?;
        let w_t = p.param(g, self.text)?;
        let t = project_text(g, q, w_t)?;
        let mut x = self.backbone.patch_embed(g, p, image)?;
        if !s.enabled {
            for l in 0..self.cfg.backbone.layers {
                x = self.backbone.block(g, p, l, x)?.out;
            }
            return Ok(Encoded {
                features: x,
                t,
                memory: None,
                traces: Vec::new(),
            });
        }

        let t_mem = if s.text_conditioning {
            t
        } else {
            g.constant(Tensor::zeros(&[d]))?
        };
        let mut c = match initial_memory {
            Some(c0) => g.constant(c0.clone())?,
            None => g.constant(Tensor::zeros(&[d]))?,
        };
        let tmsu = self.tmsu.bind(g, p)?;
        let tag = if s.tag { Some(self.tag.bind(g, p)?) } else { None };
        let mut traces = Vec::with_capacity(self.cfg.backbone.layers);
        for (l, &w_y) in self.summarizers.iter().enumerate() {
            let block = self.backbone.block(g, p, l, x)?.out;
            let w_y = p.param(g, w_y)?;
            let summary = multi_view_summarize(g, block, w_y)?;
            let step = tmsu_update(g, summary.y, t_mem, c, &tmsu)?;
            if g.value(step.c).first_non_finite().is_some() {
                return Err(Error::NonFiniteMemory { layer: l + 1 });
            }
            c = step.c;
            let tag_step = match &tag {
                Some(w) => Some(tag_modulate(g, block, c, w)?),
                None => None,
            };
            x = tag_step.map_or(block, |s| s.x_hat);
            traces.push(LayerTrace {
                x: block,
                x_hat: x,
                summary,
                tmsu: step,
                tag: tag_step,
            });
        }
        Ok(Encoded {
            features: x,
            t,
            memory: Some(c),
            traces,
        })
    }

    fn align_projector<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>) -> Result<ProjectorWeights> {
        Ok(self.align_projector.as_ref().unwrap_or(&self.projector).bind(g, p)?)
    }

    /// Forward pass for one sample with alignment weight `lambda`. The
    /// alignment term is only built when the memory loop runs and `lambda > 0`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        input: &ModelInput<T>,
        lambda: f64,
    ) -> Result<Forward> {
        if input.answer >= self.cfg.answers {
            return Err(Error::InvalidAnswer {
                id: input.answer,
                len: self.cfg.answers,
            });
        }
        let encoded = self.encode(g, p, &input.image, &input.question, None)?;
        let proj = self.projector.bind(g, p)?;
        let head = self.head.bind(g, p)?;
        let logits = objective::task_logits(g, encoded.features, encoded.t, &proj, &head)?;
        let loss_task = g.cross_entropy(logits, input.answer)?;
        let loss_align = match encoded.memory {
            Some(c) if lambda > 0.0 => {
                let a = g.constant(input.answer_embedding.clone())?;
                let w = self.align_projector(g, p)?;
                Some(objective::alignment_loss(g, c, a, &w)?)
            }
            _ => None,
        };
        let loss_total = objective::total_loss(g, loss_task, loss_align, lambda)?;
        Ok(Forward {
            encoded,
            logits,
            loss_task,
            loss_align,
            loss_total,
        })
    }

    /// Alignment loss of an encoded sample regardless of `lambda`, for
    /// monitoring.
    pub fn alignment<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        encoded: &Encoded,
        answer_embedding: &Tensor<T>,
    ) -> Result<Option<Var>> {
        let Some(c) = encoded.memory else {
            return Ok(None);
        };
        let a = g.constant(answer_embedding.clone())?;
        let w = self.align_projector(g, p)?;
        Ok(Some(objective::alignment_loss(g, c, a, &w)?))
    }

    /// Predicted answer id.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, input: &ModelInput<T>) -> Result<usize> {
        let mut g = Graph::new();
        let mut p = Binder::new(store);
        let encoded = self.encode(&mut g, &mut p, &input.image, &input.question, None)?;
        let proj = self.projector.bind(&mut g, &mut p)?;
        let head = self.head.bind(&mut g, &mut p)?;
        let logits = objective::task_logits(&mut g, encoded.features, encoded.t, &proj, &head)?;
        let data = g.value(logits).data();
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn set_enabled(&mut self, on: bool) {
        self.cfg.scvm.enabled = on;
    }
}
