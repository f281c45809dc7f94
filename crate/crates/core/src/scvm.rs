//! Cross-layer memory: layer summaries, the text vector, the gated memory
//! cell (TMSU) and the token-adaptive gate (TAG).
//!
//! The functions here operate on graph variables so they can be checked in
//! isolation; the `*Params` structs own the parameter ids and bind them.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{ones, zeros};
use crate::config::ModelConfig;
use crate::params::{uniform, xavier_uniform, Binder, ParamError, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// How the memory modules are initialised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Forget bias 1, zero input/candidate biases, exact-zero TAG output
    /// layer, gate bias −2.2. The modulated encoder starts as the identity.
    #[default]
    Identity,
    /// Xavier everywhere, biases small random. Used by gradient checks where
    /// exact zeros would hide parts of the graph.
    Random,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerSummary {
    pub mu: Var,
    pub nu: Var,
    pub cls: Var,
    pub y: Var,
}

/// `y = [mean; max; cls] · W_y`, with `W_y` stored `[3D, D]`.
pub fn multi_view_summarize<T: Real>(g: &mut Graph<T>, x: Var, w_y: Var) -> Result<LayerSummary> {
    let s = g.shape(x);
    if s.len() != 2 || s[0] == 0 {
        return Err(TensorError::InvalidShape {
            op: "multi_view_summarize",
            shape: s.to_vec(),
            reason: "expected a non-empty N×D token grid".into(),
        });
    }
    let mu = g.mean_pool(x)?;
    let nu = g.max_pool(x)?;
    let cls = g.select_row(x, 0)?;
    let u = g.concat(&[mu, nu, cls])?;
    let y = g.matmul(u, w_y)?;
    Ok(LayerSummary { mu, nu, cls, y })
}

/// `t = mean(t_q) · W_t`, with `t_q` of shape `T_q × D_llm` and `W_t` `[D_llm, D]`.
pub fn project_text<T: Real>(g: &mut Graph<T>, t_q: Var, w_t: Var) -> Result<Var> {
    let s = g.shape(t_q);
    if s.len() != 2 || s[0] == 0 {
        return Err(TensorError::InvalidShape {
            op: "project_text",
            shape: s.to_vec(),
            reason: "expected a non-empty question matrix".into(),
        });
    }
    let pooled = g.mean_pool(t_q)?;
    g.matmul(pooled, w_t)
}

/// Bound TMSU weights. Matrices are `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct TmsuWeights {
    pub ln_g: Var,
    pub ln_b: Var,
    /// `[3D, d_r]`
    pub w1: Var,
    pub wc: Var,
    pub bc: Var,
    pub wi: Var,
    pub bi: Var,
    pub wf: Var,
    pub bf: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TmsuStep {
    pub c: Var,
    pub s: Var,
    pub cand: Var,
    pub input_gate: Var,
    pub forget_gate: Var,
}

/// One gated memory update:
/// `s = relu([LN(c_prev); y; t] · W_1)`, `c = f ⊙ c_prev + i ⊙ tanh(s·W_c + b_c)`.
pub fn tmsu_update<T: Real>(g: &mut Graph<T>, y: Var, t: Var, c_prev: Var, w: &TmsuWeights) -> Result<TmsuStep> {
    for v in [t, c_prev] {
        if g.shape(v) != g.shape(y) || g.shape(y).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "tmsu_update",
                lhs: g.shape(y).to_vec(),
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    let c_hat = g.layer_norm_affine(c_prev, w.ln_g, w.ln_b)?;
    let u = g.concat(&[c_hat, y, t])?;
    let s = g.matmul(u, w.w1)?;
    let s = g.relu(s)?;
    let cand = g.linear(s, w.wc, Some(w.bc))?;
    let cand = g.tanh(cand)?;
    let input_gate = g.linear(s, w.wi, Some(w.bi))?;
    let input_gate = g.sigmoid(input_gate)?;
    let forget_gate = g.linear(s, w.wf, Some(w.bf))?;
    let forget_gate = g.sigmoid(forget_gate)?;
    let keep = g.mul(forget_gate, c_prev)?;
    let write = g.mul(input_gate, cand)?;
    let c = g.add(keep, write)?;
    Ok(TmsuStep {
        c,
        s,
        cand,
        input_gate,
        forget_gate,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TagWeights {
    pub ln_g: Var,
    pub ln_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    /// `[D, 1]`
    pub gate_w: Var,
    /// `[1]`
    pub gate_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TagStep {
    pub x_hat: Var,
    pub h: Var,
    /// Per-token gate, `N×1`.
    pub alpha: Var,
    pub delta: Var,
}

/// `h = LN(x + c)`, `Δ = tanh(MLP(h))`, `α = σ(h·W_h + b)`, `x̂ = x + α ⊙ Δ`.
pub fn tag_modulate<T: Real>(g: &mut Graph<T>, x: Var, c: Var, w: &TagWeights) -> Result<TagStep> {
    let (sx, sc) = (g.shape(x), g.shape(c));
    if sx.len() != 2 || sc.len() != 1 || sx[1] != sc[0] {
        return Err(TensorError::ShapeMismatch {
            op: "tag_modulate",
            lhs: sx.to_vec(),
            rhs: sc.to_vec(),
        });
    }
    let joint = g.add(x, c)?;
    let h = g.layer_norm_affine(joint, w.ln_g, w.ln_b)?;
    let hidden = g.linear(h, w.fc1_w, Some(w.fc1_b))?;
    let hidden = g.relu(hidden)?;
    let delta = g.linear(hidden, w.fc2_w, Some(w.fc2_b))?;
    let delta = g.tanh(delta)?;
    let alpha = g.linear(h, w.gate_w, Some(w.gate_b))?;
    let alpha = g.sigmoid(alpha)?;
    let step = g.mul(delta, alpha)?;
    let x_hat = g.add(x, step)?;
    Ok(TagStep { x_hat, h, alpha, delta })
}

#[derive(Clone, Debug)]
pub struct TmsuParams {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w1: ParamId,
    pub wc: ParamId,
    pub bc: ParamId,
    pub wi: ParamId,
    pub bi: ParamId,
    pub wf: ParamId,
    pub bf: ParamId,
}

impl TmsuParams {
    pub fn new(
        cfg: &ModelConfig,
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        scheme: InitScheme,
    ) -> Result<Self, ParamError> {
        let (d, r) = (cfg.backbone.dim, cfg.bottleneck());
        let grp = ParamGroup::Tmsu;
        let bias = |rng: &mut ChaCha8Rng, v: f64| match scheme {
            InitScheme::Identity => Tensor::full(&[d], v as f32),
            InitScheme::Random => uniform(rng, &[d], 0.5),
        };
        let (ln_g, ln_b) = match scheme {
            InitScheme::Identity => (ones(d), zeros(d)),
            InitScheme::Random => (uniform(rng, &[d], 0.3).map(|x| x + 1.0), uniform(rng, &[d], 0.3)),
        };
        let ln_g = store.add("tmsu.ln.g", ln_g, grp, false)?;
        let ln_b = store.add("tmsu.ln.b", ln_b, grp, false)?;
        let w1 = store.add("tmsu.w1", xavier_uniform(rng, 3 * d, r), grp, true)?;
        let wc = store.add("tmsu.wc", xavier_uniform(rng, r, d), grp, true)?;
        let bc = store.add("tmsu.bc", bias(rng, 0.0), grp, false)?;
        let wi = store.add("tmsu.wi", xavier_uniform(rng, r, d), grp, true)?;
        let bi = store.add("tmsu.bi", bias(rng, 0.0), grp, false)?;
        let wf = store.add("tmsu.wf", xavier_uniform(rng, r, d), grp, true)?;
        let bf = store.add("tmsu.bf", bias(rng, cfg.scvm.forget_bias), grp, false)?;
        Ok(Self {
            ln_g,
            ln_b,
            w1,
            wc,
            bc,
            wi,
            bi,
            wf,
            bf,
        })
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>) -> Result<TmsuWeights> {
        Ok(TmsuWeights {
            ln_g: p.param(g, self.ln_g)?,
            ln_b: p.param(g, self.ln_b)?,
            w1: p.param(g, self.w1)?,
            wc: p.param(g, self.wc)?,
            bc: p.param(g, self.bc)?,
            wi: p.param(g, self.wi)?,
            bi: p.param(g, self.bi)?,
            wf: p.param(g, self.wf)?,
            bf: p.param(g, self.bf)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TagParams {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

impl TagParams {
    pub fn new(
        cfg: &ModelConfig,
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        scheme: InitScheme,
    ) -> Result<Self, ParamError> {
        let d = cfg.backbone.dim;
        let s = &cfg.scvm;
        let grp = ParamGroup::Tag;
        let (ln_g, ln_b, fc1_w, fc1_b, fc2_w, fc2_b, gate_b) = match scheme {
            InitScheme::Identity => (
                ones(d),
                zeros(d),
                uniform(rng, &[d, d], s.tag_hidden_init as f32),
                zeros(d),
                Tensor::zeros(&[d, d]),
                zeros(d),
                Tensor::full(&[1], s.gate_bias as f32),
            ),
            InitScheme::Random => (
                uniform(rng, &[d], 0.3).map(|x| x + 1.0),
                uniform(rng, &[d], 0.3),
                xavier_uniform(rng, d, d),
                uniform(rng, &[d], 0.3),
                xavier_uniform(rng, d, d),
                uniform(rng, &[d], 0.3),
                uniform(rng, &[1], 0.5),
            ),
        };
        // Near-zero under the identity scheme so every token starts at α ≈ σ(b).
        let gate_w = match scheme {
            InitScheme::Identity => uniform(rng, &[d, 1], s.tag_hidden_init as f32),
            InitScheme::Random => xavier_uniform(rng, d, 1),
        };
        Ok(Self {
            ln_g: store.add("tag.ln.g", ln_g, grp, false)?,
            ln_b: store.add("tag.ln.b", ln_b, grp, false)?,
            fc1_w: store.add("tag.fc1.w", fc1_w, grp, true)?,
            fc1_b: store.add("tag.fc1.b", fc1_b, grp, false)?,
            fc2_w: store.add("tag.fc2.w", fc2_w, grp, true)?,
            fc2_b: store.add("tag.fc2.b", fc2_b, grp, false)?,
            gate_w: store.add("tag.gate.w", gate_w, grp, true)?,
            gate_b: store.add("tag.gate.b", gate_b, grp, false)?,
        })
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>) -> Result<TagWeights> {
        Ok(TagWeights {
            ln_g: p.param(g, self.ln_g)?,
            ln_b: p.param(g, self.ln_b)?,
            fc1_w: p.param(g, self.fc1_w)?,
            fc1_b: p.param(g, self.fc1_b)?,
            fc2_w: p.param(g, self.fc2_w)?,
            fc2_b: p.param(g, self.fc2_b)?,
            gate_w: p.param(g, self.gate_w)?,
            gate_b: p.param(g, self.gate_b)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::gradcheck::{grad_check, GRAD_TOLERANCE};

    fn seq(shape: &[usize], k: f64, off: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((i as f64 + off) * k).sin()).collect();
        Tensor::from_f64(shape, &data).unwrap()
    }

    fn params<T: Real>(scheme: InitScheme) -> (ModelConfig, ParamStore<T>, TmsuParams, TagParams) {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tmsu = TmsuParams::new(&cfg, &mut store, &mut rng, scheme).unwrap();
        let tag = TagParams::new(&cfg, &mut store, &mut rng, scheme).unwrap();
        (cfg, store.cast(), tmsu, tag)
    }

    fn eye_block(d: usize) -> Tensor<f64> {
        let mut t = Tensor::<f64>::zeros(&[3 * d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    #[test]
    fn constant_tokens_give_identical_views() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(Tensor::from_f64(&[3, 2], &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap())
            .unwrap();
        let w = g.constant(eye_block(2)).unwrap();
        let s = multi_view_summarize(&mut g, x, w).unwrap();
        for v in [s.mu, s.nu, s.cls] {
            assert_eq!(g.value(v).data(), &[1.5, -2.0]);
        }
    }

    #[test]
    fn block_identity_summary_is_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(seq(&[4, 3], 0.9, 0.0)).unwrap();
        let w = g.constant(eye_block(3)).unwrap();
        let s = multi_view_summarize(&mut g, x, w).unwrap();
        assert!(g.value(s.y).bit_eq(g.value(s.mu)));
    }

    #[test]
    fn empty_grid_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(eye_block(2)).unwrap();
        let x = g.constant(Tensor::from_parts(vec![0, 2], vec![])).unwrap();
        assert!(multi_view_summarize(&mut g, x, w).is_err());
        assert!(project_text(&mut g, x, w).is_err());
    }

    #[test]
    fn single_question_row_and_zero_projection() {
        let mut g = Graph::<f64>::new();
        let tq = g.constant(seq(&[1, 4], 0.4, 1.0)).unwrap();
        let mut eye = Tensor::<f64>::zeros(&[4, 4]);
        (0..4).for_each(|i| eye.data_mut()[i * 5] = 1.0);
        let w = g.constant(eye).unwrap();
        let t = project_text(&mut g, tq, w).unwrap();
        assert_eq!(g.value(t).data(), g.value(tq).data());
        let z = g.constant(Tensor::zeros(&[4, 3])).unwrap();
        let t = project_text(&mut g, tq, z).unwrap();
        assert!(g.value(t).data().iter().all(|&x| x == 0.0));
    }

    fn zero_drive<T: Real>(store: &mut ParamStore<T>, tmsu: &TmsuParams) {
        let shape = store.tensor(tmsu.w1).shape().to_vec();
        store.set(tmsu.w1, Tensor::zeros(&shape)).unwrap();
    }

    #[test]
    fn zero_drive_decays_memory_by_sigmoid_one() {
        let (cfg, mut store, tmsu, _) = params::<f64>(InitScheme::Identity);
        zero_drive(&mut store, &tmsu);
        let d = cfg.backbone.dim;
        let mut g = Graph::new();
        let mut p = Binder::new(&store);
        let w = tmsu.bind(&mut g, &mut p).unwrap();
        let c0 = g.constant(seq(&[d], 1.7, 0.5)).unwrap();
        let y = g.constant(seq(&[d], 0.3, 2.0)).unwrap();
        let t = g.constant(seq(&[d], 0.8, 4.0)).unwrap();
        let step = tmsu_update(&mut g, y, t, c0, &w).unwrap();
        for (&c, &c_prev) in g.value(step.c).data().iter().zip(g.value(c0).data()) {
            assert!((c - 0.7311 * c_prev).abs() < 1e-3);
        }
        assert!(g.value(step.input_gate).data().iter().all(|&i| i == 0.5));
        assert!(g.value(step.cand).data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn saturated_gates_hold_memory() {
        let (cfg, mut store, tmsu, _) = params::<f64>(InitScheme::Identity);
        let d = cfg.backbone.dim;
        for id in [tmsu.w1, tmsu.wc, tmsu.wi, tmsu.wf] {
            let shape = store.tensor(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        store.set(tmsu.bf, Tensor::full(&[d], 20.0)).unwrap();
        store.set(tmsu.bi, Tensor::full(&[d], -20.0)).unwrap();
        let mut g = Graph::new();
        let mut p = Binder::new(&store);
        let w = tmsu.bind(&mut g, &mut p).unwrap();
        let c0 = g.constant(seq(&[d], 1.1, 0.0)).unwrap();
        let y = g.constant(seq(&[d], 0.2, 1.0)).unwrap();
        let step = tmsu_update(&mut g, y, y, c0, &w).unwrap();
        assert!(g.value(step.c).max_abs_diff(g.value(c0)) < 1e-6);
    }

    #[test]
    fn tmsu_rejects_mismatched_vectors() {
        let (_, store, tmsu, _) = params::<f64>(InitScheme::Identity);
        let mut g = Graph::new();
        let mut p = Binder::new(&store);
        let w = tmsu.bind(&mut g, &mut p).unwrap();
        let a = g.constant(Tensor::zeros(&[8])).unwrap();
        let b = g.constant(Tensor::zeros(&[7])).unwrap();
        assert!(matches!(
            tmsu_update(&mut g, a, b, a, &w),
            Err(TensorError::ShapeMismatch { op: "tmsu_update", .. })
        ));
    }

    #[test]
    fn identity_init_tag_is_identity_with_gate_near_tenth() {
        let (cfg, store, _, tag) = params::<f32>(InitScheme::Identity);
        let d = cfg.backbone.dim;
        let mut g = Graph::new();
        let mut p = Binder::new(&store);
        let w = tag.bind(&mut g, &mut p).unwrap();
        let x = g.constant(seq(&[5, d], 2.3, 0.0).cast()).unwrap();
        let c = g.constant(seq(&[d], 0.6, 9.0).cast()).unwrap();
        let out = tag_modulate(&mut g, x, c, &w).unwrap();
        assert!(g.value(out.x_hat).bit_eq(g.value(x)));
        assert_eq!(g.shape(out.alpha), &[5, 1]);
    }

    #[test]
    fn zero_gate_weights_give_sigmoid_of_bias() {
        let (cfg, mut store, _, tag) = params::<f64>(InitScheme::Identity);
        let d = cfg.backbone.dim;
        store.set(tag.gate_w, Tensor::zeros(&[d, 1])).unwrap();
        let mut g = Graph::new();
        let mut p = Binder::new(&store);
        let w = tag.bind(&mut g, &mut p).unwrap();
        let x = g.constant(seq(&[5, d], 3.1, 1.0)).unwrap();
        let c = g.constant(seq(&[d], 0.7, 2.0)).unwrap();
        let out = tag_modulate(&mut g, x, c, &w).unwrap();
        for &a in g.value(out.alpha).data() {
            assert!((a - 0.0998).abs() < 1e-3);
        }
    }

    #[test]
    fn tag_rejects_mismatched_memory() {
        let (_, store, _, tag) = params::<f64>(InitScheme::Identity);
        let mut g = Graph::new();
        let mut p = Binder::new(&store);
        let w = tag.bind(&mut g, &mut p).unwrap();
        let x = g.constant(Tensor::zeros(&[5, 8])).unwrap();
        let c = g.constant(Tensor::zeros(&[6])).unwrap();
        assert!(tag_modulate(&mut g, x, c, &w).is_err());
    }

    #[test]
    fn gradcheck_summarize() {
        let report = grad_check(
            |g, v| {
                let s = multi_view_summarize(g, v[0], v[1])?;
                let sq = g.mul(s.y, s.y)?;
                g.sum(sq)
            },
            &[seq(&[5, 4], 1.37, 0.2), seq(&[12, 4], 0.77, 3.0)],
        )
        .unwrap();
        assert!(report.passed(GRAD_TOLERANCE), "{report:?}");
    }

    #[test]
    fn gradcheck_project_text() {
        let report = grad_check(
            |g, v| {
                let t = project_text(g, v[0], v[1])?;
                let sq = g.mul(t, t)?;
                g.sum(sq)
            },
            &[seq(&[4, 6], 0.9, 0.0), seq(&[6, 8], 0.45, 1.0)],
        )
        .unwrap();
        assert!(report.passed(GRAD_TOLERANCE), "{report:?}");
    }

    /// Store tensors for the given ids followed by `extra`, so a closure can
    /// rebuild weight structs from checked leaves.
    fn inputs(store: &ParamStore<f64>, ids: &[ParamId], extra: Vec<Tensor<f64>>) -> Vec<Tensor<f64>> {
        ids.iter().map(|&id| store.tensor(id).clone()).chain(extra).collect()
    }

    fn tmsu_ids(p: &TmsuParams) -> Vec<ParamId> {
        vec![p.ln_g, p.ln_b, p.w1, p.wc, p.bc, p.wi, p.bi, p.wf, p.bf]
    }

    fn tmsu_vars(v: &[Var]) -> TmsuWeights {
        TmsuWeights {
            ln_g: v[0],
            ln_b: v[1],
            w1: v[2],
            wc: v[3],
            bc: v[4],
            wi: v[5],
            bi: v[6],
            wf: v[7],
            bf: v[8],
        }
    }

    fn tag_ids(p: &TagParams) -> Vec<ParamId> {
        vec![p.ln_g, p.ln_b, p.fc1_w, p.fc1_b, p.fc2_w, p.fc2_b, p.gate_w, p.gate_b]
    }

    fn tag_vars(v: &[Var]) -> TagWeights {
        TagWeights {
            ln_g: v[0],
            ln_b: v[1],
            fc1_w: v[2],
            fc1_b: v[3],
            fc2_w: v[4],
            fc2_b: v[5],
            gate_w: v[6],
            gate_b: v[7],
        }
    }

    #[test]
    fn gradcheck_tmsu_unrolled_three_layers() {
        let (cfg, store, tmsu, _) = params::<f64>(InitScheme::Random);
        let d = cfg.backbone.dim;
        let extra = vec![
            seq(&[d], 1.3, 0.0),
            seq(&[d], 0.7, 1.0),
            seq(&[d], 1.9, 2.0),
            seq(&[d], 0.5, 3.0),
            seq(&[d], 1.1, 4.0),
        ];
        let report = grad_check(
            |g, v| {
                let w = tmsu_vars(&v[..9]);
                let (c0, t, ys) = (v[9], v[10], &v[11..]);
                let mut c = c0;
                for &y in ys {
                    c = tmsu_update(g, y, t, c, &w)?.c;
                }
                let sq = g.mul(c, c)?;
                g.sum(sq)
            },
            &inputs(&store, &tmsu_ids(&tmsu), extra),
        )
        .unwrap();
        assert!(report.passed(GRAD_TOLERANCE), "{report:?}");
    }

    #[test]
    fn gradcheck_tag() {
        let (cfg, store, _, tag) = params::<f64>(InitScheme::Random);
        let d = cfg.backbone.dim;
        let extra = vec![seq(&[5, d], 1.7, 0.0), seq(&[d], 0.6, 7.0), seq(&[5, d], 0.9, 3.0)];
        let report = grad_check(
            |g, v| {
                let out = tag_modulate(g, v[8], v[9], &tag_vars(&v[..8]))?;
                let y = g.mul(out.x_hat, v[10])?;
                g.sum(y)
            },
            &inputs(&store, &tag_ids(&tag), extra),
        )
        .unwrap();
        assert!(report.passed(GRAD_TOLERANCE), "{report:?}");
    }

    #[test]
    fn gradcheck_tmsu_then_tag() {
        let (cfg, store, tmsu, tag) = params::<f64>(InitScheme::Random);
        let d = cfg.backbone.dim;
        let mut ids = tmsu_ids(&tmsu);
        ids.extend(tag_ids(&tag));
        let extra = vec![
            seq(&[5, d], 1.7, 0.0),
            seq(&[d], 0.6, 7.0),
            seq(&[d], 1.4, 5.0),
            seq(&[d], 0.3, 1.0),
        ];
        let report = grad_check(
            |g, v| {
                let (tm, tg) = (tmsu_vars(&v[..9]), tag_vars(&v[9..17]));
                let (x, y, t, c0) = (v[17], v[18], v[19], v[20]);
                let c = tmsu_update(g, y, t, c0, &tm)?.c;
                let out = tag_modulate(g, x, c, &tg)?;
                let sq = g.mul(out.x_hat, out.x_hat)?;
                g.sum(sq)
            },
            &inputs(&store, &ids, extra),
        )
        .unwrap();
        assert!(report.passed(GRAD_TOLERANCE), "{report:?}");
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn modulation_and_memory_are_bounded(seed in any::<u64>(), scale in 0.1f64..20.0) {
                let cfg = ModelConfig::tiny();
                let d = cfg.backbone.dim;
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let tmsu = TmsuParams::new(&cfg, &mut store, &mut rng, InitScheme::Random).unwrap();
                let tag = TagParams::new(&cfg, &mut store, &mut rng, InitScheme::Random).unwrap();
                let mut g = Graph::<f32>::new();
                let mut p = Binder::new(&store);
                let (tm, tg) = (tmsu.bind(&mut g, &mut p).unwrap(), tag.bind(&mut g, &mut p).unwrap());
                let rnd = |rng: &mut ChaCha8Rng, shape: &[usize]| uniform(rng, shape, scale as f32);
                let x = g.constant(rnd(&mut rng, &[5, d])).unwrap();
                let y = g.constant(rnd(&mut rng, &[d])).unwrap();
                let t = g.constant(rnd(&mut rng, &[d])).unwrap();
                let c0 = g.constant(rnd(&mut rng, &[d])).unwrap();
                let c = tmsu_update(&mut g, y, t, c0, &tm).unwrap().c;
                let out = tag_modulate(&mut g, x, c, &tg).unwrap();
                prop_assert!(g.value(out.x_hat).max_abs_diff(g.value(x)) < 1.0);
                prop_assert!(g.value(c).first_non_finite().is_none());
                prop_assert!(g.value(c).max_abs() < g.value(c0).max_abs() + 1.0);
            }
        }
    }
}
