//! Task loss, memory alignment loss and their weighted sum.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::zeros;
use crate::config::ModelConfig;
use crate::error::{Error, Result as CrateResult};
use crate::params::{xavier_uniform, Binder, ParamError, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Result, TensorError};

/// Two-layer map `D → D_llm → D_llm` with a GELU in between.
#[derive(Clone, Debug)]
pub struct ProjectorParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ProjectorParams {
    pub fn new(
        cfg: &ModelConfig,
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        prefix: &str,
    ) -> Result<Self, ParamError> {
        let (d, dl) = (cfg.backbone.dim, cfg.scvm.d_llm);
        Ok(Self {
            w1: store.add(format!("{prefix}.w1"), xavier_uniform(rng, d, dl), group, true)?,
            b1: store.add(format!("{prefix}.b1"), zeros(dl), group, false)?,
            w2: store.add(format!("{prefix}.w2"), xavier_uniform(rng, dl, dl), group, true)?,
            b2: store.add(format!("{prefix}.b2"), zeros(dl), group, false)?,
        })
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>) -> Result<ProjectorWeights> {
        Ok(ProjectorWeights {
            w1: p.param(g, self.w1)?,
            b1: p.param(g, self.b1)?,
            w2: p.param(g, self.w2)?,
            b2: p.param(g, self.b2)?,
        })
    }
}

pub fn project<T: Real>(g: &mut Graph<T>, v: Var, w: &ProjectorWeights) -> Result<Var> {
    let h = g.linear(v, w.w1, Some(w.b1))?;
    let h = g.gelu(h)?;
    g.linear(h, w.w2, Some(w.b2))
}

/// Linear classifier over `[projected pooled features; t]`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    /// `[D_llm + D, V_a]`
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    pub w: Var,
    pub b: Var,
}

impl HeadParams {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self, ParamError> {
        let fan_in = cfg.scvm.d_llm + cfg.backbone.dim;
        Ok(Self {
            w: store.add(
                "head.w",
                xavier_uniform(rng, fan_in, cfg.answers),
                ParamGroup::Head,
                true,
            )?,
            b: store.add("head.b", zeros(cfg.answers), ParamGroup::Head, false)?,
        })
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>) -> Result<HeadWeights> {
        Ok(HeadWeights {
            w: p.param(g, self.w)?,
            b: p.param(g, self.b)?,
        })
    }
}

/// Answer logits from the final token grid and the text vector.
pub fn task_logits<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    t: Var,
    proj: &ProjectorWeights,
    head: &HeadWeights,
) -> Result<Var> {
    let pooled = g.mean_pool(features)?;
    let z = project(g, pooled, proj)?;
    let u = g.concat(&[z, t])?;
    g.linear(u, head.w, Some(head.b))
}

/// Cross-entropy of the answer logits against `answer`.
pub fn task_loss<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    t: Var,
    answer: usize,
    proj: &ProjectorWeights,
    head: &HeadWeights,
) -> Result<Var> {
    let classes = g.shape(head.b).first().copied().unwrap_or(0);
    if answer >= classes {
        return Err(TensorError::IndexOutOfRange {
            op: "task_loss",
            index: answer,
            len: classes,
        });
    }
    let logits = task_logits(g, features, t, proj, head)?;
    g.cross_entropy(logits, answer)
}

/// `1 − cos(z, a)`, in `[0, 2]`.
pub fn cosine_distance<T: Real>(g: &mut Graph<T>, z: Var, a: Var) -> Result<Var> {
    let cos = g.cosine(z, a)?;
    g.affine(cos, -1.0, 1.0)
}

/// `1 − cos(projector(c_L), a)`.
pub fn alignment_loss<T: Real>(g: &mut Graph<T>, c_final: Var, a: Var, proj: &ProjectorWeights) -> Result<Var> {
    let z = project(g, c_final, proj)?;
    cosine_distance(g, z, a)
}

fn finite(component: &'static str, value: f64) -> CrateResult<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { component, value })
    }
}

/// `task + λ·align`. Adds no nodes when the alignment term is absent or
/// λ is zero.
pub fn total_loss<T: Real>(g: &mut Graph<T>, task: Var, align: Option<Var>, lambda: f64) -> CrateResult<Var> {
    finite("task", g.value(task).item().as_f64())?;
    let Some(align) = align.filter(|_| lambda != 0.0) else {
        return Ok(task);
    };
    finite("align", g.value(align).item().as_f64())?;
    let weighted = g.scale(align, lambda)?;
    let total = g.add(task, weighted)?;
    finite("total", g.value(total).item().as_f64())?;
    Ok(total)
}

/// Scalar form of [`total_loss`].
pub fn combine(task: f64, align: f64, lambda: f64) -> CrateResult<f64> {
    finite("task", task)?;
    finite("align", align)?;
    Ok(task + lambda * align)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::gradcheck::{grad_check, GRAD_TOLERANCE};
    use crate::tensor::Tensor;

    fn vecf(data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[data.len()], data).unwrap()
    }

    fn distance(z: &[f64], a: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let (z, a) = (g.constant(vecf(z)).unwrap(), g.constant(vecf(a)).unwrap());
        let d = cosine_distance(&mut g, z, a).unwrap();
        g.value(d).item()
    }

    #[test]
    fn cosine_distance_reference_points() {
        let a = [0.3, -1.2, 0.5];
        assert!(distance(&[0.6, -2.4, 1.0], &a).abs() < 1e-12);
        assert!((distance(&[-0.3, 1.2, -0.5], &a) - 2.0).abs() < 1e-12);
        assert!((distance(&[1.2, 0.3, 0.0], &a) - 1.0).abs() < 1e-12);
        assert_eq!(distance(&[0.0, 0.0, 0.0], &a), 1.0);
    }

    #[test]
    fn composite_arithmetic() {
        assert!((combine(1.0, 0.4, 0.05).unwrap() - 1.02).abs() < 1e-12);
        assert_eq!(combine(1.3, 0.7, 0.0).unwrap(), 1.3);
        assert!(matches!(
            combine(f64::NAN, 0.1, 0.05),
            Err(Error::NonFiniteLoss { component: "task", .. })
        ));
        assert!(matches!(
            combine(1.0, f64::INFINITY, 0.05),
            Err(Error::NonFiniteLoss { component: "align", .. })
        ));
    }

    #[test]
    fn zero_lambda_adds_no_nodes() {
        let mut g = Graph::<f64>::new();
        let task = g.constant(Tensor::scalar(1.0)).unwrap();
        let align = g.constant(Tensor::scalar(0.4)).unwrap();
        let before = g.len();
        assert_eq!(total_loss(&mut g, task, Some(align), 0.0).unwrap(), task);
        assert_eq!(total_loss(&mut g, task, None, 0.05).unwrap(), task);
        assert_eq!(g.len(), before);
        let total = total_loss(&mut g, task, Some(align), 0.05).unwrap();
        assert!((g.value(total).item() - 1.02).abs() < 1e-12);
    }

    #[test]
    fn graph_total_rejects_non_finite_component() {
        let mut g = Graph::<f32>::new();
        let task = g.constant(Tensor::scalar(0.5)).unwrap();
        let align = g.constant(Tensor::scalar(f32::NAN)).unwrap();
        assert!(matches!(
            total_loss(&mut g, task, Some(align), 0.05),
            Err(Error::NonFiniteLoss { component: "align", .. })
        ));
    }

    fn tiny() -> (ModelConfig, ParamStore<f64>, ProjectorParams, HeadParams) {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let proj = ProjectorParams::new(&cfg, &mut store, &mut rng, ParamGroup::Head, "proj").unwrap();
        let head = HeadParams::new(&cfg, &mut store, &mut rng).unwrap();
        (cfg, store.cast(), proj, head)
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let (cfg, mut store, proj, head) = tiny();
        let shape = store.tensor(head.w).shape().to_vec();
        store.set(head.w, Tensor::zeros(&shape)).unwrap();
        let d = cfg.backbone.dim;
        let mut g = Graph::new();
        let mut p = Binder::new(&store);
        let (pw, hw) = (proj.bind(&mut g, &mut p).unwrap(), head.bind(&mut g, &mut p).unwrap());
        let x = g.constant(Tensor::full(&[5, d], 0.3)).unwrap();
        let t = g.constant(Tensor::full(&[d], -0.1)).unwrap();
        let loss = task_loss(&mut g, x, t, 2, &pw, &hw).unwrap();
        assert!((g.value(loss).item() - (cfg.answers as f64).ln()).abs() < 1e-12);
        assert!(matches!(
            task_loss(&mut g, x, t, cfg.answers, &pw, &hw),
            Err(TensorError::IndexOutOfRange { op: "task_loss", .. })
        ));
    }

    #[test]
    fn growing_margin_decreases_loss() {
        let mut last = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut g = Graph::<f64>::new();
            let logits = g.constant(vecf(&[margin, 0.0, 0.0, 0.0])).unwrap();
            let ce = g.cross_entropy(logits, 0).unwrap();
            let loss = g.value(ce).item();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn gradcheck_head() {
        let (cfg, store, proj, head) = tiny();
        let d = cfg.backbone.dim;
        let ids = [proj.w1, proj.b1, proj.w2, proj.b2, head.w, head.b];
        let mut inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.tensor(id).clone()).collect();
        let x: Vec<f64> = (0..5 * d).map(|i| (i as f64 * 0.83).sin()).collect();
        let t: Vec<f64> = (0..d).map(|i| (i as f64 * 0.41).cos()).collect();
        inputs.push(Tensor::from_f64(&[5, d], &x).unwrap());
        inputs.push(vecf(&t));
        let report = grad_check(
            |g, v| {
                let pw = ProjectorWeights {
                    w1: v[0],
                    b1: v[1],
                    w2: v[2],
                    b2: v[3],
                };
                let hw = HeadWeights { w: v[4], b: v[5] };
                task_loss(g, v[6], v[7], 3, &pw, &hw)
            },
            &inputs,
        )
        .unwrap();
        assert!(report.passed(GRAD_TOLERANCE), "{report:?}");
    }

    #[test]
    fn gradcheck_alignment() {
        let (cfg, store, proj, _) = tiny();
        let d = cfg.backbone.dim;
        let ids = [proj.w1, proj.b1, proj.w2, proj.b2];
        let mut inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.tensor(id).clone()).collect();
        inputs.push(vecf(&(0..d).map(|i| (i as f64 * 1.9).sin()).collect::<Vec<_>>()));
        inputs.push(vecf(
            &(0..cfg.scvm.d_llm)
                .map(|i| (i as f64 * 0.6 + 0.2).cos())
                .collect::<Vec<_>>(),
        ));
        let report = grad_check(
            |g, v| {
                let pw = ProjectorWeights {
                    w1: v[0],
                    b1: v[1],
                    w2: v[2],
                    b2: v[3],
                };
                alignment_loss(g, v[4], v[5], &pw)
            },
            &inputs,
        )
        .unwrap();
        assert!(report.passed(GRAD_TOLERANCE), "{report:?}");
    }

    mod props {
        use proptest::collection::vec;
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn alignment_in_range(z in vec(-50.0f64..50.0, 6), a in vec(-5.0f64..5.0, 6)) {
                let d = distance(&z, &a);
                prop_assert!((0.0..=2.0).contains(&d), "{d}");
            }

            #[test]
            fn alignment_scale_invariant(z in vec(-5.0f64..5.0, 6), a in vec(-5.0f64..5.0, 6)) {
                prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-3);
                prop_assume!(z.iter().map(|x| x * x).sum::<f64>() > 1e-3);
                let base = distance(&z, &a);
                for k in [0.5, 3.0, 100.0] {
                    let scaled: Vec<f64> = a.iter().map(|x| x * k).collect();
                    prop_assert!((distance(&z, &scaled) - base).abs() < 1e-6);
                }
            }
        }
    }
}
