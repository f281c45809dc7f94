//! The gradient-check suite behind the `gradcheck` command: every primitive,
//! each memory operation and the end-to-end loss at tiny dimensions.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport, GRAD_TOLERANCE};
use crate::model::{ModelInput, ScvmModel};
use crate::objective::{self, HeadWeights, ProjectorWeights};
use crate::params::Binder;
use crate::scvm::{self, InitScheme, TagWeights, TmsuWeights};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed(GRAD_TOLERANCE)
    }
}

/// Deterministic inputs in `[-1, 1]`, optionally pushed away from zero so
/// kinks (relu) are not straddled by the finite-difference step.
struct Inputs(ChaCha8Rng);

impl Inputs {
    fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    fn t(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.0.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64(shape, &data).expect("shape")
    }

    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.t(shape).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
    }
}

type Body = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Check {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    body: Body,
}

fn check(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    body: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Check {
    Check {
        name,
        inputs,
        body: Box::new(body),
    }
}

/// `Σ w ⊙ y` with a fixed random weight so every output coordinate matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Inputs::new(seed).t(g.shape(y));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p)?)
}

fn primitive_checks() -> Vec<Check> {
    let mut r = Inputs::new(11);
    vec![
        check("add", vec![r.t(&[3, 4]), r.t(&[3, 4])], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, 1)
        }),
        check("add_row_broadcast", vec![r.t(&[3, 4]), r.t(&[4])], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, 2)
        }),
        check("mul", vec![r.t(&[3, 4]), r.t(&[3, 4])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, 3)
        }),
        check("mul_col_broadcast", vec![r.t(&[3, 4]), r.t(&[3, 1])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, 4)
        }),
        check("affine", vec![r.t(&[5])], |g, v| {
            let y = g.affine(v[0], -1.7, 0.4)?;
            probe(g, y, 5)
        }),
        check("matmul", vec![r.t(&[3, 4]), r.t(&[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, 6)
        }),
        check("matmul_vector", vec![r.t(&[4]), r.t(&[4, 3])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, 7)
        }),
        check("transpose", vec![r.t(&[2, 3])], |g, v| {
            let y = g.transpose(v[0])?;
            probe(g, y, 8)
        }),
        check("concat", vec![r.t(&[2, 3]), r.t(&[2, 2])], |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            probe(g, y, 9)
        }),
        check("concat_rows", vec![r.t(&[3]), r.t(&[2, 3])], |g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            probe(g, y, 10)
        }),
        check("slice_cols", vec![r.t(&[3, 5])], |g, v| {
            let y = g.slice_cols(v[0], 1, 3)?;
            probe(g, y, 11)
        }),
        check("select_row", vec![r.t(&[3, 4])], |g, v| {
            let y = g.select_row(v[0], 1)?;
            probe(g, y, 12)
        }),
        check("reshape", vec![r.t(&[2, 6])], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            probe(g, y, 13)
        }),
        check("tanh", vec![r.t(&[6])], |g, v| {
            let y = g.tanh(v[0])?;
            probe(g, y, 14)
        }),
        check("sigmoid", vec![r.t(&[6])], |g, v| {
            let y = g.sigmoid(v[0])?;
            probe(g, y, 15)
        }),
        check("relu", vec![r.away_from_zero(&[6])], |g, v| {
            let y = g.relu(v[0])?;
            probe(g, y, 16)
        }),
        check("gelu", vec![r.t(&[6])], |g, v| {
            let y = g.gelu(v[0])?;
            probe(g, y, 17)
        }),
        check("layer_norm", vec![r.t(&[3, 5])], |g, v| {
            let y = g.layer_norm(v[0])?;
            probe(g, y, 18)
        }),
        check("layer_norm_affine", vec![r.t(&[3, 5]), r.t(&[5]), r.t(&[5])], |g, v| {
            let y = g.layer_norm_affine(v[0], v[1], v[2])?;
            probe(g, y, 19)
        }),
        check("softmax", vec![r.t(&[3, 4])], |g, v| {
            let y = g.softmax(v[0])?;
            probe(g, y, 20)
        }),
        check("mean_pool", vec![r.t(&[4, 3])], |g, v| {
            let y = g.mean_pool(v[0])?;
            probe(g, y, 21)
        }),
        // Uniform random entries make ties vanishingly unlikely.
        check("max_pool", vec![r.t(&[4, 3])], |g, v| {
            let y = g.max_pool(v[0])?;
            probe(g, y, 22)
        }),
        check("sum", vec![r.t(&[2, 3])], |g, v| Ok(g.sum(v[0])?)),
        check("cosine", vec![r.t(&[5]), r.t(&[5])], |g, v| Ok(g.cosine(v[0], v[1])?)),
        check("cross_entropy", vec![r.t(&[6])], |g, v| Ok(g.cross_entropy(v[0], 2)?)),
    ]
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

fn tiny_input(cfg: &ModelConfig, r: &mut Inputs) -> ModelInput<f64> {
    let b = &cfg.backbone;
    ModelInput {
        image: r.t(&[b.image_size, b.image_size, b.channels]),
        question: r.t(&[3, cfg.scvm.d_llm]),
        answer: 1,
        answer_embedding: r.t(&[cfg.scvm.d_llm]),
    }
}

fn model_checks() -> Result<Vec<Check>> {
    let cfg = ModelConfig::tiny();
    let (d, dl, dr) = (cfg.backbone.dim, cfg.scvm.d_llm, cfg.bottleneck());
    let n = cfg.backbone.tokens();
    let mut r = Inputs::new(23);
    let (model, store) = ScvmModel::build(&cfg, InitScheme::Random, 7)?;
    let store = store.cast::<f64>();
    let values = |ids: &[crate::params::ParamId]| -> Vec<Tensor<f64>> {
        ids.iter().map(|&id| store.tensor(id).clone()).collect()
    };
    let t = &model.tmsu;
    let tmsu = values(&[t.ln_g, t.ln_b, t.w1, t.wc, t.bc, t.wi, t.bi, t.wf, t.bf]);
    let a = &model.tag;
    let tag = values(&[a.ln_g, a.ln_b, a.fc1_w, a.fc1_b, a.fc2_w, a.fc2_b, a.gate_w, a.gate_b]);
    let pj = &model.projector;
    let proj = values(&[pj.w1, pj.b1, pj.w2, pj.b2]);
    let head = values(&[model.head.w, model.head.b]);
    let proj_vars = |v: &[Var]| ProjectorWeights {
        w1: v[0],
        b1: v[1],
        w2: v[2],
        b2: v[3],
    };
    debug_assert_eq!(store.tensor(t.w1).shape(), &[3 * d, dr]);

    let mut checks = vec![
        check("multi_view_summarize", vec![r.t(&[n, d]), r.t(&[3 * d, d])], |g, v| {
            let s = scvm::multi_view_summarize(g, v[0], v[1])?;
            probe(g, s.y, 31)
        }),
        check("project_text", vec![r.t(&[3, dl]), r.t(&[dl, d])], |g, v| {
            let t = scvm::project_text(g, v[0], v[1])?;
            probe(g, t, 32)
        }),
    ];
    let mut unrolled = tmsu.clone();
    unrolled.extend([r.t(&[d]), r.t(&[d]), r.t(&[d]), r.t(&[d]), r.t(&[d])]);
    checks.push(check("tmsu_update_unrolled_3", unrolled, |g, v| {
        let w = tmsu_vars(&v[..9]);
        let (mut c, t) = (v[9], v[10]);
        for &y in &v[11..14] {
            c = scvm::tmsu_update(g, y, t, c, &w)?.c;
        }
        let sq = g.mul(c, c)?;
        Ok(g.sum(sq)?)
    }));
    let mut tag_in = tag.clone();
    tag_in.extend([r.t(&[n, d]), r.t(&[d])]);
    checks.push(check("tag_modulate", tag_in, |g, v| {
        let out = scvm::tag_modulate(g, v[8], v[9], &tag_vars(&v[..8]))?;
        probe(g, out.x_hat, 33)
    }));
    let mut step_in = tmsu.clone();
    step_in.extend(tag.iter().cloned());
    step_in.extend([r.t(&[n, d]), r.t(&[d]), r.t(&[d]), r.t(&[d])]);
    checks.push(check("tmsu_then_tag", step_in, |g, v| {
        let c = scvm::tmsu_update(g, v[18], v[19], v[20], &tmsu_vars(&v[..9]))?.c;
        let out = scvm::tag_modulate(g, v[17], c, &tag_vars(&v[9..17]))?;
        probe(g, out.x_hat, 34)
    }));
    let mut align_in = proj.clone();
    align_in.extend([r.t(&[d]), r.t(&[dl])]);
    checks.push(check("alignment_loss", align_in, move |g, v| {
        Ok(objective::alignment_loss(g, v[4], v[5], &proj_vars(&v[..4]))?)
    }));
    let mut task_in = proj;
    task_in.extend(head);
    task_in.extend([r.t(&[n, d]), r.t(&[d])]);
    checks.push(check("task_loss", task_in, move |g, v| {
        let hw = HeadWeights { w: v[4], b: v[5] };
        Ok(objective::task_loss(g, v[6], v[7], 3, &proj_vars(&v[..4]), &hw)?)
    }));

    let block_store = store.clone();
    let block_model = model.clone();
    let mut block_in: Vec<Tensor<f64>> = store.iter().map(|p| p.tensor.clone()).collect();
    let count = block_in.len();
    block_in.push(r.t(&[n, d]));
    checks.push(check("transformer_block", block_in, move |g, v| {
        let mut p = Binder::prebound(&block_store, &v[..count]);
        let out = block_model.backbone.block(g, &mut p, 0, v[count])?.out;
        probe(g, out, 35)
    }));

    let input = tiny_input(&cfg, &mut r);
    let all: Vec<Tensor<f64>> = store.iter().map(|p| p.tensor.clone()).collect();
    let embed_store = store.clone();
    let embed_model = model.clone();
    let image = input.image.clone();
    checks.push(check("patch_embed", all.clone(), move |g, v| {
        let mut p = Binder::prebound(&embed_store, v);
        let x = embed_model.backbone.patch_embed(g, &mut p, &image)?;
        probe(g, x, 36)
    }));
    checks.push(check("end_to_end_total_loss", all, move |g, v| {
        let mut p = Binder::prebound(&store, v);
        Ok(model.forward(g, &mut p, &input, 0.05)?.loss_total)
    }));
    Ok(checks)
}

/// Runs the suite. With `fault` set, that primitive's backward pass is
/// deliberately scaled so the affected checks must fail.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut checks = primitive_checks();
    checks.extend(model_checks()?);
    checks
        .into_iter()
        .map(|c| {
            let start = Instant::now();
            let body = &c.body;
            let report = grad_check(
                |g: &mut Graph<f64>, v: &[Var]| -> Result<Var, Error> {
                    if let Some(k) = fault {
                        g.inject_backward_fault(k);
                    }
                    body(g, v)
                },
                &c.inputs,
            )?;
            Ok(CheckResult {
                name: c.name,
                report,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
