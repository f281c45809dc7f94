//! Per-layer gate statistics of one forward pass.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ModelInput, ScvmModel};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::Graph;

/// One CSV row. Means are raw, not normalised across layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub layer: usize,
    pub mean_f: f64,
    pub mean_i: f64,
    /// Mean of the per-token gate; zero when the gate is disabled.
    pub mean_alpha: f64,
    pub mem_l2: f64,
    /// `‖x̂ − x‖∞` for the layer.
    pub delta_linf: f64,
}

pub const CSV_HEADER: &str = "layer,mean_f,mean_i,mean_alpha,mem_l2,delta_linf";

fn mean<T: Real>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|x| x.as_f64()).sum::<f64>() / t.numel() as f64
}

/// Gate statistics per layer, 1-based. Empty when the memory loop is off.
pub fn inspect_gates<T: Real>(
    model: &ScvmModel,
    store: &ParamStore<T>,
    input: &ModelInput<T>,
    initial_memory: Option<&Tensor<T>>,
) -> Result<Vec<GateRecord>> {
    let mut g = Graph::new();
    let mut p = Binder::new(store);
    let enc = model.encode(&mut g, &mut p, &input.image, &input.question, initial_memory)?;
    Ok(enc
        .traces
        .iter()
        .enumerate()
        .map(|(l, tr)| GateRecord {
            layer: l + 1,
            mean_f: mean(g.value(tr.tmsu.forget_gate)),
            mean_i: mean(g.value(tr.tmsu.input_gate)),
            mean_alpha: tr.tag.map_or(0.0, |s| mean(g.value(s.alpha))),
            mem_l2: g.value(tr.tmsu.c).l2_norm().as_f64(),
            delta_linf: g.value(tr.x_hat).max_abs_diff(g.value(tr.x)).as_f64(),
        })
        .collect())
}

pub fn write_csv<W: Write>(mut w: W, records: &[GateRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.layer, r.mean_f, r.mean_i, r.mean_alpha, r.mem_l2, r.delta_linf
        )?;
    }
    Ok(())
}
