use std::collections::BTreeMap;
use std::io::Write;

use super::config::Method;
use crate::error::Result;
use crate::model::names;
use crate::numerics::Tensor;

/// ℓ2 norms of per-layer gradients at every update step, `[layer][step]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradNormTrace {
    pub method: Method,
    pub norms: Vec<Vec<f64>>,
}

impl GradNormTrace {
    pub fn new(method: Method, n_layers: usize) -> Self {
        Self {
            method,
            norms: vec![Vec::new(); n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.norms.len()
    }

    pub fn n_steps(&self) -> usize {
        self.norms.first().map_or(0, Vec::len)
    }

    /// Appends one step: each layer's norm over the concatenation of its
    /// gradients in `grads`. Tensors outside any layer are ignored.
    pub fn record(&mut self, grads: &BTreeMap<String, Tensor>) {
        let mut sq = vec![0.0; self.norms.len()];
        for (name, g) in grads {
            if let Some(l) = names::layer_of(name) {
                sq[l] += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        for (row, s) in self.norms.iter_mut().zip(sq) {
            row.push(s.sqrt());
        }
    }

    /// CSV with columns `method,layer,step,norm`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_grad_norms_csv(std::slice::from_ref(self), out)
    }
}

/// Several traces in one CSV under a single header.
pub fn write_grad_norms_csv<W: Write>(traces: &[GradNormTrace], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "layer", "step", "norm"])?;
    for t in traces {
        for (layer, row) in t.norms.iter().enumerate() {
            for (step, norm) in row.iter().enumerate() {
                w.write_record([
                    t.method.to_string(),
                    layer.to_string(),
                    step.to_string(),
                    norm.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
