use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Affine layer `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (inputs + outputs) as f64).sqrt();
        let weight = store.insert_random(format!("{name}.w"), inputs, outputs, std, rng);
        let bias = store.insert(format!("{name}.b"), Tensor::zeros(1, outputs));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// Stack of dense layers with ReLU between them; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes` lists every layer's output width; the last entry is the output.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        sizes: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut width = inputs;
        for (i, &s) in sizes.iter().enumerate() {
            layers.push(Dense::init(store, &format!("{name}.{i}"), width, s, rng));
            width = s;
        }
        Self { layers }
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }
}
