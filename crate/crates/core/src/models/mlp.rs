use rand::Rng;

use crate::error::Result;
use crate::math::{Graph, ParamId, ParamStore, Tensor, Var};

/// Dense network with tanh hidden layers and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `(weight, bias)` per layer; weights are `in x out`.
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers `name.l{i}.w` / `name.l{i}.b` with Glorot-normal weights and
    /// zero biases.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let std = (2.0 / (w[0] + w[1]) as f32).sqrt();
            let wid = store.insert(format!("{name}.l{i}.w"), Tensor::randn(&[w[0], w[1]], std, rng))?;
            let bid = store.insert(format!("{name}.l{i}.b"), Tensor::zeros(&[w[1]]))?;
            layers.push((wid, bid));
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].0).shape()[0]
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.layers.last().unwrap().0).shape()[1]
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// `train = false` reads the parameters as frozen constants.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, train: bool) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = if train {
                (g.param(store, w)?, g.param(store, b)?)
            } else {
                (g.frozen(store, w)?, g.frozen(store, b)?)
            };
            let z = g.matmul(h, wv)?;
            h = g.add_row(z, bv)?;
            if i < last {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }
}
