//! Small layer building blocks on top of the graph.

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::param::{init, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut SeededRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<usize> {
        let n = self.full_name(name);
        self.store.add(n, value)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let w = init::xavier(self.rng, fan_in, fan_out);
        self.linear_from(name, w, Tensor::zeros([fan_out]))
    }

    /// Linear layer with all-zero weights and bias.
    pub fn linear_zero(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        self.linear_from(name, Tensor::zeros([fan_in, fan_out]), Tensor::zeros([fan_out]))
    }

    pub fn linear_from(&mut self, name: &str, w: Tensor<T>, b: Tensor<T>) -> Result<Linear> {
        let mut s = self.sub(name);
        Ok(Linear {
            w: s.tensor("weight", w)?,
            b: s.tensor("bias", b)?,
        })
    }

    /// Bias-free `[fan_in, fan_out]` weight.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<usize> {
        let w = init::xavier(self.rng, fan_in, fan_out);
        self.tensor(name, w)
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let mut s = self.sub(name);
        Ok(LayerNorm {
            gamma: s.tensor("gamma", Tensor::full([dim], T::one()))?,
            beta: s.tensor("beta", Tensor::zeros([dim]))?,
        })
    }

    /// MLP with GELU between layers; `zero_last` zero-initialises the output layer.
    pub fn mlp(&mut self, name: &str, dims: &[usize], zero_last: bool) -> Result<Mlp> {
        let mut s = self.sub(name);
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let lname = format!("l{i}");
            let l = if zero_last && i == dims.len() - 2 {
                s.linear_zero(&lname, dims[i], dims[i + 1])?
            } else {
                s.linear(&lname, dims[i], dims[i + 1])?
            };
            layers.push(l);
        }
        Ok(Mlp { layers })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    /// `x · W + b` for `x: [rows, fan_in]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bcast(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }
}

/// Frequencies of a `half`-wide sinusoidal code: `T^(−2i/half)` for `i < half/2`.
pub fn pe_freqs(half: usize, temperature: f64) -> Vec<f64> {
    (0..half / 2)
        .map(|i| temperature.powf(-2.0 * i as f64 / half as f64))
        .collect()
}

/// Sinusoidal code of one scalar: `[sin(x·f₀), cos(x·f₀), sin(x·f₁), …]`, length `half`.
pub fn positional_encode(x: f64, half: usize, temperature: f64) -> Vec<f64> {
    pe_freqs(half, temperature)
        .into_iter()
        .flat_map(|f| [(x * f).sin(), (x * f).cos()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_code_layout() {
        assert_eq!(
            positional_encode(0.0, 8, 1e4),
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
        let f = 10000f64.powf(-0.5);
        assert_eq!(
            positional_encode(1.0, 4, 1e4),
            vec![1f64.sin(), 1f64.cos(), f.sin(), f.cos()]
        );
        let a = positional_encode(0.3, 16, 1e4);
        let b = positional_encode(0.3 + 1e-9, 16, 1e4);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-8));
    }
}
