//! Encoder over flattened multi-scale tokens using deformable attention.

use std::f64::consts::TAU;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{DeformLayout, Graph, NodeId};
use crate::backbone::FeatureMapSet;
use crate::error::{Error, Result};
use crate::nn::{pe_freqs, Builder, LayerNorm, Linear, Mlp};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    pub dim: usize,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Temperature of the sinusoidal position code.
    pub temperature: f64,
    /// Normalised coordinates are multiplied by this before encoding.
    pub pos_scale: f64,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DeformConfig {
    pub fn desk() -> Self {
        Self {
            dim: 64,
            heads: 4,
            points: 2,
            levels: 3,
            layers: 3,
            ffn_dim: 128,
            temperature: 10000.0,
            pos_scale: TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::Config("dim must be divisible by 4".into()));
        }
        if self.points == 0 || self.levels == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("points, levels and ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

/// `φ_s`: normalised coordinate to level pixel coordinate.
pub fn to_level_pixels(p: f64, extent: usize) -> f64 {
    p * extent as f64 - 0.5
}

/// Multi-scale deformable attention with bias-free value and output projections.
#[derive(Debug, Clone)]
pub struct DeformAttn {
    pub w_value: usize,
    pub offsets: Linear,
    pub weights: Linear,
    pub w_out: usize,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub dim: usize,
}

/// Intermediate nodes of one deformable attention call.
#[derive(Debug, Clone, Copy)]
pub struct DeformParts {
    pub out: NodeId,
    /// `[Q, heads·levels·points]`, softmax-normalised per head.
    pub weights: NodeId,
    /// `[Q, heads·levels·points·2]` sampling points in level pixels.
    pub locations: NodeId,
}

impl DeformAttn {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &DeformConfig) -> Result<Self> {
        let (m, s, k) = (cfg.heads, cfg.levels, cfg.points);
        // directional starting pattern: head m looks along angle 2πm/M, point k at distance k+1
        let mut bias = Vec::with_capacity(m * s * k * 2);
        for h in 0..m {
            let a = TAU * h as f64 / m as f64;
            let (dx, dy) = (a.cos(), a.sin());
            let norm = dx.abs().max(dy.abs());
            for _ in 0..s {
                for p in 0..k {
                    bias.push(dx / norm * (p + 1) as f64);
                    bias.push(dy / norm * (p + 1) as f64);
                }
            }
        }
        let offsets = b.linear_from(
            "offsets",
            Tensor::zeros([cfg.dim, m * s * k * 2]),
            Tensor::from_f64([m * s * k * 2], &bias)?,
        )?;
        Ok(Self {
            w_value: b.weight("w_value", cfg.dim, cfg.dim)?,
            offsets,
            weights: b.linear_zero("weights", cfg.dim, m * s * k)?,
            w_out: b.weight("w_out", cfg.dim, cfg.dim)?,
            heads: m,
            points: k,
            levels: s,
            dim: cfg.dim,
        })
    }

    /// `query: [Q, C]` with normalised reference points `refs`, values from
    /// `source: [Σ h·w, C]` laid out level by level with extents `levels`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: NodeId,
        refs: &[(f64, f64)],
        source: NodeId,
        levels: &[(usize, usize)],
    ) -> Result<DeformParts> {
        let (m, s, k) = (self.heads, self.levels, self.points);
        if levels.len() != s {
            return Err(Error::Dimension(format!(
                "{} levels given, layer expects {s}",
                levels.len()
            )));
        }
        let q = g.value(query).rows();
        if refs.len() != q {
            return Err(Error::Dimension("one reference point per query required".into()));
        }
        let wv = g.param(store, self.w_value);
        let value = g.matmul(source, wv)?;
        let off = self.offsets.forward(g, store, query)?;
        if !g.value(off).all_finite() {
            return Err(Error::Numeric("non-finite sampling offsets".into()));
        }
        let mut base = Vec::with_capacity(q * m * s * k * 2);
        for &(rx, ry) in refs {
            for _ in 0..m {
                for &(h, w) in levels {
                    for _ in 0..k {
                        base.push(T::of(to_level_pixels(rx, w)));
                        base.push(T::of(to_level_pixels(ry, h)));
                    }
                }
            }
        }
        let base = g.constant(Tensor::new([q, m * s * k * 2], base)?);
        let loc = g.add(base, off)?;
        let logits = self.weights.forward(g, store, query)?;
        let logits = g.reshape(logits, [q * m, s * k])?;
        let a = g.softmax(logits)?;
        let a = g.reshape(a, [q, m * s * k])?;
        let mut first = 0;
        let mut lv = Vec::with_capacity(s);
        for &(h, w) in levels {
            lv.push((h, w, first));
            first += h * w;
        }
        let layout = Rc::new(DeformLayout {
            levels: lv,
            heads: m,
            head_dim: self.dim / m,
            points: k,
        });
        let sampled = g.deform_sample(value, loc, a, layout)?;
        let wo = g.param(store, self.w_out);
        let out = g.matmul(sampled, wo)?;
        Ok(DeformParts {
            out,
            weights: a,
            locations: loc,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: DeformAttn,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

/// Encoder output: all tokens `[T, C]` with their level geometry.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub node: NodeId,
    pub levels: Vec<(usize, usize)>,
    /// Normalised centre of every token.
    pub refs: Vec<(f64, f64)>,
    /// Level index of every token.
    pub level_of: Vec<usize>,
}

impl Encoded {
    pub fn level_start(&self, s: usize) -> usize {
        self.levels[..s].iter().map(|(h, w)| h * w).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Neck {
    pub cfg: DeformConfig,
    pub in_proj: Vec<(Linear, LayerNorm)>,
    pub level_embed: usize,
    pub layers: Vec<EncoderLayer>,
    pub ln_out: LayerNorm,
}

/// Normalised cell centres of an `h × w` grid in row-major order.
pub fn cell_centres(h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut v = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            v.push(((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64));
        }
    }
    v
}

/// `[n, 2·half]` table `Cat(PE(x), PE(y))` for normalised points.
pub fn position_table<T: Real>(pts: &[(f64, f64)], half: usize, temperature: f64, scale: f64) -> Tensor<T> {
    let freqs = pe_freqs(half, temperature);
    let mut data = Vec::with_capacity(pts.len() * 2 * half);
    for &(x, y) in pts {
        for v in [x, y] {
            for &f in &freqs {
                let a = v * scale * f;
                data.push(T::of(a.sin()));
                data.push(T::of(a.cos()));
            }
        }
    }
    Tensor::new([pts.len(), 2 * half], data).expect("non-empty point list")
}

impl Neck {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &DeformConfig, in_channels: &[usize]) -> Result<Self> {
        cfg.validate()?;
        if in_channels.len() != cfg.levels {
            return Err(Error::Config(format!(
                "{} input maps for {} levels",
                in_channels.len(),
                cfg.levels
            )));
        }
        let mut in_proj = Vec::new();
        for (s, &c) in in_channels.iter().enumerate() {
            let mut sb = b.sub(&format!("input{s}"));
            in_proj.push((sb.linear("proj", c, cfg.dim)?, sb.layer_norm("ln", cfg.dim)?));
        }
        let level_embed = {
            let t = crate::param::init::normal(b.rng, &[cfg.levels, cfg.dim], 0.02);
            b.tensor("level_embed", t)?
        };
        let mut layers = Vec::new();
        for i in 0..cfg.layers {
            let mut lb = b.sub(&format!("layer{i}"));
            layers.push(EncoderLayer {
                ln1: lb.layer_norm("ln1", cfg.dim)?,
                attn: {
                    let mut ab = lb.sub("attn");
                    DeformAttn::build(&mut ab, cfg)?
                },
                ln2: lb.layer_norm("ln2", cfg.dim)?,
                ffn: lb.mlp("ffn", &[cfg.dim, cfg.ffn_dim, cfg.dim], false)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            in_proj,
            level_embed,
            layers,
            ln_out: b.layer_norm("ln_out", cfg.dim)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, maps: &FeatureMapSet) -> Result<Encoded> {
        if maps.maps.len() != self.cfg.levels {
            return Err(Error::Dimension(format!(
                "{} maps for {} levels",
                maps.maps.len(),
                self.cfg.levels
            )));
        }
        let d = self.cfg.dim;
        let le = g.param(store, self.level_embed);
        let mut parts = Vec::new();
        let mut levels = Vec::new();
        let mut refs = Vec::new();
        let mut level_of = Vec::new();
        for (s, (m, (proj, ln))) in maps.maps.iter().zip(&self.in_proj).enumerate() {
            let x = proj.forward(g, store, m.node)?;
            let x = ln.forward(g, store, x)?;
            let e = g.select_rows(le, &[s])?;
            parts.push(g.add_bcast(x, e)?);
            levels.push((m.h, m.w));
            refs.extend(cell_centres(m.h, m.w));
            level_of.extend(std::iter::repeat_n(s, m.h * m.w));
        }
        let mut x = g.concat_rows(&parts)?;
        let pos = g.constant(position_table(&refs, d / 2, self.cfg.temperature, self.cfg.pos_scale));
        for layer in &self.layers {
            let y = layer.ln1.forward(g, store, x)?;
            let q = g.add(y, pos)?;
            let a = layer.attn.forward(g, store, q, &refs, y, &levels)?;
            x = g.add(x, a.out)?;
            let y = layer.ln2.forward(g, store, x)?;
            let f = layer.ffn.forward(g, store, y)?;
            x = g.add(x, f)?;
        }
        let node = self.ln_out.forward(g, store, x)?;
        Ok(Encoded {
            node,
            levels,
            refs,
            level_of,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_pixel_convention() {
        for extent in [1, 2, 7, 16] {
            assert_eq!(to_level_pixels(0.5, extent), (extent as f64 - 1.0) / 2.0);
        }
        assert_eq!(to_level_pixels(0.0, 4), -0.5);
    }

    #[test]
    fn position_table_layout() {
        let t = position_table::<f64>(&[(0.0, 0.0)], 4, 1e4, 1.0);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
