//! Layer building blocks expressed on top of [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(1, dim, T::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))` then `x + mlp(ln(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        assert_eq!(dim % heads, 0, "width must be divisible by the head count");
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
            heads,
        }
    }

    /// `x` is `[batch * seq, dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, batch: usize, seq: usize) -> Var {
        let h = self.norm1.forward(g, x);
        let qkv = self.qkv.forward(g, h);
        let a = g.attention(qkv, batch, seq, self.heads);
        let a = self.proj.forward(g, a);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}

/// Fixed 2-D sine-cosine positional table, `[grid_h * grid_w, dim]`.
///
/// Half of the channels encode the row index, half the column index; each
/// half is split again into sines and cosines over geometric frequencies.
pub fn sincos_2d<T: Real>(grid_h: usize, grid_w: usize, dim: usize) -> Tensor<T> {
    assert_eq!(dim % 4, 0, "positional width must be a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    Tensor::from_fn(grid_h * grid_w, dim, |pos, c| {
        let (row, col) = ((pos / grid_w) as f64, (pos % grid_w) as f64);
        let (coord, c) = if c < dim / 2 { (row, c) } else { (col, c - dim / 2) };
        let v = if c < quarter {
            (coord * omega[c]).sin()
        } else {
            (coord * omega[c - quarter]).cos()
        };
        T::lit(v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, 16, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_fn(6, 8, |r, c| (r as f32 - c as f32) * 0.1));
        let y = block.forward(&mut g, x, 2, 3);
        assert_eq!(g.value(y).shape(), (6, 8));
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn sincos_rows_are_distinct() {
        let t = sincos_2d::<f64>(4, 4, 16);
        for a in 0..16 {
            for b in (a + 1)..16 {
                assert_ne!(t.row(a), t.row(b));
            }
        }
    }
}
