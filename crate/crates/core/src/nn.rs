//! Layers built on [`Graph`]: linear maps, RMS norm, multi-head attention
//! with an optional key/value prefix, and pre-norm transformer blocks.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::graph::{Graph, RopeTable, Var};
use crate::params::{ParamId, ParamStore};
use crate::Scalar;

const NORM_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<A: Scalar, R: Rng>(store: &mut ParamStore<A>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add_normal(&format!("{name}.weight"), (fan_in, fan_out), (1.0 / fan_in as f64).sqrt(), rng);
        let bias = bias.then(|| store.add_zeros(&format!("{name}.bias"), (1, fan_out)));
        Self { weight, bias }
    }

    /// All-zero weight and bias.
    pub fn zeros<A: Scalar>(store: &mut ParamStore<A>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add_zeros(&format!("{name}.weight"), (fan_in, fan_out));
        let bias = Some(store.add_zeros(&format!("{name}.bias"), (1, fan_out)));
        Self { weight, bias }
    }

    pub fn from_store<A: Scalar>(store: &ParamStore<A>, name: &str) -> Option<Self> {
        Some(Self { weight: store.id(&format!("{name}.weight"))?, bias: store.id(&format!("{name}.bias")) })
    }

    pub fn forward<A: Scalar>(&self, g: &mut Graph<'_, A>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new<A: Scalar>(store: &mut ParamStore<A>, name: &str, dim: usize) -> Self {
        Self { gain: store.add_ones(&format!("{name}.gain"), (1, dim)) }
    }

    pub fn from_store<A: Scalar>(store: &ParamStore<A>, name: &str) -> Option<Self> {
        Some(Self { gain: store.id(&format!("{name}.gain"))? })
    }

    pub fn forward<A: Scalar>(&self, g: &mut Graph<'_, A>, x: Var) -> Var {
        let n = g.rms_norm(x, A::lit(NORM_EPS));
        let gain = g.param(self.gain);
        g.mul_row(n, gain)
    }
}

/// Per-layer attention keys (already position-rotated) and values.
#[derive(Debug, Clone, PartialEq)]
pub struct KvState<A> {
    pub keys: Array2<A>,
    pub values: Array2<A>,
}

impl<A: Scalar> KvState<A> {
    pub fn empty(width: usize) -> Self {
        Self { keys: Array2::zeros((0, width)), values: Array2::zeros((0, width)) }
    }

    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.nrows() == 0
    }

    pub fn append(&mut self, keys: ndarray::ArrayView2<'_, A>, values: ndarray::ArrayView2<'_, A>) {
        self.keys = ndarray::concatenate(ndarray::Axis(0), &[self.keys.view(), keys]).expect("kv width");
        self.values = ndarray::concatenate(ndarray::Axis(0), &[self.values.view(), values]).expect("kv width");
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new<A: Scalar, R: Rng>(store: &mut ParamStore<A>, name: &str, dim: usize, n_heads: usize, rng: &mut R) -> Self {
        assert!(dim.is_multiple_of(n_heads), "model dim must divide by heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng),
            n_heads,
            head_dim: dim / n_heads,
        }
    }

    /// `allowed` has one row per query and one column per key, where keys are
    /// the `past` rows followed by the current rows.
    pub fn forward<A: Scalar>(
        &self,
        g: &mut Graph<'_, A>,
        x: Var,
        rope: &Rc<RopeTable<A>>,
        allowed: &Rc<Array2<bool>>,
        past: Option<&KvState<A>>,
    ) -> (Var, Var, Var) {
        let q = self.q.forward(g, x);
        let q = g.rope(q, rope.clone());
        let k = self.k.forward(g, x);
        let k = g.rope(k, rope.clone());
        let v = self.v.forward(g, x);
        let (k_all, v_all) = match past {
            Some(p) if !p.is_empty() => {
                let pk = g.constant(p.keys.clone());
                let pv = g.constant(p.values.clone());
                (g.concat_rows(&[pk, k]), g.concat_rows(&[pv, v]))
            }
            _ => (k, v),
        };
        let scale = A::lit(1.0 / (self.head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let off = h * self.head_dim;
            let qh = g.slice_cols(q, off, self.head_dim);
            let kh = g.slice_cols(k_all, off, self.head_dim);
            let vh = g.slice_cols(v_all, off, self.head_dim);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let scores = g.masked_fill_neg_inf(scores, allowed.clone());
            let probs = g.softmax(scores);
            heads.push(g.matmul(probs, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        (self.o.forward(g, merged), k, v)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new<A: Scalar, R: Rng>(store: &mut ParamStore<A>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward<A: Scalar>(&self, g: &mut Graph<'_, A>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.silu(h);
        self.down.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attn_norm: RmsNorm,
    pub attn: Attention,
    pub mlp_norm: RmsNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<A: Scalar, R: Rng>(store: &mut ParamStore<A>, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            attn_norm: RmsNorm::new(store, &format!("{name}.attn_norm"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            mlp_norm: RmsNorm::new(store, &format!("{name}.mlp_norm"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, ffn, rng),
        }
    }
}

/// Output of one stack evaluation: final hidden rows plus each layer's fresh keys/values.
pub struct StackOutput {
    pub hidden: Var,
    pub kv: Vec<(Var, Var)>,
}

/// Pre-norm transformer stack with rotary positions.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    pub final_norm: RmsNorm,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl Transformer {
    pub fn new<A: Scalar, R: Rng>(
        store: &mut ParamStore<A>,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers).map(|l| Block::new(store, &format!("{name}.{l}"), dim, heads, ffn, rng)).collect();
        Self { blocks, final_norm: RmsNorm::new(store, &format!("{name}.final_norm"), dim), n_heads: heads, head_dim: dim / heads }
    }

    pub fn rope_table<A: Scalar>(&self, positions: &[usize]) -> Rc<RopeTable<A>> {
        Rc::new(RopeTable::new(positions, self.n_heads, self.head_dim, ROPE_BASE))
    }

    /// `layer_bias[l]`, when given, is added to the residual stream before block `l`.
    pub fn forward<A: Scalar>(
        &self,
        g: &mut Graph<'_, A>,
        x: Var,
        positions: &[usize],
        allowed: &Rc<Array2<bool>>,
        past: Option<&[KvState<A>]>,
        layer_bias: Option<&[Var]>,
    ) -> StackOutput {
        let rope = self.rope_table(positions);
        let mut h = x;
        let mut kv = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            if let Some(bias) = layer_bias {
                h = g.add(h, bias[l]);
            }
            let n = block.attn_norm.forward(g, h);
            let (a, k, v) = block.attn.forward(g, n, &rope, allowed, past.map(|p| &p[l]));
            h = g.add(h, a);
            let n = block.mlp_norm.forward(g, h);
            let m = block.mlp.forward(g, n);
            h = g.add(h, m);
            kv.push((k, v));
        }
        StackOutput { hidden: self.final_norm.forward(g, h), kv }
    }
}

/// Standard lower-triangular causal mask over `past + new` keys.
pub fn causal_mask(past: usize, new: usize) -> Array2<bool> {
    Array2::from_shape_fn((new, past + new), |(i, j)| j <= past + i)
}

/// Sinusoidal embedding of scalar timesteps, one row per timestep.
pub fn timestep_embedding<A: Scalar>(ts: &[f64], dim: usize) -> Array2<A> {
    let half = dim / 2;
    Array2::from_shape_fn((ts.len(), dim), |(r, c)| {
        let j = c % half.max(1);
        let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
        let arg = ts[r] * 1000.0 * freq;
        A::lit(if c < half { arg.sin() } else { arg.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kv_prefix_matches_full_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let stack = Transformer::new(&mut store, "t", 2, 8, 2, 16, &mut rng);
        let x = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let positions: Vec<usize> = (0..5).collect();

        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let full = stack.forward(&mut g, xv, &positions, &Rc::new(causal_mask(0, 5)), None, None);
        let full_out = g.value(full.hidden).to_owned();

        let mut g1 = Graph::new(&store);
        let head = g1.constant(x.slice(ndarray::s![0..3, ..]).to_owned());
        let first = stack.forward(&mut g1, head, &positions[..3], &Rc::new(causal_mask(0, 3)), None, None);
        let past: Vec<KvState<f64>> =
            first.kv.iter().map(|&(k, v)| KvState { keys: g1.value(k).to_owned(), values: g1.value(v).to_owned() }).collect();
        let mut g2 = Graph::new(&store);
        let tail = g2.constant(x.slice(ndarray::s![3..5, ..]).to_owned());
        let second = stack.forward(&mut g2, tail, &positions[3..], &Rc::new(causal_mask(3, 2)), Some(&past), None);
        let tail_out = g2.value(second.hidden).to_owned();
        for (a, b) in tail_out.iter().zip(full_out.slice(ndarray::s![3..5, ..]).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(2, 3);
        assert_eq!(m.dim(), (3, 5));
        assert!(m[[0, 2]] && !m[[0, 3]] && m[[2, 4]]);
    }
}
