//! Layer building blocks on top of the gradient tape.

use gradtape::{ParamId, ParamStore, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Matrix;

/// Variance guard inside layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Registers named parameters under a path prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
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

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        let full = self.full(name);
        self.store.add(full, m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let rng = &mut *self.rng;
        let m = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
        let full = self.full(name);
        self.store.add(full, m)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        let full = self.full(name);
        self.store.add(full, Array2::from_elem((rows, cols), value))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, input: usize, output: usize) -> Self {
        let mut b = b.sub(name);
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: b.uniform("weight", input, output, bound),
            bias: b.uniform("bias", 1, output, bound),
        }
    }

    /// Zero weight and zero bias, so the layer starts as a constant 0.
    pub fn zeros(b: &mut Builder, name: &str, input: usize, output: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            weight: b.constant("weight", input, output, 0.0),
            bias: b.constant("bias", 1, output, 0.0),
        }
    }

    /// Small random weight and a constant bias.
    pub fn with_bias(
        b: &mut Builder,
        name: &str,
        input: usize,
        output: usize,
        weight_std: f64,
        bias: f64,
    ) -> Self {
        let mut b = b.sub(name);
        Self {
            weight: b.normal("weight", input, output, weight_std),
            bias: b.constant("bias", 1, output, bias),
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Var {
        let w = t.param(s, self.weight);
        let b = t.param(s, self.bias);
        let y = t.matmul(x, w);
        t.add(y, b)
    }

    pub fn output_dim(&self, s: &ParamStore) -> usize {
        s.value(self.weight).ncols()
    }
}

/// Non-causal 1-D convolution over the row (time) axis with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(
        b: &mut Builder,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        let mut b = b.sub(name);
        let bound = 1.0 / ((input * kernel) as f64).sqrt();
        Self {
            weight: b.uniform("weight", input * kernel, output, bound),
            bias: b.uniform("bias", 1, output, bound),
            kernel,
            dilation,
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Var {
        let half = (self.kernel / 2) as isize;
        let taps: Vec<Var> = (0..self.kernel as isize)
            .map(|j| {
                let shift = (j - half) * self.dilation as isize;
                if shift == 0 {
                    x
                } else {
                    t.shift_rows(x, shift)
                }
            })
            .collect();
        let stacked = if taps.len() == 1 {
            taps[0]
        } else {
            t.concat_cols(&taps)
        };
        let w = t.param(s, self.weight);
        let b = t.param(s, self.bias);
        let y = t.matmul(stacked, w);
        t.add(y, b)
    }
}

/// Per-row layer normalization without affine parameters.
pub fn layer_norm(t: &Tape, x: Var) -> Var {
    let mean = t.mean_cols(x);
    let centered = t.sub(x, mean);
    let sq = t.square(centered);
    let var = t.mean_cols(sq);
    let var = t.add_scalar(var, LN_EPS);
    let std = t.sqrt(var);
    t.div(centered, std)
}

/// Plain-value layer normalization, used by tests and the oracle side.
pub fn layer_norm_values(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) / std);
    }
    out
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            gain: b.constant("gain", 1, dim, 1.0),
            bias: b.constant("bias", 1, dim, 0.0),
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Var {
        let n = layer_norm(t, x);
        let g = t.param(s, self.gain);
        let b = t.param(s, self.bias);
        let y = t.mul(n, g);
        t.add(y, b)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        b: &mut Builder,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim.is_multiple_of(heads), "attention dim must divide into heads");
        let mut b = b.sub(name);
        Self {
            query: Linear::new(&mut b, "query", query_dim, dim),
            key: Linear::new(&mut b, "key", kv_dim, dim),
            value: Linear::new(&mut b, "value", kv_dim, dim),
            out: Linear::new(&mut b, "out", dim, query_dim),
            heads,
            dim,
        }
    }

    /// Attend from each row of `query` to the rows of `context`. Returns the
    /// projected output and the per-head weight matrices.
    pub fn forward(
        &self,
        t: &Tape,
        s: &ParamStore,
        query: Var,
        context: Var,
    ) -> (Var, Vec<Var>) {
        let q = self.query.forward(t, s, query);
        let k = self.key.forward(t, s, context);
        let v = self.value.forward(t, s, context);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, h * dh, dh),
                    t.slice_cols(k, h * dh, dh),
                    t.slice_cols(v, h * dh, dh),
                )
            };
            let kt = t.transpose(kh);
            let scores = t.matmul(qh, kt);
            let scores = t.scale(scores, scale);
            let w = t.softmax_rows(scores);
            outs.push(t.matmul(w, vh));
            weights.push(w);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            t.concat_cols(&outs)
        };
        (self.out.forward(t, s, joined), weights)
    }
}

/// Style-adaptive layer normalization: `g(style) * LN(h) + b(style)`.
#[derive(Debug, Clone)]
pub struct Saln {
    pub gain: Linear,
    pub bias: Linear,
}

impl Saln {
    pub fn new(b: &mut Builder, name: &str, style_dim: usize, hidden: usize) -> Self {
        let mut b = b.sub(name);
        let std = 0.5 / (style_dim as f64).sqrt();
        Self {
            gain: Linear::with_bias(&mut b, "gain", style_dim, hidden, std, 1.0),
            bias: Linear::with_bias(&mut b, "bias", style_dim, hidden, std, 0.0),
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, hidden: Var, style: Var) -> Var {
        let g = self.gain.forward(t, s, style);
        let b = self.bias.forward(t, s, style);
        let n = layer_norm(t, hidden);
        let y = t.mul(n, g);
        t.add(y, b)
    }
}

/// WaveNet-style residual stack: dilated convolutions with tanh·sigmoid
/// gating, residual updates and summed skip outputs.
#[derive(Debug, Clone)]
pub struct WaveNet {
    layers: Vec<(Conv1d, Linear)>,
    channels: usize,
}

impl WaveNet {
    /// `blocks` repetitions of `layers_per_block` layers whose dilation
    /// doubles within a block and resets at the start of the next.
    pub fn new(
        b: &mut Builder,
        name: &str,
        channels: usize,
        kernel: usize,
        blocks: usize,
        layers_per_block: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let mut layers = Vec::new();
        for block in 0..blocks {
            for l in 0..layers_per_block {
                let dilation = 1usize << l;
                let tag = format!("b{block}l{l}");
                let conv = Conv1d::new(
                    &mut b,
                    &format!("{tag}.conv"),
                    channels,
                    2 * channels,
                    kernel,
                    dilation,
                );
                let res_skip = Linear::new(&mut b, &format!("{tag}.res_skip"), channels, 2 * channels);
                layers.push((conv, res_skip));
            }
        }
        Self { layers, channels }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.layers.iter().map(|(c, _)| c.dilation).collect()
    }

    /// Returns the summed skip connections, `[T × channels]`.
    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Var {
        let c = self.channels;
        let mut x = x;
        let mut skip: Option<Var> = None;
        for (conv, res_skip) in &self.layers {
            let h = conv.forward(t, s, x);
            let a = t.slice_cols(h, 0, c);
            let g = t.slice_cols(h, c, c);
            let a = t.tanh(a);
            let g = t.sigmoid(g);
            let acts = t.mul(a, g);
            let rs = res_skip.forward(t, s, acts);
            let res = t.slice_cols(rs, 0, c);
            let sk = t.slice_cols(rs, c, c);
            x = t.add(x, res);
            skip = Some(match skip {
                Some(prev) => t.add(prev, sk),
                None => sk,
            });
        }
        skip.unwrap_or(x)
    }
}

/// Sinusoidal embedding of real-valued positions, `[n × dim]`.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Matrix {
    let half = dim / 2;
    Array2::from_shape_fn((positions.len(), dim), |(i, j)| {
        let k = j % half.max(1);
        let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let arg = positions[i] * freq;
        if j < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Softplus on plain values.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn conv_kernel_one_is_position_wise() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d::new(&mut Builder::new(&mut store, &mut rng, ""), "c", 2, 3, 1, 1);
        let t = Tape::new();
        let x = t.constant(array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let y = t.value(conv.forward(&t, &store, x)).clone();
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(y.row(1), y.row(2));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv1d::new(&mut Builder::new(&mut store, &mut rng, ""), "c", 1, 1, 3, 2);
        let w = store.value(conv.weight).clone();
        let b = store.value(conv.bias)[[0, 0]];
        let x = [1.0, -2.0, 0.5, 3.0, 4.0];
        let t = Tape::new();
        let xv = t.constant(Array2::from_shape_vec((5, 1), x.to_vec()).unwrap());
        let y = t.value(conv.forward(&t, &store, xv)).clone();
        for i in 0..5 {
            let mut expect = b;
            for j in 0..3 {
                let src = i as isize + (j as isize - 1) * 2;
                if (0..5).contains(&src) {
                    expect += w[[j, 0]] * x[src as usize];
                }
            }
            assert!((y[[i, 0]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn wavenet_dilations_restart_per_block() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wn = WaveNet::new(&mut Builder::new(&mut store, &mut rng, ""), "wn", 4, 3, 4, 2);
        assert_eq!(wn.num_layers(), 8);
        assert_eq!(wn.dilations(), vec![1, 2, 1, 2, 1, 2, 1, 2]);
    }

    #[test]
    fn layer_norm_matches_values() {
        let x = array![[1.0, 2.0, 4.0], [3.0, 3.0, 3.0]];
        let t = Tape::new();
        let v = t.constant(x.clone());
        let n = t.value(layer_norm(&t, v)).clone();
        let expect = layer_norm_values(&x);
        for (a, b) in n.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // constant row normalizes to zeros
        assert!(n.row(1).iter().all(|v| v.abs() < 1e-12));
    }
}
