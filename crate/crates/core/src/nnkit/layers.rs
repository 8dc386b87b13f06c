use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.insert_uniform(format!("{name}.weight"), in_dim, in_dim, out_dim, rng);
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Stack of affine layers with ReLU between them; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub layers: Vec<Linear>,
}

impl Ffn {
    /// `widths = [in, hidden.., out]`; needs at least two entries.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an FFN needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i < last {
                x = g.relu(x);
            }
        }
        x
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `n_q x n_k` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q_proj: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k_proj: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v_proj: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out_proj: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, key: Var, value: Var) -> AttentionOutput {
        let dim = self.q_proj.out_dim;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.q_proj.forward(g, query);
        let k = self.k_proj.forward(g, key);
        let v = self.v_proj.forward(g, value);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
            weights.push(attn);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        AttentionOutput {
            output: self.out_proj.forward(g, merged),
            weights,
        }
    }
}

/// Head-averaged attention matrix.
pub fn mean_attention(g: &Graph, weights: &[Var]) -> Tensor {
    let first = g.value(weights[0]);
    let mut out = Tensor::zeros(first.rows(), first.cols());
    for w in weights {
        out.add_assign(g.value(*w));
    }
    let n = weights.len() as f64;
    out.map(|v| v / n)
}

/// Valid strided convolution over `channels x (h*w)` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.insert_uniform(format!("{name}.weight"), fan_in, out_channels, fan_in, rng);
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(1, out_channels));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Var {
        let weight = g.param(self.weight);
        let bias = g.param(self.bias);
        g.conv2d(x, h, w, weight, bias, self.kernel, self.stride)
    }
}

/// Fixed 2-D sinusoidal encoding for an `h x w` grid, one row per cell in
/// row-major order. The first `d/2` channels encode the row index and the
/// rest the column index, with sine and cosine interleaved.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Tensor {
    assert!(d % 4 == 0, "positional encoding width must be divisible by 4");
    let half = d / 2;
    let two_pi = std::f64::consts::TAU;
    let mut out = Tensor::zeros(h * w, d);
    for y in 0..h {
        for x in 0..w {
            let row = out.row_mut(y * w + x);
            let py = (y as f64 + 1.0) / (h as f64) * two_pi;
            let px = (x as f64 + 1.0) / (w as f64) * two_pi;
            for i in 0..half / 2 {
                let freq = 10000f64.powf(-(2.0 * i as f64) / half as f64);
                row[2 * i] = (py * freq).sin();
                row[2 * i + 1] = (py * freq).cos();
                row[half + 2 * i] = (px * freq).sin();
                row[half + 2 * i + 1] = (px * freq).cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut rng);
        let q = rand_tensor(&mut rng, 3, 8);
        let kv = rand_tensor(&mut rng, 1, 8);
        let mut g = Graph::new(&store);
        let (qv, kvv) = (g.constant(q), g.constant(kv));
        let out = mha.forward(&mut g, qv, kvv, kvv);
        let v = mha.v_proj.forward(&mut g, kvv);
        let expected = mha.out_proj.forward(&mut g, v);
        for r in 0..3 {
            for c in 0..8 {
                let a = g.value(out.output).get(r, c);
                assert!((a - g.value(expected).get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "attn", 8, 4, &mut rng);
        let x = rand_tensor(&mut rng, 5, 8);
        let y = rand_tensor(&mut rng, 7, 8);
        let mut g = Graph::new(&store);
        let (xv, yv) = (g.constant(x), g.constant(y));
        let out = mha.forward(&mut g, xv, yv, yv);
        assert_eq!(out.weights.len(), 4);
        for w in &out.weights {
            let t = g.value(*w);
            assert_eq!(t.shape(), (5, 7));
            for r in 0..5 {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mha_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut rng);
        let q = store.insert("q_in", rand_tensor(&mut rng, 3, 8));
        let kv = store.insert("kv_in", rand_tensor(&mut rng, 4, 8));
        let probe = rand_tensor(&mut rng, 3, 8);
        let report = check_gradients(&store, 1e-5, usize::MAX, |g| {
            let (qv, kvv) = (g.param(q), g.param(kv));
            let out = mha.forward(g, qv, kvv, kvv).output;
            let p = g.constant(probe.clone());
            let prod = g.mul(out, p);
            g.sum_all(prod)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn ffn_zero_params_propagate_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ffn = Ffn::new(&mut store, "ffn", &[4, 6, 3], &mut rng);
        for l in &ffn.layers {
            store.get_mut(l.weight).data_mut().fill(0.0);
        }
        store.get_mut(ffn.layers[1].bias).data_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
        let mut g = Graph::new(&store);
        let x = g.constant(rand_tensor(&mut rng, 2, 4));
        let y = ffn.forward(&mut g, x);
        assert_eq!(g.value(y).row(1), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn ffn_identity_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ffn = Ffn::new(&mut store, "ffn", &[5, 5], &mut rng);
        *store.get_mut(ffn.layers[0].weight) = Tensor::identity(5);
        let x = rand_tensor(&mut rng, 3, 5);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = ffn.forward(&mut g, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ffn_and_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let ffn = Ffn::new(&mut store, "ffn", &[6, 7, 5], &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", 6);
        // Perturb the norm so its gain and bias are not trivially 1 and 0.
        *store.get_mut(ln.gamma) = rand_tensor(&mut rng, 1, 6);
        *store.get_mut(ln.beta) = rand_tensor(&mut rng, 1, 6);
        let x = store.insert("x", rand_tensor(&mut rng, 4, 6));
        let probe = rand_tensor(&mut rng, 4, 5);
        let report = check_gradients(&store, 1e-5, usize::MAX, |g| {
            let xv = g.param(x);
            let h = ln.forward(g, xv);
            let y = ffn.forward(g, h);
            let p = g.constant(probe.clone());
            let prod = g.mul(y, p);
            g.sum_all(prod)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn conv_gradients_including_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let c1 = Conv2d::new(&mut store, "c1", 2, 3, 3, 2, &mut rng);
        let c2 = Conv2d::new(&mut store, "c2", 3, 2, 2, 1, &mut rng);
        let x = store.insert("x", rand_tensor(&mut rng, 2, 49));
        let report = check_gradients(&store, 1e-5, usize::MAX, |g| {
            let xv = g.param(x);
            let h = c1.forward(g, xv, 7, 7);
            let h = g.sigmoid(h);
            let side = c1.output_side(7);
            let y = c2.forward(g, h, side, side);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, &mut rng);
        *store.get_mut(conv.bias) = rand_tensor(&mut rng, 1, 3);
        let x = rand_tensor(&mut rng, 2, 64);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = conv.forward(&mut g, xv, 8, 8);
        let w = store.get(conv.weight);
        let side = conv.output_side(8);
        for oc in 0..3 {
            for oy in 0..side {
                for ox in 0..side {
                    let mut s = store.get(conv.bias).data()[oc];
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += w.get(oc, ic * 9 + ky * 3 + kx)
                                    * x.get(ic, (oy * 2 + ky) * 8 + ox * 2 + kx);
                            }
                        }
                    }
                    assert!((g.value(y).get(oc, oy * side + ox) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn positional_encoding_properties() {
        let d = 16;
        let pe = positional_encoding(4, 5, d);
        assert_eq!(pe.shape(), (20, d));
        let bound = (d as f64 / 2.0).sqrt();
        for i in 0..20 {
            let norm = pe.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= bound + 1e-12);
            for j in 0..i {
                assert_ne!(pe.row(i), pe.row(j));
            }
        }
        assert_eq!(pe, positional_encoding(4, 5, d));
    }
}
