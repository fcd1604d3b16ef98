//! Multi-head attention and post-norm transformer encoder/decoder layers.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// `softmax(q·kᵀ / √d_k) · v`, returning the output and the attention weights.
pub fn scaled_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(Error::dim("scaled_attention", sq, sk));
    }
    let dk = sq[1] as f64;
    let logits = g.matmul_nt(q, k)?;
    let logits = g.scale(logits, 1.0 / dk.sqrt());
    let weights = g.softmax_rows(logits)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        let mut mat = |name: &str| store.insert_uniform(format!("{prefix}.{name}"), &[dim, dim], dim, rng);
        Ok(MultiHeadAttention {
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Returns the projected output `[q × dim]` and one `[q × s]` weight map per head.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Result<(Var, Vec<Var>)> {
        for x in [q_in, k_in, v_in] {
            if g.shape(x).len() != 2 || g.shape(x)[1] != self.dim {
                return Err(Error::dim("multi_head_attention", g.shape(x), &[self.dim]));
            }
        }
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let wo = g.param(store, self.wo);
        let q = g.matmul(q_in, wq)?;
        let k = g.matmul(k_in, wk)?;
        let v = g.matmul(v_in, wv)?;
        let hd = self.head_dim();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_last(q, h * hd, (h + 1) * hd)?,
                    g.slice_last(k, h * hd, (h + 1) * hd)?,
                    g.slice_last(v, h * hd, (h + 1) * hd)?,
                )
            };
            let (o, w) = scaled_attention(g, qh, kh, vh)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_last(&outs)?
        };
        Ok((g.matmul(cat, wo)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: store.insert_full(format!("{prefix}.gamma"), &[dim], 1.0),
            beta: store.insert_full(format!("{prefix}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            w1: store.insert_uniform(format!("{prefix}.w1"), &[dim, hidden], dim, rng),
            b1: store.insert_uniform(format!("{prefix}.b1"), &[hidden], dim, rng),
            w2: store.insert_uniform(format!("{prefix}.w2"), &[hidden, dim], hidden, rng),
            b2: store.insert_uniform(format!("{prefix}.b2"), &[dim], hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let y = g.matmul(h, w2)?;
        g.add(y, b2)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNormParams,
    pub ffn: FeedForward,
    pub norm2: LayerNormParams,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if ff_dim < dim {
            return Err(Error::Config(format!(
                "feed-forward width {ff_dim} is smaller than model width {dim}"
            )));
        }
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), dim, heads, rng)?,
            norm1: LayerNormParams::new(store, &format!("{prefix}.norm1"), dim),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), dim, ff_dim, rng),
            norm2: LayerNormParams::new(store, &format!("{prefix}.norm2"), dim),
        })
    }

    /// Self-attention over the rows of `x`; returns the output and per-head weights.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let (a, weights) = self.attn.forward(g, store, x, x, x)?;
        let r = g.add(x, a)?;
        let x1 = self.norm1.forward(g, store, r)?;
        let f = self.ffn.forward(g, store, x1)?;
        let r = g.add(x1, f)?;
        Ok((self.norm2.forward(g, store, r)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Option<(MultiHeadAttention, LayerNormParams)>,
    pub cross_attn: MultiHeadAttention,
    pub norm_cross: LayerNormParams,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNormParams,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        query_self_attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if ff_dim < dim {
            return Err(Error::Config(format!(
                "feed-forward width {ff_dim} is smaller than model width {dim}"
            )));
        }
        let self_attn = if query_self_attention {
            Some((
                MultiHeadAttention::new(store, &format!("{prefix}.self_attn"), dim, heads, rng)?,
                LayerNormParams::new(store, &format!("{prefix}.norm_self"), dim),
            ))
        } else {
            None
        };
        Ok(DecoderLayer {
            self_attn,
            cross_attn: MultiHeadAttention::new(store, &format!("{prefix}.cross_attn"), dim, heads, rng)?,
            norm_cross: LayerNormParams::new(store, &format!("{prefix}.norm_cross"), dim),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), dim, ff_dim, rng),
            norm_ffn: LayerNormParams::new(store, &format!("{prefix}.norm_ffn"), dim),
        })
    }

    /// Returns the updated queries and the per-head cross-attention weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if g.shape(queries).get(1) != g.shape(memory).get(1) {
            return Err(Error::dim("decoder_layer", g.shape(queries), g.shape(memory)));
        }
        let mut q = queries;
        if let Some((attn, norm)) = &self.self_attn {
            let (a, _) = attn.forward(g, store, q, q, q)?;
            let r = g.add(q, a)?;
            q = norm.forward(g, store, r)?;
        }
        let (a, weights) = self.cross_attn.forward(g, store, q, memory, memory)?;
        let r = g.add(q, a)?;
        let q = self.norm_cross.forward(g, store, r)?;
        let f = self.ffn.forward(g, store, q)?;
        let r = g.add(q, f)?;
        Ok((self.norm_ffn.forward(g, store, r)?, weights))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::autodiff::{all_coords, grad_check, grad_check_params, Tensor};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn weighted(g: &mut Graph, v: Var) -> Result<Var> {
        let shape = g.shape(v).to_vec();
        let w = g.constant(&Tensor::from_fn(&shape, |i| ((i * 5 + 1) as f64).cos()));
        let p = g.mul(v, w)?;
        Ok(g.sum(p))
    }

    /// Direct loops: softmax(q kᵀ/√d) v.
    fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (nq, d) = (q.shape()[0], q.shape()[1]);
        let (ns, dv) = (k.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; nq * dv];
        for i in 0..nq {
            let s: Vec<f64> = (0..ns)
                .map(|j| (0..d).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..ns {
                for c in 0..dv {
                    out[i * dv + c] += e[j] / z * v.at(j, c);
                }
            }
        }
        out
    }

    #[test]
    fn scaled_attention_matches_oracle() {
        let (q, k, v) = (random(&[3, 4], 1), random(&[5, 4], 2), random(&[5, 4], 3));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(&q), g.constant(&k), g.constant(&v));
        let (out, w) = scaled_attention(&mut g, qv, kv, vv).unwrap();
        for (a, b) in g.value(out).iter().zip(attention_oracle(&q, &k, &v)) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in g.value(w).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sharp_self_selection_recovers_values() {
        let v = random(&[4, 4], 4);
        let q = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 100.0 } else { 0.0 });
        let mut g = Graph::new();
        let (qv, vv) = (g.constant(&q), g.constant(&v));
        let (out, w) = scaled_attention(&mut g, qv, qv, vv).unwrap();
        assert!(g.tensor(w).max_abs_diff(&Tensor::identity(4)) < 1e-12);
        assert!(g.tensor(out).max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn zero_queries_average_values() {
        let v = random(&[5, 3], 5);
        let mut g = Graph::new();
        let q = g.constant(&Tensor::zeros(&[2, 3]));
        let k = g.constant(&random(&[5, 3], 6));
        let vv = g.constant(&v);
        let (out, _) = scaled_attention(&mut g, q, k, vv).unwrap();
        for c in 0..3 {
            let mean = (0..5).map(|j| v.at(j, c)).sum::<f64>() / 5.0;
            assert!((g.value(out)[c] - mean).abs() < 1e-12);
            assert!((g.value(out)[3 + c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_attention_rejects_mismatch() {
        let mut g = Graph::new();
        let q = g.constant(&Tensor::zeros(&[2, 3]));
        let k = g.constant(&Tensor::zeros(&[2, 4]));
        assert!(matches!(
            scaled_attention(&mut g, q, k, k),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn identity_single_head_reduces_to_scaled_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 1, &mut rng).unwrap();
        for id in [mha.wq, mha.wk, mha.wv, mha.wo] {
            *store.get_mut(id) = Tensor::identity(4).requiring_grad();
        }
        let (q, k) = (random(&[3, 4], 7), random(&[6, 4], 8));
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(&q), g.constant(&k));
        let (out, _) = mha.forward(&mut g, &store, qv, kv, kv).unwrap();
        for (a, b) in g.value(out).iter().zip(attention_oracle(&q, &k, &k)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_output_shape_independent_of_source_length() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 4, &mut rng).unwrap();
        for s in [1, 3, 17] {
            let mut g = Graph::new();
            let q = g.constant(&random(&[5, 8], 9));
            let kv = g.constant(&random(&[s, 8], 10));
            let (out, w) = mha.forward(&mut g, &store, q, kv, kv).unwrap();
            assert_eq!(g.shape(out), &[5, 8]);
            assert_eq!(w.len(), 4);
            assert_eq!(g.shape(w[0]), &[5, s]);
        }
        assert!(MultiHeadAttention::new(&mut store, "bad", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn mha_grad_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
        let x = random(&[4, 8], 11);
        let err = grad_check(
            |g, x| {
                let (o, _) = mha.forward(g, &store, x, x, x)?;
                weighted(g, o)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "input {err}");
        let err = grad_check_params(
            &store,
            |g, s| {
                let xv = g.constant(&x);
                let (o, _) = mha.forward(g, s, xv, xv, xv)?;
                weighted(g, o)
            },
            &all_coords(&store),
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "params {err}");
    }

    #[test]
    fn encoder_layer_shape_and_grad() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = EncoderLayer::new(&mut store, "enc", 8, 2, 16, &mut rng).unwrap();
        for s in [1, 6, 11] {
            let mut g = Graph::new();
            let x = g.constant(&random(&[s, 8], 12));
            let (y, _) = layer.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(y), &[s, 8]);
        }
        let x = random(&[6, 8], 13);
        let err = grad_check(
            |g, x| {
                let (y, _) = layer.forward(g, &store, x)?;
                weighted(g, y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
        let err = grad_check_params(
            &store,
            |g, s| {
                let xv = g.constant(&x);
                let (y, _) = layer.forward(g, s, xv)?;
                weighted(g, y)
            },
            &all_coords(&store),
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "params {err}");
    }

    #[test]
    fn zero_ffn_leaves_attention_block_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = EncoderLayer::new(&mut store, "enc", 4, 1, 4, &mut rng).unwrap();
        for id in [layer.attn.wq, layer.attn.wk, layer.attn.wv, layer.attn.wo] {
            *store.get_mut(id) = Tensor::identity(4).requiring_grad();
        }
        for id in [layer.ffn.w2, layer.ffn.b2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random(&[5, 4], 14);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let (y, _) = layer.forward(&mut g, &store, xv).unwrap();
        let (a, _) = layer.attn.forward(&mut g, &store, xv, xv, xv).unwrap();
        let r = g.add(xv, a).unwrap();
        let n1 = layer.norm1.forward(&mut g, &store, r).unwrap();
        let n2 = layer.norm2.forward(&mut g, &store, n1).unwrap();
        // LN is idempotent up to eps on already-normalised rows
        assert!(g.tensor(y).max_abs_diff(&g.tensor(n2)) < 1e-12);
        assert!(g.tensor(n1).max_abs_diff(&g.tensor(n2)) < 1e-4);
    }

    #[test]
    fn decoder_single_query_self_attention_is_trivial() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = DecoderLayer::new(&mut store, "dec", 8, 2, 8, true, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.constant(&random(&[1, 8], 15));
        let (attn, _) = layer.self_attn.as_ref().unwrap();
        let (_, w) = attn.forward(&mut g, &store, q, q, q).unwrap();
        for wh in w {
            assert_eq!(g.value(wh), &[1.0]);
        }
    }

    #[test]
    fn constant_memory_makes_attention_irrelevant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = DecoderLayer::new(&mut store, "dec", 8, 2, 8, true, &mut rng).unwrap();
        let row = random(&[1, 8], 16);
        let memory = Tensor::from_fn(&[9, 8], |i| row.data()[i % 8]);
        let queries = random(&[3, 8], 17);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let (q, m) = (g.constant(&queries), g.constant(&memory));
            let (out, _) = layer.forward(&mut g, store, q, m).unwrap();
            g.tensor(out)
        };
        let base = run(&store);
        // changing the key projection reshapes the weights but not the result
        let mut other = store.clone();
        other
            .get_mut(layer.cross_attn.wk)
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 0.37).sin() * 3.0);
        assert!(base.max_abs_diff(&run(&other)) < 1e-12);
    }

    #[test]
    fn decoder_grad_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = DecoderLayer::new(&mut store, "dec", 8, 2, 16, true, &mut rng).unwrap();
        let memory = random(&[9, 8], 18);
        let queries = random(&[4, 8], 19);
        let err = grad_check(
            |g, q| {
                let m = g.constant(&memory);
                let (out, _) = layer.forward(g, &store, q, m)?;
                weighted(g, out)
            },
            &queries,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "queries {err}");
        let err = grad_check(
            |g, m| {
                let q = g.constant(&queries);
                let (out, _) = layer.forward(g, &store, q, m)?;
                weighted(g, out)
            },
            &memory,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "memory {err}");
    }

    #[test]
    fn cross_attention_is_value_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = DecoderLayer::new(&mut store, "dec", 8, 2, 8, false, &mut rng).unwrap();
        let memory = random(&[7, 8], 20);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let permuted = Tensor::from_fn(&[7, 8], |i| memory.at(perm[i / 8], i % 8));
        let queries = random(&[3, 8], 21);
        let run = |m: &Tensor| {
            let mut g = Graph::new();
            let (q, mv) = (g.constant(&queries), g.constant(m));
            let (out, w) = layer.forward(&mut g, &store, q, mv).unwrap();
            (g.tensor(out), g.tensor(w[0]))
        };
        let (a, wa) = run(&memory);
        let (b, wb) = run(&permuted);
        assert!(a.max_abs_diff(&b) <= 1e-12);
        for i in 0..3 {
            for (j, &p) in perm.iter().enumerate() {
                assert!((wb.at(i, j) - wa.at(i, p)).abs() < 1e-15);
            }
        }
    }
}
