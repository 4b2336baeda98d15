//! Layer wrappers over the tape: linear projections, layer norm, two-layer
//! MLPs, masked multi-head attention, embedding tables and the sinusoidal
//! timestep embedding.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamStore};
use super::tape::{Array, AttentionMask, Ctx, NnError, TensorId};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.register(&w, in_dim, out_dim, Init::TruncNormal, rng);
        store.register(&b, 1, out_dim, Init::Zeros, rng);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: TensorId) -> Result<TensorId, NnError> {
        let w = ctx.param(&self.w)?;
        let b = ctx.param(&self.b)?;
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: String,
    pub b: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = format!("{name}.g");
        let b = format!("{name}.b");
        store.register(&g, 1, dim, Init::Zeros, rng);
        // gamma starts at one
        let ones = Array::from_vec(1, dim, vec![1.0; dim]);
        store.set(&g, ones).unwrap();
        store.register(&b, 1, dim, Init::Zeros, rng);
        LayerNorm { g, b }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: TensorId) -> Result<TensorId, NnError> {
        let g = ctx.param(&self.g)?;
        let b = ctx.param(&self.b)?;
        ctx.tape.layer_norm(x, g, b)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.l1"), in_dim, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, out_dim, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: TensorId) -> Result<TensorId, NnError> {
        let h = self.l1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.l2.forward(ctx, h)
    }
}

/// Multi-head scaled dot-product attention. Self-attention when the query
/// and key/value sources coincide; permutation-equivariant over query rows
/// and permutation-invariant over key/value rows.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(dim % heads, 0, "width must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), kv_dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), kv_dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        q_tokens: TensorId,
        kv_tokens: TensorId,
        mask: Option<Rc<AttentionMask>>,
    ) -> Result<TensorId, NnError> {
        let q = self.wq.forward(ctx, q_tokens)?;
        let k = self.wk.forward(ctx, kv_tokens)?;
        let v = self.wv.forward(ctx, kv_tokens)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.tape.slice_cols(q, h * dh, dh)?;
            let kh = ctx.tape.slice_cols(k, h * dh, dh)?;
            let vh = ctx.tape.slice_cols(v, h * dh, dh)?;
            let kt = ctx.tape.transpose(kh);
            let scores = ctx.tape.matmul(qh, kt)?;
            let scores = ctx.tape.scale(scores, scale);
            let probs = ctx.tape.softmax_rows(scores, mask.clone())?;
            heads.push(ctx.tape.matmul(probs, vh)?);
        }
        let cat = ctx.tape.concat_cols(&heads)?;
        self.wo.forward(ctx, cat)
    }
}

/// Learned embedding table looked up by integer index.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: String,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = format!("{name}.table");
        store.register(&table, count, dim, Init::Normal, rng);
        Embedding { table, count, dim }
    }

    pub fn forward(&self, ctx: &mut Ctx, indices: &[usize]) -> Result<TensorId, NnError> {
        let t = ctx.param(&self.table)?;
        ctx.tape.gather_rows(t, indices)
    }
}

/// Sinusoidal timestep features: `dim/2` sine and `dim/2` cosine channels
/// with geometrically spaced frequencies. `t = 0` yields all-zero sines and
/// all-one cosines.
pub fn timestep_embedding(t: usize, dim: usize) -> Array {
    assert!(dim >= 2 && dim % 2 == 0, "timestep embedding dim must be even");
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data[i] = (t as f64 * freq).sin();
        data[half + i] = (t as f64 * freq).cos();
    }
    Array::from_vec(1, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Max relative error between the tape gradient of `param` and central
    /// finite differences, for a loss rebuilt by `forward`.
    fn check_param<F>(store: &mut ParamStore, param: &str, mut forward: F) -> f64
    where
        F: FnMut(&mut Ctx) -> TensorId,
    {
        let analytic = {
            let mut ctx = Ctx::new(store);
            let loss = forward(&mut ctx);
            ctx.backward(loss).unwrap();
            ctx.grads().remove(param).unwrap_or_else(|| {
                let s = store.get(param).unwrap().shape();
                Array::zeros(s[0], s[1])
            })
        };
        let h = 1e-4;
        let base = store.get(param).unwrap().clone();
        let mut max_rel = 0.0f64;
        for i in 0..base.data.len() {
            let mut plus = base.clone();
            plus.data[i] += h;
            store.set(param, plus).unwrap();
            let fp = {
                let mut ctx = Ctx::new(store);
                let loss = forward(&mut ctx);
                ctx.tape.value(loss).data[0]
            };
            let mut minus = base.clone();
            minus.data[i] -= h;
            store.set(param, minus).unwrap();
            let fm = {
                let mut ctx = Ctx::new(store);
                let loss = forward(&mut ctx);
                ctx.tape.value(loss).data[0]
            };
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
        store.set(param, base).unwrap();
        max_rel
    }

    #[test]
    fn linear_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "id", 3, 3, &mut rng);
        let mut eye = Array::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        store.set("id.w", eye).unwrap();
        let mut ctx = Ctx::new(&store);
        let x = ctx.tape.constant(Array::from_rows(&[vec![1.0, -2.0, 3.0]]));
        let y = lin.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.value(y).data, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4, &mut rng);
        let mut ctx = Ctx::new(&store);
        let x = ctx.tape.constant(Array::from_rows(&[vec![2.5; 4]]));
        let y = ln.forward(&mut ctx, x).unwrap();
        for v in &ctx.tape.value(y).data {
            assert!(v.abs() < 1e-6, "pre-affine normalization of a constant row should be ~0");
        }
    }

    #[test]
    fn single_token_self_attention_is_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 8, 2, &mut rng);
        let mut ctx = Ctx::new(&store);
        let xv = Array::from_rows(&[(0..8).map(|i| 0.1 * i as f64).collect()]);
        let x = ctx.tape.constant(xv.clone());
        let y = mha.forward(&mut ctx, x, x, None).unwrap();
        // softmax over one key is 1, so the output is Wo(V(x)) exactly
        let v = mha.wv.forward(&mut ctx, x).unwrap();
        let expect = mha.wo.forward(&mut ctx, v).unwrap();
        let (ya, ea) = (ctx.tape.value(y).clone(), ctx.tape.value(expect).clone());
        for (a, b) in ya.data.iter().zip(&ea.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_invariant_to_kv_permutation_and_equivariant_to_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 8, 2, &mut rng);
        let q_rows: Vec<Vec<f64>> = (0..3).map(|r| (0..8).map(|c| ((r * 8 + c) as f64).sin()).collect()).collect();
        let kv_rows: Vec<Vec<f64>> = (0..4).map(|r| (0..8).map(|c| ((r * 8 + c) as f64).cos()).collect()).collect();

        let run = |q: &[Vec<f64>], kv: &[Vec<f64>]| {
            let mut ctx = Ctx::new(&store);
            let qt = ctx.tape.constant(Array::from_rows(q));
            let kt = ctx.tape.constant(Array::from_rows(kv));
            let y = mha.forward(&mut ctx, qt, kt, None).unwrap();
            ctx.tape.value(y).clone()
        };

        let base = run(&q_rows, &kv_rows);
        let kv_perm: Vec<Vec<f64>> = vec![kv_rows[2].clone(), kv_rows[0].clone(), kv_rows[3].clone(), kv_rows[1].clone()];
        let perm_kv = run(&q_rows, &kv_perm);
        for (a, b) in base.data.iter().zip(&perm_kv.data) {
            assert!((a - b).abs() < 1e-12, "kv permutation changed the output");
        }

        let q_perm: Vec<Vec<f64>> = vec![q_rows[1].clone(), q_rows[2].clone(), q_rows[0].clone()];
        let perm_q = run(&q_perm, &kv_rows);
        for r in 0..3 {
            let src = [1usize, 2, 0][r];
            for c in 0..8 {
                assert!((perm_q.at(r, c) - base.at(src, c)).abs() < 1e-12, "q permutation not equivariant");
            }
        }
    }

    #[test]
    fn timestep_embedding_closed_form() {
        let e0 = timestep_embedding(0, 8);
        for i in 0..4 {
            assert_eq!(e0.data[i], 0.0);
            assert_eq!(e0.data[4 + i], 1.0);
        }
        let e1 = timestep_embedding(1, 4);
        let f0 = 1.0f64;
        let f1 = (-(10000f64.ln()) / 2.0).exp();
        assert!((e1.data[0] - f0.sin()).abs() < 1e-15);
        assert!((e1.data[1] - f1.sin()).abs() < 1e-15);
        assert!((e1.data[2] - f0.cos()).abs() < 1e-15);
        assert!((e1.data[3] - f1.cos()).abs() < 1e-15);
        assert_ne!(timestep_embedding(3, 16).data, timestep_embedding(4, 16).data);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 5, 7, 3, &mut rng);
        let xv = Array::from_rows(&[
            (0..5).map(|i| 0.3 * (i as f64) - 0.7).collect(),
            (0..5).map(|i| 0.2 * (i as f64 + 1.0)).collect(),
        ]);
        for param in ["m.l1.w", "m.l1.b", "m.l2.w", "m.l2.b"] {
            let err = check_param(&mut store, param, |ctx| {
                let x = ctx.tape.constant(xv.clone());
                let y = mlp.forward(ctx, x).unwrap();
                let sq = ctx.tape.mul(y, y).unwrap();
                ctx.tape.mean_all(sq)
            });
            assert!(err < 1e-5, "{param}: rel err {err}");
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 6, 2, &mut rng);
        let q = Array::from_rows(&(0..3).map(|r| (0..8).map(|c| ((r + c) as f64 * 0.37).sin()).collect()).collect::<Vec<_>>());
        let kv = Array::from_rows(&(0..4).map(|r| (0..6).map(|c| ((r * c) as f64 * 0.21).cos()).collect()).collect::<Vec<_>>());
        for param in ["a.wq.w", "a.wk.w", "a.wv.w", "a.wo.w", "a.wq.b", "a.wk.b"] {
            let err = check_param(&mut store, param, |ctx| {
                let qt = ctx.tape.constant(q.clone());
                let kt = ctx.tape.constant(kv.clone());
                let y = mha.forward(ctx, qt, kt, None).unwrap();
                let sq = ctx.tape.mul(y, y).unwrap();
                ctx.tape.mean_all(sq)
            });
            assert!(err < 1e-5, "{param}: rel err {err}");
        }
    }

    #[test]
    fn masked_attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 6, 2, &mut rng);
        let q = Array::from_rows(&(0..3).map(|r| (0..8).map(|c| ((r + c) as f64 * 0.31).sin()).collect()).collect::<Vec<_>>());
        let kv = Array::from_rows(&(0..4).map(|r| (0..6).map(|c| ((r + 2 * c) as f64 * 0.17).cos()).collect()).collect::<Vec<_>>());
        let mask = Rc::new(AttentionMask {
            valid: vec![vec![true, false, true, false], vec![false, false, false, false], vec![true, true, true, true]],
        });
        for param in ["a.wq.w", "a.wk.w", "a.wv.w", "a.wo.w"] {
            let err = check_param(&mut store, param, |ctx| {
                let qt = ctx.tape.constant(q.clone());
                let kt = ctx.tape.constant(kv.clone());
                let y = mha.forward(ctx, qt, kt, Some(mask.clone())).unwrap();
                let sq = ctx.tape.mul(y, y).unwrap();
                ctx.tape.mean_all(sq)
            });
            assert!(err < 1e-5, "{param}: rel err {err}");
        }
    }

    #[test]
    fn embedding_and_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "e", 6, 4, &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", 4, &mut rng);
        // O(1) table entries keep the finite-difference step well-conditioned
        let table = Array::from_vec(6, 4, (0..24).map(|i| ((i * 7 + 3) as f64 * 0.41).sin()).collect());
        store.set("e.table", table).unwrap();
        for param in ["e.table", "ln.g", "ln.b"] {
            let err = check_param(&mut store, param, |ctx| {
                let x = emb.forward(ctx, &[0, 3, 3, 5]).unwrap();
                let y = ln.forward(ctx, x).unwrap();
                let sq = ctx.tape.mul(y, y).unwrap();
                ctx.tape.mean_all(sq)
            });
            assert!(err < 1e-5, "{param}: rel err {err}");
        }
    }
}
