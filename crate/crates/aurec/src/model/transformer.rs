//! Relation learning over AU tokens: one post-norm encoder layer over the
//! per-side token set, one decoder layer driven by a learnable query bank,
//! no positional embedding. Left and right decodes are averaged.

use ndarray::Array2;
use rand::Rng;

use super::layers::{LayerNorm, Linear};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{normal, ParamId, ParamStore, Scalar, Tape, Var};

/// Scaled dot-product attention with `heads` heads and no projections:
/// `[B,Nq,d] x [B,Nk,d] x [B,Nk,d] -> [B,Nq,d]`.
pub fn attention<S: Scalar>(t: &Tape<S>, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let qs = t.shape(q);
    let ks = t.shape(k);
    let (b, nq, d) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    assert_eq!(d % heads, 0, "head count must divide the token dim");
    let dk = d / heads;

    let split = |x: Var, n: usize| {
        let x = t.reshape(x, &[b, n, heads, dk]);
        let x = t.permute(x, &[0, 2, 1, 3]);
        t.reshape(x, &[b * heads, n, dk])
    };
    let qh = split(q, nq);
    let kh = split(k, nk);
    let vh = split(v, nk);

    let kt = t.permute(kh, &[0, 2, 1]);
    let scores = t.scale(t.bmm(qh, kt), 1.0 / (dk as f64).sqrt());
    let attn = t.softmax_last(scores);
    let ctx = t.bmm(attn, vh);

    let ctx = t.reshape(ctx, &[b, heads, nq, dk]);
    let ctx = t.permute(ctx, &[0, 2, 1, 3]);
    t.reshape(ctx, &[b, nq, d])
}

pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d, true),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d, true),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d, true),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d, true),
            heads,
        }
    }

    fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, q: Var, kv: Var) -> Var {
        let qp = self.wq.apply(t, store, q, false);
        let kp = self.wk.apply(t, store, kv, false);
        let vp = self.wv.apply(t, store, kv, false);
        let ctx = attention(t, qp, kp, vp, self.heads);
        self.wo.apply(t, store, ctx, false)
    }
}

struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, d: usize) -> Self {
        FeedForward {
            lin1: Linear::new(store, rng, &format!("{name}.lin1"), d, 4 * d, true),
            lin2: Linear::new(store, rng, &format!("{name}.lin2"), 4 * d, d, true),
        }
    }

    fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = t.relu(self.lin1.apply(t, store, x, false));
        self.lin2.apply(t, store, h, false)
    }
}

pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

impl EncoderLayer {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, d: usize, heads: usize) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }

    fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let a = self.attn.apply(t, store, x, x);
        let x = self.ln1.apply(t, store, t.add(x, a), false);
        let f = self.ff.apply(t, store, x);
        self.ln2.apply(t, store, t.add(x, f), false)
    }
}

pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
    ln3: LayerNorm,
}

impl DecoderLayer {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, d: usize, heads: usize) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
        }
    }

    fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, q: Var, memory: Var) -> Var {
        let a = self.self_attn.apply(t, store, q, q);
        let q = self.ln1.apply(t, store, t.add(q, a), false);
        let c = self.cross_attn.apply(t, store, q, memory);
        let q = self.ln2.apply(t, store, t.add(q, c), false);
        let f = self.ff.apply(t, store, q);
        self.ln3.apply(t, store, t.add(q, f), false)
    }
}

pub struct Relation {
    pub queries: ParamId,
    enc: EncoderLayer,
    dec: DecoderLayer,
}

pub struct RelationOut {
    pub decoded: Var,
    pub decoded_left: Var,
    pub decoded_right: Var,
}

impl Relation {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let queries = store.add("relation.queries", normal(&[cfg.au_count, d], 0.02, rng));
        Relation {
            queries,
            enc: EncoderLayer::new(store, rng, "relation.enc", d, cfg.heads),
            dec: DecoderLayer::new(store, rng, "relation.dec", d, cfg.heads),
        }
    }

    /// Encode each side's tokens, decode the query bank against each side's
    /// memory, and average the two decodes.
    pub fn apply<S: Scalar>(
        &self,
        t: &Tape<S>,
        store: &ParamStore<S>,
        tokens_left: Var,
        tokens_right: Var,
    ) -> RelationOut {
        let b = t.shape(tokens_left)[0];
        let q = t.param(store, self.queries);
        let qb = t.broadcast0(q, b);
        let mem_l = self.enc.apply(t, store, tokens_left);
        let mem_r = self.enc.apply(t, store, tokens_right);
        let dec_l = self.dec.apply(t, store, qb, mem_l);
        let dec_r = self.dec.apply(t, store, qb, mem_r);
        let decoded = t.scale(t.add(dec_l, dec_r), 0.5);
        RelationOut {
            decoded,
            decoded_left: dec_l,
            decoded_right: dec_r,
        }
    }

    /// Pairwise cosine similarity of the query bank rows.
    pub fn query_similarity<S: Scalar>(&self, store: &ParamStore<S>) -> Result<Array2<f64>> {
        let q = store.value(self.queries);
        let n = q.shape()[0];
        let d = q.shape()[1];
        let mut sim = Array2::zeros((n, n));
        let row = |i: usize| -> Vec<f64> {
            (0..d).map(|j| q[[i, j]].as_f64()).collect()
        };
        let norms: Vec<f64> = (0..n)
            .map(|i| row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        for (i, &ni) in norms.iter().enumerate() {
            if ni < 1e-12 {
                return Err(Error::Data(format!("query {i} has zero norm")));
            }
            for j in 0..n {
                let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
                sim[[i, j]] = dot / (ni * norms[j]);
            }
        }
        Ok(sim)
    }
}
