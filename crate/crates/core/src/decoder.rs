//! Query-based transformer decoder and the verb/noun/action heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Number of future slots `Z`.
    pub num_queries: usize,
    pub self_attention: bool,
    /// Train the content embeddings instead of holding them at zero.
    pub learnable_content: bool,
    /// Add a learned positional term to the memory keys; needs `memory_len`.
    pub memory_pos: bool,
    pub memory_len: usize,
}

impl DecoderConfig {
    pub fn new(d_model: usize, num_queries: usize, memory_len: usize) -> Self {
        Self {
            d_model,
            layers: 4,
            heads: 8,
            ffn_mult: 4,
            num_queries,
            self_attention: true,
            learnable_content: false,
            memory_pos: false,
            memory_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("at least one future slot is required".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Static content embeddings `Q` and learnable positional embeddings `Q_pos`,
/// one row per future slot in temporal order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuerySet {
    pub content: ParamId,
    pub pos: ParamId,
    pub num_queries: usize,
}

impl QuerySet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, z: usize, d: usize, learnable_content: bool) -> Self {
        let content = store.constant("dec.query.content", &[z, d], 0.0);
        if !learnable_content {
            store.freeze(content);
        }
        let pos = store.randn("dec.query.pos", &[z, d], 1.0);
        Self {
            content,
            pos,
            num_queries: z,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true),
            k: Linear::new(store, &format!("{name}.k"), d, d, true),
            v: Linear::new(store, &format!("{name}.v"), d, d, true),
            o: Linear::new(store, &format!("{name}.o"), d, d, true),
            heads,
        }
    }

    /// Scaled dot-product attention of `query` rows over `key`/`value` rows.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, query: Var, key: Var, value: Var) -> Result<Var> {
        let tape = ctx.tape;
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, key)?;
        let v = self.v.forward(ctx, value)?;
        let d = self.q.fan_out;
        let dh = d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul(qh, tape.transpose(kh)?)?;
            let attn = tape.softmax(tape.scale(scores, scale), 1)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.o.forward(ctx, joined)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: Option<MultiHeadAttention>,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl DecoderLayer {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &DecoderConfig) -> Self {
        let d = cfg.d_model;
        Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
            self_attn: cfg
                .self_attention
                .then(|| MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads)),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.heads),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, cfg.ffn_mult * d, true),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn_mult * d, d, true),
        }
    }

    fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        tgt: Var,
        query_pos: Var,
        memory: Var,
        memory_keys: Var,
    ) -> Result<Var> {
        let tape = ctx.tape;
        let mut tgt = tgt;
        if let Some(attn) = &self.self_attn {
            let t = self.self_norm.forward(ctx, tgt)?;
            let qk = tape.add(t, query_pos)?;
            let upd = attn.forward(ctx, qk, qk, t)?;
            tgt = tape.add(tgt, upd)?;
        }
        let t = self.cross_norm.forward(ctx, tgt)?;
        let q = tape.add(t, query_pos)?;
        let upd = self.cross_attn.forward(ctx, q, memory_keys, memory)?;
        tgt = tape.add(tgt, upd)?;

        let t = self.ffn_norm.forward(ctx, tgt)?;
        let hidden = tape.gelu(self.ffn_in.forward(ctx, t)?);
        let upd = self.ffn_out.forward(ctx, hidden)?;
        tape.add(tgt, upd)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub queries: QuerySet,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub memory_pos: Option<ParamId>,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let queries = QuerySet::new(store, config.num_queries, d, config.learnable_content);
        let layers = (0..config.layers)
            .map(|i| DecoderLayer::new(store, &format!("dec.layer{i}"), &config))
            .collect();
        let final_norm = LayerNorm::new(store, "dec.final_norm", d);
        let memory_pos = config
            .memory_pos
            .then(|| store.randn("dec.memory_pos", &[config.memory_len.max(1), d], 1.0));
        Ok(Self {
            config,
            queries,
            layers,
            final_norm,
            memory_pos,
        })
    }

    /// Future embeddings `F: [Z×D]` from the short-term encoding `E_S: [S×D]`.
    pub fn decode_vars<T: Scalar>(&self, ctx: &Ctx<'_, T>, short: Var) -> Result<Var> {
        let tape = ctx.tape;
        let shape = tape.shape(short);
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Invalid("decoder memory E_S is empty".into()));
        }
        if shape[1] != self.config.d_model {
            return Err(Error::dim("decoder memory width", &shape, &[0, self.config.d_model]));
        }
        let keys = match self.memory_pos {
            Some(p) => {
                if shape[0] != self.config.memory_len {
                    return Err(Error::dim("memory positions", &shape, &[self.config.memory_len]));
                }
                tape.add(short, ctx.p(p))?
            }
            None => short,
        };
        let query_pos = ctx.p(self.queries.pos);
        let mut tgt = ctx.p(self.queries.content);
        for layer in &self.layers {
            tgt = layer.forward(ctx, tgt, query_pos, short, keys)?;
        }
        self.final_norm.forward(ctx, tgt)
    }

    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, short: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false);
        let f = self.decode_vars(&ctx, tape.constant(short.clone()))?;
        Ok((*tape.value(f)).clone())
    }
}

/// Independent linear classifiers on each future embedding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierHeads {
    pub verb: Linear,
    pub noun: Linear,
    pub action: Option<Linear>,
}

/// Per-slot logits.
pub struct HeadLogits {
    pub verb: Var,
    pub noun: Var,
    pub action: Option<Var>,
}

/// Per-slot probabilities produced by the heads.
#[derive(Clone, Debug, PartialEq)]
pub struct FuturePredictions<T> {
    pub embeddings: Tensor<T>,
    pub verbs: Tensor<T>,
    pub nouns: Tensor<T>,
    pub actions: Option<Tensor<T>>,
}

impl ClassifierHeads {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        d: usize,
        num_verbs: usize,
        num_nouns: usize,
        num_actions: Option<usize>,
    ) -> Self {
        Self {
            verb: Linear::new(store, "head.verb", d, num_verbs, true),
            noun: Linear::new(store, "head.noun", d, num_nouns, true),
            action: num_actions.map(|a| Linear::new(store, "head.action", d, a, true)),
        }
    }

    pub fn logits<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: Var) -> Result<HeadLogits> {
        Ok(HeadLogits {
            verb: self.verb.forward(ctx, f)?,
            noun: self.noun.forward(ctx, f)?,
            action: self.action.as_ref().map(|h| h.forward(ctx, f)).transpose()?,
        })
    }

    /// Softmax of each head, one distribution per slot.
    pub fn classify<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: Var) -> Result<FuturePredictions<T>> {
        let tape = ctx.tape;
        let logits = self.logits(ctx, f)?;
        let probs = |v: Var| -> Result<Tensor<T>> { Ok((*tape.value(tape.softmax(v, 1)?)).clone()) };
        Ok(FuturePredictions {
            embeddings: (*tape.value(f)).clone(),
            verbs: probs(logits.verb)?,
            nouns: probs(logits.noun)?,
            actions: logits.action.map(probs).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_param_gradients;
    use crate::rng::rng_from;

    fn build(z: usize, s: usize, layers: usize, seed: u64) -> (ParamStore<f64>, Decoder) {
        let mut store = ParamStore::new(seed);
        let mut cfg = DecoderConfig::new(8, z, s);
        cfg.heads = 2;
        cfg.layers = layers;
        let dec = Decoder::new(&mut store, cfg).unwrap();
        (store, dec)
    }

    #[test]
    fn output_shape() {
        let (store, dec) = build(5, 7, 2, 1);
        let f = dec.decode(&store, &Tensor::randn(&[7, 8], 1.0, &mut rng_from(2))).unwrap();
        assert_eq!(f.shape(), &[5, 8]);
    }

    #[test]
    fn invariant_to_memory_row_order() {
        let (store, dec) = build(4, 6, 2, 3);
        let mem = Tensor::randn(&[6, 8], 1.0, &mut rng_from(4));
        let perm = [3, 0, 5, 1, 4, 2];
        let shuffled = Tensor::from_rows(&perm.iter().map(|&r| mem.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = dec.decode(&store, &mem).unwrap();
        let b = dec.decode(&store, &shuffled).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn memory_positions_break_permutation_invariance() {
        let mut store = ParamStore::<f64>::new(5);
        let mut cfg = DecoderConfig::new(8, 3, 4);
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.memory_pos = true;
        let dec = Decoder::new(&mut store, cfg).unwrap();
        let mem = Tensor::randn(&[4, 8], 1.0, &mut rng_from(6));
        let rev = Tensor::from_rows(&(0..4).rev().map(|r| mem.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = dec.decode(&store, &mem).unwrap();
        let b = dec.decode(&store, &rev).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn equal_positional_rows_give_equal_outputs() {
        let (mut store, dec) = build(4, 5, 2, 7);
        let row = Tensor::<f64>::randn(&[8], 1.0, &mut rng_from(8));
        store.get_mut(dec.queries.pos).value = Tensor::from_fn(&[4, 8], |i| row.data()[i % 8]);
        let f = dec.decode(&store, &Tensor::randn(&[5, 8], 1.0, &mut rng_from(9))).unwrap();
        for z in 1..4 {
            for c in 0..8 {
                assert!((f.get2(z, c) - f.get2(0, c)).abs() < 1e-12);
            }
        }
        // distinct positional rows give distinct outputs
        let (store, dec) = build(4, 5, 2, 7);
        let f = dec.decode(&store, &Tensor::randn(&[5, 8], 1.0, &mut rng_from(9))).unwrap();
        assert!(f.row(0) != f.row(1));
    }

    #[test]
    fn single_slot_is_attention_pooling() {
        let mut store = ParamStore::<f64>::new(10);
        let mut cfg = DecoderConfig::new(8, 1, 3);
        cfg.heads = 1;
        cfg.layers = 1;
        cfg.self_attention = false;
        let dec = Decoder::new(&mut store, cfg).unwrap();
        let mem = Tensor::randn(&[3, 8], 1.0, &mut rng_from(11));
        // With a single query the cross-attention output is a convex
        // combination of projected memory rows; check against a hand-built
        // pooling of the value projections.
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let layer = &dec.layers[0];
        let t = layer.cross_norm.forward(&ctx, ctx.p(dec.queries.content)).unwrap();
        let q = tape.add(t, ctx.p(dec.queries.pos)).unwrap();
        let m = tape.constant(mem.clone());
        let pooled = tape.value(layer.cross_attn.forward(&ctx, q, m, m).unwrap());
        let qv = tape.value(layer.cross_attn.q.forward(&ctx, q).unwrap());
        let kv = tape.value(layer.cross_attn.k.forward(&ctx, m).unwrap());
        let vv = tape.value(layer.cross_attn.v.forward(&ctx, m).unwrap());
        let scores: Vec<f64> = (0..3)
            .map(|s| (0..8).map(|c| qv.get2(0, c) * kv.get2(s, c)).sum::<f64>() / 8f64.sqrt())
            .collect();
        let mx = scores.iter().copied().fold(f64::MIN, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let tot: f64 = w.iter().sum();
        let mixed: Vec<f64> = (0..8).map(|c| (0..3).map(|s| w[s] / tot * vv.get2(s, c)).sum()).collect();
        let ow = &store.get(layer.cross_attn.o.w).value;
        let ob = &store.get(layer.cross_attn.o.b.unwrap()).value;
        for c in 0..8 {
            let expected: f64 = (0..8).map(|k| mixed[k] * ow.get2(k, c)).sum::<f64>() + ob.data()[c];
            assert!((pooled.get2(0, c) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn static_content_is_frozen() {
        let (store, dec) = build(3, 4, 1, 12);
        assert!(!store.get(dec.queries.content).requires_grad);
        assert!(store.get(dec.queries.content).value.data().iter().all(|&v| v == 0.0));
        assert!(store.get(dec.queries.pos).requires_grad);
    }

    #[test]
    fn gradient_through_one_layer() {
        let (store, dec) = build(3, 4, 1, 13);
        let mem = Tensor::randn(&[4, 8], 1.0, &mut rng_from(14));
        let probe = Tensor::randn(&[3, 8], 1.0, &mut rng_from(15));
        let rep = check_param_gradients(&store, 1e-5, |ctx| {
            let f = dec.decode_vars(ctx, ctx.tape.constant(mem.clone()))?;
            let p = ctx.tape.mul(f, ctx.tape.constant(probe.clone()))?;
            Ok(ctx.tape.sum(p))
        })
        .unwrap();
        assert!(rep.max_relative_error() < 1e-4, "{rep:?}");
    }

    #[test]
    fn heads_give_distributions() {
        let mut store = ParamStore::<f64>::new(16);
        let heads = ClassifierHeads::new(&mut store, 8, 5, 7, Some(4));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let f = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng_from(17)));
        let p = heads.classify(&ctx, f).unwrap();
        for t in [&p.verbs, &p.nouns, p.actions.as_ref().unwrap()] {
            for z in 0..3 {
                assert!((t.row(z).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let mut store = ParamStore::<f64>::new(18);
        let heads = ClassifierHeads::new(&mut store, 8, 5, 7, None);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let p = heads.classify(&ctx, tape.constant(Tensor::zeros(&[2, 8]))).unwrap();
        assert!(p.verbs.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(p.nouns.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn shifting_logits_leaves_probabilities_unchanged() {
        let mut store = ParamStore::<f64>::new(19);
        let heads = ClassifierHeads::new(&mut store, 8, 5, 7, None);
        let f = Tensor::randn(&[2, 8], 1.0, &mut rng_from(20));
        let run = |s: &ParamStore<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, s, false);
            heads.classify(&ctx, tape.constant(f.clone())).unwrap().verbs
        };
        let base = run(&store);
        let b = heads.verb.b.unwrap();
        for v in store.get_mut(b).value.data_mut() {
            *v += 3.25;
        }
        assert!(run(&store).max_abs_diff(&base) < 1e-15);
    }
}
