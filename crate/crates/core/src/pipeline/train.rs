use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{candidate_cuts, make_example, Dataset, Example, SkipReason};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::numerics::Tape;
use crate::rng::{derive_index, rng_for};
use crate::scalar::Scalar;

use super::config::TrainConfig;
use super::model::{LossParts, QueryMamba};

/// Builds up to `max_cuts` examples per clip; clips or cuts that cannot
/// yield an example are returned with the reason.
pub fn build_examples<T: Scalar>(
    data: &Dataset,
    config: &TrainConfig,
    max_cuts: usize,
) -> Result<(Vec<Example<T>>, Vec<(String, SkipReason)>)> {
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for (clip, feats) in data.clips.iter().zip(&data.features) {
        if feats.dim() != config.feature_dim {
            return Err(Error::dim("feature width", &[feats.dim()], &[config.feature_dim]));
        }
        if clip.num_verbs != config.num_verbs || clip.num_nouns != config.num_nouns {
            return Err(Error::dim(
                "annotation vocabulary",
                &[clip.num_verbs, clip.num_nouns],
                &[config.num_verbs, config.num_nouns],
            ));
        }
        let cuts = candidate_cuts(clip, feats.window_seconds, 1, config.num_queries, max_cuts);
        if cuts.is_empty() {
            skipped.push((
                clip.clip_id.clone(),
                SkipReason::TooFewFutureActions {
                    cut_s: 0.0,
                    have: clip.events.len(),
                    need: config.num_queries,
                },
            ));
        }
        for cut in cuts {
            match make_example(clip, feats, cut, config.long_len, config.short_len, config.num_queries)? {
                Ok(ex) => examples.push(ex),
                Err(reason) => skipped.push((clip.clip_id.clone(), reason)),
            }
        }
    }
    for (id, reason) in &skipped {
        log::info!("skipping {id}: {reason}");
    }
    Ok((examples, skipped))
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdamW<T> {
    pub step: usize,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, config: &TrainConfig, lr: f64) {
        self.step += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr_t, b1_t, b2_t, eps) = (T::of(lr), T::of(b1), T::of(b2), T::of(config.adam_eps));
        let (c1, c2) = (T::of(c1), T::of(c2));
        let decay = T::of(1.0 - lr * config.weight_decay);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad.as_ref() else { continue };
            if !p.requires_grad {
                continue;
            }
            let apply_decay = p.decay;
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1_t * *m + (T::one() - b1_t) * g;
                *v = b2_t * *v + (T::one() - b2_t) * g * g;
                if apply_decay {
                    *w *= decay;
                }
                *w -= lr_t * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Linear warmup then cosine decay to zero over `total` steps.
pub fn learning_rate(config: &TrainConfig, step: usize, total: usize) -> f64 {
    let base = config.learning_rate;
    if step < config.warmup_steps {
        return base * (step + 1) as f64 / config.warmup_steps as f64;
    }
    let span = total.saturating_sub(config.warmup_steps).max(1) as f64;
    let t = (step - config.warmup_steps) as f64 / span;
    0.5 * base * (1.0 + (PI * t.min(1.0)).cos())
}

/// Scales every gradient so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub verb: f64,
    pub noun: f64,
    pub action: f64,
    pub aux: f64,
    pub grad_norm: f64,
}

pub fn write_loss_curve<W: Write>(w: W, curve: &[LossRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in curve {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Mutable training state carried between steps and into checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainState<T> {
    pub optimizer: AdamW<T>,
    pub epoch: usize,
    pub curve: Vec<LossRecord>,
}

/// One optimizer step on `batch`; returns the mean loss parts and the
/// pre-clip gradient norm.
pub fn train_step<T: Scalar>(
    model: &mut QueryMamba<T>,
    optimizer: &mut AdamW<T>,
    batch: &[&Example<T>],
    lr: f64,
) -> Result<(LossParts, f64)> {
    model.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossParts::default();
    for ex in batch {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store, true);
        let (loss, parts) = model.loss_vars(&ctx, ex)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                step: optimizer.step,
                detail: format!("loss {} on clip {} at {:.3} s", parts.total, ex.clip_id, ex.cut_s),
            });
        }
        let grads = tape.backward(loss)?;
        let bindings = ctx.bindings();
        drop(ctx);
        model.store.accumulate(&bindings, &grads, T::of(scale));
        mean.total += parts.total * scale;
        mean.verb += parts.verb * scale;
        mean.noun += parts.noun * scale;
        mean.action += parts.action * scale;
        mean.aux += parts.aux * scale;
    }
    let norm = clip_gradients(&mut model.store, model.config.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Diverged {
            step: optimizer.step,
            detail: format!("gradient norm {norm}"),
        });
    }
    let config = model.config.clone();
    optimizer.update(&mut model.store, &config, lr);
    Ok((mean, norm))
}

/// Total optimizer steps for `n` examples under `config`.
pub fn planned_steps(config: &TrainConfig, n: usize) -> usize {
    let per_epoch = n.div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    if config.max_steps > 0 {
        total.min(config.max_steps)
    } else {
        total
    }
}

/// Mini-batch training with a per-epoch shuffle drawn from the config seed.
pub fn train<T: Scalar>(model: &mut QueryMamba<T>, examples: &[Example<T>]) -> Result<TrainState<T>> {
    let state = TrainState {
        optimizer: AdamW::new(&model.store),
        epoch: 0,
        curve: Vec::new(),
    };
    resume(model, examples, state)
}

/// Continues training from `state` until the planned step count.
pub fn resume<T: Scalar>(
    model: &mut QueryMamba<T>,
    examples: &[Example<T>],
    state: TrainState<T>,
) -> Result<TrainState<T>> {
    resume_until(model, examples, state, usize::MAX)
}

/// Like [`resume`] but stops once `stop` steps have run in total. The
/// schedule still spans the full plan, so a later [`resume`] picks up
/// exactly where this left off.
pub fn resume_until<T: Scalar>(
    model: &mut QueryMamba<T>,
    examples: &[Example<T>],
    mut state: TrainState<T>,
    stop: usize,
) -> Result<TrainState<T>> {
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let config = model.config.clone();
    let total = planned_steps(&config, examples.len());
    let per_epoch = examples.len().div_ceil(config.batch_size);
    let end = total.min(stop);
    while state.optimizer.step < end {
        let epoch = state.optimizer.step / per_epoch;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng_for(derive_index(config.seed, epoch as u64), "shuffle"));
        let first = state.optimizer.step % per_epoch;
        for chunk in order.chunks(config.batch_size).skip(first) {
            if state.optimizer.step >= end {
                break;
            }
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &examples[i]).collect();
            let step = state.optimizer.step;
            let lr = learning_rate(&config, step, total);
            let (parts, grad_norm) = train_step(model, &mut state.optimizer, &batch, lr)?;
            log::debug!("step {step} epoch {epoch} loss {:.5}", parts.total);
            state.curve.push(LossRecord {
                step,
                epoch,
                lr,
                loss: parts.total,
                verb: parts.verb,
                noun: parts.noun,
                action: parts.action,
                aux: parts.aux,
                grad_norm,
            });
        }
        state.epoch = state.optimizer.step / per_epoch;
    }
    Ok(state)
}
