use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::annotation::{ClipAnnotation, Event};
use super::features::{FeatureSequence, WINDOW_SECONDS};
use crate::action::Action;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, rng_for, rng_from};

/// Knobs of [`generate_world`] beyond the vocabulary and sparsity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldOptions {
    /// Successors per action in the transition graph.
    pub fanout: usize,
    /// Dirichlet concentration of the successor weights; small is peaked.
    pub concentration: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Relative spread of a sampled duration around the action's mean.
    pub duration_jitter: f64,
    /// Concatenate verb and noun prototypes instead of one per action.
    pub two_stream: bool,
    pub window_seconds: f64,
}

impl Default for WorldOptions {
    fn default() -> Self {
        Self {
            fanout: 3,
            concentration: 0.3,
            feature_dim: 32,
            noise_sigma: 0.5,
            min_duration_s: 1.5,
            max_duration_s: 3.0,
            duration_jitter: 0.25,
            two_stream: false,
            window_seconds: WINDOW_SECONDS,
        }
    }
}

/// A sparse Markov chain over permitted verb-noun pairs plus a
/// prototype-and-noise emission model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub seed: u64,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub sparsity: f64,
    /// Row-major `V × N` affordance mask.
    pub mask: Vec<bool>,
    /// Permitted pairs in `(verb, noun)` order; transition states index this.
    pub actions: Vec<Action>,
    pub initial: Vec<f64>,
    /// Sparse rows `(successor, probability)`.
    pub transitions: Vec<Vec<(usize, f64)>>,
    pub mean_duration_s: Vec<f64>,
    pub prototypes_seed: u64,
    pub options: WorldOptions,
}

/// Bernoulli mask with every noun column guaranteed at least one verb; empty
/// columns are redrawn.
fn affordance_mask<R: Rng>(rng: &mut R, v: usize, n: usize, sparsity: f64) -> Vec<bool> {
    let mut mask = vec![false; v * n];
    for noun in 0..n {
        loop {
            let mut any = false;
            for verb in 0..v {
                let on = rng.random_bool(sparsity);
                mask[verb * n + noun] = on;
                any |= on;
            }
            if any {
                break;
            }
        }
    }
    mask
}

pub fn generate_world(seed: u64, num_verbs: usize, num_nouns: usize, sparsity: f64) -> Result<SyntheticWorldSpec> {
    generate_world_with(seed, num_verbs, num_nouns, sparsity, WorldOptions::default())
}

pub fn generate_world_with(
    seed: u64,
    num_verbs: usize,
    num_nouns: usize,
    sparsity: f64,
    options: WorldOptions,
) -> Result<SyntheticWorldSpec> {
    if num_verbs < 2 || num_nouns < 2 {
        return Err(Error::Parameter("need at least two verbs and two nouns".into()));
    }
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::Parameter(format!("sparsity must lie in (0, 1], got {sparsity}")));
    }
    if options.fanout == 0 || !(options.concentration > 0.0) || options.feature_dim == 0 {
        return Err(Error::Parameter("fanout, concentration and feature_dim must be positive".into()));
    }
    if !(options.min_duration_s > 0.0 && options.min_duration_s <= options.max_duration_s)
        || !(0.0..1.0).contains(&options.duration_jitter)
        || !(options.window_seconds > 0.0)
        || !(options.noise_sigma >= 0.0)
    {
        return Err(Error::Parameter("invalid duration, window or noise settings".into()));
    }

    let mask = affordance_mask(&mut rng_for(seed, "mask"), num_verbs, num_nouns, sparsity);
    let actions: Vec<Action> = (0..num_verbs * num_nouns)
        .filter(|&i| mask[i])
        .map(|i| Action::new(i / num_nouns, i % num_nouns))
        .collect();
    let count = actions.len();

    let mut rng = rng_for(seed, "transitions");
    // a random cycle through all states keeps the chain irreducible
    let mut cycle: Vec<usize> = (0..count).collect();
    cycle.shuffle(&mut rng);
    let mut next_on_cycle = vec![0; count];
    for (i, &s) in cycle.iter().enumerate() {
        next_on_cycle[s] = cycle[(i + 1) % count];
    }
    // normalized Gamma draws are Dirichlet distributed
    let gamma = Gamma::new(options.concentration, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
    let fanout = options.fanout.min(count.saturating_sub(1)).max(1);
    let transitions = (0..count)
        .map(|s| {
            if count == 1 {
                return vec![(0, 1.0)];
            }
            let mut succ = vec![next_on_cycle[s]];
            let mut others: Vec<usize> = (0..count).filter(|&t| t != s && t != next_on_cycle[s]).collect();
            others.shuffle(&mut rng);
            succ.extend(others.into_iter().take(fanout - 1));
            succ.sort_unstable();
            let mut weights: Vec<f64> = succ.iter().map(|_| gamma.sample(&mut rng).max(1e-12)).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            succ.into_iter().zip(weights).collect()
        })
        .collect();

    let mut rng = rng_for(seed, "durations");
    let mean_duration_s = (0..count)
        .map(|_| rng.random_range(options.min_duration_s..=options.max_duration_s))
        .collect();

    Ok(SyntheticWorldSpec {
        seed,
        num_verbs,
        num_nouns,
        sparsity,
        mask,
        initial: vec![1.0 / count as f64; count],
        actions,
        transitions,
        mean_duration_s,
        prototypes_seed: derive_seed(seed, "prototypes"),
        options,
    })
}

impl SyntheticWorldSpec {
    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn permitted(&self, a: Action) -> bool {
        a.verb < self.num_verbs && a.noun < self.num_nouns && self.mask[a.verb * self.num_nouns + a.noun]
    }

    pub fn state_of(&self, a: Action) -> Option<usize> {
        self.actions.binary_search(&a).ok()
    }

    pub fn transition_prob(&self, from: usize, to: usize) -> f64 {
        self.transitions[from]
            .iter()
            .find(|&&(s, _)| s == to)
            .map_or(0.0, |&(_, p)| p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.len() != self.num_verbs * self.num_nouns {
            return Err(Error::Invalid("mask size does not match vocabulary".into()));
        }
        for noun in 0..self.num_nouns {
            if !(0..self.num_verbs).any(|v| self.mask[v * self.num_nouns + noun]) {
                return Err(Error::Invalid(format!("noun {noun} has no permitted verb")));
            }
        }
        let count = self.actions.len();
        if self.transitions.len() != count || self.initial.len() != count || self.mean_duration_s.len() != count {
            return Err(Error::Invalid("per-action tables disagree in length".into()));
        }
        for (s, row) in self.transitions.iter().enumerate() {
            let total: f64 = row.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|&(t, p)| t >= count || p < 0.0) {
                return Err(Error::Invalid(format!("transition row {s} is not a distribution")));
            }
        }
        if self.actions.iter().any(|&a| !self.permitted(a)) {
            return Err(Error::Invalid("action outside the affordance mask".into()));
        }
        Ok(())
    }

    /// Emission prototypes, one row per action state.
    pub fn prototypes(&self) -> Tensor<f64> {
        let d = self.options.feature_dim;
        let mut rng = rng_from(self.prototypes_seed);
        if self.options.two_stream {
            let dv = d / 2;
            let dn = d - dv;
            let verbs = Tensor::<f64>::randn(&[self.num_verbs, dv.max(1)], 1.0, &mut rng);
            let nouns = Tensor::<f64>::randn(&[self.num_nouns, dn], 1.0, &mut rng);
            Tensor::from_fn(&[self.num_actions(), d], |i| {
                let (s, c) = (i / d, i % d);
                let a = self.actions[s];
                if c < dv {
                    verbs.get2(a.verb, c)
                } else {
                    nouns.get2(a.noun, c - dv)
                }
            })
        } else {
            Tensor::randn(&[self.num_actions(), d], 1.0, &mut rng)
        }
    }

    /// A state path of `len` steps from the initial distribution.
    pub fn sample_chain<R: Rng>(&self, len: usize, rng: &mut R) -> Result<Vec<usize>> {
        let dist = |w: &[f64]| WeightedIndex::new(w).map_err(|e| Error::Distribution(e.to_string()));
        let initial = dist(&self.initial)?;
        let rows = self
            .transitions
            .iter()
            .map(|row| dist(&row.iter().map(|&(_, p)| p).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let mut path = Vec::with_capacity(len);
        if len > 0 {
            path.push(initial.sample(rng));
        }
        while path.len() < len {
            let s = *path.last().unwrap();
            path.push(self.transitions[s][rows[s].sample(rng)].0);
        }
        Ok(path)
    }
}

/// Samples a clip of `duration_s` seconds holding at least `min_events`
/// complete events, together with its window features.
pub fn generate_clip(
    world: &SyntheticWorldSpec,
    clip_id: &str,
    seed: u64,
    duration_s: f64,
    min_events: usize,
) -> Result<(ClipAnnotation, FeatureSequence)> {
    let opts = &world.options;
    let longest = opts.max_duration_s * (1.0 + opts.duration_jitter);
    let shortest = opts.min_duration_s * (1.0 - opts.duration_jitter);
    if !(duration_s >= min_events as f64 * longest) || duration_s < opts.window_seconds {
        return Err(Error::Parameter(format!(
            "{duration_s} s cannot guarantee {min_events} events of up to {longest:.3} s"
        )));
    }
    let mut rng = rng_from(seed);
    let max_events = (duration_s / shortest).ceil() as usize + 1;
    let path = world.sample_chain(max_events, &mut rng)?;

    let mut events = Vec::new();
    let mut t = 0.0;
    for &s in &path {
        if t >= duration_s {
            break;
        }
        let mean = world.mean_duration_s[s];
        let len = mean * rng.random_range(1.0 - opts.duration_jitter..=1.0 + opts.duration_jitter);
        let a = world.actions[s];
        let end = (t + len).min(duration_s);
        events.push(Event {
            start_s: t,
            end_s: end,
            verb_id: a.verb,
            noun_id: a.noun,
        });
        t = end;
    }
    let annotation = ClipAnnotation {
        clip_id: clip_id.to_string(),
        split: "train".into(),
        num_verbs: world.num_verbs,
        num_nouns: world.num_nouns,
        duration_s,
        events,
    };

    let prototypes = world.prototypes();
    let windows = (duration_s / opts.window_seconds).floor() as usize;
    let d = opts.feature_dim;
    let noise = Normal::new(0.0, opts.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut data = Vec::with_capacity(windows * d);
    for w in 0..windows {
        let centre = (w as f64 + 0.5) * opts.window_seconds;
        let ev = annotation
            .event_at(centre)
            .or(annotation.events.last())
            .expect("clip has events");
        let s = world.state_of(ev.action()).expect("event drawn from the world");
        for c in 0..d {
            let jitter = if opts.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push((prototypes.get2(s, c) + jitter) as f32);
        }
    }
    let features = FeatureSequence {
        clip_id: clip_id.to_string(),
        window_seconds: opts.window_seconds,
        embeddings: Tensor::new(vec![windows, d], data)?,
    };
    Ok((annotation, features))
}
