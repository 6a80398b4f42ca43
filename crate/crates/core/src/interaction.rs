//! Verb-noun co-occurrence statistics, the induced action taxonomy, and the
//! conversion of independent verb/noun distributions into dataset-aware
//! joint distributions.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{Action, ActionSequence};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const COOC_FORMAT: &str = "querymamba-cooc";
pub const COOC_VERSION: u32 = 1;

/// Tolerance for accepting a probability row as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// `V × N` pair counts and the globally normalized matrix `O`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub counts: Vec<u64>,
    /// Additive pseudo-count applied to every cell before normalizing.
    pub smoothing: f64,
    /// Annotation split the counts were collected from.
    pub source_split: String,
    normalized: Vec<f64>,
}

impl CooccurrenceMatrix {
    pub fn from_counts(
        num_verbs: usize,
        num_nouns: usize,
        counts: Vec<u64>,
        source_split: &str,
    ) -> Result<Self> {
        if counts.len() != num_verbs * num_nouns {
            return Err(Error::dim("co-occurrence counts", &[counts.len()], &[num_verbs, num_nouns]));
        }
        let mut m = Self {
            num_verbs,
            num_nouns,
            counts,
            smoothing: 0.0,
            source_split: source_split.to_string(),
            normalized: Vec::new(),
        };
        m.renormalize()?;
        Ok(m)
    }

    /// Applies additive smoothing `ε ≥ 0` and recomputes `O`.
    pub fn with_smoothing(mut self, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::Parameter(format!("smoothing must be >= 0, got {eps}")));
        }
        self.smoothing = eps;
        self.renormalize()?;
        Ok(self)
    }

    fn renormalize(&mut self) -> Result<()> {
        let total: f64 = self.counts.iter().map(|&c| c as f64 + self.smoothing).sum();
        if total <= 0.0 {
            return Err(Error::Distribution("co-occurrence matrix has no mass".into()));
        }
        self.normalized = self
            .counts
            .iter()
            .map(|&c| (c as f64 + self.smoothing) / total)
            .collect();
        Ok(())
    }

    pub fn count(&self, verb: usize, noun: usize) -> u64 {
        self.counts[verb * self.num_nouns + noun]
    }

    /// Normalized matrix `O`, row-major `V × N`, summing to one.
    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn normalized_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.num_verbs, self.num_nouns], |i| T::of(self.normalized[i]))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Writes the CSV form: a format header row, then `verb_id,noun_id,count`
    /// rows for every nonzero cell.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().flexible(true).from_writer(w);
        wr.write_record(["format", "version", "num_verbs", "num_nouns", "source_split"])?;
        wr.write_record([
            COOC_FORMAT.to_string(),
            COOC_VERSION.to_string(),
            self.num_verbs.to_string(),
            self.num_nouns.to_string(),
            self.source_split.clone(),
        ])?;
        wr.write_record(["verb_id", "noun_id", "count"])?;
        for v in 0..self.num_verbs {
            for n in 0..self.num_nouns {
                let c = self.count(v, n);
                if c > 0 {
                    wr.write_record([v.to_string(), n.to_string(), c.to_string()])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads [`CooccurrenceMatrix::write_csv`] output; `O` is recomputed from
    /// the integer counts.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(r);
        let mut records = rd.records();
        let mut next = |what: &str| -> Result<csv::StringRecord> {
            records
                .next()
                .ok_or_else(|| Error::Ingest {
                    location: "co-occurrence header".into(),
                    message: format!("missing {what}"),
                })?
                .map_err(Error::from)
        };
        next("column names")?;
        let header = next("header values")?;
        let bad = |message: String| Error::Ingest {
            location: "co-occurrence header".into(),
            message,
        };
        if header.get(0) != Some(COOC_FORMAT) {
            return Err(bad(format!("unexpected format tag {:?}", header.get(0))));
        }
        let version: u32 = header.get(1).unwrap_or("").parse().map_err(|e| bad(format!("version: {e}")))?;
        if version != COOC_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let num_verbs: usize = header.get(2).unwrap_or("").parse().map_err(|e| bad(format!("num_verbs: {e}")))?;
        let num_nouns: usize = header.get(3).unwrap_or("").parse().map_err(|e| bad(format!("num_nouns: {e}")))?;
        let split = header.get(4).unwrap_or("").to_string();
        next("triplet column names")?;
        let mut counts = vec![0u64; num_verbs * num_nouns];
        for (line, rec) in records.enumerate() {
            let rec = rec?;
            let location = format!("co-occurrence row {}", line + 1);
            let field = |i: usize| -> Result<u64> {
                rec.get(i)
                    .unwrap_or("")
                    .trim()
                    .parse()
                    .map_err(|e| Error::Ingest {
                        location: location.clone(),
                        message: format!("field {i}: {e}"),
                    })
            };
            let (v, n, c) = (field(0)? as usize, field(1)? as usize, field(2)?);
            if v >= num_verbs || n >= num_nouns {
                return Err(Error::Ingest {
                    location,
                    message: format!("pair ({v}, {n}) outside {num_verbs}x{num_nouns}"),
                });
            }
            counts[v * num_nouns + n] += c;
        }
        Self::from_counts(num_verbs, num_nouns, counts, &split)
    }
}

/// Tallies verb-noun pairs into a co-occurrence matrix.
pub fn build_cooccurrence<I>(
    annotations: I,
    num_verbs: usize,
    num_nouns: usize,
    source_split: &str,
) -> Result<CooccurrenceMatrix>
where
    I: IntoIterator<Item = Action>,
{
    let mut counts = vec![0u64; num_verbs * num_nouns];
    let mut seen = 0usize;
    for (i, a) in annotations.into_iter().enumerate() {
        if a.verb >= num_verbs || a.noun >= num_nouns {
            return Err(Error::Ingest {
                location: format!("record {i}"),
                message: format!("pair ({}, {}) outside {num_verbs}x{num_nouns}", a.verb, a.noun),
            });
        }
        counts[a.verb * num_nouns + a.noun] += 1;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Distribution("no annotations to count".into()));
    }
    CooccurrenceMatrix::from_counts(num_verbs, num_nouns, counts, source_split)
}

/// Every verb-noun pair observed at least once, in `(verb, noun)` order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Action>", into = "Vec<Action>")]
pub struct ActionTaxonomy {
    pairs: Vec<Action>,
    index: HashMap<Action, usize>,
}

impl TryFrom<Vec<Action>> for ActionTaxonomy {
    type Error = Error;

    fn try_from(pairs: Vec<Action>) -> Result<Self> {
        Self::from_pairs(pairs)
    }
}

impl From<ActionTaxonomy> for Vec<Action> {
    fn from(t: ActionTaxonomy) -> Self {
        t.pairs
    }
}

impl ActionTaxonomy {
    pub fn from_pairs(mut pairs: Vec<Action>) -> Result<Self> {
        let n = pairs.len();
        pairs.sort();
        pairs.dedup();
        if pairs.len() != n {
            return Err(Error::Invalid("duplicate taxonomy pairs".into()));
        }
        let index = pairs.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        Ok(Self { pairs, index })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Action] {
        &self.pairs
    }

    pub fn action_id(&self, a: Action) -> Option<usize> {
        self.index.get(&a).copied()
    }

    pub fn action(&self, id: usize) -> Option<Action> {
        self.pairs.get(id).copied()
    }

    /// CSV with header `action_id,verb_id,noun_id`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["action_id", "verb_id", "noun_id"])?;
        for (i, a) in self.pairs.iter().enumerate() {
            wr.write_record([i.to_string(), a.verb.to_string(), a.noun.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            action_id: usize,
            verb_id: usize,
            noun_id: usize,
        }
        let mut rows: Vec<Row> = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        rows.sort_by_key(|r| r.action_id);
        if rows.iter().enumerate().any(|(i, r)| r.action_id != i) {
            return Err(Error::Ingest {
                location: "taxonomy".into(),
                message: "action ids must be 0..n without gaps".into(),
            });
        }
        let tax = Self::from_pairs(rows.iter().map(|r| Action::new(r.verb_id, r.noun_id)).collect())?;
        if rows.iter().zip(tax.pairs()).any(|(r, a)| (r.verb_id, r.noun_id) != (a.verb, a.noun)) {
            return Err(Error::Ingest {
                location: "taxonomy".into(),
                message: "action ids are not in (verb, noun) order".into(),
            });
        }
        Ok(tax)
    }
}

/// Pairs with a nonzero count, sorted by `(verb_id, noun_id)`.
pub fn build_taxonomy(cooc: &CooccurrenceMatrix) -> ActionTaxonomy {
    let pairs = (0..cooc.num_verbs)
        .flat_map(|v| (0..cooc.num_nouns).map(move |n| Action::new(v, n)))
        .filter(|a| cooc.count(a.verb, a.noun) > 0)
        .collect();
    ActionTaxonomy::from_pairs(pairs).expect("grid pairs are unique")
}

fn check_rows<T: Scalar>(what: &str, t: &Tensor<T>) -> Result<(usize, usize)> {
    let (rows, cols) = t.dims2()?;
    for r in 0..rows {
        let row = t.row(r);
        if row.iter().any(|&p| p < T::zero() || !p.is_finite()) {
            return Err(Error::Distribution(format!("{what} row {r} has invalid entries")));
        }
        let s = row.iter().copied().sum::<T>().as_f64();
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Distribution(format!("{what} row {r} sums to {s}")));
        }
    }
    Ok((rows, cols))
}

/// `F_Actions[z,v,n] = F_Verbs[z,v]·F_Nouns[z,n]`.
pub fn joint_probabilities<T: Scalar>(verbs: &Tensor<T>, nouns: &Tensor<T>) -> Result<Tensor<T>> {
    let (z, v) = check_rows("verb distribution", verbs)?;
    let (z2, n) = check_rows("noun distribution", nouns)?;
    if z != z2 {
        return Err(Error::dim("joint_probabilities", verbs.shape(), nouns.shape()));
    }
    let (dv, dn) = (verbs.data(), nouns.data());
    Ok(Tensor::from_fn(&[z, v, n], |i| {
        let (zi, rest) = (i / (v * n), i % (v * n));
        dv[zi * v + rest / n] * dn[zi * n + rest % n]
    }))
}

/// Result of [`apply_interaction`].
#[derive(Clone, Debug, PartialEq)]
pub struct JointActionDistribution<T> {
    /// Independent joint `F_Actions`, `Z × V × N`.
    pub joint: Tensor<T>,
    /// `F_Actions ⊙ O`, renormalized per slot.
    pub adjusted: Tensor<T>,
    /// Slots whose product had no mass and kept the unadjusted joint.
    pub fallback_slots: Vec<usize>,
}

/// Multiplies each slot of `joint` by `O` and renormalizes. A slot left with
/// no mass keeps its unadjusted distribution and is listed in
/// `fallback_slots`.
pub fn apply_interaction<T: Scalar>(
    joint: &Tensor<T>,
    cooc: &CooccurrenceMatrix,
) -> Result<JointActionDistribution<T>> {
    let shape = joint.shape();
    if shape.len() != 3 || shape[1] != cooc.num_verbs || shape[2] != cooc.num_nouns {
        return Err(Error::dim("apply_interaction", shape, &[0, cooc.num_verbs, cooc.num_nouns]));
    }
    let cells = shape[1] * shape[2];
    let o = cooc.normalized();
    let mut adjusted = joint.data().to_vec();
    let mut fallback_slots = Vec::new();
    for (z, slot) in adjusted.chunks_mut(cells).enumerate() {
        let original = slot.to_vec();
        for (p, &w) in slot.iter_mut().zip(o) {
            *p *= T::of(w);
        }
        let total: T = slot.iter().copied().sum();
        if total > T::zero() && total.is_finite() {
            for p in slot.iter_mut() {
                *p /= total;
            }
        } else {
            log::warn!("slot {z}: no mass left after interaction, keeping independent joint");
            slot.copy_from_slice(&original);
            fallback_slots.push(z);
        }
    }
    Ok(JointActionDistribution {
        joint: joint.clone(),
        adjusted: Tensor::new(shape.to_vec(), adjusted)?,
        fallback_slots,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// One sequence of per-slot maximum-probability pairs.
    Argmax,
    #[default]
    Sample,
}

/// Relative gap below which two probabilities count as tied.
pub const TIE_TOL: f64 = 1e-12;

/// Per-slot maximum-probability pair; ties (within [`TIE_TOL`]) go to the
/// smallest `(verb_id, noun_id)`.
pub fn argmax_sequence<T: Scalar>(dist: &Tensor<T>) -> Result<ActionSequence> {
    let shape = dist.shape();
    if shape.len() != 3 {
        return Err(Error::dim("argmax_sequence", shape, &[0, 0, 0]));
    }
    let (v, n) = (shape[1], shape[2]);
    Ok(dist
        .data()
        .chunks(v * n)
        .map(|slot| {
            let mut best = 0;
            for (i, &p) in slot.iter().enumerate() {
                if p.as_f64() > slot[best].as_f64() * (1.0 + TIE_TOL) {
                    best = i;
                }
            }
            Action::new(best / n, best % n)
        })
        .collect())
}

/// `k` sequences whose slot `z` pair is drawn jointly from `dist[z]`.
pub fn sample_sequences<T: Scalar, R: Rng + ?Sized>(
    dist: &Tensor<T>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<ActionSequence>> {
    let shape = dist.shape();
    if shape.len() != 3 {
        return Err(Error::dim("sample_sequences", shape, &[0, 0, 0]));
    }
    if k == 0 {
        return Err(Error::Parameter("need at least one candidate".into()));
    }
    let n = shape[2];
    let samplers = dist
        .data()
        .chunks(shape[1] * n)
        .map(|slot| WeightedIndex::new(slot.iter().map(|p| p.as_f64())))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Distribution(e.to_string()))?;
    Ok((0..k)
        .map(|_| {
            samplers
                .iter()
                .map(|s| {
                    let i = s.sample(rng);
                    Action::new(i / n, i % n)
                })
                .collect()
        })
        .collect())
}
