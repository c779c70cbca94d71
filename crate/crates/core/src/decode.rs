//! Greedy, beam and ensemble generation of pe from (src, mt).

use std::cmp::Ordering;

use crate::data::{SeqBatch, TripletBatch, TripletExample, BOS, EOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{Memory, TransferenceModel};
use crate::tensor::Tensor;

pub const DEFAULT_BEAM: usize = 4;
pub const DEFAULT_LENGTH_PENALTY: f64 = 0.6;
pub const DEFAULT_EXTRA_LEN: usize = 50;

/// Next-token log-probabilities for a single input, given decoder prefixes
/// that each start with bos.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

/// Encoder output for a batch of inputs, reusable across decoder steps.
pub struct EncodedBatch<'m> {
    model: &'m TransferenceModel,
    states: Tensor,
    memory: SeqBatch,
}

impl<'m> EncodedBatch<'m> {
    pub fn new(model: &'m TransferenceModel, examples: &[&TripletExample]) -> Result<Self> {
        let batch = TripletBatch::collate(examples)?;
        let mut g = model.graph();
        let mem = model.encode(&mut g, &batch)?;
        let states = g.value(mem.states).clone();
        let memory = mem.batch.clone();
        Ok(EncodedBatch { model, states, memory })
    }

    pub fn len(&self) -> usize {
        self.memory.batch
    }

    pub fn is_empty(&self) -> bool {
        self.memory.batch == 0
    }

    /// Log-probabilities of the token after each prefix, where prefix `i`
    /// reads the memory of input `rows[i]`. Bos, pad and sep are never
    /// proposed.
    pub fn log_probs(&self, rows: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        if rows.len() != prefixes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} memory rows for {} prefixes",
                rows.len(),
                prefixes.len()
            )));
        }
        let (len, d) = (self.memory.len, self.states.last_dim());
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut lengths = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * len * d);
        for &r in rows {
            ids.extend_from_slice(&self.memory.ids[r * len..(r + 1) * len]);
            lengths.push(self.memory.lengths[r]);
            data.extend_from_slice(&self.states.data()[r * len * d..(r + 1) * len * d]);
        }
        let memory = SeqBatch {
            ids,
            batch: rows.len(),
            len,
            lengths,
        };
        let pe_in = SeqBatch::from_seqs(prefixes)?;
        let mut g = self.model.graph();
        let states = g.constant(Tensor::new(vec![rows.len(), len, d], data)?);
        let logits = self.model.decode_pe(&mut g, Memory { states, batch: &memory }, &pe_in)?;
        let v = self.model.config().vocab_size;
        let values = g.value(logits).data();
        Ok((0..rows.len())
            .map(|i| {
                let last = i * pe_in.len + pe_in.lengths[i] - 1;
                let mut row = values[last * v..(last + 1) * v].to_vec();
                for banned in [BOS, PAD, SEP] {
                    row[banned] = f64::NEG_INFINITY;
                }
                log_softmax_row(&row)
            })
            .collect())
    }
}

/// A single model bound to one input.
pub struct ModelScorer<'m> {
    encoded: EncodedBatch<'m>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m TransferenceModel, example: &TripletExample) -> Result<Self> {
        Ok(ModelScorer {
            encoded: EncodedBatch::new(model, &[example])?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.encoded.model.config().vocab_size
    }

    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.encoded.log_probs(&vec![0; prefixes.len()], prefixes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Combine {
    /// Mean of member probabilities.
    #[default]
    Probability,
    /// Mean of member log-probabilities, renormalized.
    LogProbability,
}

impl std::str::FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prob" => Ok(Combine::Probability),
            "log" => Ok(Combine::LogProbability),
            _ => Err(Error::InvalidArgument(format!("unknown ensemble combination `{s}` (prob, log)"))),
        }
    }
}

/// Averages the per-step distributions of its members.
pub struct EnsembleScorer<'a> {
    members: Vec<Box<dyn StepScorer + 'a>>,
    combine: Combine,
}

impl<'a> EnsembleScorer<'a> {
    pub fn new(members: Vec<Box<dyn StepScorer + 'a>>, combine: Combine) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Empty("ensemble with no models".into()));
        };
        let v = first.vocab_size();
        if let Some(bad) = members.iter().find(|m| m.vocab_size() != v) {
            return Err(Error::InvalidArgument(format!(
                "ensemble members disagree on vocabulary size ({v} vs {})",
                bad.vocab_size()
            )));
        }
        Ok(EnsembleScorer { members, combine })
    }
}

impl StepScorer for EnsembleScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let outs = self
            .members
            .iter()
            .map(|m| m.next_log_probs(prefixes))
            .collect::<Result<Vec<_>>>()?;
        let k = outs.len() as f64;
        let v = self.vocab_size();
        Ok((0..prefixes.len())
            .map(|p| match self.combine {
                Combine::Probability => (0..v)
                    .map(|t| {
                        let max = outs.iter().map(|o| o[p][t]).fold(f64::NEG_INFINITY, f64::max);
                        if max == f64::NEG_INFINITY {
                            return max;
                        }
                        max + (outs.iter().map(|o| (o[p][t] - max).exp()).sum::<f64>() / k).ln()
                    })
                    .collect(),
                Combine::LogProbability => {
                    let mean: Vec<f64> = (0..v).map(|t| outs.iter().map(|o| o[p][t]).sum::<f64>() / k).collect();
                    log_softmax_row(&mean)
                }
            })
            .collect())
    }
}

/// Models to decode with: a single model or a (possibly nested) ensemble.
#[derive(Clone, Debug)]
pub enum ModelSet<'m> {
    Single(&'m TransferenceModel),
    Group(Vec<ModelSet<'m>>, Combine),
}

impl<'m> ModelSet<'m> {
    /// A flat ensemble over all given models.
    pub fn flat(models: &[&'m TransferenceModel], combine: Combine) -> Result<Self> {
        match models {
            [] => Err(Error::Empty("no models to decode with".into())),
            [m] => Ok(ModelSet::Single(m)),
            _ => Ok(ModelSet::Group(models.iter().map(|&m| ModelSet::Single(m)).collect(), combine)),
        }
    }

    pub fn models(&self) -> Vec<&'m TransferenceModel> {
        match self {
            ModelSet::Single(m) => vec![m],
            ModelSet::Group(ms, _) => ms.iter().flat_map(ModelSet::models).collect(),
        }
    }

    pub fn scorer(&self, example: &TripletExample) -> Result<Box<dyn StepScorer + 'm>> {
        match self {
            ModelSet::Single(m) => Ok(Box::new(ModelScorer::new(m, example)?)),
            ModelSet::Group(ms, combine) => {
                let members = ms.iter().map(|m| m.scorer(example)).collect::<Result<Vec<_>>>()?;
                Ok(Box::new(EnsembleScorer::new(members, *combine)?))
            }
        }
    }
}

fn argmax(lp: &[f64]) -> usize {
    // first index wins ties
    let mut best = 0;
    for (i, &x) in lp.iter().enumerate() {
        if x > lp[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding until eos or `max_len` tokens. The eos is not returned.
pub fn greedy_decode(scorer: &dyn StepScorer, max_len: usize) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS];
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&prefix))?;
        let t = argmax(&lp[0]);
        if t == EOS {
            break;
        }
        prefix.push(t);
    }
    prefix.remove(0);
    Ok(prefix)
}

/// Greedy decoding of many inputs with one model, batching the decoder over
/// all unfinished inputs. Matches `greedy_decode` row by row.
pub fn greedy_batch(
    model: &TransferenceModel,
    examples: &[TripletExample],
    max_len: impl Fn(&TripletExample) -> usize,
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&TripletExample> = chunk.iter().collect();
        let enc = EncodedBatch::new(model, &refs)?;
        let limits: Vec<usize> = chunk.iter().map(&max_len).collect();
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; chunk.len()];
        let mut live: Vec<usize> = (0..chunk.len()).filter(|&i| limits[i] > 0).collect();
        while !live.is_empty() {
            let ps: Vec<Vec<usize>> = live.iter().map(|&i| prefixes[i].clone()).collect();
            let lps = enc.log_probs(&live, &ps)?;
            let mut next = Vec::with_capacity(live.len());
            for (&i, lp) in live.iter().zip(&lps) {
                let t = argmax(lp);
                if t != EOS {
                    prefixes[i].push(t);
                    if prefixes[i].len() - 1 < limits[i] {
                        next.push(i);
                    }
                }
            }
            live = next;
        }
        out.extend(prefixes.into_iter().map(|mut p| {
            p.remove(0);
            p
        }));
    }
    Ok(out)
}

/// A finished or partial hypothesis. `tokens` excludes bos and eos.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Log-probability over generated length (eos included) to the power alpha.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        let len = self.tokens.len() + usize::from(self.finished);
        self.log_prob / (len.max(1) as f64).powf(alpha)
    }
}

/// Beam search: every step keeps the `beam_size` best expansions by
/// cumulative log-probability. Expansions ending in eos are frozen; at
/// `max_len` the remaining live hypotheses are closed as they are. The
/// returned hypothesis maximizes `normalized_score`.
pub fn beam_search(scorer: &dyn StepScorer, beam_size: usize, max_len: usize, alpha: f64) -> Result<BeamHypothesis> {
    if beam_size == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, lp) in lps.iter().enumerate() {
            for (t, &x) in lp.iter().enumerate() {
                if x > f64::NEG_INFINITY {
                    cands.push((live[b].log_prob + x, b, t));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam_size);
        for &(lp, b, t) in cands.iter().take(beam_size) {
            let mut tokens = live[b].tokens.clone();
            if t == EOS {
                finished.push(BeamHypothesis {
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
            } else {
                tokens.push(t);
                next.push(BeamHypothesis {
                    tokens,
                    log_prob: lp,
                    finished: false,
                });
            }
        }
        live = next;
    }
    finished.extend(live);
    finished
        .into_iter()
        .reduce(|best, h| {
            if h.normalized_score(alpha) > best.normalized_score(alpha) {
                h
            } else {
                best
            }
        })
        .ok_or_else(|| Error::Empty("beam search produced no hypothesis".into()))
}

/// Decoding options shared by the corpus-level entry points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub length_penalty: f64,
    /// Absolute output limit; `None` means mt length plus 50.
    pub max_len: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: DEFAULT_BEAM,
            length_penalty: DEFAULT_LENGTH_PENALTY,
            max_len: None,
        }
    }
}

impl DecodeOptions {
    pub fn limit(&self, example: &TripletExample, model_max: usize) -> usize {
        self.max_len.unwrap_or(example.mt.len() + DEFAULT_EXTRA_LEN).min(model_max)
    }
}

/// pe ids for every example, in input order.
pub fn decode_ids(models: &ModelSet<'_>, examples: &[TripletExample], opts: &DecodeOptions) -> Result<Vec<Vec<usize>>> {
    let ms = models.models();
    let model_max = ms.iter().map(|m| m.config().max_len).min().ok_or_else(|| Error::Empty("no models".into()))?;
    if let ModelSet::Single(m) = models {
        if opts.beam == 1 {
            return greedy_batch(m, examples, |e| opts.limit(e, model_max), 32);
        }
    }
    examples
        .iter()
        .map(|e| {
            let scorer = models.scorer(e)?;
            let limit = opts.limit(e, model_max);
            Ok(beam_search(scorer.as_ref(), opts.beam, limit, opts.length_penalty)?.tokens)
        })
        .collect()
}
