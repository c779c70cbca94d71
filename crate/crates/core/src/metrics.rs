//! Corpus BLEU, TER with block shifts, and per-operation edit reduction.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const MAX_SHIFT_SIZE: usize = 10;
pub const MAX_SHIFT_DIST: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Smoothing {
    None,
    /// Add one to numerator and denominator of any order above 1 with no
    /// matches. Leaves large-corpus scores untouched.
    #[default]
    AddOneZeros,
}

/// Splits on whitespace, optionally lowercasing first.
pub fn tokenize(s: &str, lowercase: bool) -> Vec<String> {
    if lowercase {
        s.to_lowercase().split_whitespace().map(str::to_string).collect()
    } else {
        s.split_whitespace().map(str::to_string).collect()
    }
}

fn ngram_counts<T: Hash + Eq>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in [0, 100]: clipped n-gram statistics summed over the corpus
/// before taking precisions.
pub fn bleu_corpus<T, H, R>(hyps: &[H], refs: &[R], max_n: usize, smoothing: Smoothing) -> Result<f64>
where
    T: Hash + Eq,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if hyps.len() != refs.len() {
        return Err(Error::CorpusMismatch {
            detail: format!("{} hypotheses vs {} references", hyps.len(), refs.len()),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Empty("BLEU over an empty corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..max_n {
        let (m, t) = (matches[n] as f64, totals[n] as f64);
        let p = match smoothing {
            Smoothing::AddOneZeros if n > 0 && matches[n] == 0 => 1.0 / (t + 1.0),
            _ if matches[n] == 0 => return Ok(0.0),
            _ => m / t,
        };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Edit counts for one hypothesis against its reference. Insertions are
/// reference words missing from the hypothesis, deletions are surplus
/// hypothesis words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct TerBreakdown {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub shifts: usize,
    pub ref_len: usize,
}

impl TerBreakdown {
    pub fn edits(&self) -> usize {
        self.insertions + self.deletions + self.substitutions + self.shifts
    }

    pub fn score(&self) -> f64 {
        self.edits() as f64 / self.ref_len as f64
    }

    pub fn add(&mut self, o: &TerBreakdown) {
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.substitutions += o.substitutions;
        self.shifts += o.shifts;
        self.ref_len += o.ref_len;
    }
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Op {
    Match,
    Sub,
    Ins,
    Del,
}

/// Full-table Levenshtein with a backtrace preferring match/sub, then
/// deletion, then insertion.
fn align<T: PartialEq>(hyp: &[T], r: &[T]) -> Vec<Op> {
    let (n, m) = (hyp.len(), r.len());
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let w = m + 1;
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(hyp[i - 1] != r[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut ops = Vec::with_capacity(n.max(m));
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = hyp[i - 1] == r[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same { Op::Match } else { Op::Sub });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(Op::Del);
            i -= 1;
        } else {
            ops.push(Op::Ins);
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Hypothesis positions not exactly matched under the current alignment.
fn hyp_errors(ops: &[Op], hyp_len: usize) -> Vec<bool> {
    let mut err = vec![false; hyp_len];
    let mut i = 0;
    for op in ops {
        match op {
            Op::Match => i += 1,
            Op::Sub | Op::Del => {
                err[i] = true;
                i += 1;
            }
            Op::Ins => {}
        }
    }
    err
}

fn contains_span<T: PartialEq>(haystack: &[T], span: &[T]) -> bool {
    haystack.windows(span.len()).any(|w| w == span)
}

/// Moves `hyp[start..start+len]` so that it begins at index `dest` of the
/// sequence with the span removed.
pub fn apply_shift<T: Clone>(hyp: &[T], start: usize, len: usize, dest: usize) -> Vec<T> {
    let mut rest: Vec<T> = hyp[..start].to_vec();
    rest.extend_from_slice(&hyp[start + len..]);
    let mut out = rest[..dest].to_vec();
    out.extend_from_slice(&hyp[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// TER with the greedy shift search: repeatedly apply the shift that lowers
/// shifts-plus-edits the most, then count edits on the final alignment.
/// Candidate spans hold at least one misaligned word and occur verbatim in
/// the reference.
pub fn ter<T: PartialEq + Clone>(hyp: &[T], r: &[T]) -> Result<TerBreakdown> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("TER needs a non-empty reference".into()));
    }
    let mut cur = hyp.to_vec();
    let mut cur_dist = levenshtein(&cur, r);
    let mut shifts = 0;
    loop {
        let errs = hyp_errors(&align(&cur, r), cur.len());
        let mut best: Option<(usize, Vec<T>, usize)> = None;
        let n = cur.len();
        for len in (1..=MAX_SHIFT_SIZE.min(n)).rev() {
            for start in 0..=n - len {
                if !errs[start..start + len].iter().any(|&e| e) || !contains_span(r, &cur[start..start + len]) {
                    continue;
                }
                for dest in 0..=n - len {
                    if dest == start || dest.abs_diff(start) > MAX_SHIFT_DIST {
                        continue;
                    }
                    let cand = apply_shift(&cur, start, len, dest);
                    let d = levenshtein(&cand, r);
                    if d + 1 < cur_dist {
                        let gain = cur_dist - d - 1;
                        if best.as_ref().is_none_or(|b| gain > b.0) {
                            best = Some((gain, cand, d));
                        }
                    }
                }
            }
        }
        match best {
            Some((_, cand, d)) => {
                cur = cand;
                cur_dist = d;
                shifts += 1;
            }
            None => break,
        }
    }
    let mut b = TerBreakdown {
        shifts,
        ref_len: r.len(),
        ..Default::default()
    };
    for op in align(&cur, r) {
        match op {
            Op::Match => {}
            Op::Sub => b.substitutions += 1,
            Op::Ins => b.insertions += 1,
            Op::Del => b.deletions += 1,
        }
    }
    debug_assert_eq!(b.edits(), cur_dist + shifts);
    Ok(b)
}

/// Summed breakdown over a corpus; the corpus score is total edits over
/// total reference length.
pub fn ter_corpus<T, H, R>(hyps: &[H], refs: &[R]) -> Result<TerBreakdown>
where
    T: PartialEq + Clone,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if hyps.len() != refs.len() {
        return Err(Error::CorpusMismatch {
            detail: format!("{} hypotheses vs {} references", hyps.len(), refs.len()),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Empty("TER over an empty corpus".into()));
    }
    let mut total = TerBreakdown::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&ter(h.as_ref(), r.as_ref())?);
    }
    Ok(total)
}

/// Percentage reductions for (In, De, Su, Sh); `None` where the baseline
/// count is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EditReduction {
    pub system: String,
    pub reductions: [Option<f64>; 4],
}

pub const EDIT_OPS: [&str; 4] = ["In", "De", "Su", "Sh"];

fn op_counts(b: &TerBreakdown) -> [usize; 4] {
    [b.insertions, b.deletions, b.substitutions, b.shifts]
}

/// Reduction of each edit type when scoring `ape` instead of `mt` against `pe`.
pub fn edit_reduction<T, S>(system: &str, mt: &[S], pe: &[S], ape: &[S]) -> Result<EditReduction>
where
    T: PartialEq + Clone,
    S: AsRef<[T]>,
{
    if ape.len() != mt.len() {
        return Err(Error::CorpusMismatch {
            detail: format!("{} APE hypotheses vs {} mt lines", ape.len(), mt.len()),
        });
    }
    let base = op_counts(&ter_corpus(mt, pe)?);
    let sys = op_counts(&ter_corpus(ape, pe)?);
    let mut reductions = [None; 4];
    for k in 0..4 {
        if base[k] > 0 {
            reductions[k] = Some(100.0 * (base[k] as f64 - sys[k] as f64) / base[k] as f64);
        }
    }
    Ok(EditReduction {
        system: system.to_string(),
        reductions,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

pub fn report_tsv(rows: &[EditReduction]) -> String {
    let mut s = String::from("system\t%In\t%De\t%Su\t%Sh\n");
    for r in rows {
        let cells: Vec<String> = r.reductions.iter().map(|&v| cell(v)).collect();
        let _ = writeln!(s, "{}\t{}", r.system, cells.join("\t"));
    }
    s
}

pub fn report_aligned(rows: &[EditReduction]) -> String {
    let name_w = rows.iter().map(|r| r.system.len()).max().unwrap_or(0).max("system".len());
    let mut s = format!("{:<name_w$}", "system");
    for op in EDIT_OPS {
        let _ = write!(s, "  {:>8}", format!("%{op}"));
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<name_w$}", r.system);
        for v in r.reductions {
            let _ = write!(s, "  {:>8}", cell(v));
        }
        s.push('\n');
    }
    s
}
