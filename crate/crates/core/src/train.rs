//! Token-budget batching, the warmup/decay schedule, Adam, checkpoints and
//! the train / fine-tune loops.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{TripletBatch, TripletExample};
use crate::decode::greedy_batch;
use crate::error::{Error, Result};
use crate::metrics::{bleu_corpus, Smoothing};
use crate::model::{ModelConfig, TransferenceModel};
use crate::tensor::{GradStore, ParamStore, Tensor};

pub const DEFAULT_POOL: usize = 1000;
const CKPT_MAGIC: &str = "TRANSFERENCE-CKPT 1";

/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: usize, d_model: usize, warmup_steps: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidArgument("learning-rate step counts from 1".into()));
    }
    if warmup_steps == 0 {
        return Err(Error::InvalidArgument("warmup_steps must be at least 1".into()));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    /// Real pe tokens (eos excluded) per micro-batch.
    pub token_budget: usize,
    /// Examples with any side longer than this are dropped.
    pub max_len: usize,
    /// Optimizer updates in this run.
    pub max_steps: usize,
    /// Upper bound on passes over the data; 0 means unbounded.
    pub max_epochs: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Multiplier on the schedule.
    pub lr_scale: f64,
    /// Micro-batches per update.
    pub accumulation: usize,
    /// Examples per shuffled chunk that is length-sorted before packing.
    pub pool_size: usize,
    /// Dev decoding stops at mt length plus this many tokens.
    pub dev_decode_extra: usize,
    /// Fine-tuning only: keep counting schedule steps from the checkpoint.
    pub continue_schedule: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 400,
            token_budget: 2000,
            max_len: 256,
            max_steps: 2000,
            max_epochs: 0,
            seed: 1,
            eval_interval: 200,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            lr_scale: 1.0,
            accumulation: 1,
            pool_size: DEFAULT_POOL,
            dev_decode_extra: 10,
            continue_schedule: false,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "warmup_steps",
    "token_budget",
    "train_max_len",
    "max_steps",
    "max_epochs",
    "seed",
    "eval_interval",
    "beta1",
    "beta2",
    "adam_eps",
    "label_smoothing",
    "lr_scale",
    "accumulation",
    "pool_size",
    "dev_decode_extra",
    "continue_schedule",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// The large-data settings: 8000 warmup steps, 25000-token batches.
    pub fn large_scale() -> Self {
        TrainConfig {
            warmup_steps: 8000,
            token_budget: 25000,
            max_len: 256,
            max_steps: 100_000,
            eval_interval: 1000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if self.max_len == 0 || self.token_budget < self.max_len {
            return bad(format!(
                "token_budget {} must cover the longest admissible sequence ({})",
                self.token_budget, self.max_len
            ));
        }
        if self.eval_interval == 0 || self.accumulation == 0 || self.pool_size == 0 {
            return bad("eval_interval, accumulation and pool_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.lr_scale > 0.0) {
            return bad(format!("lr_scale must be positive, got {}", self.lr_scale));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("warmup_steps", self.warmup_steps.to_string()),
            ("token_budget", self.token_budget.to_string()),
            ("train_max_len", self.max_len.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("lr_scale", self.lr_scale.to_string()),
            ("accumulation", self.accumulation.to_string()),
            ("pool_size", self.pool_size.to_string()),
            ("dev_decode_extra", self.dev_decode_extra.to_string()),
            ("continue_schedule", self.continue_schedule.to_string()),
        ]
    }

    /// Sets one key; `Ok(false)` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "token_budget" => self.token_budget = parse(key, value)?,
            "train_max_len" => self.max_len = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "lr_scale" => self.lr_scale = parse(key, value)?,
            "accumulation" => self.accumulation = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "dev_decode_extra" => self.dev_decode_extra = parse(key, value)?,
            "continue_schedule" => self.continue_schedule = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One epoch's batches as corpus indices, plus how many examples were too
/// long to use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batching {
    pub batches: Vec<Vec<usize>>,
    pub dropped: usize,
}

fn budget_cost(e: &TripletExample) -> usize {
    e.pe.len().max(1)
}

pub fn make_batches(corpus: &[TripletExample], token_budget: usize, max_len: usize, epoch_seed: u64) -> Result<Batching> {
    make_batches_pooled(corpus, token_budget, max_len, epoch_seed, DEFAULT_POOL)
}

/// Shuffles the admissible examples, sorts each chunk of `pool` examples by
/// length, packs batches whose pe tokens fit the budget, then shuffles the
/// batch order.
pub fn make_batches_pooled(
    corpus: &[TripletExample],
    token_budget: usize,
    max_len: usize,
    epoch_seed: u64,
    pool: usize,
) -> Result<Batching> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus is empty".into()));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].max_side_len() <= max_len).collect();
    let dropped = corpus.len() - idx.len();
    if idx.is_empty() {
        return Err(Error::Empty(format!("every example exceeds max_len {max_len}")));
    }
    if let Some(&i) = idx.iter().find(|&&i| budget_cost(&corpus[i]) > token_budget) {
        return Err(Error::Config(format!(
            "example {i} has {} pe tokens, over the token budget {token_budget}",
            corpus[i].pe.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    idx.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in idx.chunks_mut(pool.max(1)) {
        chunk.sort_by_key(|&i| (corpus[i].pe.len(), corpus[i].mt.len(), corpus[i].src.len()));
        let mut cur: Vec<usize> = Vec::new();
        let mut tokens = 0;
        for &i in chunk.iter() {
            let c = budget_cost(&corpus[i]);
            if tokens + c > token_budget && !cur.is_empty() {
                batches.push(std::mem::take(&mut cur));
                tokens = 0;
            }
            cur.push(i);
            tokens += c;
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
    }
    batches.shuffle(&mut rng);
    Ok(Batching { batches, dropped })
}

/// Splits an update batch into consecutive pieces that each fit the budget.
pub fn split_micro(corpus: &[TripletExample], batch: &[usize], token_budget: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for &i in batch {
        let c = budget_cost(&corpus[i]);
        if tokens + c > token_budget && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += c;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// A parameter snapshot with the metrics it was selected by.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub step: usize,
    pub dev_loss: f64,
    pub dev_bleu: f64,
}

impl Checkpoint {
    pub fn from_model(model: &TransferenceModel, step: usize, dev_loss: f64, dev_bleu: f64) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().clone(),
            step,
            dev_loss,
            dev_bleu,
        }
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn to_model(&self) -> Result<TransferenceModel> {
        TransferenceModel::from_params(self.config.clone(), self.params.clone())
    }

    /// Text header (magic, fingerprint, step, metrics, config, parameter
    /// names and shapes) ending in a `data` line, then every parameter as
    /// little-endian f64 in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = String::new();
        let _ = writeln!(h, "{CKPT_MAGIC}");
        let _ = writeln!(h, "fingerprint {}", self.fingerprint());
        let _ = writeln!(h, "step {}", self.step);
        let _ = writeln!(h, "dev_loss {}", self.dev_loss);
        let _ = writeln!(h, "dev_bleu {}", self.dev_bleu);
        for (k, v) in self.config.entries() {
            let _ = writeln!(h, "config {k}={v}");
        }
        let _ = writeln!(h, "params {}", self.params.len());
        for (_, name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
            let _ = writeln!(h, "param {name} {}", dims.join("x"));
        }
        h.push_str("data\n");
        let mut out = h.into_bytes();
        out.reserve(self.params.num_values() * 8);
        for (_, _, t) in self.params.iter() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut pos = 0;
        let mut lines: Vec<&str> = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| err(lines.len() + 1, "truncated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| err(lines.len() + 1, "header is not UTF-8".into()))?;
            pos += end + 1;
            if line == "data" {
                break;
            }
            lines.push(line);
        }
        if lines.first() != Some(&CKPT_MAGIC) {
            return Err(err(1, format!("expected `{CKPT_MAGIC}`")));
        }
        let mut fingerprint = None;
        let (mut step, mut dev_loss, mut dev_bleu) = (None, None, None);
        let mut config = ModelConfig::default();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for (n, line) in lines.iter().enumerate().skip(1) {
            let ln = n + 1;
            let (key, rest) = line.split_once(' ').ok_or_else(|| err(ln, format!("malformed line `{line}`")))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(ln, format!("bad number `{s}`")));
            match key {
                "fingerprint" => fingerprint = Some(rest.to_string()),
                "step" => step = Some(rest.parse::<usize>().map_err(|_| err(ln, format!("bad step `{rest}`")))?),
                "dev_loss" => dev_loss = Some(num(rest)?),
                "dev_bleu" => dev_bleu = Some(num(rest)?),
                "config" => {
                    let (k, v) = rest.split_once('=').ok_or_else(|| err(ln, "expected key=value".into()))?;
                    if !config.set(k, v)? {
                        return Err(err(ln, format!("unknown config key `{k}`")));
                    }
                }
                "params" => {}
                "param" => {
                    let (name, dims) = rest.split_once(' ').ok_or_else(|| err(ln, "expected name and shape".into()))?;
                    let dims = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| err(ln, format!("bad shape `{dims}`")))?;
                    shapes.push((name.to_string(), dims));
                }
                _ => return Err(err(ln, format!("unknown header key `{key}`"))),
            }
        }
        let missing = |what: &str| err(lines.len(), format!("missing `{what}` line"));
        let fingerprint = fingerprint.ok_or_else(|| missing("fingerprint"))?;
        if fingerprint != config.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: fingerprint,
                found: config.fingerprint(),
            });
        }
        let mut params = ParamStore::new();
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let chunk = bytes
                .get(pos..pos + n * 8)
                .ok_or_else(|| err(lines.len() + 1, format!("parameter data truncated at `{name}`")))?;
            pos += n * 8;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if pos != bytes.len() {
            return Err(err(lines.len() + 1, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            config,
            params,
            step: step.ok_or_else(|| missing("step"))?,
            dev_loss: dev_loss.ok_or_else(|| missing("dev_loss"))?,
            dev_bleu: dev_bleu.ok_or_else(|| missing("dev_bleu"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

fn same_fingerprint(cks: &[&Checkpoint]) -> Result<()> {
    let first = cks[0].fingerprint();
    for c in &cks[1..] {
        if c.fingerprint() != first || !c.params.same_layout(&cks[0].params) {
            return Err(Error::FingerprintMismatch {
                expected: first,
                found: c.fingerprint(),
            });
        }
    }
    Ok(())
}

/// The `k` checkpoints with highest dev BLEU (then lower dev loss, then
/// later step), best first.
pub fn select_best(checkpoints: &[Checkpoint], k: usize) -> Result<Vec<&Checkpoint>> {
    if checkpoints.is_empty() || k == 0 {
        return Err(Error::Empty("nothing to select".into()));
    }
    if k > checkpoints.len() {
        return Err(Error::InvalidArgument(format!(
            "asked for {k} checkpoints, only {} available",
            checkpoints.len()
        )));
    }
    let mut refs: Vec<&Checkpoint> = checkpoints.iter().collect();
    same_fingerprint(&refs)?;
    let bleu = |x: f64| if x.is_nan() { f64::NEG_INFINITY } else { x };
    let loss = |x: f64| if x.is_nan() { f64::INFINITY } else { x };
    refs.sort_by(|a, b| {
        bleu(b.dev_bleu)
            .total_cmp(&bleu(a.dev_bleu))
            .then(loss(a.dev_loss).total_cmp(&loss(b.dev_loss)))
            .then(b.step.cmp(&a.step))
    });
    refs.truncate(k);
    Ok(refs)
}

/// Element-wise mean. Values are sorted per element before a running mean,
/// so the result does not depend on argument order and averaging copies of
/// one checkpoint returns it unchanged.
pub fn average_checkpoints(checkpoints: &[&Checkpoint]) -> Result<Checkpoint> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("no checkpoints to average".into()));
    }
    same_fingerprint(checkpoints)?;
    let mut params = checkpoints[0].params.clone();
    let ids: Vec<_> = params.ids().collect();
    let mut vals = Vec::with_capacity(checkpoints.len());
    for id in ids {
        let out = params.get_mut(id).data_mut();
        for (i, o) in out.iter_mut().enumerate() {
            vals.clear();
            vals.extend(checkpoints.iter().map(|c| c.params.get(id).data()[i]));
            vals.sort_by(f64::total_cmp);
            let mut mean = 0.0;
            for (k, &x) in vals.iter().enumerate() {
                mean += (x - mean) / (k + 1) as f64;
            }
            *o = mean;
        }
    }
    Ok(Checkpoint {
        config: checkpoints[0].config.clone(),
        params,
        step: checkpoints.iter().map(|c| c.step).max().unwrap_or(0),
        dev_loss: f64::NAN,
        dev_bleu: f64::NAN,
    })
}

/// One metric-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_bleu: f64,
}

pub fn log_tsv(rows: &[LogRow]) -> String {
    let mut s = String::from("step\tlr\ttrain_loss\tdev_loss\tdev_bleu\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.4}",
            r.step, r.lr, r.train_loss, r.dev_loss, r.dev_bleu
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TransferenceModel,
    /// One per evaluation interval, including the initial state.
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
    pub dropped: usize,
    /// Schedule step reached.
    pub step: usize,
}

/// Token-weighted mean NLL over `examples`, evaluation mode, no smoothing.
pub fn corpus_loss(model: &TransferenceModel, examples: &[TripletExample]) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in examples.chunks(32) {
        let refs: Vec<&TripletExample> = chunk.iter().collect();
        let batch = TripletBatch::collate(&refs)?;
        let mut g = model.graph();
        let loss = model.forward_loss_scaled(&mut g, &batch, 0.0, 1.0)?;
        total += g.value(loss).item();
        tokens += batch.target_tokens();
    }
    if tokens == 0 {
        return Err(Error::Empty("no target tokens".into()));
    }
    Ok(total / tokens as f64)
}

/// Subword-level corpus BLEU of greedy output against pe.
pub fn corpus_bleu_ids(model: &TransferenceModel, examples: &[TripletExample], extra: usize) -> Result<f64> {
    let max = model.config().max_len;
    let hyps = greedy_batch(model, examples, |e| (e.mt.len() + extra).min(max), 32)?;
    let refs: Vec<&[usize]> = examples.iter().map(|e| e.pe.as_slice()).collect();
    bleu_corpus(&hyps, &refs, 4, Smoothing::AddOneZeros)
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_vocab(model: &TransferenceModel, corpus: &[TripletExample]) -> Result<()> {
    let vocab = model.config().vocab_size;
    for e in corpus {
        if let Some(&id) = e.src.iter().chain(&e.mt).chain(&e.pe).find(|&&i| i >= vocab) {
            return Err(Error::IdOutOfRange { id, vocab });
        }
    }
    Ok(())
}

/// Where checkpoints and the metric log go, if anywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct Output<'a> {
    pub dir: Option<&'a Path>,
}

fn evaluate(
    model: &TransferenceModel,
    dev: &[TripletExample],
    cfg: &TrainConfig,
    step: usize,
    lr: f64,
    train_loss: f64,
    out: Output<'_>,
    outcome: &mut (Vec<Checkpoint>, Vec<LogRow>),
) -> Result<()> {
    let dev_loss = corpus_loss(model, dev)?;
    let dev_bleu = corpus_bleu_ids(model, dev, cfg.dev_decode_extra)?;
    let ck = Checkpoint::from_model(model, step, dev_loss, dev_bleu);
    let row = LogRow {
        step,
        lr,
        train_loss,
        dev_loss,
        dev_bleu,
    };
    if let Some(dir) = out.dir {
        ck.save(&dir.join(format!("ckpt-{step:07}.bin")))?;
        let log_path = dir.join("metrics.tsv");
        let fresh = outcome.1.is_empty();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let text = log_tsv(std::slice::from_ref(&row));
        let text = if fresh { text.as_str() } else { text.split_once('\n').map_or("", |x| x.1) };
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
    }
    outcome.0.push(ck);
    outcome.1.push(row);
    Ok(())
}

fn run(
    mut model: TransferenceModel,
    corpus: &[TripletExample],
    dev: &[TripletExample],
    cfg: &TrainConfig,
    start_step: usize,
    out: Output<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::Empty("dev corpus is empty".into()));
    }
    if cfg.max_len > model.config().max_len {
        return Err(Error::Config(format!(
            "train_max_len {} exceeds the model's max_len {}",
            cfg.max_len,
            model.config().max_len
        )));
    }
    check_vocab(&model, corpus)?;
    check_vocab(&model, dev)?;
    if let Some(dir) = out.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let update_budget = cfg.token_budget * cfg.accumulation;
    let first = make_batches_pooled(corpus, update_budget, cfg.max_len, mix(cfg.seed, 0), cfg.pool_size)?;
    let dropped = first.dropped;
    let mut logs = (Vec::new(), Vec::new());
    evaluate(&model, dev, cfg, start_step, 0.0, f64::NAN, out, &mut logs)?;

    let mut adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut grads = GradStore::zeros_like(model.params());
    let d_model = model.config().d_model;
    let (mut local, mut step) = (0usize, start_step);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut lr = 0.0;
    let mut epoch = 0u64;
    let mut batching = Some(first);
    'outer: while local < cfg.max_steps && (cfg.max_epochs == 0 || (epoch as usize) < cfg.max_epochs) {
        let b = match batching.take() {
            Some(b) => b,
            None => make_batches_pooled(corpus, update_budget, cfg.max_len, mix(cfg.seed, epoch), cfg.pool_size)?,
        };
        for batch in &b.batches {
            if local >= cfg.max_steps {
                break 'outer;
            }
            step += 1;
            local += 1;
            let micro = split_micro(corpus, batch, cfg.token_budget);
            let total: usize = batch.iter().map(|&i| corpus[i].pe.len() + 1).sum();
            let scale = 1.0 / total as f64;
            grads.zero();
            let mut update_loss = 0.0;
            for (k, mb) in micro.iter().enumerate() {
                let refs: Vec<&TripletExample> = mb.iter().map(|&i| &corpus[i]).collect();
                let tb = TripletBatch::collate(&refs)?;
                let mut g = model.training_graph(mix(mix(cfg.seed, step as u64), k as u64 + 1));
                let loss = model.forward_loss_scaled(&mut g, &tb, cfg.label_smoothing, scale)?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::Diverged { step, loss: v });
                }
                update_loss += v;
                g.backward(loss, &mut grads)?;
            }
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            lr = cfg.lr_scale * noam_lr(step, d_model, cfg.warmup_steps)?;
            adam.step(model.params_mut(), &grads, lr);
            loss_sum += update_loss;
            loss_n += 1;
            if local % cfg.eval_interval == 0 || local == cfg.max_steps {
                evaluate(&model, dev, cfg, step, lr, loss_sum / loss_n as f64, out, &mut logs)?;
                loss_sum = 0.0;
                loss_n = 0;
            }
        }
        epoch += 1;
    }
    if loss_n > 0 {
        evaluate(&model, dev, cfg, step, lr, loss_sum / loss_n as f64, out, &mut logs)?;
    }
    Ok(TrainOutcome {
        model,
        checkpoints: logs.0,
        log: logs.1,
        dropped,
        step,
    })
}

/// Trains from the given initialization. Evaluates and snapshots at step 0,
/// every `eval_interval` updates and at the end.
pub fn train(
    model: TransferenceModel,
    corpus: &[TripletExample],
    dev: &[TripletExample],
    cfg: &TrainConfig,
    out: Output<'_>,
) -> Result<TrainOutcome> {
    run(model, corpus, dev, cfg, 0, out)
}

/// Continues training a checkpoint on new data with fresh optimizer state.
/// The schedule restarts at step 1 unless `continue_schedule` is set.
pub fn fine_tune(
    checkpoint: &Checkpoint,
    config: &ModelConfig,
    corpus: &[TripletExample],
    dev: &[TripletExample],
    cfg: &TrainConfig,
    out: Output<'_>,
) -> Result<TrainOutcome> {
    if checkpoint.fingerprint() != config.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: config.fingerprint(),
            found: checkpoint.fingerprint(),
        });
    }
    let model = TransferenceModel::from_params(config.clone(), checkpoint.params.clone())?;
    let start = if cfg.continue_schedule { checkpoint.step } else { 0 };
    run(model, corpus, dev, cfg, start, out)
}

#[cfg(test)]
mod tests;
