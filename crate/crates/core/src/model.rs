//! The multi-source post-editing transformer.
//!
//! Three stacks: a source encoder, a second encoder over mt whose layers are
//! decoder blocks without the causal mask (self-attention over mt, then
//! cross-attention into the source encoding), and a standard pe decoder that
//! cross-attends into the output of the second encoder. Two single-encoder
//! baselines reuse the same code: mt only, and src ⧺ sep ⧺ mt.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{SeqBatch, TripletBatch, TripletExample, NUM_SPECIAL, PAD};
use crate::error::{Error, Result};
use crate::nn::{
    layer_norm, multi_head_attention, positionwise_ffn, sinusoidal_positions, sublayer, xavier, AttentionMask,
    FfnParams, MaskMode, MhaParams, NormParams,
};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// src encoder → unmasked src→mt block → pe decoder.
    Transference,
    /// Single encoder over mt.
    MtToPe,
    /// Single encoder over src ⧺ sep ⧺ mt.
    ConcatSrcMt,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Transference => "transference",
            Architecture::MtToPe => "mt_to_pe",
            Architecture::ConcatSrcMt => "concat_src_mt",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transference" => Ok(Architecture::Transference),
            "mt_to_pe" => Ok(Architecture::MtToPe),
            "concat_src_mt" => Ok(Architecture::ConcatSrcMt),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected transference, mt_to_pe or concat_src_mt)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_src: usize,
    pub n_mt: usize,
    pub n_pe: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Longest admissible src/mt/pe sequence in subwords.
    pub max_len: usize,
    pub architecture: Architecture,
    pub share_mt_pe_embeddings: bool,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; the vocabulary size is normally taken from the
    /// learned merge table.
    fn default() -> Self {
        ModelConfig {
            n_src: 2,
            n_mt: 2,
            n_pe: 2,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            dropout: 0.1,
            vocab_size: 600,
            max_len: 256,
            architecture: Architecture::Transference,
            share_mt_pe_embeddings: true,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "n_src",
    "n_mt",
    "n_pe",
    "d_model",
    "heads",
    "d_ff",
    "dropout",
    "vocab_size",
    "max_len",
    "architecture",
    "share_mt_pe_embeddings",
];

impl ModelConfig {
    /// The base configuration with 6 layers per stack.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            n_src: 6,
            n_mt: 6,
            n_pe: 6,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            vocab_size,
            ..ModelConfig::default()
        }
    }

    pub fn with_layers(mut self, n_src: usize, n_mt: usize, n_pe: usize) -> Self {
        self.n_src = n_src;
        self.n_mt = n_mt;
        self.n_pe = n_pe;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.architecture == Architecture::Transference && self.n_src == 0 {
            return fail("n_src must be at least 1 for the transference architecture".into());
        }
        if self.n_mt == 0 || self.n_pe == 0 {
            return fail(format!("n_mt and n_pe must be at least 1 (got {}, {})", self.n_mt, self.n_pe));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.vocab_size <= NUM_SPECIAL {
            return fail(format!("vocab_size {} leaves no room beyond special tokens", self.vocab_size));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_src", self.n_src.to_string()),
            ("n_mt", self.n_mt.to_string()),
            ("n_pe", self.n_pe.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("dropout", self.dropout.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_len", self.max_len.to_string()),
            ("architecture", self.architecture.to_string()),
            ("share_mt_pe_embeddings", self.share_mt_pe_embeddings.to_string()),
        ]
    }

    /// Sets one field from its textual form. Returns `Ok(false)` when `key`
    /// is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "n_src" => self.n_src = parse(key, value)?,
            "n_mt" => self.n_mt = parse(key, value)?,
            "n_pe" => self.n_pe = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "architecture" => self.architecture = value.trim().parse()?,
            "share_mt_pe_embeddings" => self.share_mt_pe_embeddings = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Hash of the fields that determine the parameter layout. Dropout is
    /// excluded so that fine-tuning may change it.
    pub fn fingerprint(&self) -> String {
        let canon = format!(
            "arch={};n_src={};n_mt={};n_pe={};d_model={};heads={};d_ff={};vocab={};max_len={};share={}",
            self.architecture,
            self.n_src,
            self.n_mt,
            self.n_pe,
            self.d_model,
            self.heads,
            self.d_ff,
            self.vocab_size,
            self.max_len,
            self.share_mt_pe_embeddings
        );
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    self_attn: MhaParams,
    ln1: NormParams,
    ffn: FfnParams,
    ln2: NormParams,
}

/// Decoder-shaped layer: self-attention, cross-attention, FFN.
#[derive(Clone, Copy, Debug)]
struct CrossLayer {
    self_attn: MhaParams,
    ln1: NormParams,
    cross_attn: MhaParams,
    ln2: NormParams,
    ffn: FfnParams,
    ln3: NormParams,
}

#[derive(Clone, Debug)]
enum MtBlock {
    Cross(Vec<CrossLayer>),
    Plain(Vec<EncoderLayer>),
}

#[derive(Clone, Debug)]
struct Layout {
    src_emb: Option<ParamId>,
    mt_emb: ParamId,
    pe_emb: ParamId,
    src_layers: Vec<EncoderLayer>,
    src_norm: Option<NormParams>,
    mt_block: MtBlock,
    mt_norm: NormParams,
    pe_layers: Vec<CrossLayer>,
    pe_norm: NormParams,
}

/// Parameters plus the parameter map of one model instance.
#[derive(Clone, Debug)]
pub struct TransferenceModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    positions: Tensor,
}

/// Output of the encoder side: the memory the decoder attends to and the
/// batch whose lengths define its padding.
#[derive(Clone, Copy, Debug)]
pub struct Memory<'b> {
    pub states: Var,
    pub batch: &'b SeqBatch,
}

impl TransferenceModel {
    /// Xavier-uniform initialization, deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, v, ff) = (config.d_model, config.vocab_size, config.d_ff);
        let rng = &mut rng;

        let src_emb = match config.architecture {
            Architecture::Transference => Some(store.insert("emb.src", xavier(v, d, rng))?),
            _ => None,
        };
        let (mt_emb, pe_emb) = if config.share_mt_pe_embeddings {
            let id = store.insert("emb.mt_pe", xavier(v, d, rng))?;
            (id, id)
        } else {
            (
                store.insert("emb.mt", xavier(v, d, rng))?,
                store.insert("emb.pe", xavier(v, d, rng))?,
            )
        };

        let encoder_layer = |store: &mut ParamStore, p: String, rng: &mut ChaCha8Rng| -> Result<EncoderLayer> {
            Ok(EncoderLayer {
                self_attn: MhaParams::init(store, &format!("{p}.self_attn"), d, rng)?,
                ln1: NormParams::init(store, &format!("{p}.ln1"), d)?,
                ffn: FfnParams::init(store, &format!("{p}.ffn"), d, ff, rng)?,
                ln2: NormParams::init(store, &format!("{p}.ln2"), d)?,
            })
        };
        let cross_layer = |store: &mut ParamStore, p: String, rng: &mut ChaCha8Rng| -> Result<CrossLayer> {
            Ok(CrossLayer {
                self_attn: MhaParams::init(store, &format!("{p}.self_attn"), d, rng)?,
                ln1: NormParams::init(store, &format!("{p}.ln1"), d)?,
                cross_attn: MhaParams::init(store, &format!("{p}.cross_attn"), d, rng)?,
                ln2: NormParams::init(store, &format!("{p}.ln2"), d)?,
                ffn: FfnParams::init(store, &format!("{p}.ffn"), d, ff, rng)?,
                ln3: NormParams::init(store, &format!("{p}.ln3"), d)?,
            })
        };

        let mut src_layers = Vec::new();
        let mut src_norm = None;
        if config.architecture == Architecture::Transference {
            for i in 0..config.n_src {
                src_layers.push(encoder_layer(&mut store, format!("enc_src.{i}"), rng)?);
            }
            src_norm = Some(NormParams::init(&mut store, "enc_src.norm", d)?);
        }
        let mt_block = if config.architecture == Architecture::Transference {
            let mut layers = Vec::new();
            for i in 0..config.n_mt {
                layers.push(cross_layer(&mut store, format!("enc_src_mt.{i}"), rng)?);
            }
            MtBlock::Cross(layers)
        } else {
            let mut layers = Vec::new();
            for i in 0..config.n_mt {
                layers.push(encoder_layer(&mut store, format!("enc_mt.{i}"), rng)?);
            }
            MtBlock::Plain(layers)
        };
        let mt_norm_name = match config.architecture {
            Architecture::Transference => "enc_src_mt.norm",
            _ => "enc_mt.norm",
        };
        let mt_norm = NormParams::init(&mut store, mt_norm_name, d)?;
        let mut pe_layers = Vec::new();
        for i in 0..config.n_pe {
            pe_layers.push(cross_layer(&mut store, format!("dec_pe.{i}"), rng)?);
        }
        let pe_norm = NormParams::init(&mut store, "dec_pe.norm", d)?;

        let positions = sinusoidal_positions(2 * config.max_len + 2, d)?;
        Ok(TransferenceModel {
            config,
            params: store,
            layout: Layout {
                src_emb,
                mt_emb,
                pe_emb,
                src_layers,
                src_norm,
                mt_block,
                mt_norm,
                pe_layers,
                pe_norm,
            },
            positions,
        })
    }

    /// Rebuilds a model around existing parameters (e.g. from a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = TransferenceModel::init(config, 0)?;
        if !model.params.same_layout(&params) {
            return Err(Error::InvalidArgument(
                "parameter names or shapes do not match the model config".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn src_embedding(&self) -> Option<ParamId> {
        self.layout.src_emb
    }

    pub fn mt_embedding(&self) -> ParamId {
        self.layout.mt_emb
    }

    pub fn pe_embedding(&self) -> ParamId {
        self.layout.pe_emb
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    pub fn training_graph(&self, seed: u64) -> Graph<'_> {
        Graph::training(&self.params, seed)
    }

    fn check_ids(&self, batch: &SeqBatch, limit: usize) -> Result<()> {
        let vocab = self.config.vocab_size;
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::IdOutOfRange { id: bad, vocab });
        }
        if let Some(&too_long) = batch.lengths.iter().find(|&&l| l > limit) {
            return Err(Error::SequenceTooLong {
                len: too_long,
                max_len: limit,
            });
        }
        Ok(())
    }

    /// Scaled embeddings plus sinusoidal positions, `[batch, len, d_model]`.
    fn embed(&self, g: &mut Graph<'_>, table: ParamId, batch: &SeqBatch) -> Result<Var> {
        let d = self.config.d_model;
        let t = g.param(table);
        let e = g.embed(t, &batch.ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        let e = g.reshape(e, &[batch.batch, batch.len, d])?;
        let pos = &self.positions.data()[..batch.len * d];
        let tiled = Tensor::from_fn(&[batch.batch, batch.len, d], |i| pos[i % (batch.len * d)]);
        let p = g.constant(tiled);
        let x = g.add(e, p)?;
        g.dropout(x, self.config.dropout)
    }

    fn encoder_stack(&self, g: &mut Graph<'_>, mut x: Var, batch: &SeqBatch, layers: &[EncoderLayer], norm: &NormParams) -> Result<Var> {
        let (h, p) = (self.config.heads, self.config.dropout);
        let mask = AttentionMask::new(MaskMode::Padding, batch.batch, batch.len, batch.len, Some(batch.lengths.clone()))?;
        for layer in layers {
            x = sublayer(g, x, &layer.ln1, p, |g, v| multi_head_attention(g, v, v, &layer.self_attn, &mask, h))?;
            x = sublayer(g, x, &layer.ln2, p, |g, v| positionwise_ffn(g, v, &layer.ffn))?;
        }
        layer_norm(g, x, norm)
    }

    fn cross_stack(
        &self,
        g: &mut Graph<'_>,
        mut x: Var,
        self_mask: &AttentionMask,
        memory: Memory<'_>,
        layers: &[CrossLayer],
        norm: &NormParams,
    ) -> Result<Var> {
        let (h, p) = (self.config.heads, self.config.dropout);
        let (b, lq) = (self_mask.dims().0, self_mask.dims().1);
        let mem = memory.batch;
        let cross_mask = AttentionMask::new(MaskMode::Padding, b, lq, mem.len, Some(mem.lengths.clone()))?;
        for layer in layers {
            x = sublayer(g, x, &layer.ln1, p, |g, v| multi_head_attention(g, v, v, &layer.self_attn, self_mask, h))?;
            x = sublayer(g, x, &layer.ln2, p, |g, v| {
                multi_head_attention(g, v, memory.states, &layer.cross_attn, &cross_mask, h)
            })?;
            x = sublayer(g, x, &layer.ln3, p, |g, v| positionwise_ffn(g, v, &layer.ffn))?;
        }
        layer_norm(g, x, norm)
    }

    /// The source encoder: `[batch, k, d_model]`.
    pub fn encode_src(&self, g: &mut Graph<'_>, src: &SeqBatch) -> Result<Var> {
        let (Some(table), Some(norm)) = (self.layout.src_emb, self.layout.src_norm.as_ref()) else {
            return Err(Error::InvalidArgument(format!(
                "architecture {} has no source encoder",
                self.config.architecture
            )));
        };
        self.check_ids(src, self.config.max_len + 1)?;
        let x = self.embed(g, table, src)?;
        self.encoder_stack(g, x, src, &self.layout.src_layers, norm)
    }

    /// The second encoder over mt. For the transference architecture every
    /// layer runs unmasked self-attention over mt and cross-attention into
    /// `enc_src`; for the baselines it is a plain encoder and `enc_src` must
    /// be `None`.
    pub fn encode_src_mt(&self, g: &mut Graph<'_>, enc_src: Option<Memory<'_>>, mt: &SeqBatch) -> Result<Var> {
        let limit = match self.config.architecture {
            Architecture::ConcatSrcMt => 2 * self.config.max_len + 2,
            _ => self.config.max_len + 1,
        };
        self.check_ids(mt, limit)?;
        let x = self.embed(g, self.layout.mt_emb, mt)?;
        match (&self.layout.mt_block, enc_src) {
            (MtBlock::Cross(layers), Some(memory)) => {
                if memory.batch.batch != mt.batch {
                    return Err(Error::InvalidArgument(format!(
                        "src batch {} does not match mt batch {}",
                        memory.batch.batch, mt.batch
                    )));
                }
                // no causal mask: every mt position sees all of mt
                let mask = AttentionMask::new(MaskMode::Padding, mt.batch, mt.len, mt.len, Some(mt.lengths.clone()))?;
                self.cross_stack(g, x, &mask, memory, layers, &self.layout.mt_norm)
            }
            (MtBlock::Cross(_), None) => Err(Error::InvalidArgument(
                "the src→mt encoder needs the source encoder output".into(),
            )),
            (MtBlock::Plain(layers), None) => self.encoder_stack(g, x, mt, layers, &self.layout.mt_norm),
            (MtBlock::Plain(_), Some(_)) => Err(Error::InvalidArgument(format!(
                "architecture {} does not take a source encoding",
                self.config.architecture
            ))),
        }
    }

    /// Runs whichever encoder side the architecture defines.
    pub fn encode<'b>(&self, g: &mut Graph<'_>, batch: &'b TripletBatch) -> Result<Memory<'b>> {
        let states = match self.config.architecture {
            Architecture::Transference => {
                let src = self.encode_src(g, &batch.src)?;
                let memory = Memory {
                    states: src,
                    batch: &batch.src,
                };
                self.encode_src_mt(g, Some(memory), &batch.mt)?
            }
            Architecture::MtToPe => self.encode_src_mt(g, None, &batch.mt)?,
            Architecture::ConcatSrcMt => self.encode_src_mt(g, None, &batch.src_mt)?,
        };
        let mem_batch = match self.config.architecture {
            Architecture::ConcatSrcMt => &batch.src_mt,
            _ => &batch.mt,
        };
        Ok(Memory {
            states,
            batch: mem_batch,
        })
    }

    /// Teacher-forced decoder: `[batch * n, vocab]` logits through the output
    /// projection tied to the pe embedding table.
    pub fn decode_pe(&self, g: &mut Graph<'_>, memory: Memory<'_>, pe_in: &SeqBatch) -> Result<Var> {
        self.check_ids(pe_in, self.config.max_len + 1)?;
        if memory.batch.batch != pe_in.batch {
            return Err(Error::InvalidArgument(format!(
                "memory batch {} does not match pe batch {}",
                memory.batch.batch, pe_in.batch
            )));
        }
        let x = self.embed(g, self.layout.pe_emb, pe_in)?;
        let mask = AttentionMask::new(
            MaskMode::CausalPadding,
            pe_in.batch,
            pe_in.len,
            pe_in.len,
            Some(pe_in.lengths.clone()),
        )?;
        let h = self.cross_stack(g, x, &mask, memory, &self.layout.pe_layers, &self.layout.pe_norm)?;
        let h = g.reshape(h, &[pe_in.batch * pe_in.len, self.config.d_model])?;
        let table = g.param(self.layout.pe_emb);
        g.matmul_ext(h, table, true)
    }

    /// Label-smoothed cross-entropy over the batch's targets, multiplied by
    /// `scale` (use `1 / tokens` for a mean).
    pub fn forward_loss_scaled(&self, g: &mut Graph<'_>, batch: &TripletBatch, smoothing: f64, scale: f64) -> Result<Var> {
        let memory = self.encode(g, batch)?;
        let logits = self.decode_pe(g, memory, &batch.pe_in)?;
        g.cross_entropy_scaled(logits, &batch.targets, PAD, smoothing, scale)
    }

    /// Mean cross-entropy over non-pad targets of the batch.
    pub fn forward_loss(&self, g: &mut Graph<'_>, batch: &TripletBatch, smoothing: f64) -> Result<Var> {
        let tokens = batch.target_tokens();
        self.forward_loss_scaled(g, batch, smoothing, 1.0 / tokens as f64)
    }

    /// Evaluation-mode mean NLL of a single example.
    pub fn example_loss(&self, example: &TripletExample) -> Result<f64> {
        let batch = TripletBatch::collate(&[example])?;
        let mut g = self.graph();
        let loss = self.forward_loss(&mut g, &batch, 0.0)?;
        Ok(g.value(loss).item())
    }
}
