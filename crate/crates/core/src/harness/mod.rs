//! Corpus files, synthetic data, configuration, corpus-level decoding and
//! the layer-depth ablation driver.

pub mod corpus;
pub mod settings;
pub mod synth;

use std::fmt::Write as _;
use std::path::Path;

pub use corpus::{load_corpus, normalize, CorpusPaths, TripletCorpus};
pub use settings::Settings;
pub use synth::{gen_synthetic, Domain, Lexicon, SynthSpec};

use crate::bpe::MergeTable;
use crate::decode::{decode_ids, DecodeOptions, ModelSet};
use crate::error::{Error, Result};
use crate::metrics::{bleu_corpus, ter_corpus, tokenize, Smoothing, TerBreakdown};
use crate::model::{ModelConfig, TransferenceModel};
use crate::train::{train, Output, TrainConfig};

/// Corpus BLEU and summed TER of detokenized text, whitespace-tokenized.
pub fn score_text<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R], lowercase: bool) -> Result<(f64, TerBreakdown)> {
    let h: Vec<Vec<String>> = hyps.iter().map(|s| tokenize(s.as_ref(), lowercase)).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|s| tokenize(s.as_ref(), lowercase)).collect();
    Ok((bleu_corpus(&h, &r, 4, Smoothing::AddOneZeros)?, ter_corpus(&h, &r)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusReport {
    pub hyps: Vec<String>,
    pub bleu: f64,
    pub ter: TerBreakdown,
}

fn encoded(corpus: &TripletCorpus) -> Result<&[crate::data::TripletExample]> {
    if corpus.encoded.len() != corpus.len() {
        return Err(Error::InvalidArgument("corpus has not been encoded".into()));
    }
    Ok(&corpus.encoded)
}

/// Decodes every triplet, detokenizes, optionally writes one hypothesis per
/// line to `out`, and scores against pe.
pub fn decode_corpus(
    models: &ModelSet<'_>,
    corpus: &TripletCorpus,
    bpe: &MergeTable,
    opts: &DecodeOptions,
    out: Option<&Path>,
) -> Result<CorpusReport> {
    let ids = decode_ids(models, encoded(corpus)?, opts)?;
    let hyps = ids.iter().map(|h| bpe.decode(h)).collect::<Result<Vec<_>>>()?;
    if let Some(path) = out {
        let mut text = String::new();
        for h in &hyps {
            text.push_str(h);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let (bleu, ter) = score_text(&hyps, &corpus.pe, false)?;
    Ok(CorpusReport { hyps, bleu, ter })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub layers: (usize, usize, usize),
    pub bleu: f64,
    pub ter: f64,
    pub params: usize,
}

/// Trains one model per layer triple with the same seed and budget and
/// scores each on `dev`.
pub fn run_ablation(
    base: &ModelConfig,
    triples: &[(usize, usize, usize)],
    train_corpus: &TripletCorpus,
    dev: &TripletCorpus,
    bpe: &MergeTable,
    cfg: &TrainConfig,
    opts: &DecodeOptions,
) -> Result<Vec<AblationRow>> {
    if triples.is_empty() {
        return Err(Error::Empty("no layer configurations".into()));
    }
    let configs: Vec<ModelConfig> = triples
        .iter()
        .map(|&(s, m, p)| {
            let c = base.clone().with_layers(s, m, p);
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(configs.len());
    for (c, &layers) in configs.into_iter().zip(triples) {
        let model = TransferenceModel::init(c, cfg.seed)?;
        let params = model.count_params();
        let out = train(model, encoded(train_corpus)?, encoded(dev)?, cfg, Output::default())?;
        let report = decode_corpus(&ModelSet::Single(&out.model), dev, bpe, opts, None)?;
        rows.push(AblationRow {
            layers,
            bleu: report.bleu,
            ter: 100.0 * report.ter.score(),
            params,
        });
    }
    Ok(rows)
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from("layers\tBLEU\tTER\tparams\n");
    for r in rows {
        let (a, b, c) = r.layers;
        let _ = writeln!(s, "{a}-{b}-{c}\t{:.2}\t{:.2}\t{}", r.bleu, r.ter, r.params);
    }
    s
}

/// Parses `2-2-2,2-2-1` into layer triples.
pub fn parse_triples(text: &str) -> Result<Vec<(usize, usize, usize)>> {
    text.split(',')
        .map(|t| {
            let parts: Vec<usize> = t
                .trim()
                .split('-')
                .map(|x| x.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad layer triple `{t}`")))?;
            match parts[..] {
                [a, b, c] => Ok((a, b, c)),
                _ => Err(Error::Config(format!("layer triple `{t}` needs three numbers"))),
            }
        })
        .collect()
}
