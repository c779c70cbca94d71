//! Flat `key = value` configuration covering model, training, synthetic
//! data and decoding.

use std::path::{Path, PathBuf};

use super::synth::{SynthSpec, SYNTH_KEYS};
use crate::decode::{DecodeOptions, DEFAULT_BEAM, DEFAULT_LENGTH_PENALTY};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MODEL_KEYS};
use crate::train::{TrainConfig, TRAIN_KEYS};

pub const CONFIG_DIR_ENV: &str = "TRANSFERENCE_CONFIG_DIR";
pub const DEFAULT_CONFIG_NAME: &str = "transference.cfg";

const OTHER_KEYS: &[&str] = &["num_merges", "beam", "lenpen", "decode_max_len", "train_size", "dev_size", "test_size"];

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub num_merges: i64,
    pub beam: usize,
    pub lenpen: f64,
    /// 0 means mt length plus 50.
    pub decode_max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            num_merges: 400,
            beam: DEFAULT_BEAM,
            lenpen: DEFAULT_LENGTH_PENALTY,
            decode_max_len: 0,
            train_size: 3000,
            dev_size: 200,
            test_size: 300,
        }
    }
}

pub fn valid_keys() -> Vec<&'static str> {
    MODEL_KEYS
        .iter()
        .chain(TRAIN_KEYS)
        .chain(SYNTH_KEYS)
        .chain(OTHER_KEYS)
        .copied()
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        if self.model.set(key, value)? || self.train.set(key, value)? || self.synth.set(key, value)? {
            return Ok(());
        }
        match key {
            "num_merges" => self.num_merges = parse(key, value)?,
            "beam" => self.beam = parse(key, value)?,
            "lenpen" => self.lenpen = parse(key, value)?,
            "decode_max_len" => self.decode_max_len = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "dev_size" => self.dev_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    valid: valid_keys().join(", "),
                })
            }
        }
        Ok(())
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s = Settings::default();
        s.parse_text(&text, &path.display().to_string())?;
        Ok(s)
    }

    /// The explicit file if given, else `$TRANSFERENCE_CONFIG_DIR/transference.cfg`
    /// when it exists, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Settings::from_file(p);
        }
        if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
            let p = PathBuf::from(dir).join(DEFAULT_CONFIG_NAME);
            if p.exists() {
                return Settings::from_file(&p);
            }
        }
        Ok(Settings::default())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = |title: &str, entries: Vec<(&str, String)>| {
            s.push_str(&format!("# {title}\n"));
            for (k, v) in entries {
                s.push_str(&format!("{k} = {v}\n"));
            }
        };
        section("model", self.model.entries());
        section("training", self.train.entries());
        section("synthetic data", self.synth.entries());
        section(
            "tokenizer, decoding, data sizes",
            vec![
                ("num_merges", self.num_merges.to_string()),
                ("beam", self.beam.to_string()),
                ("lenpen", self.lenpen.to_string()),
                ("decode_max_len", self.decode_max_len.to_string()),
                ("train_size", self.train_size.to_string()),
                ("dev_size", self.dev_size.to_string()),
                ("test_size", self.test_size.to_string()),
            ],
        );
        s
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            beam: self.beam,
            length_penalty: self.lenpen,
            max_len: (self.decode_max_len > 0).then_some(self.decode_max_len),
        }
    }
}
