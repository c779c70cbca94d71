//! Three parallel text files, one sentence per line.

use std::path::{Path, PathBuf};

use crate::bpe::MergeTable;
use crate::data::TripletExample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TripletCorpus {
    pub src: Vec<String>,
    pub mt: Vec<String>,
    pub pe: Vec<String>,
    /// Where the text came from: file paths or a generator seed.
    pub provenance: String,
    /// Subword ids, filled by `encode`.
    pub encoded: Vec<TripletExample>,
}

/// Trims and collapses internal whitespace runs to single spaces.
pub fn normalize(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(normalize).collect())
}

impl TripletCorpus {
    pub fn new(src: Vec<String>, mt: Vec<String>, pe: Vec<String>, provenance: impl Into<String>) -> Result<Self> {
        if src.len() != mt.len() || mt.len() != pe.len() {
            return Err(Error::CorpusMismatch {
                detail: format!("src {} / mt {} / pe {} lines", src.len(), mt.len(), pe.len()),
            });
        }
        Ok(TripletCorpus {
            src,
            mt,
            pe,
            provenance: provenance.into(),
            encoded: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Encodes every side with the merge table, replacing `encoded`.
    pub fn encode(&mut self, bpe: &MergeTable) {
        let src = bpe.encode_all(self.src.iter().map(String::as_str));
        let mt = bpe.encode_all(self.mt.iter().map(String::as_str));
        let pe = bpe.encode_all(self.pe.iter().map(String::as_str));
        self.encoded = src
            .into_iter()
            .zip(mt)
            .zip(pe)
            .map(|((s, m), p)| TripletExample::new(s, m, p))
            .collect();
    }

    pub fn all_sentences(&self) -> impl Iterator<Item = &str> {
        self.src.iter().chain(&self.mt).chain(&self.pe).map(String::as_str)
    }

    /// Rows `range` as a new corpus, keeping any encoding.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TripletCorpus {
        TripletCorpus {
            src: self.src[range.clone()].to_vec(),
            mt: self.mt[range.clone()].to_vec(),
            pe: self.pe[range.clone()].to_vec(),
            provenance: format!("{}[{}..{}]", self.provenance, range.start, range.end),
            encoded: if self.encoded.len() == self.len() {
                self.encoded[range].to_vec()
            } else {
                Vec::new()
            },
        }
    }

    pub fn save(&self, paths: &CorpusPaths) -> Result<()> {
        for (path, lines) in [(&paths.src, &self.src), (&paths.mt, &self.mt), (&paths.pe, &self.pe)] {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut text = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
            for l in lines {
                text.push_str(l);
                text.push('\n');
            }
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// File locations of one corpus split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusPaths {
    pub src: PathBuf,
    pub mt: PathBuf,
    pub pe: PathBuf,
}

impl CorpusPaths {
    /// `<prefix>.src`, `<prefix>.mt`, `<prefix>.pe`.
    pub fn from_prefix(prefix: &Path) -> Self {
        let with = |ext: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(".");
            s.push(ext);
            PathBuf::from(s)
        };
        CorpusPaths {
            src: with("src"),
            mt: with("mt"),
            pe: with("pe"),
        }
    }
}

/// Loads the three files in order, normalizing whitespace only.
pub fn load_corpus(paths: &CorpusPaths) -> Result<TripletCorpus> {
    let src = read_lines(&paths.src)?;
    let mt = read_lines(&paths.mt)?;
    let pe = read_lines(&paths.pe)?;
    let counts = [(&paths.src, src.len()), (&paths.mt, mt.len()), (&paths.pe, pe.len())];
    let max = counts.iter().map(|c| c.1).max().unwrap_or(0);
    if let Some((short, n)) = counts.iter().find(|c| c.1 < max) {
        return Err(Error::CorpusMismatch {
            detail: format!("{} has {n} lines, expected {max}", short.display()),
        });
    }
    let provenance = format!("{} | {} | {}", paths.src.display(), paths.mt.display(), paths.pe.display());
    TripletCorpus::new(src, mt, pe, provenance)
}
