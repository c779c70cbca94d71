//! Joint byte-pair encoding over src, mt and pe text.
//!
//! Sentences are split on whitespace, and punctuation is split off word
//! bodies. Only the last piece of each whitespace-delimited token carries the
//! end-of-word marker, so decoding restores the original spacing exactly.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::data::{BOS, EOS, NUM_SPECIAL, PAD, SEP, UNK};
use crate::error::{Error, Result};

pub const EOW: &str = "</w>";
pub const UNK_MARK: &str = "<unk>";
const HEADER: &str = "#bpe-merges v1";

/// Learned merges and the resulting vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeTable {
    base: Vec<String>,
    merges: Vec<(String, String)>,
    /// id → symbol text for every non-special id.
    symbols: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    /// Symbol text → first id carrying it.
    ids: HashMap<String, usize>,
}

/// A pre-tokenized piece: its characters and whether a space follows it.
fn pieces(sentence: &str) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    for token in sentence.split_whitespace() {
        let mut parts: Vec<String> = Vec::new();
        let mut word = String::new();
        for ch in token.chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    parts.push(std::mem::take(&mut word));
                }
                parts.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            parts.push(word);
        }
        let last = parts.len() - 1;
        out.extend(parts.into_iter().enumerate().map(|(i, p)| (p, i == last)));
    }
    out
}

fn initial_symbols(piece: &str, eow: bool) -> Vec<String> {
    let mut syms: Vec<String> = piece.chars().map(|c| c.to_string()).collect();
    if eow {
        syms.push(EOW.to_string());
    }
    syms
}

fn apply_merge(word: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < word.len() {
        if word[i] == left && word[i + 1] == right {
            let merged = format!("{}{}", word[i], word[i + 1]);
            word[i] = merged;
            word.remove(i + 1);
        }
        i += 1;
    }
}

impl MergeTable {
    fn build(base: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut symbols: Vec<String> = base.clone();
        symbols.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        let mut ids = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            ids.entry(s.clone()).or_insert(i + NUM_SPECIAL);
        }
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        MergeTable {
            base,
            merges,
            symbols,
            ranks,
            ids,
        }
    }

    /// Greedy most-frequent-pair merging over all sentences pooled together.
    /// Frequency ties go to the lexicographically smallest pair; learning stops
    /// early when no pair occurs at least twice.
    pub fn learn<'a, I>(sentences: I, num_merges: i64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if num_merges < 0 {
            return Err(Error::InvalidArgument(format!(
                "number of merges must be non-negative, got {num_merges}"
            )));
        }
        let mut freqs: HashMap<(String, bool), u64> = HashMap::new();
        let mut any = false;
        for s in sentences {
            for p in pieces(s) {
                any = true;
                *freqs.entry(p).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Empty("cannot learn BPE from an empty corpus".into()));
        }
        let mut words: Vec<(Vec<String>, u64)> = freqs
            .into_iter()
            .map(|((p, eow), f)| (initial_symbols(&p, eow), f))
            .collect();
        words.sort();
        let mut base: BTreeSet<String> = words.iter().flat_map(|(w, _)| w.iter().cloned()).collect();
        base.insert(EOW.to_string());

        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
            for (w, f) in &words {
                for pair in w.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += f;
                }
            }
            let best = counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .filter(|&(_, c)| c >= 2)
                .map(|((a, b), _)| (a.to_string(), b.to_string()));
            let Some((left, right)) = best else {
                break;
            };
            for (w, _) in &mut words {
                apply_merge(w, &left, &right);
            }
            merges.push((left, right));
        }
        Ok(MergeTable::build(base.into_iter().collect(), merges))
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIAL + self.symbols.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn base_symbols(&self) -> &[String] {
        &self.base
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        match id {
            BOS => Ok("<s>"),
            EOS => Ok("</s>"),
            PAD => Ok("<pad>"),
            SEP => Ok("<sep>"),
            UNK => Ok(UNK_MARK),
            _ => self
                .symbols
                .get(id - NUM_SPECIAL)
                .map(String::as_str)
                .ok_or(Error::IdOutOfRange {
                    id,
                    vocab: self.vocab_size(),
                }),
        }
    }

    fn encode_piece(&self, piece: &str, eow: bool, out: &mut Vec<usize>) {
        let mut word = initial_symbols(piece, eow);
        loop {
            let best = word
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            apply_merge(&mut word, l, r);
        }
        out.extend(word.iter().map(|s| self.ids.get(s).copied().unwrap_or(UNK)));
    }

    /// Subword ids for one sentence; characters never seen in training map
    /// to the unknown id.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for (p, eow) in pieces(sentence) {
            self.encode_piece(&p, eow, &mut out);
        }
        out
    }

    /// Encodes many sentences, caching repeated pieces.
    pub fn encode_all<'a, I>(&self, sentences: I) -> Vec<Vec<usize>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut cache: HashMap<(String, bool), Vec<usize>> = HashMap::new();
        sentences
            .into_iter()
            .map(|s| {
                let mut out = Vec::new();
                for key in pieces(s) {
                    let ids = cache.entry(key).or_insert_with_key(|(p, eow)| {
                        let mut v = Vec::new();
                        self.encode_piece(p, *eow, &mut v);
                        v
                    });
                    out.extend_from_slice(ids);
                }
                out
            })
            .collect()
    }

    /// Text for a sequence of ids. Output stops at the first eos; bos and pad
    /// are dropped and unknown ids render as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            match id {
                EOS => break,
                BOS | PAD => {}
                SEP => text.push_str("<sep> "),
                _ => {
                    let sym = self.symbol(id)?;
                    match sym.strip_suffix(EOW) {
                        Some(body) => {
                            text.push_str(body);
                            text.push(' ');
                        }
                        None => text.push_str(sym),
                    }
                }
            }
        }
        Ok(text.trim_end().to_string())
    }

    /// Text form: header with special ids, the base symbols, then one merge
    /// pair per line in learned order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER} bos={BOS} eos={EOS} pad={PAD} sep={SEP} unk={UNK}");
        let _ = writeln!(s, "#base {}", self.base.join(" "));
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Parse {
            path: "<merge table>".into(),
            line,
            msg: msg.into(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let expected = format!("{HEADER} bos={BOS} eos={EOS} pad={PAD} sep={SEP} unk={UNK}");
        if header != expected {
            return Err(err(1, &format!("expected `{expected}`")));
        }
        let base_line = lines.next().ok_or_else(|| err(2, "missing base symbol line"))?;
        let base_list = base_line
            .strip_prefix("#base")
            .ok_or_else(|| err(2, "expected `#base` line"))?;
        let base: Vec<String> = base_list.split_whitespace().map(str::to_string).collect();
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => return Err(err(i + 3, "expected `left right`")),
            }
        }
        Ok(MergeTable::build(base, merges))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MergeTable::from_text(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                msg,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
