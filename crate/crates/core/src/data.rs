//! Token-id triplets and their padded batch form.

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
/// Separator between the src and mt segments of the concatenated-input baseline.
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

/// One (src, mt, pe) item as raw subword ids, without bos/eos.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TripletExample {
    pub src: Vec<usize>,
    pub mt: Vec<usize>,
    pub pe: Vec<usize>,
}

impl TripletExample {
    pub fn new(src: Vec<usize>, mt: Vec<usize>, pe: Vec<usize>) -> Self {
        TripletExample { src, mt, pe }
    }

    pub fn max_side_len(&self) -> usize {
        self.src.len().max(self.mt.len()).max(self.pe.len())
    }
}

/// Right-padded `[batch, len]` id matrix with per-row real lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl SeqBatch {
    pub fn from_seqs<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch with no sequences".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if lengths.contains(&0) {
            return Err(Error::Empty("zero-length sequence in batch".into()));
        }
        let len = *lengths.iter().max().expect("non-empty");
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Ok(SeqBatch {
            ids,
            batch: seqs.len(),
            len,
            lengths,
        })
    }

    /// Pads every row to at least `len` positions.
    pub fn padded_to(&self, len: usize) -> Self {
        if len <= self.len {
            return self.clone();
        }
        let rows: Vec<Vec<usize>> = self.ids.chunks(self.len).map(|r| r.to_vec()).collect();
        let mut ids = Vec::with_capacity(self.batch * len);
        for r in rows {
            ids.extend_from_slice(&r);
            ids.extend(std::iter::repeat_n(PAD, len - self.len));
        }
        SeqBatch {
            ids,
            batch: self.batch,
            len,
            lengths: self.lengths.clone(),
        }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..b * self.len + self.lengths[b]]
    }
}

/// Model-ready batch: encoder inputs get a trailing eos, decoder input is pe
/// shifted right behind bos, and targets are pe followed by eos.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    pub src: SeqBatch,
    pub mt: SeqBatch,
    /// src ⧺ sep ⧺ mt ⧺ eos, for the single-encoder concatenation baseline.
    pub src_mt: SeqBatch,
    pub pe_in: SeqBatch,
    /// `[batch * pe_in.len]` targets, pad where `pe_in` is padding.
    pub targets: Vec<usize>,
}

impl TripletBatch {
    pub fn collate(examples: &[&TripletExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let with_eos = |s: &[usize]| {
            let mut v = s.to_vec();
            v.push(EOS);
            v
        };
        let src: Vec<Vec<usize>> = examples.iter().map(|e| with_eos(&e.src)).collect();
        let mt: Vec<Vec<usize>> = examples.iter().map(|e| with_eos(&e.mt)).collect();
        let src_mt: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| {
                let mut v = e.src.clone();
                v.push(SEP);
                v.extend_from_slice(&e.mt);
                v.push(EOS);
                v
            })
            .collect();
        let pe_in: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| {
                let mut v = Vec::with_capacity(e.pe.len() + 1);
                v.push(BOS);
                v.extend_from_slice(&e.pe);
                v
            })
            .collect();
        let pe_in = SeqBatch::from_seqs(&pe_in)?;
        let mut targets = Vec::with_capacity(pe_in.ids.len());
        for e in examples {
            targets.extend_from_slice(&e.pe);
            targets.push(EOS);
            targets.extend(std::iter::repeat_n(PAD, pe_in.len - e.pe.len() - 1));
        }
        Ok(TripletBatch {
            src: SeqBatch::from_seqs(&src)?,
            mt: SeqBatch::from_seqs(&mt)?,
            src_mt: SeqBatch::from_seqs(&src_mt)?,
            pe_in,
            targets,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.pe_in.batch
    }

    /// Number of non-pad target positions (pe tokens plus one eos per row).
    pub fn target_tokens(&self) -> usize {
        self.targets.iter().filter(|&&t| t != PAD).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collate_shifts_and_pads() {
        let a = TripletExample::new(vec![10, 11], vec![20], vec![30, 31, 32]);
        let b = TripletExample::new(vec![12], vec![21, 22], vec![33]);
        let batch = TripletBatch::collate(&[&a, &b]).unwrap();
        assert_eq!(batch.src.ids, vec![10, 11, EOS, 12, EOS, PAD]);
        assert_eq!(batch.mt.lengths, vec![2, 3]);
        assert_eq!(batch.pe_in.ids, vec![BOS, 30, 31, 32, BOS, 33, PAD, PAD]);
        assert_eq!(batch.targets, vec![30, 31, 32, EOS, 33, EOS, PAD, PAD]);
        assert_eq!(batch.src_mt.row(0), &[10, 11, SEP, 20, EOS]);
        assert_eq!(batch.target_tokens(), 6);
    }

    #[test]
    fn empty_sequences_rejected() {
        assert!(SeqBatch::from_seqs::<Vec<usize>>(&[]).is_err());
        assert!(SeqBatch::from_seqs(&[vec![]]).is_err());
    }
}
