//! Synthetic (src, mt, pe) triplets from a toy grammar.
//!
//! pe is drawn from class templates over a lexicon of concepts. src maps each
//! pe word through a bijective toy lexicon. mt corrupts pe: a substitution
//! replaces a word by its confusion partner, a word of the same class whose
//! form differs only in the last syllable. Both partners are equally common,
//! so mt alone cannot tell a substituted word from a correct one, while src
//! names the intended concept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::TripletCorpus;
use crate::error::{Error, Result};

const PE_SYL: [&str; 16] = [
    "ba", "de", "ki", "lo", "mu", "na", "pe", "ri", "so", "tu", "va", "ge", "hi", "jo", "ku", "fa",
];
const SRC_SYL: [&str; 16] = [
    "zy", "qo", "xa", "wy", "cy", "yx", "qe", "zo", "xu", "wq", "cz", "yq", "zx", "qy", "xo", "wz",
];
const CLASSES: usize = 4;
const TEMPLATES: [&[usize]; 6] = [
    &[0, 1, 2, 0, 1],
    &[0, 3, 1, 2],
    &[0, 1, 2, 3],
    &[0, 3, 1, 2, 0, 3, 1],
    &[1, 2, 0, 1],
    &[0, 1, 2, 0, 3, 1],
];
/// Share of words drawn from a split's own half of each class.
const DOMAIN_BIAS: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Domain {
    #[default]
    Generic,
    InDomain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Number of concepts, each with one src and one pe word.
    pub lexicon_size: usize,
    pub sub_rate: f64,
    pub drop_rate: f64,
    pub ins_rate: f64,
    pub swap_rate: f64,
    /// Split each class in two halves, one favoured by each domain.
    pub domain_shift: bool,
    pub domain: Domain,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            lexicon_size: 64,
            sub_rate: 0.15,
            drop_rate: 0.03,
            ins_rate: 0.03,
            swap_rate: 0.03,
            domain_shift: false,
            domain: Domain::Generic,
            seed: 1,
        }
    }
}

pub const SYNTH_KEYS: &[&str] = &[
    "lexicon_size",
    "sub_rate",
    "drop_rate",
    "ins_rate",
    "swap_rate",
    "domain_shift",
    "in_domain",
    "synth_seed",
];

fn digits(mut i: usize, width: usize) -> Vec<usize> {
    let mut d = vec![0; width];
    for slot in d.iter_mut().rev() {
        *slot = i % 16;
        i /= 16;
    }
    d
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("sub_rate", self.sub_rate),
            ("drop_rate", self.drop_rate),
            ("ins_rate", self.ins_rate),
            ("swap_rate", self.swap_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        if self.lexicon_size == 0 {
            return Err(Error::Config("lexicon_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Non-fatal problems with the spec.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let no_noise = [self.sub_rate, self.drop_rate, self.ins_rate, self.swap_rate]
            .iter()
            .all(|&r| r == 0.0);
        if no_noise && self.lexicon_size <= 1 {
            w.push("degenerate spec: no corruption and a single-word lexicon".to_string());
        }
        if self.lexicon_size % 2 == 1 {
            w.push(format!(
                "odd lexicon size {}: the last concept has no confusion partner",
                self.lexicon_size
            ));
        }
        w
    }

    /// Approximate corpus TER of mt against pe: one edit per dropped,
    /// inserted or substituted word and one shift per swap.
    pub fn expected_ter(&self) -> f64 {
        self.sub_rate * (1.0 - self.drop_rate) + self.drop_rate + self.ins_rate + self.swap_rate
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lexicon_size", self.lexicon_size.to_string()),
            ("sub_rate", self.sub_rate.to_string()),
            ("drop_rate", self.drop_rate.to_string()),
            ("ins_rate", self.ins_rate.to_string()),
            ("swap_rate", self.swap_rate.to_string()),
            ("domain_shift", self.domain_shift.to_string()),
            ("in_domain", (self.domain == Domain::InDomain).to_string()),
            ("synth_seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "lexicon_size" => self.lexicon_size = parse(key, value)?,
            "sub_rate" => self.sub_rate = parse(key, value)?,
            "drop_rate" => self.drop_rate = parse(key, value)?,
            "ins_rate" => self.ins_rate = parse(key, value)?,
            "swap_rate" => self.swap_rate = parse(key, value)?,
            "domain_shift" => self.domain_shift = parse(key, value)?,
            "in_domain" => {
                self.domain = if parse::<bool>(key, value)? {
                    Domain::InDomain
                } else {
                    Domain::Generic
                }
            }
            "synth_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// The toy bilingual lexicon.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub pe: Vec<String>,
    pub src: Vec<String>,
    /// Concept ids per class.
    classes: Vec<Vec<usize>>,
}

impl Lexicon {
    pub fn new(size: usize) -> Self {
        let mut width = 2;
        while 16usize.pow(width as u32) < size {
            width += 1;
        }
        let space = 16usize.pow(width as u32);
        let word = |syl: &[&str; 16], i: usize| digits(i, width).into_iter().map(|d| syl[d]).collect::<String>();
        let pe = (0..size).map(|i| word(&PE_SYL, i)).collect();
        let src = (0..size).map(|i| word(&SRC_SYL, (i * 37 + 11) % space)).collect();
        let mut classes = vec![Vec::new(); CLASSES];
        for i in 0..size {
            classes[(i / 2) % CLASSES].push(i);
        }
        Lexicon { pe, src, classes }
    }

    pub fn len(&self) -> usize {
        self.pe.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pe.is_empty()
    }

    /// The concept a substitution turns `i` into; `i` itself when unpaired.
    pub fn partner(&self, i: usize) -> usize {
        let p = i ^ 1;
        if p < self.len() {
            p
        } else {
            i
        }
    }

    fn draw(&self, class: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> usize {
        let members = if self.classes[class].is_empty() {
            &self.classes[0]
        } else {
            &self.classes[class]
        };
        if !spec.domain_shift || members.len() < 4 {
            return members[rng.gen_range(0..members.len())];
        }
        // pairs alternate between the two halves so partners stay together
        let (a, b): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&c| (c / 2 / CLASSES).is_multiple_of(2));
        let own_first = rng.gen_bool(DOMAIN_BIAS);
        let half = match (spec.domain, own_first) {
            (Domain::Generic, true) | (Domain::InDomain, false) => a,
            _ => b,
        };
        half[rng.gen_range(0..half.len())]
    }
}

/// `n` triplets from `spec`; identical specs give identical corpora.
pub fn gen_synthetic(spec: &SynthSpec, n: usize) -> Result<TripletCorpus> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one triplet".into()));
    }
    let lex = Lexicon::new(spec.lexicon_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut src, mut mt, mut pe) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let concepts: Vec<usize> = template.iter().map(|&c| lex.draw(c, spec, &mut rng)).collect();
        let mut out: Vec<usize> = Vec::with_capacity(concepts.len() + 2);
        for &c in &concepts {
            if rng.gen_bool(spec.drop_rate) {
                continue;
            }
            out.push(if rng.gen_bool(spec.sub_rate) { lex.partner(c) } else { c });
            if rng.gen_bool(spec.ins_rate) {
                out.push(rng.gen_range(0..lex.len()));
            }
        }
        let mut i = 0;
        while i + 1 < out.len() {
            if rng.gen_bool(spec.swap_rate) {
                out.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        if out.is_empty() {
            out.push(concepts[0]);
        }
        let join = |ids: &[usize], words: &[String]| ids.iter().map(|&i| words[i].as_str()).collect::<Vec<_>>().join(" ");
        src.push(join(&concepts, &lex.src));
        pe.push(join(&concepts, &lex.pe));
        mt.push(join(&out, &lex.pe));
    }
    let provenance = format!("synthetic seed={} {:?}", spec.seed, spec.domain);
    TripletCorpus::new(src, mt, pe, provenance)
}
