use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use transference::bpe::MergeTable;
use transference::decode::{decode_ids, Combine, ModelSet};
use transference::harness::{
    ablation_tsv, gen_synthetic, load_corpus, normalize, parse_triples, run_ablation, score_text, CorpusPaths, Settings,
    TripletCorpus,
};
use transference::metrics::{edit_reduction, report_aligned, report_tsv, tokenize};
use transference::model::TransferenceModel;
use transference::train::{average_checkpoints, fine_tune, log_tsv, select_best, train, Checkpoint, Output, TrainOutcome};
use transference::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "transference", version, about = "Multi-source APE transformer: data, training, decoding, scoring")]
pub struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Settings file (key = value); defaults to $TRANSFERENCE_CONFIG_DIR/transference.cfg
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. --set d_model=64 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for --set seed=N
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train/dev/test triplets to a directory
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a BPE merge table on src, mt and pe of one or more corpora
    LearnBpe {
        /// Corpus prefix (reads PREFIX.src, .mt, .pe); repeatable
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        merges: Option<i64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch
    Train {
        #[command(flatten)]
        data: TrainData,
    },
    /// Continue training a checkpoint on another corpus
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keep the learning-rate schedule position of the checkpoint
        #[arg(long)]
        continue_schedule: bool,
        #[command(flatten)]
        data: TrainData,
    },
    /// Decode a corpus with one model or an ensemble
    Decode {
        /// Checkpoint file, or `a.bin+b.bin` for a nested sub-ensemble. Repeat to ensemble.
        #[arg(long = "models", required = true)]
        models: Vec<String>,
        #[arg(long)]
        bpe: PathBuf,
        /// Corpus prefix; PREFIX.pe is optional and enables scoring
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        lenpen: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        /// prob or log
        #[arg(long, default_value = "prob")]
        combine: String,
    },
    /// Average checkpoint parameters
    AvgCheckpoints {
        #[arg(long, num_args = 1.., conflicts_with = "dir")]
        inputs: Vec<PathBuf>,
        /// Directory of ckpt-*.bin files; with --best keeps the top K by dev BLEU
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        best: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus BLEU and TER of a hypothesis file
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        lowercase: bool,
    },
    /// Per-edit-type TER reduction of APE systems over raw mt
    EditReport {
        #[arg(long)]
        mt: PathBuf,
        #[arg(long)]
        pe: PathBuf,
        /// NAME=FILE; repeatable
        #[arg(long = "hyp", required = true)]
        hyps: Vec<String>,
        #[arg(long)]
        tsv: bool,
    },
    /// Train one model per layer triple and tabulate dev scores
    Ablate {
        #[command(flatten)]
        data: TrainData,
        #[arg(long, default_value = "2-2-2,2-2-1,2-1-2")]
        triples: String,
    },
}

#[derive(Args, Debug)]
struct TrainData {
    /// Training corpus prefix
    #[arg(long)]
    train: PathBuf,
    /// Dev corpus prefix
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = Settings::resolve(common.config.as_deref())?;
    s.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        s.train.seed = seed;
    }
    Ok(s)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(normalize).collect())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn encoded(prefix: &Path, bpe: &MergeTable) -> Result<TripletCorpus> {
    let mut c = load_corpus(&CorpusPaths::from_prefix(prefix))?;
    c.encode(bpe);
    Ok(c)
}

fn report(out: &TrainOutcome, dir: &Path) {
    if out.dropped > 0 {
        eprintln!("dropped {} over-long triplets", out.dropped);
    }
    print!("{}", log_tsv(&out.log));
    println!("checkpoints in {}", dir.display());
}

fn run_train(s: &mut Settings, data: &TrainData, resume: Option<(&Path, bool)>) -> Result<()> {
    let bpe = MergeTable::load(&data.bpe)?;
    let tr = encoded(&data.train, &bpe)?;
    let dev = encoded(&data.dev, &bpe)?;
    let out = Output {
        dir: Some(&data.out_dir),
    };
    let outcome = match resume {
        None => {
            s.model.vocab_size = bpe.vocab_size();
            write(&data.out_dir.join("settings.cfg"), &s.to_text())?;
            let model = TransferenceModel::init(s.model.clone(), s.train.seed)?;
            println!("{} parameters", model.count_params());
            train(model, &tr.encoded, &dev.encoded, &s.train, out)?
        }
        Some((ckpt_path, continue_schedule)) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            if ckpt.config.vocab_size != bpe.vocab_size() {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary {} differs from merge table vocabulary {}",
                    ckpt.config.vocab_size,
                    bpe.vocab_size()
                )));
            }
            s.model = ckpt.config.clone();
            s.train.continue_schedule = continue_schedule || s.train.continue_schedule;
            write(&data.out_dir.join("settings.cfg"), &s.to_text())?;
            fine_tune(&ckpt, &s.model, &tr.encoded, &dev.encoded, &s.train, out)?
        }
    };
    report(&outcome, &data.out_dir);
    Ok(())
}

fn load_models(specs: &[String]) -> Result<Vec<Vec<TransferenceModel>>> {
    specs
        .iter()
        .map(|spec| {
            spec.split('+')
                .map(|p| Checkpoint::load(Path::new(p.trim()))?.to_model())
                .collect()
        })
        .collect()
}

fn model_set<'m>(groups: &'m [Vec<TransferenceModel>], combine: Combine) -> Result<ModelSet<'m>> {
    let sets = groups
        .iter()
        .map(|g| ModelSet::flat(&g.iter().collect::<Vec<_>>(), combine))
        .collect::<Result<Vec<_>>>()?;
    match sets.len() {
        0 => Err(Error::Empty("no models given".into())),
        1 => Ok(sets.into_iter().next().expect("one set")),
        _ => Ok(ModelSet::Group(sets, combine)),
    }
}

fn decode_input(prefix: &Path, bpe: &MergeTable) -> Result<(TripletCorpus, bool)> {
    let paths = CorpusPaths::from_prefix(prefix);
    if paths.pe.exists() {
        return Ok((encoded(prefix, bpe)?, true));
    }
    let src = read_lines(&paths.src)?;
    let mt = read_lines(&paths.mt)?;
    let pe = vec![String::new(); mt.len()];
    let mut c = TripletCorpus::new(src, mt, pe, format!("{}", prefix.display()))?;
    c.encode(bpe);
    Ok((c, false))
}

fn checkpoints_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no ckpt-*.bin files in {}", dir.display())));
    }
    Ok(files)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut s = settings(&cli.common)?;
    match cli.command {
        Command::GenData { out } => {
            for w in s.synth.warnings() {
                eprintln!("warning: {w}");
            }
            let total = s.train_size + s.dev_size + s.test_size;
            let all = gen_synthetic(&s.synth, total)?;
            let a = s.train_size;
            let b = a + s.dev_size;
            for (name, range) in [("train", 0..a), ("dev", a..b), ("test", b..total)] {
                let split = all.slice(range);
                split.save(&CorpusPaths::from_prefix(&out.join(name)))?;
                println!("{name}: {} triplets", split.len());
            }
            write(&out.join("settings.cfg"), &s.to_text())?;
        }
        Command::LearnBpe { corpora, merges, out } => {
            let loaded = corpora
                .iter()
                .map(|p| load_corpus(&CorpusPaths::from_prefix(p)))
                .collect::<Result<Vec<_>>>()?;
            let bpe = MergeTable::learn(loaded.iter().flat_map(|c| c.all_sentences()), merges.unwrap_or(s.num_merges))?;
            bpe.save(&out)?;
            println!("{} merges, vocabulary {}", bpe.merges().len(), bpe.vocab_size());
        }
        Command::Train { data } => run_train(&mut s, &data, None)?,
        Command::Finetune {
            checkpoint,
            continue_schedule,
            data,
        } => run_train(&mut s, &data, Some((&checkpoint, continue_schedule)))?,
        Command::Decode {
            models,
            bpe,
            input,
            out,
            beam,
            lenpen,
            max_len,
            combine,
        } => {
            let mut opts = s.decode_options();
            opts.beam = beam.unwrap_or(opts.beam);
            opts.length_penalty = lenpen.unwrap_or(opts.length_penalty);
            opts.max_len = max_len.or(opts.max_len);
            let combine: Combine = combine.parse()?;
            let bpe = MergeTable::load(&bpe)?;
            let loaded = load_models(&models)?;
            let set = model_set(&loaded, combine)?;
            let (corpus, has_pe) = decode_input(&input, &bpe)?;
            let ids = decode_ids(&set, &corpus.encoded, &opts)?;
            let hyps = ids.iter().map(|h| bpe.decode(h)).collect::<Result<Vec<_>>>()?;
            let text: String = hyps.iter().map(|h| format!("{h}\n")).collect();
            match &out {
                Some(p) => write(p, &text)?,
                None => print!("{text}"),
            }
            if has_pe {
                let (bleu, ter) = score_text(&hyps, &corpus.pe, false)?;
                eprintln!("BLEU {bleu:.2}");
                eprintln!("TER {:.2}", 100.0 * ter.score());
            }
        }
        Command::AvgCheckpoints { inputs, dir, best, out } => {
            let files = match &dir {
                Some(d) => checkpoints_in(d)?,
                None if inputs.is_empty() => return Err(Error::InvalidArgument("give --inputs or --dir".into())),
                None => inputs,
            };
            let all = files.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            let chosen: Vec<&Checkpoint> = match best {
                Some(k) => select_best(&all, k)?,
                None => all.iter().collect(),
            };
            for c in &chosen {
                println!("step {} dev_bleu {:.2} dev_loss {:.4}", c.step, c.dev_bleu, c.dev_loss);
            }
            average_checkpoints(&chosen)?.save(&out)?;
            println!("averaged {} checkpoints into {}", chosen.len(), out.display());
        }
        Command::Evaluate {
            hyp,
            reference,
            lowercase,
        } => {
            let h = read_lines(&hyp)?;
            let r = read_lines(&reference)?;
            if h.len() != r.len() {
                return Err(Error::CorpusMismatch {
                    detail: format!("{} hypotheses vs {} references", h.len(), r.len()),
                });
            }
            let (bleu, ter) = score_text(&h, &r, lowercase)?;
            println!("BLEU {bleu:.2}");
            println!("TER {:.2}", 100.0 * ter.score());
            println!(
                "edits ins {} del {} sub {} shift {} ref_len {}",
                ter.insertions, ter.deletions, ter.substitutions, ter.shifts, ter.ref_len
            );
        }
        Command::EditReport { mt, pe, hyps, tsv } => {
            let tok = |p: &Path| -> Result<Vec<Vec<String>>> {
                Ok(read_lines(p)?.iter().map(|l| tokenize(l, false)).collect())
            };
            let mt = tok(&mt)?;
            let pe = tok(&pe)?;
            let mut rows = Vec::new();
            for h in &hyps {
                let (name, file) = h
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--hyp `{h}` is not NAME=FILE")))?;
                rows.push(edit_reduction(name, &mt, &pe, &tok(Path::new(file))?)?);
            }
            print!("{}", if tsv { report_tsv(&rows) } else { report_aligned(&rows) });
        }
        Command::Ablate { data, triples } => {
            let triples = parse_triples(&triples)?;
            let bpe = MergeTable::load(&data.bpe)?;
            let tr = encoded(&data.train, &bpe)?;
            let dev = encoded(&data.dev, &bpe)?;
            s.model.vocab_size = bpe.vocab_size();
            let rows = run_ablation(&s.model, &triples, &tr, &dev, &bpe, &s.train, &s.decode_options())?;
            let table = ablation_tsv(&rows);
            write(&data.out_dir.join("ablation.tsv"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}
