use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::NUM_SPECIAL;
use crate::model::Architecture;

fn ex(pe_len: usize) -> TripletExample {
    TripletExample::new(vec![5; 3], vec![6; 3], vec![7; pe_len])
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_src: 1,
        n_mt: 1,
        n_pe: 1,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        dropout: 0.0,
        vocab_size: 16,
        max_len: 20,
        architecture: Architecture::Transference,
        share_mt_pe_embeddings: true,
    }
}

/// pe reverses mt; src is mt shifted by one id.
fn toy_corpus(n: usize, seed: u64) -> Vec<TripletExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..6);
            let mt: Vec<usize> = (0..len).map(|_| rng.gen_range(NUM_SPECIAL..15)).collect();
            let src = mt.iter().map(|&t| t + 1).collect();
            let pe = mt.iter().rev().copied().collect();
            TripletExample::new(src, mt, pe)
        })
        .collect()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        warmup_steps: 20,
        token_budget: 40,
        max_len: 20,
        max_steps: 30,
        eval_interval: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn noam_values() {
    let lr = noam_lr(8000, 512, 8000).unwrap();
    assert!((lr - 4.94e-4).abs() < 1e-6);
    assert!((lr - 512f64.powf(-0.5) * 8000f64.powf(-0.5)).abs() < 1e-15);
    assert!(noam_lr(0, 512, 8000).is_err());
    let w = 100;
    let mut prev = 0.0;
    for s in 1..=w {
        let x = noam_lr(s, 64, w).unwrap();
        assert!(x > prev);
        prev = x;
    }
    for s in w + 1..3 * w {
        let x = noam_lr(s, 64, w).unwrap();
        assert!(x < prev);
        prev = x;
    }
    let (a, b) = (64f64.powf(-0.5) * (w as f64).powf(-0.5), 64f64.powf(-0.5) * w as f64 * (w as f64).powf(-1.5));
    assert!((a - b).abs() < 1e-15);
}

#[test]
fn budget_packs_two_of_three() {
    let corpus = vec![ex(4), ex(4), ex(4)];
    let b = make_batches(&corpus, 10, 50, 1).unwrap();
    let mut sizes: Vec<usize> = b.batches.iter().map(Vec::len).collect();
    sizes.sort();
    assert_eq!(sizes, vec![1, 2]);
    assert_eq!(b.dropped, 0);
}

#[test]
fn batching_seeds_and_filters() {
    let corpus = toy_corpus(200, 3);
    let a = make_batches(&corpus, 30, 20, 1).unwrap();
    assert_eq!(a, make_batches(&corpus, 30, 20, 1).unwrap());
    assert_ne!(a.batches, make_batches(&corpus, 30, 20, 2).unwrap().batches);

    let mut long = corpus.clone();
    long.push(TripletExample::new(vec![5; 30], vec![5], vec![5]));
    let b = make_batches(&long, 30, 20, 1).unwrap();
    assert_eq!(b.dropped, 1);
    assert!(b.batches.iter().flatten().all(|&i| long[i].max_side_len() <= 20));
    assert!(make_batches(&[], 30, 20, 1).is_err());
    assert!(make_batches(&[ex(40)], 30, 50, 1).is_err());
}

proptest! {
    #[test]
    fn batches_partition_the_corpus(lens in proptest::collection::vec(0usize..12, 1..60), seed in 0u64..1000, budget in 12usize..40, pool in 1usize..20) {
        let corpus: Vec<TripletExample> = lens.iter().map(|&l| ex(l)).collect();
        let b = make_batches_pooled(&corpus, budget, 50, seed, pool).unwrap();
        let mut seen: Vec<usize> = b.batches.iter().flatten().copied().collect();
        seen.sort();
        prop_assert_eq!(seen, (0..corpus.len()).collect::<Vec<_>>());
        for batch in &b.batches {
            prop_assert!(!batch.is_empty());
            prop_assert!(batch.iter().map(|&i| corpus[i].pe.len()).sum::<usize>() <= budget);
        }
    }
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let mut grads = GradStore::zeros_like(&store);
    // d/dw of sum(w * c) is c
    let mut gg = crate::tensor::Graph::new(&store);
    let w = gg.param(id);
    let c = gg.constant(Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap());
    let p = gg.mul(w, c).unwrap();
    let loss = gg.sum(p);
    gg.backward(loss, &mut grads).unwrap();
    let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
    adam.step(&mut store, &grads, 0.1);
    let got = store.get(id).data();
    assert!((got[0] - 0.9).abs() < 1e-7);
    assert!((got[1] - -1.9).abs() < 1e-7);
    assert_eq!(got[2], 0.5);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = TransferenceModel::init(tiny_config(), 4).unwrap();
    let ck = Checkpoint::from_model(&m, 17, 1.25, f64::NAN);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
    assert_eq!(back.params, ck.params);
    assert_eq!(back.config, ck.config);
    assert_eq!((back.step, back.dev_loss), (17, 1.25));
    assert!(back.dev_bleu.is_nan());
    assert_eq!(back.to_bytes(), bytes);
    for ((_, _, a), (_, _, b)) in back.params.iter().zip(ck.params.iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().params, ck.params);
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "mem").is_err());
    let mut tampered = String::from_utf8_lossy(&bytes[..200]).to_string();
    tampered = tampered.replacen("config d_model=16", "config d_model=32", 1);
    let mut t = tampered.into_bytes();
    t.extend_from_slice(&bytes[200..]);
    assert!(matches!(Checkpoint::from_bytes(&t, "mem"), Err(Error::FingerprintMismatch { .. })));
}

fn ck_with(params: &ParamStore, step: usize, bleu: f64, loss: f64) -> Checkpoint {
    Checkpoint {
        config: tiny_config(),
        params: params.clone(),
        step,
        dev_loss: loss,
        dev_bleu: bleu,
    }
}

#[test]
fn averaging_algebra() {
    let m = TransferenceModel::init(tiny_config(), 5).unwrap();
    let a = ck_with(m.params(), 1, 0.0, 0.0);
    let avg = average_checkpoints(&[&a, &a, &a]).unwrap();
    assert_eq!(avg.params, a.params);

    let mut neg = m.params().clone();
    let ids: Vec<_> = neg.ids().collect();
    for id in &ids {
        for x in neg.get_mut(*id).data_mut() {
            *x = -*x;
        }
    }
    let b = ck_with(&neg, 2, 0.0, 0.0);
    let zero = average_checkpoints(&[&a, &b]).unwrap();
    assert!(zero.params.iter().all(|(_, _, t)| t.data().iter().all(|&x| x == 0.0)));

    let c = ck_with(TransferenceModel::init(tiny_config(), 6).unwrap().params(), 3, 0.0, 0.0);
    let abc = average_checkpoints(&[&a, &b, &c]).unwrap();
    let cab = average_checkpoints(&[&c, &a, &b]).unwrap();
    assert_eq!(abc.params, cab.params);
    assert_eq!(abc.step, 3);

    let other = TransferenceModel::init(ModelConfig { d_model: 8, ..tiny_config() }, 1).unwrap();
    let d = Checkpoint::from_model(&other, 1, 0.0, 0.0);
    assert!(matches!(average_checkpoints(&[&a, &d]), Err(Error::FingerprintMismatch { .. })));
    assert!(average_checkpoints(&[]).is_err());
}

#[test]
fn select_best_orders_by_bleu() {
    let m = TransferenceModel::init(tiny_config(), 5).unwrap();
    let cks = vec![
        ck_with(m.params(), 10, 20.0, 1.0),
        ck_with(m.params(), 20, 40.0, 2.0),
        ck_with(m.params(), 30, 40.0, 1.5),
        ck_with(m.params(), 40, f64::NAN, 0.1),
    ];
    let all = select_best(&cks, 4).unwrap();
    let steps: Vec<usize> = all.iter().map(|c| c.step).collect();
    assert_eq!(steps, vec![30, 20, 10, 40]);
    assert_eq!(select_best(&cks, 1).unwrap()[0].step, 30);
    assert!(select_best(&cks, 5).is_err());
}

#[test]
fn accumulation_matches_one_big_batch() {
    let corpus = toy_corpus(12, 8);
    let m = TransferenceModel::init(tiny_config(), 9).unwrap();
    let batch: Vec<usize> = (0..corpus.len()).collect();
    let total: usize = corpus.iter().map(|e| e.pe.len() + 1).sum();
    let budget: usize = corpus.iter().map(|e| e.pe.len()).sum();
    let grads_for = |pieces: Vec<Vec<usize>>| {
        let mut grads = GradStore::zeros_like(m.params());
        for mb in pieces {
            let refs: Vec<&TripletExample> = mb.iter().map(|&i| &corpus[i]).collect();
            let tb = TripletBatch::collate(&refs).unwrap();
            let mut g = m.graph();
            let loss = m.forward_loss_scaled(&mut g, &tb, 0.1, 1.0 / total as f64).unwrap();
            g.backward(loss, &mut grads).unwrap();
        }
        grads
    };
    let whole = grads_for(split_micro(&corpus, &batch, budget));
    let halves = split_micro(&corpus, &batch, budget / 2 + 1);
    assert!(halves.len() >= 2);
    let split = grads_for(halves);

    let mut p1 = m.params().clone();
    let mut p2 = m.params().clone();
    Adam::new(&p1, 0.9, 0.98, 1e-9).step(&mut p1, &whole, 1e-3);
    Adam::new(&p2, 0.9, 0.98, 1e-9).step(&mut p2, &split, 1e-3);
    let mut worst: f64 = 0.0;
    for ((_, _, a), (_, _, b)) in p1.iter().zip(p2.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst < 1e-12, "update differs by {worst}");
    for (id, g) in whole.iter() {
        for (x, y) in g.iter().zip(split.get(id)) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let corpus = toy_corpus(40, 10);
    let dev = toy_corpus(8, 11);
    let cfg = TrainConfig {
        max_steps: 60,
        lr_scale: 0.3,
        ..quick_cfg()
    };
    let m = TransferenceModel::init(tiny_config(), 1).unwrap();
    let a = train(m.clone(), &corpus, &dev, &cfg, Output::default()).unwrap();
    let b = train(m.clone(), &corpus, &dev, &cfg, Output::default()).unwrap();
    let bits = |rows: &[LogRow]| {
        rows.iter()
            .map(|r| [r.lr, r.train_loss, r.dev_loss, r.dev_bleu].map(f64::to_bits))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.log), bits(&b.log));
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log.len(), 7);
    assert_eq!(a.checkpoints.len(), a.log.len());
    assert_eq!(a.step, 60);
    assert!(a.log[0].train_loss.is_nan());
    assert!(a.log.last().unwrap().dev_loss < a.log[0].dev_loss);
    assert!(a.log.last().unwrap().train_loss < a.log[1].train_loss);

    let tsv = log_tsv(&a.log);
    assert_eq!(tsv.lines().next().unwrap(), "step\tlr\ttrain_loss\tdev_loss\tdev_bleu");
    assert_eq!(tsv.lines().count(), a.log.len() + 1);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 5));
}

#[test]
fn checkpoints_and_log_written_to_disk() {
    let corpus = toy_corpus(20, 12);
    let dev = toy_corpus(4, 13);
    let dir = tempfile::tempdir().unwrap();
    let m = TransferenceModel::init(tiny_config(), 2).unwrap();
    let out = train(m, &corpus, &dev, &quick_cfg(), Output { dir: Some(dir.path()) }).unwrap();
    let log = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert_eq!(log, log_tsv(&out.log));
    let last = Checkpoint::load(&dir.path().join(format!("ckpt-{:07}.bin", out.step))).unwrap();
    assert_eq!(last.params, *out.model.params());
}

#[test]
fn fine_tune_contracts() {
    let corpus = toy_corpus(20, 14);
    let dev = toy_corpus(4, 15);
    let m = TransferenceModel::init(tiny_config(), 3).unwrap();
    let ck = Checkpoint::from_model(&m, 500, 1.0, 1.0);
    let zero = TrainConfig {
        max_steps: 0,
        ..quick_cfg()
    };
    let out = fine_tune(&ck, &tiny_config(), &corpus, &dev, &zero, Output::default()).unwrap();
    assert_eq!(out.model.params(), m.params());
    assert_eq!(out.step, 0);

    let cont = TrainConfig {
        max_steps: 5,
        continue_schedule: true,
        ..quick_cfg()
    };
    let out = fine_tune(&ck, &tiny_config(), &corpus, &dev, &cont, Output::default()).unwrap();
    assert_eq!(out.step, 505);
    let reset = TrainConfig { max_steps: 5, ..quick_cfg() };
    assert_eq!(fine_tune(&ck, &tiny_config(), &corpus, &dev, &reset, Output::default()).unwrap().step, 5);

    let other = ModelConfig { d_ff: 64, ..tiny_config() };
    assert!(matches!(
        fine_tune(&ck, &other, &corpus, &dev, &reset, Output::default()),
        Err(Error::FingerprintMismatch { .. })
    ));
}

#[test]
fn divergence_and_bad_inputs_abort() {
    let corpus = toy_corpus(10, 16);
    let mut m = TransferenceModel::init(tiny_config(), 4).unwrap();
    let id = m.params().id("emb.mt_pe").unwrap();
    m.params_mut().get_mut(id).data_mut()[5 * 16] = f64::NAN;
    let err = train(m, &corpus, &corpus, &quick_cfg(), Output::default());
    assert!(matches!(err, Err(Error::Diverged { step: 1, .. })), "{err:?}");

    let m = TransferenceModel::init(tiny_config(), 4).unwrap();
    let bad = vec![TripletExample::new(vec![99], vec![5], vec![5])];
    assert!(matches!(
        train(m.clone(), &bad, &corpus, &quick_cfg(), Output::default()),
        Err(Error::IdOutOfRange { id: 99, .. })
    ));
    assert!(train(m.clone(), &corpus, &[], &quick_cfg(), Output::default()).is_err());
    let cfg = TrainConfig {
        token_budget: 5,
        ..quick_cfg()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn config_keys_round_trip() {
    let mut c = TrainConfig::default();
    for (k, v) in TrainConfig::large_scale().entries() {
        assert!(c.set(k, &v).unwrap());
    }
    assert_eq!(c, TrainConfig::large_scale());
    assert_eq!(c.entries().len(), TRAIN_KEYS.len());
    assert!(!c.set("nope", "1").unwrap());
    assert!(c.set("seed", "x").is_err());
}
