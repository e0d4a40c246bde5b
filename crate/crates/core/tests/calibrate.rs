//! Scratch calibration runs (deleted before release).

mod common;

use deskmt_core::experiment::{generate, TaskConfig, TaskKind};
use deskmt_core::numerics::{Adam, AdamConfig, CounterRng};
use deskmt_core::pipeline::{dev_bleu, DecodeConfig, TrainBudget};
use deskmt_core::seq2seq::{build_model, transformer_genotype, ModelConfig, TokenSeq};

fn copy_task(seed: u64) -> deskmt_core::experiment::TaskData {
    generate(&TaskConfig {
        kind: TaskKind::Copy,
        vocab: 20,
        min_len: 3,
        max_len: 12,
        bitext: 1200,
        mono_src: 10,
        mono_tgt: 10,
        dev: 32,
        test: 64,
        seed,
    })
    .unwrap()
}

fn model_cfg(d: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: heads,
        d_ffn: 2 * d,
        n_layers: layers,
        dropout: 0.0,
        max_len: 24,
        tied_embeddings: true,
        shared_vocab: true,
    }
}

#[test]
#[ignore]
fn calibrate_copy_convergence() {
    for (d, lr, batch) in [(32usize, 3e-3, 8usize), (48, 2e-3, 8)] {
        let start = std::time::Instant::now();
        let task = copy_task(11);
        let mut model =
            build_model(transformer_genotype(2), model_cfg(d, 2, 2), &task.vocab, 1).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(lr));
        let mut rng = CounterRng::new(2);
        let pairs = task.bitext.training_pairs();
        let decode = DecodeConfig { beam: 1, length_penalty: 1.0, max_len: 14 };
        let mut reached = None;
        for step in 0..3000usize {
            let batch_pairs: Vec<(TokenSeq, TokenSeq)> =
                (0..batch).map(|_| pairs[rng.below(pairs.len())].clone()).collect();
            model.train_step(&batch_pairs, &mut opt, &mut rng).unwrap();
            if (step + 1) % 250 == 0 {
                let bleu = dev_bleu(&model, &task.test, &decode).unwrap();
                eprintln!(
                    "d={d} lr={lr} step {}: test BLEU {bleu:.2} ({:.1}s)",
                    step + 1,
                    start.elapsed().as_secs_f64()
                );
                if bleu >= 99.0 {
                    reached = Some(step + 1);
                    break;
                }
            }
        }
        eprintln!(
            "d={d} lr={lr}: reached={reached:?} total {:.1}s",
            start.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn calibrate_bt_madl() {
    use deskmt_core::madl;
    use deskmt_core::pipeline::{back_translate, mix_corpora, train_on_corpus, NoiseConfig};
    use deskmt_core::pipeline::{MonoCorpus, ParallelCorpus, Provenance};

    for seed in [1u64, 2, 3] {
        let start = std::time::Instant::now();
        let task = generate(&TaskConfig {
            kind: TaskKind::Reverse,
            vocab: 26,
            min_len: 4,
            max_len: 12,
            bitext: 500,
            mono_src: 5000,
            mono_tgt: 5000,
            dev: 48,
            test: 48,
            seed: 100 + seed,
        })
        .unwrap();
        let cfg = model_cfg(32, 2, 2);
        let decode = DecodeConfig { beam: 4, length_penalty: 1.0, max_len: 16 };
        let budget = TrainBudget { steps: 700, batch_size: 8, lr: 2e-3 };

        // baseline forward + reverse
        let mut fwd = build_model(transformer_genotype(2), cfg.clone(), &task.vocab, seed).unwrap();
        let mut rng = CounterRng::new(seed).derive("cal");
        train_on_corpus(&mut fwd, &task.bitext, &budget, &mut rng).unwrap();
        let base = dev_bleu(&fwd, &task.dev, &decode).unwrap();

        let rev_corpus = ParallelCorpus::from_pairs(
            task.bitext.pairs.iter().map(|p| (p.tgt.clone(), p.src.clone())),
            Provenance::Bitext,
        );
        let mut rev =
            build_model(transformer_genotype(2), cfg.clone(), &task.vocab, seed + 50).unwrap();
        train_on_corpus(&mut rev, &rev_corpus, &budget, &mut rng).unwrap();

        // BT: subsample 1200 target-side mono
        let idx = rng.sample_without_replacement(task.mono_tgt.len(), 1200);
        let mono = MonoCorpus::new(
            idx.into_iter().map(|i| task.mono_tgt.sentences[i].clone()).collect(),
            "tgt",
        )
        .unwrap();
        let bt_decode = DecodeConfig { beam: 4, length_penalty: 1.0, max_len: 16 };
        let t_bt = std::time::Instant::now();
        let noise = NoiseConfig { p_drop: 0.05, p_blank: 0.05, swap_window: 2 };
        let synth = back_translate(&rev, &mono, &bt_decode, &noise, &rng).unwrap();
        eprintln!("seed {seed}: BT decode of {} took {:.1}s", mono.len(), t_bt.elapsed().as_secs_f64());
        let mixed = mix_corpora(&[(task.bitext.clone(), 2), (synth, 1)], &mut rng).unwrap();
        let mut bt_model = fwd.clone(); // continue training the baseline
        let bt_budget = TrainBudget { steps: 600, batch_size: 8, lr: 1e-3 };
        train_on_corpus(&mut bt_model, &mixed, &bt_budget, &mut rng).unwrap();
        let bt = dev_bleu(&bt_model, &task.dev, &decode).unwrap();

        // MADL on top of BT
        let mut f0 = bt_model.clone();
        let mut g0 = rev.clone();
        let frozen_f = vec![fwd.clone()];
        let frozen_g = vec![];
        let alpha = [0.5, 0.5];
        let beta = [1.0];
        let _ = &frozen_g;
        let corpora = madl::MadlCorpora {
            bitext: task.bitext.training_pairs(),
            mono_x: task.mono_src.sentences.clone(),
            mono_y: task.mono_tgt.sentences.clone(),
        };
        let t_madl = std::time::Instant::now();
        let madl_cfg = madl::MadlTrainConfig {
            steps: 150,
            bitext_batch: 8,
            mono_batch: 4,
            mono_fraction: 0.04, // 200 of 5000
            refresh_every_n_steps: 0,
            decode: madl::MadlDecodeConfig { beam: 4, length_penalty: 1.0, max_len: 16 },
            lr: 1e-3,
            abort_checkpoint_dir: None,
        };
        madl::madl_train(
            &mut f0, &mut g0, &frozen_f, &frozen_g, &alpha, &beta, &corpora, &madl_cfg, &mut rng,
        )
        .unwrap();
        eprintln!("seed {seed}: MADL took {:.1}s", t_madl.elapsed().as_secs_f64());
        let madl_bleu = dev_bleu(&f0, &task.dev, &decode).unwrap();
        eprintln!(
            "seed {seed}: baseline {base:.2} -> BT {bt:.2} -> MADL {madl_bleu:.2}  ({:.0}s total)",
            start.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn calibrate_mass_steps_to_threshold() {
    use deskmt_core::mass;
    for seed in [1u64, 2, 3] {
        let task = generate(&TaskConfig {
            kind: TaskKind::Reverse,
            vocab: 20,
            min_len: 4,
            max_len: 10,
            bitext: 300,
            mono_src: 800,
            mono_tgt: 800,
            dev: 32,
            test: 32,
            seed: 200 + seed,
        })
        .unwrap();
        let cfg = model_cfg(32, 2, 2);
        let max_steps = 400usize;

        let steps_to = |mut model: deskmt_core::seq2seq::Seq2SeqModel, label: &str| -> Vec<f64> {
            let mut opt = Adam::new(AdamConfig::with_lr(2e-3));
            let mut rng = CounterRng::new(seed).derive(label);
            let pairs = task.bitext.training_pairs();
            let mut traj = vec![model.eval_nll(&task.dev).unwrap()];
            for step in 0..max_steps {
                let batch: Vec<(TokenSeq, TokenSeq)> =
                    (0..8).map(|_| pairs[rng.below(pairs.len())].clone()).collect();
                model.train_step(&batch, &mut opt, &mut rng).unwrap();
                if (step + 1) % 20 == 0 {
                    traj.push(model.eval_nll(&task.dev).unwrap());
                }
            }
            traj
        };

        // cold start
        let cold_model =
            build_model(transformer_genotype(2), cfg.clone(), &task.vocab, seed * 7 + 1).unwrap();
        let cold = steps_to(cold_model, "cold-ft");
        eprintln!("seed {seed} cold: {:?}", cold.iter().map(|x| (x * 10.0).round() / 10.0).collect::<Vec<_>>());

        // pre-trained start
        let mut pre =
            build_model(transformer_genotype(2), cfg.clone(), &task.vocab, seed * 7 + 1).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(2e-3));
        let mut rng = CounterRng::new(seed).derive("mass-pre");
        let t0 = std::time::Instant::now();
        for _ in 0..120 {
            for mono in [&task.mono_src, &task.mono_tgt] {
                let batch: Vec<TokenSeq> = (0..8)
                    .map(|_| mono.sentences[rng.below(mono.len())].clone())
                    .collect();
                mass::unsup_train_step(&mut pre, &batch, 0.5, &mut opt, &mut rng).unwrap();
            }
        }
        let pre_time = t0.elapsed().as_secs_f64();
        let warm = steps_to(pre, "warm-ft");
        eprintln!("seed {seed} warm: {:?}", warm.iter().map(|x| (x * 10.0).round() / 10.0).collect::<Vec<_>>());
        let _ = pre_time;
    }
}

#[test]
#[ignore]
fn calibrate_finetune_clean() {
    use deskmt_core::pipeline::{finetune_clean_subset, train_on_corpus, ParallelCorpus};
    for seed in [1u64, 2, 3] {
        let task = generate(&TaskConfig {
            kind: TaskKind::Reverse,
            vocab: 20,
            min_len: 3,
            max_len: 9,
            bitext: 400,
            mono_src: 10,
            mono_tgt: 10,
            dev: 40,
            test: 40,
            seed: 300 + seed,
        })
        .unwrap();
        let cfg = model_cfg(32, 2, 2);
        let decode = DecodeConfig { beam: 2, length_penalty: 1.0, max_len: 12 };
        let mut rng = CounterRng::new(seed).derive("ftc");
        // corrupt half the pairs at rate 0.5
        let payload_first = task.vocab.specials().sep + 1;
        let payload = task.vocab.size() - payload_first;
        let mut pairs = task.bitext.pairs.clone();
        let noisy_idx = rng.sample_without_replacement(pairs.len(), pairs.len() / 2);
        for &i in &noisy_idx {
            for t in pairs[i].tgt.ids.iter_mut() {
                if rng.bernoulli(0.5) {
                    *t = payload_first + rng.below(payload);
                }
            }
        }
        let full = ParallelCorpus { pairs };
        let noisy: std::collections::HashSet<usize> = noisy_idx.into_iter().collect();
        let clean = ParallelCorpus {
            pairs: full
                .pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| !noisy.contains(i))
                .map(|(_, p)| p.clone())
                .collect(),
        };
        let mut model =
            build_model(transformer_genotype(2), cfg, &task.vocab, seed * 13 + 5).unwrap();
        train_on_corpus(
            &mut model,
            &full,
            &TrainBudget { steps: 700, batch_size: 8, lr: 2e-3 },
            &mut rng,
        )
        .unwrap();
        let before = dev_bleu(&model, &task.dev, &decode).unwrap();
        finetune_clean_subset(&mut model, &full, &clean, 8, 1e-3, &mut rng).unwrap();
        let after = dev_bleu(&model, &task.dev, &decode).unwrap();
        eprintln!("seed {seed}: before {before:.2} -> after {after:.2} (delta {:+.2})", after - before);
    }
}

#[test]
#[ignore]
fn calibrate_sca() {
    use deskmt_core::sca;
    let mut base_scores = Vec::new();
    let mut sca_scores = Vec::new();
    for seed in [1u64, 2, 3, 4, 5] {
        let task = generate(&TaskConfig {
            kind: TaskKind::Reverse,
            vocab: 26,
            min_len: 4,
            max_len: 10,
            bitext: 60,
            mono_src: 1000,
            mono_tgt: 10,
            dev: 80,
            test: 40,
            seed: 400 + seed,
        })
        .unwrap();
        let cfg = model_cfg(32, 2, 2);
        let decode = DecodeConfig { beam: 2, length_penalty: 1.0, max_len: 12 };
        let pairs = task.bitext.training_pairs();

        // shared warm start
        let mut warm =
            build_model(transformer_genotype(2), cfg.clone(), &task.vocab, seed * 3 + 1).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(2e-3));
        let mut rng = CounterRng::new(seed).derive("sca-warm");
        for _ in 0..500 {
            let batch: Vec<(TokenSeq, TokenSeq)> =
                (0..8).map(|_| pairs[rng.below(pairs.len())].clone()).collect();
            warm.train_step(&batch, &mut opt, &mut rng).unwrap();
        }

        // continuation arms: identical schedules, augmentation toggled
        let continue_plain = |mut m: deskmt_core::seq2seq::Seq2SeqModel| -> f64 {
            let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
            let mut rng = CounterRng::new(seed).derive("sca-cont");
            let mut best = dev_bleu(&m, &task.dev, &decode).unwrap();
            for step in 0..300 {
                let batch: Vec<(TokenSeq, TokenSeq)> =
                    (0..8).map(|_| pairs[rng.below(pairs.len())].clone()).collect();
                m.train_step(&batch, &mut opt, &mut rng).unwrap();
                if (step + 1) % 25 == 0 {
                    best = best.max(dev_bleu(&m, &task.dev, &decode).unwrap());
                }
            }
            best
        };
        let lm = sca::train_lm(
            &task.mono_src.sentences,
            cfg.clone(),
            &sca::LmTrainConfig { steps: 400, batch_size: 8, lr: 2e-3 },
            &task.vocab,
            seed * 11 + 3,
        )
        .unwrap();
        let continue_sca = |mut m: deskmt_core::seq2seq::Seq2SeqModel| -> f64 {
            let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
            let mut rng = CounterRng::new(seed).derive("sca-cont");
            let mut best = dev_bleu(&m, &task.dev, &decode).unwrap();
            for step in 0..300 {
                let batch: Vec<(TokenSeq, TokenSeq)> =
                    (0..8).map(|_| pairs[rng.below(pairs.len())].clone()).collect();
                sca::sca_train_step(&mut m, &lm, &batch, 0.02, 1.0, &mut opt, &mut rng).unwrap();
                if (step + 1) % 25 == 0 {
                    best = best.max(dev_bleu(&m, &task.dev, &decode).unwrap());
                }
            }
            best
        };
        let b = continue_plain(warm.clone());
        let s = continue_sca(warm);
        eprintln!("seed {seed}: baseline {b:.2} vs SCA {s:.2} (delta {:+.2})", s - b);
        base_scores.push(b);
        sca_scores.push(s);
    }
    let mb = base_scores.iter().sum::<f64>() / 5.0;
    let ms = sca_scores.iter().sum::<f64>() / 5.0;
    eprintln!("mean baseline {mb:.2} vs mean SCA {ms:.2} (delta {:+.2})", ms - mb);
}

#[test]
#[ignore]
fn probe_lm_quality() {
    use deskmt_core::sca;
    let task = generate(&TaskConfig {
        kind: TaskKind::Reverse,
        vocab: 26,
        min_len: 4,
        max_len: 10,
        bitext: 120,
        mono_src: 1000,
        mono_tgt: 10,
        dev: 40,
        test: 40,
        seed: 401,
    })
    .unwrap();
    let mut cfg = model_cfg(32, 2, 2);
    cfg.tied_embeddings = false;
    let lm = sca::train_lm(
        &task.mono_src.sentences,
        cfg,
        &sca::LmTrainConfig { steps: 400, batch_size: 8, lr: 2e-3 },
        &task.vocab,
        14,
    )
    .unwrap();
    // per-token NLL on mono (ideal approx len*ln2/(len+1) + start entropy)
    let mut nll = 0.0;
    for s in task.mono_src.sentences.iter().take(50) {
        nll += lm.nll_per_token(s).unwrap();
    }
    eprintln!("mean per-token NLL {:.3} (ideal approx 0.75)", nll / 50.0);
    let sent = &task.mono_src.sentences[0];
    let first = task.vocab.specials().sep + 1;
    for t in [1usize, 3] {
        let dist = lm.distribution(&sent.ids[..t]).unwrap();
        let prev = sent.ids[t - 1] - first;
        let succ1 = first + (prev + 1) % 26;
        let succ2 = first + (prev + 2) % 26;
        let special_mass: f64 = dist.0[..6].iter().sum();
        let succ_mass = dist.0[succ1] + dist.0[succ2];
        let top: Vec<(usize, f64)> = {
            let mut v: Vec<(usize, f64)> = dist.0.iter().cloned().enumerate().collect();
            v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            v.truncate(4);
            v
        };
        eprintln!(
            "pos {t}: successor mass {succ_mass:.3}, special mass {special_mass:.3}, top {top:?}"
        );
    }
}

#[test]
#[ignore]
fn probe_soft_gradient() {
    use deskmt_core::numerics::{finite_difference_grad, max_rel_err, RowSel, Tape};
    use deskmt_core::sca;
    use deskmt_core::seq2seq::{Mode, Seq2SeqModel};
    let task = generate(&TaskConfig {
        kind: TaskKind::Reverse,
        vocab: 8,
        min_len: 4,
        max_len: 6,
        bitext: 10,
        mono_src: 50,
        mono_tgt: 10,
        dev: 4,
        test: 4,
        seed: 77,
    })
    .unwrap();
    let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ffn: 16, n_layers: 1, dropout: 0.0, max_len: 16, tied_embeddings: true, shared_vocab: true };
    let model = build_model(transformer_genotype(1), cfg.clone(), &task.vocab, 3).unwrap();
    let lm = sca::CausalLm::new(cfg, &task.vocab, 5).unwrap();
    let batch: Vec<(TokenSeq, TokenSeq)> = task.bitext.training_pairs()[..2].to_vec();
    let aug = sca::augment_batch(&batch, &lm, 0.5, 1.0, &CounterRng::new(9)).unwrap();
    assert!(aug.iter().any(|p| p.replaced > 0), "want at least one soft row");

    let loss = |m: &Seq2SeqModel| -> deskmt_core::Result<(Tape, deskmt_core::numerics::NodeId)> {
        let mut tape = Tape::new();
        let mut acc = None;
        for pair in &aug {
            let mut rows = pair.src_rows.clone();
            rows.push(RowSel::Hard(m.specials.eos));
            let nll = m.pair_nll_node_with_src_rows(&mut tape, rows, &pair.tgt.ids, true, &mut Mode::Eval)?;
            acc = Some(match acc { None => nll, Some(a) => tape.add(a, nll) });
        }
        let total = tape.scale(acc.unwrap(), 0.5);
        Ok((tape, total))
    };
    let (tape, total) = loss(&model).unwrap();
    let grads = tape.backward(total).unwrap();
    let analytic = tape.param_grads(&grads);
    let numeric = finite_difference_grad(
        |store| {
            let m2 = Seq2SeqModel::from_parts(model.genotype.clone(), model.config.clone(), model.vocab_size, model.specials, store.clone())?;
            let (t, node) = loss(&m2)?;
            Ok(t.value(node))
        },
        &model.params,
        1e-5,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for (pid, g) in &analytic {
        worst = worst.max(max_rel_err(g, &numeric[pid], 1e-6));
    }
    eprintln!("soft-path worst rel err {worst:.3e}");
    assert!(worst < 1e-4);
}
