//! Configuration-driven experiment execution.
//!
//! A run generates its synthetic task, executes the declared stages in
//! order, and writes checkpoints plus score tables under the output
//! directory. Every stage scores its model on dev and test and appends one
//! table row; the best-on-dev model so far feeds stages that build on a
//! previous system. Everything derives from the run seed, so a replay
//! produces byte-identical tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::tasks::{self, TaskConfig, TaskData, TaskKind};
use crate::madl;
use crate::mass;
use crate::nao;
use crate::numerics::{Adam, AdamConfig, CounterRng};
use crate::pipeline::{
    self, mix_corpora, BpeModel, DecodeConfig, MonoCorpus, NoiseConfig, ParallelCorpus,
    Provenance, TrainBudget,
};
use crate::rerank;
use crate::sca;
use crate::seq2seq::{
    build_model, transformer_genotype, ModelConfig, Seq2SeqModel, TokenSeq,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub system: String,
    pub dev_bleu: f64,
    pub test_bleu: f64,
}

pub struct RunArtifacts {
    pub rows: Vec<ScoreRow>,
    pub out_dir: PathBuf,
}

struct RunState {
    task: TaskData,
    model_cfg: ModelConfig,
    budget: TrainBudget,
    decode: DecodeConfig,
    seed: u64,
    models: BTreeMap<String, Seq2SeqModel>,
    best: Option<String>,
    rows: Vec<ScoreRow>,
    out_dir: PathBuf,
}

impl RunState {
    fn rng(&self, label: &str) -> CounterRng {
        CounterRng::new(self.seed).derive(label)
    }

    fn fresh_model(&self, label: &str) -> Result<Seq2SeqModel> {
        let seed = CounterRng::new(self.seed).derive(label).next_u64();
        build_model(
            transformer_genotype(self.model_cfg.n_layers),
            self.model_cfg.clone(),
            &self.task.vocab,
            seed,
        )
    }

    fn best_model(&self) -> Result<&Seq2SeqModel> {
        let name = self.best.as_ref().ok_or_else(|| {
            Error::invalid("no trained model yet; run a training stage first")
        })?;
        Ok(&self.models[name])
    }

    fn reversed_bitext(&self) -> ParallelCorpus {
        ParallelCorpus::from_pairs(
            self.task.bitext.pairs.iter().map(|p| (p.tgt.clone(), p.src.clone())),
            Provenance::Bitext,
        )
    }

    fn record(&mut self, name: &str, model: Seq2SeqModel) -> Result<()> {
        let dev = pipeline::dev_bleu(&model, &self.task.dev, &self.decode)?;
        let test = pipeline::dev_bleu(&model, &self.task.test, &self.decode)?;
        model.save(&self.out_dir.join(format!("{name}.dmt")), "translation")?;
        let improved = match &self.best {
            None => true,
            Some(b) => {
                let current = self.rows.iter().find(|r| &r.system == b).map(|r| r.dev_bleu);
                current.is_none_or(|c| dev >= c)
            }
        };
        self.models.insert(name.to_string(), model);
        if improved {
            self.best = Some(name.to_string());
        }
        self.rows.push(ScoreRow { system: name.to_string(), dev_bleu: dev, test_bleu: test });
        Ok(())
    }
}

fn stage_err(stage: &str, e: Error) -> Error {
    Error::invalid(format!("stage {stage} failed: {e}"))
}

/// Execute a configuration. Artifacts land under `out_root/<run.out>`.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunArtifacts> {
    let task_cfg = TaskConfig {
        kind: TaskKind::parse(&cfg.get_string("task", "kind", "reverse"))?,
        vocab: cfg.get("task", "vocab", 20)?,
        min_len: cfg.get("task", "min_len", 3)?,
        max_len: cfg.get("task", "max_len", 10)?,
        bitext: cfg.get("task", "bitext", 200)?,
        mono_src: cfg.get("task", "mono_src", 400)?,
        mono_tgt: cfg.get("task", "mono_tgt", 400)?,
        dev: cfg.get("task", "dev", 32)?,
        test: cfg.get("task", "test", 32)?,
        seed: cfg.get("run", "seed", 1)?,
    };
    let model_cfg = ModelConfig {
        d_model: cfg.get("model", "d_model", 32)?,
        n_heads: cfg.get("model", "n_heads", 2)?,
        d_ffn: cfg.get("model", "d_ffn", 64)?,
        n_layers: cfg.get("model", "layers", 2)?,
        dropout: cfg.get("model", "dropout", 0.1)?,
        max_len: cfg.get("model", "max_len", 32)?,
        tied_embeddings: cfg.get("model", "tied_embeddings", true)?,
        shared_vocab: cfg.get("model", "shared_vocab", true)?,
    };
    model_cfg.validate()?;
    let budget = TrainBudget {
        steps: cfg.get("train", "steps", 400)?,
        batch_size: cfg.get("train", "batch_size", 8)?,
        lr: cfg.get("train", "lr", 5e-4)?,
    };
    let decode = DecodeConfig {
        beam: cfg.get("train", "beam", 5)?,
        length_penalty: cfg.get("train", "length_penalty", 1.0)?,
        max_len: cfg.get("train", "decode_max_len", task_cfg.max_len + 4)?,
    };
    let out_dir = out_root.join(cfg.get_string("run", "out", "run"));
    std::fs::create_dir_all(&out_dir)?;

    let task = tasks::generate(&task_cfg)?;
    // persist the vocabulary as a zero-merge subword model
    BpeModel { merges: Vec::new(), vocab: task.vocab.clone() }
        .save(&out_dir.join("vocab.bpe"))?;

    let mut state = RunState {
        task,
        model_cfg,
        budget,
        decode,
        seed: task_cfg.seed,
        models: BTreeMap::new(),
        best: None,
        rows: Vec::new(),
        out_dir: out_dir.clone(),
    };

    let stages = cfg.get_list("run", "stages", &["baseline", "eval"]);
    for stage in &stages {
        match stage.as_str() {
            "baseline" => stage_baseline(&mut state, cfg),
            "bt" => stage_bt(&mut state, cfg),
            "madl" => stage_madl(&mut state, cfg),
            "mass" => stage_mass(&mut state, cfg),
            "sca" => stage_sca(&mut state, cfg),
            "kd" => stage_kd(&mut state, cfg),
            "finetune_clean" => stage_finetune_clean(&mut state, cfg),
            "rerank" => stage_rerank(&mut state, cfg),
            "nao" => stage_nao(&mut state, cfg),
            "speculation" => stage_speculation(&mut state, cfg),
            "eval" => stage_eval(&mut state),
            other => Err(Error::Config {
                path: "run.stages".to_string(),
                msg: format!("unknown stage {other:?}"),
            }),
        }
        .map_err(|e| stage_err(stage, e))?;
    }

    write_tables(&state.rows, &out_dir)?;
    Ok(RunArtifacts { rows: state.rows, out_dir })
}

fn stage_baseline(state: &mut RunState, _cfg: &ExperimentConfig) -> Result<()> {
    let mut fwd = state.fresh_model("baseline-fwd")?;
    pipeline::train_on_corpus(&mut fwd, &state.task.bitext, &state.budget, &mut state.rng("baseline-train"))?;
    let mut rev = state.fresh_model("baseline-rev")?;
    let rev_bitext = state.reversed_bitext();
    pipeline::train_on_corpus(&mut rev, &rev_bitext, &state.budget, &mut state.rng("baseline-rev-train"))?;
    rev.save(&state.out_dir.join("reverse.dmt"), "translation")?;
    state.models.insert("reverse".to_string(), rev);
    state.record("baseline", fwd)
}

fn stage_bt(state: &mut RunState, cfg: &ExperimentConfig) -> Result<()> {
    let reverse = state
        .models
        .get("reverse")
        .ok_or_else(|| Error::invalid("bt needs the baseline stage first"))?;
    let noise = NoiseConfig {
        p_drop: cfg.get("bt", "noise_drop", 0.1)?,
        p_blank: cfg.get("bt", "noise_blank", 0.1)?,
        swap_window: cfg.get("bt", "noise_swap", 3)?,
    };
    let fraction: f64 = cfg.get("bt", "mono_fraction", 1.0)?;
    let mut rng = state.rng("bt-subsample");
    let n = ((state.task.mono_tgt.len() as f64) * fraction).round() as usize;
    let idx = rng.sample_without_replacement(state.task.mono_tgt.len(), n.min(state.task.mono_tgt.len()));
    let mono = MonoCorpus::new(
        idx.into_iter().map(|i| state.task.mono_tgt.sentences[i].clone()).collect(),
        state.task.mono_tgt.lang.clone(),
    )?;
    let synthetic = pipeline::back_translate(
        reverse,
        &mono,
        &DecodeConfig { beam: 5, ..state.decode.clone() },
        &noise,
        &state.rng("bt-noise"),
    )?;
    pipeline::files::write_token_corpus(&state.out_dir.join("bt-corpus.tsv"), &synthetic)?;
    let upsample: usize = cfg.get("bt", "upsample_bitext", 1)?;
    let mixed = mix_corpora(
        &[(state.task.bitext.clone(), upsample), (synthetic, 1)],
        &mut state.rng("bt-mix"),
    )?;
    let mut model = state.fresh_model("bt-model")?;
    let steps = cfg.get("bt", "steps", state.budget.steps)?;
    let budget = TrainBudget { steps, ..state.budget.clone() };
    pipeline::train_on_corpus(&mut model, &mixed, &budget, &mut state.rng("bt-train"))?;
    state.record("bt", model)
}

fn stage_madl(state: &mut RunState, cfg: &ExperimentConfig) -> Result<()> {
    let n_agents: usize = cfg.get("madl", "agents", 2)?;
    let agent_steps: usize = cfg.get("madl", "agent_steps", state.budget.steps / 2)?;
    let agent_budget = TrainBudget { steps: agent_steps, ..state.budget.clone() };
    let rev_bitext = state.reversed_bitext();
    let mut frozen_f = Vec::new();
    let mut frozen_g = Vec::new();
    for i in 0..n_agents {
        let mut f = state.fresh_model(&format!("madl-agent-f{i}"))?;
        pipeline::train_on_corpus(&mut f, &state.task.bitext, &agent_budget, &mut state.rng(&format!("madl-af{i}")))?;
        frozen_f.push(f);
        let mut g = state.fresh_model(&format!("madl-agent-g{i}"))?;
        pipeline::train_on_corpus(&mut g, &rev_bitext, &agent_budget, &mut state.rng(&format!("madl-ag{i}")))?;
        frozen_g.push(g);
    }
    let mut f0 = state.best_model()?.clone();
    let mut g0 = state
        .models
        .get("reverse")
        .ok_or_else(|| Error::invalid("madl needs the baseline stage first"))?
        .clone();
    let weights = vec![1.0 / (n_agents + 1) as f64; n_agents + 1];
    let corpora = madl::MadlCorpora {
        bitext: state.task.bitext.training_pairs(),
        mono_x: state.task.mono_src.sentences.clone(),
        mono_y: state.task.mono_tgt.sentences.clone(),
    };
    let train_cfg = madl::MadlTrainConfig {
        steps: cfg.get("madl", "steps", 60)?,
        bitext_batch: cfg.get("madl", "bitext_batch", 8)?,
        mono_batch: cfg.get("madl", "mono_batch", 4)?,
        mono_fraction: cfg.get("madl", "mono_fraction", 0.2)?,
        refresh_every_n_steps: cfg.get("madl", "refresh_every", 0)?,
        decode: madl::MadlDecodeConfig {
            beam: 4,
            length_penalty: state.decode.length_penalty,
            max_len: state.decode.max_len,
        },
        lr: state.budget.lr,
        abort_checkpoint_dir: Some(state.out_dir.clone()),
    };
    madl::madl_train(
        &mut f0,
        &mut g0,
        &frozen_f,
        &frozen_g,
        &weights,
        &weights,
        &corpora,
        &train_cfg,
        &mut state.rng("madl-train"),
    )?;
    g0.save(&state.out_dir.join("madl-reverse.dmt"), "translation")?;
    state.models.insert("reverse".to_string(), g0);
    state.record("madl", f0)
}

fn stage_mass(state: &mut RunState, cfg: &ExperimentConfig) -> Result<()> {
    let steps: usize = cfg.get("mass", "steps", 300)?;
    let ratio: f64 = cfg.get("mass", "ratio", 0.5)?;
    let batch: usize = cfg.get("mass", "batch_size", 8)?;
    let supervised: bool = cfg.get("mass", "supervised", false)?;
    let mut model = state.fresh_model("mass-init")?;
    let mut opt = Adam::new(AdamConfig::with_lr(state.budget.lr));
    let mut rng = state.rng("mass-pretrain");
    let bitext_pairs = state.task.bitext.training_pairs();
    for step in 0..steps {
        for mono in [&state.task.mono_src, &state.task.mono_tgt] {
            if mono.is_empty() {
                continue;
            }
            let batch_sents: Vec<TokenSeq> = (0..batch.min(mono.len()))
                .map(|_| mono.sentences[rng.below(mono.len())].clone())
                .collect();
            mass::unsup_train_step(&mut model, &batch_sents, ratio, &mut opt, &mut rng)?;
        }
        if supervised && step % 2 == 0 && !bitext_pairs.is_empty() {
            let pair_batch: Vec<(TokenSeq, TokenSeq)> = (0..batch.min(bitext_pairs.len()))
                .map(|_| bitext_pairs[rng.below(bitext_pairs.len())].clone())
                .collect();
            mass::sup_train_step(&mut model, &pair_batch, ratio, &mut opt, &mut rng)?;
        }
    }
    model.save(&state.out_dir.join("mass-pretrained.dmt"), "translation")?;
    let ft_steps: usize = cfg.get("mass", "finetune_steps", state.budget.steps)?;
    let budget = TrainBudget { steps: ft_steps, ..state.budget.clone() };
    pipeline::train_on_corpus(&mut model, &state.task.bitext, &budget, &mut state.rng("mass-finetune"))?;
    state.record("mass", model)
}

fn stage_sca(state: &mut RunState, cfg: &ExperimentConfig) -> Result<()> {
    let lm_steps: usize = cfg.get("sca", "lm_steps", 200)?;
    let gamma: f64 = cfg.get("sca", "gamma", 0.15)?;
    let temperature: f64 = cfg.get("sca", "temperature", 1.0)?;
    let lm = sca::train_lm(
        &state.task.mono_src.sentences,
        state.model_cfg.clone(),
        &sca::LmTrainConfig { steps: lm_steps, batch_size: state.budget.batch_size, lr: 1e-3 },
        &state.task.vocab,
        CounterRng::new(state.seed).derive("sca-lm").next_u64(),
    )?;
    lm.save(&state.out_dir.join("lm.dmt"))?;
    let mut model = state.fresh_model("sca-model")?;
    let mut opt = Adam::new(AdamConfig::with_lr(state.budget.lr));
    let mut rng = state.rng("sca-train");
    let pairs = state.task.bitext.training_pairs();
    let steps: usize = cfg.get("sca", "steps", state.budget.steps)?;
    for _ in 0..steps {
        let batch: Vec<(TokenSeq, TokenSeq)> = (0..state.budget.batch_size.min(pairs.len()))
            .map(|_| pairs[rng.below(pairs.len())].clone())
            .collect();
        sca::sca_train_step(&mut model, &lm, &batch, gamma, temperature, &mut opt, &mut rng)?;
    }
    state.record("sca", model)
}

fn stage_kd(state: &mut RunState, cfg: &ExperimentConfig) -> Result<()> {
    let teacher = state.best_model()?;
    let kd = pipeline::distill(&[teacher], None, &state.task.mono_src, &state.decode)?;
    pipeline::files::write_token_corpus(&state.out_dir.join("kd-corpus.tsv"), &kd)?;
    let mixed = mix_corpora(
        &[(state.task.bitext.clone(), 1), (kd, 1)],
        &mut state.rng("kd-mix"),
    )?;
    let mut model = state.fresh_model("kd-model")?;
    let steps = cfg.get("kd", "steps", state.budget.steps)?;
    let budget = TrainBudget { steps, ..state.budget.clone() };
    pipeline::train_on_corpus(&mut model, &mixed, &budget, &mut state.rng("kd-train"))?;
    state.record("kd", model)
}

fn stage_finetune_clean(state: &mut RunState, cfg: &ExperimentConfig) -> Result<()> {
    let corrupt_fraction: f64 = cfg.get("finetune_clean", "corrupt_fraction", 0.5)?;
    let corrupt_rate: f64 = cfg.get("finetune_clean", "corrupt_rate", 0.5)?;
    let mut rng = state.rng("finetune-corrupt");
    let payload_first = state.task.vocab.specials().sep + 1;
    let payload = state.task.vocab.size() - payload_first;
    let mut pairs = state.task.bitext.pairs.clone();
    let n_noisy = ((pairs.len() as f64) * corrupt_fraction).round() as usize;
    let noisy_idx = rng.sample_without_replacement(pairs.len(), n_noisy.min(pairs.len()));
    for &i in &noisy_idx {
        for t in pairs[i].tgt.ids.iter_mut() {
            if rng.bernoulli(corrupt_rate) {
                *t = payload_first + rng.below(payload);
            }
        }
    }
    let full = ParallelCorpus { pairs };
    let noisy_set: std::collections::HashSet<usize> = noisy_idx.into_iter().collect();
    let clean = ParallelCorpus {
        pairs: full
            .pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| !noisy_set.contains(i))
            .map(|(_, p)| p.clone())
            .collect(),
    };
    let mut model = state.fresh_model("finetune-model")?;
    let steps = cfg.get("finetune_clean", "steps", state.budget.steps)?;
    let budget = TrainBudget { steps, ..state.budget.clone() };
    pipeline::train_on_corpus(&mut model, &full, &budget, &mut state.rng("finetune-full-train"))?;
    let noisy_dev = pipeline::dev_bleu(&model, &state.task.dev, &state.decode)?;
    state.rows.push(ScoreRow {
        system: "noisy_trained".to_string(),
        dev_bleu: noisy_dev,
        test_bleu: pipeline::dev_bleu(&model, &state.task.test, &state.decode)?,
    });
    pipeline::finetune_clean_subset(
        &mut model,
        &full,
        &clean,
        state.budget.batch_size,
        state.budget.lr,
        &mut state.rng("finetune-clean-epoch"),
    )?;
    state.record("finetune_clean", model)
}

fn stage_rerank(state: &mut RunState, cfg: &ExperimentConfig) -> Result<()> {
    let l2r = state.best_model()?.clone();
    // right-to-left model: trained on reversed targets
    let r2l_corpus = ParallelCorpus::from_pairs(
        state.task.bitext.pairs.iter().map(|p| (p.src.clone(), p.tgt.reversed())),
        Provenance::Bitext,
    );
    let mut r2l = state.fresh_model("rerank-r2l")?;
    pipeline::train_on_corpus(&mut r2l, &r2l_corpus, &state.budget, &mut state.rng("r2l-train"))?;
    r2l.save(&state.out_dir.join("r2l.dmt"), "translation-r2l")?;

    let third_name = if state.models.contains_key("nao") { "nao" } else { "baseline" };
    let third = state
        .models
        .get(third_name)
        .ok_or_else(|| Error::invalid("rerank needs a trained third scorer"))?
        .clone();

    let beam: usize = cfg.get("rerank", "beam", 12)?;
    let dev_sources: Vec<TokenSeq> = state.task.dev.iter().map(|(s, _)| s.clone()).collect();
    let dev_refs: Vec<TokenSeq> = state.task.dev.iter().map(|(_, t)| t.clone()).collect();
    let mut dev_nbest = rerank::decode_nbest(
        &l2r,
        &dev_sources,
        beam,
        state.decode.length_penalty,
        state.decode.max_len,
    )?;
    let scorers: Vec<rerank::Scorer> = vec![(&l2r, false), (&r2l, true), (&third, false)];
    rerank::attach_scores(&mut dev_nbest, &scorers)?;
    let grid_steps: usize = cfg.get("rerank", "grid_steps", 4)?;
    let lambda_grid = cfg.get_f64_list("rerank", "lambda_grid", &[0.0, 0.1, 0.2])?;
    let grid = rerank::default_weight_grid(scorers.len(), grid_steps);
    let tuned = rerank::tune_rerank(&dev_nbest, &dev_refs, &grid, &lambda_grid)?;

    let test_sources: Vec<TokenSeq> = state.task.test.iter().map(|(s, _)| s.clone()).collect();
    let mut test_nbest = rerank::decode_nbest(
        &l2r,
        &test_sources,
        beam,
        state.decode.length_penalty,
        state.decode.max_len,
    )?;
    rerank::attach_scores(&mut test_nbest, &scorers)?;
    let mut buf = Vec::new();
    rerank::write_nbest_tsv(&test_nbest, &state.task.vocab, &mut buf)?;
    std::fs::write(state.out_dir.join("test-nbest.tsv"), buf)?;

    let score = |nbest: &rerank::NBestList, refs: &[(TokenSeq, TokenSeq)]| -> Result<f64> {
        let picked = rerank::rerank(nbest, &tuned)?;
        let hyps: Vec<Vec<usize>> = picked.into_iter().map(|h| h.tokens).collect();
        let refs: Vec<Vec<usize>> = refs.iter().map(|(_, t)| t.ids.clone()).collect();
        rerank::corpus_bleu_with(&hyps, &refs, rerank::BleuOptions { add_one_smoothing: true })
    };
    let dev_bleu = score(&dev_nbest, &state.task.dev)?;
    let test_bleu = score(&test_nbest, &state.task.test)?;
    state.rows.push(ScoreRow { system: "rerank".to_string(), dev_bleu, test_bleu });
    Ok(())
}

fn stage_nao(state: &mut RunState, cfg: &ExperimentConfig) -> Result<()> {
    let nao_cfg = nao::NaoConfig {
        pool_size: cfg.get("nao", "pool", 8)?,
        iterations: cfg.get("nao", "iterations", 2)?,
        top_k: cfg.get("nao", "top_k", 2)?,
        eta: cfg.get("nao", "eta", 1.0)?,
        eval_budget: cfg.get("nao", "budget", 40)?,
        eval_batch: cfg.get("nao", "eval_batch", 8)?,
        surrogate: nao::SurrogateConfig {
            d_arch: cfg.get("nao", "d_arch", 64)?,
            epochs: cfg.get("nao", "surrogate_epochs", 160)?,
            ..Default::default()
        },
        decode: DecodeConfig { beam: 1, length_penalty: 1.0, max_len: state.decode.max_len },
        seed: CounterRng::new(state.seed).derive("nao").next_u64(),
        ..Default::default()
    };
    let supernet = nao::Supernet::new(
        state.model_cfg.clone(),
        &state.task.vocab,
        CounterRng::new(state.seed).derive("nao-supernet").next_u64(),
        1e-3,
    )?;
    let train_pairs = state.task.bitext.training_pairs();
    let mut search = nao::NaoSearch::new(supernet, &train_pairs, &state.task.dev, nao_cfg)?
        .with_persistence(&state.out_dir.join("nao"))?;
    search.run(None)?;
    let ranked = search.ranked_archive();
    let best_genotype = ranked[0].genotype.clone();
    std::fs::write(
        state.out_dir.join("best-genotype.txt"),
        format!("{}\n", best_genotype.to_canonical()),
    )?;
    // train the discovered architecture from scratch
    let mut model = build_model(
        best_genotype,
        state.model_cfg.clone(),
        &state.task.vocab,
        CounterRng::new(state.seed).derive("nao-final").next_u64(),
    )?;
    let steps = cfg.get("nao", "train_steps", state.budget.steps)?;
    let budget = TrainBudget { steps, ..state.budget.clone() };
    pipeline::train_on_corpus(&mut model, &state.task.bitext, &budget, &mut state.rng("nao-train"))?;
    state.record("nao", model)
}

fn stage_speculation(state: &mut RunState, cfg: &ExperimentConfig) -> Result<()> {
    let mut model = state.best_model()?.clone();
    let test_sources: Vec<TokenSeq> = state.task.test.iter().map(|(s, _)| s.clone()).collect();
    let speculation = pipeline::build_speculation_set(
        &[&model],
        &test_sources,
        &state.task.bitext,
        &state.decode,
        &mut state.rng("speculation-build"),
    )?;
    let max_epochs: usize = cfg.get("speculation", "max_epochs", 3)?;
    pipeline::finetune_until_dev_drop(
        &mut model,
        &speculation,
        &state.task.dev,
        &state.decode,
        max_epochs,
        state.budget.batch_size,
        state.budget.lr,
        &mut state.rng("speculation-tune"),
    )?;
    state.record("speculation", model)
}

fn stage_eval(state: &mut RunState) -> Result<()> {
    let best = state.best_model()?;
    let dev = pipeline::dev_bleu(best, &state.task.dev, &state.decode)?;
    let test = pipeline::dev_bleu(best, &state.task.test, &state.decode)?;
    state.rows.push(ScoreRow { system: "eval".to_string(), dev_bleu: dev, test_bleu: test });
    Ok(())
}

/// Score tables: TSV plus a markdown mirror, fixed two-decimal formatting.
pub fn write_tables(rows: &[ScoreRow], out_dir: &Path) -> Result<()> {
    let mut tsv = String::from("system\tdev_bleu\ttest_bleu\n");
    for r in rows {
        tsv.push_str(&format!("{}\t{:.2}\t{:.2}\n", r.system, r.dev_bleu, r.test_bleu));
    }
    std::fs::write(out_dir.join("scores.tsv"), &tsv)?;
    let mut md = String::from("| system | dev BLEU | test BLEU |\n|---|---|---|\n");
    for r in rows {
        md.push_str(&format!("| {} | {:.2} | {:.2} |\n", r.system, r.dev_bleu, r.test_bleu));
    }
    std::fs::write(out_dir.join("scores.md"), &md)?;
    Ok(())
}
