//! Weight-shared evaluation and the outer architecture search loop.
//!
//! A [`Supernet`] owns one parameter set covering every candidate operator
//! at every branch position; evaluating a genotype activates exactly one
//! operator per branch, and training a sampled genotype updates only the
//! parameters on its path. The search alternates: fit the surrogate on the
//! archive, push the best embeddings uphill along the predictor gradient,
//! decode them back to genotypes, and evaluate the new candidates with
//! shared weights. Every evaluation is checkpointed, so an interrupted
//! search resumes to a bit-identical archive.

use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::nao::codec::encode_genotype;
use crate::nao::surrogate::{Surrogate, SurrogateConfig};
use crate::numerics::{Adam, AdamConfig, CounterRng, ParamStore, Tensor};
use crate::pipeline::{dev_bleu, DecodeConfig};
use crate::seq2seq::genotype::{random_genotype, OpKind};
use crate::seq2seq::model::{
    add_op_params, branch_prefix, read_model_container, write_model_container, ModelContainer,
};
use crate::seq2seq::{Genotype, ModelConfig, Seq2SeqModel, SpecialIds, TokenSeq, Vocabulary};

/// One evaluated architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfRecord {
    pub genotype: Genotype,
    /// Dev accuracy normalized to [0, 1] (BLEU / 100).
    pub y: f64,
    pub seed: u64,
    pub budget: usize,
}

/// One weight set containing every candidate operator at every position.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub specials: SpecialIds,
    pub params: ParamStore,
    opt: Adam,
}

pub const SUPERNET_ROLE: &str = "supernet";

impl Supernet {
    pub fn new(config: ModelConfig, vocab: &Vocabulary, seed: u64, lr: f64) -> Result<Self> {
        config.validate()?;
        let root = CounterRng::new(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let v = vocab.size();
        let mut emb_rng = root.derive("emb.src");
        store.add(
            "emb.src",
            Tensor::uniform_init(vec![v, d], crate::seq2seq::model::EMB_INIT_BOUND, &mut emb_rng),
        )?;
        if !config.shared_vocab {
            let mut rng = root.derive("emb.tgt");
            store.add(
                "emb.tgt",
                Tensor::uniform_init(vec![v, d], crate::seq2seq::model::EMB_INIT_BOUND, &mut rng),
            )?;
        }
        for (side, n_nodes, ops) in [
            ("enc", crate::seq2seq::genotype::ENC_NODES, &OpKind::ENCODER[..]),
            ("dec", crate::seq2seq::genotype::DEC_NODES, &OpKind::ALL[..]),
        ] {
            for li in 0..config.n_layers {
                for ni in 0..n_nodes {
                    for bi in 0..crate::seq2seq::genotype::BRANCHES {
                        for &op in ops {
                            add_op_params(
                                &mut store,
                                &root,
                                &branch_prefix(side, li, ni, bi),
                                op,
                                &config,
                            )?;
                        }
                    }
                }
                store.add(format!("{side}.l{li}.ln.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
                store.add(format!("{side}.l{li}.ln.b"), Tensor::zeros(vec![d]))?;
            }
        }
        if !config.tied_embeddings {
            let mut rng = root.derive("out.w");
            store.add("out.w", Tensor::fan_in_init(vec![d, v], d, &mut rng))?;
        }
        store.add("out.b", Tensor::zeros(vec![v]))?;
        Ok(Supernet {
            config,
            vocab_size: v,
            specials: vocab.specials(),
            params: store,
            opt: Adam::new(AdamConfig::with_lr(lr)),
        })
    }

    /// Read-only model over this supernet's current weights.
    pub fn model_view(&self, genotype: &Genotype) -> Result<Seq2SeqModel> {
        Seq2SeqModel::from_parts(
            genotype.clone(),
            self.config.clone(),
            self.vocab_size,
            self.specials,
            self.params.clone(),
        )
    }

    /// One training step along a genotype's subpath. Only the parameters on
    /// the path receive gradients; optimizer state is shared across paths.
    pub fn train_step_on(
        &mut self,
        genotype: &Genotype,
        batch: &[(TokenSeq, TokenSeq)],
        rng: &mut CounterRng,
    ) -> Result<f64> {
        let store = std::mem::take(&mut self.params);
        let mut model = Seq2SeqModel::from_parts(
            genotype.clone(),
            self.config.clone(),
            self.vocab_size,
            self.specials,
            store,
        )?;
        let result = model.train_step(batch, &mut self.opt, rng);
        self.params = model.into_params();
        result.map_err(|e| {
            warn!("supernet step failed: {e}");
            e
        })
    }

    /// Checkpoint the shared weights and the optimizer moments, so resumed
    /// training continues bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = ModelContainer {
            role: SUPERNET_ROLE.to_string(),
            config: self.config.clone(),
            genotype: None,
            vocab_size: self.vocab_size,
            params: self.params.clone(),
        };
        let mut f = std::fs::File::create(path)?;
        write_model_container(&c, &mut f)?;
        let opt_path = path.with_extension("opt");
        let mut of = std::fs::File::create(opt_path)?;
        crate::numerics::checkpoint::write_checkpoint(&self.opt.to_store(), &mut of)
    }

    pub fn load(path: &Path, lr: f64) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let c = read_model_container(&mut f)?;
        if c.role != SUPERNET_ROLE {
            return Err(Error::format(format!("expected a supernet checkpoint, found {:?}", c.role)));
        }
        let opt_path = path.with_extension("opt");
        let opt = if opt_path.exists() {
            let mut of = std::fs::File::open(opt_path)?;
            let store = crate::numerics::checkpoint::read_checkpoint(&mut of)?;
            Adam::from_store(AdamConfig::with_lr(lr), &store)?
        } else {
            Adam::new(AdamConfig::with_lr(lr))
        };
        Ok(Supernet {
            config: c.config,
            vocab_size: c.vocab_size,
            specials: SpecialIds::standard(),
            params: c.params,
            opt,
        })
    }
}

/// Train the supernet for `budget` steps on randomly sampled genotypes,
/// then score `genotype`'s subpath on the dev set. Deterministic given the
/// rng and the supernet state.
pub fn shared_weight_eval(
    supernet: &mut Supernet,
    genotype: &Genotype,
    train: &[(TokenSeq, TokenSeq)],
    dev: &[(TokenSeq, TokenSeq)],
    budget: usize,
    batch_size: usize,
    decode: &DecodeConfig,
    rng: &mut CounterRng,
    seed_label: u64,
) -> Result<PerfRecord> {
    genotype.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("weight-shared evaluation needs train and dev data"));
    }
    for _ in 0..budget {
        let g = random_genotype(supernet.config.n_layers, rng);
        let batch: Vec<(TokenSeq, TokenSeq)> = (0..batch_size.min(train.len()))
            .map(|_| train[rng.below(train.len())].clone())
            .collect();
        supernet.train_step_on(&g, &batch, rng)?;
    }
    let model = supernet.model_view(genotype)?;
    let bleu = dev_bleu(&model, dev, decode)?;
    Ok(PerfRecord { genotype: genotype.clone(), y: bleu / 100.0, seed: seed_label, budget })
}

#[derive(Debug, Clone)]
pub struct NaoConfig {
    pub pool_size: usize,
    pub iterations: usize,
    pub top_k: usize,
    pub eta: f64,
    /// Step-size multipliers tried in order when decoding keeps returning
    /// architectures the archive already holds.
    pub eta_schedule: Vec<f64>,
    pub surrogate: SurrogateConfig,
    pub eval_budget: usize,
    pub eval_batch: usize,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for NaoConfig {
    fn default() -> Self {
        NaoConfig {
            pool_size: 10,
            iterations: 3,
            top_k: 3,
            eta: 1.0,
            eta_schedule: vec![1.0, 2.0, 4.0],
            surrogate: SurrogateConfig::default(),
            eval_budget: 50,
            eval_batch: 8,
            decode: DecodeConfig { beam: 1, length_penalty: 1.0, max_len: 16 },
            seed: 0,
        }
    }
}

// ── Archive persistence ─────────────────────────────────────────────────

/// One record per line: canonical genotype, score, seed, budget.
pub fn save_archive(path: &Path, archive: &[PerfRecord]) -> Result<()> {
    let mut out = String::new();
    for r in archive {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.genotype.to_canonical(), r.y, r.seed, r.budget));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Vec<PerfRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let fail = || Error::format(format!("corrupt archive at line {}", i + 1));
        let genotype = Genotype::from_canonical(fields.next().ok_or_else(fail)?)
            .map_err(|_| fail())?;
        let y: f64 = fields.next().ok_or_else(fail)?.parse().map_err(|_| fail())?;
        let seed: u64 = fields.next().ok_or_else(fail)?.parse().map_err(|_| fail())?;
        let budget: usize = fields.next().ok_or_else(fail)?.parse().map_err(|_| fail())?;
        out.push(PerfRecord { genotype, y, seed, budget });
    }
    Ok(out)
}

const STATE_MAGIC: &str = "deskmt-nao-state v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SearchCursor {
    iterations_done: usize,
    iter_start_len: usize,
}

fn save_state(path: &Path, cursor: SearchCursor) -> Result<()> {
    std::fs::write(
        path,
        format!(
            "{STATE_MAGIC}\niterations_done {}\niter_start_len {}\n",
            cursor.iterations_done, cursor.iter_start_len
        ),
    )?;
    Ok(())
}

fn load_state(path: &Path) -> Result<SearchCursor> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(STATE_MAGIC) {
        return Err(Error::format("bad search state magic"));
    }
    let mut get = |key: &str| -> Result<usize> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(key))
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::format(format!("bad search state field {key}")))
    };
    Ok(SearchCursor {
        iterations_done: get("iterations_done")?,
        iter_start_len: get("iter_start_len")?,
    })
}

/// Checkpointed search state on disk.
pub struct SearchPersistence {
    pub dir: PathBuf,
}

impl SearchPersistence {
    pub fn archive_path(&self) -> PathBuf {
        self.dir.join("archive.tsv")
    }
    pub fn supernet_path(&self) -> PathBuf {
        self.dir.join("supernet.dmt")
    }
    pub fn state_path(&self) -> PathBuf {
        self.dir.join("search.state")
    }
}

/// The search loop. `persist` checkpoints every evaluation; `eval_cap`
/// bounds the number of evaluations this call performs (used to exercise
/// interruption), with `None` running to completion.
pub struct NaoSearch<'a> {
    pub supernet: Supernet,
    train: &'a [(TokenSeq, TokenSeq)],
    dev: &'a [(TokenSeq, TokenSeq)],
    cfg: NaoConfig,
    pub archive: Vec<PerfRecord>,
    cursor: SearchCursor,
    persist: Option<SearchPersistence>,
    evals_done_this_call: usize,
}

impl<'a> NaoSearch<'a> {
    pub fn new(
        supernet: Supernet,
        train: &'a [(TokenSeq, TokenSeq)],
        dev: &'a [(TokenSeq, TokenSeq)],
        cfg: NaoConfig,
    ) -> Result<Self> {
        if cfg.pool_size < 2 {
            return Err(Error::invalid("seed pool must hold at least two architectures"));
        }
        Ok(NaoSearch {
            supernet,
            train,
            dev,
            cfg,
            archive: Vec::new(),
            cursor: SearchCursor { iterations_done: 0, iter_start_len: 0 },
            persist: None,
            evals_done_this_call: 0,
        })
    }

    /// Attach a persistence directory, restoring any previous state in it.
    pub fn with_persistence(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let p = SearchPersistence { dir: dir.to_path_buf() };
        if p.archive_path().exists() {
            self.archive = load_archive(&p.archive_path())?;
            self.supernet = Supernet::load(&p.supernet_path(), self.supernet.opt.cfg.lr)?;
            self.cursor = load_state(&p.state_path())?;
        }
        self.persist = Some(p);
        Ok(self)
    }

    fn checkpoint(&self) -> Result<()> {
        if let Some(p) = &self.persist {
            save_archive(&p.archive_path(), &self.archive)?;
            self.supernet.save(&p.supernet_path())?;
            save_state(&p.state_path(), self.cursor)?;
        }
        Ok(())
    }

    fn evaluate(&mut self, genotype: &Genotype) -> Result<()> {
        let idx = self.archive.len() as u64;
        let mut rng = CounterRng::new(self.cfg.seed).derive("eval").derive_idx(idx);
        let record = shared_weight_eval(
            &mut self.supernet,
            genotype,
            self.train,
            self.dev,
            self.cfg.eval_budget,
            self.cfg.eval_batch,
            &self.cfg.decode,
            &mut rng,
            self.cfg.seed,
        )?;
        self.archive.push(record);
        self.evals_done_this_call += 1;
        self.checkpoint()
    }

    fn pool_genotypes(&self) -> Result<Vec<Genotype>> {
        let mut rng = CounterRng::new(self.cfg.seed).derive("pool");
        let mut seen = std::collections::HashSet::new();
        let mut pool = Vec::with_capacity(self.cfg.pool_size);
        let mut attempts = 0;
        while pool.len() < self.cfg.pool_size {
            attempts += 1;
            if attempts > 1000 * self.cfg.pool_size {
                return Err(Error::invalid("could not draw enough distinct architectures"));
            }
            let g = random_genotype(self.supernet.config.n_layers, &mut rng);
            if seen.insert(g.to_canonical()) {
                pool.push(g);
            }
        }
        Ok(pool)
    }

    /// Candidates for one iteration, derived only from the archive prefix
    /// frozen at iteration start (so resumption reproduces them exactly).
    fn iteration_candidates(&self, iteration: usize, frozen_len: usize) -> Result<Vec<Genotype>> {
        let frozen = &self.archive[..frozen_len];
        let data: Vec<(Vec<usize>, f64)> =
            frozen.iter().map(|r| (encode_genotype(&r.genotype), r.y)).collect();
        let surrogate_seed = self
            .cfg
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(iteration as u64);
        let mut surrogate =
            Surrogate::new(self.supernet.config.n_layers, &self.cfg.surrogate, surrogate_seed)?;
        surrogate.fit(&data, &self.cfg.surrogate, surrogate_seed)?;

        let mut order: Vec<usize> = (0..frozen.len()).collect();
        order.sort_by(|&a, &b| {
            frozen[b].y.partial_cmp(&frozen[a].y).unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut known: std::collections::HashSet<String> =
            self.archive.iter().map(|r| r.genotype.to_canonical()).collect();
        let mut out = Vec::new();
        for &i in order.iter().take(self.cfg.top_k) {
            let tokens = encode_genotype(&frozen[i].genotype);
            let e = surrogate.encode(&tokens)?;
            let mut accepted = false;
            for mult in &self.cfg.eta_schedule {
                let e2 = surrogate.ascend(&e, self.cfg.eta * mult)?;
                let candidate = surrogate.decode(&e2)?;
                let key = candidate.to_canonical();
                if known.insert(key) {
                    out.push(candidate);
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                warn!(
                    "iteration {iteration}: every refined architecture was a duplicate \
                     after the full step-size schedule"
                );
            }
        }
        Ok(out)
    }

    /// Run until done or until `eval_cap` evaluations have happened in this
    /// call. Returns true when the search is complete.
    pub fn run(&mut self, eval_cap: Option<usize>) -> Result<bool> {
        self.evals_done_this_call = 0;
        let capped = |n: usize, cap: Option<usize>| cap.is_some_and(|c| n >= c);

        let pool = self.pool_genotypes()?;
        while self.archive.len() < pool.len() {
            if capped(self.evals_done_this_call, eval_cap) {
                return Ok(false);
            }
            // resuming mid-pool: verify the next slot matches the plan
            let next = &pool[self.archive.len()];
            self.evaluate(&next.clone())?;
        }
        if self.cursor.iterations_done == 0 && self.cursor.iter_start_len == 0 {
            self.cursor.iter_start_len = self.archive.len();
            self.checkpoint()?;
        }

        for iteration in self.cursor.iterations_done..self.cfg.iterations {
            let frozen_len = self.cursor.iter_start_len;
            let candidates = self.iteration_candidates(iteration, frozen_len)?;
            let already = self.archive.len() - frozen_len;
            // consistency check against what a previous run evaluated
            for (k, candidate) in candidates.iter().take(already).enumerate() {
                let have = &self.archive[frozen_len + k];
                if have.genotype != *candidate {
                    return Err(Error::format(format!(
                        "archive line {} does not match the replayed search plan",
                        frozen_len + k + 1
                    )));
                }
            }
            for candidate in candidates.iter().skip(already) {
                if capped(self.evals_done_this_call, eval_cap) {
                    return Ok(false);
                }
                self.evaluate(candidate)?;
            }
            self.cursor = SearchCursor {
                iterations_done: iteration + 1,
                iter_start_len: self.archive.len(),
            };
            self.checkpoint()?;
        }
        Ok(true)
    }

    /// Archive sorted best-first.
    pub fn ranked_archive(&self) -> Vec<PerfRecord> {
        let mut out = self.archive.clone();
        out.sort_by(|a, b| b.y.partial_cmp(&a.y).unwrap_or(std::cmp::Ordering::Equal));
        out
    }
}
