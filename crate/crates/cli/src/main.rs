//! Command-line driver: experiments, evaluation, architecture search and
//! the corpus tools, all deterministic under an explicit seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deskmt_core::error::Error as CoreError;
use deskmt_core::experiment::{run_experiment, ExperimentConfig};
use deskmt_core::madl::AgentEnsemble;
use deskmt_core::nao;
use deskmt_core::numerics::{finite_difference_grad, max_rel_err, CounterRng, Tape};
use deskmt_core::pipeline::{
    self, filter_corpus, learn_bpe, BpeModel, DecodeConfig, FilterRuleSet,
    MonoCorpus, NoiseConfig, Side,
};
use deskmt_core::rerank;
use deskmt_core::seq2seq::{build_model, transformer_genotype, Mode, ModelConfig, Seq2SeqModel, TokenSeq};

/// Desk-scale neural machine translation research toolkit.
#[derive(Parser)]
#[command(name = "deskmt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment configuration end to end.
    Run(RunArgs),
    /// Decode a corpus with a model and report BLEU.
    Eval(EvalArgs),
    /// Architecture search (resumable).
    Search(SearchArgs),
    /// Learn a subword model from text corpora.
    BpeLearn(BpeLearnArgs),
    /// Apply a learned subword model to text.
    BpeApply(BpeApplyArgs),
    /// Filter a parallel corpus by cleaning rules.
    Filter(FilterArgs),
    /// Back-translate monolingual text with a reverse-direction model.
    Backtranslate(BacktranslateArgs),
    /// Distill teacher translations for source sentences.
    Distill(DistillArgs),
    /// Rerank an n-best list.
    Rerank(RerankArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file.
    config: PathBuf,
    /// Output root (defaults to $DESKMT_OUT or the current directory).
    #[arg(long)]
    out_root: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Subword/vocabulary model file.
    #[arg(long)]
    bpe: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    source: PathBuf,
    /// Reference sentences, one per line.
    #[arg(long)]
    refs: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
}

#[derive(Args)]
struct SearchArgs {
    /// Experiment configuration (task/model/nao sections drive the search).
    config: PathBuf,
    /// Directory for the archive, supernet checkpoint and cursor.
    #[arg(long)]
    state_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BpeLearnArgs {
    /// Input text files (one sentence per line), one per language.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    merges: usize,
    /// Pool all inputs into one shared vocabulary.
    #[arg(long)]
    shared: bool,
    /// Output model file (shared) or prefix (separate: `<out>.<N>`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BpeApplyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output file of space-joined subword tokens.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    /// Parallel corpus as TSV (source <tab> target)...
    #[arg(long, conflicts_with_all = ["src", "tgt"])]
    tsv: Option<PathBuf>,
    /// ...or as two aligned files.
    #[arg(long, requires = "tgt")]
    src: Option<PathBuf>,
    #[arg(long, requires = "src")]
    tgt: Option<PathBuf>,
    /// Output prefix: writes `<prefix>.kept.tsv` and `<prefix>.drops.tsv`.
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long, default_value_t = 2.5)]
    max_ratio: f64,
    #[arg(long, default_values_t = ["User".to_string(), "NGC".to_string()])]
    forbid_prefix: Vec<String>,
    /// Which side must contain lowercase letters: source, target or off.
    #[arg(long, default_value = "source")]
    english_side: String,
    #[arg(long, default_value_t = 1)]
    min_tokens: usize,
    #[arg(long, default_value_t = 250)]
    max_tokens: usize,
    #[arg(long)]
    no_dedupe: bool,
    /// Enable the external-alignment-score rule at this threshold.
    #[arg(long)]
    align_threshold: Option<f64>,
}

#[derive(Args)]
struct BacktranslateArgs {
    /// Reverse-direction model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    /// Target-language monolingual text, one sentence per line.
    #[arg(long)]
    mono: PathBuf,
    /// Output TSV of (synthetic source, original target).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_drop: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_blank: f64,
    #[arg(long, default_value_t = 3)]
    noise_swap: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher checkpoints (equal weights when several).
    #[arg(long, required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    #[arg(long)]
    bpe: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    sources: PathBuf,
    /// Output TSV of (source, teacher translation).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
}

#[derive(Args)]
struct RerankArgs {
    /// N-best interchange TSV.
    #[arg(long)]
    nbest: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    /// Fixed scorer weights (comma separated); tuned on refs when absent.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    length_penalty: f64,
    /// References for tuning, one per line.
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    grid_steps: usize,
    /// Output file of selected translations.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // schema violations exit 2, runtime failures exit 1
            let is_config = e
                .downcast_ref::<CoreError>()
                .is_some_and(|c| matches!(c, CoreError::Config { .. }));
            if is_config {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Search(a) => cmd_search(a),
        Command::BpeLearn(a) => cmd_bpe_learn(a),
        Command::BpeApply(a) => cmd_bpe_apply(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Backtranslate(a) => cmd_backtranslate(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Rerank(a) => cmd_rerank(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("DESKMT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.set("run", "seed", seed.to_string());
    }
    let artifacts = run_experiment(&cfg, &out_root(a.out_root))?;
    println!("system\tdev_bleu\ttest_bleu");
    for row in &artifacts.rows {
        println!("{}\t{:.2}\t{:.2}", row.system, row.dev_bleu, row.test_bleu);
    }
    println!("artifacts: {}", artifacts.out_dir.display());
    Ok(())
}

fn load_model(path: &PathBuf) -> anyhow::Result<Seq2SeqModel> {
    let (model, _role) = Seq2SeqModel::load(path)?;
    Ok(model)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let bpe = BpeModel::load(&a.bpe)?;
    let sources = pipeline::files::read_lines(&a.source)?;
    let refs = pipeline::files::read_lines(&a.refs)?;
    if sources.is_empty() {
        anyhow::bail!("source file is empty");
    }
    if sources.len() != refs.len() {
        anyhow::bail!("{} sources vs {} references", sources.len(), refs.len());
    }
    let src_ids: Vec<TokenSeq> = sources.iter().map(|s| bpe.apply(s)).collect();
    let nbest = rerank::decode_nbest(&model, &src_ids, a.beam, a.length_penalty, a.max_len)?;
    let hyps: Vec<Vec<String>> = nbest
        .sentences
        .iter()
        .map(|hyps| {
            pipeline::pretokenize(&bpe.detokenize(&TokenSeq::new(hyps[0].tokens.clone())))
        })
        .collect();
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| pipeline::pretokenize(r)).collect();
    let bleu = rerank::corpus_bleu(&hyps, &ref_tokens)?;
    println!("sentences\t{}", sources.len());
    println!("beam\t{}", a.beam);
    println!("length_penalty\t{}", a.length_penalty);
    println!("bleu\t{bleu:.2}");
    Ok(())
}

fn cmd_search(a: SearchArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.set("run", "seed", seed.to_string());
    }
    let seed: u64 = cfg.get("run", "seed", 1)?;
    let task_cfg = deskmt_core::experiment::TaskConfig {
        kind: deskmt_core::experiment::TaskKind::parse(&cfg.get_string("task", "kind", "reverse"))?,
        vocab: cfg.get("task", "vocab", 20)?,
        min_len: cfg.get("task", "min_len", 3)?,
        max_len: cfg.get("task", "max_len", 10)?,
        bitext: cfg.get("task", "bitext", 200)?,
        mono_src: cfg.get("task", "mono_src", 0)?,
        mono_tgt: cfg.get("task", "mono_tgt", 0)?,
        dev: cfg.get("task", "dev", 32)?,
        test: cfg.get("task", "test", 32)?,
        seed,
    };
    let task = deskmt_core::experiment::generate(&task_cfg)?;
    let model_cfg = ModelConfig {
        d_model: cfg.get("model", "d_model", 32)?,
        n_heads: cfg.get("model", "n_heads", 2)?,
        d_ffn: cfg.get("model", "d_ffn", 64)?,
        n_layers: cfg.get("model", "layers", 2)?,
        dropout: cfg.get("model", "dropout", 0.0)?,
        max_len: cfg.get("model", "max_len", 32)?,
        tied_embeddings: cfg.get("model", "tied_embeddings", true)?,
        shared_vocab: cfg.get("model", "shared_vocab", true)?,
    };
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
        decode: DecodeConfig {
            beam: 1,
            length_penalty: 1.0,
            max_len: cfg.get("train", "decode_max_len", 16)?,
        },
        seed: CounterRng::new(seed).derive("nao").next_u64(),
        ..Default::default()
    };
    let supernet = nao::Supernet::new(
        model_cfg,
        &task.vocab,
        CounterRng::new(seed).derive("nao-supernet").next_u64(),
        1e-3,
    )?;
    let train_pairs = task.bitext.training_pairs();
    let mut search = nao::NaoSearch::new(supernet, &train_pairs, &task.dev, nao_cfg)?
        .with_persistence(&a.state_dir)?;
    search.run(None)?;
    let ranked = search.ranked_archive();
    let best = &ranked[0];
    std::fs::write(
        a.state_dir.join("best-genotype.txt"),
        format!("{}\n", best.genotype.to_canonical()),
    )?;
    println!("evaluated\t{}", search.archive.len());
    println!("best_dev_accuracy\t{:.4}", best.y);
    println!("best_genotype\t{}", best.genotype.to_canonical());
    Ok(())
}

fn cmd_bpe_learn(a: BpeLearnArgs) -> anyhow::Result<()> {
    let corpora: Vec<Vec<String>> = a
        .input
        .iter()
        .map(|p| pipeline::files::read_lines(p))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&[String]> = corpora.iter().map(|c| c.as_slice()).collect();
    let models = learn_bpe(&refs, a.merges, a.shared)?;
    if a.shared {
        models[0].save(&a.out)?;
        println!("wrote {} ({} merges, {} tokens)", a.out.display(), models[0].merges.len(), models[0].vocab.size());
    } else {
        for (i, m) in models.iter().enumerate() {
            let path = a.out.with_extension(format!("{i}"));
            m.save(&path)?;
            println!("wrote {} ({} merges, {} tokens)", path.display(), m.merges.len(), m.vocab.size());
        }
    }
    Ok(())
}

fn cmd_bpe_apply(a: BpeApplyArgs) -> anyhow::Result<()> {
    let model = BpeModel::load(&a.model)?;
    let lines = pipeline::files::read_lines(&a.input)?;
    let out: Vec<String> = lines
        .iter()
        .map(|line| {
            let seq = model.apply(line);
            seq.ids
                .iter()
                .map(|&id| model.vocab.token(id).to_string())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    pipeline::files::write_lines(&a.out, &out)?;
    println!("wrote {} ({} sentences)", a.out.display(), out.len());
    Ok(())
}

fn cmd_filter(a: FilterArgs) -> anyhow::Result<()> {
    let corpus = match (&a.tsv, &a.src, &a.tgt) {
        (Some(tsv), _, _) => pipeline::files::read_parallel_tsv(tsv)?,
        (None, Some(src), Some(tgt)) => pipeline::files::read_parallel_files(src, tgt)?,
        _ => anyhow::bail!("provide either --tsv or --src with --tgt"),
    };
    let rules = FilterRuleSet {
        max_length_ratio: a.max_ratio,
        forbidden_prefixes: a.forbid_prefix,
        require_lowercase: match a.english_side.as_str() {
            "source" => Some(Side::Source),
            "target" => Some(Side::Target),
            "off" => None,
            other => anyhow::bail!("--english-side must be source|target|off, got {other}"),
        },
        printable_chars: true,
        dedupe: !a.no_dedupe,
        min_tokens: a.min_tokens,
        max_tokens: a.max_tokens,
        align_threshold: a.align_threshold,
    };
    let (kept, drops) = filter_corpus(&corpus, &rules)?;
    let kept_path = a.out_prefix.with_extension("kept.tsv");
    pipeline::files::write_parallel_tsv(&kept_path, &kept)?;
    let drop_path = a.out_prefix.with_extension("drops.tsv");
    let mut buf = Vec::new();
    pipeline::write_drop_log(&drops, &mut buf)?;
    std::fs::write(&drop_path, buf)?;
    println!("kept\t{}", kept.pairs.len());
    println!("dropped\t{}", drops.len());
    println!("kept_file\t{}", kept_path.display());
    println!("drop_log\t{}", drop_path.display());
    Ok(())
}

fn cmd_backtranslate(a: BacktranslateArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let bpe = BpeModel::load(&a.bpe)?;
    let lines = pipeline::files::read_lines(&a.mono)?;
    let mono = MonoCorpus::new(lines.iter().map(|l| bpe.apply(l)).collect(), "mono")?;
    let decode = DecodeConfig { beam: a.beam, length_penalty: 1.0, max_len: a.max_len };
    let noise =
        NoiseConfig { p_drop: a.noise_drop, p_blank: a.noise_blank, swap_window: a.noise_swap };
    let corpus = pipeline::back_translate(&model, &mono, &decode, &noise, &CounterRng::new(a.seed))?;
    let text = corpus
        .pairs
        .iter()
        .map(|p| {
            format!(
                "{}\t{}",
                bpe.detokenize(&p.src),
                bpe.detokenize(&p.tgt)
            )
        })
        .collect::<Vec<_>>();
    pipeline::files::write_lines(&a.out, &text)?;
    println!("wrote {} ({} pairs)", a.out.display(), text.len());
    Ok(())
}

fn cmd_distill(a: DistillArgs) -> anyhow::Result<()> {
    let models: Vec<Seq2SeqModel> =
        a.models.iter().map(load_model).collect::<anyhow::Result<_>>()?;
    let refs: Vec<&Seq2SeqModel> = models.iter().collect();
    // validate the equal-weight combination up front
    AgentEnsemble::equal_weights(refs.clone())?;
    let bpe = BpeModel::load(&a.bpe)?;
    let lines = pipeline::files::read_lines(&a.sources)?;
    let sources = MonoCorpus::new(lines.iter().map(|l| bpe.apply(l)).collect(), "src")?;
    let decode = DecodeConfig { beam: a.beam, length_penalty: 1.0, max_len: a.max_len };
    let corpus = pipeline::distill(&refs, None, &sources, &decode)?;
    let text = corpus
        .pairs
        .iter()
        .map(|p| format!("{}\t{}", bpe.detokenize(&p.src), bpe.detokenize(&p.tgt)))
        .collect::<Vec<_>>();
    pipeline::files::write_lines(&a.out, &text)?;
    println!("wrote {} ({} pairs)", a.out.display(), text.len());
    Ok(())
}

fn cmd_rerank(a: RerankArgs) -> anyhow::Result<()> {
    let bpe = BpeModel::load(&a.bpe)?;
    let file = std::fs::File::open(&a.nbest)?;
    let nbest = rerank::read_nbest_tsv(&bpe.vocab, std::io::BufReader::new(file))?;
    if nbest.is_empty() {
        anyhow::bail!("n-best list is empty");
    }
    let config = match (&a.weights, &a.refs) {
        (Some(w), _) => rerank::RerankConfig { weights: w.clone(), length_penalty: a.length_penalty },
        (None, Some(refs_path)) => {
            let refs: Vec<TokenSeq> = pipeline::files::read_lines(refs_path)?
                .iter()
                .map(|r| bpe.apply(r))
                .collect();
            let k = nbest.scorer_count()?;
            let grid = rerank::default_weight_grid(k, a.grid_steps);
            rerank::tune_rerank(&nbest, &refs, &grid, &[0.0, 0.1, 0.2, 0.5])?
        }
        (None, None) => anyhow::bail!("provide --weights or --refs for tuning"),
    };
    let picked = rerank::rerank(&nbest, &config)?;
    let out: Vec<String> =
        picked.iter().map(|h| bpe.detokenize(&TokenSeq::new(h.tokens.clone()))).collect();
    pipeline::files::write_lines(&a.out, &out)?;
    println!("weights\t{:?}", config.weights);
    println!("length_penalty\t{}", config.length_penalty);
    println!("wrote {} ({} sentences)", a.out.display(), out.len());
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> anyhow::Result<()> {
    let vocab = deskmt_core::seq2seq::Vocabulary::new((0..8).map(|i| format!("t{i}")))?;
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        n_layers: 1,
        dropout: 0.0,
        max_len: 16,
        tied_embeddings: true,
        shared_vocab: true,
    };
    let model = build_model(transformer_genotype(1), cfg, &vocab, a.seed)?;
    let pairs = vec![
        (TokenSeq::new(vec![6, 7, 8]), TokenSeq::new(vec![8, 7])),
        (TokenSeq::new(vec![9, 10]), TokenSeq::new(vec![10, 9, 6])),
    ];
    let loss = |m: &Seq2SeqModel| -> deskmt_core::Result<(Tape, deskmt_core::numerics::NodeId)> {
        let mut tape = Tape::new();
        let mut acc = None;
        for (s, t) in &pairs {
            let nll = m.pair_nll_node(&mut tape, &s.ids, &t.ids, true, &mut Mode::Eval)?;
            acc = Some(match acc {
                None => nll,
                Some(p) => tape.add(p, nll),
            });
        }
        let total = tape.scale(acc.unwrap(), 1.0 / pairs.len() as f64);
        Ok((tape, total))
    };
    let (tape, total) = loss(&model)?;
    let grads = tape.backward(total)?;
    let analytic = tape.param_grads(&grads);
    let numeric = finite_difference_grad(
        |store| {
            let perturbed = Seq2SeqModel::from_parts(
                model.genotype.clone(),
                model.config.clone(),
                model.vocab_size,
                model.specials,
                store.clone(),
            )?;
            let (t, node) = loss(&perturbed)?;
            Ok(t.value(node))
        },
        &model.params,
        a.eps,
    )?;
    println!("parameter\tmax_rel_err\tstatus");
    let mut worst: f64 = 0.0;
    for (pid, g) in &analytic {
        let err = max_rel_err(g, &numeric[pid], 1e-6);
        worst = worst.max(err);
        let status = if err < 1e-4 { "ok" } else { "FAIL" };
        println!("{}\t{err:.3e}\t{status}", model.params.name(*pid));
    }
    println!("worst\t{worst:.3e}\t{}", if worst < 1e-4 { "ok" } else { "FAIL" });
    if worst >= 1e-4 {
        anyhow::bail!("gradient check failed: worst relative error {worst:.3e}");
    }
    Ok(())
}
