use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use headbias::analysis::{avg_prediction_distribution, finetune_shift_report, frequency_curve, geometry_report, kl_report, KlReport};
use headbias::corpus::synthetic::generate_corpus;
use headbias::corpus::{build_vocab, count_unigram, read_documents, EncodedCorpus, PredictionSet, UnigramDistribution, Vocab};
use headbias::generation::{generate_many, GenerationConfig, Strategy};
use headbias::metrics::{diversity_scores, embdiv_quality, mean_frequency_rank, perplexity, EvalReport, Perplexity};
use headbias::model::{finetune as finetune_model, load_checkpoint, save_checkpoint, train as train_model, TrainOutcome, CHECKPOINT_FILE, WEIGHTS_FILE};
use headbias::{InterventionSpec, ModelParams, Variant};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::manifest::{RunDir, MANIFEST_FILE};
use crate::{require_file, AnalyzeArgs, CommonArgs, EvalArgs, FinetuneArgs, GenerateArgs, SynthArgs, TrainArgs};

pub const CORPUS_FILE: &str = "corpus.txt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const UNIGRAM_FILE: &str = "unigram.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const PRODUCTS_FILE: &str = "products.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const AVG_PROBS_FILE: &str = "avg_probs.csv";
pub const EVAL_TABLE_FILE: &str = "eval.csv";
pub const EVAL_REPORTS_FILE: &str = "reports.jsonl";
pub const SHIFT_FILE: &str = "shift_report.json";

type Flags = BTreeMap<String, String>;

fn note<T: ToString>(flags: &mut Flags, name: &str, value: &Option<T>) {
    if let Some(v) = value {
        flags.insert(name.to_string(), v.to_string());
    }
}

fn note_list<T: ToString>(flags: &mut Flags, name: &str, value: &Option<Vec<T>>) {
    if let Some(v) = value {
        let joined: Vec<String> = v.iter().map(T::to_string).collect();
        flags.insert(name.to_string(), joined.join(","));
    }
}

fn display(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Load the config and fold in the flags shared by every command.
fn setup(common: &CommonArgs) -> anyhow::Result<(ExperimentConfig, Flags)> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    let mut flags = Flags::new();
    note(&mut flags, "config", &display(&common.config));
    note(&mut flags, "seed", &common.seed);
    note(&mut flags, "out", &display(&common.out));
    if let Some(out) = &common.out {
        cfg.paths.out = Some(out.clone());
    }
    Ok((cfg, flags))
}

fn pick(flag: &Option<PathBuf>, from_config: &mut Option<PathBuf>, name: &str, flags: &mut Flags) -> anyhow::Result<PathBuf> {
    note(flags, name, &display(flag));
    if let Some(p) = flag {
        *from_config = Some(p.clone());
    }
    from_config
        .clone()
        .ok_or_else(|| anyhow!("no --{name} given and no paths.{name} in the config"))
}

fn out_dir(cfg: &ExperimentConfig) -> anyhow::Result<RunDir> {
    let out = cfg
        .paths
        .out
        .as_ref()
        .ok_or_else(|| anyhow!("no --out given and no paths.out in the config"))?;
    RunDir::create(out)
}

fn load_corpus(path: &Path) -> anyhow::Result<Vec<String>> {
    require_file(path)?;
    let docs = read_documents(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if docs.is_empty() {
        bail!("corpus {} has no documents", path.display());
    }
    Ok(docs)
}

struct Checkpoint {
    params: ModelParams<f32>,
    vocab: Vocab,
}

fn load_model(dir: &Path, variant: Option<Variant>, run: &mut RunDir) -> anyhow::Result<Checkpoint> {
    let vocab_path = dir.join(VOCAB_FILE);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    require_file(&vocab_path)?;
    require_file(&ckpt_path)?;
    require_file(&dir.join(WEIGHTS_FILE))?;
    let vocab = Vocab::load(&vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
    let (params, _) = load_checkpoint(dir, variant, Some(&vocab.hash()))
        .with_context(|| format!("loading checkpoint {}", dir.display()))?;
    run.input("checkpoint", &ckpt_path)?;
    run.input("vocab", &vocab_path)?;
    Ok(Checkpoint { params, vocab })
}

/// Write a trained model with everything needed to reload and analyze it.
fn write_model(run: &mut RunDir, outcome: &TrainOutcome<f32>, vocab: &Vocab, unigram: &UnigramDistribution) -> anyhow::Result<()> {
    run.write(VOCAB_FILE, vocab.to_json()?)?;
    run.write_json(UNIGRAM_FILE, unigram)?;
    save_checkpoint(&outcome.params, &vocab.hash(), run.path(""))?;
    run.record(CHECKPOINT_FILE);
    run.record(WEIGHTS_FILE);
    let mut loss = Vec::new();
    outcome.write_loss_csv(&mut loss)?;
    run.write(LOSS_FILE, loss)?;
    run.write_json(
        TRAIN_SUMMARY_FILE,
        &serde_json::json!({
            "initial_heldout_loss": outcome.initial_heldout,
            "final_heldout_loss": outcome.final_heldout,
            "num_parameters": outcome.params.num_parameters(),
        }),
    )
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let (mut cfg, flags) = setup(&args.common)?;
    if let Some(s) = args.common.seed {
        cfg.synth.seed = s;
    }
    let mut run = out_dir(&cfg)?;
    let docs = generate_corpus(&cfg.synth)?;
    let mut text = docs.join("\n");
    text.push('\n');
    run.write(CORPUS_FILE, text)?;
    info!("wrote {} documents", docs.len());
    let seed = cfg.synth.seed;
    run.finish("synth", &cfg, flags, seed)
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let (mut cfg, mut flags) = setup(&args.common)?;
    let corpus_path = pick(&args.corpus, &mut cfg.paths.corpus, "corpus", &mut flags)?;
    if let Some(s) = args.common.seed {
        cfg.train.seed = s;
    }
    let docs = load_corpus(&corpus_path)?;
    let mut run = out_dir(&cfg)?;
    run.input("corpus", &corpus_path)?;
    let vocab = build_vocab(&docs, cfg.vocab.max_vocab)?;
    let unigram = count_unigram(&docs, &vocab)?;
    let encoded = EncodedCorpus::encode(&docs, &vocab);
    let model_cfg = cfg.model.with_vocab(vocab.len());
    info!(
        "training {} model on {} tokens, vocabulary {}",
        model_cfg.variant,
        encoded.num_tokens(),
        vocab.len()
    );
    let outcome = train_model::<f32>(&model_cfg, &cfg.train, &encoded, &vocab)?;
    info!(
        "held-out loss {:?} -> {:?}",
        outcome.initial_heldout, outcome.final_heldout
    );
    write_model(&mut run, &outcome, &vocab, &unigram)?;
    let seed = cfg.train.seed;
    run.finish("train", &cfg, flags, seed)
}

pub fn finetune(args: &FinetuneArgs) -> anyhow::Result<()> {
    let (mut cfg, mut flags) = setup(&args.common)?;
    let corpus_path = pick(&args.corpus, &mut cfg.paths.corpus, "corpus", &mut flags)?;
    let ckpt_dir = pick(&args.checkpoint, &mut cfg.paths.checkpoint, "checkpoint", &mut flags)?;
    if let Some(s) = args.common.seed {
        cfg.train.seed = s;
    }
    let docs = load_corpus(&corpus_path)?;
    let old_unigram_path = ckpt_dir.join(UNIGRAM_FILE);
    require_file(&old_unigram_path)?;
    let mut run = out_dir(&cfg)?;
    let Checkpoint { params, vocab } = load_model(&ckpt_dir, None, &mut run)?;
    run.input("corpus", &corpus_path)?;
    run.input("pretrain_unigram", &old_unigram_path)?;
    let old_unigram: UnigramDistribution = serde_json::from_str(&fs::read_to_string(&old_unigram_path)?)
        .with_context(|| format!("parsing {}", old_unigram_path.display()))?;
    let new_unigram = count_unigram(&docs, &vocab)?;
    let encoded = EncodedCorpus::encode(&docs, &vocab);
    info!("fine-tuning for {} steps on {} tokens", cfg.train.steps, encoded.num_tokens());
    let outcome = finetune_model(params.clone(), &cfg.train, &encoded, &vocab)?;
    let shift = finetune_shift_report(&params, &outcome.params, &old_unigram, &new_unigram)?;
    info!("{shift:?}");
    write_model(&mut run, &outcome, &vocab, &new_unigram)?;
    run.write_json(SHIFT_FILE, &shift)?;
    let seed = cfg.train.seed;
    run.finish("finetune", &cfg, flags, seed)
}

#[derive(Debug, Serialize)]
struct AnalysisReport {
    variant: Variant,
    intervention: InterventionSpec,
    documents: usize,
    positions: usize,
    kl: KlReport,
    spearman_vs_logfreq: f64,
    excluded_zero_frequency: usize,
    isotropy_before: f64,
    isotropy_after: f64,
    hidden_orthogonality: f64,
    curve_bins: usize,
    curve_dropped: usize,
}

pub fn analyze(args: &AnalyzeArgs) -> anyhow::Result<()> {
    let (mut cfg, mut flags) = setup(&args.common)?;
    let corpus_path = pick(&args.corpus, &mut cfg.paths.corpus, "corpus", &mut flags)?;
    let ckpt_dir = pick(&args.checkpoint, &mut cfg.paths.checkpoint, "checkpoint", &mut flags)?;
    note(&mut flags, "intervention", &display(&args.intervention));
    note(&mut flags, "lambda", &args.lambda);
    if let Some(s) = args.common.seed {
        cfg.analysis.seed = s;
    }
    if let Some(path) = &args.intervention {
        require_file(path)?;
        let iv: InterventionSpec = serde_json::from_str(&fs::read_to_string(path)?)
            .with_context(|| format!("parsing intervention {}", path.display()))?;
        cfg.analysis.lambda = iv.lambda_ln;
        cfg.analysis.use_b_fc = iv.use_b_fc;
        cfg.analysis.use_b_last = iv.use_b_last;
    }
    if let Some(l) = args.lambda {
        cfg.analysis.lambda = l;
    }
    let iv = InterventionSpec::new(cfg.analysis.lambda, cfg.analysis.use_b_fc, cfg.analysis.use_b_last)?;
    cfg.analysis.lambda = iv.lambda_ln;

    let docs = load_corpus(&corpus_path)?;
    let mut run = out_dir(&cfg)?;
    let Checkpoint { params, vocab } = load_model(&ckpt_dir, None, &mut run)?;
    run.input("corpus", &corpus_path)?;
    if let Some(path) = &args.intervention {
        run.input("intervention", path)?;
    }
    let unigram = count_unigram(&docs, &vocab)?;
    let encoded = EncodedCorpus::encode(&docs, &vocab);
    let take = match cfg.analysis.max_docs {
        0 => encoded.len(),
        n => n.min(encoded.len()),
    };
    let sample = &encoded.docs[encoded.len() - take..];
    let max_len = params.config.max_seq_len;
    let set = match params.config.variant {
        Variant::Causal => PredictionSet::causal(sample, max_len),
        Variant::Masked => PredictionSet::masked(sample, max_len, &vocab, &cfg.train.masking, cfg.analysis.seed)?,
    };
    info!("analyzing {} positions at {iv:?}", set.num_sites());
    let summary = avg_prediction_distribution(&params, &set, &iv)?;
    let kl = kl_report(&summary.avg_probs, &unigram)?;
    let curve = frequency_curve(&unigram, &summary.avg_probs, cfg.analysis.num_bins)?;
    let geometry = geometry_report(&params, &set, &unigram)?;

    let report = AnalysisReport {
        variant: params.config.variant,
        intervention: iv,
        documents: take,
        positions: summary.positions,
        kl,
        spearman_vs_logfreq: geometry.spearman_vs_logfreq,
        excluded_zero_frequency: geometry.excluded_zero_frequency,
        isotropy_before: geometry.isotropy_before,
        isotropy_after: geometry.isotropy_after,
        hidden_orthogonality: geometry.hidden_orthogonality,
        curve_bins: curve.bins.len(),
        curve_dropped: curve.dropped,
    };
    run.write_json(ANALYSIS_FILE, &report)?;

    let mut curve_csv = Vec::new();
    curve.write_csv(&mut curve_csv)?;
    run.write(CURVE_FILE, curve_csv)?;

    let mut products = csv::Writer::from_writer(Vec::new());
    products.write_record(["id", "token", "count", "product"])?;
    let mut probs = csv::Writer::from_writer(Vec::new());
    probs.write_record(["id", "token", "unigram", "avg_prob"])?;
    for (id, token) in vocab.tokens().iter().enumerate() {
        let count = unigram.counts[id].to_string();
        products.write_record([id.to_string(), token.clone(), count, format!("{:e}", geometry.products[id])])?;
        probs.write_record([
            id.to_string(),
            token.clone(),
            format!("{:e}", unigram.probs[id]),
            format!("{:e}", summary.avg_probs[id]),
        ])?;
    }
    run.write(PRODUCTS_FILE, products.into_inner()?)?;
    run.write(AVG_PROBS_FILE, probs.into_inner()?)?;
    let seed = cfg.analysis.seed;
    run.finish("analyze", &cfg, flags, seed)
}

/// Written next to each generated text file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationSidecar {
    pub config: GenerationConfig,
    pub text_file: String,
    pub vocab_hash: String,
    /// Token count of each output, prompt and EOS included.
    pub lengths: Vec<usize>,
    pub stopped_on_eos: usize,
}

/// The first `n` documents long enough to supply a prompt, in corpus order.
fn prompt_sources(encoded: &EncodedCorpus, prompt_len: usize, n: usize) -> Vec<Vec<usize>> {
    encoded
        .docs
        .iter()
        .filter(|d| d.len() > prompt_len)
        .take(n)
        .cloned()
        .collect()
}

fn cell_name(strategy: Strategy, lambda: f64) -> String {
    format!("{strategy}_lambda{lambda}")
}

pub fn generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let (mut cfg, mut flags) = setup(&args.common)?;
    let corpus_path = pick(&args.corpus, &mut cfg.paths.corpus, "corpus", &mut flags)?;
    let ckpt_dir = pick(&args.checkpoint, &mut cfg.paths.checkpoint, "checkpoint", &mut flags)?;
    note_list(&mut flags, "lambda", &args.lambda);
    note_list(&mut flags, "strategy", &args.strategy);
    note(&mut flags, "k", &args.k);
    note(&mut flags, "p", &args.p);
    let g = &mut cfg.generation;
    if let Some(s) = args.common.seed {
        g.seed = s;
    }
    if let Some(l) = &args.lambda {
        g.lambdas = l.clone();
    }
    if let Some(s) = &args.strategy {
        g.strategies = s.clone();
    }
    if let Some(k) = args.k {
        g.k = k;
    }
    if let Some(p) = args.p {
        g.p = p;
    }
    if g.lambdas.is_empty() || g.strategies.is_empty() {
        bail!("the sweep needs at least one λ and one strategy");
    }

    let docs = load_corpus(&corpus_path)?;
    let mut run = out_dir(&cfg)?;
    let Checkpoint { params, vocab } = load_model(&ckpt_dir, Some(Variant::Causal), &mut run)?;
    run.input("corpus", &corpus_path)?;
    let g = &cfg.generation;
    let refs = prompt_sources(&EncodedCorpus::encode(&docs, &vocab), g.prompt_len, g.num_prompts);
    if refs.is_empty() {
        bail!("no document in {} is longer than prompt_len {}", corpus_path.display(), g.prompt_len);
    }
    let mut seen = Vec::new();
    for &strategy in &g.strategies {
        for &lambda in &g.lambdas {
            let gen_cfg = GenerationConfig {
                strategy,
                k: g.k,
                p: g.p,
                lambda_ln: lambda,
                prompt_len: g.prompt_len,
                max_len: g.max_len,
                seed: g.seed,
            };
            let name = cell_name(strategy, lambda);
            if seen.contains(&name) {
                bail!("duplicate sweep cell {name}");
            }
            info!("generating {name} for {} prompts", refs.len());
            let outputs = generate_many(&params, &refs, &gen_cfg, vocab.eos())?;
            let mut text = String::new();
            for o in &outputs {
                text.push_str(&vocab.decode_text(o));
                text.push('\n');
            }
            let text_file = format!("{name}.txt");
            run.write(&text_file, text)?;
            let sidecar = GenerationSidecar {
                config: gen_cfg,
                text_file,
                vocab_hash: vocab.hash(),
                lengths: outputs.iter().map(Vec::len).collect(),
                stopped_on_eos: outputs.iter().filter(|o| o.last() == Some(&vocab.eos())).count(),
            };
            run.write_json(&format!("{name}.json"), &sidecar)?;
            seen.push(name);
        }
    }
    let seed = cfg.generation.seed;
    run.finish("generate", &cfg, flags, seed)
}

fn read_sidecars(dir: &Path) -> anyhow::Result<Vec<GenerationSidecar>> {
    if !dir.is_dir() {
        return Err(crate::MissingInput(dir.to_path_buf()).into());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let sidecar: GenerationSidecar = serde_json::from_str(&fs::read_to_string(&p)?)
            .with_context(|| format!("{} is not a generation sidecar", p.display()))?;
        out.push(sidecar);
    }
    if out.is_empty() {
        bail!("no generations found in {}", dir.display());
    }
    Ok(out)
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let (mut cfg, mut flags) = setup(&args.common)?;
    let corpus_path = pick(&args.corpus, &mut cfg.paths.corpus, "corpus", &mut flags)?;
    let ckpt_dir = pick(&args.checkpoint, &mut cfg.paths.checkpoint, "checkpoint", &mut flags)?;
    let gen_dir = pick(&args.generations, &mut cfg.paths.generations, "generations", &mut flags)?;
    if let Some(s) = args.common.seed {
        cfg.eval.seed = s;
    }
    let docs = load_corpus(&corpus_path)?;
    let sidecars = read_sidecars(&gen_dir)?;
    let mut run = out_dir(&cfg)?;
    let Checkpoint { params, vocab } = load_model(&ckpt_dir, Some(Variant::Causal), &mut run)?;
    run.input("corpus", &corpus_path)?;
    let encoded = EncodedCorpus::encode(&docs, &vocab);
    let unigram = count_unigram(&docs, &vocab)?;
    let max_len = params.config.max_seq_len;

    let mut ppl_cache: HashMap<u64, Perplexity> = HashMap::new();
    let mut reports = Vec::new();
    for sc in &sidecars {
        if sc.vocab_hash != vocab.hash() {
            bail!("{} was generated with a different vocabulary", sc.text_file);
        }
        let text_path = gen_dir.join(&sc.text_file);
        require_file(&text_path)?;
        run.input(&sc.text_file, &text_path)?;
        let lines: Vec<String> = fs::read_to_string(&text_path)?.lines().map(str::to_string).collect();
        if lines.len() != sc.lengths.len() {
            bail!("{} has {} lines, sidecar lists {}", sc.text_file, lines.len(), sc.lengths.len());
        }
        let c = &sc.config;
        let generated: Vec<Vec<usize>> = lines.iter().map(|l| vocab.encode(l)).collect();
        let continuations: Vec<Vec<&str>> = lines
            .iter()
            .map(|l| l.split_whitespace().skip(c.prompt_len).collect())
            .collect();
        let div = diversity_scores(&continuations)
            .with_context(|| format!("diversity of {}", sc.text_file))?;
        let rank = mean_frequency_rank(&generated, c.prompt_len, &unigram)?;

        let refs = prompt_sources(&encoded, c.prompt_len, lines.len());
        let ppl = match ppl_cache.get(&c.lambda_ln.to_bits()) {
            Some(p) => *p,
            None => {
                let set = PredictionSet::causal(&refs, max_len);
                let p = perplexity(&params, &set, &InterventionSpec::lambda(c.lambda_ln)?)?;
                ppl_cache.insert(c.lambda_ln.to_bits(), p);
                p
            }
        };
        let plain_refs: Vec<Vec<usize>> = refs.iter().map(|r| r[..r.len() - 1].to_vec()).collect();
        let embdiv = embdiv_quality(&params, &generated, &plain_refs, cfg.eval.k_clusters, cfg.eval.seed)?;
        info!("{}: D = {:.4}, ppl = {ppl}, embdiv = {embdiv:.4}", sc.text_file, div.d_mean);
        reports.push(EvalReport {
            lambda_ln: c.lambda_ln,
            strategy: c.strategy,
            d1: div.d1,
            d2: div.d2,
            d3: div.d3,
            d4: div.d4,
            d_mean: div.d_mean,
            embdiv,
            ppl,
            mean_frequency_rank: rank,
            num_texts: lines.len(),
        });
    }
    reports.sort_by(|a, b| a.strategy.cmp(&b.strategy).then(a.lambda_ln.total_cmp(&b.lambda_ln)));

    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["lambda", "strategy", "D1", "D2", "D", "embdiv", "ppl"])?;
    let mut jsonl = String::new();
    for r in &reports {
        table.write_record([
            r.lambda_ln.to_string(),
            r.strategy.to_string(),
            r.d1.to_string(),
            r.d2.to_string(),
            r.d_mean.to_string(),
            r.embdiv.to_string(),
            r.ppl.to_string(),
        ])?;
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    run.write(EVAL_TABLE_FILE, table.into_inner()?)?;
    run.write(EVAL_REPORTS_FILE, jsonl)?;
    let seed = cfg.eval.seed;
    run.finish("eval", &cfg, flags, seed)
}
