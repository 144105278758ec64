//! Batch entry points: data generation, training, attacking, evaluation,
//! layer sweeps, and report merging. Every command is deterministic for a
//! fixed (config, seed) and embeds its resolved configuration in every
//! artifact it writes.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use crate::advswap::{ContextMode, SelectStrategy};
use crate::attacker::{robustness_eval, AttackBudget, MetricFn, RobustnessReport};
use crate::checkpoint;
use crate::metrics::{bleu, parent_lite, perplexity, TableRecord};
use crate::model::{
    greedy_decode, ArchKind, ModelConfig, ParamSet, PerturbationSite, Side, TokenId, TokenSeq,
};
use crate::tasks::{
    gen_copy_task, gen_table_task, load_corpus, load_stop_list, load_tables, load_vocab,
    write_task, CorpusSpec, Sample, SynonymClusters, TaskKind,
};
use crate::trainer::{train, TrainConfig, STEP_LOG_HEADER};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Output-root fallback when a command is run without `--out`.
pub const OUT_ROOT_ENV: &str = "ADVSEQ_OUT_ROOT";

/// Every tunable as a flat key=value map with defaults. Config files hold
/// one `key=value` per line with `#` comments; unknown keys are rejected.
#[derive(Clone, Debug)]
pub struct RunConfig {
    // corpus
    pub task: TaskKind,
    pub content_vocab: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub cluster_size: usize,
    pub num_keys: usize,
    pub pool_size: usize,
    pub num_templates: usize,
    // model
    pub arch: ArchKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_decode_len: usize,
    pub max_positions: usize,
    // training
    pub learning_rate: f64,
    pub label_smoothing: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub ascent_steps: usize,
    pub k: f64,
    pub noise_range: f64,
    pub advgrad: bool,
    pub advswap: bool,
    pub kl: bool,
    pub delta_x: bool,
    pub delta_y: bool,
    pub site_enc_layer: usize,
    pub site_dec_layer: usize,
    pub context_mode: ContextMode,
    pub num_spans: usize,
    pub span_len: usize,
    pub strategy: SelectStrategy,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    // attack
    pub max_edit: usize,
    pub neighbors: usize,
    pub skip_threshold: f64,
    pub best_of_n: bool,
    /// 0 = attack the whole test split
    pub attack_samples: usize,
    /// keys explicitly set via file or --set (task-dependent defaults
    /// only apply to untouched keys)
    explicit: std::collections::HashSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Copy,
            content_vocab: 50,
            len_min: 8,
            len_max: 12,
            n_train: 5000,
            n_valid: 500,
            n_test: 500,
            cluster_size: 5,
            num_keys: 6,
            pool_size: 20,
            num_templates: 2,
            arch: ArchKind::Attention,
            embed_dim: 32,
            hidden_dim: 64,
            enc_layers: 2,
            dec_layers: 2,
            max_decode_len: 24,
            max_positions: 64,
            learning_rate: 1e-3,
            label_smoothing: 0.1,
            alpha: 0.4,
            epsilon: 0.2,
            ascent_steps: 1,
            k: 0.15,
            noise_range: 1e-2,
            advgrad: true,
            advswap: true,
            kl: true,
            delta_x: true,
            delta_y: true,
            site_enc_layer: 0,
            site_dec_layer: 0,
            context_mode: ContextMode::Spans,
            num_spans: 2,
            span_len: 3,
            strategy: SelectStrategy::GradientRanking,
            batch_size: 8,
            epochs: 1,
            seed: 0,
            checkpoint_every: 0,
            max_edit: 30,
            neighbors: 10,
            skip_threshold: 0.5,
            best_of_n: false,
            attack_samples: 0,
            explicit: std::collections::HashSet::new(),
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("expected boolean, found {other:?}")),
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let e = |err: &dyn std::fmt::Display| format!("{key}: {err}");
        macro_rules! num {
            ($field:ident) => {
                self.$field = value.parse().map_err(|x| e(&x))?
            };
        }
        macro_rules! flag {
            ($field:ident) => {
                self.$field = parse_bool(value).map_err(|x| e(&x))?
            };
        }
        match key {
            "task" => self.task = value.parse().map_err(|x: String| e(&x))?,
            "content_vocab" => num!(content_vocab),
            "len_min" => num!(len_min),
            "len_max" => num!(len_max),
            "n_train" => num!(n_train),
            "n_valid" => num!(n_valid),
            "n_test" => num!(n_test),
            "cluster_size" => num!(cluster_size),
            "num_keys" => num!(num_keys),
            "pool_size" => num!(pool_size),
            "num_templates" => num!(num_templates),
            "arch" => self.arch = value.parse().map_err(|x: String| e(&x))?,
            "embed_dim" => num!(embed_dim),
            "hidden_dim" => num!(hidden_dim),
            "enc_layers" => num!(enc_layers),
            "dec_layers" => num!(dec_layers),
            "max_decode_len" => num!(max_decode_len),
            "max_positions" => num!(max_positions),
            "learning_rate" => num!(learning_rate),
            "label_smoothing" => num!(label_smoothing),
            "alpha" => num!(alpha),
            "epsilon" => num!(epsilon),
            "ascent_steps" => num!(ascent_steps),
            "k" => num!(k),
            "noise_range" => num!(noise_range),
            "advgrad" => flag!(advgrad),
            "advswap" => flag!(advswap),
            "kl" => flag!(kl),
            "delta_x" => flag!(delta_x),
            "delta_y" => flag!(delta_y),
            "site_enc_layer" => num!(site_enc_layer),
            "site_dec_layer" => num!(site_dec_layer),
            "context_mode" => {
                self.context_mode = match value {
                    "whole" => ContextMode::Whole,
                    "spans" => ContextMode::Spans,
                    other => return Err(e(&format!("unknown context mode {other:?}"))),
                }
            }
            "num_spans" => num!(num_spans),
            "span_len" => num!(span_len),
            "strategy" => {
                self.strategy = match value {
                    "gradient" => SelectStrategy::GradientRanking,
                    "overlap" => SelectStrategy::WordOverlapping,
                    other => return Err(e(&format!("unknown strategy {other:?}"))),
                }
            }
            "batch_size" => num!(batch_size),
            "epochs" => num!(epochs),
            "seed" => num!(seed),
            "checkpoint_every" => num!(checkpoint_every),
            "max_edit" => num!(max_edit),
            "neighbors" => num!(neighbors),
            "skip_threshold" => num!(skip_threshold),
            "best_of_n" => flag!(best_of_n),
            "attack_samples" => num!(attack_samples),
            other => return Err(format!("unknown config key {other:?}")),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Corpus-size defaults differ per task; apply them to keys the user
    /// never touched.
    pub fn apply_task_defaults(&mut self) {
        if self.task == TaskKind::Table {
            for (key, v) in
                [("n_train", 4000usize), ("n_valid", 400), ("n_test", 400)]
            {
                if !self.explicit.contains(key) {
                    match key {
                        "n_train" => self.n_train = v,
                        "n_valid" => self.n_valid = v,
                        _ => self.n_test = v,
                    }
                }
            }
        }
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), String> {
        let text =
            fs::read_to_string(path).map_err(|err| format!("{}: {err}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
            self.apply(key.trim(), value.trim())
                .map_err(|err| format!("{}:{}: {err}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// Full key=value echo, prefixed with the code version.
    pub fn resolved_text(&self) -> String {
        let strategy = match self.strategy {
            SelectStrategy::GradientRanking => "gradient",
            SelectStrategy::WordOverlapping => "overlap",
        };
        let context_mode = match self.context_mode {
            ContextMode::Whole => "whole",
            ContextMode::Spans => "spans",
        };
        let task = match self.task {
            TaskKind::Copy => "copy",
            TaskKind::Table => "table",
        };
        format!(
            "# advseq {VERSION}\n\
             task={task}\ncontent_vocab={}\nlen_min={}\nlen_max={}\nn_train={}\nn_valid={}\n\
             n_test={}\ncluster_size={}\nnum_keys={}\npool_size={}\nnum_templates={}\n\
             arch={}\nembed_dim={}\nhidden_dim={}\nenc_layers={}\ndec_layers={}\n\
             max_decode_len={}\nmax_positions={}\nlearning_rate={}\nlabel_smoothing={}\n\
             alpha={}\nepsilon={}\nascent_steps={}\nk={}\nnoise_range={}\nadvgrad={}\n\
             advswap={}\nkl={}\ndelta_x={}\ndelta_y={}\nsite_enc_layer={}\nsite_dec_layer={}\n\
             context_mode={context_mode}\nnum_spans={}\nspan_len={}\nstrategy={strategy}\n\
             batch_size={}\nepochs={}\nseed={}\ncheckpoint_every={}\nmax_edit={}\nneighbors={}\n\
             skip_threshold={}\nbest_of_n={}\nattack_samples={}\n",
            self.content_vocab,
            self.len_min,
            self.len_max,
            self.n_train,
            self.n_valid,
            self.n_test,
            self.cluster_size,
            self.num_keys,
            self.pool_size,
            self.num_templates,
            self.arch,
            self.embed_dim,
            self.hidden_dim,
            self.enc_layers,
            self.dec_layers,
            self.max_decode_len,
            self.max_positions,
            self.learning_rate,
            self.label_smoothing,
            self.alpha,
            self.epsilon,
            self.ascent_steps,
            self.k,
            self.noise_range,
            self.advgrad,
            self.advswap,
            self.kl,
            self.delta_x,
            self.delta_y,
            self.site_enc_layer,
            self.site_dec_layer,
            self.num_spans,
            self.span_len,
            self.batch_size,
            self.epochs,
            self.seed,
            self.checkpoint_every,
            self.max_edit,
            self.neighbors,
            self.skip_threshold,
            self.best_of_n,
            self.attack_samples,
        )
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            kind: self.task,
            content_vocab: self.content_vocab,
            len_min: self.len_min,
            len_max: self.len_max,
            n_train: self.n_train,
            n_valid: self.n_valid,
            n_test: self.n_test,
            cluster_size: self.cluster_size,
            num_keys: self.num_keys,
            pool_size: self.pool_size,
            num_templates: self.num_templates,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_encoder_layers: self.enc_layers,
            num_decoder_layers: self.dec_layers,
            arch: self.arch,
            max_decode_len: self.max_decode_len,
            max_positions: self.max_positions,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            label_smoothing: self.label_smoothing,
            alpha: self.alpha,
            epsilon: self.epsilon,
            ascent_steps: self.ascent_steps,
            k: self.k,
            noise_range: self.noise_range,
            enable_advgrad: self.advgrad,
            enable_advswap: self.advswap,
            kl_enabled: self.kl,
            enable_delta_x: self.delta_x,
            enable_delta_y: self.delta_y,
            site_x: PerturbationSite { side: Side::Encoder, layer_id: self.site_enc_layer },
            site_y: PerturbationSite { side: Side::Decoder, layer_id: self.site_dec_layer },
            context_mode: self.context_mode,
            num_spans: self.num_spans,
            span_len: self.span_len,
            strategy: self.strategy,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn budget(&self) -> AttackBudget {
        AttackBudget {
            max_edit_distance: self.max_edit,
            neighbor_count: self.neighbors,
            skip_threshold: self.skip_threshold,
            best_of_n: self.best_of_n,
        }
    }
}

#[derive(Parser)]
#[command(name = "advseq", version = VERSION, about = "Adversarial-augmentation seq2seq lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file ('#' comments, unknown keys rejected)
    #[arg(long)]
    config: Option<PathBuf>,
    /// inline overrides, repeatable: --set key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (copy | table)
    GenData {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model on a generated corpus
    Train {
        /// corpus directory from gen-data
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// drop the implicit (gradient-perturbation) augmentation
        #[arg(long)]
        no_advgrad: bool,
        /// drop the explicit (token-swap) augmentation
        #[arg(long)]
        no_advswap: bool,
        /// drop the symmetric-KL consistency terms
        #[arg(long)]
        no_kl: bool,
        /// disable the source-side perturbation
        #[arg(long)]
        no_delta_x: bool,
        /// disable the target-side perturbation
        #[arg(long)]
        no_delta_y: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Attack a trained model and report metric degradation
    Attack {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_edit: Option<usize>,
        /// attack only the first N test samples
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Clean metrics for a trained model on a corpus split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model per (side, layer, steps) perturbation site and
    /// emit a plot-ready series file
    LayerSweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "enc,dec")]
        sides: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        steps: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Merge attack reports (e.g. across seeds) into one averaged table
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Usage/config error (exit 2) vs runtime failure (exit 1).
enum CmdError {
    Usage(String),
    Runtime(String),
}

impl CmdError {
    fn usage(msg: impl Into<String>) -> Self {
        CmdError::Usage(msg.into())
    }
}

impl<E: std::error::Error> From<E> for CmdError {
    fn from(e: E) -> Self {
        CmdError::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), CmdError>;

fn resolve_config(base: RunConfig, args: &ConfigArgs) -> Result<RunConfig, CmdError> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        cfg.load_file(path).map_err(CmdError::Usage)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CmdError::usage(format!("--set {kv:?}: expected key=value")))?;
        cfg.apply(k.trim(), v.trim())
            .map_err(|e| CmdError::Usage(format!("--set {kv:?}: {e}")))?;
    }
    Ok(cfg)
}

fn resolve_out(out: Option<PathBuf>, subdir: &str) -> Result<PathBuf, CmdError> {
    match out {
        Some(p) => Ok(p),
        None => match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => Ok(PathBuf::from(root).join(subdir)),
            None => Err(CmdError::usage(format!(
                "--out is required (or set {OUT_ROOT_ENV})"
            ))),
        },
    }
}

fn write_str(path: &Path, text: &str) -> Result<(), CmdError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CmdError::Runtime(e.to_string()))?;
    }
    fs::write(path, text).map_err(|e| CmdError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_gen_data(
    task: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    args: &ConfigArgs,
) -> CmdResult {
    let mut cfg = resolve_config(RunConfig::default(), args)?;
    if let Some(t) = task {
        cfg.apply("task", &t).map_err(CmdError::Usage)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = resolve_out(out, "data")?;
    cfg.apply_task_defaults();
    let spec = cfg.corpus_spec();
    let generated = match cfg.task {
        TaskKind::Copy => gen_copy_task(&spec),
        TaskKind::Table => gen_table_task(&spec),
    }
    .map_err(|e| CmdError::Usage(e.to_string()))?;
    write_task(&generated, &out)?;
    write_str(&out.join("config.resolved"), &cfg.resolved_text())?;
    println!(
        "wrote {} corpus to {} ({} train / {} valid / {} test)",
        match cfg.task {
            TaskKind::Copy => "copy",
            TaskKind::Table => "table",
        },
        out.display(),
        generated.splits[0].len(),
        generated.splits[1].len(),
        generated.splits[2].len(),
    );
    Ok(())
}

struct LoadedData {
    vocab: crate::model::Vocab,
    train: Vec<Sample>,
    valid: Vec<Sample>,
    test: Vec<Sample>,
    clusters: Option<SynonymClusters>,
    tables_test: Option<Vec<TableRecord>>,
    stop_list: HashSet<TokenId>,
}

fn load_data(dir: &Path) -> Result<LoadedData, CmdError> {
    let vocab = load_vocab(&dir.join("vocab.txt")).map_err(|e| CmdError::Runtime(e.to_string()))?;
    let load = |name: &str| -> Result<Vec<Sample>, CmdError> {
        load_corpus(&dir.join(name), &vocab).map_err(|e| CmdError::Runtime(e.to_string()))
    };
    let train = load("train.tsv")?;
    let valid = load("valid.tsv")?;
    let test = load("test.tsv")?;
    let clusters_path = dir.join("clusters.txt");
    let clusters = if clusters_path.exists() {
        Some(SynonymClusters::load(&clusters_path, &vocab)
            .map_err(|e| CmdError::Runtime(e.to_string()))?)
    } else {
        None
    };
    let tables_path = dir.join("tables.test.jsonl");
    let tables_test = if tables_path.exists() {
        Some(load_tables(&tables_path).map_err(|e| CmdError::Runtime(e.to_string()))?)
    } else {
        None
    };
    let stop_path = dir.join("stoplist.txt");
    let stop_list = if stop_path.exists() {
        load_stop_list(&stop_path, &vocab).map_err(|e| CmdError::Runtime(e.to_string()))?
    } else {
        HashSet::new()
    };
    Ok(LoadedData { vocab, train, valid, test, clusters, tables_test, stop_list })
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    ablations: [bool; 5],
    args: &ConfigArgs,
) -> CmdResult {
    let mut cfg = resolve_config(RunConfig::default(), args)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let [no_advgrad, no_advswap, no_kl, no_dx, no_dy] = ablations;
    cfg.advgrad &= !no_advgrad;
    cfg.advswap &= !no_advswap;
    cfg.kl &= !no_kl;
    cfg.delta_x &= !no_dx;
    cfg.delta_y &= !no_dy;
    let out = resolve_out(out, "train")?;
    fs::create_dir_all(&out).map_err(|e| CmdError::Runtime(e.to_string()))?;

    let loaded = load_data(data)?;
    let tcfg = cfg.train_config();
    tcfg.validate().map_err(|e| CmdError::Usage(e.to_string()))?;
    if cfg.site_enc_layer > cfg.enc_layers || cfg.site_dec_layer > cfg.dec_layers {
        return Err(CmdError::usage(format!(
            "perturbation site out of range: enc {} of {}, dec {} of {}",
            cfg.site_enc_layer, cfg.enc_layers, cfg.site_dec_layer, cfg.dec_layers
        )));
    }
    let mut params = ParamSet::init(cfg.model_config(loaded.vocab.len()), cfg.seed);

    write_str(&out.join("config.resolved"), &cfg.resolved_text())?;
    let mut log = String::new();
    log.push_str(&comment_block(&cfg));
    log.push_str(STEP_LOG_HEADER);
    log.push('\n');
    let every = cfg.checkpoint_every;
    let mut ckpt_err = None;
    train(&mut params, &loaded.train, &tcfg, |report, snapshot| {
        log.push_str(&report.tsv_line());
        log.push('\n');
        if every > 0 && (report.step + 1) % every == 0 && ckpt_err.is_none() {
            let path = out.join(format!("step-{:06}.ckpt", report.step + 1));
            if let Err(e) = checkpoint::save(snapshot, &path) {
                ckpt_err = Some(e.to_string());
            }
        }
    })
    .map_err(|e| CmdError::Runtime(e.to_string()))?;
    if let Some(e) = ckpt_err {
        return Err(CmdError::Runtime(e));
    }
    checkpoint::save(&params, &out.join("model.ckpt"))
        .map_err(|e| CmdError::Runtime(e.to_string()))?;
    write_str(&out.join("train_log.tsv"), &log)?;
    println!("trained {} steps; checkpoint at {}", log.lines().count().saturating_sub(
        comment_block(&cfg).lines().count() + 1), out.join("model.ckpt").display());
    Ok(())
}

/// Resolved config as '#'-prefixed comment lines for embedding in TSVs.
fn comment_block(cfg: &RunConfig) -> String {
    cfg.resolved_text()
        .lines()
        .map(|l| {
            if l.starts_with('#') {
                format!("{l}\n")
            } else {
                format!("# {l}\n")
            }
        })
        .collect()
}

/// Metric set for a loaded corpus: BLEU and exact-match sequence accuracy
/// always; parent_lite precision/recall/F1 when table sidecars exist.
fn build_metrics<'a>(
    refs: &'a [TokenSeq],
    tables: Option<&'a [TableRecord]>,
    stop: &'a HashSet<TokenId>,
) -> Vec<MetricFn<'a>> {
    let mut metrics = vec![
        MetricFn {
            name: "bleu".into(),
            higher_better: true,
            score: Box::new(move |i, out| bleu(out, &refs[i].ids)),
        },
        MetricFn {
            name: "seq_acc".into(),
            higher_better: true,
            score: Box::new(move |i, out| if out == refs[i].ids.as_slice() { 1.0 } else { 0.0 }),
        },
    ];
    if let Some(tables) = tables {
        for (name, pick) in [
            ("parent_p", 0usize),
            ("parent_r", 1),
            ("parent_f1", 2),
        ] {
            metrics.push(MetricFn {
                name: name.into(),
                higher_better: true,
                score: Box::new(move |i, out| {
                    let s = parent_lite(out, &tables[i], &refs[i].ids, stop);
                    match pick {
                        0 => s.precision,
                        1 => s.recall,
                        _ => s.f1,
                    }
                }),
            });
        }
    }
    metrics
}

/// Three-row clean/adv/d table over the report's metrics.
fn report_table(report: &RobustnessReport) -> String {
    let mut head = String::from("row");
    let mut clean = String::from("clean");
    let mut adv = String::from("adv");
    let mut d = String::from("d");
    for m in &report.metrics {
        head.push_str(&format!("\t{}", m.name));
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("\t{v:.6}"),
            None => "\t-".to_string(),
        };
        clean.push_str(&fmt(m.clean_mean));
        adv.push_str(&fmt(m.adv_mean));
        d.push_str(&fmt(m.d));
    }
    let mp = match report.meaning_preservation {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    };
    format!(
        "{head}\n{clean}\n{adv}\n{d}\n\
         # samples={} attacked={} skipped={} meaning_preservation={mp}\n",
        report.samples, report.attacked, report.skipped
    )
}

fn cmd_attack(
    ckpt: &Path,
    data: &Path,
    out: Option<PathBuf>,
    max_edit: Option<usize>,
    samples: Option<usize>,
    args: &ConfigArgs,
) -> CmdResult {
    let mut cfg = resolve_config(RunConfig::default(), args)?;
    if let Some(m) = max_edit {
        cfg.max_edit = m;
    }
    if let Some(n) = samples {
        cfg.attack_samples = n;
    }
    let out = resolve_out(out, "attack")?;
    let loaded = load_data(data)?;
    let params = checkpoint::load(ckpt).map_err(|e| CmdError::Runtime(e.to_string()))?;
    if params.cfg.vocab_size != loaded.vocab.len() {
        return Err(CmdError::usage(format!(
            "checkpoint vocabulary ({}) does not match corpus ({})",
            params.cfg.vocab_size,
            loaded.vocab.len()
        )));
    }
    let test: &[Sample] = if cfg.attack_samples > 0 && cfg.attack_samples < loaded.test.len() {
        &loaded.test[..cfg.attack_samples]
    } else {
        &loaded.test
    };
    let refs: Vec<TokenSeq> = test.iter().map(|s| s.y.clone()).collect();
    let metrics = build_metrics(&refs, loaded.tables_test.as_deref(), &loaded.stop_list);
    let report = robustness_eval(
        &params,
        test,
        &cfg.budget(),
        &metrics,
        loaded.clusters.as_ref(),
    );

    let mut dump = comment_block(&cfg);
    dump.push_str("sample\tskipped\tswaps\tclean_bleu\tadv_bleu\tedit\n");
    for (i, r) in report.results.iter().enumerate() {
        dump.push_str(&r.dump_line(i));
        dump.push('\n');
    }
    write_str(&out.join("attack_dump.tsv"), &dump)?;
    let table = format!("{}{}", comment_block(&cfg), report_table(&report));
    write_str(&out.join("report.tsv"), &table)?;
    write_str(&out.join("config.resolved"), &cfg.resolved_text())?;
    print!("{}", report_table(&report));
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    split: &str,
    out: Option<PathBuf>,
    args: &ConfigArgs,
) -> CmdResult {
    let cfg = resolve_config(RunConfig::default(), args)?;
    let loaded = load_data(data)?;
    let samples = match split {
        "train" => &loaded.train,
        "valid" => &loaded.valid,
        "test" => &loaded.test,
        other => return Err(CmdError::usage(format!("unknown split {other:?}"))),
    };
    let params = checkpoint::load(ckpt).map_err(|e| CmdError::Runtime(e.to_string()))?;
    let tables = match split {
        "test" => loaded.tables_test.as_deref(),
        _ => None,
    };
    let outputs: Vec<TokenSeq> = samples
        .par_iter()
        .map(|s| greedy_decode(&params, &s.x))
        .collect();
    let n = samples.len().max(1) as f64;
    let mean_bleu: f64 = outputs
        .iter()
        .zip(samples)
        .map(|(o, s)| bleu(&o.ids, &s.y.ids))
        .sum::<f64>()
        / n;
    let seq_acc: f64 = outputs
        .iter()
        .zip(samples)
        .filter(|(o, s)| o.ids == s.y.ids)
        .count() as f64
        / n;
    let mean_ppl: f64 = samples
        .par_iter()
        .map(|s| perplexity(&params, &s.x, &s.y))
        .sum::<f64>()
        / n;
    let mut table = comment_block(&cfg);
    table.push_str("metric\tvalue\n");
    table.push_str(&format!("bleu\t{mean_bleu:.6}\n"));
    table.push_str(&format!("seq_acc\t{seq_acc:.6}\n"));
    table.push_str(&format!("perplexity\t{mean_ppl:.6}\n"));
    if let Some(tables) = tables {
        let (mut p, mut r, mut f1) = (0.0, 0.0, 0.0);
        for ((o, s), t) in outputs.iter().zip(samples).zip(tables) {
            let score = parent_lite(&o.ids, t, &s.y.ids, &loaded.stop_list);
            p += score.precision;
            r += score.recall;
            f1 += score.f1;
        }
        table.push_str(&format!("parent_p\t{:.6}\n", p / n));
        table.push_str(&format!("parent_r\t{:.6}\n", r / n));
        table.push_str(&format!("parent_f1\t{:.6}\n", f1 / n));
    }
    match out {
        Some(path) => write_str(&path, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn cmd_layer_sweep(
    data: &Path,
    out: Option<PathBuf>,
    layers: &[usize],
    sides: &[String],
    steps: &[usize],
    args: &ConfigArgs,
) -> CmdResult {
    let cfg = resolve_config(RunConfig::default(), args)?;
    let out = resolve_out(out, "layer-sweep")?;
    let loaded = load_data(data)?;
    let sides: Vec<Side> = sides
        .iter()
        .map(|s| match s.as_str() {
            "enc" => Ok(Side::Encoder),
            "dec" => Ok(Side::Decoder),
            other => Err(CmdError::usage(format!("unknown side {other:?} (enc|dec)"))),
        })
        .collect::<Result<_, _>>()?;
    for &l in layers {
        if l > cfg.enc_layers || l > cfg.dec_layers {
            return Err(CmdError::usage(format!(
                "layer id {l} out of range (encoder {}, decoder {})",
                cfg.enc_layers, cfg.dec_layers
            )));
        }
    }
    let mut jobs = Vec::new();
    for &side in &sides {
        for &layer in layers {
            for &ascent in steps {
                jobs.push((side, layer, ascent));
            }
        }
    }
    // independent models; parallel over configurations, ordered output
    let rows: Vec<Result<String, String>> = jobs
        .par_iter()
        .map(|&(side, layer, ascent)| {
            let mut run = cfg.clone();
            run.ascent_steps = ascent;
            match side {
                Side::Encoder => run.site_enc_layer = layer,
                Side::Decoder => run.site_dec_layer = layer,
            }
            let tcfg = run.train_config();
            tcfg.validate().map_err(|e| e.to_string())?;
            let mut params =
                ParamSet::init(run.model_config(loaded.vocab.len()), run.seed);
            train(&mut params, &loaded.train, &tcfg, |_, _| {}).map_err(|e| e.to_string())?;
            let n = loaded.valid.len().max(1) as f64;
            let clean_bleu: f64 = loaded
                .valid
                .iter()
                .map(|s| bleu(&greedy_decode(&params, &s.x).ids, &s.y.ids))
                .sum::<f64>()
                / n;
            let side_name = match side {
                Side::Encoder => "enc",
                Side::Decoder => "dec",
            };
            Ok(format!("{side_name}\t{layer}\t{ascent}\t{clean_bleu:.6}"))
        })
        .collect();
    let mut table = comment_block(&cfg);
    table.push_str("side\tlayer\tsteps\tclean_bleu\n");
    for row in rows {
        match row {
            Ok(r) => {
                table.push_str(&r);
                table.push('\n');
            }
            Err(e) => return Err(CmdError::Runtime(e)),
        }
    }
    write_str(&out.join("sweep.tsv"), &table)?;
    write_str(&out.join("config.resolved"), &cfg.resolved_text())?;
    print!("{table}");
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<PathBuf>) -> CmdResult {
    // average the clean/adv/d rows of several attack reports column-wise
    let mut header: Option<Vec<String>> = None;
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let mut counts: Vec<Vec<usize>> = vec![Vec::new(); 3];
    for path in inputs {
        let text = fs::read_to_string(path)
            .map_err(|e| CmdError::Runtime(format!("{}: {e}", path.display())))?;
        let mut rows = text.lines().filter(|l| !l.starts_with('#'));
        let head: Vec<String> = rows
            .next()
            .ok_or_else(|| CmdError::Runtime(format!("{}: empty report", path.display())))?
            .split('\t')
            .map(|s| s.to_string())
            .collect();
        match &header {
            None => {
                let w = head.len() - 1;
                header = Some(head);
                sums = vec![vec![0.0; w]; 3];
                counts = vec![vec![0; w]; 3];
            }
            Some(h) if *h == head => {}
            Some(_) => {
                return Err(CmdError::Runtime(format!(
                    "{}: metric columns differ from the first report",
                    path.display()
                )))
            }
        }
        for (r, row) in rows.take(3).enumerate() {
            for (c, cell) in row.split('\t').skip(1).enumerate() {
                if let Ok(v) = cell.parse::<f64>() {
                    sums[r][c] += v;
                    counts[r][c] += 1;
                }
            }
        }
    }
    let header = header.ok_or_else(|| CmdError::usage("no input reports"))?;
    let mut table = format!("# advseq {VERSION}\n# merged from {} report(s)\n", inputs.len());
    table.push_str(&header.join("\t"));
    table.push('\n');
    for (r, name) in ["clean", "adv", "d"].iter().enumerate() {
        table.push_str(name);
        for c in 0..header.len() - 1 {
            if counts[r][c] > 0 {
                table.push_str(&format!("\t{:.6}", sums[r][c] / counts[r][c] as f64));
            } else {
                table.push_str("\t-");
            }
        }
        table.push('\n');
    }
    match out {
        Some(path) => write_str(&path, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData { task, seed, out, cfg } => {
            cmd_gen_data(task.clone(), *seed, out.clone(), cfg)
        }
        Cmd::Train {
            data,
            out,
            seed,
            epochs,
            no_advgrad,
            no_advswap,
            no_kl,
            no_delta_x,
            no_delta_y,
            cfg,
        } => cmd_train(
            data,
            out.clone(),
            *seed,
            *epochs,
            [*no_advgrad, *no_advswap, *no_kl, *no_delta_x, *no_delta_y],
            cfg,
        ),
        Cmd::Attack { ckpt, data, out, max_edit, samples, cfg } => {
            cmd_attack(ckpt, data, out.clone(), *max_edit, *samples, cfg)
        }
        Cmd::Eval { ckpt, data, split, out, cfg } => {
            cmd_eval(ckpt, data, split, out.clone(), cfg)
        }
        Cmd::LayerSweep { data, out, layers, sides, steps, cfg } => {
            cmd_layer_sweep(data, out.clone(), layers, sides, steps, cfg)
        }
        Cmd::Report { inputs, out } => cmd_report(inputs, out.clone()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CmdError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
