//! The `faultline` command line.
//!
//! Every subcommand resolves its flags and an optional `--config` file into
//! one [`Config`], writes that config back out as a manifest, and stamps the
//! manifest hash into its JSON outputs. Re-running with `--config <manifest>`
//! reproduces the outputs. `--threads`, `--out` and `--json` are not part of
//! the hashed config since they never change results.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::data::{self, blobs, load_cifar10, load_mnist, BlobConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::explain::{ablation_cam, last_conv_layer, perturb_weights, write_cam_artifacts, CamSidecar};
use crate::inject::{run_campaign, CampaignConfig};
use crate::metrics::{
    range_profile, ranges_csv, ratio, reliability_csv, sweep_csv, top2diff_sweep, CampaignReport, LayerRange,
};
use crate::model::{load_checkpoint, save_checkpoint, HeadKind, ModelGraph};
use crate::recipe::{Arch, Recipe, Variant};
use crate::textinit::{load_embeddings, save_embeddings, synth_embeddings, EmbeddingTable, InitMode};
use crate::train::{evaluate, sgd_train, LrSchedule, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "faultline", version, about = "Text-initialised classifier heads and single-bit fault campaigns")]
pub struct Cli {
    /// Seed for every stochastic step of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Print machine-readable JSON (errors included) on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Run config (`key = value` with `[section]` headers). Flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train baseline and/or split-head models.
    Train(TrainArgs),
    /// Run a single-bit fault campaign on a checkpoint.
    Inject(InjectArgs),
    /// Per-layer max/mean absolute activations.
    Profile(ProfileArgs),
    /// Accuracy retained under a Top2Diff threshold.
    Sweep(SweepArgs),
    /// Ablation-CAM for one evaluation image.
    Cam(CamArgs),
    /// Compare a baseline campaign report against ours.
    Report(ReportArgs),
    /// Write a synthetic embedding table.
    EmbedGen(EmbedGenArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// mnist, cifar10 or blobs.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Dataset directory; defaults to `$FAULTLINE_DATA/<dataset>`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N evaluation samples.
    #[arg(long)]
    pub eval_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// mlp-s or cnn-s.
    #[arg(long)]
    pub arch: Option<String>,
    /// baseline, split or both.
    #[arg(long)]
    pub head: Option<String>,
    /// Latent width E of the split head.
    #[arg(long)]
    pub latent: Option<usize>,
    /// random, single-prompt or multi-description.
    #[arg(long)]
    pub init: Option<String>,
    /// `synth` or the path of an embedding file.
    #[arg(long)]
    pub embeddings: Option<String>,
    /// Descriptions per class for synthetic embeddings.
    #[arg(long)]
    pub descriptions: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// step or cosine.
    #[arg(long)]
    pub schedule: Option<String>,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to inject into.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Experiments per layer.
    #[arg(short, long)]
    pub n: Option<usize>,
    /// `all`, `last` or a comma-separated list of layer indices.
    #[arg(long)]
    pub layers: Option<String>,
    /// Inject into the unfused split head.
    #[arg(long)]
    pub no_fuse: bool,
    /// Keep every experiment outcome in the report.
    #[arg(long)]
    pub outcomes: bool,
    /// Model id used in the report; defaults to the checkpoint file stem.
    #[arg(long)]
    pub model_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoints to profile.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
    /// Profile the unfused split head.
    #[arg(long)]
    pub no_fuse: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
    /// Comma-separated ascending thresholds in percentage points.
    #[arg(long)]
    pub deltas: Option<String>,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation sample index.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Target class; defaults to the sample's label.
    #[arg(long)]
    pub class: Option<usize>,
    /// Conv layer index; defaults to the last conv layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Also render the map after this many random weight bit flips.
    #[arg(long)]
    pub flips: Option<usize>,
    /// Comma-separated bit positions never flipped by `--flips`.
    #[arg(long)]
    pub exclude_bits: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Campaign report of the baseline model.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Campaign report of our model.
    #[arg(long)]
    pub ours: Option<PathBuf>,
    /// Evaluation JSON of the baseline model, for the Top2Diff row.
    #[arg(long)]
    pub baseline_eval: Option<PathBuf>,
    #[arg(long)]
    pub ours_eval: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedGenArgs {
    /// `mnist`, `cifar10` or a comma-separated list of class names.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub descriptions: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Output file name inside `--out`.
    #[arg(long)]
    pub file: Option<String>,
}

/// Runs a parsed command line and returns the written artifact paths.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Argument("--threads must be at least 1".into()));
        }
        // Fails only if the global pool already exists, e.g. in-process reruns.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("run", "seed", seed);
    }
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ctx = Ctx {
        out,
        threads: cli.threads,
    };
    match &cli.command {
        Command::Train(a) => cmd_train(&ctx, cfg, a),
        Command::Inject(a) => cmd_inject(&ctx, cfg, a),
        Command::Profile(a) => cmd_profile(&ctx, cfg, a),
        Command::Sweep(a) => cmd_sweep(&ctx, cfg, a),
        Command::Cam(a) => cmd_cam(&ctx, cfg, a),
        Command::Report(a) => cmd_report(&ctx, cfg, a),
        Command::EmbedGen(a) => cmd_embed_gen(&ctx, cfg, a),
    }
}

/// Process entry point: parses `std::env::args`, runs, reports, and returns
/// the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            if cli.json {
                let files: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
                println!("{}", json!({ "ok": true, "files": files }));
            } else {
                for p in paths {
                    println!("wrote {}", p.display());
                }
            }
            0
        }
        Err(e) => {
            if cli.json {
                println!("{}", error_json(&e));
            } else {
                eprintln!("error: {e}");
            }
            1
        }
    }
}

pub fn error_json(e: &Error) -> serde_json::Value {
    let mut err = json!({ "kind": e.kind(), "message": e.to_string() });
    if let Error::Config { line, .. } = e {
        err["line"] = json!(line);
    }
    json!({ "ok": false, "error": err })
}

struct Ctx<'a> {
    out: &'a Path,
    threads: Option<usize>,
}

impl Ctx<'_> {
    fn write(&self, name: &str, contents: impl AsRef<[u8]>, written: &mut Vec<PathBuf>) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    }

    fn manifest(&self, name: &str, cfg: &Config, written: &mut Vec<PathBuf>) -> Result<String> {
        let hash = cfg.hash();
        let text = format!("# faultline manifest, config hash {hash}\n{}", cfg.render());
        self.write(name, text, written)?;
        Ok(hash)
    }
}

const DATA_KEYS: &[&str] = &[
    "dataset",
    "path",
    "train_limit",
    "eval_limit",
    "blob_classes",
    "blob_samples",
    "blob_dim",
    "blob_std",
    "blob_seed",
];

fn overlay_data(cfg: &mut Config, a: &DataArgs) {
    if let Some(v) = &a.dataset {
        cfg.set("data", "dataset", v);
    }
    if let Some(v) = &a.data {
        cfg.set("data", "path", v.display());
    }
    if let Some(v) = a.train_limit {
        cfg.set("data", "train_limit", v);
    }
    if let Some(v) = a.eval_limit {
        cfg.set("data", "eval_limit", v);
    }
    cfg.set_default("data", "dataset", "mnist");
}

fn dataset_dir(cfg: &Config, name: &str) -> Result<PathBuf> {
    if let Some(p) = cfg.get("data", "path") {
        return Ok(PathBuf::from(p));
    }
    let root = data::data_root().ok_or_else(|| {
        Error::Argument(format!(
            "no dataset path: set `data.path`, --data or ${}",
            data::DATA_ENV
        ))
    })?;
    let sub = root.join(name);
    Ok(if sub.is_dir() { sub } else { root })
}

/// Loads one split according to the `[data]` section.
fn load_split(cfg: &Config, split: Split) -> Result<Dataset> {
    let kind = cfg.require("data", "dataset")?;
    let ds = match kind {
        "mnist" => load_mnist(dataset_dir(cfg, "mnist")?, split)?,
        "cifar10" => load_cifar10(dataset_dir(cfg, "cifar10")?, split)?,
        "blobs" => {
            let seed = match cfg.parse_opt("data", "blob_seed")? {
                Some(s) => s,
                None => cfg.parse_required("run", "seed")?,
            };
            blobs(
                &BlobConfig {
                    classes: cfg.parse_or("data", "blob_classes", 10)?,
                    samples: cfg.parse_or("data", "blob_samples", 1000)?,
                    dim: cfg.parse_or("data", "blob_dim", 784)?,
                    std: cfg.parse_or("data", "blob_std", 1.0)?,
                    seed,
                },
                split,
            )?
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown dataset `{other}` (mnist, cifar10, blobs)"
            )))
        }
    };
    let limit_key = match split {
        Split::Train => "train_limit",
        Split::Test => "eval_limit",
    };
    Ok(match cfg.parse_opt::<usize>("data", limit_key)? {
        Some(n) => ds.take(n.min(ds.len())),
        None => ds,
    })
}

fn set_opt<T: ToString>(cfg: &mut Config, section: &str, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        cfg.set(section, key, v.to_string());
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    model_id: &'a str,
    arch: &'a str,
    head: HeadKind,
    dataset: &'a str,
    seed: u64,
    epochs: usize,
    accuracy: f64,
    correct: usize,
    total: usize,
    mean_top2diff: f64,
    mean_top2diff_all: f64,
    params: u64,
    flops: u64,
    config_hash: &'a str,
}

fn train_config(cfg: &Config, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::desk_default(seed);
    let schedule = match cfg.get("train", "schedule").unwrap_or("step") {
        "step" => LrSchedule::Step {
            gamma: cfg.parse_or("train", "gamma", 0.1)?,
            step_size: cfg.parse_or("train", "step_size", 3)?,
        },
        "cosine" => LrSchedule::Cosine {
            min_lr: cfg.parse_or("train", "min_lr", 0.0)?,
        },
        other => return Err(Error::Argument(format!("unknown schedule `{other}` (step, cosine)"))),
    };
    let tc = TrainConfig {
        epochs: cfg.parse_or("train", "epochs", d.epochs)?,
        batch_size: cfg.parse_or("train", "batch_size", d.batch_size)?,
        lr: cfg.parse_or("train", "lr", d.lr)?,
        momentum: cfg.parse_or("train", "momentum", d.momentum)?,
        weight_decay: cfg.parse_or("train", "weight_decay", d.weight_decay)?,
        schedule,
        seed,
    };
    tc.validate()?;
    Ok(tc)
}

fn cmd_train(ctx: &Ctx, mut cfg: Config, a: &TrainArgs) -> Result<Vec<PathBuf>> {
    overlay_data(&mut cfg, &a.data);
    set_opt(&mut cfg, "train", "arch", &a.arch);
    set_opt(&mut cfg, "train", "head", &a.head);
    set_opt(&mut cfg, "train", "latent", &a.latent);
    set_opt(&mut cfg, "train", "init", &a.init);
    set_opt(&mut cfg, "train", "embeddings", &a.embeddings);
    set_opt(&mut cfg, "train", "descriptions", &a.descriptions);
    set_opt(&mut cfg, "train", "epochs", &a.epochs);
    set_opt(&mut cfg, "train", "batch_size", &a.batch_size);
    set_opt(&mut cfg, "train", "lr", &a.lr);
    set_opt(&mut cfg, "train", "momentum", &a.momentum);
    set_opt(&mut cfg, "train", "weight_decay", &a.weight_decay);
    set_opt(&mut cfg, "train", "schedule", &a.schedule);
    cfg.set_default("train", "arch", "cnn-s");
    cfg.set_default("train", "head", "both");
    cfg.set_default("train", "latent", 256);
    cfg.set_default("train", "init", "multi-description");
    cfg.ensure_known(&[
        ("run", &["seed"]),
        ("data", DATA_KEYS),
        (
            "train",
            &[
                "arch",
                "head",
                "latent",
                "init",
                "embeddings",
                "descriptions",
                "embed_seed",
                "epochs",
                "batch_size",
                "lr",
                "momentum",
                "weight_decay",
                "schedule",
                "gamma",
                "step_size",
                "min_lr",
            ],
        ),
    ])?;
    let seed: u64 = cfg.parse_required("run", "seed")?;
    let arch: Arch = cfg.parse_required("train", "arch")?;
    let latent: usize = cfg.parse_required("train", "latent")?;
    let init: InitMode = cfg.parse_required("train", "init")?;
    let heads: &[HeadKind] = match cfg.require("train", "head")? {
        "baseline" => &[HeadKind::Baseline],
        "split" => &[HeadKind::Split],
        "both" => &[HeadKind::Baseline, HeadKind::Split],
        other => return Err(Error::Argument(format!("unknown head `{other}` (baseline, split, both)"))),
    };
    let needs_table = heads.contains(&HeadKind::Split) && init != InitMode::Random;
    if needs_table && cfg.get("train", "embeddings").is_none() {
        return Err(Error::Config {
            line: 0,
            message: format!("init mode `{}` needs `train.embeddings` (synth or a path)", init.name()),
        });
    }
    let tc = train_config(&cfg, seed)?;
    let train = load_split(&cfg, Split::Train)?;
    let test = load_split(&cfg, Split::Test)?;

    let mut written = Vec::new();
    let hash = ctx.manifest("train_manifest.cfg", &cfg, &mut written)?;

    let table = if needs_table {
        Some(match cfg.require("train", "embeddings")? {
            "synth" => {
                let d = cfg.parse_or("train", "descriptions", 4)?;
                let es = cfg.parse_or("train", "embed_seed", seed)?;
                let t = synth_embeddings(train.class_names(), d, latent, es)?;
                let path = ctx.out.join("embeddings.flem");
                save_embeddings(&t, &path)?;
                written.push(path);
                t
            }
            path => load_embeddings(path)?,
        })
    } else {
        None
    };
    if let Some(t) = &table {
        check_class_names(t, &train)?;
    }

    for &head in heads {
        let variant = match head {
            HeadKind::Baseline => Variant::Baseline,
            HeadKind::Split => Variant::Split { latent, init },
        };
        let recipe = Recipe { arch, variant };
        let id = recipe.model_id(seed);
        let model = recipe.build(train.sample_shape(), train.classes(), table.as_ref(), seed)?;
        let (model, curve) = sgd_train(&model, &train, &tc)?;
        let ckpt = ctx.out.join(format!("{id}.flnt"));
        save_checkpoint(&model, &ckpt)?;
        written.push(ckpt);

        let eval = evaluate(&model, &test)?;
        let cost = model.cost();
        let summary = EvalSummary {
            model_id: &id,
            arch: arch.name(),
            head,
            dataset: test.name(),
            seed,
            epochs: tc.epochs,
            accuracy: eval.accuracy,
            correct: eval.correct,
            total: eval.total,
            mean_top2diff: eval.mean_top2diff,
            mean_top2diff_all: eval.mean_top2diff_all,
            params: cost.params,
            flops: cost.flops,
            config_hash: &hash,
        };
        ctx.write(&format!("{id}_eval.json"), serde_json::to_string_pretty(&summary)? + "\n", &mut written)?;
        let mut loss = String::from("epoch,loss\n");
        for (e, l) in curve.iter().enumerate() {
            loss.push_str(&format!("{},{l}\n", e + 1));
        }
        ctx.write(&format!("{id}_loss.csv"), loss, &mut written)?;
    }
    Ok(written)
}

fn check_class_names(table: &EmbeddingTable, data: &Dataset) -> Result<()> {
    if table.class_names() != data.class_names() {
        return Err(Error::Argument(format!(
            "embedding classes {:?} do not match dataset classes {:?}",
            table.class_names(),
            data.class_names()
        )));
    }
    Ok(())
}

/// Loads a checkpoint and fuses split heads unless `fuse` is false.
fn load_model(path: &Path, fuse: bool) -> Result<(ModelGraph, ModelGraph)> {
    let model = load_checkpoint(path)?;
    let used = if fuse && model.head() == HeadKind::Split {
        model.fuse_head()?
    } else {
        model.clone()
    };
    Ok((model, used))
}

fn parse_layers(spec: &str, model: &ModelGraph) -> Result<Vec<usize>> {
    let spec = spec.trim();
    let layers = match spec {
        "all" => model.injectable_layers(),
        "last" => vec![model.last_layer()],
        _ => spec
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|e| Error::Argument(format!("bad layer index `{s}`: {e}")))
            })
            .collect::<Result<_>>()?,
    };
    if layers.is_empty() {
        return Err(Error::Argument(format!("layer filter `{spec}` selects no layers")));
    }
    Ok(layers)
}

fn cmd_inject(ctx: &Ctx, mut cfg: Config, a: &InjectArgs) -> Result<Vec<PathBuf>> {
    overlay_data(&mut cfg, &a.data);
    set_opt(&mut cfg, "inject", "checkpoint", &a.checkpoint.as_ref().map(|p| p.display()));
    set_opt(&mut cfg, "inject", "n", &a.n);
    set_opt(&mut cfg, "inject", "layers", &a.layers);
    set_opt(&mut cfg, "inject", "model_id", &a.model_id);
    if a.no_fuse {
        cfg.set("inject", "fuse", false);
    }
    if a.outcomes {
        cfg.set("inject", "outcomes", true);
    }
    cfg.set_default("inject", "fuse", true);
    cfg.set_default("inject", "outcomes", false);
    cfg.ensure_known(&[
        ("run", &["seed"]),
        ("data", DATA_KEYS),
        ("inject", &["checkpoint", "n", "layers", "fuse", "outcomes", "model_id"]),
    ])?;
    let seed: u64 = cfg.parse_required("run", "seed")?;
    let n: usize = cfg.parse_required("inject", "n")?;
    let layer_spec = cfg.require("inject", "layers")?.to_string();
    let ckpt = PathBuf::from(cfg.require("inject", "checkpoint")?);
    let fuse: bool = cfg.parse_required("inject", "fuse")?;
    let id = cfg.get("inject", "model_id").map_or_else(|| file_stem(&ckpt), str::to_string);
    cfg.set("inject", "model_id", &id);

    let (trained, model) = load_model(&ckpt, fuse)?;
    let layers = parse_layers(&layer_spec, &model)?;
    let eval = load_split(&cfg, Split::Test)?;

    let mut written = Vec::new();
    let hash = ctx.manifest(&format!("{id}_inject_manifest.cfg"), &cfg, &mut written)?;
    let campaign = CampaignConfig {
        model_id: id.clone(),
        layers: Some(layers),
        n_per_layer: n,
        seed,
        threads: ctx.threads,
        keep_outcomes: cfg.parse_required("inject", "outcomes")?,
    };
    let mut report = run_campaign(&model, &eval, &campaign)?;
    report.fused_head = fuse && trained.head() == HeadKind::Split;
    report.head = trained.head();
    report.cost = trained.cost();
    report.config_hash = Some(hash);
    ctx.write(&format!("{id}_campaign.json"), report.to_json()?, &mut written)?;
    ctx.write(
        &format!("{id}_layer_reliability.csv"),
        reliability_csv(&[(id.as_str(), &report)]),
        &mut written,
    )?;
    Ok(written)
}

fn checkpoint_list(cfg: &mut Config, section: &str, paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if !paths.is_empty() {
        let joined: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
        cfg.set(section, "checkpoints", joined.join(","));
    }
    let list: Vec<PathBuf> = cfg
        .require(section, "checkpoints")?
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect();
    if list.is_empty() {
        return Err(Error::Argument("no checkpoints given".into()));
    }
    Ok(list)
}

fn cmd_profile(ctx: &Ctx, mut cfg: Config, a: &ProfileArgs) -> Result<Vec<PathBuf>> {
    overlay_data(&mut cfg, &a.data);
    if a.no_fuse {
        cfg.set("profile", "fuse", false);
    }
    cfg.set_default("profile", "fuse", true);
    cfg.set_default("run", "seed", 0);
    let ckpts = checkpoint_list(&mut cfg, "profile", &a.checkpoints)?;
    cfg.ensure_known(&[("run", &["seed"]), ("data", DATA_KEYS), ("profile", &["checkpoints", "fuse"])])?;
    let fuse: bool = cfg.parse_required("profile", "fuse")?;
    let eval = load_split(&cfg, Split::Test)?;

    let mut written = Vec::new();
    let hash = ctx.manifest("profile_manifest.cfg", &cfg, &mut written)?;
    let mut rows: Vec<(String, Vec<LayerRange>)> = Vec::new();
    for p in &ckpts {
        let (_, model) = load_model(p, fuse)?;
        rows.push((file_stem(p), range_profile(&model, &eval)?));
    }
    let refs: Vec<(&str, &[LayerRange])> = rows.iter().map(|(m, r)| (m.as_str(), r.as_slice())).collect();
    ctx.write("ranges.csv", ranges_csv(&refs), &mut written)?;
    let models: Vec<_> = rows.iter().map(|(m, r)| json!({ "model": m, "layers": r })).collect();
    let doc = json!({ "dataset": eval.name(), "models": models, "config_hash": hash });
    ctx.write("ranges.json", serde_json::to_string_pretty(&doc)? + "\n", &mut written)?;
    Ok(written)
}

fn parse_deltas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| Error::Argument(format!("bad delta `{t}`: {e}"))))
        .collect()
}

fn cmd_sweep(ctx: &Ctx, mut cfg: Config, a: &SweepArgs) -> Result<Vec<PathBuf>> {
    overlay_data(&mut cfg, &a.data);
    set_opt(&mut cfg, "sweep", "deltas", &a.deltas);
    let default: Vec<String> = (0..=20).map(|i| (i * 5).to_string()).collect();
    cfg.set_default("sweep", "deltas", default.join(","));
    cfg.set_default("run", "seed", 0);
    let ckpts = checkpoint_list(&mut cfg, "sweep", &a.checkpoints)?;
    cfg.ensure_known(&[("run", &["seed"]), ("data", DATA_KEYS), ("sweep", &["checkpoints", "deltas"])])?;
    let deltas = parse_deltas(cfg.require("sweep", "deltas")?)?;
    let eval = load_split(&cfg, Split::Test)?;

    let mut written = Vec::new();
    let hash = ctx.manifest("sweep_manifest.cfg", &cfg, &mut written)?;
    // (model id, accuracy, sweep)
    let mut rows = Vec::new();
    for p in &ckpts {
        let model = load_checkpoint(p)?;
        let report = evaluate(&model, &eval)?;
        rows.push((file_stem(p), report.accuracy, top2diff_sweep(&report, &deltas)?));
    }
    let refs: Vec<(&str, &[(f64, f64)])> = rows.iter().map(|(m, _, s)| (m.as_str(), s.as_slice())).collect();
    ctx.write("sweep.csv", sweep_csv(&refs), &mut written)?;
    let models: Vec<_> = rows
        .iter()
        .map(|(m, acc, s)| json!({ "model": m, "accuracy": acc, "sweep": s }))
        .collect();
    let doc = json!({ "dataset": eval.name(), "models": models, "config_hash": hash });
    ctx.write("sweep.json", serde_json::to_string_pretty(&doc)? + "\n", &mut written)?;
    Ok(written)
}

fn cmd_cam(ctx: &Ctx, mut cfg: Config, a: &CamArgs) -> Result<Vec<PathBuf>> {
    overlay_data(&mut cfg, &a.data);
    set_opt(&mut cfg, "cam", "checkpoint", &a.checkpoint.as_ref().map(|p| p.display()));
    set_opt(&mut cfg, "cam", "sample", &a.sample);
    set_opt(&mut cfg, "cam", "class", &a.class);
    set_opt(&mut cfg, "cam", "layer", &a.layer);
    set_opt(&mut cfg, "cam", "flips", &a.flips);
    set_opt(&mut cfg, "cam", "exclude_bits", &a.exclude_bits);
    cfg.set_default("cam", "sample", 0);
    cfg.ensure_known(&[
        ("run", &["seed"]),
        ("data", DATA_KEYS),
        ("cam", &["checkpoint", "sample", "class", "layer", "flips", "exclude_bits"]),
    ])?;
    let seed: u64 = cfg.parse_required("run", "seed")?;
    let ckpt = PathBuf::from(cfg.require("cam", "checkpoint")?);
    let model = load_checkpoint(&ckpt)?;
    let eval = load_split(&cfg, Split::Test)?;
    let sample: usize = cfg.parse_required("cam", "sample")?;
    let (x, label) = eval.sample(sample)?;
    let class = cfg.parse_or("cam", "class", label)?;
    let layer = match cfg.parse_opt("cam", "layer")? {
        Some(l) => l,
        None => last_conv_layer(&model).ok_or_else(|| Error::Argument("model has no conv layer".into()))?,
    };
    let flips: Option<usize> = cfg.parse_opt("cam", "flips")?;
    let exclude: Vec<u32> = match cfg.get("cam", "exclude_bits") {
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|e| Error::Argument(format!("bad bit `{t}`: {e}"))))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let mut written = Vec::new();
    let hash = ctx.manifest("cam_manifest.cfg", &cfg, &mut written)?;
    let image = x.clone().reshape(&x.shape()[1..])?;
    let stem = file_stem(&ckpt);
    let mut variants = vec![(format!("{stem}_s{sample}"), model.clone(), None)];
    if let Some(n) = flips {
        variants.push((
            format!("{stem}_s{sample}_perturbed"),
            perturb_weights(&model, n, seed, &exclude)?,
            Some(n),
        ));
    }
    for (name, m, n) in variants {
        let cam = match ablation_cam(&m, &x, class, layer) {
            Ok(c) => c,
            Err(Error::DegenerateScore { fallback, .. }) => *fallback,
            Err(e) => return Err(e),
        };
        let sidecar = CamSidecar {
            class,
            class_name: eval.class_names().get(class).cloned(),
            layer,
            seed,
            width: cam.width,
            height: cam.height,
            score: cam.score,
            weights: cam.weights.clone(),
            max_value: 0.0,
            cam: String::new(),
            image: String::new(),
            perturbed_flips: n,
            config_hash: Some(hash.clone()),
        };
        written.extend(write_cam_artifacts(ctx.out, &name, &cam, &image, sidecar)?);
    }
    Ok(written)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub baseline: f64,
    pub ours: f64,
    /// Ratio or difference, depending on the metric. `None` when a ratio is
    /// undefined; the raw values are still reported.
    pub value: Option<f64>,
}

/// Table-style comparison of two campaign reports and, optionally, their
/// evaluation summaries `(mean_top2diff, mean_top2diff_all)`.
pub fn compare_reports(
    baseline: &CampaignReport,
    ours: &CampaignReport,
    evals: Option<((f64, f64), (f64, f64))>,
) -> Result<Vec<ComparisonRow>> {
    if baseline.dataset != ours.dataset {
        return Err(Error::Comparison(format!(
            "reports use different datasets: {} vs {}",
            baseline.dataset, ours.dataset
        )));
    }
    if baseline.n_per_layer != ours.n_per_layer {
        return Err(Error::Comparison(format!(
            "reports use different n: {} vs {}",
            baseline.n_per_layer, ours.n_per_layer
        )));
    }
    let last = |r: &CampaignReport| {
        r.last().cloned().ok_or_else(|| {
            Error::Comparison(format!("report {} has no last-layer entry", r.model_id))
        })
    };
    let (bl, ol) = (last(baseline)?, last(ours)?);
    let ratio_row = |metric: &str, b: f64, o: f64| ComparisonRow {
        metric: metric.into(),
        baseline: b,
        ours: o,
        value: ratio(b, o).ok(),
    };
    let diff_row = |metric: &str, b: f64, o: f64| ComparisonRow {
        metric: metric.into(),
        baseline: b,
        ours: o,
        value: Some(o - b),
    };
    let mut rows = vec![
        ratio_row("reliability_last_layer", bl.mean_dloss, ol.mean_dloss),
        ratio_row("reliability_overall", baseline.overall.mean_dloss, ours.overall.mean_dloss),
        diff_row("mismatch_rate_last_layer", bl.mismatch_rate, ol.mismatch_rate),
        diff_row("mismatch_rate_overall", baseline.overall.mismatch_rate, ours.overall.mismatch_rate),
        diff_row("params", baseline.cost.params as f64, ours.cost.params as f64),
        diff_row("flops", baseline.cost.flops as f64, ours.cost.flops as f64),
    ];
    if let Some(((bc, ba), (oc, oa))) = evals {
        rows.push(diff_row("top2diff", bc, oc));
        rows.push(diff_row("top2diff_all", ba, oa));
    }
    Ok(rows)
}

fn cmd_report(ctx: &Ctx, mut cfg: Config, a: &ReportArgs) -> Result<Vec<PathBuf>> {
    set_opt(&mut cfg, "report", "baseline", &a.baseline.as_ref().map(|p| p.display()));
    set_opt(&mut cfg, "report", "ours", &a.ours.as_ref().map(|p| p.display()));
    set_opt(&mut cfg, "report", "baseline_eval", &a.baseline_eval.as_ref().map(|p| p.display()));
    set_opt(&mut cfg, "report", "ours_eval", &a.ours_eval.as_ref().map(|p| p.display()));
    cfg.set_default("run", "seed", 0);
    cfg.ensure_known(&[("run", &["seed"]), ("report", &["baseline", "ours", "baseline_eval", "ours_eval"])])?;
    let baseline: CampaignReport = read_json(Path::new(cfg.require("report", "baseline")?))?;
    let ours: CampaignReport = read_json(Path::new(cfg.require("report", "ours")?))?;
    let top2 = |key: &str| -> Result<Option<(f64, f64)>> {
        cfg.get("report", key)
            .map(|p| {
                let v: serde_json::Value = read_json(Path::new(p))?;
                let get = |k: &str| {
                    v[k].as_f64()
                        .ok_or_else(|| Error::Format(format!("{p}: missing `{k}`")))
                };
                Ok((get("mean_top2diff")?, get("mean_top2diff_all")?))
            })
            .transpose()
    };
    let evals = match (top2("baseline_eval")?, top2("ours_eval")?) {
        (Some(b), Some(o)) => Some((b, o)),
        (None, None) => None,
        _ => {
            return Err(Error::Comparison(
                "give evaluation files for both models or for neither".into(),
            ))
        }
    };
    let rows = compare_reports(&baseline, &ours, evals)?;

    let mut written = Vec::new();
    let hash = ctx.manifest("report_manifest.cfg", &cfg, &mut written)?;
    let doc = json!({
        "baseline": baseline.model_id,
        "ours": ours.model_id,
        "dataset": baseline.dataset,
        "n_per_layer": baseline.n_per_layer,
        "rows": rows,
        "config_hash": hash,
    });
    ctx.write("comparison.json", serde_json::to_string_pretty(&doc)? + "\n", &mut written)?;
    let mut csv = String::from("metric,baseline,ours,value\n");
    for r in &rows {
        let v = r.value.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{v}\n", r.metric, r.baseline, r.ours));
    }
    ctx.write("comparison.csv", csv, &mut written)?;
    Ok(written)
}

fn cmd_embed_gen(ctx: &Ctx, mut cfg: Config, a: &EmbedGenArgs) -> Result<Vec<PathBuf>> {
    set_opt(&mut cfg, "embed", "classes", &a.classes);
    set_opt(&mut cfg, "embed", "descriptions", &a.descriptions);
    set_opt(&mut cfg, "embed", "dim", &a.dim);
    set_opt(&mut cfg, "embed", "file", &a.file);
    cfg.set_default("embed", "classes", "mnist");
    cfg.set_default("embed", "descriptions", 4);
    cfg.set_default("embed", "dim", 256);
    cfg.set_default("embed", "file", "embeddings.flem");
    cfg.ensure_known(&[("run", &["seed"]), ("embed", &["classes", "descriptions", "dim", "file"])])?;
    let seed: u64 = cfg.parse_required("run", "seed")?;
    let names: Vec<String> = match cfg.require("embed", "classes")? {
        "mnist" => data::MNIST_CLASSES.iter().map(|s| s.to_string()).collect(),
        "cifar10" => data::CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        list => list.split(',').map(|s| s.trim().to_string()).collect(),
    };
    let table = synth_embeddings(
        &names,
        cfg.parse_required("embed", "descriptions")?,
        cfg.parse_required("embed", "dim")?,
        seed,
    )?;
    let mut written = Vec::new();
    ctx.manifest("embed_manifest.cfg", &cfg, &mut written)?;
    let path = ctx.out.join(cfg.require("embed", "file")?);
    save_embeddings(&table, &path)?;
    written.push(path);
    Ok(written)
}
