//! Subcommands of the `visrep` binary, callable in-process.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::{compound_scale, ArchSpec, ScalingCoefficients};
use crate::config::{seed_from_env, sub_seed, RunConfig};
use crate::data::synthetic::{generate, write_corpus, SynthConfig};
use crate::data::{decode_image, load_manifest, resize_bilinear, Dataset};
use crate::error::{config_err, Error, Result};
use crate::model::ModelGraph;
use crate::probe::{attention_heatmaps, export_heatmap_overlay, Axis, Block};
use crate::retrieval::{
    epoch_callback, load_retrieval_dataset, summary_table, write_reports, RecallReport, RetrievalDataset, DEFAULT_KS,
};
use crate::tensor::{write_tensor, Tensor};
use crate::train::{train, Regime, TrainLog};

#[derive(Debug, Parser)]
#[command(name = "visrep", version, about = "Train and evaluate desk-scale visual representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Recall@K of a checkpoint on retrieval manifests.
    Evaluate(EvaluateArgs),
    /// Embeddings for every row of a training manifest.
    Embed(EmbedArgs),
    /// Compound-scale an architecture spec.
    Scale(ScaleArgs),
    /// Export attention heatmaps for one image.
    Probe(ProbeArgs),
    /// Write the synthetic corpus and a starter run config.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Retrieval manifest; repeat for several.
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    #[arg(long = "k", value_delimiter = ',', default_values_t = DEFAULT_KS)]
    pub ks: Vec<usize>,
    /// Also write the reports as JSON lines.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// VRT1 matrix; listing ids go to `<out>.ids`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// TOML file holding the base architecture.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub beta: f64,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long)]
    pub n: f64,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// `last` or a block index.
    #[arg(long, default_value = "last")]
    pub block: Block,
    #[arg(long, value_enum, default_value = "query")]
    pub axis: AxisArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum AxisArg {
    Query,
    Key,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().listings)]
    pub listings: usize,
    #[arg(long, default_value_t = SynthConfig::default().image_size)]
    pub image_size: usize,
}

/// Everything a training run produced.
#[derive(Debug)]
pub struct TrainArtifacts {
    pub model: ModelGraph,
    pub log: TrainLog,
    /// Reports after the final epoch.
    pub reports: Vec<RecallReport>,
    pub output_dir: PathBuf,
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const RECALL_REPORTS: &str = "recall.jsonl";

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Training datasets and retrieval sets named by a config.
pub fn load_run_data(cfg: &RunConfig) -> Result<(Vec<Dataset>, Vec<RetrievalDataset>)> {
    let (mut datasets, mut retrieval) = match &cfg.data.synthetic {
        Some(s) => {
            let corpus = generate(s);
            let retrieval = if cfg.eval.synthetic_retrieval { corpus.retrieval } else { Vec::new() };
            (corpus.datasets, retrieval)
        }
        None => {
            let ds =
                cfg.data.manifests.iter().map(|p| Dataset::load(&load_manifest(p)?)).collect::<Result<Vec<_>>>()?;
            (ds, Vec::new())
        }
    };
    if !cfg.data.select.is_empty() {
        for name in &cfg.data.select {
            if !datasets.iter().any(|d| &d.name == name) {
                return Err(config_err!("data.select names unknown dataset {name:?}"));
            }
        }
        datasets.retain(|d| cfg.data.select.contains(&d.name));
    }
    for p in &cfg.eval.retrieval {
        retrieval.push(load_retrieval_dataset(p)?);
    }
    Ok((datasets, retrieval))
}

/// Builds the model a config describes, heads included.
pub fn build_model(cfg: &RunConfig, datasets: &[Dataset]) -> Result<ModelGraph> {
    let mut model = ModelGraph::build(&cfg.model.arch, sub_seed(cfg.seed, "init"))?;
    model.normalize = cfg.model.normalize;
    model.pooling = cfg.model.pooling;
    model.attach_embedding_head(cfg.model.embedding_dim, cfg.model.head_style)?;
    if cfg.train.regime != Regime::Triplet {
        let mut tasks: Vec<(String, usize)> = Vec::new();
        for d in datasets {
            match tasks.iter().find(|(t, _)| t == &d.task_name) {
                Some((_, n)) if *n != d.num_classes => {
                    return Err(config_err!(
                        "task {:?} declared with {} and {} classes",
                        d.task_name,
                        n,
                        d.num_classes
                    ));
                }
                Some(_) => {}
                None => tasks.push((d.task_name.clone(), d.num_classes)),
            }
        }
        model.attach_classification_heads(&tasks)?;
    }
    Ok(model)
}

/// Resolves nothing: `cfg` must already be resolved. Writes the config
/// snapshot before any compute, then the checkpoint, log and reports.
pub fn run_training(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let out = &cfg.output_dir;
    mkdir(out)?;
    let snap = out.join(RESOLVED_CONFIG);
    fs::write(&snap, cfg.to_toml()).map_err(|e| Error::io(&snap, e))?;

    let (datasets, retrieval) = load_run_data(cfg)?;
    let mut model = build_model(cfg, &datasets)?;
    let ks = cfg.eval.ks.clone();
    let mut hook = |_epoch: usize, m: &ModelGraph| epoch_callback(m, &retrieval, &ks);
    let log = train(&mut model, &datasets, &cfg.train, &mut hook)?;
    let reports = log.epochs.last().map(|e| e.retrieval.clone()).unwrap_or_default();

    model.save(out.join(CHECKPOINT_DIR))?;
    log.write(out.join(TRAIN_LOG))?;
    write_reports(&reports, out.join(RECALL_REPORTS))?;
    Ok(TrainArtifacts { model, log, reports, output_dir: out.clone() })
}

pub fn cmd_train(args: &TrainArgs) -> Result<String> {
    let cfg = RunConfig::load(&args.config)?.resolve(seed_from_env()?)?;
    let a = run_training(&cfg)?;
    let mut s = format!("{} steps, outputs in {}\n", a.log.steps.len(), a.output_dir.display());
    if let Some(last) = a.log.steps.last() {
        s += &format!("final loss {:.5}\n", last.loss);
    }
    s += &summary_table(&a.reports);
    Ok(s)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<String> {
    if args.datasets.is_empty() {
        return Err(config_err!("evaluate needs at least one --dataset"));
    }
    if args.ks.is_empty() || args.ks.contains(&0) {
        return Err(config_err!("K values must be positive"));
    }
    let model: ModelGraph = ModelGraph::load(&args.checkpoint)?;
    let datasets = args.datasets.iter().map(load_retrieval_dataset).collect::<Result<Vec<_>>>()?;
    let reports = epoch_callback(&model, &datasets, &args.ks)?;
    if let Some(out) = &args.out {
        write_reports(&reports, out)?;
    }
    Ok(summary_table(&reports))
}

pub fn ids_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn cmd_embed(args: &EmbedArgs) -> Result<String> {
    let model: ModelGraph = ModelGraph::load(&args.checkpoint)?;
    let ds = Dataset::load(&load_manifest(&args.manifest)?)?;
    let (h, w) = model.spec.input_size;
    let imgs: Vec<Tensor> = ds.examples.iter().map(|e| resize_bilinear(&e.image, h, w)).collect();
    let emb = model.embed_batch(&Tensor::stack(&imgs)?)?;
    write_tensor(&emb, &args.out)?;
    let ids: String = ds.examples.iter().map(|e| format!("{}\n", e.listing_id)).collect();
    let sidecar = ids_path(&args.out);
    fs::write(&sidecar, ids).map_err(|e| Error::io(&sidecar, e))?;
    Ok(format!("{} × {} embeddings written to {}\n", emb.shape()[0], emb.shape()[1], args.out.display()))
}

pub fn cmd_scale(args: &ScaleArgs) -> Result<String> {
    let text = fs::read_to_string(&args.spec).map_err(|e| Error::io(&args.spec, e))?;
    let base: ArchSpec = toml::from_str(&text).map_err(|e| config_err!("{}: {e}", args.spec.display()))?;
    let c = ScalingCoefficients { alpha: args.alpha, beta: args.beta, gamma: args.gamma, n: args.n };
    let scaled = compound_scale(&base, &c)?;
    let body = toml::to_string(&scaled).map_err(|e| config_err!("{e}"))?;
    Ok(format!("{body}# parameters: {}\n", scaled.param_count()))
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<String> {
    let model: ModelGraph = ModelGraph::load(&args.checkpoint)?;
    let image = decode_image(&args.image)?;
    let axis = match args.axis {
        AxisArg::Query => Axis::Query,
        AxisArg::Key => Axis::Key,
    };
    let bundle = attention_heatmaps(&model, &image, args.block, axis)?;
    let paths = export_heatmap_overlay(&image, &bundle, &args.out)?;
    Ok(format!(
        "{} heads of {}×{} from block {}; {} files in {}\n",
        bundle.heads(),
        bundle.side,
        bundle.side,
        bundle.layer,
        paths.len(),
        args.out.display()
    ))
}

/// A small multitask run over a written corpus; a starting point for edits.
pub fn starter_config(manifests: Vec<PathBuf>, retrieval: Vec<PathBuf>, image_size: usize) -> RunConfig {
    use crate::model::HeadStyle;
    use crate::train::{Preset, TrainPlan};
    let mut train = TrainPlan::preset(Preset::MtEfficientnetB0);
    train.epochs = 4;
    train.batch_size = 32;
    train.eval_batch_size = 64;
    train.base_lr = 3e-3;
    train.augment.output = (image_size, image_size);
    RunConfig {
        seed: 0,
        output_dir: PathBuf::from("run"),
        model: crate::config::ModelConfig {
            arch: ArchSpec::convnet(image_size, vec![1, 1, 1], vec![16, 32, 64]),
            embedding_dim: 32,
            head_style: HeadStyle::ConvPool,
            pooling: Default::default(),
            normalize: true,
        },
        train,
        data: crate::config::DataConfig { manifests, ..Default::default() },
        eval: crate::config::EvalConfig { retrieval, ..Default::default() },
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<String> {
    let cfg =
        SynthConfig { seed: args.seed, listings: args.listings, image_size: args.image_size, ..Default::default() };
    let corpus = generate(&cfg);
    mkdir(&args.out)?;
    let files = write_corpus(&corpus, &args.out)?;
    let rel = |p: &PathBuf| p.strip_prefix(&args.out).map(Path::to_path_buf).unwrap_or_else(|_| p.clone());
    let run = starter_config(
        files.manifests.iter().map(rel).collect(),
        files.retrieval.iter().map(rel).collect(),
        cfg.image_size,
    );
    let run_path = args.out.join("run.toml");
    fs::write(&run_path, run.to_toml()).map_err(|e| Error::io(&run_path, e))?;
    Ok(format!(
        "{} training manifests, {} retrieval manifests and {} in {}\n",
        files.manifests.len(),
        files.retrieval.len(),
        run_path.display(),
        args.out.display()
    ))
}

/// Runs one parsed command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Scale(a) => cmd_scale(a),
        Command::Probe(a) => cmd_probe(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}
