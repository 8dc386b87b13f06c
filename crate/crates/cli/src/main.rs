use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hoi_core::datamodel::{synth_dataset, Dataset, OaVocabulary, SynthOptions};
use hoi_core::evalmod::{detections_from_predictions, evaluate, ClassMode, EvalConfig, Scenario};
use hoi_core::heads::write_predictions;
use hoi_core::semantic::{EmbeddingTable, RemoteConfig, RemoteEncoder, SemanticProvider, TemplateMode};
use hoi_core::spatial::{default_layout_stats, fit_stats, RscStats, StatsMode};
use hoi_core::trainer::config::{env_overrides, parse_assignment};
use hoi_core::trainer::{dump_attention, predict_dataset, run_ablation, AblationGrid, LoadedModel, TrainConfig, Trainer};
use hoi_core::Error;

#[derive(Parser, Debug)]
#[command(name = "hoi", version, about = "Human-object interaction detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Fit per-pair layout statistics on a dataset.
    FitStats(FitStatsArgs),
    /// Write an embedding table for every pair of a vocabulary.
    Embed(EmbedArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Dump decoder and refiner attention for one image.
    DumpAttn(DumpArgs),
    /// Train and evaluate a grid of configurations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_images: usize,
    /// Annotation file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 3)]
    max_instances: usize,
    /// Layout statistics to draw scenes from (built-in layouts otherwise).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Store images as PNG files under this subdirectory instead of inline.
    #[arg(long)]
    png_dir: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Bivariate,
    Multivariate,
}

impl From<ModeArg> for StatsMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bivariate => StatsMode::Bivariate,
            ModeArg::Multivariate => StatsMode::Multivariate,
        }
    }
}

#[derive(Args, Debug)]
struct FitStatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "bivariate")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProviderArg {
    OneHot,
    Table,
    Remote,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TemplateArg {
    Oa,
    ActionOnly,
}

impl From<TemplateArg> for TemplateMode {
    fn from(m: TemplateArg) -> Self {
        match m {
            TemplateArg::Oa => TemplateMode::Oa,
            TemplateArg::ActionOnly => TemplateMode::ActionOnly,
        }
    }
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long, value_enum)]
    provider: ProviderArg,
    /// Input table for the table provider.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Text-encoder service URL for the remote provider.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, value_enum, default_value = "oa")]
    mode: TemplateArg,
    /// Dataset whose vocabulary is embedded (built-in vocabulary otherwise).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    #[arg(long, default_value_t = 64)]
    max_batch: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Generates one optional `--model-*` flag per model field and the matching
/// override.
macro_rules! model_flags {
    ($($flag:ident => $field:ident : $ty:ty),* $(,)?) => {
        #[derive(Args, Debug, Default)]
        struct ModelFlags {
            $(
                #[arg(long)]
                $flag: Option<$ty>,
            )*
        }

        impl ModelFlags {
            fn overrides(&self) -> Vec<(String, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$flag {
                        out.push((concat!("model.", stringify!($field)).to_string(), v.literal()));
                    }
                )*
                out
            }
        }
    };
}

model_flags!(
    model_d => d: usize,
    model_encoder_layers => encoder_layers: usize,
    model_refiner_layers => refiner_layers: usize,
    model_decoder_layers => decoder_layers: usize,
    model_heads => heads: usize,
    model_num_queries => num_queries: usize,
    model_top_k => top_k: usize,
    model_ffn_dim => ffn_dim: usize,
    model_patch_size => patch_size: usize,
    model_image_size => image_size: usize,
    model_channels => channels: usize,
    model_num_objects => num_objects: usize,
    model_num_actions => num_actions: usize,
    model_num_pairs => num_pairs: usize,
    model_embed_dim => embed_dim: usize,
    model_aggregation => aggregation: String,
    model_semantic_mode => semantic_mode: String,
    model_spatial_mode => spatial_mode: String,
    model_stats_mode => stats_mode: String,
    model_map_size => map_size: usize,
    model_map_top_left => map_top_left: f64,
    model_decoder_self_attention => decoder_self_attention: bool,
);

/// Flag value as a TOML literal; strings are quoted.
trait TomlLiteral {
    fn literal(&self) -> String;
}

macro_rules! plain_literal {
    ($($t:ty),*) => { $(impl TomlLiteral for $t { fn literal(&self) -> String { self.to_string() } })* };
}
plain_literal!(usize, f64, bool);

impl TomlLiteral for String {
    fn literal(&self) -> String {
        format!("{self:?}")
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Any configuration key, e.g. `--set loss.giou=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassModeArg {
    Action,
    Pair,
}

impl From<ClassModeArg> for ClassMode {
    fn from(m: ClassModeArg) -> Self {
        match m {
            ClassModeArg::Action => ClassMode::Action,
            ClassModeArg::Pair => ClassMode::Pair,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = ["1", "2"], default_value = "2")]
    scenario: String,
    #[arg(long, value_enum, default_value = "action")]
    class_mode: ClassModeArg,
    /// JSON report; a CSV with the same stem is written next to it.
    #[arg(long)]
    report: PathBuf,
    /// Feed ground-truth pairs to the support generator (defaults to the
    /// training mode recorded in the checkpoint).
    #[arg(long)]
    oracle_oa: Option<bool>,
    /// Also write the raw per-query predictions.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image_id: u64,
    /// Dataset holding the image (the checkpoint's training set otherwise).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    grid: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn run(command: Command) -> hoi_core::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::FitStats(a) => {
            let ds = Dataset::load(&a.data)?;
            let stats = fit_stats(&ds, a.mode.into())?;
            write(&a.out, &stats.to_json(&ds.vocabulary))
        }
        Command::Embed(a) => embed(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::DumpAttn(a) => dump(a),
        Command::Ablate(a) => {
            let rows = run_ablation(&AblationGrid::load(&a.grid)?)?;
            println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> hoi_core::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> hoi_core::Result<()> {
    let vocab = OaVocabulary::default_synthetic();
    let layout = match &a.stats {
        Some(p) => RscStats::load(p, &vocab)?,
        None => default_layout_stats(&vocab),
    };
    let opts = SynthOptions {
        image_size: a.image_size,
        max_instances: a.max_instances,
        ..SynthOptions::default()
    };
    let mut ds = synth_dataset(a.seed, a.n_images, &vocab, &layout, &opts);
    if let Some(dir) = &a.png_dir {
        ds = ds.with_png_images(dir);
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ds.save(&a.out)?;
    log::info!("wrote {} images to {}", ds.images.len(), a.out.display());
    Ok(())
}

fn embed(a: EmbedArgs) -> hoi_core::Result<()> {
    let vocab = match &a.data {
        Some(p) => Dataset::load(p)?.vocabulary,
        None => OaVocabulary::default_synthetic(),
    };
    let provider = match a.provider {
        ProviderArg::OneHot => SemanticProvider::one_hot(),
        ProviderArg::Table => {
            let path = a.table.ok_or_else(|| Error::Config("--table is required for the table provider".into()))?;
            SemanticProvider::Table(EmbeddingTable::load(&path, &vocab)?)
        }
        ProviderArg::Remote => {
            let endpoint =
                a.endpoint.ok_or_else(|| Error::Config("--endpoint is required for the remote provider".into()))?;
            SemanticProvider::Remote(RemoteEncoder::new(RemoteConfig {
                endpoint,
                timeout_secs: a.timeout,
                max_batch: a.max_batch,
                dim: None,
            }))
        }
    };
    let table = provider.materialize(&vocab, a.mode.into())?;
    write(&a.out, &table.to_json(&vocab))
}

fn train(a: TrainArgs) -> hoi_core::Result<()> {
    let mut overrides = env_overrides(std::env::vars());
    for s in &a.set {
        overrides.push(parse_assignment(s)?);
    }
    if let Some(v) = a.seed {
        overrides.push(("seed".into(), v.to_string()));
    }
    if let Some(v) = a.epochs {
        overrides.push(("epochs".into(), v.to_string()));
    }
    if let Some(v) = a.max_steps {
        overrides.push(("max_steps".into(), v.to_string()));
    }
    overrides.extend(a.model.overrides());
    let config = TrainConfig::load(&a.config, &overrides)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = hoi_core::nnkit::Checkpoint::load(p)?;
            Trainer::resume(&ck, Dataset::load(&config.data.train)?)?
        }
        None => Trainer::from_config(config)?,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write(&a.out.join("config.toml"), &trainer.config.to_toml())?;
    let summary = trainer.run(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn eval(a: EvalArgs) -> hoi_core::Result<()> {
    let loaded = LoadedModel::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let oracle = a.oracle_oa.unwrap_or_else(|| loaded.oracle_oa());
    let sets = predict_dataset(&loaded.model, &loaded.assets, &data, oracle)?;
    if let Some(p) = &a.predictions {
        write_predictions(p, &sets)?;
    }
    let scenario = a
        .scenario
        .parse()
        .ok()
        .and_then(Scenario::from_number)
        .expect("restricted by clap");
    let report = evaluate(
        &detections_from_predictions(&sets),
        &data,
        &EvalConfig {
            scenario,
            class_mode: a.class_mode.into(),
            train_pair_counts: loaded.train_pair_counts.clone(),
        },
    );
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    report.save(&a.report)?;
    println!("mAP {:.4}", report.map);
    Ok(())
}

fn dump(a: DumpArgs) -> hoi_core::Result<()> {
    let loaded = LoadedModel::load(&a.checkpoint)?;
    let data_path = match a.data {
        Some(p) => p,
        None => loaded
            .train_config
            .as_ref()
            .map(|c| c.data.train.clone())
            .ok_or_else(|| Error::Config("--data is required: the checkpoint records no training set".into()))?,
    };
    let data = Dataset::load(&data_path)?;
    let ann = data
        .images
        .iter()
        .find(|i| i.id == a.image_id)
        .ok_or_else(|| Error::Config(format!("no image with id {} in {}", a.image_id, data_path.display())))?;
    let dump = dump_attention(&loaded.model, &loaded.assets, ann, loaded.oracle_oa(), &a.out)?;
    println!(
        "wrote {} query grids of {}x{} to {}",
        dump.decoder.rows(),
        dump.grid.0,
        dump.grid.1,
        a.out.display()
    );
    Ok(())
}
