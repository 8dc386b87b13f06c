//! Grid of training runs over mechanism settings, each evaluated on the
//! configured evaluation set.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::evalmod::{detections_from_predictions, evaluate, ClassMode, EvalConfig, Scenario};
use crate::semantic::TemplateMode;
use crate::sfg::{Aggregation, SpatialMode};

use super::{predict_dataset, TrainConfig, Trainer};

/// Embedding entry meaning "no table".
pub const ONE_HOT: &str = "one-hot";

/// Empty lists keep the base configuration's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    /// Base training configuration, relative to the grid file.
    pub base: PathBuf,
    pub out: PathBuf,
    pub aggregation: Vec<Aggregation>,
    pub top_k: Vec<usize>,
    /// Embedding table paths, or `one-hot`.
    pub embeddings: Vec<String>,
    pub spatial_mode: Vec<SpatialMode>,
    pub semantic_mode: Vec<TemplateMode>,
    pub seeds: Vec<u64>,
    pub scenario: Scenario,
    pub class_mode: ClassMode,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            base: PathBuf::new(),
            out: PathBuf::from("ablation"),
            aggregation: Vec::new(),
            top_k: Vec::new(),
            embeddings: Vec::new(),
            spatial_mode: Vec::new(),
            semantic_mode: Vec::new(),
            seeds: Vec::new(),
            scenario: Scenario::Relaxed,
            class_mode: ClassMode::Action,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: usize,
    pub aggregation: Aggregation,
    pub top_k: usize,
    pub embeddings: String,
    pub spatial_mode: SpatialMode,
    pub semantic_mode: TemplateMode,
    pub seed: u64,
    pub map: f64,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub final_loss: f64,
}

fn kebab<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn or_base<T: Clone>(list: &[T], base: T) -> Vec<T> {
    if list.is_empty() {
        vec![base]
    } else {
        list.to_vec()
    }
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut grid: AblationGrid = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(dir) = path.parent() {
            for p in [&mut grid.base, &mut grid.out] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
            for e in &mut grid.embeddings {
                if e != ONE_HOT && Path::new(e).is_relative() {
                    *e = dir.join(&*e).to_string_lossy().into_owned();
                }
            }
        }
        Ok(grid)
    }

    /// All configurations of the grid in row-major order, skipping the
    /// parametric spatial branch with multiplicative aggregation.
    pub fn expand(&self, base: &TrainConfig) -> Vec<(TrainConfig, String)> {
        let base_emb = base
            .data
            .embeddings
            .as_ref()
            .map_or_else(|| ONE_HOT.to_string(), |p| p.to_string_lossy().into_owned());
        let mut out = Vec::new();
        for &agg in &or_base(&self.aggregation, base.model.aggregation) {
            for &k in &or_base(&self.top_k, base.model.top_k) {
                for emb in &or_base(&self.embeddings, base_emb.clone()) {
                    for &sp in &or_base(&self.spatial_mode, base.model.spatial_mode) {
                        for &sem in &or_base(&self.semantic_mode, base.model.semantic_mode) {
                            for &seed in &or_base(&self.seeds, base.seed) {
                                if sp == SpatialMode::Params && agg == Aggregation::Multiply {
                                    continue;
                                }
                                let mut cfg = base.clone();
                                cfg.model.aggregation = agg;
                                cfg.model.top_k = k;
                                cfg.model.spatial_mode = sp;
                                cfg.model.semantic_mode = sem;
                                cfg.seed = seed;
                                cfg.data.embeddings = (emb != ONE_HOT).then(|| PathBuf::from(emb));
                                out.push((cfg, emb.clone()));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Trains every grid configuration under `out/run_{i}` and writes
/// `results.csv` and `results.md` under `out`.
pub fn run_ablation(grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let base = TrainConfig::load(&grid.base, &[])?;
    let runs = grid.expand(&base);
    std::fs::create_dir_all(&grid.out).map_err(|e| Error::io(&grid.out, e))?;
    let train = Dataset::load(&base.data.train)?;
    let eval_set = match &base.data.eval {
        Some(p) => Dataset::load(p)?,
        None => train.clone(),
    };
    let mut rows = Vec::new();
    for (run, (cfg, emb)) in runs.into_iter().enumerate() {
        log::info!("ablation run {run}: {}", kebab(&cfg.model.aggregation));
        let assets = super::build_assets(&cfg, &train)?;
        let mut trainer = Trainer::new(cfg.clone(), train.clone(), assets)?;
        let summary = trainer.run(&grid.out.join(format!("run_{run}")))?;
        let sets = predict_dataset(&trainer.model, &trainer.assets, &eval_set, cfg.oracle_oa)?;
        let report = evaluate(
            &detections_from_predictions(&sets),
            &eval_set,
            &EvalConfig {
                scenario: grid.scenario,
                class_mode: grid.class_mode,
                train_pair_counts: Some(train.pair_counts()),
            },
        );
        rows.push(AblationRow {
            run,
            aggregation: cfg.model.aggregation,
            top_k: cfg.model.top_k,
            embeddings: emb,
            spatial_mode: cfg.model.spatial_mode,
            semantic_mode: cfg.model.semantic_mode,
            seed: cfg.seed,
            map: report.map,
            rare: report.rare,
            non_rare: report.non_rare,
            final_loss: summary.final_loss.map_or(f64::NAN, |l| l.total),
        });
    }
    write_results(&grid.out, &rows)?;
    Ok(rows)
}

fn write_results(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
    let mut csv = String::from("run,aggregation,top_k,embeddings,spatial_mode,semantic_mode,seed,map,rare,non_rare,final_loss\n");
    let mut md = String::from(
        "| run | aggregation | K | embeddings | spatial | semantic | seed | mAP | rare | non-rare |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let (agg, sp, sem) = (kebab(&r.aggregation), kebab(&r.spatial_mode), kebab(&r.semantic_mode));
        let _ = writeln!(
            csv,
            "{},{agg},{},{},{sp},{sem},{},{:.6},{},{},{:.6}",
            r.run,
            r.top_k,
            r.embeddings,
            r.seed,
            r.map,
            opt(r.rare),
            opt(r.non_rare),
            r.final_loss
        );
        let _ = writeln!(
            md,
            "| {} | {agg} | {} | {} | {sp} | {sem} | {} | {:.4} | {} | {} |",
            r.run,
            r.top_k,
            r.embeddings,
            r.seed,
            r.map,
            opt(r.rare),
            opt(r.non_rare)
        );
    }
    for (name, text) in [("results.csv", csv), ("results.md", md)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
