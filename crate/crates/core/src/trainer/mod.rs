//! Training loop, checkpoints, evaluation of trained models, attention dumps
//! and ablation grids.

mod ablation;
mod attention;
pub mod config;
pub mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationGrid, AblationRow};
pub use attention::{dump_attention, AttentionDump};
pub use config::{DataConfig, TrainConfig};
pub use optim::AdamW;

use crate::datamodel::{gt_oa_targets, Dataset, ImageAnnotation, OaVocabulary};
use crate::error::{Error, Result};
use crate::evalmod::{detections_from_predictions, evaluate, EvalConfig, EvalReport};
use crate::heads::PredictionSet;
use crate::matchloss::{compute_loss, merge_targets, GtTarget, LossBreakdown, LossOptions};
use crate::model::{HoiModel, ModelAssets, ModelConfig, OaSource, BACKBONE_PREFIX};
use crate::nnkit::{Checkpoint, Gradients, Graph, ParamStore, Tensor};
use crate::semantic::{EmbeddingTable, SemanticProvider};
use crate::sfg::mix64;
use crate::spatial::{fit_stats, RscStats};

const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";
const EMBEDDINGS: &str = "asset.embeddings";

/// Frozen inputs for a training configuration: statistics from file or
/// fitted on the training set, embeddings from a table or one-hot.
pub fn build_assets(cfg: &TrainConfig, train: &Dataset) -> Result<ModelAssets> {
    let vocab = train.vocabulary.clone();
    let stats = match &cfg.data.stats {
        Some(p) => RscStats::load(p, &vocab)?,
        None => fit_stats(train, cfg.model.stats_mode)?,
    };
    let provider = match &cfg.data.embeddings {
        Some(p) => SemanticProvider::Table(EmbeddingTable::load(p, &vocab)?),
        None => SemanticProvider::one_hot(),
    };
    let embeddings = provider.materialize(&vocab, cfg.model.semantic_mode)?.to_matrix(&vocab)?;
    Ok(ModelAssets {
        vocabulary: vocab,
        embeddings,
        stats,
    })
}

/// Model configuration with the data-dependent sizes filled in.
pub fn resolved_model_config(cfg: &ModelConfig, assets: &ModelAssets) -> ModelConfig {
    let mut m = cfg.clone().with_vocabulary(&assets.vocabulary);
    m.embed_dim = assets.embeddings.cols();
    m
}

/// Seed for the spatial samples of `image_id` at `step`.
pub fn spatial_seed(cfg: &TrainConfig, step: usize, image_id: u64) -> u64 {
    if cfg.resample_spatial {
        mix64(cfg.seed ^ mix64(step as u64 ^ mix64(image_id.wrapping_mul(0x2545_F491_4F6C_DD1D))))
    } else {
        image_id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        grad_norm: f64,
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        step: usize,
        loss: LossBreakdown,
        #[serde(skip_serializing_if = "Option::is_none")]
        train_map: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: Option<LossBreakdown>,
    pub final_train_map: Option<f64>,
    pub best_train_map: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: HoiModel,
    pub assets: ModelAssets,
    pub train: Dataset,
    pub optimizer: AdamW,
    /// Optimizer steps taken.
    pub step: usize,
    targets: Vec<Vec<GtTarget>>,
    oa_targets: Vec<Vec<f64>>,
    gt_pairs: Vec<Vec<usize>>,
    lr_scale: Vec<f64>,
}

impl Trainer {
    /// Loads data and assets named in the configuration and initializes a
    /// fresh model.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let train = Dataset::load(&config.data.train)?;
        let assets = build_assets(&config, &train)?;
        Self::new(config, train, assets)
    }

    pub fn new(mut config: TrainConfig, train: Dataset, assets: ModelAssets) -> Result<Self> {
        config.validate()?;
        if train.images.is_empty() {
            return Err(Error::Config("the training set has no images".into()));
        }
        config.model = resolved_model_config(&config.model, &assets);
        let model = HoiModel::new(config.model.clone(), config.seed)?;
        model.validate_assets(&assets)?;
        let max_gt = train.images.iter().map(|i| merge_targets(&i.hois).len()).max().unwrap_or(0);
        if max_gt > config.model.num_queries {
            return Err(Error::Config(format!(
                "an image has {max_gt} ground-truth pairs but the model has {} queries",
                config.model.num_queries
            )));
        }
        let optimizer = AdamW::new(&model.params, config.weight_decay);
        let lr_scale = model
            .params
            .iter()
            .map(|(_, name, _)| if name.starts_with(BACKBONE_PREFIX) { config.backbone_lr_mult } else { 1.0 })
            .collect();
        let targets = train.images.iter().map(|i| merge_targets(&i.hois)).collect();
        let oa_targets = train.images.iter().map(|i| gt_oa_targets(i, &train.vocabulary)).collect();
        let gt_pairs = train
            .images
            .iter()
            .map(|i| i.hois.iter().filter_map(|h| train.vocabulary.pair_index(h.pair())).collect())
            .collect();
        Ok(Self {
            config,
            model,
            assets,
            train,
            optimizer,
            step: 0,
            targets,
            oa_targets,
            gt_pairs,
            lr_scale,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.images.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.config.epochs * self.steps_per_epoch();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let drop_at = (self.config.lr_drop_fraction * self.total_steps() as f64).floor() as usize;
        if step >= drop_at && self.config.lr_drop_fraction < 1.0 {
            self.config.lr * self.config.lr_drop_factor
        } else {
            self.config.lr
        }
    }

    /// Image indices of the batch used at `step`.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let mut order: Vec<usize> = (0..self.train.images.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(self.config.seed ^ mix64(epoch as u64 + 1))));
        let start = (step % spe) * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(order.len())].to_vec()
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            null_box_training: self.config.null_box_training,
            null_objectness: self.config.null_objectness,
        }
    }

    /// Loss and gradients of one image at the given step.
    pub fn image_gradients(&self, index: usize, step: usize) -> Result<(LossBreakdown, Gradients)> {
        let ann = &self.train.images[index];
        let mut g = Graph::new(&self.model.params);
        let oa = if self.config.oracle_oa {
            OaSource::Oracle(&self.gt_pairs[index])
        } else {
            OaSource::Predicted
        };
        let seed = spatial_seed(&self.config, step, ann.id);
        let (vars, _) = self.model.forward(&mut g, &ann.image, &self.assets, oa, seed)?;
        let (loss, breakdown, _) = compute_loss(
            &mut g,
            ann.id,
            &vars.heads,
            vars.oa_logits,
            &self.targets[index],
            &self.oa_targets[index],
            &self.config.loss,
            self.loss_options(),
        );
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at step {step} on image {}", ann.id)));
        }
        Ok((breakdown, g.backward(loss)))
    }

    /// One optimizer step over the next batch. Returns the batch-mean loss
    /// and the gradient norm before clipping.
    pub fn train_step(&mut self) -> Result<(LossBreakdown, f64)> {
        let step = self.step;
        let batch = self.batch_indices(step);
        let mut grads = Gradients::zeros_like(&self.model.params);
        let mut total = LossBreakdown::default();
        for &i in &batch {
            let (b, g) = self.image_gradients(i, step)?;
            grads.accumulate(&g);
            total.add(&b);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        total.scale(inv);
        let norm = optim::clip_global_norm(&mut grads, self.config.grad_clip);
        let lr = self.lr_at(step);
        let lrs: Vec<f64> = self.lr_scale.iter().map(|s| s * lr).collect();
        self.optimizer.step(&mut self.model.params, &grads, &lrs);
        self.step += 1;
        Ok((total, norm))
    }

    pub fn predict_all(&self, dataset: &Dataset) -> Result<Vec<PredictionSet>> {
        predict_dataset(&self.model, &self.assets, dataset, self.config.oracle_oa)
    }

    pub fn evaluate_train(&self) -> Result<EvalReport> {
        let sets = self.predict_all(&self.train)?;
        Ok(evaluate(
            &detections_from_predictions(&sets),
            &self.train,
            &EvalConfig {
                scenario: self.config.eval_scenario,
                class_mode: self.config.eval_class_mode,
                train_pair_counts: Some(self.train.pair_counts()),
            },
        ))
    }

    /// Runs the remaining steps, writing `metrics.jsonl`, `final.ckpt` and
    /// `best.ckpt` under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainSummary> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("metrics.jsonl");
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(self.step > 0)
            .write(true)
            .truncate(self.step == 0)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut write = |r: &LogRecord| -> Result<()> {
            let line = serde_json::to_string(r).expect("log record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
        };
        let total = self.total_steps();
        let spe = self.steps_per_epoch();
        let mut best: Option<(f64, f64)> = None;
        let mut summary = TrainSummary {
            steps: self.step,
            epochs: 0,
            final_loss: None,
            final_train_map: None,
            best_train_map: None,
        };
        if total == 0 {
            self.save_checkpoint(&out_dir.join("final.ckpt"))?;
            self.save_checkpoint(&out_dir.join("best.ckpt"))?;
            return Ok(summary);
        }
        let mut epoch_loss = LossBreakdown::default();
        let mut epoch_steps = 0usize;
        while self.step < total {
            let step = self.step;
            let epoch = step / spe;
            let (loss, grad_norm) = self.train_step()?;
            write(&LogRecord::Step {
                step,
                epoch,
                lr: self.lr_at(step),
                grad_norm,
                loss,
            })?;
            epoch_loss.add(&loss);
            epoch_steps += 1;
            let epoch_done = self.step % spe == 0 || self.step == total;
            if epoch_done {
                let finished = epoch + 1;
                let last = self.step == total;
                let do_eval = last || (self.config.eval_every > 0 && finished % self.config.eval_every == 0);
                let train_map = if do_eval { Some(self.evaluate_train()?.map) } else { None };
                epoch_loss.scale(1.0 / epoch_steps as f64);
                write(&LogRecord::Epoch {
                    epoch,
                    step: self.step,
                    loss: epoch_loss,
                    train_map,
                })?;
                // Best by training mAP where measured, else by mean loss.
                let key = (train_map.unwrap_or(f64::NEG_INFINITY), -epoch_loss.total);
                if do_eval && best.is_none_or(|b| key > b) {
                    best = Some(key);
                    self.save_checkpoint(&out_dir.join("best.ckpt"))?;
                }
                summary.epochs = finished;
                summary.final_loss = Some(epoch_loss);
                if let Some(m) = train_map {
                    summary.final_train_map = Some(m);
                    summary.best_train_map = Some(summary.best_train_map.map_or(m, |b: f64| b.max(m)));
                }
                epoch_loss = LossBreakdown::default();
                epoch_steps = 0;
            }
        }
        summary.steps = self.step;
        self.save_checkpoint(&out_dir.join("final.ckpt"))?;
        Ok(summary)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.model.params.clone();
        for (i, (_, name, _)) in self.model.params.iter().enumerate() {
            params.insert(format!("{OPTIM_M}{name}"), self.optimizer.m[i].clone());
            params.insert(format!("{OPTIM_V}{name}"), self.optimizer.v[i].clone());
        }
        params.insert(EMBEDDINGS, self.assets.embeddings.clone());
        let vocab = &self.assets.vocabulary;
        let stats: serde_json::Value =
            serde_json::from_str(&self.assets.stats.to_json(vocab)).expect("stats JSON parses");
        let metadata = serde_json::json!({
            "model": self.config.model,
            "train": self.config,
            "vocabulary": vocab,
            "stats": stats,
            "step": self.step,
            "optimizer_t": self.optimizer.t,
            "train_pair_counts": self.train.pair_counts(),
        });
        Checkpoint { params, metadata }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Restores model, optimizer state and step counter from a checkpoint
    /// written by [`Trainer::save_checkpoint`].
    pub fn resume(checkpoint: &Checkpoint, train: Dataset) -> Result<Self> {
        let loaded = LoadedModel::from_checkpoint(checkpoint)?;
        let config: TrainConfig = serde_json::from_value(checkpoint.metadata["train"].clone())
            .map_err(|e| Error::Checkpoint(format!("training config: {e}")))?;
        let mut trainer = Self::new(config, train, loaded.assets)?;
        trainer.model.params = loaded.model.params;
        for (i, (_, name, _)) in trainer.model.params.iter().enumerate() {
            let get = |prefix: &str| {
                checkpoint
                    .params
                    .id(&format!("{prefix}{name}"))
                    .map(|id| checkpoint.params.get(id).clone())
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))
            };
            trainer.optimizer.m[i] = get(OPTIM_M)?;
            trainer.optimizer.v[i] = get(OPTIM_V)?;
        }
        trainer.optimizer.t = checkpoint.metadata["optimizer_t"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
        trainer.step = checkpoint.metadata["step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing step".into()))? as usize;
        Ok(trainer)
    }
}

/// A model restored for inference.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: HoiModel,
    pub assets: ModelAssets,
    /// Pair counts of the training set, when recorded.
    pub train_pair_counts: Option<Vec<usize>>,
    pub train_config: Option<TrainConfig>,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        let bad = |what: &str, e: String| Error::Checkpoint(format!("{what}: {e}"));
        let config: ModelConfig = serde_json::from_value(meta["model"].clone()).map_err(|e| bad("model config", e.to_string()))?;
        let vocabulary: OaVocabulary =
            serde_json::from_value(meta["vocabulary"].clone()).map_err(|e| bad("vocabulary", e.to_string()))?;
        let stats = RscStats::from_json(&meta["stats"].to_string(), &vocabulary).map_err(|e| bad("stats", e.to_string()))?;
        let embeddings = ck
            .params
            .id(EMBEDDINGS)
            .map(|id| ck.params.get(id).clone())
            .ok_or_else(|| Error::Checkpoint("missing embeddings".into()))?;
        let mut model_params = ParamStore::new();
        for (_, name, t) in ck.params.iter() {
            if !name.starts_with("optim.") && !name.starts_with("asset.") {
                model_params.insert(name, t.clone());
            }
        }
        let model = HoiModel::with_params(config, &model_params)?;
        let assets = ModelAssets {
            vocabulary,
            embeddings,
            stats,
        };
        model.validate_assets(&assets)?;
        Ok(Self {
            model,
            assets,
            train_pair_counts: serde_json::from_value(meta["train_pair_counts"].clone()).ok(),
            train_config: serde_json::from_value(meta["train"].clone()).ok(),
        })
    }

    /// Whether the model was trained with ground-truth support pairs.
    pub fn oracle_oa(&self) -> bool {
        self.train_config.as_ref().is_some_and(|c| c.oracle_oa)
    }
}

/// Ground-truth pair indices of an image.
pub fn image_gt_pairs(ann: &ImageAnnotation, vocab: &OaVocabulary) -> Vec<usize> {
    ann.hois.iter().filter_map(|h| vocab.pair_index(h.pair())).collect()
}

/// Predictions for every image; oracle mode feeds ground-truth pairs.
pub fn predict_dataset(model: &HoiModel, assets: &ModelAssets, dataset: &Dataset, oracle: bool) -> Result<Vec<PredictionSet>> {
    if dataset.vocabulary != assets.vocabulary {
        return Err(Error::Config("dataset vocabulary differs from the model's".into()));
    }
    dataset
        .images
        .iter()
        .map(|ann| {
            let gt = image_gt_pairs(ann, &assets.vocabulary);
            let oa = if oracle { OaSource::Oracle(&gt) } else { OaSource::Predicted };
            model.predict(ann.id, &ann.image, assets, oa).map(|p| p.0)
        })
        .collect()
}

/// Embedding matrix of a provider for all pairs.
pub fn embedding_matrix(provider: &SemanticProvider, vocab: &OaVocabulary, mode: crate::semantic::TemplateMode) -> Result<Tensor> {
    provider.materialize(vocab, mode)?.to_matrix(vocab)
}

/// Reads the step records of a metrics log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{synth_dataset, SynthOptions};
    use crate::spatial::default_layout_stats;

    fn micro(n_images: usize, seed: u64) -> (TrainConfig, Dataset) {
        let vocab = OaVocabulary::default_synthetic();
        let opts = SynthOptions {
            image_size: 16,
            max_instances: 2,
            min_side_px: 2,
        };
        let ds = synth_dataset(seed, n_images, &vocab, &default_layout_stats(&vocab), &opts);
        let mut cfg = TrainConfig {
            batch_size: 2,
            backbone_lr_mult: 1.0,
            lr_drop_fraction: 1.0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        cfg.model = ModelConfig {
            d: 8,
            encoder_layers: 1,
            refiner_layers: 1,
            decoder_layers: 1,
            heads: 2,
            num_queries: 3,
            top_k: 2,
            ffn_dim: 16,
            image_size: 16,
            map_size: 13,
            ..ModelConfig::default()
        };
        (cfg, ds)
    }

    fn trainer(cfg: TrainConfig, ds: Dataset) -> Trainer {
        let assets = build_assets(&cfg, &ds).unwrap();
        Trainer::new(cfg, ds, assets).unwrap()
    }

    #[test]
    fn single_image_loss_halves_in_200_steps() {
        let (mut cfg, ds) = micro(1, 3);
        cfg.batch_size = 1;
        cfg.epochs = 200;
        let mut t = trainer(cfg, ds);
        let first = t.train_step().unwrap().0.total;
        let mut last = first;
        while t.step < 200 {
            last = t.train_step().unwrap().0.total;
        }
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn resumed_run_continues_with_identical_loss() {
        let (mut cfg, ds) = micro(4, 5);
        cfg.epochs = 10;
        let mut t = trainer(cfg, ds.clone());
        for _ in 0..3 {
            t.train_step().unwrap();
        }
        let ck = Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap();
        let mut resumed = Trainer::resume(&ck, ds).unwrap();
        assert_eq!(resumed.step, 3);
        let a = t.train_step().unwrap();
        let b = resumed.train_step().unwrap();
        assert_eq!(a.0.total.to_bits(), b.0.total.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
        for ((_, _, x), (_, _, y)) in t.model.params.iter().zip(resumed.model.params.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn zero_epoch_run_writes_the_initial_checkpoint() {
        let (mut cfg, ds) = micro(2, 1);
        cfg.epochs = 0;
        let mut t = trainer(cfg, ds);
        let dir = tempfile::tempdir().unwrap();
        let summary = t.run(dir.path()).unwrap();
        assert_eq!(summary.steps, 0);
        for name in ["final.ckpt", "best.ckpt"] {
            let loaded = LoadedModel::load(&dir.path().join(name)).unwrap();
            for ((_, n, x), (_, m, y)) in t.model.params.iter().zip(loaded.model.params.iter()) {
                assert_eq!((n, x), (m, y));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions_exactly() {
        let (mut cfg, ds) = micro(3, 2);
        cfg.epochs = 1;
        let mut t = trainer(cfg, ds.clone());
        let dir = tempfile::tempdir().unwrap();
        t.run(dir.path()).unwrap();
        let log = read_log(&dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(log.iter().filter(|r| matches!(r, LogRecord::Step { .. })).count(), 2);
        assert!(matches!(log.last(), Some(LogRecord::Epoch { train_map: Some(_), .. })));
        let loaded = LoadedModel::load(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(loaded.train_pair_counts, Some(ds.pair_counts()));
        let a = predict_dataset(&t.model, &t.assets, &ds, false).unwrap();
        let b = predict_dataset(&loaded.model, &loaded.assets, &ds, loaded.oracle_oa()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn learning_rate_drops_once() {
        let (mut cfg, ds) = micro(8, 4);
        cfg.epochs = 25;
        cfg.lr_drop_fraction = 0.43;
        let t = trainer(cfg, ds);
        assert_eq!(t.total_steps(), 100);
        assert_eq!(t.lr_at(42), 1e-3);
        assert!((t.lr_at(43) - 1e-4).abs() < 1e-18);
        assert!((t.lr_at(99) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn each_epoch_visits_every_image_once() {
        let (mut cfg, ds) = micro(7, 4);
        cfg.batch_size = 3;
        let t = trainer(cfg, ds);
        assert_eq!(t.steps_per_epoch(), 3);
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(epoch * 3 + s)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
        assert_ne!(t.batch_indices(0), t.batch_indices(3));
    }

    #[test]
    fn too_many_instances_for_the_queries_is_rejected() {
        let (mut cfg, ds) = micro(20, 9);
        cfg.model.num_queries = 1;
        let assets = build_assets(&cfg, &ds).unwrap();
        assert!(matches!(Trainer::new(cfg, ds, assets), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_queries_give_flat_attention() {
        let (cfg, ds) = micro(1, 6);
        let mut t = trainer(cfg, ds);
        let dir = tempfile::tempdir().unwrap();
        let dump = dump_attention(&t.model, &t.assets, &t.train.images[0], false, dir.path()).unwrap();
        let hw = 16;
        assert_eq!(dump.decoder.shape(), (3, hw));
        assert!(dump.decoder.data().iter().any(|v| (v - 1.0 / hw as f64).abs() > 1e-6));
        for suffix in ["weight", "bias"] {
            let id = t.model.params.id(&format!("decoder.0.cross_attn.q.{suffix}")).unwrap();
            t.model.params.get_mut(id).data_mut().fill(0.0);
        }
        let flat = dump_attention(&t.model, &t.assets, &t.train.images[0], false, dir.path()).unwrap();
        assert!(flat.decoder.data().iter().all(|v| (v - 1.0 / hw as f64).abs() < 1e-12));
        assert_eq!(flat.query_grid(2).len(), 4);
        let csv = std::fs::read_to_string(dir.path().join("query_0.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(dir.path().join("query_2.png").exists());
        let refiner = std::fs::read_to_string(dir.path().join("refiner.csv")).unwrap();
        assert_eq!(refiner.lines().count(), 4);
    }
}
