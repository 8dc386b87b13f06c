//! The detector: patch-embedding backbone, transformer encoder, query refiner
//! conditioned on support features, cross-attention decoder, and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ImageData, OaVocabulary};
use crate::error::{Error, Result};
use crate::heads::{HeadOutputs, PredictionHeads, PredictionSet};
use crate::nnkit::{
    mean_attention, positional_encoding, Ffn, Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore,
    Tensor, Var,
};
use crate::semantic::TemplateMode;
use crate::sfg::{
    oracle_candidates, select_topk, Aggregation, OaScorer, SpatialMode, SupportGenerator, SupportSpec,
};
use crate::spatial::{MapGeometry, RscStats, SampledPair, StatsMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub encoder_layers: usize,
    pub refiner_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub top_k: usize,
    pub ffn_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_objects: usize,
    pub num_actions: usize,
    pub num_pairs: usize,
    /// Width of the frozen semantic embeddings.
    pub embed_dim: usize,
    pub aggregation: Aggregation,
    pub semantic_mode: TemplateMode,
    pub spatial_mode: SpatialMode,
    pub stats_mode: StatsMode,
    pub map_size: usize,
    pub map_top_left: f64,
    pub decoder_self_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vocab = OaVocabulary::default_synthetic();
        Self {
            d: 32,
            encoder_layers: 2,
            refiner_layers: 2,
            decoder_layers: 2,
            heads: 4,
            num_queries: 10,
            top_k: 4,
            ffn_dim: 64,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            num_objects: vocab.num_objects(),
            num_actions: vocab.num_actions(),
            num_pairs: vocab.num_pairs(),
            embed_dim: vocab.num_pairs(),
            aggregation: Aggregation::Multiply,
            semantic_mode: TemplateMode::Oa,
            spatial_mode: SpatialMode::Map,
            stats_mode: StatsMode::Bivariate,
            map_size: 32,
            map_top_left: 0.25,
            decoder_self_attention: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.d % 4 != 0 {
            return fail(format!("d = {} must be divisible by 4", self.d));
        }
        if self.top_k > self.num_pairs {
            return fail(format!("K = {} exceeds the {} vocabulary pairs", self.top_k, self.num_pairs));
        }
        if self.num_queries == 0 || self.ffn_dim == 0 || self.embed_dim == 0 {
            return fail("num_queries, ffn_dim and embed_dim must be positive".into());
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_objects == 0 || self.num_actions == 0 || self.num_pairs == 0 {
            return fail("vocabulary sizes must be positive".into());
        }
        if self.spatial_mode == SpatialMode::Map && self.map_size < 13 {
            return fail(format!("map size {} is below the minimum of 13", self.map_size));
        }
        if !(0.0..1.0).contains(&self.map_top_left) {
            return fail(format!("map top-left {} must lie in [0, 1)", self.map_top_left));
        }
        Ok(())
    }

    /// Token grid side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn map_geometry(&self) -> MapGeometry {
        MapGeometry {
            size: self.map_size,
            top_left: self.map_top_left,
        }
    }

    /// Sets the vocabulary-dependent sizes.
    pub fn with_vocabulary(mut self, vocab: &OaVocabulary) -> Self {
        self.num_objects = vocab.num_objects();
        self.num_actions = vocab.num_actions();
        self.num_pairs = vocab.num_pairs();
        self
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct RefinerLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Option<(LayerNorm, MultiHeadAttention)>,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: Ffn,
}

/// Frozen per-vocabulary inputs: pair embeddings and layout statistics.
#[derive(Clone, Debug)]
pub struct ModelAssets {
    pub vocabulary: OaVocabulary,
    /// `N_s x embed_dim`.
    pub embeddings: Tensor,
    pub stats: RscStats,
}

/// Where the support candidates come from.
#[derive(Clone, Copy, Debug)]
pub enum OaSource<'a> {
    /// Top-K of the predicted image-level scores.
    Predicted,
    /// Ground-truth pairs, padded with predicted ones.
    Oracle(&'a [usize]),
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub heads: HeadOutputs,
    pub oa_logits: Var,
    pub embeddings: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub selected: Vec<usize>,
    pub samples: Vec<Option<SampledPair>>,
    /// Token grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// Head-averaged last decoder layer cross-attention, `N_q x H*W`.
    pub decoder_attention: Option<Tensor>,
    /// Head-averaged last refiner layer cross-attention, `N_q x K`.
    pub refiner_attention: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct HoiModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    patch_embed: Linear,
    encoder: Vec<EncoderLayer>,
    oa_scorer: OaScorer,
    support: SupportGenerator,
    queries: ParamId,
    refiner: Vec<RefinerLayer>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    heads: PredictionHeads,
    pos: Tensor,
}

/// Parameter-name prefix of the backbone (it may get its own learning rate).
pub const BACKBONE_PREFIX: &str = "backbone.";

impl HoiModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut p = ParamStore::new();
        let ffn = |p: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| Ffn::new(p, name, &[c.d, c.ffn_dim, c.d], rng);
        let patch_embed = Linear::new(&mut p, "backbone.patch", c.patch_dim(), c.d, rng);
        let encoder = (0..c.encoder_layers)
            .map(|i| {
                let n = format!("encoder.{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(&mut p, &format!("{n}.ln_attn"), c.d),
                    attn: MultiHeadAttention::new(&mut p, &format!("{n}.attn"), c.d, c.heads, rng),
                    ln_ffn: LayerNorm::new(&mut p, &format!("{n}.ln_ffn"), c.d),
                    ffn: ffn(&mut p, &format!("{n}.ffn"), rng),
                }
            })
            .collect();
        let oa_scorer = OaScorer::new(&mut p, "oa_scorer", c.d, c.num_pairs, rng);
        let support = SupportGenerator::new(
            &mut p,
            "support",
            &SupportSpec {
                embed_dim: c.embed_dim,
                d: c.d,
                aggregation: c.aggregation,
                spatial: c.spatial_mode,
                stats_mode: c.stats_mode,
                geometry: c.map_geometry(),
            },
            rng,
        );
        let queries = p.insert_uniform("queries", 1, c.num_queries, c.d, rng);
        let refiner = (0..c.refiner_layers)
            .map(|i| {
                let n = format!("refiner.{i}");
                RefinerLayer {
                    ln_self: LayerNorm::new(&mut p, &format!("{n}.ln_self"), c.d),
                    self_attn: MultiHeadAttention::new(&mut p, &format!("{n}.self_attn"), c.d, c.heads, rng),
                    ln_cross: LayerNorm::new(&mut p, &format!("{n}.ln_cross"), c.d),
                    cross_attn: MultiHeadAttention::new(&mut p, &format!("{n}.cross_attn"), c.d, c.heads, rng),
                    ln_ffn: LayerNorm::new(&mut p, &format!("{n}.ln_ffn"), c.d),
                    ffn: ffn(&mut p, &format!("{n}.ffn"), rng),
                }
            })
            .collect();
        let decoder = (0..c.decoder_layers)
            .map(|i| {
                let n = format!("decoder.{i}");
                DecoderLayer {
                    self_attn: c.decoder_self_attention.then(|| {
                        (
                            LayerNorm::new(&mut p, &format!("{n}.ln_self"), c.d),
                            MultiHeadAttention::new(&mut p, &format!("{n}.self_attn"), c.d, c.heads, rng),
                        )
                    }),
                    ln_cross: LayerNorm::new(&mut p, &format!("{n}.ln_cross"), c.d),
                    cross_attn: MultiHeadAttention::new(&mut p, &format!("{n}.cross_attn"), c.d, c.heads, rng),
                    ln_ffn: LayerNorm::new(&mut p, &format!("{n}.ln_ffn"), c.d),
                    ffn: ffn(&mut p, &format!("{n}.ffn"), rng),
                }
            })
            .collect();
        let decoder_norm = LayerNorm::new(&mut p, "decoder.norm", c.d);
        let heads = PredictionHeads::new(&mut p, "heads", c.d, c.num_objects, c.num_actions, rng);
        let pos = positional_encoding(c.grid(), c.grid(), c.d);
        Ok(Self {
            config,
            params: p,
            patch_embed,
            encoder,
            oa_scorer,
            support,
            queries,
            refiner,
            decoder,
            decoder_norm,
            heads,
            pos,
        })
    }

    /// Rebuilds a model around stored parameters.
    pub fn with_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model
            .params
            .assign_from(params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not fit the configuration: {e}")))?;
        Ok(model)
    }

    pub fn queries_param(&self) -> ParamId {
        self.queries
    }

    /// Flattens non-overlapping patches into `H*W x patch_dim` rows in
    /// row-major token order, pixel values scaled to [0, 1].
    pub fn patchify(&self, image: &ImageData) -> Result<Tensor> {
        let c = &self.config;
        if image.width != c.image_size || image.height != c.image_size || image.channels != c.channels {
            return Err(Error::Image(format!(
                "image is {}x{}x{}, the model expects {}x{}x{}",
                image.width, image.height, image.channels, c.image_size, c.image_size, c.channels
            )));
        }
        let (p, grid) = (c.patch_size, c.grid());
        let mut data = Vec::with_capacity(grid * grid * c.patch_dim());
        for gy in 0..grid {
            for gx in 0..grid {
                for dy in 0..p {
                    for dx in 0..p {
                        let px = image.pixel(gx * p + dx, gy * p + dy);
                        data.extend(px.iter().map(|&v| v as f64 / 255.0));
                    }
                }
            }
        }
        Ok(Tensor::new(grid * grid, c.patch_dim(), data))
    }

    pub fn backbone(&self, g: &mut Graph, patches: &Tensor) -> Var {
        let x = g.constant(patches.clone());
        self.patch_embed.forward(g, x)
    }

    pub fn encode(&self, g: &mut Graph, features: Var) -> Var {
        let pos = g.constant(self.pos.clone());
        let mut x = features;
        for layer in &self.encoder {
            let h = layer.ln_attn.forward(g, x);
            let qk = g.add(h, pos);
            let a = layer.attn.forward(g, qk, qk, h);
            x = g.add(x, a.output);
            let h = layer.ln_ffn.forward(g, x);
            let f = layer.ffn.forward(g, h);
            x = g.add(x, f);
        }
        x
    }

    /// Refined queries plus the last layer's head-averaged cross-attention.
    /// `support = None` (K = 0) leaves only self-attention and FFN.
    pub fn refine_queries(&self, g: &mut Graph, support: Option<Var>) -> (Var, Option<Tensor>) {
        let mut q = g.param(self.queries);
        let mut attention = None;
        for layer in &self.refiner {
            let h = layer.ln_self.forward(g, q);
            let a = layer.self_attn.forward(g, h, h, h);
            q = g.add(q, a.output);
            if let Some(s) = support {
                let h = layer.ln_cross.forward(g, q);
                let a = layer.cross_attn.forward(g, h, s, s);
                attention = Some(mean_attention(g, &a.weights));
                q = g.add(q, a.output);
            }
            let h = layer.ln_ffn.forward(g, q);
            let f = layer.ffn.forward(g, h);
            q = g.add(q, f);
        }
        (q, attention)
    }

    /// Output embeddings plus the last layer's head-averaged cross-attention.
    /// The positional encoding is added to both keys and values, so the
    /// attended content carries location.
    pub fn decode(&self, g: &mut Graph, encoded: Var, refined: Var) -> (Var, Option<Tensor>) {
        let pos = g.constant(self.pos.clone());
        let memory = g.add(encoded, pos);
        let mut t = refined;
        let mut attention = None;
        for layer in &self.decoder {
            if let Some((ln, attn)) = &layer.self_attn {
                let h = ln.forward(g, t);
                let a = attn.forward(g, h, h, h);
                t = g.add(t, a.output);
            }
            let h = layer.ln_cross.forward(g, t);
            let a = layer.cross_attn.forward(g, h, memory, memory);
            attention = Some(mean_attention(g, &a.weights));
            t = g.add(t, a.output);
            let h = layer.ln_ffn.forward(g, t);
            let f = layer.ffn.forward(g, h);
            t = g.add(t, f);
        }
        (self.decoder_norm.forward(g, t), attention)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        image: &ImageData,
        assets: &ModelAssets,
        oa: OaSource<'_>,
        spatial_seed: u64,
    ) -> Result<(ForwardVars, ForwardTrace)> {
        let patches = self.patchify(image)?;
        let features = self.backbone(g, &patches);
        let encoded = self.encode(g, features);
        let oa_logits = self.oa_scorer.logits(g, encoded);
        let k = self.config.top_k;
        let scores: Vec<f64> = g.value(oa_logits).data().to_vec();
        let selected = match oa {
            OaSource::Predicted => select_topk(&scores, k),
            OaSource::Oracle(gt) => oracle_candidates(gt, &scores, k),
        };
        let (support, samples) = if k == 0 {
            (None, Vec::new())
        } else {
            let (s, samples) = self.support.build(g, &selected, &assets.embeddings, &assets.stats, spatial_seed);
            (Some(s), samples)
        };
        let (refined, refiner_attention) = self.refine_queries(g, support);
        let (embeddings, decoder_attention) = self.decode(g, encoded, refined);
        let heads = self.heads.forward(g, embeddings);
        let grid = self.config.grid();
        Ok((
            ForwardVars {
                heads,
                oa_logits,
                embeddings,
            },
            ForwardTrace {
                selected,
                samples,
                grid: (grid, grid),
                decoder_attention,
                refiner_attention,
            },
        ))
    }

    /// Inference on one image with the evaluation spatial seed (the image id).
    pub fn predict(
        &self,
        image_id: u64,
        image: &ImageData,
        assets: &ModelAssets,
        oa: OaSource<'_>,
    ) -> Result<(PredictionSet, ForwardTrace)> {
        let mut g = Graph::new(&self.params);
        let (vars, trace) = self.forward(&mut g, image, assets, oa, image_id)?;
        Ok((PredictionSet::from_graph(&g, image_id, &vars.heads, vars.oa_logits), trace))
    }

    pub fn validate_assets(&self, assets: &ModelAssets) -> Result<()> {
        let c = &self.config;
        if assets.embeddings.shape() != (c.num_pairs, c.embed_dim) {
            return Err(Error::Config(format!(
                "embeddings are {:?}, the model expects {}x{}",
                assets.embeddings.shape(),
                c.num_pairs,
                c.embed_dim
            )));
        }
        if assets.stats.pairs.len() != c.num_pairs {
            return Err(Error::Config("layout statistics do not cover the vocabulary".into()));
        }
        if c.spatial_mode == SpatialMode::Params && assets.stats.mode != c.stats_mode {
            return Err(Error::Config("statistics mode differs from the model's parameter mode".into()));
        }
        Ok(())
    }
}
