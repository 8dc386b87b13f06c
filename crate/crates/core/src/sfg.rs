//! Support feature generation: image-level pair scoring, top-K selection, and
//! aggregation of semantic and spatial features into the `K x d` support
//! matrix consumed by the query refiner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nnkit::{Ffn, Graph, Linear, ParamStore, Tensor, Var};
use crate::semantic::SemanticProjector;
use crate::spatial::{
    rasterize, sample_pair, MapGeometry, RscStats, SampledPair, SpatialMapEncoder, SpatialParamEncoder, StatsMode,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Elementwise product; the spatial feature gates the semantic one.
    #[default]
    Multiply,
    /// Concatenation followed by a projection back to the model width.
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialMode {
    /// Sampled box pair rasterized to a binary map and convolved.
    #[default]
    Map,
    /// Distribution parameters fed through a linear layer.
    Params,
}

/// Three-layer FFN over the mean-pooled encoder output. Returns logits
/// (`1 x N_s`); the scores are their sigmoid.
#[derive(Clone, Debug)]
pub struct OaScorer {
    pub ffn: Ffn,
}

impl OaScorer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, num_pairs: usize, rng: &mut R) -> Self {
        Self {
            ffn: Ffn::new(store, name, &[d, d, d, num_pairs], rng),
        }
    }

    pub fn logits(&self, g: &mut Graph, encoded: Var) -> Var {
        assert!(g.value(encoded).rows() > 0, "encoded features are empty");
        let pooled = g.mean_rows(encoded);
        self.ffn.forward(g, pooled)
    }

    pub fn score(&self, g: &mut Graph, encoded: Var) -> Var {
        let logits = self.logits(g, encoded);
        g.sigmoid(logits)
    }
}

/// Indices of the `k` largest scores, ordered by descending score with ties
/// going to the lower index.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    assert!(k <= scores.len(), "K = {k} exceeds {} candidates", scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Ground-truth pairs first (ascending, at most `k`), then the best-scoring
/// remaining pairs until `k` candidates are chosen.
pub fn oracle_candidates(gt_pairs: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(k);
    let mut gt = gt_pairs.to_vec();
    gt.sort_unstable();
    gt.dedup();
    out.extend(gt.into_iter().take(k));
    for p in select_topk(scores, scores.len()) {
        if out.len() == k {
            break;
        }
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Deterministic per-pair seed, so the same `(base, pair)` always yields the
/// same sampled configuration.
pub fn pair_seed(base: u64, pair: usize) -> u64 {
    mix64(base ^ mix64(pair as u64 ^ 0x5EED_0F_5A_7A1u64))
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines support rows. Concatenation requires `proj` (`2d -> d`).
pub fn aggregate(g: &mut Graph, f_sem: Var, f_spa: Var, mode: Aggregation, proj: Option<&Linear>) -> Var {
    match mode {
        Aggregation::Multiply => g.mul(f_sem, f_spa),
        Aggregation::Concat => {
            let joined = g.concat_cols(&[f_sem, f_spa]);
            proj.expect("concat aggregation needs a projection").forward(g, joined)
        }
    }
}

#[derive(Clone, Debug)]
pub enum SpatialBranch {
    Map(SpatialMapEncoder),
    Params(SpatialParamEncoder),
}

/// Support rows as values, for inspection outside a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportFeatures {
    pub features: Tensor,
    pub pairs: Vec<usize>,
    /// Sampled boxes per candidate; `None` in parameter mode.
    pub samples: Vec<Option<SampledPair>>,
}

#[derive(Clone, Debug)]
pub struct SupportGenerator {
    pub semantic: SemanticProjector,
    pub spatial: SpatialBranch,
    pub aggregation: Aggregation,
    pub agg_proj: Option<Linear>,
    pub geometry: MapGeometry,
}

pub struct SupportSpec {
    pub embed_dim: usize,
    pub d: usize,
    pub aggregation: Aggregation,
    pub spatial: SpatialMode,
    pub stats_mode: StatsMode,
    pub geometry: MapGeometry,
}

impl SupportGenerator {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, spec: &SupportSpec, rng: &mut R) -> Self {
        let semantic = SemanticProjector::new(store, &format!("{name}.semantic"), spec.embed_dim, spec.d, rng);
        let spatial = match spec.spatial {
            SpatialMode::Map => SpatialBranch::Map(SpatialMapEncoder::new(
                store,
                &format!("{name}.spatial"),
                spec.geometry.size,
                spec.d,
                rng,
            )),
            SpatialMode::Params => SpatialBranch::Params(SpatialParamEncoder::new(
                store,
                &format!("{name}.spatial"),
                spec.stats_mode,
                spec.d,
                rng,
            )),
        };
        let aggregation = match spec.spatial {
            SpatialMode::Params => Aggregation::Concat,
            SpatialMode::Map => spec.aggregation,
        };
        let agg_proj = (aggregation == Aggregation::Concat)
            .then(|| Linear::new(store, &format!("{name}.aggregate"), 2 * spec.d, spec.d, rng));
        Self {
            semantic,
            spatial,
            aggregation,
            agg_proj,
            geometry: spec.geometry,
        }
    }

    /// Support matrix (`pairs.len() x d`) for the given pairs. `embeddings`
    /// holds one provider row per vocabulary pair; spatial samples for pair
    /// `p` are drawn from `pair_seed(seed, p)`.
    pub fn build(
        &self,
        g: &mut Graph,
        pairs: &[usize],
        embeddings: &Tensor,
        stats: &RscStats,
        seed: u64,
    ) -> (Var, Vec<Option<SampledPair>>) {
        assert!(!pairs.is_empty(), "support needs at least one pair");
        let raw = Tensor::from_rows(&pairs.iter().map(|&p| embeddings.row(p).to_vec()).collect::<Vec<_>>());
        let f_sem = self.semantic.forward(g, &raw);
        let mut rows = Vec::with_capacity(pairs.len());
        let mut samples = Vec::with_capacity(pairs.len());
        for &p in pairs {
            let (row, sample) = match &self.spatial {
                SpatialBranch::Map(enc) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, p));
                    let s = sample_pair(stats, p, &mut rng, self.geometry);
                    let map = rasterize(&s.human, s.object.as_ref(), self.geometry.size);
                    (enc.forward(g, &map), Some(s))
                }
                SpatialBranch::Params(enc) => (enc.forward(g, stats.resolve(p)), None),
            };
            rows.push(row);
            samples.push(sample);
        }
        let f_spa = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
        (aggregate(g, f_sem, f_spa, self.aggregation, self.agg_proj.as_ref()), samples)
    }

    pub fn build_values(
        &self,
        params: &ParamStore,
        pairs: &[usize],
        embeddings: &Tensor,
        stats: &RscStats,
        seed: u64,
    ) -> SupportFeatures {
        let mut g = Graph::new(params);
        let (v, samples) = self.build(&mut g, pairs, embeddings, stats, seed);
        SupportFeatures {
            features: g.value(v).clone(),
            pairs: pairs.to_vec(),
            samples,
        }
    }
}
