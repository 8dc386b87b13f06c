//! Spatial branch of the support features: Gaussian statistics of relative
//! spatial configurations per object-action pair, box-pair sampling, binary
//! spatial maps, and their learned embeddings.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, OaVocabulary};
use crate::error::{Error, Result};
use crate::geometry::{apply_rsc, rsc, Box, Rsc};
use crate::nnkit::{Conv2d, Graph, Linear, ParamStore, Tensor, Var};

/// Ridge added to every fitted covariance diagonal.
pub const COV_RIDGE: f64 = 1e-4;

/// Mean and row-major covariance of a multivariate Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.len() != n * n {
            return Err(Error::Stats(format!("covariance of a {n}-d Gaussian needs {} entries", n * n)));
        }
        Ok(Self { mean, cov })
    }

    /// Isotropic Gaussian with the given per-axis standard deviation.
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let n = mean.len();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            cov[i * n + i] = std * std;
        }
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_at(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.dim() + j]
    }

    /// Maximum-likelihood (divide-by-N) fit plus `ridge * I`.
    pub fn fit_mle(samples: &[Vec<f64>], ridge: f64) -> Self {
        assert!(!samples.is_empty(), "cannot fit a Gaussian to zero samples");
        let n = samples[0].len();
        let count = samples.len() as f64;
        let mut mean = vec![0.0; n];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut cov = vec![0.0; n * n];
        for s in samples {
            for i in 0..n {
                for j in 0..n {
                    cov[i * n + j] += (s[i] - mean[i]) * (s[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= count);
        for i in 0..n {
            cov[i * n + i] += ridge;
        }
        Self { mean, cov }
    }

    /// Lower Cholesky factor. Non-positive pivots (semi-definite input)
    /// zero their column instead of failing.
    pub fn cholesky_lower(&self) -> Vec<f64> {
        let n = self.dim();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = self.cov_at(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d <= 0.0 {
                continue;
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = self.cov_at(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        l
    }

    /// Strict definiteness check by Cholesky factorization.
    pub fn is_positive_definite(&self) -> bool {
        let n = self.dim();
        let symmetric = (0..n).all(|i| (0..n).all(|j| self.cov_at(i, j) == self.cov_at(j, i)));
        if !symmetric {
            return false;
        }
        let l = self.cholesky_lower();
        let rebuilt_ok = (0..n).all(|i| l[i * n + i] > 0.0);
        rebuilt_ok
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.dim();
        let l = self.cholesky_lower();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        (0..n)
            .map(|i| self.mean[i] + (0..=i).map(|k| l[i * n + k] * z[k]).sum::<f64>())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsMode {
    /// One Gaussian over `(dx, dy)` and an independent one over `(dw, dh)`.
    Bivariate,
    /// One joint Gaussian over `(dx, dy, dw, dh)`.
    Multivariate,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    Bivariate { xy: GaussianParams, wh: GaussianParams },
    Multivariate { xywh: GaussianParams },
}

impl Layout {
    pub fn mean(&self) -> Rsc {
        match self {
            Layout::Bivariate { xy, wh } => Rsc::from_array([xy.mean[0], xy.mean[1], wh.mean[0], wh.mean[1]]),
            Layout::Multivariate { xywh } => Rsc::from_array([xywh.mean[0], xywh.mean[1], xywh.mean[2], xywh.mean[3]]),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Rsc {
        match self {
            Layout::Bivariate { xy, wh } => {
                let a = xy.sample(rng);
                let b = wh.sample(rng);
                Rsc::from_array([a[0], a[1], b[0], b[1]])
            }
            Layout::Multivariate { xywh } => {
                let v = xywh.sample(rng);
                Rsc::from_array([v[0], v[1], v[2], v[3]])
            }
        }
    }

    fn gaussians(&self) -> Vec<&GaussianParams> {
        match self {
            Layout::Bivariate { xy, wh } => vec![xy, wh],
            Layout::Multivariate { xywh } => vec![xywh],
        }
    }

    fn fit(samples: &[Rsc], mode: StatsMode) -> Self {
        match mode {
            StatsMode::Bivariate => Layout::Bivariate {
                xy: GaussianParams::fit_mle(&samples.iter().map(|r| vec![r.dx, r.dy]).collect::<Vec<_>>(), COV_RIDGE),
                wh: GaussianParams::fit_mle(&samples.iter().map(|r| vec![r.dw, r.dh]).collect::<Vec<_>>(), COV_RIDGE),
            },
            StatsMode::Multivariate => Layout::Multivariate {
                xywh: GaussianParams::fit_mle(
                    &samples.iter().map(|r| r.to_array().to_vec()).collect::<Vec<_>>(),
                    COV_RIDGE,
                ),
            },
        }
    }
}

/// Statistics for one object-action pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairStats {
    /// `None` for pairs without an object.
    pub layout: Option<Layout>,
    /// Gaussian over the human box `(w, h)`.
    pub person: GaussianParams,
    /// Set when too few samples were available and global statistics were used.
    pub fallback: bool,
}

impl PairStats {
    pub fn sample_rsc<R: Rng>(&self, rng: &mut R) -> Option<Rsc> {
        self.layout.as_ref().map(|l| l.sample(rng))
    }

    /// Flat parameter vector used as a spatial feature.
    ///
    /// Bivariate (15): object means (4), variances (4), `cov(dx,dy)`,
    /// `cov(dw,dh)`, person means (2), variances (2), covariance.
    /// Multivariate (19): means (4), variances (4), the six pairwise
    /// covariances, then the same five person entries.
    /// Object entries are zero for pairs without an object.
    pub fn param_features(&self, mode: StatsMode) -> Vec<f64> {
        let mut out = Vec::with_capacity(param_feature_len(mode));
        match (&self.layout, mode) {
            (Some(Layout::Bivariate { xy, wh }), StatsMode::Bivariate) => {
                out.extend_from_slice(&xy.mean);
                out.extend_from_slice(&wh.mean);
                out.extend([xy.cov_at(0, 0), xy.cov_at(1, 1), wh.cov_at(0, 0), wh.cov_at(1, 1)]);
                out.extend([xy.cov_at(0, 1), wh.cov_at(0, 1)]);
            }
            (Some(Layout::Multivariate { xywh }), StatsMode::Multivariate) => {
                out.extend_from_slice(&xywh.mean);
                out.extend((0..4).map(|i| xywh.cov_at(i, i)));
                for i in 0..4 {
                    for j in i + 1..4 {
                        out.push(xywh.cov_at(i, j));
                    }
                }
            }
            (None, _) => out.resize(param_feature_len(mode) - 5, 0.0),
            _ => panic!("layout does not match statistics mode {mode:?}"),
        }
        let p = &self.person;
        out.extend_from_slice(&p.mean);
        out.extend([p.cov_at(0, 0), p.cov_at(1, 1), p.cov_at(0, 1)]);
        out
    }

    fn gaussians(&self) -> Vec<&GaussianParams> {
        let mut g = self.layout.as_ref().map(Layout::gaussians).unwrap_or_default();
        g.push(&self.person);
        g
    }
}

pub fn param_feature_len(mode: StatsMode) -> usize {
    match mode {
        StatsMode::Bivariate => 15,
        StatsMode::Multivariate => 19,
    }
}

/// Fitted statistics for every vocabulary pair plus global fallbacks.
#[derive(Clone, Debug, PartialEq)]
pub struct RscStats {
    pub mode: StatsMode,
    pub pairs: Vec<PairStats>,
    pub fallback: PairStats,
}

#[derive(Serialize, Deserialize)]
struct PairStatsJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xy: Option<GaussianParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wh: Option<GaussianParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xywh: Option<GaussianParams>,
    person: GaussianParams,
    #[serde(default)]
    fallback: bool,
}

#[derive(Serialize, Deserialize)]
struct StatsJson {
    mode: StatsMode,
    pairs: BTreeMap<String, PairStatsJson>,
    fallback: PairStatsJson,
}

impl PairStatsJson {
    fn from_stats(s: &PairStats) -> Self {
        let (mut xy, mut wh, mut xywh) = (None, None, None);
        match &s.layout {
            Some(Layout::Bivariate { xy: a, wh: b }) => {
                xy = Some(a.clone());
                wh = Some(b.clone());
            }
            Some(Layout::Multivariate { xywh: a }) => xywh = Some(a.clone()),
            None => {}
        }
        Self {
            xy,
            wh,
            xywh,
            person: s.person.clone(),
            fallback: s.fallback,
        }
    }

    fn into_stats(self, mode: StatsMode, key: &str) -> Result<PairStats> {
        let layout = match (mode, self.xy, self.wh, self.xywh) {
            (_, None, None, None) => None,
            (StatsMode::Bivariate, Some(xy), Some(wh), None) => Some(Layout::Bivariate { xy, wh }),
            (StatsMode::Multivariate, None, None, Some(xywh)) => Some(Layout::Multivariate { xywh }),
            _ => return Err(Error::Stats(format!("entry `{key}` does not match mode {mode:?}"))),
        };
        let dims_ok = match &layout {
            Some(Layout::Bivariate { xy, wh }) => xy.dim() == 2 && wh.dim() == 2,
            Some(Layout::Multivariate { xywh }) => xywh.dim() == 4,
            None => true,
        };
        let all_sized = [&self.person]
            .into_iter()
            .chain(layout.as_ref().map(Layout::gaussians).unwrap_or_default())
            .all(|g| g.cov.len() == g.dim() * g.dim());
        if !dims_ok || self.person.dim() != 2 || !all_sized {
            return Err(Error::Stats(format!("entry `{key}` has wrong dimensions")));
        }
        Ok(PairStats {
            layout,
            person: self.person,
            fallback: self.fallback,
        })
    }
}

impl RscStats {
    pub fn resolve(&self, pair: usize) -> &PairStats {
        &self.pairs[pair]
    }

    pub fn to_json(&self, vocab: &OaVocabulary) -> String {
        let file = StatsJson {
            mode: self.mode,
            pairs: self
                .pairs
                .iter()
                .enumerate()
                .map(|(i, s)| (vocab.pair_key(i), PairStatsJson::from_stats(s)))
                .collect(),
            fallback: PairStatsJson::from_stats(&self.fallback),
        };
        serde_json::to_string_pretty(&file).expect("stats serialize")
    }

    /// Parses a statistics file. Pairs missing from the file resolve to the
    /// global fallback.
    pub fn from_json(text: &str, vocab: &OaVocabulary) -> Result<Self> {
        let file: StatsJson = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mode = file.mode;
        let fallback = file.fallback.into_stats(mode, "fallback")?;
        if fallback.layout.is_none() {
            return Err(Error::Stats("fallback entry needs layout statistics".into()));
        }
        let mut pairs: Vec<Option<PairStats>> = vec![None; vocab.num_pairs()];
        for (key, entry) in file.pairs {
            let idx = vocab.pair_from_key(&key)?;
            let stats = entry.into_stats(mode, &key)?;
            if stats.layout.is_some() != vocab.pair(idx).object.is_some() {
                return Err(Error::Stats(format!("entry `{key}` layout does not match its pair")));
            }
            pairs[idx] = Some(stats);
        }
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.unwrap_or_else(|| fallback_for(&fallback, vocab.pair(i).object.is_some())))
            .collect();
        Ok(Self { mode, pairs, fallback })
    }

    pub fn load(path: &std::path::Path, vocab: &OaVocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, vocab)
    }

    pub fn all_positive_definite(&self) -> bool {
        self.pairs
            .iter()
            .chain(std::iter::once(&self.fallback))
            .flat_map(PairStats::gaussians)
            .all(GaussianParams::is_positive_definite)
    }
}

fn fallback_for(global: &PairStats, has_object: bool) -> PairStats {
    PairStats {
        layout: if has_object { global.layout.clone() } else { None },
        person: global.person.clone(),
        fallback: true,
    }
}

/// Per-pair maximum-likelihood statistics from the training annotations.
/// Pairs with fewer than two samples use the global statistics.
pub fn fit_stats(dataset: &Dataset, mode: StatsMode) -> Result<RscStats> {
    let vocab = &dataset.vocabulary;
    let n = vocab.num_pairs();
    let mut layouts: Vec<Vec<Rsc>> = vec![Vec::new(); n];
    let mut persons: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
    for img in &dataset.images {
        for h in &img.hois {
            let Some(p) = vocab.pair_index(h.pair()) else {
                continue;
            };
            persons[p].push(vec![h.human.width(), h.human.height()]);
            if let Some(o) = &h.object {
                layouts[p].push(rsc(&h.human, o));
            }
        }
    }
    let all_layouts: Vec<Rsc> = layouts.iter().flatten().copied().collect();
    if all_layouts.is_empty() {
        return Err(Error::Stats("dataset contains no human-object pairs".into()));
    }
    let all_persons: Vec<Vec<f64>> = persons.iter().flatten().cloned().collect();
    let global = PairStats {
        layout: Some(Layout::fit(&all_layouts, mode)),
        person: GaussianParams::fit_mle(&all_persons, COV_RIDGE),
        fallback: false,
    };
    let pairs = (0..n)
        .map(|p| {
            let has_object = vocab.pair(p).object.is_some();
            let enough_layout = !has_object || layouts[p].len() >= 2;
            if !enough_layout || persons[p].len() < 2 {
                let mut s = fallback_for(&global, has_object);
                if enough_layout && has_object {
                    s.layout = Some(Layout::fit(&layouts[p], mode));
                }
                if persons[p].len() >= 2 {
                    s.person = GaussianParams::fit_mle(&persons[p], COV_RIDGE);
                }
                return s;
            }
            PairStats {
                layout: has_object.then(|| Layout::fit(&layouts[p], mode)),
                person: GaussianParams::fit_mle(&persons[p], COV_RIDGE),
                fallback: false,
            }
        })
        .collect();
    Ok(RscStats {
        mode,
        pairs,
        fallback: global,
    })
}

/// Hand-set layout statistics used to render synthetic scenes. Each action
/// gets a distinct relative placement and each null-object action a distinct
/// person shape so that every pair is visually identifiable.
pub fn default_layout_stats(vocab: &OaVocabulary) -> RscStats {
    const PLACEMENTS: [[f64; 4]; 4] = [
        [0.6, 0.35, -0.6, -1.2],
        [1.25, -0.05, -0.5, -1.05],
        [-0.15, 0.75, 0.25, -0.8],
        [-0.8, 0.3, -0.7, -1.2],
    ];
    const NULL_PERSONS: [[f64; 2]; 3] = [[0.22, 0.55], [0.3, 0.28], [0.4, 0.4]];
    let mut object_actions = Vec::new();
    let mut null_actions = Vec::new();
    for a in 0..vocab.num_actions() {
        if vocab.allows_null_object(a) {
            null_actions.push(a);
        } else {
            object_actions.push(a);
        }
    }
    let pairs = vocab
        .pairs()
        .iter()
        .map(|p| match p.object {
            Some(o) => {
                let k = object_actions.iter().position(|&a| a == p.action).unwrap_or(0);
                let m = PLACEMENTS[k % PLACEMENTS.len()];
                let size_shift = 0.1 * ((o % 3) as f64 - 1.0);
                PairStats {
                    layout: Some(Layout::Bivariate {
                        xy: GaussianParams::isotropic(vec![m[0], m[1]], 0.06),
                        wh: GaussianParams::isotropic(vec![m[2] + size_shift, m[3] + size_shift], 0.06),
                    }),
                    person: GaussianParams::isotropic(vec![0.25, 0.4], 0.02),
                    fallback: false,
                }
            }
            None => {
                let k = null_actions.iter().position(|&a| a == p.action).unwrap_or(0);
                PairStats {
                    layout: None,
                    person: GaussianParams::isotropic(NULL_PERSONS[k % NULL_PERSONS.len()].to_vec(), 0.02),
                    fallback: false,
                }
            }
        })
        .collect();
    RscStats {
        mode: StatsMode::Bivariate,
        pairs,
        fallback: PairStats {
            layout: Some(Layout::Bivariate {
                xy: GaussianParams::isotropic(vec![0.5, 0.3], 0.2),
                wh: GaussianParams::isotropic(vec![-0.5, -0.8], 0.2),
            }),
            person: GaussianParams::isotropic(vec![0.25, 0.4], 0.03),
            fallback: false,
        },
    }
}

/// Spatial-map geometry: map side and the fixed human top-left corner as a
/// fraction of the map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapGeometry {
    pub size: usize,
    pub top_left: f64,
}

impl Default for MapGeometry {
    fn default() -> Self {
        Self {
            size: 64,
            top_left: 16.0 / 64.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledPair {
    pub human: Box,
    pub object: Option<Box>,
    /// The drawn configuration before clamping.
    pub rsc: Option<Rsc>,
}

/// Draws a human box (fixed top-left, size from the person statistics) and
/// an object box placed by a sampled relative configuration. Both are
/// clamped to the unit square with sides of at least one map cell.
pub fn sample_pair<R: Rng>(stats: &RscStats, pair: usize, rng: &mut R, geom: MapGeometry) -> SampledPair {
    let s = stats.resolve(pair);
    let min_side = 1.0 / geom.size as f64;
    let wh = s.person.sample(rng);
    let raw_human = Box::from_tlwh(geom.top_left, geom.top_left, wh[0].max(min_side), wh[1].max(min_side))
        .expect("positive size");
    let human = raw_human.clamp_unit(min_side);
    let drawn = s.sample_rsc(rng);
    let object = drawn.map(|r| apply_rsc(&raw_human, &r).clamp_unit(min_side));
    SampledPair {
        human,
        object,
        rsc: drawn,
    }
}

/// Binary `2 x size x size` raster: channel 0 marks the human box, channel 1
/// the object box. A cell is set when its centre lies inside the box.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    pub size: usize,
    pub cells: Vec<u8>,
}

impl SpatialMap {
    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.size * self.size;
        &self.cells[c * n..(c + 1) * n]
    }

    pub fn count_ones(&self, c: usize) -> usize {
        self.channel(c).iter().filter(|&&v| v == 1).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(2, self.size * self.size, self.cells.iter().map(|&v| f64::from(v)).collect())
    }
}

fn covered_cells(lo: f64, hi: f64, size: usize) -> std::ops::Range<usize> {
    let inside = |i: usize| {
        let c = (i as f64 + 0.5) / size as f64;
        c >= lo && c <= hi
    };
    let start = (0..size).find(|&i| inside(i)).unwrap_or(size);
    let end = (start..size).find(|&i| !inside(i)).unwrap_or(size);
    start..end
}

pub fn rasterize(human: &Box, object: Option<&Box>, size: usize) -> SpatialMap {
    let mut cells = vec![0u8; 2 * size * size];
    for (c, b) in [(0, Some(human)), (1, object)] {
        let Some(b) = b else { continue };
        let rows = covered_cells(b.y1(), b.y2(), size);
        let cols = covered_cells(b.x1(), b.x2(), size);
        for i in rows {
            let base = c * size * size + i * size;
            cells[base + cols.start..base + cols.end].fill(1);
        }
    }
    SpatialMap { size, cells }
}

/// Two strided convolutions (kernel 5, stride 2, 16 then 32 channels, ReLU)
/// followed by a linear projection to the model width.
#[derive(Clone, Debug)]
pub struct SpatialMapEncoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Linear,
    pub map_size: usize,
}

impl SpatialMapEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, map_size: usize, d: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), 2, 16, 5, 2, rng);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), 16, 32, 5, 2, rng);
        assert!(map_size >= 13, "spatial maps must be at least 13 cells wide");
        let s1 = conv1.output_side(map_size);
        let s2 = conv2.output_side(s1);
        let proj = Linear::new(store, &format!("{name}.proj"), 32 * s2 * s2, d, rng);
        Self {
            conv1,
            conv2,
            proj,
            map_size,
        }
    }

    pub fn forward(&self, g: &mut Graph, map: &SpatialMap) -> Var {
        assert_eq!(map.size, self.map_size, "spatial map size mismatch");
        let x = g.constant(map.to_tensor());
        self.forward_tensor(g, x)
    }

    /// Forward over a `2 x size*size` variable.
    pub fn forward_tensor(&self, g: &mut Graph, x: Var) -> Var {
        let s = self.map_size;
        let h = self.conv1.forward(g, x, s, s);
        let h = g.relu(h);
        let s1 = self.conv1.output_side(s);
        let h = self.conv2.forward(g, h, s1, s1);
        let h = g.relu(h);
        let flat_len = g.value(h).len();
        let flat = g.reshape(h, 1, flat_len);
        self.proj.forward(g, flat)
    }
}

/// Linear projection of the flat distribution-parameter features.
#[derive(Clone, Debug)]
pub struct SpatialParamEncoder {
    pub proj: Linear,
    pub mode: StatsMode,
}

impl SpatialParamEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, mode: StatsMode, d: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), param_feature_len(mode), d, rng),
            mode,
        }
    }

    pub fn forward(&self, g: &mut Graph, stats: &PairStats) -> Var {
        let x = g.constant(Tensor::row_vector(stats.param_features(self.mode)));
        self.proj.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{synth_dataset, SynthOptions};
    use crate::nnkit::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_mle() {
        let g = GaussianParams::fit_mle(&[vec![0.0, 0.0], vec![2.0, 0.0]], COV_RIDGE);
        assert_eq!(g.mean, vec![1.0, 0.0]);
        assert_eq!(g.cov, vec![1.0 + COV_RIDGE, 0.0, 0.0, COV_RIDGE]);
        assert!(g.is_positive_definite());
        let unregularized = GaussianParams::fit_mle(&[vec![0.0, 0.0], vec![2.0, 0.0]], 0.0);
        assert!(!unregularized.is_positive_definite());
    }

    #[test]
    fn single_sample_pair_uses_fallback() {
        let v = OaVocabulary::default_synthetic();
        let mut ds = synth_dataset(4, 30, &v, &default_layout_stats(&v), &SynthOptions::default());
        // Keep exactly one instance of pair 0 (phone, hold).
        let mut seen = false;
        for img in &mut ds.images {
            img.hois.retain(|h| {
                if v.pair_index(h.pair()) != Some(0) {
                    return true;
                }
                let keep = !seen;
                seen = true;
                keep
            });
        }
        assert!(seen);
        let stats = fit_stats(&ds, StatsMode::Bivariate).unwrap();
        assert!(stats.pairs[0].fallback);
        assert_eq!(stats.pairs[0].layout, stats.fallback.layout);
        assert!(stats.all_positive_definite());
    }

    #[test]
    fn fit_requires_interacting_pairs() {
        let v = OaVocabulary::default_synthetic();
        let mut ds = synth_dataset(4, 5, &v, &default_layout_stats(&v), &SynthOptions::default());
        for img in &mut ds.images {
            img.hois.retain(|h| h.object.is_none());
        }
        assert!(matches!(fit_stats(&ds, StatsMode::Bivariate), Err(Error::Stats(_))));
    }

    #[test]
    fn stats_json_round_trip() {
        let v = OaVocabulary::default_synthetic();
        let ds = synth_dataset(8, 40, &v, &default_layout_stats(&v), &SynthOptions::default());
        for mode in [StatsMode::Bivariate, StatsMode::Multivariate] {
            let stats = fit_stats(&ds, mode).unwrap();
            let text = stats.to_json(&v);
            assert_eq!(RscStats::from_json(&text, &v).unwrap(), stats);
        }
        assert!(RscStats::from_json("{\"mode\":\"bivariate\"}", &v).is_err());
    }

    #[test]
    fn zero_covariance_sampling_is_deterministic() {
        let v = OaVocabulary::default_synthetic();
        let mut stats = default_layout_stats(&v);
        let zero = |m: Vec<f64>| GaussianParams::isotropic(m, 0.0);
        stats.pairs[0] = PairStats {
            layout: Some(Layout::Bivariate {
                xy: zero(vec![0.5, 0.2]),
                wh: zero(vec![-0.5, -0.5]),
            }),
            person: zero(vec![0.25, 0.4]),
            fallback: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let geom = MapGeometry::default();
        let s = sample_pair(&stats, 0, &mut rng, geom);
        let human = Box::from_tlwh(0.25, 0.25, 0.25, 0.4).unwrap();
        assert_eq!(s.human, human);
        let r = Rsc::from_array([0.5, 0.2, -0.5, -0.5]);
        assert_eq!(s.object, Some(apply_rsc(&human, &r)));
    }

    #[test]
    fn null_pair_samples_no_object() {
        let v = OaVocabulary::default_synthetic();
        let stats = default_layout_stats(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_pair(&stats, 13, &mut rng, MapGeometry::default());
        assert!(s.object.is_none());
        let m = rasterize(&s.human, None, 32);
        assert_eq!(m.count_ones(1), 0);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let v = OaVocabulary::default_synthetic();
        let stats = default_layout_stats(&v);
        let draw = |seed| sample_pair(&stats, 3, &mut ChaCha8Rng::seed_from_u64(seed), MapGeometry::default());
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn raster_fixtures() {
        let full = rasterize(&Box::unit(), None, 16);
        assert_eq!(full.count_ones(0), 256);
        let b = Box::new(16.0 / 64.0, 16.0 / 64.0, 48.0 / 64.0, 32.0 / 64.0).unwrap();
        assert_eq!(rasterize(&b, None, 64).count_ones(0), 512);
        let a = Box::new(0.0, 0.0, 0.4, 0.4).unwrap();
        let c = Box::new(0.6, 0.6, 1.0, 1.0).unwrap();
        let m = rasterize(&a, Some(&c), 32);
        assert!(m.channel(0).iter().zip(m.channel(1)).all(|(p, q)| p * q == 0));
        assert!(m.count_ones(1) > 0);
    }

    #[test]
    fn param_feature_layouts() {
        let v = OaVocabulary::default_synthetic();
        let ds = synth_dataset(8, 40, &v, &default_layout_stats(&v), &SynthOptions::default());
        let bi = fit_stats(&ds, StatsMode::Bivariate).unwrap();
        let multi = fit_stats(&ds, StatsMode::Multivariate).unwrap();
        assert_eq!(bi.pairs[0].param_features(StatsMode::Bivariate).len(), 15);
        assert_eq!(multi.pairs[0].param_features(StatsMode::Multivariate).len(), 19);
        assert_eq!(bi.pairs[13].param_features(StatsMode::Bivariate).len(), 15);
        let zero = PairStats {
            layout: Some(Layout::Bivariate {
                xy: GaussianParams::isotropic(vec![0.0; 2], 0.0),
                wh: GaussianParams::isotropic(vec![0.0; 2], 0.0),
            }),
            person: GaussianParams::isotropic(vec![0.0; 2], 0.0),
            fallback: false,
        };
        assert!(zero.param_features(StatsMode::Bivariate).iter().all(|&x| x == 0.0));
        let f = bi.pairs[0].param_features(StatsMode::Bivariate);
        let Some(Layout::Bivariate { xy, .. }) = &bi.pairs[0].layout else { panic!() };
        assert_eq!(f[0], xy.mean[0]);
        assert_eq!(f[4], xy.cov_at(0, 0));
        assert_eq!(f[8], xy.cov_at(0, 1));
    }

    #[test]
    fn map_encoder_shapes_and_zero_map() {
        for size in [16, 32, 64] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::new();
            let enc = SpatialMapEncoder::new(&mut store, "spa", size, 12, &mut rng);
            let mut g = Graph::new(&store);
            let zero = SpatialMap {
                size,
                cells: vec![0; 2 * size * size],
            };
            let out = enc.forward(&mut g, &zero);
            assert_eq!(g.value(out).shape(), (1, 12));
            assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn map_encoder_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = SpatialMapEncoder::new(&mut store, "spa", 16, 6, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let human = Box::new(0.1, 0.1, 0.6, 0.8).unwrap();
        let object = Box::new(0.5, 0.3, 0.9, 0.5).unwrap();
        let map = rasterize(&human, Some(&object), 16);
        let report = check_gradients(&store, 1e-5, 40, |g| {
            let y = enc.forward(g, &map);
            let y = g.sigmoid(y);
            g.sum_all(y)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
