//! Detection-level mean average precision with strict and relaxed handling
//! of object-less interactions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, HoiInstance, OaPair, OaVocabulary};
use crate::geometry::{iou, Box};
use crate::heads::PredictionSet;

/// Box overlap needed for a match.
pub const IOU_THRESHOLD: f64 = 0.5;
/// Pair classes with fewer training samples than this are rare.
pub const RARE_THRESHOLD: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Object-less interactions must predict the null object box.
    #[serde(rename = "1")]
    Strict,
    /// The object box of object-less interactions is ignored.
    #[serde(rename = "2")]
    Relaxed,
}

impl Scenario {
    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Self::Strict),
            2 => Some(Self::Relaxed),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::Strict => 1,
            Self::Relaxed => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassMode {
    /// One class per action.
    Action,
    /// One class per vocabulary object-action pair.
    Pair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub human: Box,
    /// `None` when the predicted object box is the null box.
    pub object: Option<Box>,
    pub action: usize,
    pub object_class: Option<usize>,
    pub score: f64,
}

/// One detection per query and action, scored by the weighted interaction
/// probability.
pub fn detections_from_predictions(sets: &[PredictionSet]) -> Vec<Detection> {
    let mut out = Vec::new();
    for set in sets {
        for q in &set.queries {
            let human = q.human_box();
            let object = (!q.object_is_null()).then(|| q.object_box());
            let object_class = Some(q.best_object().0);
            for (action, &score) in q.hoi_weighted.iter().enumerate() {
                out.push(Detection {
                    image_id: set.image_id,
                    human,
                    object,
                    action,
                    object_class,
                    score,
                });
            }
        }
    }
    out
}

/// Evaluation class of a detection, or `None` when it maps to no class.
pub fn detection_class(det: &Detection, vocab: &OaVocabulary, mode: ClassMode) -> Option<usize> {
    match mode {
        ClassMode::Action => (det.action < vocab.num_actions()).then_some(det.action),
        ClassMode::Pair => {
            let object = if vocab.allows_null_object(det.action) {
                None
            } else {
                Some(det.object_class?)
            };
            vocab.pair_index(OaPair {
                object,
                action: det.action,
            })
        }
    }
}

pub fn gt_class(h: &HoiInstance, vocab: &OaVocabulary, mode: ClassMode) -> Option<usize> {
    match mode {
        ClassMode::Action => Some(h.action_class),
        ClassMode::Pair => vocab.pair_index(h.pair()),
    }
}

/// Overlap of a detection with a ground truth if it satisfies the match
/// rule, else `None`.
fn match_overlap(det: &Detection, gt: &HoiInstance, scenario: Scenario) -> Option<f64> {
    let h = iou(&det.human, &gt.human);
    if h <= IOU_THRESHOLD {
        return None;
    }
    match (&gt.object, scenario) {
        (Some(go), _) => {
            let o = iou(det.object.as_ref()?, go);
            (o > IOU_THRESHOLD).then_some(h.min(o))
        }
        (None, Scenario::Strict) => det.object.is_none().then_some(h),
        (None, Scenario::Relaxed) => Some(h),
    }
}

/// Greedy match of one detection against the same-class ground truths of its
/// image. Marks and reports the best-overlapping unused match.
pub fn match_detection(det: &Detection, gts: &[&HoiInstance], used: &mut [bool], scenario: Scenario) -> bool {
    let mut best: Option<(usize, f64)> = None;
    for (i, gt) in gts.iter().enumerate() {
        if used[i] {
            continue;
        }
        if let Some(o) = match_overlap(det, gt, scenario) {
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((i, o));
            }
        }
    }
    match best {
        Some((i, _)) => {
            used[i] = true;
            true
        }
        None => false,
    }
}

/// Area under the precision-recall curve with the precision envelope.
/// `tp` is ordered by descending score.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub scenario: Scenario,
    pub class_mode: ClassMode,
    /// Training-set samples per vocabulary pair, for the rare split.
    pub train_pair_counts: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub name: String,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_detections: usize,
    pub rare: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub class_mode: ClassMode,
    /// Mean over classes with ground truth.
    pub map: f64,
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub per_class: Vec<ClassAp>,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_detections: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn class_names(vocab: &OaVocabulary, mode: ClassMode) -> Vec<String> {
    match mode {
        ClassMode::Action => vocab.actions().iter().map(|a| a.name.clone()).collect(),
        ClassMode::Pair => (0..vocab.num_pairs()).map(|i| vocab.pair_key(i)).collect(),
    }
}

pub fn evaluate(detections: &[Detection], dataset: &Dataset, cfg: &EvalConfig) -> EvalReport {
    let vocab = &dataset.vocabulary;
    let names = class_names(vocab, cfg.class_mode);
    let n_classes = names.len();

    // Ground truth per class, grouped by image.
    let mut gts: Vec<Vec<(u64, &HoiInstance)>> = vec![Vec::new(); n_classes];
    for img in &dataset.images {
        for h in &img.hois {
            if let Some(c) = gt_class(h, vocab, cfg.class_mode) {
                gts[c].push((img.id, h));
            }
        }
    }
    let mut dets: Vec<Vec<&Detection>> = vec![Vec::new(); n_classes];
    for d in detections {
        if let Some(c) = detection_class(d, vocab, cfg.class_mode) {
            dets[c].push(d);
        }
    }

    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let mut list = dets[c].clone();
        // Stable: equal scores keep input order.
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut by_image: std::collections::HashMap<u64, (Vec<&HoiInstance>, Vec<bool>)> =
            std::collections::HashMap::new();
        for &(id, h) in &gts[c] {
            let e = by_image.entry(id).or_default();
            e.0.push(h);
            e.1.push(false);
        }
        let tp: Vec<bool> = list
            .iter()
            .map(|d| match by_image.get_mut(&d.image_id) {
                Some((g, used)) => match_detection(d, g, used, cfg.scenario),
                None => false,
            })
            .collect();
        let n_gt = gts[c].len();
        let rare = match (cfg.class_mode, &cfg.train_pair_counts) {
            (ClassMode::Pair, Some(counts)) => Some(counts.get(c).copied().unwrap_or(0) < RARE_THRESHOLD),
            _ => None,
        };
        per_class.push(ClassAp {
            class: c,
            name: names[c].clone(),
            ap: (n_gt > 0).then(|| average_precision(&tp, n_gt)),
            n_gt,
            n_detections: list.len(),
            rare,
        });
    }

    let aps = |filter: &dyn Fn(&ClassAp) -> bool| mean(per_class.iter().filter(|c| filter(c)).filter_map(|c| c.ap));
    let map = aps(&|_| true).unwrap_or(0.0);
    let split = cfg.class_mode == ClassMode::Pair && cfg.train_pair_counts.is_some();
    EvalReport {
        scenario: cfg.scenario,
        class_mode: cfg.class_mode,
        map,
        full: split.then_some(map),
        rare: if split { aps(&|c| c.rare == Some(true)) } else { None },
        non_rare: if split { aps(&|c| c.rare == Some(false)) } else { None },
        n_images: dataset.images.len(),
        n_gt: per_class.iter().map(|c| c.n_gt).sum(),
        n_detections: per_class.iter().map(|c| c.n_detections).sum(),
        per_class,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per class followed by summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,name,ap,n_gt,n_detections,rare\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for c in &self.per_class {
            let rare = c.rare.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{}", c.class, c.name, opt(c.ap), c.n_gt, c.n_detections, rare);
        }
        let _ = writeln!(s, "mAP,,{:.6},{},{},", self.map, self.n_gt, self.n_detections);
        for (label, v) in [("full", self.full), ("rare", self.rare), ("non_rare", self.non_rare)] {
            if v.is_some() {
                let _ = writeln!(s, "{label},,{},,,", opt(v));
            }
        }
        s
    }

    /// Writes `path` as JSON and a CSV next to it.
    pub fn save(&self, path: &std::path::Path) -> crate::Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| crate::Error::io(path, e))?;
        let csv = path.with_extension("csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| crate::Error::io(&csv, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ImageAnnotation, ImageData, ImageSource};

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Box {
        Box::normalized(x1, y1, x2, y2).unwrap()
    }

    fn gt(human: Box, object: Option<Box>, action: usize) -> HoiInstance {
        HoiInstance {
            human,
            object,
            object_class: object.map(|_| 0),
            action_class: action,
        }
    }

    fn det(human: Box, object: Option<Box>, action: usize, score: f64) -> Detection {
        Detection {
            image_id: 1,
            human,
            object,
            action,
            object_class: Some(0),
            score,
        }
    }

    #[test]
    fn match_rules() {
        let h = b(0.1, 0.1, 0.5, 0.9);
        let o = b(0.5, 0.4, 0.8, 0.7);
        let g = gt(h, Some(o), 0);
        let exact = det(h, Some(o), 0, 0.9);
        assert!(match_detection(&exact, &[&g], &mut [false], Scenario::Strict));
        assert!(!match_detection(&exact, &[&g], &mut [true], Scenario::Strict));
        // Human IoU 0.4 fails.
        let low = det(b(0.1, 0.1, 0.5, 0.42), Some(o), 0, 0.9);
        assert!((iou(&low.human, &h) - 0.4).abs() < 1e-12);
        assert!(!match_detection(&low, &[&g], &mut [false], Scenario::Relaxed));
        assert!(!match_detection(&det(h, None, 0, 0.9), &[&g], &mut [false], Scenario::Relaxed));
    }

    #[test]
    fn null_object_rule_table() {
        let h = b(0.1, 0.1, 0.5, 0.9);
        let g = gt(h, None, 3);
        let any_box = det(h, Some(b(0.6, 0.6, 0.9, 0.9)), 3, 0.5);
        let null_box = det(h, None, 3, 0.5);
        let table = [
            (&any_box, Scenario::Strict, false),
            (&any_box, Scenario::Relaxed, true),
            (&null_box, Scenario::Strict, true),
            (&null_box, Scenario::Relaxed, true),
        ];
        for (d, s, expected) in table {
            assert_eq!(match_detection(d, &[&g], &mut [false], s), expected, "{s:?}");
        }
    }

    #[test]
    fn best_overlap_wins_and_duplicates_are_fp() {
        let h = b(0.1, 0.1, 0.5, 0.9);
        let near = gt(b(0.12, 0.1, 0.52, 0.9), None, 0);
        let exact = gt(h, None, 0);
        let mut used = [false, false];
        assert!(match_detection(&det(h, None, 0, 0.9), &[&near, &exact], &mut used, Scenario::Relaxed));
        assert_eq!(used, [false, true]);
        let mut used = [false];
        assert!(match_detection(&det(h, None, 0, 0.9), &[&exact], &mut used, Scenario::Relaxed));
        assert!(!match_detection(&det(h, None, 0, 0.8), &[&exact], &mut used, Scenario::Relaxed));
    }

    #[test]
    fn ap_fixtures() {
        assert_eq!(average_precision(&[true, true, true], 3), 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[], 4), 0.0);
        // Envelope: P at recall 1/2 is max(1, ...) = 1; recall 1 reached at rank 4 with P = 1/2.
        assert_eq!(average_precision(&[true, false, false, true], 2), 0.5 + 0.5 * 0.5);
        assert_eq!(average_precision(&[true], 2), 0.5);
    }

    fn one_image_dataset(hois: Vec<HoiInstance>) -> Dataset {
        Dataset {
            vocabulary: OaVocabulary::default_synthetic(),
            images: vec![ImageAnnotation {
                id: 1,
                image: ImageData::blank(4, 4, 3),
                source: ImageSource::Inline,
                hois,
            }],
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let h = b(0.1, 0.1, 0.5, 0.9);
        let o = b(0.5, 0.4, 0.8, 0.7);
        let ds = one_image_dataset(vec![
            HoiInstance {
                human: h,
                object: Some(o),
                object_class: Some(0),
                action_class: 0,
            },
            HoiInstance {
                human: h,
                object: None,
                object_class: None,
                action_class: 4,
            },
        ]);
        let dets = vec![det(h, Some(o), 0, 0.9), det(h, None, 4, 0.8)];
        for (mode, counts) in [(ClassMode::Action, None), (ClassMode::Pair, Some(ds.pair_counts()))] {
            let r = evaluate(
                &dets,
                &ds,
                &EvalConfig {
                    scenario: Scenario::Strict,
                    class_mode: mode,
                    train_pair_counts: counts,
                },
            );
            assert_eq!(r.map, 1.0, "{mode:?}");
            assert_eq!(r.n_gt, 2);
            if mode == ClassMode::Pair {
                assert_eq!(r.rare, Some(1.0));
                assert_eq!(r.non_rare, None);
                assert_eq!(r.per_class.iter().filter(|c| c.ap.is_some()).count(), 2);
            }
        }
        let csv = evaluate(
            &dets,
            &ds,
            &EvalConfig {
                scenario: Scenario::Relaxed,
                class_mode: ClassMode::Action,
                train_pair_counts: None,
            },
        )
        .to_csv();
        assert!(csv.lines().any(|l| l.starts_with("mAP,,1.000000")));
    }

    #[test]
    fn ap_is_invariant_to_monotone_score_maps() {
        let h = b(0.1, 0.1, 0.5, 0.9);
        let ds = one_image_dataset(vec![gt(h, None, 3), gt(b(0.6, 0.1, 0.9, 0.5), None, 3)]);
        let dets = vec![
            det(h, None, 3, 0.2),
            det(b(0.6, 0.6, 0.9, 0.9), None, 3, 0.7),
            det(b(0.6, 0.1, 0.9, 0.5), None, 3, 0.4),
        ];
        let cfg = EvalConfig {
            scenario: Scenario::Relaxed,
            class_mode: ClassMode::Action,
            train_pair_counts: None,
        };
        let a = evaluate(&dets, &ds, &cfg).map;
        let squashed: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score.powi(3) * 0.5, ..d.clone() }).collect();
        assert_eq!(a, evaluate(&squashed, &ds, &cfg).map);
        assert!((a - 2.0 / 3.0).abs() < 1e-15);
    }
}
