//! Prediction heads over decoder embeddings and the object-confidence
//! weighting of interaction scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Box;
use crate::nnkit::{sigmoid, softmax_rows, Ffn, Graph, ParamStore, Var};

/// Sigmoid outputs below this on all four coordinates denote the null box.
pub const NULL_BOX_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub human_box: Ffn,
    pub object_box: Ffn,
    pub object_class: Ffn,
    pub interaction: Ffn,
}

/// Graph handles for one forward pass. Boxes are post-sigmoid `cx, cy, w, h`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub human_box: Var,
    pub object_box: Var,
    /// `N_q x (N_obj + 1)`, background last.
    pub object_logits: Var,
    pub hoi_logits: Var,
}

impl PredictionHeads {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        num_objects: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Self {
        let mut ffn = |head: &str, out: usize| Ffn::new(store, &format!("{name}.{head}"), &[d, d, d, out], rng);
        Self {
            human_box: ffn("human_box", 4),
            object_box: ffn("object_box", 4),
            object_class: ffn("object_class", num_objects + 1),
            interaction: ffn("interaction", num_actions),
        }
    }

    pub fn forward(&self, g: &mut Graph, embeddings: Var) -> HeadOutputs {
        let h = self.human_box.forward(g, embeddings);
        let o = self.object_box.forward(g, embeddings);
        HeadOutputs {
            human_box: g.sigmoid(h),
            object_box: g.sigmoid(o),
            object_logits: self.object_class.forward(g, embeddings),
            hoi_logits: self.interaction.forward(g, embeddings),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub query: usize,
    /// Human box, centre form.
    pub b_h: [f64; 4],
    /// Object box, centre form.
    pub b_o: [f64; 4],
    pub obj_probs: Vec<f64>,
    pub hoi_raw: Vec<f64>,
    pub hoi_weighted: Vec<f64>,
}

impl QueryPrediction {
    pub fn human_box(&self) -> Box {
        center_to_box(self.b_h)
    }

    pub fn object_box(&self) -> Box {
        center_to_box(self.b_o)
    }

    pub fn object_is_null(&self) -> bool {
        self.b_o.iter().all(|&v| v < NULL_BOX_THRESHOLD)
    }

    /// Most likely real object class and its probability.
    pub fn best_object(&self) -> (usize, f64) {
        let real = &self.obj_probs[..self.obj_probs.len() - 1];
        real.iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best })
    }
}

fn center_to_box(c: [f64; 4]) -> Box {
    // Sigmoid outputs are strictly positive, so the extent is never empty
    // unless it underflows.
    Box::from_center(c[0], c[1], c[2].max(1e-12), c[3].max(1e-12)).expect("sigmoid box has positive size")
}

/// Everything predicted for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub image_id: u64,
    pub oa_scores: Vec<f64>,
    pub queries: Vec<QueryPrediction>,
}

impl PredictionSet {
    pub fn from_graph(g: &Graph, image_id: u64, heads: &HeadOutputs, oa_logits: Var) -> Self {
        let hb = g.value(heads.human_box);
        let ob = g.value(heads.object_box);
        let probs = softmax_rows(g.value(heads.object_logits));
        let hoi = g.value(heads.hoi_logits);
        let queries = (0..hb.rows())
            .map(|q| {
                let obj_probs = probs.row(q).to_vec();
                let hoi_raw: Vec<f64> = hoi.row(q).iter().map(|&v| sigmoid(v)).collect();
                let hoi_weighted = weight_scores(&hoi_raw, &obj_probs);
                QueryPrediction {
                    query: q,
                    b_h: hb.row(q).try_into().expect("4 box coordinates"),
                    b_o: ob.row(q).try_into().expect("4 box coordinates"),
                    obj_probs,
                    hoi_raw,
                    hoi_weighted,
                }
            })
            .collect();
        Self {
            image_id,
            oa_scores: g.value(oa_logits).data().iter().map(|&v| sigmoid(v)).collect(),
            queries,
        }
    }
}

/// Scales interaction scores by the largest non-background object
/// probability (the last entry of `obj_probs` is background).
pub fn weight_scores(raw: &[f64], obj_probs: &[f64]) -> Vec<f64> {
    assert!(!obj_probs.is_empty(), "object probabilities need a background entry");
    let m = obj_probs[..obj_probs.len() - 1].iter().copied().fold(0.0, f64::max);
    raw.iter().map(|&r| r * m).collect()
}

pub fn write_predictions(path: &std::path::Path, sets: &[PredictionSet]) -> crate::Result<()> {
    let text = serde_json::to_string_pretty(sets).expect("predictions serialize");
    std::fs::write(path, text).map_err(|e| crate::Error::io(path, e))
}

pub fn read_predictions(path: &std::path::Path) -> crate::Result<Vec<PredictionSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| crate::Error::Parse(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::gradcheck::check_gradients;
    use crate::nnkit::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (ParamStore, PredictionHeads) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let heads = PredictionHeads::new(&mut store, "heads", 6, 3, 4, &mut rng);
        (store, heads)
    }

    #[test]
    fn weighting_fixtures() {
        let w = weight_scores(&[0.5, 0.2], &[0.8, 0.1, 0.1]);
        assert!((w[0] - 0.4).abs() < 1e-15 && (w[1] - 0.16).abs() < 1e-15);
        assert_eq!(weight_scores(&[0.3, 0.9], &[0.0, 1.0, 0.0]), vec![0.3, 0.9]);
        // The background probability does not count.
        assert_eq!(weight_scores(&[0.5], &[0.1, 0.9]), vec![0.05]);
    }

    #[test]
    fn zero_params_give_centre_boxes_and_uniform_classes() {
        let (store, heads) = fixture();
        let mut zero = store.clone();
        for id in store.ids() {
            zero.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&zero);
        let emb = g.constant(Tensor::zeros(5, 6));
        let out = heads.forward(&mut g, emb);
        let oa = g.constant(Tensor::zeros(1, 2));
        let set = PredictionSet::from_graph(&g, 7, &out, oa);
        assert_eq!(set.queries.len(), 5);
        assert_eq!(set.oa_scores, vec![0.5, 0.5]);
        for q in &set.queries {
            assert_eq!(q.b_h, [0.5; 4]);
            assert_eq!(q.b_o, [0.5; 4]);
            assert!(q.obj_probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
            assert_eq!(q.hoi_raw, vec![0.5; 4]);
            assert_eq!(q.human_box().corners(), [0.25, 0.25, 0.75, 0.75]);
        }
    }

    #[test]
    fn shapes_ranges_and_json() {
        let (store, heads) = fixture();
        let mut g = Graph::new(&store);
        let emb = g.constant(Tensor::new(3, 6, (0..18).map(|i| (i as f64).cos() * 3.0).collect()));
        let out = heads.forward(&mut g, emb);
        let oa = g.constant(Tensor::row_vector(vec![0.3, -2.0]));
        let set = PredictionSet::from_graph(&g, 1, &out, oa);
        for q in &set.queries {
            assert!(q.b_h.iter().chain(&q.b_o).all(|&v| v > 0.0 && v < 1.0));
            assert!((q.obj_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(q.obj_probs.len(), 4);
            assert!(q.hoi_weighted.iter().zip(&q.hoi_raw).all(|(w, r)| w <= r));
        }
        let text = serde_json::to_value(&set).unwrap();
        assert!(text["queries"][0].get("hoi_weighted").is_some());
        let back: PredictionSet = serde_json::from_value(text).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn heads_gradient() {
        let (store, heads) = fixture();
        let emb = Tensor::new(2, 6, (0..12).map(|i| (i as f64 * 0.9).sin()).collect());
        let report = check_gradients(&store, 1e-5, usize::MAX, |g| {
            let e = g.constant(emb.clone());
            let out = heads.forward(g, e);
            let ls = g.log_softmax_rows(out.object_logits);
            let picked = g.entries(ls, &[(0, 1), (1, 3)]);
            let ce = g.sum_all(picked);
            let bce = g.bce_with_logits(out.hoi_logits, Tensor::new(2, 4, vec![1., 0., 0., 1., 0., 0., 1., 0.]));
            let boxes = g.add(out.human_box, out.object_box);
            let boxes = g.mul(boxes, boxes);
            let b = g.sum_all(boxes);
            let t = g.sub(bce, ce);
            g.add(t, b)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
