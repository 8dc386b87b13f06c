//! Bipartite matching of ground truth to queries and the multi-task
//! set-prediction loss.

use serde::{Deserialize, Serialize};

use crate::datamodel::HoiInstance;
use crate::geometry::{giou, Box};
use crate::heads::{HeadOutputs, PredictionSet};
use crate::nnkit::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub box_l1: f64,
    pub giou: f64,
    pub object: f64,
    pub interaction: f64,
    pub oa: f64,
    /// Relative weight of background targets in the object-class loss.
    pub background: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_l1: 2.5,
            giou: 1.0,
            object: 1.0,
            interaction: 1.0,
            oa: 1.0,
            background: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.box_l1, self.giou, self.object, self.interaction, self.oa, self.background];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(crate::Error::Config("loss weights must be finite and nonnegative".into()))
        }
    }
}

/// One ground-truth human-object pair with all of its actions.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTarget {
    pub human: Box,
    pub object: Option<Box>,
    pub object_class: Option<usize>,
    pub actions: Vec<usize>,
}

/// Merges instances that share the human box, object box and object class.
pub fn merge_targets(hois: &[HoiInstance]) -> Vec<GtTarget> {
    let mut out: Vec<GtTarget> = Vec::new();
    for h in hois {
        match out
            .iter_mut()
            .find(|t| t.human == h.human && t.object == h.object && t.object_class == h.object_class)
        {
            Some(t) => {
                if !t.actions.contains(&h.action_class) {
                    t.actions.push(h.action_class);
                }
            }
            None => out.push(GtTarget {
                human: h.human,
                object: h.object,
                object_class: h.object_class,
                actions: vec![h.action_class],
            }),
        }
    }
    out
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
/// Among optimal assignments the lexicographically smallest is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows ({n}) <= columns ({m})");
    assert!(cost.iter().all(|r| r.len() == m && r.iter().all(|v| v.is_finite())), "costs must be finite");
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..m).collect();
    let best = solve(cost, &rows, &cols).0;
    let scale = cost.iter().flatten().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale * n as f64;

    // Fix rows one at a time to the smallest column that keeps the optimum.
    let mut assignment = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    let mut free: Vec<usize> = cols.clone();
    for r in 0..n {
        let rest: Vec<usize> = (r + 1..n).collect();
        let mut chosen = None;
        for (pos, &c) in free.iter().enumerate() {
            let mut remaining = free.clone();
            remaining.remove(pos);
            let sub = if rest.is_empty() { 0.0 } else { solve(cost, &rest, &remaining).0 };
            if fixed_cost + cost[r][c] + sub <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.unwrap_or_else(|| {
            // Rounding left no candidate within tolerance; take the optimal
            // solver's own choice for this row.
            let (_, a) = solve(cost, &(r..n).collect::<Vec<_>>(), &free);
            free.iter().position(|&c| c == a[0]).expect("column is free")
        });
        let c = free.remove(pos);
        fixed_cost += cost[r][c];
        assignment.push(c);
    }
    assignment
}

/// Kuhn-Munkres with potentials on the sub-matrix `rows x cols`. Returns the
/// optimal cost and, per row, the chosen column (global index).
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    let total = out.iter().enumerate().map(|(i, &c)| cost[rows[i]][c]).sum();
    (total, out)
}

pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

/// Ground-truth index to query index.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Train object boxes of null-object pairs toward `[0, 0, 0, 0]`.
    pub null_box_training: bool,
    /// Push queries matched to object-less pairs away from the background
    /// class without naming an object class, so that score weighting by the
    /// best object probability does not erase them.
    pub null_objectness: bool,
}

fn l1(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn center(b: &[f64; 4]) -> Box {
    Box::from_center(b[0], b[1], b[2].max(1e-12), b[3].max(1e-12)).expect("positive size")
}

/// Cost matrix `n_gt x N_q`.
pub fn match_cost(pred: &PredictionSet, targets: &[GtTarget], w: &LossWeights, opts: LossOptions) -> Vec<Vec<f64>> {
    targets
        .iter()
        .map(|t| {
            let th = t.human.center_form();
            let to = t.object.map(|o| o.center_form());
            pred.queries
                .iter()
                .map(|q| {
                    let mut box_l1 = l1(&q.b_h, &th);
                    let mut g = 1.0 - giou(&center(&q.b_h), &t.human);
                    let mut obj = 0.0;
                    match (to, t.object_class) {
                        (Some(to), Some(c)) => {
                            box_l1 += l1(&q.b_o, &to);
                            g += 1.0 - giou(&center(&q.b_o), &t.object.expect("object box"));
                            obj = -q.obj_probs[c];
                        }
                        _ if opts.null_box_training => box_l1 += l1(&q.b_o, &[0.0; 4]),
                        _ => {}
                    }
                    let act = -t.actions.iter().map(|&a| q.hoi_raw[a]).sum::<f64>() / t.actions.len() as f64;
                    w.box_l1 * box_l1 + w.giou * g + w.object * obj + w.interaction * act
                })
                .collect()
        })
        .collect()
}

pub fn match_targets(pred: &PredictionSet, targets: &[GtTarget], w: &LossWeights, opts: LossOptions) -> Matching {
    let cost = match_cost(pred, targets, w, opts);
    let assignment = hungarian(&cost);
    Matching {
        cost: assignment_cost(&cost, &assignment),
        pairs: assignment.into_iter().enumerate().collect(),
    }
}

/// Unweighted components and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub box_l1: f64,
    pub giou: f64,
    pub object: f64,
    pub interaction: f64,
    pub oa: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.box_l1 += o.box_l1;
        self.giou += o.giou;
        self.object += o.object;
        self.interaction += o.interaction;
        self.oa += o.oa;
    }

    pub fn scale(&mut self, f: f64) {
        for v in [
            &mut self.total,
            &mut self.box_l1,
            &mut self.giou,
            &mut self.object,
            &mut self.interaction,
            &mut self.oa,
        ] {
            *v *= f;
        }
    }
}

/// Sum over rows of `1 - GIoU` between predicted centre-form boxes and
/// constant corner-form targets.
pub fn giou_loss(g: &mut Graph, pred: Var, targets: &[Box]) -> Var {
    let col = |g: &mut Graph, j: usize| g.slice_cols(pred, j, 1);
    let (cx, cy, w, h) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let px1 = g.sub(cx, hw);
    let px2 = g.add(cx, hw);
    let py1 = g.sub(cy, hh);
    let py2 = g.add(cy, hh);
    let tcol = |g: &mut Graph, f: fn(&Box) -> f64| {
        g.constant(Tensor::new(targets.len(), 1, targets.iter().map(f).collect()))
    };
    let tx1 = tcol(g, Box::x1);
    let ty1 = tcol(g, Box::y1);
    let tx2 = tcol(g, Box::x2);
    let ty2 = tcol(g, Box::y2);
    let t_area = tcol(g, Box::area);

    let ix1 = g.maximum(px1, tx1);
    let ix2 = g.minimum(px2, tx2);
    let iy1 = g.maximum(py1, ty1);
    let iy2 = g.minimum(py2, ty2);
    let iw = g.sub(ix2, ix1);
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let p_area = g.mul(w, h);
    let union = g.add(p_area, t_area);
    let union = g.sub(union, inter);
    let iou = g.div(inter, union);

    let ex1 = g.minimum(px1, tx1);
    let ex2 = g.maximum(px2, tx2);
    let ey1 = g.minimum(py1, ty1);
    let ey2 = g.maximum(py2, ty2);
    let ew = g.sub(ex2, ex1);
    let eh = g.sub(ey2, ey1);
    let e_area = g.mul(ew, eh);
    let slack = g.sub(e_area, union);
    let penalty = g.div(slack, e_area);
    let giou = g.sub(iou, penalty);
    let neg = g.neg(giou);
    let per_row = g.add_scalar(neg, 1.0);
    g.sum_all(per_row)
}

/// Loss of one image given a fixed matching. `oa_targets` is the image-level
/// multi-hot over pairs.
pub fn image_loss(
    g: &mut Graph,
    out: &HeadOutputs,
    oa_logits: Var,
    targets: &[GtTarget],
    oa_targets: &[f64],
    matching: &Matching,
    w: &LossWeights,
    opts: LossOptions,
) -> (Var, LossBreakdown) {
    let (n_q, n_cls) = g.value(out.object_logits).shape();
    let n_act = g.value(out.hoi_logits).cols();
    let background = n_cls - 1;
    let n_gt = targets.len().max(1) as f64;
    let mut parts: Vec<(Var, f64)> = Vec::new();
    let mut breakdown = LossBreakdown::default();

    // Object classification over all queries.
    let mut class_of = vec![Some(background); n_q];
    for &(t, q) in &matching.pairs {
        class_of[q] = targets[t].object_class;
    }
    let picks: Vec<(usize, usize)> = class_of.iter().enumerate().filter_map(|(q, c)| c.map(|c| (q, c))).collect();
    let nulls: Vec<usize> = if opts.null_objectness && background > 0 {
        matching
            .pairs
            .iter()
            .filter(|&&(t, _)| targets[t].object_class.is_none())
            .map(|&(_, q)| q)
            .collect()
    } else {
        Vec::new()
    };
    let weights: Vec<f64> = picks.iter().map(|&(_, c)| if c == background { w.background } else { 1.0 }).collect();
    let norm: f64 = weights.iter().sum::<f64>() + nulls.len() as f64;
    if norm > 0.0 {
        let mut terms: Vec<Var> = Vec::new();
        if !picks.is_empty() {
            let ls = g.log_softmax_rows(out.object_logits);
            let picked = g.entries(ls, &picks);
            let wv = g.constant(Tensor::row_vector(weights));
            let weighted = g.mul(picked, wv);
            let s = g.sum_all(weighted);
            terms.push(g.neg(s));
        }
        if !nulls.is_empty() {
            // -log(1 - P_bg) = softplus(l_bg - logsumexp(real logits)).
            let rows = g.gather_rows(out.object_logits, &nulls);
            let real = g.slice_cols(rows, 0, background);
            let ls_real = g.log_softmax_rows(real);
            let bg = g.slice_cols(rows, background, 1);
            let first = g.slice_cols(rows, 0, 1);
            let first_ls = g.slice_cols(ls_real, 0, 1);
            let x = g.sub(bg, first);
            let x = g.add(x, first_ls);
            terms.push(g.bce_with_logits(x, Tensor::zeros(nulls.len(), 1)));
        }
        let mut s = terms[0];
        for &t in &terms[1..] {
            s = g.add(s, t);
        }
        let ce = g.scale(s, 1.0 / norm);
        breakdown.object = g.value(ce).item();
        parts.push((ce, w.object));
    }

    if !matching.pairs.is_empty() {
        let queries: Vec<usize> = matching.pairs.iter().map(|p| p.1).collect();
        let gts: Vec<&GtTarget> = matching.pairs.iter().map(|p| &targets[p.0]).collect();

        // Human boxes.
        let ph = g.gather_rows(out.human_box, &queries);
        let th: Vec<Box> = gts.iter().map(|t| t.human).collect();
        let mut l1_terms = vec![l1_sum(g, ph, th.iter().map(|b| b.center_form()).collect())];
        let mut giou_terms = vec![giou_loss(g, ph, &th)];

        // Object boxes of pairs with an object.
        let with_obj: Vec<(usize, Box)> = matching
            .pairs
            .iter()
            .filter_map(|&(t, q)| targets[t].object.map(|o| (q, o)))
            .collect();
        if !with_obj.is_empty() {
            let qs: Vec<usize> = with_obj.iter().map(|p| p.0).collect();
            let po = g.gather_rows(out.object_box, &qs);
            let to: Vec<Box> = with_obj.iter().map(|p| p.1).collect();
            l1_terms.push(l1_sum(g, po, to.iter().map(|b| b.center_form()).collect()));
            giou_terms.push(giou_loss(g, po, &to));
        }
        if opts.null_box_training {
            let nulls: Vec<usize> = matching
                .pairs
                .iter()
                .filter(|&&(t, _)| targets[t].object.is_none())
                .map(|p| p.1)
                .collect();
            if !nulls.is_empty() {
                let po = g.gather_rows(out.object_box, &nulls);
                l1_terms.push(l1_sum(g, po, vec![[0.0; 4]; nulls.len()]));
            }
        }
        let l1_total = sum_vars(g, &l1_terms);
        let l1_total = g.scale(l1_total, 1.0 / n_gt);
        let giou_total = sum_vars(g, &giou_terms);
        let giou_total = g.scale(giou_total, 1.0 / n_gt);
        breakdown.box_l1 = g.value(l1_total).item();
        breakdown.giou = g.value(giou_total).item();
        parts.push((l1_total, w.box_l1));
        parts.push((giou_total, w.giou));

        // Interactions of matched queries.
        let logits = g.gather_rows(out.hoi_logits, &queries);
        let mut hot = Tensor::zeros(queries.len(), n_act);
        for (r, t) in gts.iter().enumerate() {
            for &a in &t.actions {
                hot.set(r, a, 1.0);
            }
        }
        let bce = g.bce_with_logits(logits, hot);
        let bce = g.scale(bce, 1.0 / n_gt);
        breakdown.interaction = g.value(bce).item();
        parts.push((bce, w.interaction));
    }

    let n_s = oa_targets.len() as f64;
    let oa = g.bce_with_logits(oa_logits, Tensor::row_vector(oa_targets.to_vec()));
    let oa = g.scale(oa, 1.0 / n_s);
    breakdown.oa = g.value(oa).item();
    parts.push((oa, w.oa));

    let weighted: Vec<Var> = parts.iter().map(|&(v, k)| g.scale(v, k)).collect();
    let total = sum_vars(g, &weighted);
    breakdown.total = g.value(total).item();
    (total, breakdown)
}

fn l1_sum(g: &mut Graph, pred: Var, targets: Vec<[f64; 4]>) -> Var {
    let t = g.constant(Tensor::new(targets.len(), 4, targets.concat()));
    let d = g.sub(pred, t);
    let a = g.abs(d);
    g.sum_all(a)
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

/// Matches on the current prediction values, then builds the loss.
pub fn compute_loss(
    g: &mut Graph,
    image_id: u64,
    out: &HeadOutputs,
    oa_logits: Var,
    targets: &[GtTarget],
    oa_targets: &[f64],
    w: &LossWeights,
    opts: LossOptions,
) -> (Var, LossBreakdown, Matching) {
    let pred = PredictionSet::from_graph(g, image_id, out, oa_logits);
    let matching = match_targets(&pred, targets, w, opts);
    let (loss, breakdown) = image_loss(g, out, oa_logits, targets, oa_targets, &matching, w, opts);
    (loss, breakdown, matching)
}
