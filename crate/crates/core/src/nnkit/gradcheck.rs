//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric values at the worst entry.
    pub worst_values: (f64, f64),
}

/// Relative error with a `1e-6` floor on the denominator so entries whose
/// true gradient is zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic parameter gradients of `loss` with central differences
/// of step `h`. At most `per_tensor` evenly spaced entries are probed in each
/// parameter tensor.
pub fn check_gradients<F>(params: &ParamStore, h: f64, per_tensor: usize, loss: F) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(params);
        let out = loss(&mut g);
        g.backward(out)
    };
    let eval = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let out = loss(&mut g);
        g.value(out).item()
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        worst_values: (0.0, 0.0),
    };
    for id in params.ids() {
        let n = params.get(id).len();
        for k in probe_indices(n, per_tensor) {
            let numeric = central_difference(&mut work, id, k, h, &eval);
            let a = analytic.get(id).data()[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((params.name(id).to_string(), k));
                report.worst_values = (a, numeric);
            }
        }
    }
    report
}

/// Adds uniform noise in `[-scale, scale]` to every parameter. Zero-initialized
/// biases otherwise leave ReLU inputs exactly on the kink for blank inputs,
/// where finite differences are meaningless.
pub fn jitter(params: &mut ParamStore, seed: u64, scale: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..=scale);
        }
    }
}

fn central_difference(
    work: &mut ParamStore,
    id: ParamId,
    k: usize,
    h: f64,
    eval: &impl Fn(&ParamStore) -> f64,
) -> f64 {
    let orig = work.get(id).data()[k];
    work.get_mut(id).data_mut()[k] = orig + h;
    let plus = eval(work);
    work.get_mut(id).data_mut()[k] = orig - h;
    let minus = eval(work);
    work.get_mut(id).data_mut()[k] = orig;
    (plus - minus) / (2.0 * h)
}

fn probe_indices(n: usize, per_tensor: usize) -> Vec<usize> {
    if n <= per_tensor {
        return (0..n).collect();
    }
    let step = n as f64 / per_tensor as f64;
    (0..per_tensor).map(|i| (i as f64 * step) as usize).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::Tensor;

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::row_vector(vec![1.0, -2.0]));
        let mut g = Graph::new(&store);
        let c = g.constant(Tensor::scalar(3.5));
        let grads = g.backward(c);
        assert!(grads.all_zero());
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut store = ParamStore::new();
        let p = store.insert("p", Tensor::new(2, 2, vec![0.5, -1.5, 2.0, 0.25]));
        let mut g = Graph::new(&store);
        let v = g.param(p);
        let sq = g.mul(v, v);
        let s = g.sum_all(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss);
        assert_eq!(grads.get(p), store.get(p));
    }

    #[test]
    fn elementwise_ops_pass_check() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::new(2, 3, vec![0.3, -0.7, 1.2, 0.9, -0.2, 0.4]));
        let b = store.insert("b", Tensor::new(2, 3, vec![1.1, 0.6, -0.5, 0.8, 1.7, -0.9]));
        let r = store.insert("r", Tensor::row_vector(vec![0.2, -0.4, 0.9]));
        let report = check_gradients(&store, 1e-5, usize::MAX, |g| {
            let (av, bv, rv) = (g.param(a), g.param(b), g.param(r));
            let s = g.sigmoid(av);
            let d = g.div(s, bv);
            let m = g.maximum(d, av);
            let n = g.minimum(m, bv);
            let ab = g.abs(n);
            let l = g.add_scalar(ab, 1.0);
            let l = g.log(l);
            let row = g.mul_row(l, rv);
            let row = g.add_row(row, rv);
            let sm = g.softmax_rows(row);
            let lsm = g.log_softmax_rows(av);
            let c = g.concat_cols(&[sm, lsm]);
            let sl = g.slice_cols(c, 1, 4);
            let gr = g.gather_rows(sl, &[1, 0, 1]);
            let e = g.entries(gr, &[(0, 0), (2, 3), (1, 2)]);
            let mr = g.mean_rows(gr);
            let cr = g.concat_rows(&[mr, mr]);
            let t = Tensor::new(2, 4, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 1.0, 0.0]);
            let bce = g.bce_with_logits(cr, t);
            let se = g.sum_all(e);
            let x = g.add(bce, se);
            let y = g.sub(x, se);
            let y2 = g.mul(y, y);
            let y3 = g.add(y2, se);
            g.reshape(y3, 1, 1)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert_eq!(report.checked, 15);
    }

    #[test]
    fn matmul_variants_pass_check() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::new(2, 3, vec![0.3, -0.7, 1.2, 0.9, -0.2, 0.4]));
        let b = store.insert("b", Tensor::new(3, 2, vec![1.1, 0.6, -0.5, 0.8, 1.7, -0.9]));
        let c = store.insert("c", Tensor::new(4, 3, (0..12).map(|v| (v as f64 * 0.37).sin()).collect()));
        let report = check_gradients(&store, 1e-5, usize::MAX, |g| {
            let (av, bv, cv) = (g.param(a), g.param(b), g.param(c));
            let ab = g.matmul(av, bv);
            let ac = g.matmul_nt(av, cv);
            let s1 = g.sum_all(ab);
            let sq = g.mul(ac, ac);
            let s2 = g.sum_all(sq);
            g.add(s1, s2)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
