//! Central finite-difference checks of parameter gradients.

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::model::RedF;
use crate::nn::Mode;
use crate::params::{Grads, ParamId, ParamStore};
use crate::pipeline::MspSampleSet;
use crate::rng;
use crate::tensor::Tensor;
use crate::Result;

/// Default perturbation.
pub const STEP: f64 = 1e-4;
/// Default relative tolerance.
pub const REL_TOL: f64 = 1e-3;
/// Below this magnitude both gradients count as zero-ish; errors are taken
/// relative to this floor instead of the gradient itself.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

/// Compare `analytic` against central differences of `loss` for the listed
/// parameters. At most `per_param` entries (evenly spaced) are probed per
/// tensor; `usize::MAX` probes everything.
pub fn check<F>(store: &ParamStore, analytic: &Grads, ids: &[ParamId], per_param: usize, step: f64, tol: f64, mut loss: F) -> GradReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let mut report = GradReport::default();
    for &id in ids {
        let len = store.get(id).len();
        let probes = len.min(per_param.max(1));
        for k in 0..probes {
            let index = if probes == len { k } else { k * len / probes };
            let orig = store.get(id).data()[index];
            work.get_mut(id).data_mut()[index] = orig + step;
            let up = loss(&work);
            work.get_mut(id).data_mut()[index] = orig - step;
            let down = loss(&work);
            work.get_mut(id).data_mut()[index] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id).data()[index];
            let rel_err = relative_error(a, numeric);
            report.checked += 1;
            let m = || Mismatch { param: String::from(store.name(id)), index, analytic: a, numeric, rel_err };
            if rel_err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel_err);
                report.worst = Some(m());
            }
            if rel_err > tol || !rel_err.is_finite() {
                report.failures.push(m());
            }
        }
    }
    report
}

/// Check the full training objective of `model` on one sample, in evaluation
/// mode, against central differences for every parameter tensor.
pub fn check_model(model: &RedF, sample: &MspSampleSet, per_param: usize) -> Result<GradReport> {
    let (_, grads) = model.sample_gradients(&mut Mode::eval(), sample)?;
    let ids: Vec<ParamId> = (0..model.store.len()).map(ParamId).collect();
    let mut probe = model.clone();
    Ok(check(&model.store, &grads, &ids, per_param, STEP, REL_TOL, |s| {
        probe.store.clone_from(s);
        probe.sample_loss(&mut Mode::eval(), sample).map_or(f64::NAN, |p| p.total)
    }))
}

/// Largest relative error of one operation's input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Differentiate `sum(c ⊙ build(x))` for a fixed ramp `c` with respect to a
/// random normal input of `shape`, and compare every entry against central
/// differences.
pub fn check_op<F>(name: &'static str, shape: &[usize], seed: u64, build: F) -> OpCheck
where
    F: Fn(&mut Tape<'_>, Var) -> Var,
{
    let store = ParamStore::new();
    let mut r = rng::seeded(seed);
    let n: usize = shape.iter().product();
    let x0: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
    let eval = |x: &[f64]| -> (f64, Vec<f64>) {
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Tensor::new(shape, x.to_vec()).expect("shape matches input"));
        let y = build(&mut tape, xv);
        let m = tape.value(y).len();
        let c: Rc<[f64]> = (0..m).map(|i| 1.0 + 0.1 * i as f64).collect::<Vec<_>>().into();
        let s = tape.dot_const(y, c);
        let grads = tape.backward(s);
        let g = grads.wrt(xv).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        (tape.value(s).data()[0], g)
    };
    let (_, analytic) = eval(&x0);
    let h = 1e-5;
    let mut max_rel_err: f64 = 0.0;
    for i in 0..n {
        let mut x = x0.clone();
        x[i] = x0[i] + h;
        let up = eval(&x).0;
        x[i] = x0[i] - h;
        let down = eval(&x).0;
        let e = relative_error(analytic[i], (up - down) / (2.0 * h));
        max_rel_err = if e.is_finite() { max_rel_err.max(e) } else { f64::INFINITY };
    }
    OpCheck { name, checked: n, max_rel_err }
}

fn param_of<'p>(t: &mut Tape<'p>, shape: &[usize], seed: u64) -> Var {
    let mut r = rng::seeded(seed);
    let n: usize = shape.iter().product();
    t.constant(Tensor::new(shape, (0..n).map(|_| rng::normal(&mut r)).collect()).expect("shape matches data"))
}

/// Finite-difference checks of every differentiable tape operation.
///
/// `straight_through` is excluded: its forward value is a hard threshold, so
/// central differences see a step function. Its backward pass is the soft
/// path's, which `gumbel_sigmoid` covers.
pub fn op_suite() -> Vec<OpCheck> {
    let ramp = |n: usize| -> Rc<[f64]> { (0..n).map(|i| 0.5 + 0.25 * i as f64).collect::<Vec<_>>().into() };
    vec![
        check_op("add/sub/mul/scale", &[3, 4], 1, |t, x| {
            let y = t.scale(x, 2.0);
            let z = t.mul(y, x);
            let z = t.sub(z, x);
            t.add(z, y)
        }),
        check_op("mul_const", &[3, 4], 2, move |t, x| t.mul_const(x, ramp(12))),
        check_op("gelu", &[3, 4], 3, |t, x| t.gelu(x)),
        check_op("abs", &[3, 4], 4, |t, x| t.abs(x)),
        check_op("softplus", &[3, 4], 5, |t, x| t.softplus(x)),
        check_op("recip_eps", &[3, 4], 6, |t, x| {
            let a = t.abs(x);
            t.recip_eps(a, 0.3)
        }),
        check_op("matmul/add_bias", &[3, 4], 7, |t, x| {
            let w = param_of(t, &[4, 5], 70);
            let b = param_of(t, &[5], 71);
            let y = t.matmul(x, w);
            t.add_bias(y, b)
        }),
        check_op("matmul weight", &[4, 5], 8, |t, w| {
            let x = param_of(t, &[3, 4], 80);
            t.matmul(x, w)
        }),
        check_op("add_bias bias", &[5], 9, |t, b| {
            let x = param_of(t, &[3, 5], 90);
            t.add_bias(x, b)
        }),
        check_op("bmm", &[2, 3, 4], 10, |t, x| {
            let y = t.gelu(x);
            t.bmm(x, y, true)
        }),
        check_op("bmm untransposed", &[2, 3, 3], 11, |t, x| {
            let y = t.gelu(x);
            t.bmm(x, y, false)
        }),
        check_op("gather", &[2, 3], 12, |t, x| t.gather(x, vec![5, 0, 0, 3, 2].into(), &[5])),
        check_op("permute", &[2, 3, 4], 13, |t, x| t.permute(x, &[2, 0, 1])),
        check_op("concat_last/reshape", &[2, 3], 14, |t, x| {
            let y = t.scale(x, 3.0);
            let c = t.concat_last(x, y);
            t.reshape(c, &[12])
        }),
        check_op("softmax", &[3, 5], 15, |t, x| t.softmax(x)),
        check_op("masked_softmax logits", &[1, 2, 3, 3], 16, |t, x| {
            let m = t.constant(Tensor::new(&[1, 3, 3], vec![1.0, 0.0, 0.4, 0.0, 1.0, 1.0, 0.7, 1.0, 1.0]).expect("3x3"));
            t.masked_softmax(x, Some(m), 2)
        }),
        check_op("masked_softmax mask", &[1, 3, 3], 17, |t, m| {
            let mask = t.softmax(m);
            let logits = t.constant(Tensor::new(&[1, 2, 3, 3], (0..18).map(|i| libm::sin(i as f64 * 0.7)).collect()).expect("2x3x3"));
            t.masked_softmax(logits, Some(mask), 2)
        }),
        check_op("layer_norm", &[3, 4], 18, |t, x| {
            let g = param_of(t, &[4], 180);
            let b = param_of(t, &[4], 181);
            t.layer_norm(x, g, b)
        }),
        check_op("layer_norm affine", &[4], 19, |t, g| {
            let x = param_of(t, &[3, 4], 190);
            let b = param_of(t, &[4], 191);
            t.layer_norm(x, g, b)
        }),
        check_op("row_max_normalize", &[3, 5], 20, |t, x| {
            let a = t.abs(x);
            let a = t.recip_eps(a, 0.5);
            t.row_max_normalize(a)
        }),
        check_op("instance norm round trip", &[3, 5], 21, |t, x| {
            let m = t.mean_last(x);
            let c = t.sub_col(x, m);
            let sq = t.mul(c, c);
            let v = t.mean_last(sq);
            let s = t.clamped_sqrt(v, 1e-5);
            let n = t.div_col(c, s);
            let n = t.mul_col(n, s);
            t.add_col(n, m)
        }),
        check_op("dft", &[2, 6], 22, |t, x| t.dft(x)),
        check_op("idft", &[2, 12], 23, |t, x| t.idft(x)),
        check_op("pairwise_l1", &[2, 3, 4], 24, |t, x| {
            let w = t.constant(Tensor::new(&[4], vec![0.5, 1.0, 1.5, 2.0]).expect("4"));
            t.pairwise_l1(x, w)
        }),
        check_op("pairwise_l1 weights", &[4], 25, |t, w| {
            let x = param_of(t, &[2, 3, 4], 250);
            let w = t.softplus(w);
            t.pairwise_l1(x, w)
        }),
        check_op("gumbel_sigmoid", &[2, 3], 26, |t, x| {
            let p = t.softmax(x);
            t.gumbel_sigmoid(p, &[0.3, -0.2, 0.1, 0.0, 1.0, -1.0], 0.5)
        }),
        check_op("mse", &[2, 3], 27, |t, x| {
            let y = param_of(t, &[2, 3], 270);
            t.mse(x, y)
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for op in op_suite() {
            assert!(op.max_rel_err < 1e-4, "{op:?}");
        }
    }

    #[test]
    fn accepts_correct_and_rejects_wrong_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![0.3, -1.2]).unwrap());
        let f = |s: &ParamStore| {
            let w = s.get(id).data();
            w[0] * w[0] * w[1] + libm::sin(w[1])
        };
        let w = [0.3, -1.2];
        let mut g = Grads::zeros_like(&store);
        g.tensors[0] = Tensor::new(&[2], vec![2.0 * w[0] * w[1], w[0] * w[0] + libm::cos(w[1])]).unwrap();
        let r = check(&store, &g, &[id], usize::MAX, STEP, REL_TOL, f);
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 2);
        g.tensors[0].data_mut()[1] *= 1.01;
        let r = check(&store, &g, &[id], usize::MAX, STEP, REL_TOL, f);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.worst.unwrap().index, 1);
    }
}
