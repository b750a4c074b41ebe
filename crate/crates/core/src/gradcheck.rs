//! Central finite-difference gradient checking in `f64`.
//!
//! Near a kink with slope jump `J` at distance `d < eps`, the central
//! difference is off by `J (eps - d) / (2 eps)` while the second difference
//! `D2` equals `J (eps - d) / eps^2`, so the error is `D2 * eps / 2`. A
//! coordinate whose discrepancy is covered by `|D2| * eps` is therefore
//! counted as non-smooth (ReLU kink, clamp boundary) and skipped rather than
//! scored.

use crate::losses::{translation_loss_bce, translation_loss_l2, triplet_loss_hardest};
use crate::mlp::{build_mlp, Gradients, Head, Mlp};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Denominator floor for the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-6;
/// Coordinates agreeing this well are always scored, however curved `f` is.
pub const KINK_MIN_ERROR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_nonsmooth: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped_nonsmooth: self.skipped_nonsmooth + other.skipped_nonsmooth,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic[k]` with the central difference of `f` along
/// coordinate `k` of `x`, for every `k`.
///
/// `x` is restored before returning.
pub fn check<F>(x: &mut [f64], analytic: &[f64], eps: f64, mut f: F) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut report = GradCheckReport::default();
    let f0 = f(x);
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + eps;
        let fp = f(x);
        x[k] = orig - eps;
        let fm = f(x);
        x[k] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = relative_error(analytic[k], numeric);
        let d2 = (fp - 2.0 * f0 + fm) / (eps * eps);
        if rel > KINK_MIN_ERROR && (analytic[k] - numeric).abs() <= d2.abs() * eps {
            report.skipped_nonsmooth += 1;
            continue;
        }
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    report
}

/// Step used by [`gradient_suite`].
pub const SUITE_EPS: f64 = 1e-4;

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    m
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Checks parameter and input gradients of a train-mode network under the
/// objective `sum(y * w)` for a random weighting `w`.
pub fn check_model(model: &Mlp<f64>, x: &Array2<f64>, w: &Array2<f64>) -> GradCheckReport {
    let mut m = model.clone();
    let (_, cache) = m.forward_train(x.view()).expect("valid input");
    let mut grads = Gradients::zeros_like(&m);
    let dx = m.backward(w.view(), &cache, &mut grads).expect("valid cache");
    let objective = |m: &Mlp<f64>, input: &Array2<f64>| {
        let mut m = m.clone();
        (&m.forward_train(input.view()).expect("valid input").0 * w).sum()
    };
    let mut report = GradCheckReport::default();
    for k in 0..model.params().len() {
        let mut p = model.params()[k].to_vec();
        let r = check(&mut p, grads.slices()[k], SUITE_EPS, |v| {
            let mut m = model.clone();
            m.params_mut()[k].copy_from_slice(v);
            objective(&m, x)
        });
        report = report.merge(r);
    }
    let mut xin = flat(x);
    let r = check(&mut xin, &flat(&dx), SUITE_EPS, |v| {
        objective(model, &Array2::from_shape_vec(x.dim(), v.to_vec()).unwrap())
    });
    report.merge(r)
}

/// One named check of [`gradient_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub config: usize,
    pub name: String,
    pub report: GradCheckReport,
}

/// Finite-difference checks of every layer kind (through the four output
/// heads, which cover linear, ReLU, batch norm, sigmoid and unit-L2) and of
/// the L2, BCE and triplet losses, over `configs` random configurations.
pub fn gradient_suite(configs: usize, seed: u64) -> Vec<SuiteCase> {
    let mut out = Vec::new();
    for c in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
        let (din, dout) = (rng.gen_range(2..7), rng.gen_range(2..6));
        let hidden: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(2..8)).collect();
        let batch = rng.gen_range(3..7);
        let mut push = |name: &str, report| {
            out.push(SuiteCase {
                config: c,
                name: name.to_string(),
                report,
            })
        };
        for head in [Head::None, Head::Sigmoid, Head::UnitL2, Head::ReluThenUnitL2] {
            let model: Mlp<f64> = build_mlp(din, &hidden, dout, head, rng.gen()).unwrap();
            let x = randn(batch, din, &mut rng);
            let w = randn(batch, dout, &mut rng);
            push(&format!("mlp/{head:?}"), check_model(&model, &x, &w));
        }

        let target = randn(batch, dout, &mut rng);
        let mut pred = flat(&randn(batch, dout, &mut rng));
        let g = {
            let p = Array2::from_shape_vec((batch, dout), pred.clone()).unwrap();
            flat(&translation_loss_l2(p.view(), target.view()).unwrap().1)
        };
        let r = check(&mut pred, &g, SUITE_EPS, |v| {
            let p = Array2::from_shape_vec((batch, dout), v.to_vec()).unwrap();
            translation_loss_l2(p.view(), target.view()).unwrap().0
        });
        push("loss/l2", r);

        let bits = Array2::from_shape_fn((batch, dout), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let mut prob: Vec<f64> = (0..batch * dout).map(|_| rng.gen_range(0.05..0.95)).collect();
        let g = {
            let p = Array2::from_shape_vec((batch, dout), prob.clone()).unwrap();
            flat(&translation_loss_bce(p.view(), bits.view()).unwrap().1)
        };
        let r = check(&mut prob, &g, SUITE_EPS, |v| {
            let p = Array2::from_shape_vec((batch, dout), v.to_vec()).unwrap();
            translation_loss_bce(p.view(), bits.view()).unwrap().0
        });
        push("loss/bce", r);

        let margin = rng.gen_range(0.3..1.5);
        let ei = unit_rows(randn(batch, dout, &mut rng));
        let ej = unit_rows(&ei + &(randn(batch, dout, &mut rng) * 0.7));
        let t = triplet_loss_hardest(ei.view(), ej.view(), margin).unwrap();
        let mut xi = flat(&ei);
        let ri = check(&mut xi, &flat(&t.grad_i), SUITE_EPS, |v| {
            let a = Array2::from_shape_vec((batch, dout), v.to_vec()).unwrap();
            triplet_loss_hardest(a.view(), ej.view(), margin).unwrap().value
        });
        let mut xj = flat(&ej);
        let rj = check(&mut xj, &flat(&t.grad_j), SUITE_EPS, |v| {
            let b = Array2::from_shape_vec((batch, dout), v.to_vec()).unwrap();
            triplet_loss_hardest(ei.view(), b.view(), margin).unwrap().value
        });
        push("loss/triplet", ri.merge(rj));
    }
    out
}
