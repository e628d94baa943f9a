//! Maximum-likelihood recalibration with the LLO family and the likelihood
//! ratio test of calibration.
//!
//! The log-likelihood is maximized over the unconstrained coordinates
//! `(ln delta, gamma)`. In those coordinates the model is a logistic
//! regression of `y` on `logit(x)` with a free intercept, so the surface is
//! concave. A Nelder-Mead simplex started at the identity does the search and
//! a few damped Newton steps polish the optimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probability::{llo_adjust, loglik_slices, LloParams, Probability};
use crate::scalar::{clamp_probability, inv_logit, logit, Scalar};

/// Relative log-likelihood change that ends the simplex search.
pub const REL_TOLERANCE: f64 = 1e-10;
/// Simplex iteration budget.
pub const MAX_ITERATIONS: usize = 500;
/// Degrees of freedom of the likelihood ratio test (delta and gamma).
pub const LRT_DEGREES_OF_FREEDOM: u32 = 2;

const NEWTON_STEPS: usize = 50;

/// Predictions paired with binary outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDataset<T> {
    predictions: Vec<Probability<T>>,
    outcomes: Vec<bool>,
}

impl<T: Scalar> CalibrationDataset<T> {
    pub fn new(predictions: Vec<Probability<T>>, outcomes: Vec<bool>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Input("calibration dataset is empty".into()));
        }
        if predictions.len() != outcomes.len() {
            return Err(Error::Input(format!(
                "{} predictions but {} outcomes",
                predictions.len(),
                outcomes.len()
            )));
        }
        Ok(Self {
            predictions,
            outcomes,
        })
    }

    pub fn from_raw(predictions: &[T], outcomes: &[bool]) -> Result<Self> {
        let predictions = predictions
            .iter()
            .map(|&p| Probability::new(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(predictions, outcomes.to_vec())
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn predictions(&self) -> &[Probability<T>] {
        &self.predictions
    }

    pub fn outcomes(&self) -> &[bool] {
        &self.outcomes
    }

    /// Log-likelihood of the outcomes when the event probability is `g(x; params)`.
    pub fn loglik(&self, params: &LloParams<T>) -> T {
        loglik_slices(&self.predictions, &self.outcomes, params)
            .expect("dataset lengths validated at construction")
    }

    /// The dataset seen from the other class: `(1 - x, 1 - y)`.
    pub fn label_flipped(&self) -> Self {
        Self {
            predictions: self.predictions.iter().map(|p| p.complement()).collect(),
            outcomes: self.outcomes.iter().map(|y| !y).collect(),
        }
    }
}

/// Result of a maximum-likelihood recalibration fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecalibrationFit<T> {
    pub params_hat: LloParams<T>,
    pub loglik_at_mle: T,
    pub loglik_at_identity: T,
    /// `2 (loglik_at_mle - loglik_at_identity)`, floored at zero.
    pub lrt_statistic: T,
    /// Upper tail of the chi-square distribution with two degrees of freedom.
    pub p_value: T,
    pub converged: bool,
    pub iterations: usize,
}

/// Upper tail probability of a chi-square variable with two degrees of freedom.
///
/// The regularized upper incomplete gamma `Q(1, s/2)` reduces to `exp(-s/2)`.
pub fn chi_square_2df_sf<T: Scalar>(statistic: T) -> T {
    if statistic <= T::zero() {
        T::one()
    } else {
        (-statistic / T::lit(2.0)).exp()
    }
}

/// Objective over `(ln delta, gamma)` with the per-observation logits cached.
struct Objective<'a, T> {
    logits: Vec<T>,
    outcomes: &'a [bool],
}

impl<'a, T: Scalar> Objective<'a, T> {
    fn new(data: &'a CalibrationDataset<T>) -> Self {
        Self {
            logits: data.predictions.iter().map(|p| logit(p.clamped())).collect(),
            outcomes: &data.outcomes,
        }
    }

    fn value(&self, theta: [T; 2]) -> T {
        let [a, g] = theta;
        self.logits
            .iter()
            .zip(self.outcomes)
            .map(|(&l, &y)| {
                let q = clamp_probability(inv_logit(g * l + a));
                if y {
                    q.ln()
                } else {
                    (-q).ln_1p()
                }
            })
            .sum()
    }

    /// Gradient and Hessian of the unclamped logistic log-likelihood.
    fn derivatives(&self, theta: [T; 2]) -> ([T; 2], [[T; 2]; 2]) {
        let [a, g] = theta;
        let zero = T::zero();
        let (mut ga, mut gg) = (zero, zero);
        let (mut haa, mut hag, mut hgg) = (zero, zero, zero);
        for (&l, &y) in self.logits.iter().zip(self.outcomes) {
            let q = inv_logit(g * l + a);
            let r = if y { T::one() - q } else { -q };
            let w = q * (T::one() - q);
            ga = ga + r;
            gg = gg + r * l;
            haa = haa - w;
            hag = hag - w * l;
            hgg = hgg - w * l * l;
        }
        ([ga, gg], [[haa, hag], [hag, hgg]])
    }
}

struct SimplexResult<T> {
    best: [T; 2],
    value: T,
    iterations: usize,
    converged: bool,
}

/// Nelder-Mead maximization in two dimensions.
fn nelder_mead<T: Scalar>(
    f: impl Fn([T; 2]) -> T,
    start: [T; 2],
    step: T,
    rel_tol: T,
    max_iter: usize,
) -> SimplexResult<T> {
    let (alpha, gamma, rho, sigma) = (T::one(), T::lit(2.0), T::lit(0.5), T::lit(0.5));
    let mut pts = [
        start,
        [start[0] + step, start[1]],
        [start[0], start[1] + step],
    ];
    // Minimize the negative log-likelihood.
    let neg = |x: [T; 2]| -f(x);
    let mut vals = pts.map(neg);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).expect("finite objective"));
        pts = order.map(|i| pts[i]);
        vals = order.map(|i| vals[i]);

        let spread = (vals[2] - vals[0]).abs();
        if spread <= rel_tol * vals[0].abs().max(T::one()) {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid = [
            (pts[0][0] + pts[1][0]) / T::lit(2.0),
            (pts[0][1] + pts[1][1]) / T::lit(2.0),
        ];
        let toward = |c: T| [
            centroid[0] + c * (pts[2][0] - centroid[0]),
            centroid[1] + c * (pts[2][1] - centroid[1]),
        ];

        let reflected = toward(-alpha);
        let fr = neg(reflected);
        if fr < vals[0] {
            let expanded = toward(-gamma);
            let fe = neg(expanded);
            if fe < fr {
                pts[2] = expanded;
                vals[2] = fe;
            } else {
                pts[2] = reflected;
                vals[2] = fr;
            }
            continue;
        }
        if fr < vals[1] {
            pts[2] = reflected;
            vals[2] = fr;
            continue;
        }
        let (contracted, fc) = if fr < vals[2] {
            let c = toward(-rho);
            (c, neg(c))
        } else {
            let c = toward(rho);
            (c, neg(c))
        };
        if fc < vals[2].min(fr) {
            pts[2] = contracted;
            vals[2] = fc;
            continue;
        }
        for i in 1..3 {
            pts[i] = [
                pts[0][0] + sigma * (pts[i][0] - pts[0][0]),
                pts[0][1] + sigma * (pts[i][1] - pts[0][1]),
            ];
            vals[i] = neg(pts[i]);
        }
    }

    let best_idx = (0..3)
        .min_by(|&i, &j| vals[i].partial_cmp(&vals[j]).expect("finite objective"))
        .unwrap_or(0);
    SimplexResult {
        best: pts[best_idx],
        value: -vals[best_idx],
        iterations,
        converged,
    }
}

/// Damped Newton ascent from a simplex optimum. Returns the polished point
/// and whether the gradient tolerance was met.
fn newton_polish<T: Scalar>(obj: &Objective<'_, T>, start: [T; 2], start_value: T) -> ([T; 2], T, bool) {
    let n = T::from_usize(obj.logits.len()).expect("count fits scalar");
    let grad_tol = T::lit(1e-10).max(T::epsilon() * T::lit(100.0));
    let mut theta = start;
    let mut value = start_value;
    for _ in 0..NEWTON_STEPS {
        let (g, h) = obj.derivatives(theta);
        if (g[0] * g[0] + g[1] * g[1]).sqrt() / n <= grad_tol {
            return (theta, value, true);
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if !(det.abs() > T::zero()) || !det.is_finite() {
            break;
        }
        // Newton direction -H^{-1} g.
        let d0 = -(h[1][1] * g[0] - h[0][1] * g[1]) / det;
        let d1 = -(-h[1][0] * g[0] + h[0][0] * g[1]) / det;
        let mut t = T::one();
        let mut improved = false;
        for _ in 0..30 {
            let cand = [theta[0] + t * d0, theta[1] + t * d1];
            let v = obj.value(cand);
            if v.is_finite() && v >= value {
                theta = cand;
                value = v;
                improved = true;
                break;
            }
            t = t / T::lit(2.0);
        }
        if !improved {
            break;
        }
    }
    let (g, _) = obj.derivatives(theta);
    let ok = (g[0] * g[0] + g[1] * g[1]).sqrt() / n <= T::lit(1e-6).max(grad_tol);
    (theta, value, ok)
}

/// Maximum-likelihood estimate of `(delta, gamma)` together with the
/// likelihood ratio test against the identity.
pub fn fit_mle<T: Scalar>(data: &CalibrationDataset<T>) -> Result<RecalibrationFit<T>> {
    let events = data.outcomes.iter().filter(|&&y| y).count();
    if events == 0 || events == data.len() {
        return Err(Error::DegenerateData {
            n: data.len(),
            value: u8::from(events > 0),
        });
    }

    let obj = Objective::new(data);
    let rel_tol = T::lit(REL_TOLERANCE).max(T::epsilon() * T::lit(16.0));
    let simplex = nelder_mead(
        |x| obj.value(x),
        [T::zero(), T::one()],
        T::lit(0.5),
        rel_tol,
        MAX_ITERATIONS,
    );
    let (theta, _, polished) = newton_polish(&obj, simplex.best, simplex.value);
    let converged = simplex.converged || polished;

    let params_hat = LloParams::from_log_delta(theta[0], theta[1])?;
    let loglik_at_mle = data.loglik(&params_hat);
    if !converged {
        return Err(Error::NotConverged {
            delta: params_hat.delta().as_f64(),
            gamma: params_hat.gamma().as_f64(),
            loglik: loglik_at_mle.as_f64(),
            iterations: simplex.iterations,
        });
    }

    let loglik_at_identity = data.loglik(&LloParams::identity());
    let lrt_statistic = (T::lit(2.0) * (loglik_at_mle - loglik_at_identity)).max(T::zero());
    Ok(RecalibrationFit {
        params_hat,
        loglik_at_mle,
        loglik_at_identity,
        lrt_statistic,
        p_value: chi_square_2df_sf(lrt_statistic),
        converged,
        iterations: simplex.iterations,
    })
}

/// Likelihood ratio test of the null hypothesis that the predictions are
/// calibrated. Rejection at a chosen level is left to the caller.
pub fn calibration_test<T: Scalar>(data: &CalibrationDataset<T>) -> Result<RecalibrationFit<T>> {
    fit_mle(data)
}

/// Recalibrate predictions with fitted parameters.
pub fn apply_fit<T: Scalar>(
    predictions: &[Probability<T>],
    fit: &RecalibrationFit<T>,
) -> Result<Vec<Probability<T>>> {
    if !fit.converged {
        return Err(Error::Config("cannot apply a fit that did not converge".into()));
    }
    Ok(predictions
        .iter()
        .map(|&x| llo_adjust(x, &fit.params_hat))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(n: usize, truth: LloParams<f64>, seed: u64) -> CalibrationDataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.random();
            let q = llo_adjust(Probability::new(x).unwrap(), &truth).value();
            xs.push(x);
            ys.push(rng.random::<f64>() < q);
        }
        CalibrationDataset::from_raw(&xs, &ys).unwrap()
    }

    #[test]
    fn chi_square_tail() {
        // scipy.stats.chi2.sf(5.991464547107979, 2) == 0.05
        assert!((chi_square_2df_sf(5.991_464_547_107_979f64) - 0.05).abs() < 1e-15);
        assert_eq!(chi_square_2df_sf(0.0f64), 1.0);
        assert_eq!(chi_square_2df_sf(-1e-12f64), 1.0);
    }

    #[test]
    fn degenerate_outcomes_rejected() {
        let d = CalibrationDataset::from_raw(&[0.2, 0.7, 0.9], &[true, true, true]).unwrap();
        assert!(matches!(fit_mle(&d), Err(Error::DegenerateData { value: 1, .. })));
        let d = CalibrationDataset::from_raw(&[0.2, 0.7], &[false, false]).unwrap();
        assert!(matches!(fit_mle(&d), Err(Error::DegenerateData { value: 0, .. })));
    }

    #[test]
    fn dataset_validation() {
        assert!(CalibrationDataset::<f64>::from_raw(&[], &[]).is_err());
        assert!(CalibrationDataset::from_raw(&[0.5], &[true, false]).is_err());
    }

    #[test]
    fn recovers_shifted_generator() {
        let d = synthetic(50_000, LloParams::new(2.0, 1.0).unwrap(), 11);
        let fit = fit_mle(&d).unwrap();
        assert!((fit.params_hat.delta() - 2.0).abs() < 0.1, "{fit:?}");
        assert!((fit.params_hat.gamma() - 1.0).abs() < 0.05, "{fit:?}");
        assert!(fit.p_value < 1e-4);
    }

    #[test]
    fn calibrated_data_fits_near_identity() {
        let d = synthetic(50_000, LloParams::identity(), 12);
        let fit = fit_mle(&d).unwrap();
        assert!((fit.params_hat.delta() - 1.0).abs() < 0.05, "{fit:?}");
        assert!((fit.params_hat.gamma() - 1.0).abs() < 0.05, "{fit:?}");
        assert!(fit.loglik_at_mle >= fit.loglik_at_identity - 1e-8);
    }

    #[test]
    fn refit_of_recalibrated_data_is_fixed_point() {
        let d = synthetic(5_000, LloParams::new(0.89, 0.17).unwrap(), 13);
        let fit = fit_mle(&d).unwrap();
        let recal = apply_fit(d.predictions(), &fit).unwrap();
        let d2 = CalibrationDataset::new(recal, d.outcomes().to_vec()).unwrap();
        let refit = fit_mle(&d2).unwrap();
        assert!((refit.params_hat.delta() - 1.0).abs() < 1e-4, "{refit:?}");
        assert!((refit.params_hat.gamma() - 1.0).abs() < 1e-4, "{refit:?}");
        assert!(refit.lrt_statistic < 1e-6);
    }

    #[test]
    fn apply_fit_examples() {
        let mk = |d: f64, g: f64| RecalibrationFit {
            params_hat: LloParams::new(d, g).unwrap(),
            loglik_at_mle: 0.0,
            loglik_at_identity: 0.0,
            lrt_statistic: 0.0,
            p_value: 1.0,
            converged: true,
            iterations: 0,
        };
        let x = [Probability::new(0.42).unwrap()];
        assert_eq!(apply_fit(&x, &mk(1.0, 1.0)).unwrap()[0].value(), 0.42);
        let x = [Probability::new(0.9).unwrap()];
        let v = apply_fit(&x, &mk(0.89, 0.17)).unwrap()[0].value();
        assert!((v - 0.563_897_296_370_907_9).abs() < 1e-14);
        let x = [Probability::new(0.5).unwrap()];
        let v = apply_fit(&x, &mk(2.0, 1.0)).unwrap()[0].value();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);

        let mut bad = mk(1.0, 1.0);
        bad.converged = false;
        assert!(apply_fit(&x, &bad).is_err());
    }

    #[test]
    fn label_flip_equivariance() {
        let d = synthetic(20_000, LloParams::new(1.7, 0.6).unwrap(), 14);
        let fit = fit_mle(&d).unwrap();
        let flipped = fit_mle(&d.label_flipped()).unwrap();
        assert!((flipped.params_hat.delta() * fit.params_hat.delta() - 1.0).abs() < 1e-3);
        assert!((flipped.params_hat.gamma() - fit.params_hat.gamma()).abs() < 1e-3);
        assert!((flipped.lrt_statistic - fit.lrt_statistic).abs() < 1e-3);
    }

    #[test]
    fn lrt_invariant_to_permutation() {
        let d = synthetic(3_000, LloParams::new(0.6, 1.4).unwrap(), 15);
        let fit = fit_mle(&d).unwrap();
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.reverse();
        idx.rotate_left(123);
        let ps: Vec<_> = idx.iter().map(|&i| d.predictions()[i]).collect();
        let ys: Vec<_> = idx.iter().map(|&i| d.outcomes()[i]).collect();
        let fit2 = fit_mle(&CalibrationDataset::new(ps, ys).unwrap()).unwrap();
        assert!((fit.lrt_statistic - fit2.lrt_statistic).abs() < 1e-6 * fit.lrt_statistic.max(1.0));
    }

    #[test]
    fn f32_fit_runs() {
        let d = synthetic(5_000, LloParams::new(2.0, 1.0).unwrap(), 16);
        let xs: Vec<f32> = d.predictions().iter().map(|p| p.value() as f32).collect();
        let d32 = CalibrationDataset::from_raw(&xs, d.outcomes()).unwrap();
        let fit = fit_mle(&d32).unwrap();
        assert!((fit.params_hat.delta() - 2.0).abs() < 0.3);
    }
}
