//! Reference attacks: a posterior classifier and a per-sample Gaussian
//! likelihood-ratio test over shadow confidences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidences are clamped into `[CONFIDENCE_CLAMP, 1 - CONFIDENCE_CLAMP]`.
pub const CONFIDENCE_CLAMP: f64 = 1e-6;
pub const SIGMA_MIN: f64 = 1e-6;

pub fn logit_transform(p: f64) -> f64 {
    let p = p.clamp(CONFIDENCE_CLAMP, 1.0 - CONFIDENCE_CLAMP);
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceScale {
    #[default]
    Logit,
    Probability,
}

impl ConfidenceScale {
    pub fn apply(self, p: f64) -> f64 {
        match self {
            ConfidenceScale::Logit => logit_transform(p),
            ConfidenceScale::Probability => p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    /// Population standard deviation, floored at [`SIGMA_MIN`].
    pub std: f64,
    pub count: usize,
}

impl Gaussian {
    pub fn fit(samples: &[f64]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InsufficientSamples(format!("Gaussian fit needs 2 samples, got {}", samples.len())));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian fit sample".into()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt().max(SIGMA_MIN), count: samples.len() })
    }

    pub fn log_pdf(&self, v: f64) -> f64 {
        let z = (v - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiraFit {
    /// Base shadows trained without the target.
    pub shadow: Gaussian,
    /// Shadows that trained on the target and then unlearned it.
    pub unlearned: Gaussian,
    pub scale: ConfidenceScale,
}

/// Fit both hypotheses from raw confidences `f(x)_y`.
pub fn ulira_fit(shadow_conf: &[f64], unlearned_conf: &[f64], scale: ConfidenceScale) -> Result<LiraFit> {
    let t = |xs: &[f64]| xs.iter().map(|p| scale.apply(*p)).collect::<Vec<_>>();
    Ok(LiraFit { shadow: Gaussian::fit(&t(shadow_conf))?, unlearned: Gaussian::fit(&t(unlearned_conf))?, scale })
}

/// Log-likelihood ratio of the unlearned hypothesis over the never-trained one.
pub fn ulira_score(confidence: f64, fit: &LiraFit) -> f64 {
    let v = fit.scale.apply(confidence);
    fit.unlearned.log_pdf(v) - fit.shadow.log_pdf(v)
}

/// L2-regularized logistic regression on posterior vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
}

pub const UMIA_LAMBDA: f64 = 1e-3;
const NEWTON_ITERS: usize = 100;

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap_or(col);
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::NonFinite("singular Newton system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Newton's method on the mean log-loss plus `lambda/2 |w|^2` (bias unpenalized).
pub fn umia_train(members: &[Vec<f64>], non_members: &[Vec<f64>], lambda: f64) -> Result<LogisticModel> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::InsufficientSamples("posterior classifier needs both classes".into()));
    }
    let dim = members[0].len();
    if members.iter().chain(non_members).any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch("posterior vectors differ in length".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("regularization must be positive, got {lambda}")));
    }
    let data: Vec<(&Vec<f64>, f64)> =
        members.iter().map(|v| (v, 1.0)).chain(non_members.iter().map(|v| (v, 0.0))).collect();
    let n = data.len() as f64;
    let k = dim + 1;
    let mut theta = vec![0.0; k];
    for _ in 0..NEWTON_ITERS {
        let mut grad = vec![0.0; k];
        let mut hess = vec![vec![0.0; k]; k];
        for (x, y) in &data {
            let z = theta[dim] + x.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>();
            let p = sigmoid(z);
            let w = p * (1.0 - p);
            let feat = |i: usize| if i == dim { 1.0 } else { x[i] };
            for i in 0..k {
                grad[i] += (p - y) * feat(i) / n;
                for j in 0..k {
                    hess[i][j] += w * feat(i) * feat(j) / n;
                }
            }
        }
        for i in 0..dim {
            grad[i] += lambda * theta[i];
            hess[i][i] += lambda;
        }
        hess[dim][dim] += 1e-12;
        let step = solve(hess, grad.clone())?;
        theta.iter_mut().zip(&step).for_each(|(t, s)| *t -= s);
        if step.iter().map(|s| s * s).sum::<f64>().sqrt() < 1e-12 {
            break;
        }
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("posterior classifier diverged".into()));
    }
    let bias = theta.pop().unwrap_or(0.0);
    Ok(LogisticModel { weights: theta, bias, lambda })
}

impl LogisticModel {
    /// Log-odds of membership.
    pub fn score(&self, posterior: &[f64]) -> f64 {
        self.bias + posterior.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn accuracy(&self, members: &[Vec<f64>], non_members: &[Vec<f64>]) -> f64 {
        let hits = members.iter().filter(|v| self.score(v) > 0.0).count()
            + non_members.iter().filter(|v| self.score(v) <= 0.0).count();
        hits as f64 / (members.len() + non_members.len()) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logit_closed_forms() {
        assert_eq!(logit_transform(0.5), 0.0);
        assert!((logit_transform(0.9) - 9f64.ln()).abs() < 1e-12);
        assert!((logit_transform(0.9) - 2.19722).abs() < 1e-5);
        assert!(logit_transform(1.0).is_finite());
        assert!(logit_transform(0.0).is_finite());
    }

    #[test]
    fn logit_round_trip() {
        let mut p = CONFIDENCE_CLAMP;
        while p <= 1.0 - CONFIDENCE_CLAMP {
            assert!((sigmoid(logit_transform(p)) - p).abs() < 1e-12, "p = {p}");
            p += 0.000731;
        }
    }

    #[test]
    fn degenerate_and_two_point_fits() {
        let g = Gaussian::fit(&[0.3; 5]).unwrap();
        assert_eq!(g.std, SIGMA_MIN);
        let g = Gaussian::fit(&[-1.0, 1.0]).unwrap();
        assert_eq!((g.mean, g.std), (0.0, 1.0));
        assert!(Gaussian::fit(&[1.0]).is_err());
    }

    #[test]
    fn score_properties() {
        let same = LiraFit {
            shadow: Gaussian { mean: 1.0, std: 0.5, count: 4 },
            unlearned: Gaussian { mean: 1.0, std: 0.5, count: 4 },
            scale: ConfidenceScale::Probability,
        };
        assert_eq!(ulira_score(0.3, &same), 0.0);
        let fit = LiraFit {
            shadow: Gaussian { mean: -1.0, std: 0.5, count: 4 },
            unlearned: Gaussian { mean: 1.0, std: 0.5, count: 4 },
            scale: ConfidenceScale::Probability,
        };
        assert!(ulira_score(1.0, &fit) > 0.0);
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let v = 1.0 - 2.0 * i as f64 / 100.0;
            let s = ulira_score(v, &fit);
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn separable_posteriors() {
        let members: Vec<Vec<f64>> = (0..10).map(|i| vec![0.9 - 0.01 * i as f64, 0.1 + 0.01 * i as f64]).collect();
        let others: Vec<Vec<f64>> = (0..10).map(|i| vec![0.3 - 0.01 * i as f64, 0.7 + 0.01 * i as f64]).collect();
        let model = umia_train(&members, &others, 1e-4).unwrap();
        assert_eq!(model.accuracy(&members, &others), 1.0);
        assert!(umia_train(&members, &[], 1e-3).is_err());
    }

    #[test]
    fn order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut draw = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| vec![rng.random(), rng.random()]).collect() };
        let members = draw(15);
        let others = draw(12);
        let a = umia_train(&members, &others, UMIA_LAMBDA).unwrap();
        let mut m2 = members.clone();
        m2.reverse();
        let mut o2 = others.clone();
        o2.rotate_left(5);
        let b = umia_train(&m2, &o2, UMIA_LAMBDA).unwrap();
        for v in members.iter().chain(&others) {
            assert!((a.score(v) - b.score(v)).abs() < 1e-9);
        }
    }
}
