//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use apollo_core::autodiff::{LayerSpec, MlpArchitecture, Mode, ParamModel, RunningStats, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain-loop forward pass and mean cross-entropy, written without the tape.
/// Returns the loss and the sign pattern of every ReLU input so callers can
/// tell when a finite-difference probe crossed a kink.
pub fn reference_loss(model: &ParamModel, params: &[Vec<f64>], x: &[f64], labels: &[usize], batch_stats: bool) -> (f64, Vec<bool>) {
    let n = labels.len();
    let mut h: Vec<f64> = x.to_vec();
    let mut width = x.len() / n;
    let mut p = 0;
    let mut bn = 0;
    let mut pattern = Vec::new();
    for layer in &model.architecture().layers {
        match *layer {
            LayerSpec::Linear { inputs, outputs } => {
                let (w, b) = (&params[p], &params[p + 1]);
                let mut out = vec![0.0; n * outputs];
                for r in 0..n {
                    for o in 0..outputs {
                        let mut s = b[o];
                        for i in 0..inputs {
                            s += h[r * inputs + i] * w[o * inputs + i];
                        }
                        out[r * outputs + o] = s;
                    }
                }
                h = out;
                width = outputs;
                p += 2;
            }
            LayerSpec::Relu => {
                pattern.extend(h.iter().map(|v| *v > 0.0));
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            LayerSpec::BatchNorm { channels } => {
                let (g, beta) = (&params[p], &params[p + 1]);
                let (mean, var): (Vec<f64>, Vec<f64>) = if batch_stats {
                    (0..channels)
                        .map(|c| {
                            let m = (0..n).map(|r| h[r * channels + c]).sum::<f64>() / n as f64;
                            let v = (0..n).map(|r| (h[r * channels + c] - m).powi(2)).sum::<f64>() / n as f64;
                            (m, v)
                        })
                        .unzip()
                } else {
                    let s = &model.bn_stats()[bn];
                    (s.mean.clone(), s.var.clone())
                };
                for r in 0..n {
                    for c in 0..channels {
                        let v = &mut h[r * channels + c];
                        *v = g[c] * (*v - mean[c]) / (var[c] + 1e-5).sqrt() + beta[c];
                    }
                }
                p += 2;
                bn += 1;
            }
        }
    }
    let mut loss = 0.0;
    for r in 0..n {
        let row = &h[r * width..(r + 1) * width];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[r]];
    }
    (loss / n as f64, pattern)
}

/// Tape gradients of the mean cross-entropy for every parameter and the input.
pub fn tape_gradients(model: &ParamModel, x: &[f64], labels: &[usize], batch_stats: bool) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let n = labels.len();
    let mut tape = Tape::new();
    let input = tape.leaf(x.to_vec(), n, x.len() / n, true).unwrap();
    let rec = model.record(&mut tape, input, batch_stats, true).unwrap();
    let loss = tape.cross_entropy(rec.logits, labels).unwrap();
    let value = tape.scalar(loss);
    let grads = tape.backward(loss).unwrap();
    let params = rec.params.iter().map(|&v| grads.get(v).unwrap().to_vec()).collect();
    (value, params, grads.get(input).unwrap().to_vec())
}

pub const FD_STEP: f64 = 1e-3;

/// Relative error with a floor so vanishing gradients, which differences only
/// resolve to rounding noise, compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Probes whose +h or -h evaluation flipped a ReLU; the difference quotient
    /// is not a derivative there.
    pub kinks: usize,
    pub max_rel: f64,
}

impl GradReport {
    /// `evals` holds the loss at offsets -2h, -h, +h, +2h.
    fn probe(&mut self, analytic: f64, evals: [(f64, Vec<bool>); 4], base: &[bool]) {
        if evals.iter().any(|e| e.1 != base) {
            self.kinks += 1;
            return;
        }
        let f = |i: usize| evals[i].0;
        let numeric = (f(0) - 8.0 * f(1) + 8.0 * f(2) - f(3)) / (12.0 * FD_STEP);
        self.checked += 1;
        self.max_rel = self.max_rel.max(relative_error(analytic, numeric));
    }
}

const OFFSETS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

/// Five-point central differences for the chosen parameter entries (`None`
/// checks every entry) and for every input coordinate.
pub fn check_gradients(model: &ParamModel, x: &[f64], labels: &[usize], batch_stats: bool, select: Option<&dyn Fn(usize, usize) -> bool>) -> GradReport {
    let (_, grads, input_grad) = tape_gradients(model, x, labels, batch_stats);
    let mut params: Vec<Vec<f64>> = model.params().iter().map(|t| t.data().to_vec()).collect();
    let (_, base) = reference_loss(model, &params, x, labels, batch_stats);
    let mut report = GradReport::default();
    for t in 0..params.len() {
        for k in 0..params[t].len() {
            if select.is_some_and(|s| !s(t, k)) {
                continue;
            }
            let orig = params[t][k];
            let evals = OFFSETS.map(|o| {
                params[t][k] = orig + o * FD_STEP;
                reference_loss(model, &params, x, labels, batch_stats)
            });
            params[t][k] = orig;
            report.probe(grads[t][k], evals, &base);
        }
    }
    let mut xs = x.to_vec();
    for k in 0..xs.len() {
        let orig = xs[k];
        let evals = OFFSETS.map(|o| {
            xs[k] = orig + o * FD_STEP;
            reference_loss(model, &params, &xs, labels, batch_stats)
        });
        xs[k] = orig;
        report.probe(input_grad[k], evals, &base);
    }
    report
}

/// Random weights everywhere, including batch-norm scale, shift and running moments.
fn scrambled(arch: MlpArchitecture, rng: &mut ChaCha8Rng) -> ParamModel {
    let base = ParamModel::init(arch.clone(), rng.random()).unwrap();
    let params = base
        .params()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            t
        })
        .collect();
    let stats = base
        .bn_stats()
        .iter()
        .map(|s| RunningStats {
            mean: s.mean.iter().map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: s.var.iter().map(|_| rng.random_range(0.5..2.0)).collect(),
        })
        .collect();
    ParamModel::from_parts(arch, params, stats, Mode::Eval).unwrap()
}

/// Every entry of `count` random models of at most three hidden blocks and
/// eight units, alternating batch and running statistics. Returns each report
/// with the number of input coordinates of its case.
pub fn small_model_reports(count: usize) -> Vec<(GradReport, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    (0..count)
        .map(|case| {
            let arch = MlpArchitecture::blocks(rng.random_range(1..=3), rng.random_range(2..=8), rng.random_range(0..=2), rng.random_range(2..=4));
            let model = scrambled(arch.clone(), &mut rng);
            let n = rng.random_range(2..=5);
            let x: Vec<f64> = (0..n * arch.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..arch.classes())).collect();
            (check_gradients(&model, &x, &labels, case % 2 == 0, None), x.len())
        })
        .collect()
}

/// The full-size network in training mode on a batch of four.
pub fn table3_report() -> GradReport {
    let model = ParamModel::init(MlpArchitecture::table3(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = [0, 1, 2, 3];
    let last = model.params().len() - 2;
    let lens: Vec<usize> = model.params().iter().map(|p| p.data().len()).collect();
    // First and last linear layers and every input in full; hidden vectors
    // every 8th entry, hidden matrices every 1031st (64 per matrix). Probes
    // whose stencil flips any ReLU are skipped, which is most of them here.
    let select = |t: usize, k: usize| t < 2 || t >= last || k % if lens[t] > 256 { 1031 } else { 8 } == 0;
    check_gradients(&model, &x, &labels, true, Some(&select))
}
