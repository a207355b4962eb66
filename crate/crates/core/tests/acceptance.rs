//! Acceptance suite. Prints one verdict line per criterion and exits non-zero
//! when any criterion fails.

mod common;

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use apollo_core::attack::{generate_adversarial, l2_distance, loss_under, AttackConfig, Conjecture, LossContext, StopReason, Variant};
use apollo_core::autodiff::{MlpArchitecture, ParamModel};
use apollo_core::baselines::Gaussian;
use apollo_core::harness::{
    build_shadows, play, prepare, run_methods, target_views, unlearn_challenger, Challenge, GameOutcome, GameSpec, Preset, RunReport,
};
use apollo_core::learn::Method;
use apollo_core::metrics::{roc_curve, tpr_at_fpr};
use apollo_core::region::region_map;
use apollo_core::shadow::{ShadowCache, ShadowEnsemble};
use apollo_core::{Execution, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::{small_model_reports, table3_report};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EXEC: Execution = Execution::Parallel;

struct Verdict {
    criterion: usize,
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(criterion: usize, pass: bool, detail: String) -> Self {
        println!("criterion {criterion}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        Self { criterion, pass, detail }
    }
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let small = small_model_reports(50);
    let table3 = table3_report();
    let elapsed = start.elapsed();
    let small_max = small.iter().map(|(r, _)| r.max_rel).fold(0.0, f64::max);
    let inputs_covered = small.iter().all(|(r, inputs)| r.checked >= *inputs);
    let pass = small_max < 1e-4 && inputs_covered && table3.max_rel < 1e-4 && elapsed < Duration::from_secs(60);
    Verdict::new(
        1,
        pass,
        format!(
            "small max_rel {small_max:.2e}, table3 max_rel {:.2e} over {} probes ({} skipped at ReLU kinks), {:.1}s",
            table3.max_rel,
            table3.checked,
            table3.kinks,
            elapsed.as_secs_f64()
        ),
    )
}

fn pairwise_auc(scores: &[f64], truths: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (si, _) in scores.iter().zip(truths).filter(|(_, t)| **t) {
        for (sj, _) in scores.iter().zip(truths).filter(|(_, t)| !**t) {
            wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            pairs += 1.0;
        }
    }
    wins / pairs
}

/// Best TPR at the largest FPR not above `target`, by counting every threshold.
fn brute_tpr_at_fpr(scores: &[f64], truths: &[bool], target: f64) -> (f64, f64) {
    let pos = truths.iter().filter(|t| **t).count() as f64;
    let neg = truths.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let tp = scores.iter().zip(truths).filter(|(s, m)| **m && **s >= t).count() as f64;
            let fp = scores.iter().zip(truths).filter(|(s, m)| !**m && **s >= t).count() as f64;
            (fp / neg, tp / pos)
        })
        .collect();
    let fpr = rates.iter().map(|r| r.0).filter(|f| *f <= target).fold(0.0, f64::max);
    let tpr = rates.iter().filter(|r| r.0 == fpr).map(|r| r.1).fold(0.0, f64::max);
    (tpr, fpr)
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut truths: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    truths[0] = true;
    truths[1] = false;
    truths
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_auc = 0.0f64;
    let mut tpr_mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(10..200);
        // Coarse rounding on some sets exercises ties.
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.random_range(-3.0..3.0);
                if coarse { (s * 2.0).round() / 2.0 } else { s }
            })
            .collect();
        let truths = random_labels(&mut rng, n);
        let roc = roc_curve(&scores, &truths).unwrap();
        worst_auc = worst_auc.max((roc.auc - pairwise_auc(&scores, &truths)).abs());
        for target in [0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0] {
            if tpr_at_fpr(&roc, target) != brute_tpr_at_fpr(&scores, &truths, target) {
                tpr_mismatches += 1;
            }
        }
    }
    let mut random_aucs = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let scores: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let truths: Vec<bool> = (0..4000).map(|i| i % 2 == 0).collect();
        random_aucs.push(roc_curve(&scores, &truths).unwrap().auc);
    }
    let mean = random_aucs.iter().sum::<f64>() / random_aucs.len() as f64;
    let spread = random_aucs.iter().map(|a| (a - 0.5).abs()).fold(0.0, f64::max);
    let pass = worst_auc < 1e-9 && tpr_mismatches == 0 && spread <= 0.05;
    Verdict::new(
        7,
        pass,
        format!("trapezoid vs pairwise max diff {worst_auc:.1e}; random AUC mean {mean:.4}, max |AUC-0.5| {spread:.4}; tpr_at_fpr mismatches {tpr_mismatches}"),
    )
}

fn locality_cases() -> Verdict {
    let models: Vec<ParamModel> = (0..6).map(|s| ParamModel::init(MlpArchitecture::blocks(2, 12, 1, 4), 100 + s).unwrap()).collect();
    let all: Vec<&ParamModel> = models.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut far, mut unsound, mut early) = (0, 0, 0);
    let variants = [Variant::Under, Variant::Over, Variant::UnderOffline, Variant::OverOffline];
    for _ in 0..1000 {
        let split = rng.random_range(1..5);
        let cfg = AttackConfig {
            variant: variants[rng.random_range(0..4)],
            steps: rng.random_range(0..50),
            epsilon: rng.random_range(0.01..2.0),
            tau: rng.random_range(0.0..=1.0),
            alpha: rng.random_range(0.0..5.0),
            beta: rng.random_range(0.01..5.0),
            inner_lr: rng.random_bool(0.5).then(|| rng.random_range(0.01..3.0)),
            ..AttackConfig::default()
        };
        let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let y = rng.random_range(0..4);
        let ctx = LossContext { x: x.clone(), y, in_models: all[..split].to_vec(), out_models: all[split..].to_vec(), shadows: all.clone() };
        let out = generate_adversarial(&ctx, &cfg).unwrap();
        if l2_distance(&x, &out.x_prime) > cfg.radius() {
            far += 1;
        }
        if out.stop_reason == StopReason::EarlyStop {
            early += 1;
            let batch = Tensor::new(vec![1, 2], out.x_prime.clone()).unwrap();
            let p = all.iter().map(|m| m.probabilities(&batch).unwrap().data()[y]).sum::<f64>() / all.len() as f64;
            if p >= cfg.tau {
                unsound += 1;
            }
        }
    }
    Verdict::new(5, far == 0 && unsound == 0, format!("1000 cases, {far} outside T*eps, {unsound}/{early} early stops at or above tau"))
}

fn gaussian_and_ulira(runs: &[SeedRun]) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for (mu, sigma) in [(4.0, 1.0), (-2.5, 0.8), (6.0, 2.0)] {
        let normal = Normal::new(mu, sigma).unwrap();
        let samples: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let fit = Gaussian::fit(&samples).unwrap();
        worst = worst.max(((fit.mean - mu) / mu).abs()).max(((fit.std - sigma) / sigma).abs());
    }
    let auc = |m: Method| mean(runs.iter().map(|r| r.outcome(m).report.ulira.as_ref().map_or(f64::NAN, |u| u.auc)));
    let (ga, rt) = (auc(Method::GradientAscent), auc(Method::Retrain));
    Verdict::new(8, worst <= 0.02 && ga > rt, format!("Gaussian fit worst relative error {:.2}%; U-LiRA AUC GA {ga:.3} vs RT {rt:.3}", worst * 100.0))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct SeedRun {
    spec: GameSpec,
    challenge: Challenge,
    ensemble: ShadowEnsemble,
    outcomes: Vec<(Method, GameOutcome)>,
    /// Original training, GA unlearning with its retrained reference, region map.
    region_time: Duration,
    /// Everything the GA game needs, shadows included.
    ga_time: Duration,
    _cache_dir: tempfile::TempDir,
    cache: ShadowCache,
}

impl SeedRun {
    fn outcome(&self, m: Method) -> &GameOutcome {
        &self.outcomes.iter().find(|(k, _)| *k == m).unwrap().1
    }
}

fn run_seed(seed: u64) -> SeedRun {
    let spec = GameSpec::toy(seed);
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = ShadowCache::new(cache_dir.path());
    let t = Instant::now();
    let challenge = prepare(&spec).unwrap();
    let prepare_time = t.elapsed();
    let t = Instant::now();
    let ensemble = build_shadows(&spec, &challenge, EXEC, Some(&cache)).unwrap();
    let shadow_time = t.elapsed();
    let mut outcomes = Vec::new();
    let (mut region_time, mut ga_time) = (prepare_time, prepare_time + shadow_time);
    for method in [Method::Retrain, Method::GradientAscent] {
        let s = spec.clone().with_method(method, Preset::Toy);
        let t = Instant::now();
        let (unlearned, retrained) = unlearn_challenger(&s, &challenge.split, &challenge.original).unwrap();
        let unlearn_time = t.elapsed();
        let t = Instant::now();
        let map = region_map(&challenge.original, &unlearned, &retrained, s.eval.region_resolution).unwrap();
        let map_time = t.elapsed();
        let t = Instant::now();
        let outcome = play(&s, &challenge, &ensemble, unlearned, retrained, EXEC, Some(&cache)).unwrap();
        assert_eq!(map.counts(), outcome.report.region);
        if method == Method::GradientAscent {
            region_time += unlearn_time + map_time;
            ga_time += unlearn_time + t.elapsed();
        }
        outcomes.push((method, outcome));
    }
    SeedRun { spec, challenge, ensemble, outcomes, region_time, ga_time, _cache_dir: cache_dir, cache }
}

fn region_cells(runs: &[SeedRun]) -> Verdict {
    let counts: Vec<_> = runs.iter().map(|r| r.outcome(Method::GradientAscent).report.region).collect();
    let time: Duration = runs.iter().map(|r| r.region_time).sum();
    let pass = counts.iter().all(|c| c.under > 0 && c.over > 0) && time < Duration::from_secs(600);
    let cells: Vec<String> = counts.iter().map(|c| format!("{}/{}", c.under, c.over)).collect();
    Verdict::new(2, pass, format!("under/over cells per seed [{}], {:.0}s", cells.join(", "), time.as_secs_f64()))
}

fn advantage(runs: &[SeedRun], m: Method) -> (f64, f64, f64) {
    let tpr = mean(runs.iter().map(|r| r.outcome(m).report.apollo.combined.tpr));
    let fpr = mean(runs.iter().map(|r| r.outcome(m).report.apollo.combined.fpr));
    (tpr - fpr, tpr, fpr)
}

fn retrain_null(runs: &[SeedRun]) -> Verdict {
    let (adv, tpr, fpr) = advantage(runs, Method::Retrain);
    Verdict::new(3, adv.abs() <= 0.15, format!("RT combined TPR {tpr:.3} FPR {fpr:.3}, TPR-FPR {adv:+.3}"))
}

fn ascent_signal(runs: &[SeedRun]) -> Verdict {
    let (adv, tpr, fpr) = advantage(runs, Method::GradientAscent);
    let time: Duration = runs.iter().map(|r| r.ga_time).sum();
    let pass = adv >= 0.2 && time < Duration::from_secs(1200);
    Verdict::new(4, pass, format!("GA combined TPR {tpr:.3} FPR {fpr:.3}, TPR-FPR {adv:+.3}, {:.0}s", time.as_secs_f64()))
}

const GRID: usize = 201;

/// Cross-entropy of every class at every grid point, row-major with `x2`
/// outermost, computed from plain forward passes.
fn grid_cross_entropy(model: &ParamModel) -> Vec<[f64; 4]> {
    let coord = |i: usize| -1.0 + 0.01 * i as f64;
    let points: Vec<f64> = (0..GRID * GRID).flat_map(|k| [coord(k % GRID), coord(k / GRID)]).collect();
    let mut out = Vec::with_capacity(GRID * GRID);
    for chunk in points.chunks(2 * 4096) {
        let logits = model.forward(&Tensor::new(vec![chunk.len() / 2, 2], chunk.to_vec()).unwrap()).unwrap();
        for row in logits.data().chunks(4) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.push([lse - row[0], lse - row[1], lse - row[2], lse - row[3]]);
        }
    }
    out
}

fn point_cross_entropy(model: &ParamModel, x: &[f64], y: usize) -> f64 {
    let logits = model.forward(&Tensor::new(vec![1, 2], x.to_vec()).unwrap()).unwrap();
    let row = logits.data();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - row[y]
}

fn grid_optimality(run: &SeedRun) -> Verdict {
    let spec = run.spec.clone().with_method(Method::GradientAscent, Preset::Toy);
    let views = target_views(&spec, &run.challenge, &run.ensemble, EXEC, Some(&run.cache)).unwrap();
    let contexts: Vec<LossContext<'_>> = views.iter().take(10).map(|v| LossContext::from_view(&run.ensemble, v)).collect();
    // Without early stopping every search uses all T steps.
    let cfg = AttackConfig { tau: 0.0, ..spec.attack_config(Conjecture::Under) };
    let (alpha, beta) = (cfg.alpha, cfg.beta);

    let mut tables: HashMap<*const ParamModel, Vec<[f64; 4]>> = HashMap::new();
    for ctx in &contexts {
        for m in ctx.in_models.iter().chain(&ctx.out_models) {
            tables.entry(*m as *const ParamModel).or_insert_with(|| grid_cross_entropy(m));
        }
    }
    let (mut within, mut worst_gap, mut worst_check) = (0, f64::NEG_INFINITY, 0.0f64);
    let mut lines = Vec::new();
    for ctx in &contexts {
        let radius = cfg.radius();
        let mut best = f64::INFINITY;
        for k in 0..GRID * GRID {
            let p = [-1.0 + 0.01 * (k % GRID) as f64, -1.0 + 0.01 * (k / GRID) as f64];
            if l2_distance(&ctx.x, &p) > radius {
                continue;
            }
            let ins: f64 = ctx.in_models.iter().map(|m| tables[&(*m as *const ParamModel)][k][ctx.y]).sum();
            let outs: f64 = ctx.out_models.iter().map(|m| tables[&(*m as *const ParamModel)][k][ctx.y]).sum();
            best = best.min(alpha * ins - beta * outs);
        }
        let out = generate_adversarial(ctx, &cfg).unwrap();
        let found = loss_under(&out.x_prime, ctx, alpha, beta).unwrap().0;
        let direct: f64 = alpha * ctx.in_models.iter().map(|m| point_cross_entropy(m, &out.x_prime, ctx.y)).sum::<f64>()
            - beta * ctx.out_models.iter().map(|m| point_cross_entropy(m, &out.x_prime, ctx.y)).sum::<f64>();
        worst_check = worst_check.max((found - direct).abs() / direct.abs().max(1.0));
        let gap = (found - best) / best.abs();
        worst_gap = worst_gap.max(gap);
        if found <= best + 0.1 * best.abs() {
            within += 1;
        }
        lines.push(format!("{found:.2}/{best:.2}"));
    }
    let pass = within == contexts.len() && worst_check < 1e-9;
    Verdict::new(
        6,
        pass,
        format!(
            "{within}/{} within 10% of grid minimum, worst excess {:+.1}%, loss/grid [{}], objective cross-check {worst_check:.1e}",
            contexts.len(),
            worst_gap * 100.0,
            lines.join(", ")
        ),
    )
}

fn replay(run: &SeedRun) -> Verdict {
    let reports = |outcomes: Vec<&GameOutcome>| outcomes.iter().map(|o| o.report.clone()).collect::<Vec<_>>();
    let first = RunReport::new(run.spec.clone(), reports(run.outcomes.iter().map(|(_, o)| o).collect())).unwrap().to_json().unwrap();
    let again = run_methods(&run.spec, &[Method::Retrain, Method::GradientAscent], Preset::Toy, EXEC, None).unwrap();
    let second = RunReport::new(run.spec.clone(), reports(again.iter().collect())).unwrap().to_json().unwrap();
    Verdict::new(9, first.as_bytes() == second.as_bytes(), format!("seed {} report.json {} bytes, identical on replay: {}", run.spec.seed, first.len(), first == second))
}

fn main() -> ExitCode {
    let mut verdicts = vec![gradient_oracle(), locality_cases(), metric_oracles()];
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    verdicts.push(region_cells(&runs));
    verdicts.push(retrain_null(&runs));
    verdicts.push(ascent_signal(&runs));
    verdicts.push(grid_optimality(&runs[0]));
    verdicts.push(gaussian_and_ulira(&runs));
    verdicts.push(replay(&runs[0]));
    verdicts.sort_by_key(|v| v.criterion);
    println!("summary:");
    for v in &verdicts {
        println!("  criterion {}: {} {}", v.criterion, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if verdicts.iter().all(|v| v.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
