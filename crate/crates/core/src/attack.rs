//! Adversarial indicator search and label-only membership decisions.
//!
//! A search starts at the target input and follows plain gradient descent on
//! one of four shadow-model objectives. After step `t` the candidate is
//! projected onto the ball of radius `t * epsilon` around the target, and the
//! run stops early once the mean probability the base shadows assign to the
//! target label drops below `tau`. The unlearned model is only ever queried for
//! labels.

use std::collections::HashMap;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, softmax_rows, ParamModel, Tape};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::shadow::{ShadowEnsemble, TargetView};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Under,
    Over,
    UnderOffline,
    OverOffline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Under, Variant::Over, Variant::UnderOffline, Variant::OverOffline];

    pub fn is_online(self) -> bool {
        matches!(self, Variant::Under | Variant::Over)
    }

    pub fn conjecture(self) -> Conjecture {
        match self {
            Variant::Under | Variant::UnderOffline => Conjecture::Under,
            Variant::Over | Variant::OverOffline => Conjecture::Over,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Under => "under",
            Variant::Over => "over",
            Variant::UnderOffline => "under_offline",
            Variant::OverOffline => "over_offline",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attack variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conjecture {
    Under,
    Over,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    L2,
}

/// Which side of `tau` ends a search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopRule {
    /// Every variant stops when the mean shadow probability of `y` is below `tau`.
    #[default]
    BelowTau,
    /// Over variants instead stop when it exceeds `1 - tau`.
    InvertForOver,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub variant: Variant,
    /// Maximum number of search steps `T`.
    pub steps: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Gradient step size; `epsilon / 4` when unset.
    pub inner_lr: Option<f64>,
    pub distance: Distance,
    pub early_stop: EarlyStopRule,
    /// Optional per-coordinate box `[lo, hi]` the candidate is clipped to.
    pub domain: Option<[f64; 2]>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Under,
            steps: 50,
            epsilon: 1.0,
            tau: 0.1,
            alpha: 1.0,
            beta: 4.0,
            inner_lr: None,
            distance: Distance::L2,
            early_stop: EarlyStopRule::BelowTau,
            domain: None,
        }
    }
}

impl AttackConfig {
    pub fn new(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return bad(format!("loss weights must be non-negative with a positive sum, got {} and {}", self.alpha, self.beta));
        }
        if let Some(lr) = self.inner_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("inner step size must be positive, got {lr}"));
            }
        }
        if let Some([lo, hi]) = self.domain {
            if !(lo < hi) {
                return bad(format!("empty domain [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.inner_lr.unwrap_or(self.epsilon / 4.0)
    }

    /// The locality bound `T * epsilon`.
    pub fn radius(&self) -> f64 {
        self.steps as f64 * self.epsilon
    }

    fn stops(&self, mean_prob_y: f64) -> bool {
        match (self.early_stop, self.variant.conjecture()) {
            (EarlyStopRule::InvertForOver, Conjecture::Over) => mean_prob_y > 1.0 - self.tau,
            _ => mean_prob_y < self.tau,
        }
    }

    /// The part of the configuration that shapes the search trajectory.
    fn trajectory(&self) -> Self {
        Self { steps: 0, tau: 0.0, early_stop: EarlyStopRule::BelowTau, ..self.clone() }
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Closest point to `p` within `radius` of `center`. The result always
/// satisfies `l2_distance(center, p) <= radius` as computed in floating point.
pub fn project_onto_ball(center: &[f64], p: &mut [f64], radius: f64) {
    let d = l2_distance(center, p);
    if d <= radius {
        return;
    }
    let mut scale = radius / d;
    // Rounding can leave the scaled point a hair outside; shrink by a
    // doubling margin until it is inside. Reaches `center` at worst.
    let mut margin = 4.0 * f64::EPSILON;
    loop {
        for (v, c) in p.iter_mut().zip(center) {
            *v = c + (*v - c) * scale;
        }
        if l2_distance(center, p) <= radius {
            return;
        }
        scale = (1.0 - margin).max(0.0);
        margin *= 2.0;
    }
}

/// Index sets of one target's objective.
#[derive(Clone, Debug)]
pub struct LossContext<'m> {
    pub x: Vec<f64>,
    pub y: usize,
    /// Unlearned shadows whose surrogate set held the target.
    pub in_models: Vec<&'m ParamModel>,
    /// Base shadows whose surrogate set did not hold the target.
    pub out_models: Vec<&'m ParamModel>,
    /// Every base shadow; drives early stopping and the offline objectives.
    pub shadows: Vec<&'m ParamModel>,
}

impl<'m> LossContext<'m> {
    pub fn from_view(ensemble: &'m ShadowEnsemble, view: &'m TargetView) -> Self {
        let in_models = match &view.unlearned {
            Some(models) => models.iter().flatten().map(|m| m.as_ref()).collect(),
            None => Vec::new(),
        };
        let out_models = ensemble
            .shadows
            .iter()
            .zip(&view.in_mask)
            .filter(|(_, inside)| !**inside)
            .map(|(s, _)| &s.model)
            .collect();
        Self {
            x: view.target.x.clone(),
            y: view.target.y,
            in_models,
            out_models,
            shadows: ensemble.shadows.iter().map(|s| &s.model).collect(),
        }
    }

    pub fn check(&self, variant: Variant) -> Result<()> {
        if self.shadows.is_empty() {
            return Err(Error::EmptyContext("no shadow models".into()));
        }
        if variant.is_online() && (self.in_models.is_empty() || self.out_models.is_empty()) {
            return Err(Error::EmptyContext(format!(
                "online objective needs in and out shadows, got {} and {}",
                self.in_models.len(),
                self.out_models.len()
            )));
        }
        for m in self.in_models.iter().chain(&self.out_models).chain(&self.shadows) {
            if m.architecture().input_dim() != self.x.len() {
                return Err(Error::ShapeMismatch("shadow input width differs from target".into()));
            }
            if self.y >= m.classes() {
                return Err(Error::LabelOutOfRange { label: self.y, classes: m.classes() });
            }
        }
        Ok(())
    }

    /// `(model, cross-entropy weight, margin weight)` for every term.
    fn terms(&self, variant: Variant, alpha: f64, beta: f64) -> Vec<(&'m ParamModel, f64, f64)> {
        let tag = |ms: &[&'m ParamModel], ce: f64, margin: f64| ms.iter().map(move |m| (*m, ce, margin)).collect::<Vec<_>>();
        match variant {
            Variant::Under => [tag(&self.in_models, alpha, 0.0), tag(&self.out_models, -beta, 0.0)].concat(),
            Variant::Over => [tag(&self.in_models, -alpha, 0.0), tag(&self.out_models, beta, 0.0)].concat(),
            Variant::UnderOffline => tag(&self.shadows, -beta, alpha),
            Variant::OverOffline => tag(&self.shadows, beta, alpha),
        }
    }
}

#[derive(Default)]
struct RowTerm {
    ce: f64,
    margin: f64,
    prob: bool,
}

struct Job<'m> {
    model: &'m ParamModel,
    rows: Vec<(usize, RowTerm)>,
}

struct JobResult {
    loss: Vec<f64>,
    grad: Vec<f64>,
    prob_y: Vec<f64>,
}

/// Objective values, input gradients and mean base-shadow probability of `y`
/// at one point per context. Each distinct model runs once over all rows that
/// need it; contributions are reduced in a fixed order.
struct Evaluation {
    loss: Vec<f64>,
    grad: Vec<Vec<f64>>,
    mean_prob_y: Vec<f64>,
}

fn plan<'m>(contexts: &[LossContext<'m>], variant: Variant, alpha: f64, beta: f64) -> Vec<Job<'m>> {
    fn slot<'a, 'm>(
        index: &mut HashMap<*const ParamModel, usize>,
        jobs: &'a mut Vec<Job<'m>>,
        model: &'m ParamModel,
        row: usize,
    ) -> &'a mut RowTerm {
        let j = *index.entry(model as *const ParamModel).or_insert_with(|| {
            jobs.push(Job { model, rows: Vec::new() });
            jobs.len() - 1
        });
        let rows = &mut jobs[j].rows;
        let k = match rows.iter().position(|(r, _)| *r == row) {
            Some(k) => k,
            None => {
                rows.push((row, RowTerm::default()));
                rows.len() - 1
            }
        };
        &mut rows[k].1
    }
    let mut index = HashMap::new();
    let mut jobs = Vec::new();
    for (r, ctx) in contexts.iter().enumerate() {
        for (model, ce, margin) in ctx.terms(variant, alpha, beta) {
            let term = slot(&mut index, &mut jobs, model, r);
            term.ce += ce;
            term.margin += margin;
        }
        for model in &ctx.shadows {
            slot(&mut index, &mut jobs, model, r).prob = true;
        }
    }
    jobs
}

fn evaluate(
    contexts: &[LossContext<'_>],
    points: &[Vec<f64>],
    variant: Variant,
    alpha: f64,
    beta: f64,
    exec: Execution,
) -> Result<Evaluation> {
    let jobs = plan(contexts, variant, alpha, beta);
    let dim = points.first().map_or(0, Vec::len);
    let results = exec.try_map(jobs.len(), |j| -> Result<JobResult> {
        let job = &jobs[j];
        let n = job.rows.len();
        let flat: Vec<f64> = job.rows.iter().flat_map(|(r, _)| points[*r].iter().copied()).collect();
        let labels: Vec<usize> = job.rows.iter().map(|(r, _)| contexts[*r].y).collect();
        let ce_w: Vec<f64> = job.rows.iter().map(|(_, t)| t.ce).collect();
        let margin_w: Vec<f64> = job.rows.iter().map(|(_, t)| t.margin).collect();
        let needs_grad = ce_w.iter().chain(&margin_w).any(|w| *w != 0.0);

        let mut tape = Tape::new();
        let x = tape.leaf(flat, n, dim, needs_grad)?;
        let rec = job.model.record(&mut tape, x, false, false)?;
        let logits = tape.value(rec.logits).to_vec();
        let classes = job.model.classes();
        let probs = softmax_rows(&logits, classes);

        let mut loss = vec![0.0; n];
        for (r, row) in logits.chunks(classes).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let ce = lse - row[labels[r]];
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            loss[r] = ce_w[r] * ce + margin_w[r] * (sorted[0] - sorted[1]);
        }
        let grad = if needs_grad {
            let ce = tape.weighted_cross_entropy(rec.logits, &labels, &ce_w)?;
            let margin = tape.weighted_margin(rec.logits, &margin_w)?;
            let total = tape.add(ce, margin)?;
            tape.backward(total)?.take(x).unwrap_or_else(|| vec![0.0; n * dim])
        } else {
            vec![0.0; n * dim]
        };
        let prob_y = (0..n).map(|r| probs[r * classes + labels[r]]).collect();
        Ok(JobResult { loss, grad, prob_y })
    })?;

    let rows = contexts.len();
    let mut out = Evaluation { loss: vec![0.0; rows], grad: vec![vec![0.0; dim]; rows], mean_prob_y: vec![0.0; rows] };
    for (job, res) in jobs.iter().zip(&results) {
        for (k, (r, term)) in job.rows.iter().enumerate() {
            out.loss[*r] += res.loss[k];
            for (g, v) in out.grad[*r].iter_mut().zip(&res.grad[k * dim..(k + 1) * dim]) {
                *g += v;
            }
            if term.prob {
                out.mean_prob_y[*r] += res.prob_y[k];
            }
        }
    }
    for (r, ctx) in contexts.iter().enumerate() {
        out.mean_prob_y[r] /= ctx.shadows.len() as f64;
    }
    Ok(out)
}

fn single(x_prime: &[f64], ctx: &LossContext<'_>, variant: Variant, alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    ctx.check(variant)?;
    if x_prime.len() != ctx.x.len() {
        return Err(Error::ShapeMismatch("candidate width differs from target".into()));
    }
    let mut e = evaluate(std::slice::from_ref(ctx), &[x_prime.to_vec()], variant, alpha, beta, Execution::Sequential)?;
    Ok((e.loss[0], e.grad.swap_remove(0)))
}

/// `alpha * sum_in CE(x'; unlearned) - beta * sum_out CE(x'; shadow)` and its gradient in `x'`.
pub fn loss_under(x_prime: &[f64], ctx: &LossContext<'_>, alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    single(x_prime, ctx, Variant::Under, alpha, beta)
}

/// `-alpha * sum_in CE(x'; unlearned) + beta * sum_out CE(x'; shadow)`.
pub fn loss_over(x_prime: &[f64], ctx: &LossContext<'_>, alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    single(x_prime, ctx, Variant::Over, alpha, beta)
}

/// `alpha * sum_i margin_i(x') - beta * sum_i CE(x'; shadow_i)`.
pub fn loss_under_offline(x_prime: &[f64], ctx: &LossContext<'_>, alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    single(x_prime, ctx, Variant::UnderOffline, alpha, beta)
}

/// `alpha * sum_i margin_i(x') + beta * sum_i CE(x'; shadow_i)`.
pub fn loss_over_offline(x_prime: &[f64], ctx: &LossContext<'_>, alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    single(x_prime, ctx, Variant::OverOffline, alpha, beta)
}

pub fn variant_loss(x_prime: &[f64], ctx: &LossContext<'_>, variant: Variant, alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    single(x_prime, ctx, variant, alpha, beta)
}

/// Mean over `shadows` of the gap between the two largest logits at `x'`: a
/// differentiable proxy for the distance to the nearest decision boundary.
pub fn db_distance(x_prime: &[f64], shadows: &[&ParamModel]) -> Result<(f64, Vec<f64>)> {
    if shadows.is_empty() {
        return Err(Error::EmptyContext("no shadow models".into()));
    }
    let m = shadows.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; x_prime.len()];
    for model in shadows {
        let mut tape = Tape::new();
        let x = tape.leaf_borrowed(x_prime, 1, x_prime.len(), true)?;
        let rec = model.record(&mut tape, x, false, false)?;
        let margin = tape.top_two_margin(rec.logits)?;
        value += tape.scalar(margin) / m;
        let g = tape.backward(margin)?.take(x).unwrap_or_default();
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b / m);
    }
    Ok((value, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    Exhausted,
}

/// One JSON-lines trace record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub loss: f64,
    pub distance: f64,
    pub mean_prob_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialOutcome {
    pub x_prime: Vec<f64>,
    pub steps_used: usize,
    pub stop_reason: StopReason,
    pub trace: Vec<TraceStep>,
    /// Set once the unlearned model has been queried.
    pub decision: Option<bool>,
    pub conjecture_fired: Conjecture,
}

/// The full trajectory of one search. `points[0]` is the target; `points[t]`
/// is the candidate after step `t`. Any `(tau, T)` operating point with `T`
/// no larger than the recorded horizon can be replayed from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchPath {
    pub x: Vec<f64>,
    pub y: usize,
    pub points: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub mean_prob_y: Vec<f64>,
    search: AttackConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    /// Run all `T` steps regardless of early stopping.
    Full,
    /// End once every search in the batch has met its stopping condition.
    UntilStop,
}

impl SearchPath {
    pub fn horizon(&self) -> usize {
        self.points.len() - 1
    }

    /// First step at which `cfg` would stop early.
    pub fn stop_step(&self, cfg: &AttackConfig) -> Option<usize> {
        (1..=cfg.steps.min(self.horizon())).find(|&t| cfg.stops(self.mean_prob_y[t]))
    }

    /// Number of steps a run under `cfg` takes on this path.
    pub fn steps_used(&self, cfg: &AttackConfig) -> Result<usize> {
        if cfg.trajectory() != self.search {
            return Err(Error::InvalidConfig("replay configuration does not match the recorded search".into()));
        }
        match self.stop_step(cfg) {
            Some(t) => Ok(t),
            None if cfg.steps <= self.horizon() => Ok(cfg.steps),
            None => Err(Error::InvalidConfig(format!(
                "path holds {} steps, configuration asks for {}",
                self.horizon(),
                cfg.steps
            ))),
        }
    }

    /// The outcome a run with `cfg` would have produced.
    pub fn outcome(&self, cfg: &AttackConfig) -> Result<AdversarialOutcome> {
        let used = self.steps_used(cfg)?;
        let stop_reason = if self.stop_step(cfg) == Some(used) { StopReason::EarlyStop } else { StopReason::Exhausted };
        let trace = (1..=used)
            .map(|t| TraceStep {
                t,
                loss: self.losses[t],
                distance: l2_distance(&self.x, &self.points[t]),
                mean_prob_y: self.mean_prob_y[t],
            })
            .collect();
        Ok(AdversarialOutcome {
            x_prime: self.points[used].clone(),
            steps_used: used,
            stop_reason,
            trace,
            decision: None,
            conjecture_fired: Conjecture::None,
        })
    }

    /// First step `1..=steps_used` whose candidate fires the variant's
    /// conjecture, given the unlearned model's label at every path point.
    pub fn first_fire(&self, cfg: &AttackConfig, labels: &[usize]) -> Result<Option<usize>> {
        let used = self.steps_used(cfg)?;
        if labels.len() < used + 1 {
            return Err(Error::ShapeMismatch("fewer labels than path points".into()));
        }
        Ok((1..=used).find(|&t| fires(cfg.variant, labels[t], self.y)))
    }
}

/// Run one search per context, all in lockstep.
pub fn search_paths(
    contexts: &[LossContext<'_>],
    cfg: &AttackConfig,
    horizon: Horizon,
    exec: Execution,
) -> Result<Vec<SearchPath>> {
    cfg.validate()?;
    for ctx in contexts {
        ctx.check(cfg.variant)?;
        if let Some([lo, hi]) = cfg.domain {
            if ctx.x.iter().any(|v| *v < lo || *v > hi) {
                return Err(Error::InvalidConfig("target lies outside the search domain".into()));
            }
        }
    }
    let mut points: Vec<Vec<f64>> = contexts.iter().map(|c| c.x.clone()).collect();
    let mut eval = evaluate(contexts, &points, cfg.variant, cfg.alpha, cfg.beta, exec)?;
    let mut paths: Vec<SearchPath> = contexts
        .iter()
        .enumerate()
        .map(|(r, c)| SearchPath {
            x: c.x.clone(),
            y: c.y,
            points: vec![c.x.clone()],
            losses: vec![eval.loss[r]],
            mean_prob_y: vec![eval.mean_prob_y[r]],
            search: cfg.trajectory(),
        })
        .collect();
    let mut stopped = vec![false; contexts.len()];
    let lr = cfg.step_size();
    for t in 1..=cfg.steps {
        if horizon == Horizon::UntilStop && stopped.iter().all(|s| *s) {
            break;
        }
        let radius = t as f64 * cfg.epsilon;
        for (r, ctx) in contexts.iter().enumerate() {
            let m = ctx.shadows.len() as f64;
            if eval.grad[r].iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("search gradient at step {t}")));
            }
            let p = &mut points[r];
            for (v, g) in p.iter_mut().zip(&eval.grad[r]) {
                *v -= lr * g / m;
            }
            project_onto_ball(&ctx.x, p, radius);
            if let Some([lo, hi]) = cfg.domain {
                p.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
            }
        }
        eval = evaluate(contexts, &points, cfg.variant, cfg.alpha, cfg.beta, exec)?;
        for (r, path) in paths.iter_mut().enumerate() {
            path.points.push(points[r].clone());
            path.losses.push(eval.loss[r]);
            path.mean_prob_y.push(eval.mean_prob_y[r]);
            stopped[r] |= cfg.stops(eval.mean_prob_y[r]);
        }
    }
    Ok(paths)
}

/// Algorithm entry point for a single target.
pub fn generate_adversarial(ctx: &LossContext<'_>, cfg: &AttackConfig) -> Result<AdversarialOutcome> {
    let paths = search_paths(std::slice::from_ref(ctx), cfg, Horizon::UntilStop, Execution::Sequential)?;
    paths[0].outcome(cfg)
}

fn fires(variant: Variant, label: usize, y: usize) -> bool {
    match variant.conjecture() {
        Conjecture::Under => label == y,
        Conjecture::Over => label != y,
        Conjecture::None => false,
    }
}

/// Membership bit from the unlearned model's label at `x'`.
pub fn decide_membership(label: usize, y: usize, variant: Variant) -> bool {
    fires(variant, label, y)
}

/// Query `target_model` at the outcome's `x'` and record the decision.
pub fn decide(target_model: &ParamModel, outcome: &mut AdversarialOutcome, y: usize, variant: Variant) -> Result<bool> {
    let label = crate::learn::predict_label(target_model, &outcome.x_prime)?;
    let bit = decide_membership(label, y, variant);
    outcome.decision = Some(bit);
    outcome.conjecture_fired = if bit { variant.conjecture() } else { Conjecture::None };
    Ok(bit)
}

/// Combined rule: positive when either conjecture fires.
pub fn combine(under: bool, over: bool) -> (bool, Conjecture) {
    match (under, over) {
        (true, _) => (true, Conjecture::Under),
        (false, true) => (true, Conjecture::Over),
        _ => (false, Conjecture::None),
    }
}

/// Labels of `target_model` at every point of `path`.
pub fn path_labels(target_model: &ParamModel, path: &SearchPath) -> Result<Vec<usize>> {
    let dim = path.x.len();
    let flat: Vec<f64> = path.points.iter().flatten().copied().collect();
    let batch = crate::tensor::Tensor::new(vec![path.points.len(), dim], flat)?;
    let logits = target_model.forward(&batch)?;
    Ok(logits.data().chunks(target_model.classes()).map(argmax).collect())
}

/// When each conjecture first fires for one target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FireRecord {
    pub member: bool,
    pub under: Option<usize>,
    pub over: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsGrid {
    pub t_max: usize,
    /// `tpr[t_u][t_o]`: members flagged by under within `t_u` steps or over within `t_o`.
    pub tpr: Vec<Vec<f64>>,
    pub fpr: Option<Vec<Vec<f64>>>,
    pub under_tpr: Vec<f64>,
    pub over_tpr: Vec<f64>,
}

fn rate(records: &[&FireRecord], hit: impl Fn(&FireRecord) -> bool) -> f64 {
    records.iter().filter(|r| hit(r)).count() as f64 / records.len() as f64
}

fn grid(records: &[&FireRecord], t_max: usize) -> Vec<Vec<f64>> {
    let within = |f: Option<usize>, t: usize| f.is_some_and(|s| s <= t);
    (0..=t_max)
        .map(|tu| (0..=t_max).map(|to| rate(records, |r| within(r.under, tu) || within(r.over, to))).collect())
        .collect()
}

pub fn sweep_dynamics(records: &[FireRecord], t_max: usize) -> Result<DynamicsGrid> {
    if t_max == 0 {
        return Err(Error::InvalidConfig("dynamics sweep needs t_max >= 1".into()));
    }
    let members: Vec<&FireRecord> = records.iter().filter(|r| r.member).collect();
    let others: Vec<&FireRecord> = records.iter().filter(|r| !r.member).collect();
    if members.is_empty() {
        return Err(Error::InsufficientSamples("dynamics sweep needs at least one member".into()));
    }
    let tpr = grid(&members, t_max);
    let under_tpr = tpr.iter().map(|row| row[0]).collect();
    let over_tpr = tpr[0].clone();
    let fpr = (!others.is_empty()).then(|| grid(&others, t_max));
    Ok(DynamicsGrid { t_max, tpr, fpr, under_tpr, over_tpr })
}

pub fn write_trace_jsonl<W: Write>(trace: &[TraceStep], mut w: W) -> Result<()> {
    for step in trace {
        serde_json::to_writer(&mut w, step)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
