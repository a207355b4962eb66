//! The membership game: challenger data and models, the adversary's shadows,
//! every attack, and the scored report.

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, Conjecture, DynamicsGrid, FireRecord, Horizon, LossContext, SearchPath, Variant};
use crate::autodiff::{MlpArchitecture, ParamModel};
use crate::baselines::{self, ConfidenceScale};
use crate::datagen::{self, KnowledgeMode, SampleId, SplitDataset, SurrogateSpec};
use crate::error::{Error, Result};
use crate::exec::{mix_seed, Execution};
use crate::learn::{self, Method, TrainConfig, UnlearnRequest};
use crate::metrics::{self, OperatingPoint, PrPoint, Roc, RocPoint};
use crate::region::{self, RegionCounts, RegionMap};
use crate::shadow::{self, ShadowCache, ShadowEnsemble, ShadowSpec, ShadowUnlearning, TargetView, UnlearnSource};
use crate::tensor::Tensor;

const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_UNLEARN: u64 = 4;
const STREAM_SURROGATE: u64 = 5;
const STREAM_SHADOW: u64 = 6;
const STREAM_EVAL: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::InvalidConfig(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub population: usize,
    pub train_size: usize,
    pub unlearn_fraction: f64,
}

/// The challenger's learner and unlearner. Seed fields inside the configs are
/// replaced by seeds derived from the game's master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChallengerSpec {
    pub architecture: MlpArchitecture,
    pub train: TrainConfig,
    pub unlearn: UnlearnRequest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    pub knowledge: KnowledgeMode,
    pub attack: AttackConfig,
    pub shadow_count: usize,
    pub shadow_size: usize,
    /// Online draws keep every target inside and outside at least this many shadows.
    pub min_coverage: usize,
    pub shadow_unlearning: ShadowUnlearning,
    /// Unlearning the adversary assumes; the challenger's when unset.
    #[serde(default)]
    pub shadow_unlearn: Option<UnlearnRequest>,
    #[serde(default)]
    pub lira_scale: ConfidenceScale,
    pub umia_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub members: usize,
    pub non_members: usize,
    /// Operating points of the bit-valued attack's ROC: every `(tau, steps)` pair.
    pub sweep_taus: Vec<f64>,
    pub sweep_steps: Vec<usize>,
    pub dynamics_t_max: usize,
    pub region_resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSpec {
    pub seed: u64,
    pub data: DataSpec,
    pub challenger: ChallengerSpec,
    pub adversary: AdversarySpec,
    pub eval: EvalSpec,
}

impl GameSpec {
    /// Desk-scale quadrant game: 500 points, 200 trained, 10% forgotten,
    /// 16 shadows of 200, 20 members against 20 non-members.
    pub fn toy(seed: u64) -> Self {
        let train = TrainConfig::toy(0);
        Self {
            seed,
            data: DataSpec { population: 500, train_size: 200, unlearn_fraction: 0.1 },
            challenger: ChallengerSpec {
                architecture: MlpArchitecture::table3(),
                unlearn: UnlearnRequest::toy(Method::GradientAscent, &train),
                train,
            },
            adversary: AdversarySpec {
                knowledge: KnowledgeMode::Online,
                attack: AttackConfig { domain: Some([region::LO, region::HI]), ..AttackConfig::default() },
                shadow_count: 16,
                shadow_size: 200,
                min_coverage: 2,
                shadow_unlearning: ShadowUnlearning::Batched,
                shadow_unlearn: None,
                lira_scale: ConfidenceScale::Logit,
                umia_lambda: baselines::UMIA_LAMBDA,
            },
            eval: EvalSpec {
                members: 20,
                non_members: 20,
                sweep_taus: vec![0.01, 0.05, 0.1, 0.2, 0.3],
                sweep_steps: vec![1, 5, 10, 25, 50],
                dynamics_t_max: 50,
                region_resolution: 200,
            },
        }
    }

    /// The 200-versus-200 protocol with the reference unlearning
    /// hyperparameters, on a population large enough to supply it.
    pub fn paper(seed: u64) -> Self {
        let mut spec = Self::toy(seed);
        spec.data = DataSpec { population: 5000, train_size: 2000, unlearn_fraction: 0.1 };
        spec.challenger.train = TrainConfig { epochs: 50, learning_rate: 1e-4, batch_size: 64, ..TrainConfig::toy(0) };
        spec.challenger.unlearn = UnlearnRequest::paper(Method::GradientAscent, 0);
        spec.adversary.shadow_size = 2000;
        spec.eval.members = 200;
        spec.eval.non_members = 200;
        spec
    }

    pub fn preset(preset: Preset, seed: u64) -> Self {
        match preset {
            Preset::Toy => Self::toy(seed),
            Preset::Paper => Self::paper(seed),
        }
    }

    /// Switch the challenger's unlearning method, keeping the preset's
    /// hyperparameters for it.
    pub fn with_method(mut self, method: Method, preset: Preset) -> Self {
        self.challenger.unlearn = match preset {
            Preset::Toy => UnlearnRequest::toy(method, &self.challenger.train),
            Preset::Paper => UnlearnRequest::paper(method, 0),
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.challenger.architecture.validate()?;
        self.challenger.train.validate()?;
        self.challenger.unlearn.config.validate()?;
        self.adversary.attack.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.adversary.shadow_count == 0 || self.adversary.shadow_size == 0 {
            return bad("adversary.shadow_count and adversary.shadow_size must be positive");
        }
        if self.eval.members == 0 || self.eval.non_members == 0 {
            return bad("eval.members and eval.non_members must be positive");
        }
        if self.eval.sweep_taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("eval.sweep_taus must lie in [0, 1]");
        }
        if self.eval.dynamics_t_max == 0 || self.eval.region_resolution == 0 {
            return bad("eval.dynamics_t_max and eval.region_resolution must be positive");
        }
        if self.adversary.knowledge == KnowledgeMode::Online && self.adversary.min_coverage < 2 {
            return bad("adversary.min_coverage must be at least 2 for online likelihood fits");
        }
        Ok(())
    }

    fn seed_for(&self, stream: u64) -> u64 {
        mix_seed(self.seed, stream, 0)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed_for(STREAM_TRAIN), ..self.challenger.train.clone() }
    }

    /// The challenger's unlearning request with derived seeds. Retraining
    /// reuses the original training seed.
    pub fn unlearn_request(&self) -> UnlearnRequest {
        let mut r = self.challenger.unlearn.clone();
        r.config.seed = match r.method {
            Method::Retrain => self.seed_for(STREAM_TRAIN),
            _ => self.seed_for(STREAM_UNLEARN),
        };
        r
    }

    fn shadow_request(&self) -> UnlearnRequest {
        self.adversary.shadow_unlearn.clone().unwrap_or_else(|| self.challenger.unlearn.clone())
    }

    fn shadow_spec(&self) -> ShadowSpec {
        ShadowSpec {
            architecture: self.challenger.architecture.clone(),
            train: self.challenger.train.clone(),
            mode: self.adversary.knowledge,
            master_seed: self.seed_for(STREAM_SHADOW),
        }
    }

    /// Attack configuration for one conjecture under the adversary's knowledge.
    pub fn attack_config(&self, conjecture: Conjecture) -> AttackConfig {
        let online = self.adversary.knowledge == KnowledgeMode::Online;
        let variant = match (conjecture, online) {
            (Conjecture::Over, true) => Variant::Over,
            (Conjecture::Over, false) => Variant::OverOffline,
            (_, true) => Variant::Under,
            (_, false) => Variant::UnderOffline,
        };
        AttackConfig { variant, ..self.adversary.attack.clone() }
    }
}

/// Challenger state shared by every unlearning method: data, the original
/// model, and the evaluation targets.
#[derive(Clone, Debug)]
pub struct Challenge {
    pub split: SplitDataset,
    pub original: ParamModel,
    pub members: Vec<SampleId>,
    pub non_members: Vec<SampleId>,
}

impl Challenge {
    /// Challenge state from a stored split and original model.
    pub fn new(spec: &GameSpec, split: SplitDataset, original: ParamModel) -> Result<Self> {
        let (members, non_members) = draw_targets(spec, &split)?;
        Ok(Self { split, original, members, non_members })
    }

    /// Evaluation targets in id order with their membership bits.
    pub fn targets(&self) -> Vec<(SampleId, bool)> {
        let mut t: Vec<(SampleId, bool)> =
            self.members.iter().map(|&i| (i, true)).chain(self.non_members.iter().map(|&i| (i, false))).collect();
        t.sort_unstable();
        t
    }

    pub fn target_ids(&self) -> Vec<SampleId> {
        self.targets().into_iter().map(|(i, _)| i).collect()
    }
}

pub fn generate_split(spec: &GameSpec) -> Result<SplitDataset> {
    let store = datagen::gen_quadrants(spec.data.population, spec.seed_for(STREAM_DATA))?;
    datagen::make_splits(store, spec.data.train_size, spec.data.unlearn_fraction, spec.seed_for(STREAM_SPLIT))
}

/// Balanced evaluation draw: members from `D_u`, non-members from `D_t`.
pub fn draw_targets(spec: &GameSpec, split: &SplitDataset) -> Result<(Vec<SampleId>, Vec<SampleId>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed_for(STREAM_EVAL));
    let mut pick = |pool: &[SampleId], n: usize, what: &str| -> Result<Vec<SampleId>> {
        if pool.len() < n {
            return Err(Error::PoolExhausted(format!("{n} {what} requested, pool holds {}", pool.len())));
        }
        let mut v: Vec<SampleId> = pool.choose_multiple(&mut rng, n).copied().collect();
        v.sort_unstable();
        Ok(v)
    };
    let members = pick(&split.unlearn, spec.eval.members, "members")?;
    let non_members = pick(&split.test, spec.eval.non_members, "non-members")?;
    Ok((members, non_members))
}

/// Sequential challenges of the security game: each round flips a fair coin
/// and draws a member (heads) or a non-member (tails) uniformly.
pub fn draw_challenges(members: &[SampleId], non_members: &[SampleId], rounds: usize, seed: u64) -> Result<Vec<(SampleId, bool)>> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::InsufficientSamples("both pools must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..rounds)
        .map(|_| {
            let heads: bool = rng.random();
            let pool = if heads { members } else { non_members };
            (pool[rng.random_range(0..pool.len())], heads)
        })
        .collect())
}

pub fn train_original(spec: &GameSpec, split: &SplitDataset) -> Result<ParamModel> {
    learn::train(&split.store, &split.train, &spec.challenger.architecture, &spec.train_config()).map(|(m, _)| m)
}

pub fn prepare(spec: &GameSpec) -> Result<Challenge> {
    spec.validate()?;
    let split = generate_split(spec)?;
    let original = train_original(spec, &split)?;
    Challenge::new(spec, split, original)
}

/// `(unlearned, retrained)` for the challenger's method.
pub fn unlearn_challenger(spec: &GameSpec, split: &SplitDataset, original: &ParamModel) -> Result<(ParamModel, ParamModel)> {
    let request = spec.unlearn_request();
    let retrained = learn::unlearn_rt(&split.store, &split.retain, &spec.challenger.architecture, &spec.train_config())?;
    let unlearned = match request.method {
        Method::Retrain => retrained.clone(),
        _ => learn::unlearn(&request, original, &split.store, &split.unlearn, &split.retain)?,
    };
    Ok((unlearned, retrained))
}

pub fn draw_surrogates(spec: &GameSpec, challenge: &Challenge) -> Result<Vec<Vec<SampleId>>> {
    datagen::sample_surrogates(
        &challenge.split,
        &SurrogateSpec {
            mode: spec.adversary.knowledge,
            count: spec.adversary.shadow_count,
            size: spec.adversary.shadow_size,
            seed: spec.seed_for(STREAM_SURROGATE),
            min_coverage: spec.adversary.min_coverage,
        },
        &challenge.target_ids(),
    )
}

pub fn build_shadows(spec: &GameSpec, challenge: &Challenge, exec: Execution, cache: Option<&ShadowCache>) -> Result<ShadowEnsemble> {
    let sets = draw_surrogates(spec, challenge)?;
    shadow::build_ensemble(&challenge.split.store, &sets, spec.shadow_spec(), exec, cache)
}

/// Per-target views, with unlearned shadows for online adversaries.
pub fn target_views(
    spec: &GameSpec,
    challenge: &Challenge,
    ensemble: &ShadowEnsemble,
    exec: Execution,
    cache: Option<&ShadowCache>,
) -> Result<Vec<TargetView>> {
    let store = &challenge.split.store;
    let ids = challenge.target_ids();
    let request = spec.shadow_request();
    let batched = match (spec.adversary.knowledge, spec.adversary.shadow_unlearning) {
        (KnowledgeMode::Online, ShadowUnlearning::Batched) => Some(ensemble.unlearn_batched(store, &request, &ids, exec, cache)?),
        _ => None,
    };
    let source = match (spec.adversary.knowledge, &batched) {
        (KnowledgeMode::Offline, _) => UnlearnSource::None,
        (_, Some(b)) => UnlearnSource::Batched(b),
        (_, None) => UnlearnSource::PerTarget { request: &request, cache },
    };
    ids.iter().map(|&id| ensemble.view_target(store, store.get(id), source)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub original_train: f64,
    pub original_test: f64,
    pub unlearned_forget: f64,
    pub unlearned_retain: f64,
    pub unlearned_test: f64,
    pub retrained_forget: f64,
    pub retrained_test: f64,
    pub shadow_train_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: SampleId,
    pub member: bool,
    pub x: Vec<f64>,
    pub y: usize,
    pub under: bool,
    pub over: bool,
    pub combined: bool,
    pub conjecture: Conjecture,
    pub under_first_fire: Option<usize>,
    pub over_first_fire: Option<usize>,
    pub under_distance: f64,
    pub over_distance: f64,
    pub ulira: Option<f64>,
    pub umia: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub steps: usize,
    pub under: OperatingPoint,
    pub over: OperatingPoint,
    pub combined: OperatingPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApolloSummary {
    pub under: OperatingPoint,
    pub over: OperatingPoint,
    pub combined: OperatingPoint,
    pub sweep: Vec<SweepPoint>,
    /// Upper frontier of the sweep's combined operating points, from (0,0) to (1,1).
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub tpr_at_lowest_fpr: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSummary {
    pub auc: f64,
    pub tpr_at_lowest_fpr: (f64, f64),
    pub roc: Vec<RocPoint>,
    pub precision_recall: Vec<PrPoint>,
}

impl ScoredSummary {
    fn from_roc(roc: Roc) -> Self {
        Self {
            auc: roc.auc,
            tpr_at_lowest_fpr: metrics::tpr_at_lowest_fpr(&roc),
            precision_recall: metrics::precision_recall(&roc),
            roc: roc.points,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub seed: u64,
    pub method: Method,
    pub knowledge: KnowledgeMode,
    pub models: ModelStats,
    pub samples: Vec<SampleScore>,
    pub apollo: ApolloSummary,
    pub ulira: Option<ScoredSummary>,
    pub umia: ScoredSummary,
    pub dynamics: DynamicsGrid,
    pub region: RegionCounts,
}

/// Everything one game produced, including artifacts that stay out of the report.
#[derive(Clone, Debug)]
pub struct GameOutcome {
    pub report: ScoreReport,
    pub under_paths: Vec<SearchPath>,
    pub over_paths: Vec<SearchPath>,
    pub region: RegionMap,
    pub unlearned: ParamModel,
    pub retrained: ParamModel,
}

fn probability_of(model: &ParamModel, x: &[f64], y: usize) -> Result<f64> {
    Ok(posterior(model, x)?[y])
}

fn posterior(model: &ParamModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(model.probabilities(&Tensor::new(vec![1, x.len()], x.to_vec())?)?.into_data())
}

/// Likelihood-ratio scores for every view, or `None` for offline adversaries.
pub fn ulira_scores(
    views: &[TargetView],
    ensemble: &ShadowEnsemble,
    unlearned: &ParamModel,
    scale: ConfidenceScale,
) -> Result<Option<Vec<f64>>> {
    if views.iter().any(|v| v.unlearned.is_none()) {
        return Ok(None);
    }
    views
        .iter()
        .map(|v| {
            let (x, y) = (&v.target.x, v.target.y);
            let mut out_conf = Vec::new();
            let mut in_conf = Vec::new();
            for (i, shadow) in ensemble.shadows.iter().enumerate() {
                match v.unlearned.as_ref().and_then(|u| u[i].as_ref()) {
                    Some(m) => in_conf.push(probability_of(m, x, y)?),
                    None => out_conf.push(probability_of(&shadow.model, x, y)?),
                }
            }
            let fit = baselines::ulira_fit(&out_conf, &in_conf, scale)?;
            Ok(baselines::ulira_score(probability_of(unlearned, x, y)?, &fit))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Posterior-classifier scores, cross-fitted over two folds of the
/// evaluation set so no sample is scored by a classifier trained on it.
pub fn umia_scores(posteriors: &[Vec<f64>], truths: &[bool], lambda: f64, seed: u64) -> Result<Vec<f64>> {
    let mut fold = vec![0usize; truths.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..truths.len()).filter(|&i| truths[i] == class).collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            fold[i] = k % 2;
        }
    }
    let mut scores = vec![0.0; truths.len()];
    for f in 0..2 {
        let pick = |member: bool| -> Vec<Vec<f64>> {
            (0..truths.len()).filter(|&i| fold[i] != f && truths[i] == member).map(|i| posteriors[i].clone()).collect()
        };
        let model = baselines::umia_train(&pick(true), &pick(false), lambda)?;
        for i in (0..truths.len()).filter(|&i| fold[i] == f) {
            scores[i] = model.score(&posteriors[i]);
        }
    }
    Ok(scores)
}

/// Upper-left frontier of bit-valued operating points, closed with (0,0) and (1,1).
pub fn frontier(points: &[(f64, f64, f64)]) -> (Vec<RocPoint>, f64) {
    let mut pts: Vec<(f64, f64, f64)> = points.to_vec();
    pts.push((0.0, 0.0, f64::INFINITY));
    pts.push((1.0, 1.0, f64::NEG_INFINITY));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut out: Vec<RocPoint> = Vec::new();
    for (fpr, tpr, threshold) in pts {
        if out.last().is_some_and(|p| tpr <= p.tpr) {
            continue;
        }
        out.push(RocPoint { fpr, tpr, threshold });
    }
    if out.last().is_some_and(|p| p.fpr < 1.0) {
        out.push(RocPoint { fpr: 1.0, tpr: 1.0, threshold: f64::NEG_INFINITY });
    }
    let auc = out.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
    (out, auc)
}

struct VariantRun {
    paths: Vec<SearchPath>,
    labels: Vec<Vec<usize>>,
}

impl VariantRun {
    fn bits(&self, cfg: &AttackConfig) -> Result<Vec<bool>> {
        self.paths
            .iter()
            .zip(&self.labels)
            .map(|(p, l)| Ok(attack::decide_membership(l[p.steps_used(cfg)?], p.y, cfg.variant)))
            .collect()
    }
}

fn run_variant(
    spec: &GameSpec,
    conjecture: Conjecture,
    contexts: &[LossContext<'_>],
    unlearned: &ParamModel,
    exec: Execution,
) -> Result<VariantRun> {
    let base = spec.attack_config(conjecture);
    let steps = spec.eval.sweep_steps.iter().copied().chain([base.steps, spec.eval.dynamics_t_max]).max().unwrap_or(0);
    let tau = spec.eval.sweep_taus.iter().copied().chain([base.tau]).fold(f64::INFINITY, f64::min);
    let horizon = AttackConfig { steps, tau, ..base };
    let paths = attack::search_paths(contexts, &horizon, Horizon::UntilStop, exec)?;
    let labels = paths.iter().map(|p| attack::path_labels(unlearned, p)).collect::<Result<Vec<_>>>()?;
    Ok(VariantRun { paths, labels })
}

/// Play the game against one challenger given the shared challenge state and
/// the adversary's ensemble.
pub fn play(
    spec: &GameSpec,
    challenge: &Challenge,
    ensemble: &ShadowEnsemble,
    unlearned: ParamModel,
    retrained: ParamModel,
    exec: Execution,
    cache: Option<&ShadowCache>,
) -> Result<GameOutcome> {
    let store = &challenge.split.store;
    let targets = challenge.targets();
    let truths: Vec<bool> = targets.iter().map(|t| t.1).collect();
    let views = target_views(spec, challenge, ensemble, exec, cache)?;
    let contexts: Vec<LossContext<'_>> = views.iter().map(|v| LossContext::from_view(ensemble, v)).collect();

    let under_cfg = spec.attack_config(Conjecture::Under);
    let over_cfg = spec.attack_config(Conjecture::Over);
    let under = run_variant(spec, Conjecture::Under, &contexts, &unlearned, exec)?;
    let over = run_variant(spec, Conjecture::Over, &contexts, &unlearned, exec)?;

    let under_bits = under.bits(&under_cfg)?;
    let over_bits = over.bits(&over_cfg)?;
    let combined: Vec<bool> = under_bits.iter().zip(&over_bits).map(|(u, o)| u | o).collect();

    let mut sweep = Vec::new();
    for &tau in &spec.eval.sweep_taus {
        for &steps in &spec.eval.sweep_steps {
            let uc = AttackConfig { tau, steps, ..under_cfg.clone() };
            let oc = AttackConfig { tau, steps, ..over_cfg.clone() };
            let ub = under.bits(&uc)?;
            let ob = over.bits(&oc)?;
            let cb: Vec<bool> = ub.iter().zip(&ob).map(|(u, o)| u | o).collect();
            sweep.push(SweepPoint {
                tau,
                steps,
                under: metrics::operating_point(&ub, &truths)?,
                over: metrics::operating_point(&ob, &truths)?,
                combined: metrics::operating_point(&cb, &truths)?,
            });
        }
    }
    let (roc, auc) = frontier(&sweep.iter().map(|p| (p.combined.fpr, p.combined.tpr, p.tau)).collect::<Vec<_>>());
    let frontier_roc = Roc { points: roc.clone(), auc, positives: spec.eval.members, negatives: spec.eval.non_members };
    let apollo = ApolloSummary {
        under: metrics::operating_point(&under_bits, &truths)?,
        over: metrics::operating_point(&over_bits, &truths)?,
        combined: metrics::operating_point(&combined, &truths)?,
        sweep,
        tpr_at_lowest_fpr: metrics::tpr_at_lowest_fpr(&frontier_roc),
        roc,
        auc,
    };

    let t_max = spec.eval.dynamics_t_max;
    let dyn_under = AttackConfig { steps: t_max, ..under_cfg.clone() };
    let dyn_over = AttackConfig { steps: t_max, ..over_cfg.clone() };
    let mut fire_records = Vec::with_capacity(targets.len());
    for k in 0..targets.len() {
        fire_records.push(FireRecord {
            member: truths[k],
            under: under.paths[k].first_fire(&dyn_under, &under.labels[k])?,
            over: over.paths[k].first_fire(&dyn_over, &over.labels[k])?,
        });
    }
    let dynamics = attack::sweep_dynamics(&fire_records, t_max)?;

    let ulira = ulira_scores(&views, ensemble, &unlearned, spec.adversary.lira_scale)?;
    let posteriors: Vec<Vec<f64>> = targets.iter().map(|(id, _)| posterior(&unlearned, &store.get(*id).x)).collect::<Result<_>>()?;
    let umia = umia_scores(&posteriors, &truths, spec.adversary.umia_lambda, spec.seed_for(STREAM_EVAL) ^ 1)?;

    let samples = targets
        .iter()
        .enumerate()
        .map(|(k, &(id, member))| {
            let s = store.get(id);
            let (bit, conjecture) = attack::combine(under_bits[k], over_bits[k]);
            let distance = |run: &VariantRun, cfg: &AttackConfig| -> Result<f64> {
                let p = &run.paths[k];
                Ok(attack::l2_distance(&p.x, &p.points[p.steps_used(cfg)?]))
            };
            Ok(SampleScore {
                id,
                member,
                x: s.x.clone(),
                y: s.y,
                under: under_bits[k],
                over: over_bits[k],
                combined: bit,
                conjecture,
                under_first_fire: fire_records[k].under,
                over_first_fire: fire_records[k].over,
                under_distance: distance(&under, &under_cfg)?,
                over_distance: distance(&over, &over_cfg)?,
                ulira: ulira.as_ref().map(|u| u[k]),
                umia: umia[k],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let region = region::region_map(&challenge.original, &unlearned, &retrained, spec.eval.region_resolution)?;
    let split = &challenge.split;
    let models = ModelStats {
        original_train: learn::accuracy(&challenge.original, store, &split.train)?,
        original_test: learn::accuracy(&challenge.original, store, &split.test)?,
        unlearned_forget: learn::accuracy(&unlearned, store, &split.unlearn)?,
        unlearned_retain: learn::accuracy(&unlearned, store, &split.retain)?,
        unlearned_test: learn::accuracy(&unlearned, store, &split.test)?,
        retrained_forget: learn::accuracy(&retrained, store, &split.unlearn)?,
        retrained_test: learn::accuracy(&retrained, store, &split.test)?,
        shadow_train_mean: ensemble.shadows.iter().map(|s| s.train_accuracy).sum::<f64>() / ensemble.len() as f64,
    };
    let report = ScoreReport {
        seed: spec.seed,
        method: spec.challenger.unlearn.method,
        knowledge: spec.adversary.knowledge,
        models,
        samples,
        apollo,
        ulira: ulira.map(|u| metrics::roc_curve(&u, &truths).map(ScoredSummary::from_roc)).transpose()?,
        umia: ScoredSummary::from_roc(metrics::roc_curve(&umia, &truths)?),
        dynamics,
        region: region.counts(),
    };
    Ok(GameOutcome { report, under_paths: under.paths, over_paths: over.paths, region, unlearned, retrained })
}

/// Full game for one specification.
pub fn run_game(spec: &GameSpec, exec: Execution, cache: Option<&ShadowCache>) -> Result<GameOutcome> {
    let challenge = prepare(spec)?;
    let ensemble = build_shadows(spec, &challenge, exec, cache)?;
    let (unlearned, retrained) = unlearn_challenger(spec, &challenge.split, &challenge.original)?;
    play(spec, &challenge, &ensemble, unlearned, retrained, exec, cache)
}

/// Several challengers against the same data, original model and shadows.
pub fn run_methods(spec: &GameSpec, methods: &[Method], preset: Preset, exec: Execution, cache: Option<&ShadowCache>) -> Result<Vec<GameOutcome>> {
    let challenge = prepare(spec)?;
    let ensemble = build_shadows(spec, &challenge, exec, cache)?;
    methods
        .iter()
        .map(|&m| {
            let s = spec.clone().with_method(m, preset);
            let (unlearned, retrained) = unlearn_challenger(&s, &challenge.split, &challenge.original)?;
            play(&s, &challenge, &ensemble, unlearned, retrained, exec, cache)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub combined_tpr: f64,
    pub combined_fpr: f64,
    pub advantage: f64,
    pub apollo_auc: f64,
    pub ulira_auc: Option<f64>,
    pub umia_auc: f64,
}

pub fn summarize(reports: &[&ScoreReport]) -> Result<SuiteSummary> {
    let first = reports.first().ok_or_else(|| Error::InsufficientSamples("no reports to summarize".into()))?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&ScoreReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let tpr = mean(&|r| r.apollo.combined.tpr);
    let fpr = mean(&|r| r.apollo.combined.fpr);
    let ulira_auc = reports
        .iter()
        .map(|r| r.ulira.as_ref().map(|u| u.auc))
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    Ok(SuiteSummary {
        method: first.method,
        seeds: reports.iter().map(|r| r.seed).collect(),
        combined_tpr: tpr,
        combined_fpr: fpr,
        advantage: tpr - fpr,
        apollo_auc: mean(&|r| r.apollo.auc),
        ulira_auc,
        umia_auc: mean(&|r| r.umia.auc),
    })
}

/// `report.json` content: the configuration snapshot plus every per-seed report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub spec: GameSpec,
    pub reports: Vec<ScoreReport>,
    pub summary: Vec<SuiteSummary>,
}

impl RunReport {
    pub fn new(spec: GameSpec, reports: Vec<ScoreReport>) -> Result<Self> {
        let mut methods: Vec<Method> = reports.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        let summary = methods
            .iter()
            .map(|m| summarize(&reports.iter().filter(|r| r.method == *m).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { version: env!("CARGO_PKG_VERSION").to_string(), spec, reports, summary })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_scores_csv<W: Write>(reports: &[ScoreReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "seed", "method", "id", "member", "x1", "x2", "y", "under", "over", "combined", "under_first_fire",
        "over_first_fire", "ulira", "umia",
    ])
    .map_err(csv_err)?;
    for r in reports {
        for s in &r.samples {
            out.write_record([
                r.seed.to_string(),
                r.method.tag().to_string(),
                s.id.to_string(),
                u8::from(s.member).to_string(),
                s.x[0].to_string(),
                s.x.get(1).copied().unwrap_or(0.0).to_string(),
                s.y.to_string(),
                u8::from(s.under).to_string(),
                u8::from(s.over).to_string(),
                u8::from(s.combined).to_string(),
                opt(s.under_first_fire),
                opt(s.over_first_fire),
                opt(s.ulira),
                s.umia.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_roc_csv<W: Write>(reports: &[ScoreReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seed", "method", "attack", "threshold", "fpr", "tpr"]).map_err(csv_err)?;
    for r in reports {
        let mut curves: Vec<(&str, &[RocPoint])> = vec![("apollo", &r.apollo.roc), ("umia", &r.umia.roc)];
        if let Some(u) = &r.ulira {
            curves.push(("ulira", &u.roc));
        }
        for (name, points) in curves {
            for p in points {
                out.write_record([
                    r.seed.to_string(),
                    r.method.tag().to_string(),
                    name.to_string(),
                    p.threshold.to_string(),
                    p.fpr.to_string(),
                    p.tpr.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
