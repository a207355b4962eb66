//! Training and unlearning: retraining (RT), gradient ascent (GA),
//! fine-tuning (FT) and bad-teacher distillation (BT).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, MlpArchitecture, Mode, OptimState, OptimizerKind, ParamModel, Tape, Var};
use crate::datagen::{SampleId, SampleStore};
use crate::error::{Error, Result};

/// Objective values above this abort training or unlearning.
pub const DIVERGENCE_LOSS: f64 = 1e3;

/// Offset mixed into the seed of the minibatch shuffler so that it never
/// shares a stream with parameter initialization.
const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub seed: u64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_weight_decay() -> f64 {
    1e-2
}

impl TrainConfig {
    /// Target and shadow training on the quadrant task.
    pub fn toy(seed: u64) -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 32,
            optimizer: OptimizerKind::AdamW,
            schedule: Schedule::Cosine,
            seed,
            weight_decay: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimState {
        let wd = match self.optimizer {
            OptimizerKind::AdamW => self.weight_decay,
            OptimizerKind::Sgd => 0.0,
        };
        OptimState::with_kind(self.optimizer, self.learning_rate, wd)
    }

    fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine if total == 0 => self.learning_rate,
            Schedule::Cosine => {
                let progress = step as f64 / total as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "RT")]
    Retrain,
    #[serde(rename = "GA")]
    GradientAscent,
    #[serde(rename = "FT")]
    FineTune,
    #[serde(rename = "BT")]
    BadTeacher,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Retrain => "RT",
            Method::GradientAscent => "GA",
            Method::FineTune => "FT",
            Method::BadTeacher => "BT",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RT" => Ok(Method::Retrain),
            "GA" => Ok(Method::GradientAscent),
            "FT" => Ok(Method::FineTune),
            "BT" => Ok(Method::BadTeacher),
            _ => Err(Error::InvalidConfig(format!("unknown unlearning method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub method: Method,
    pub config: TrainConfig,
    #[serde(default = "default_temperature")]
    pub distill_temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

impl UnlearnRequest {
    /// Desk-scale defaults for each method. `train` is the configuration the
    /// original model was trained with; retraining reuses it.
    pub fn toy(method: Method, train: &TrainConfig) -> Self {
        let config = match method {
            Method::Retrain => train.clone(),
            Method::GradientAscent => TrainConfig {
                epochs: 25,
                learning_rate: 1e-3,
                batch_size: 1024,
                optimizer: OptimizerKind::Sgd,
                schedule: Schedule::Cosine,
                seed: train.seed,
                weight_decay: 0.0,
            },
            Method::FineTune | Method::BadTeacher => TrainConfig {
                epochs: 50,
                learning_rate: 1e-3,
                batch_size: train.batch_size,
                optimizer: OptimizerKind::AdamW,
                schedule: Schedule::Cosine,
                seed: train.seed,
                weight_decay: train.weight_decay,
            },
        };
        Self { method, config, distill_temperature: 1.0 }
    }

    /// The CIFAR-scale hyperparameters of the reference setup.
    pub fn paper(method: Method, seed: u64) -> Self {
        let (epochs, lr, optimizer) = match method {
            Method::Retrain => (50, 1e-4, OptimizerKind::AdamW),
            Method::GradientAscent => (10, 2e-4, OptimizerKind::Sgd),
            Method::FineTune => (10, 1e-2, OptimizerKind::Sgd),
            Method::BadTeacher => (10, 3e-3, OptimizerKind::AdamW),
        };
        let config = TrainConfig {
            epochs,
            learning_rate: lr,
            batch_size: 64,
            optimizer,
            schedule: Schedule::Cosine,
            seed,
            weight_decay: if optimizer == OptimizerKind::AdamW { 1e-2 } else { 0.0 },
        };
        Self { method, config, distill_temperature: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Ordered minibatches of `ids` for one epoch. A trailing batch of a single
/// sample is folded into its predecessor so train-mode batch norm always sees
/// at least two rows.
fn epoch_batches(ids: &[SampleId], batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<SampleId>> {
    let mut order = ids.to_vec();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    let mut batches: Vec<Vec<SampleId>> = order.chunks(batch_size.max(1)).map(<[_]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    batches
}

/// One objective evaluated on a minibatch: the recorded scalar and its value.
type Objective<'o> = dyn for<'t> Fn(&mut Tape<'t>, Var, &[SampleId]) -> Result<Var> + 'o;

struct LoopSpec<'o> {
    ids: &'o [SampleId],
    batch_stats: bool,
    ascend: bool,
    shuffle: bool,
    objective: &'o Objective<'o>,
}

fn optimize(model: &mut ParamModel, store: &SampleStore, cfg: &TrainConfig, spec: LoopSpec<'_>) -> Result<(usize, f64)> {
    cfg.validate()?;
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let batches_per_epoch = epoch_batches(spec.ids, cfg.batch_size, None).len();
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0;
    let mut last_loss = f64::NAN;
    model.set_mode(if spec.batch_stats { Mode::Train } else { Mode::Eval });
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(spec.ids, cfg.batch_size, spec.shuffle.then_some(&mut rng));
        for batch in batches {
            let (inputs, _) = store.batch(&batch);
            let (rows, cols) = inputs.rows_cols();
            let (loss, grads, moments) = {
                let mut tape = Tape::new();
                let x = tape.leaf_borrowed(inputs.data(), rows, cols, false)?;
                let rec = model.record(&mut tape, x, spec.batch_stats, true)?;
                let objective = (spec.objective)(&mut tape, rec.logits, &batch)?;
                let loss = tape.scalar(objective);
                if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                    model.set_mode(Mode::Eval);
                    return Err(Error::Diverged { epoch, loss });
                }
                let mut g = tape.backward(objective)?;
                let mut grads: Vec<Option<Vec<f64>>> = rec.params.iter().map(|&p| g.take(p)).collect();
                if spec.ascend {
                    grads.iter_mut().flatten().flatten().for_each(|v| *v = -*v);
                }
                (loss, grads, rec.moments)
            };
            opt.learning_rate = cfg.learning_rate_at(step, total_steps);
            opt.step(model.params_mut(), &grads).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss },
                other => other,
            })?;
            if spec.batch_stats {
                model.update_running_stats(&moments);
            }
            step += 1;
            last_loss = loss;
        }
    }
    model.set_mode(Mode::Eval);
    Ok((step, last_loss))
}

fn cross_entropy_objective(store: &SampleStore) -> impl for<'t> Fn(&mut Tape<'t>, Var, &[SampleId]) -> Result<Var> + '_ {
    move |tape, logits, batch| {
        let labels: Vec<usize> = batch.iter().map(|&i| store.get(i).y).collect();
        tape.cross_entropy(logits, &labels)
    }
}

pub fn accuracy(model: &ParamModel, store: &SampleStore, ids: &[SampleId]) -> Result<f64> {
    if ids.is_empty() {
        return Ok(f64::NAN);
    }
    let (inputs, labels) = store.batch(ids);
    let predicted = model.predict_labels(&inputs)?;
    let hits = predicted.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / ids.len() as f64)
}

/// Mean cross-entropy of an eval-mode model on `ids`.
pub fn mean_loss(model: &ParamModel, store: &SampleStore, ids: &[SampleId]) -> Result<f64> {
    let (inputs, labels) = store.batch(ids);
    let (rows, cols) = inputs.rows_cols();
    let mut tape = Tape::new();
    let x = tape.leaf_borrowed(inputs.data(), rows, cols, false)?;
    let rec = model.record(&mut tape, x, false, false)?;
    let ce = tape.cross_entropy(rec.logits, &labels)?;
    Ok(tape.scalar(ce))
}

/// Train a freshly initialized model on `ids`.
pub fn train(
    store: &SampleStore,
    ids: &[SampleId],
    arch: &MlpArchitecture,
    cfg: &TrainConfig,
) -> Result<(ParamModel, TrainSummary)> {
    if ids.is_empty() {
        return Err(Error::InsufficientSamples("cannot train on an empty set".into()));
    }
    let mut model = ParamModel::init(arch.clone(), cfg.seed)?;
    let objective = cross_entropy_objective(store);
    let (steps, final_loss) = optimize(
        &mut model,
        store,
        cfg,
        LoopSpec { ids, batch_stats: ids.len() >= 2, ascend: false, shuffle: true, objective: &objective },
    )?;
    let summary = TrainSummary { epochs_run: cfg.epochs, steps, final_loss, train_accuracy: accuracy(&model, store, ids)? };
    Ok((model, summary))
}

/// Retraining from scratch on the retained set only.
pub fn unlearn_rt(store: &SampleStore, retain: &[SampleId], arch: &MlpArchitecture, cfg: &TrainConfig) -> Result<ParamModel> {
    train(store, retain, arch, cfg).map(|(m, _)| m)
}

/// Gradient ascent on the forget-set cross-entropy. Batch norm stays in
/// eval mode with frozen running statistics.
pub fn unlearn_ga(original: &ParamModel, store: &SampleStore, forget: &[SampleId], cfg: &TrainConfig) -> Result<ParamModel> {
    let mut model = original.clone();
    if forget.is_empty() {
        return Ok(model);
    }
    let objective = cross_entropy_objective(store);
    optimize(
        &mut model,
        store,
        cfg,
        LoopSpec { ids: forget, batch_stats: false, ascend: true, shuffle: true, objective: &objective },
    )?;
    Ok(model)
}

/// Continued cross-entropy training on the retained set.
pub fn unlearn_ft(original: &ParamModel, store: &SampleStore, retain: &[SampleId], cfg: &TrainConfig) -> Result<ParamModel> {
    let mut model = original.clone();
    if retain.is_empty() || cfg.epochs == 0 {
        return Ok(model);
    }
    let objective = cross_entropy_objective(store);
    optimize(
        &mut model,
        store,
        cfg,
        LoopSpec { ids: retain, batch_stats: retain.len() >= 2, ascend: false, shuffle: true, objective: &objective },
    )?;
    Ok(model)
}

/// Softened eval-mode posteriors of `teacher` on `ids`, one row per id.
pub fn soft_targets(teacher: &ParamModel, store: &SampleStore, ids: &[SampleId], temperature: f64) -> Result<Vec<f64>> {
    let (inputs, _) = store.batch(ids);
    let logits = teacher.forward(&inputs)?;
    let scaled: Vec<f64> = logits.data().iter().map(|v| v / temperature).collect();
    Ok(softmax_rows(&scaled, teacher.classes()))
}

/// Bad-teacher distillation: the student starts from `original` and matches a
/// randomly initialized teacher on the forget set and `original` itself on the
/// retained set.
pub fn unlearn_bt(
    original: &ParamModel,
    store: &SampleStore,
    forget: &[SampleId],
    retain: &[SampleId],
    cfg: &TrainConfig,
    temperature: f64,
) -> Result<ParamModel> {
    let bad_teacher = ParamModel::init(original.architecture().clone(), cfg.seed.wrapping_add(1))?;
    distill(original, &bad_teacher, original, store, forget, retain, cfg, temperature)
}

/// Distill `student` towards `forget_teacher` on `forget` and `retain_teacher` on `retain`.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    student: &ParamModel,
    forget_teacher: &ParamModel,
    retain_teacher: &ParamModel,
    store: &SampleStore,
    forget: &[SampleId],
    retain: &[SampleId],
    cfg: &TrainConfig,
    temperature: f64,
) -> Result<ParamModel> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("distillation temperature {temperature}")));
    }
    let classes = student.classes();
    let mut targets: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (teacher, ids) in [(forget_teacher, forget), (retain_teacher, retain)] {
        let probs = soft_targets(teacher, store, ids, temperature)?;
        for (&id, row) in ids.iter().zip(probs.chunks(classes)) {
            targets[id] = Some(row.to_vec());
        }
    }
    let mut all: Vec<SampleId> = forget.iter().chain(retain).copied().collect();
    all.sort_unstable();
    let mut model = student.clone();
    if all.is_empty() || cfg.epochs == 0 {
        return Ok(model);
    }
    let objective = move |tape: &mut Tape<'_>, logits: Var, batch: &[SampleId]| -> Result<Var> {
        let flat: Vec<f64> = batch.iter().flat_map(|&i| targets[i].clone().unwrap_or_default()).collect();
        tape.soft_target_kl(logits, &flat, temperature)
    };
    optimize(
        &mut model,
        store,
        cfg,
        LoopSpec { ids: &all, batch_stats: all.len() >= 2, ascend: false, shuffle: true, objective: &objective },
    )?;
    Ok(model)
}

/// Apply `request` to `original`, forgetting `forget` and keeping `retain`.
pub fn unlearn(
    request: &UnlearnRequest,
    original: &ParamModel,
    store: &SampleStore,
    forget: &[SampleId],
    retain: &[SampleId],
) -> Result<ParamModel> {
    match request.method {
        Method::Retrain => unlearn_rt(store, retain, original.architecture(), &request.config),
        Method::GradientAscent => unlearn_ga(original, store, forget, &request.config),
        Method::FineTune => unlearn_ft(original, store, retain, &request.config),
        Method::BadTeacher => unlearn_bt(original, store, forget, retain, &request.config, request.distill_temperature),
    }
}

/// Predicted class of a single input (ties go to the lowest index).
pub fn predict_label(model: &ParamModel, x: &[f64]) -> Result<usize> {
    let batch = crate::tensor::Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(model.predict_labels(&batch)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_quadrants, make_splits};

    fn small_arch() -> MlpArchitecture {
        MlpArchitecture::blocks(2, 16, 2, 4)
    }

    #[test]
    fn single_tail_batch_is_merged() {
        let b = epoch_batches(&[1, 2, 3, 4, 5], 2, None);
        assert_eq!(b, vec![vec![1, 2], vec![3, 4, 5]]);
        let b = epoch_batches(&[1, 2, 3, 4], 2, None);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::toy(0);
        assert_eq!(cfg.learning_rate_at(0, 10), cfg.learning_rate);
        assert!((cfg.learning_rate_at(5, 10) - cfg.learning_rate / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let split = make_splits(gen_quadrants(100, 0).unwrap(), 50, 0.1, 0).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::toy(4) };
        let (model, _) = train(&split.store, &split.train, &small_arch(), &cfg).unwrap();
        assert_eq!(model, ParamModel::init(small_arch(), 4).unwrap());
    }

    #[test]
    fn empty_training_set_rejected() {
        let store = gen_quadrants(10, 0).unwrap();
        assert!(train(&store, &[], &small_arch(), &TrainConfig::toy(0)).is_err());
    }

    #[test]
    fn ga_with_zero_rate_is_identity() {
        let split = make_splits(gen_quadrants(100, 0).unwrap(), 50, 0.1, 0).unwrap();
        let (model, _) = train(&split.store, &split.train, &small_arch(), &TrainConfig::toy(1)).unwrap();
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, ..UnlearnRequest::toy(Method::GradientAscent, &TrainConfig::toy(1)).config };
        let after = unlearn_ga(&model, &split.store, &split.unlearn, &cfg).unwrap();
        assert_eq!(after, model);
    }

    #[test]
    fn ft_and_bt_with_zero_epochs_are_identity() {
        let split = make_splits(gen_quadrants(100, 0).unwrap(), 50, 0.1, 0).unwrap();
        let (model, _) = train(&split.store, &split.train, &small_arch(), &TrainConfig::toy(1)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::toy(1) };
        assert_eq!(unlearn_ft(&model, &split.store, &split.retain, &cfg).unwrap(), model);
        assert_eq!(unlearn_bt(&model, &split.store, &split.unlearn, &split.retain, &cfg, 1.0).unwrap(), model);
    }

    #[test]
    fn self_distillation_has_zero_gradient() {
        let split = make_splits(gen_quadrants(100, 0).unwrap(), 50, 0.1, 0).unwrap();
        let (model, _) = train(&split.store, &split.train, &small_arch(), &TrainConfig::toy(2)).unwrap();
        let targets = soft_targets(&model, &split.store, &split.train, 1.0).unwrap();
        let (inputs, _) = split.store.batch(&split.train);
        let (r, c) = inputs.rows_cols();
        let mut tape = Tape::new();
        let x = tape.leaf_borrowed(inputs.data(), r, c, false).unwrap();
        let rec = model.record(&mut tape, x, false, true).unwrap();
        let kl = tape.soft_target_kl(rec.logits, &targets, 1.0).unwrap();
        assert!(tape.scalar(kl).abs() < 1e-12);
        let g = tape.backward(kl).unwrap();
        for p in rec.params {
            assert!(g.get(p).unwrap().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn method_tags_parse() {
        for m in [Method::Retrain, Method::GradientAscent, Method::FineTune, Method::BadTeacher] {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert!("SCRUB".parse::<Method>().is_err());
    }

    #[test]
    fn predict_label_tie_break() {
        use crate::autodiff::LayerSpec;
        use crate::tensor::Tensor;
        let arch = MlpArchitecture::new(vec![LayerSpec::Linear { inputs: 4, outputs: 4 }]).unwrap();
        let eye: Vec<f64> = (0..16).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let model = ParamModel::from_parts(
            arch,
            vec![Tensor::new(vec![4, 4], eye).unwrap(), Tensor::zeros(vec![4])],
            vec![],
            Mode::Eval,
        )
        .unwrap();
        assert_eq!(predict_label(&model, &[0.0, 0.0, 0.0, 1.0]).unwrap(), 3);
        assert_eq!(predict_label(&model, &[1.0, 1.0, 0.0, 0.0]).unwrap(), 0);
    }
}
