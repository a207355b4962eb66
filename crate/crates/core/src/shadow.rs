//! Shadow (surrogate) model ensembles and their unlearned counterparts.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{MlpArchitecture, ParamModel};
use crate::checkpoint::{self, Provenance};
use crate::datagen::{KnowledgeMode, LabeledSample, SampleId, SampleStore};
use crate::error::{Error, Result};
use crate::exec::{mix_seed, Execution};
use crate::learn::{self, TrainConfig, UnlearnRequest};

const SHADOW_STREAM: u64 = 0x5_4ad0;

/// How unlearned shadows are produced for the online attack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowUnlearning {
    /// Unlearn `D^s_i ∩ D_target` once per shadow.
    #[default]
    Batched,
    /// Unlearn `{x}` separately for every target.
    PerTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowSpec {
    pub architecture: MlpArchitecture,
    pub train: TrainConfig,
    pub mode: KnowledgeMode,
    pub master_seed: u64,
}

impl ShadowSpec {
    pub fn shadow_seed(&self, index: usize) -> u64 {
        mix_seed(self.master_seed, SHADOW_STREAM, index as u64)
    }

    fn shadow_config(&self, index: usize) -> TrainConfig {
        TrainConfig { seed: self.shadow_seed(index), ..self.train.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct Shadow {
    /// Sorted ids of `D^s_i`.
    pub members: Vec<SampleId>,
    pub seed: u64,
    pub model: ParamModel,
    pub train_accuracy: f64,
}

impl Shadow {
    pub fn contains(&self, id: SampleId) -> bool {
        self.members.binary_search(&id).is_ok()
    }
}

/// `m` trained shadows; immutable after construction.
#[derive(Clone, Debug)]
pub struct ShadowEnsemble {
    pub spec: ShadowSpec,
    pub shadows: Vec<Shadow>,
    key: String,
}

fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

/// Checkpoint directory rooted at `<root>/shadows`.
#[derive(Clone, Debug)]
pub struct ShadowCache {
    root: PathBuf,
}

impl ShadowCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into().join("shadows") }
    }

    pub fn dir(&self, hash: &str) -> PathBuf {
        self.root.join(hash)
    }

    fn load_or<F>(&self, path: &Path, seed: u64, provenance: Provenance, build: F) -> Result<ParamModel>
    where
        F: FnOnce() -> Result<ParamModel>,
    {
        if path.exists() {
            let (model, header) = checkpoint::load(path)?;
            if header.provenance != provenance || header.seed != seed {
                return Err(Error::Checkpoint(format!("{} has unexpected lineage", path.display())));
            }
            return Ok(model);
        }
        let model = build()?;
        checkpoint::save(path, &model, seed, provenance)?;
        Ok(model)
    }
}

fn load_or_build<F>(cache: Option<&ShadowCache>, path: impl FnOnce(&ShadowCache) -> PathBuf, seed: u64, provenance: Provenance, build: F) -> Result<ParamModel>
where
    F: FnOnce() -> Result<ParamModel>,
{
    match cache {
        Some(c) => c.load_or(&path(c), seed, provenance, build),
        None => build(),
    }
}

/// Train one shadow per surrogate set. Shadow `i` uses a seed derived from
/// the master seed and `i`; results are assembled in index order.
pub fn build_ensemble(
    store: &SampleStore,
    surrogates: &[Vec<SampleId>],
    spec: ShadowSpec,
    exec: Execution,
    cache: Option<&ShadowCache>,
) -> Result<ShadowEnsemble> {
    if surrogates.is_empty() {
        return Err(Error::InvalidConfig("at least one surrogate set is required".into()));
    }
    let key = content_hash(&(&spec, surrogates))?;
    let shadows = exec.try_map(surrogates.len(), |i| {
        let cfg = spec.shadow_config(i);
        let members = surrogates[i].clone();
        let model = load_or_build(
            cache,
            |c| c.dir(&key).join(format!("s{i}.ckpt")),
            cfg.seed,
            Provenance::Shadow,
            || learn::train(store, &members, &spec.architecture, &cfg).map(|(m, _)| m),
        )
        .map_err(|e| Error::Shadow { index: i, source: Box::new(e) })?;
        let train_accuracy = learn::accuracy(&model, store, &members)?;
        Ok::<_, Error>(Shadow { members, seed: cfg.seed, model, train_accuracy })
    })?;
    Ok(ShadowEnsemble { spec, shadows, key })
}

/// Unlearned shadows produced by the batched scheme.
#[derive(Clone, Debug)]
pub struct UnlearnedShadows {
    pub request: UnlearnRequest,
    /// `D^s_i ∩ D_target` per shadow.
    pub forget: Vec<Vec<SampleId>>,
    /// `None` where the intersection is empty.
    pub models: Vec<Option<Arc<ParamModel>>>,
}

impl ShadowEnsemble {
    pub fn len(&self) -> usize {
        self.shadows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shadows.is_empty()
    }

    pub fn mode(&self) -> KnowledgeMode {
        self.spec.mode
    }

    /// Content hash of the ensemble configuration and surrogate sets.
    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn in_mask(&self, id: SampleId) -> Vec<bool> {
        self.shadows.iter().map(|s| s.contains(id)).collect()
    }

    fn shadow_request(&self, request: &UnlearnRequest, index: usize) -> UnlearnRequest {
        let mut r = request.clone();
        r.config.seed = self.shadows[index].seed;
        r
    }

    fn unlearn_one(&self, store: &SampleStore, request: &UnlearnRequest, index: usize, forget: &[SampleId]) -> Result<ParamModel> {
        let shadow = &self.shadows[index];
        let retain: Vec<SampleId> = shadow.members.iter().copied().filter(|id| forget.binary_search(id).is_err()).collect();
        learn::unlearn(&self.shadow_request(request, index), &shadow.model, store, forget, &retain)
            .map_err(|e| Error::Shadow { index, source: Box::new(e) })
    }

    fn unlearned_dir_hash(&self, request: &UnlearnRequest, scope: &[SampleId]) -> Result<String> {
        content_hash(&(&self.key, request, scope))
    }

    /// Unlearn each shadow's intersection with `targets` (sorted or not).
    pub fn unlearn_batched(
        &self,
        store: &SampleStore,
        request: &UnlearnRequest,
        targets: &[SampleId],
        exec: Execution,
        cache: Option<&ShadowCache>,
    ) -> Result<UnlearnedShadows> {
        if self.mode() == KnowledgeMode::Offline {
            return Err(Error::InvalidConfig("offline ensembles have no unlearned shadows".into()));
        }
        let mut targets = targets.to_vec();
        targets.sort_unstable();
        targets.dedup();
        let hash = self.unlearned_dir_hash(request, &targets)?;
        let forget: Vec<Vec<SampleId>> = self
            .shadows
            .iter()
            .map(|s| targets.iter().copied().filter(|t| s.contains(*t)).collect())
            .collect();
        let models = exec.try_map(self.len(), |i| {
            if forget[i].is_empty() {
                return Ok(None);
            }
            let seed = self.shadows[i].seed;
            load_or_build(
                cache,
                |c| c.dir(&hash).join(format!("su{i}_batch.ckpt")),
                seed,
                Provenance::ShadowUnlearned,
                || self.unlearn_one(store, request, i, &forget[i]),
            )
            .map(|m| Some(Arc::new(m)))
        })?;
        Ok(UnlearnedShadows { request: request.clone(), forget, models })
    }

    /// Membership mask of `target` and, for online ensembles, the unlearned
    /// shadows for every shadow that contains it.
    pub fn view_target(&self, store: &SampleStore, target: &LabeledSample, source: UnlearnSource<'_>) -> Result<TargetView> {
        let in_mask = self.in_mask(target.id);
        let unlearned = match source {
            UnlearnSource::None => None,
            _ if self.mode() == KnowledgeMode::Offline => {
                return Err(Error::InvalidConfig("offline ensembles cannot provide unlearned shadows".into()))
            }
            UnlearnSource::Batched(batch) => Some(
                in_mask
                    .iter()
                    .enumerate()
                    .map(|(i, &inside)| {
                        if !inside {
                            return Ok(None);
                        }
                        match &batch.models[i] {
                            Some(m) if batch.forget[i].binary_search(&target.id).is_ok() => Ok(Some(Arc::clone(m))),
                            _ => Err(Error::InvalidConfig(format!(
                                "target {} was not part of the batched unlearning of shadow {i}",
                                target.id
                            ))),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            UnlearnSource::PerTarget { request, cache } => {
                let hash = self.unlearned_dir_hash(request, &[])?;
                let models = in_mask
                    .iter()
                    .enumerate()
                    .map(|(i, &inside)| {
                        if !inside {
                            return Ok(None);
                        }
                        load_or_build(
                            cache,
                            |c| c.dir(&hash).join(format!("su{i}_{}.ckpt", target.id)),
                            self.shadows[i].seed,
                            Provenance::ShadowUnlearned,
                            || self.unlearn_one(store, request, i, &[target.id]),
                        )
                        .map(|m| Some(Arc::new(m)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(models)
            }
        };
        Ok(TargetView { target: target.clone(), in_mask, unlearned })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum UnlearnSource<'a> {
    /// Membership mask only.
    None,
    Batched(&'a UnlearnedShadows),
    PerTarget { request: &'a UnlearnRequest, cache: Option<&'a ShadowCache> },
}

/// One target's relationship to the ensemble.
#[derive(Clone, Debug)]
pub struct TargetView {
    pub target: LabeledSample,
    pub in_mask: Vec<bool>,
    /// Present for online views: `Some` exactly where `in_mask` is true.
    pub unlearned: Option<Vec<Option<Arc<ParamModel>>>>,
}

impl TargetView {
    pub fn in_count(&self) -> usize {
        self.in_mask.iter().filter(|b| **b).count()
    }

    pub fn out_count(&self) -> usize {
        self.in_mask.len() - self.in_count()
    }
}
