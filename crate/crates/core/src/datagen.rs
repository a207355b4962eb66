//! The 2-D quadrant population, target splits and surrogate (shadow) datasets.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type SampleId = usize;

/// Attempts made to draw online surrogates that cover every target both ways.
pub const COVERAGE_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: SampleId,
    pub x: Vec<f64>,
    pub y: usize,
}

/// Immutable store of labeled samples; ids equal positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStore {
    samples: Vec<LabeledSample>,
    classes: usize,
    dim: usize,
}

impl SampleStore {
    pub fn new(samples: Vec<LabeledSample>, classes: usize) -> Result<Self> {
        let dim = samples.first().map_or(0, |s| s.x.len());
        for (i, s) in samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::InvalidConfig(format!("sample at position {i} has id {}", s.id)));
            }
            if s.y >= classes {
                return Err(Error::LabelOutOfRange { label: s.y, classes });
            }
            if s.x.len() != dim {
                return Err(Error::ShapeMismatch(format!("sample {i} has dimension {}", s.x.len())));
            }
        }
        Ok(Self { samples, classes, dim })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, id: SampleId) -> &LabeledSample {
        &self.samples[id]
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        0..self.samples.len()
    }

    /// Inputs and labels of `ids` as an `n x dim` batch.
    pub fn batch(&self, ids: &[SampleId]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        let mut labels = Vec::with_capacity(ids.len());
        for &id in ids {
            data.extend_from_slice(&self.samples[id].x);
            labels.push(self.samples[id].y);
        }
        let tensor = Tensor::new(vec![ids.len(), self.dim], data).expect("consistent sample dimension");
        (tensor, labels)
    }
}

/// Class of a point in the plane: 0 (+,+), 1 (-,+), 2 (-,-), 3 (+,-).
/// Points on an axis count as positive on that axis.
pub fn quadrant_label(x: &[f64]) -> usize {
    match (x[0] >= 0.0, x[1] >= 0.0) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    }
}

/// `n` points uniform in the open square `(-1, 1)^2`, labeled by quadrant.
pub fn gen_quadrants(n: usize, seed: u64) -> Result<SampleStore> {
    if n == 0 {
        return Err(Error::InvalidConfig("population size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut open_unit = || loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v > -1.0 {
            break v;
        }
    };
    let samples = (0..n)
        .map(|id| {
            let x = vec![open_unit(), open_unit()];
            let y = quadrant_label(&x);
            LabeledSample { id, x, y }
        })
        .collect();
    SampleStore::new(samples, 4)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeMode {
    Online,
    Offline,
}

/// Named index sets over a [`SampleStore`]; every set is sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub store: SampleStore,
    pub train: Vec<SampleId>,
    pub unlearn: Vec<SampleId>,
    pub retain: Vec<SampleId>,
    pub test: Vec<SampleId>,
    pub surrogates: Vec<Vec<SampleId>>,
}

fn sorted(mut v: Vec<SampleId>) -> Vec<SampleId> {
    v.sort_unstable();
    v
}

/// Target training set `D` of `train_n` samples, a forget set `D_u` holding
/// `round(unlearn_frac * train_n)` of them, and `D_t` as the complement of `D`.
pub fn make_splits(store: SampleStore, train_n: usize, unlearn_frac: f64, seed: u64) -> Result<SplitDataset> {
    if !(unlearn_frac > 0.0 && unlearn_frac < 1.0) {
        return Err(Error::InvalidConfig(format!("unlearn fraction must lie in (0, 1), got {unlearn_frac}")));
    }
    if train_n == 0 || train_n > store.len() {
        return Err(Error::InsufficientSamples(format!(
            "training set of {train_n} from a population of {}",
            store.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<SampleId> = store.ids().collect();
    ids.shuffle(&mut rng);
    let test = sorted(ids.split_off(train_n));
    let n_unlearn = (unlearn_frac * train_n as f64).round() as usize;
    let retain = sorted(ids.split_off(n_unlearn));
    let unlearn = sorted(ids);
    let train = sorted(unlearn.iter().chain(&retain).copied().collect());
    let split = SplitDataset { store, train, unlearn, retain, test, surrogates: Vec::new() };
    split.check_invariants()?;
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub mode: KnowledgeMode,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Online mode: each coverage target must be inside at least this many
    /// sets and outside at least this many.
    pub min_coverage: usize,
}

impl SplitDataset {
    pub fn check_invariants(&self) -> Result<()> {
        let train: BTreeSet<_> = self.train.iter().copied().collect();
        let unlearn: BTreeSet<_> = self.unlearn.iter().copied().collect();
        let retain: BTreeSet<_> = self.retain.iter().copied().collect();
        let test: BTreeSet<_> = self.test.iter().copied().collect();
        let fail = |m: &str| Err(Error::InvalidConfig(format!("split invariant violated: {m}")));
        if train.len() != self.train.len() || self.train.iter().any(|&i| i >= self.store.len()) {
            return fail("training ids must be unique and in range");
        }
        if !unlearn.is_subset(&train) {
            return fail("D_u must be a subset of D");
        }
        if retain != train.difference(&unlearn).copied().collect() {
            return fail("D_r must equal D minus D_u");
        }
        if !train.is_disjoint(&test) {
            return fail("D and D_t must be disjoint");
        }
        Ok(())
    }

    /// Ids outside the target training set.
    pub fn disjoint_pool(&self) -> Vec<SampleId> {
        let train: BTreeSet<_> = self.train.iter().copied().collect();
        self.store.ids().filter(|i| !train.contains(i)).collect()
    }

    /// Draw surrogate sets and store them on the split.
    ///
    /// Offline sets are drawn from outside `D` and never contain a coverage
    /// target; online sets come from the whole population, each without replacement and independently of the others,
    /// redrawn until every id in `coverage_targets` is both inside and outside
    /// `min_coverage` sets.
    pub fn sample_surrogates(&mut self, spec: &SurrogateSpec, coverage_targets: &[SampleId]) -> Result<()> {
        self.surrogates = sample_surrogates(self, spec, coverage_targets)?;
        Ok(())
    }
}

pub fn sample_surrogates(
    split: &SplitDataset,
    spec: &SurrogateSpec,
    coverage_targets: &[SampleId],
) -> Result<Vec<Vec<SampleId>>> {
    if spec.count == 0 || spec.size == 0 {
        return Err(Error::InvalidConfig("surrogate count and size must be positive".into()));
    }
    let pool: Vec<SampleId> = match spec.mode {
        KnowledgeMode::Offline => {
            let mut pool = split.disjoint_pool();
            pool.retain(|i| !coverage_targets.contains(i));
            pool
        }
        KnowledgeMode::Online => split.store.ids().collect(),
    };
    if pool.len() < spec.size {
        return Err(Error::PoolExhausted(format!("need {} samples, pool holds {}", spec.size, pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<SampleId>> {
        (0..spec.count)
            .map(|_| sorted(pool.choose_multiple(rng, spec.size).copied().collect()))
            .collect()
    };
    if spec.mode == KnowledgeMode::Offline {
        return Ok(draw(&mut rng));
    }
    for _ in 0..COVERAGE_RETRIES {
        let sets = draw(&mut rng);
        let covered = coverage_targets.iter().all(|t| {
            let inside = sets.iter().filter(|s| s.binary_search(t).is_ok()).count();
            inside >= spec.min_coverage && spec.count - inside >= spec.min_coverage
        });
        if covered {
            return Ok(sets);
        }
    }
    Err(Error::PoolExhausted(format!(
        "no online surrogate draw covered every target within {COVERAGE_RETRIES} attempts"
    )))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    id: SampleId,
    x1: f64,
    x2: f64,
    y: usize,
    split: String,
}

/// Write `id,x1,x2,y,split` rows; split is `unlearn`, `retain` or `test`.
pub fn write_csv<W: Write>(split: &SplitDataset, writer: W) -> Result<()> {
    if split.store.dim() != 2 {
        return Err(Error::ShapeMismatch("CSV export expects 2-D inputs".into()));
    }
    let mut tags = vec!["pool"; split.store.len()];
    for &i in &split.unlearn {
        tags[i] = "unlearn";
    }
    for &i in &split.retain {
        tags[i] = "retain";
    }
    for &i in &split.test {
        tags[i] = "test";
    }
    let mut w = csv::Writer::from_writer(writer);
    for s in split.store.samples() {
        w.serialize(CsvRow { id: s.id, x1: s.x[0], x2: s.x[1], y: s.y, split: tags[s.id].to_string() })
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<SplitDataset> {
    let mut rows: Vec<CsvRow> = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        rows.push(row.map_err(|e| Error::Io(std::io::Error::other(e)))?);
    }
    rows.sort_by_key(|r| r.id);
    let mut unlearn = Vec::new();
    let mut retain = Vec::new();
    let mut test = Vec::new();
    let mut samples = Vec::with_capacity(rows.len());
    for r in rows {
        match r.split.as_str() {
            "unlearn" => unlearn.push(r.id),
            "retain" => retain.push(r.id),
            "test" => test.push(r.id),
            "pool" => {}
            other => return Err(Error::InvalidConfig(format!("unknown split tag {other:?}"))),
        }
        samples.push(LabeledSample { id: r.id, x: vec![r.x1, r.x2], y: r.y });
    }
    let store = SampleStore::new(samples, 4)?;
    let train = sorted(unlearn.iter().chain(&retain).copied().collect());
    let split = SplitDataset { store, train, unlearn, retain, test, surrogates: Vec::new() };
    split.check_invariants()?;
    Ok(split)
}
