//! Feed-forward networks built from linear, ReLU and batch-norm layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{argmax, softmax_rows, BatchMoments, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Rows per chunk when running eval-mode inference on large batches.
const INFERENCE_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { inputs: usize, outputs: usize },
    Relu,
    BatchNorm { channels: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub layers: Vec<LayerSpec>,
}

impl MlpArchitecture {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Self { layers };
        arch.validate()?;
        Ok(arch)
    }

    /// The 12-layer network used for the 2-D quadrant experiment:
    /// `Linear 2->256`, ten blocks of `Linear 256->256, ReLU, BatchNorm`, `Linear 256->4`.
    pub fn table3() -> Self {
        Self::blocks(2, 256, 10, 4)
    }

    /// `Linear input->width`, `blocks` x (`Linear width->width`, ReLU, BatchNorm), `Linear width->classes`.
    pub fn blocks(input: usize, width: usize, blocks: usize, classes: usize) -> Self {
        let mut layers = vec![LayerSpec::Linear { inputs: input, outputs: width }];
        for _ in 0..blocks {
            layers.push(LayerSpec::Linear { inputs: width, outputs: width });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::BatchNorm { channels: width });
        }
        layers.push(LayerSpec::Linear { inputs: width, outputs: classes });
        Self { layers }
    }

    pub fn validate(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        let mut saw_linear = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Linear { inputs, outputs } => {
                    if inputs == 0 || outputs == 0 {
                        return Err(Error::InvalidConfig(format!("layer {i}: empty linear layer")));
                    }
                    if let Some(w) = width {
                        if w != inputs {
                            return Err(Error::InvalidConfig(format!(
                                "layer {i}: linear expects {inputs} inputs, previous width is {w}"
                            )));
                        }
                    }
                    width = Some(outputs);
                    saw_linear = true;
                }
                LayerSpec::Relu => {
                    if width.is_none() {
                        return Err(Error::InvalidConfig(format!("layer {i}: activation before any linear layer")));
                    }
                }
                LayerSpec::BatchNorm { channels } => match width {
                    Some(w) if w == channels => {}
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: batch norm over {channels} channels, width {width:?}"
                        )))
                    }
                },
            }
        }
        if !saw_linear || !matches!(self.layers.first(), Some(LayerSpec::Linear { .. })) {
            return Err(Error::InvalidConfig("architecture must start with a linear layer".into()));
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Linear { .. })) {
            return Err(Error::InvalidConfig("architecture must end with a linear layer".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.layers.first() {
            Some(LayerSpec::Linear { inputs, .. }) => *inputs,
            _ => 0,
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Linear { outputs, .. }) => *outputs,
            _ => 0,
        }
    }

    /// Shapes of the trainable tensors in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for layer in &self.layers {
            match *layer {
                LayerSpec::Linear { inputs, outputs } => {
                    shapes.push(vec![outputs, inputs]);
                    shapes.push(vec![outputs]);
                }
                LayerSpec::BatchNorm { channels } => {
                    shapes.push(vec![channels]);
                    shapes.push(vec![channels]);
                }
                LayerSpec::Relu => {}
            }
        }
        shapes
    }

    pub fn batch_norm_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::BatchNorm { channels } => Some(*channels),
                _ => None,
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Network parameters, batch-norm running statistics and architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamModel {
    arch: MlpArchitecture,
    params: Vec<Tensor>,
    bn_stats: Vec<RunningStats>,
    mode: Mode,
}

/// Handles produced by recording a forward pass on a tape.
pub struct Recorded {
    pub logits: Var,
    pub params: Vec<Var>,
    pub moments: Vec<BatchMoments>,
}

impl ParamModel {
    /// Kaiming-uniform (fan-in) weights, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` biases,
    /// unit batch-norm scale and zero shift.
    pub fn init(arch: MlpArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &arch.layers {
            match *layer {
                LayerSpec::Linear { inputs, outputs } => {
                    let w_bound = (6.0 / inputs as f64).sqrt();
                    let b_bound = 1.0 / (inputs as f64).sqrt();
                    let w = (0..inputs * outputs).map(|_| rng.random_range(-w_bound..w_bound)).collect();
                    let b = (0..outputs).map(|_| rng.random_range(-b_bound..b_bound)).collect();
                    params.push(Tensor::new(vec![outputs, inputs], w)?);
                    params.push(Tensor::new(vec![outputs], b)?);
                }
                LayerSpec::BatchNorm { channels } => {
                    params.push(Tensor::filled(vec![channels], 1.0));
                    params.push(Tensor::zeros(vec![channels]));
                }
                LayerSpec::Relu => {}
            }
        }
        let bn_stats = arch
            .batch_norm_channels()
            .into_iter()
            .map(|c| RunningStats { mean: vec![0.0; c], var: vec![1.0; c] })
            .collect();
        Ok(Self { arch, params, bn_stats, mode: Mode::Eval })
    }

    /// All-zero parameters (unit running variance); mostly useful in tests.
    pub fn zeros(arch: MlpArchitecture) -> Result<Self> {
        let mut model = Self::init(arch, 0)?;
        model.params.iter_mut().for_each(|p| p.data_mut().fill(0.0));
        Ok(model)
    }

    pub fn from_parts(
        arch: MlpArchitecture,
        params: Vec<Tensor>,
        bn_stats: Vec<RunningStats>,
        mode: Mode,
    ) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::ShapeMismatch("parameters do not match architecture".into()));
        }
        let channels = arch.batch_norm_channels();
        if channels.len() != bn_stats.len()
            || channels.iter().zip(&bn_stats).any(|(c, s)| s.mean.len() != *c || s.var.len() != *c)
        {
            return Err(Error::ShapeMismatch("running statistics do not match architecture".into()));
        }
        if bn_stats.iter().any(|s| s.var.iter().any(|v| !(*v > 0.0))) {
            return Err(Error::InvalidConfig("running variance must be strictly positive".into()));
        }
        Ok(Self { arch, params, bn_stats, mode })
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[RunningStats] {
        &self.bn_stats
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    /// Record a forward pass of `input` on `tape`.
    ///
    /// `batch_stats` selects train-mode batch norm; `params_grad` marks the
    /// parameters as differentiable leaves.
    pub fn record<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        input: Var,
        batch_stats: bool,
        params_grad: bool,
    ) -> Result<Recorded> {
        let (_, width) = tape.shape(input);
        if width != self.arch.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input width {width}, architecture expects {}",
                self.arch.input_dim()
            )));
        }
        let mut param_vars = Vec::with_capacity(self.params.len());
        let mut moments = Vec::new();
        let mut h = input;
        let mut p = 0;
        let mut bn = 0;
        for layer in &self.arch.layers {
            match *layer {
                LayerSpec::Linear { inputs, outputs } => {
                    let w = tape.leaf_borrowed(self.params[p].data(), outputs, inputs, params_grad)?;
                    let b = tape.leaf_borrowed(self.params[p + 1].data(), 1, outputs, params_grad)?;
                    param_vars.extend([w, b]);
                    p += 2;
                    h = tape.linear(h, w, b)?;
                }
                LayerSpec::Relu => h = tape.relu(h)?,
                LayerSpec::BatchNorm { channels } => {
                    let g = tape.leaf_borrowed(self.params[p].data(), 1, channels, params_grad)?;
                    let b = tape.leaf_borrowed(self.params[p + 1].data(), 1, channels, params_grad)?;
                    param_vars.extend([g, b]);
                    p += 2;
                    let stats = &self.bn_stats[bn];
                    let running = (!batch_stats).then_some((stats.mean.as_slice(), stats.var.as_slice()));
                    let (out, m) = tape.batch_norm(h, g, b, running, BN_EPS)?;
                    moments.extend(m);
                    bn += 1;
                    h = out;
                }
            }
        }
        Ok(Recorded { logits: h, params: param_vars, moments })
    }

    /// Logits for an `n x d` batch. Eval mode is deterministic and processed in
    /// chunks; train mode normalizes with the whole batch's moments.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let (n, d) = batch.rows_cols();
        if d != self.arch.input_dim() {
            return Err(Error::ShapeMismatch(format!("batch width {d}, expected {}", self.arch.input_dim())));
        }
        let classes = self.classes();
        let chunk = match self.mode {
            Mode::Eval => INFERENCE_CHUNK,
            Mode::Train => n.max(1),
        };
        let mut out = Vec::with_capacity(n * classes);
        for rows in batch.data().chunks(chunk * d) {
            let mut tape = Tape::new();
            let x = tape.leaf_borrowed(rows, rows.len() / d, d, false)?;
            let rec = self.record(&mut tape, x, self.mode == Mode::Train, false)?;
            out.extend_from_slice(tape.value(rec.logits));
        }
        Tensor::new(vec![n, classes], out)
    }

    pub fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.forward(batch)?;
        let classes = self.classes();
        Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), classes))
    }

    pub fn predict_labels(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(logits.data().chunks(self.classes()).map(argmax).collect())
    }

    /// Fold train-mode batch moments into the running estimates.
    pub fn update_running_stats(&mut self, moments: &[BatchMoments]) {
        for (stats, m) in self.bn_stats.iter_mut().zip(moments) {
            for c in 0..stats.mean.len() {
                stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * m.mean[c];
                stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * m.var_unbiased[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table3_shape() {
        let arch = MlpArchitecture::table3();
        assert_eq!(arch.layers.len(), 32);
        assert_eq!(arch.input_dim(), 2);
        assert_eq!(arch.classes(), 4);
        assert_eq!(arch.batch_norm_channels().len(), 10);
        assert_eq!(arch.parameter_count(), 2 * 256 + 256 + 10 * (256 * 256 + 256 + 512) + 256 * 4 + 4);
    }

    #[test]
    fn rejects_incompatible_layers() {
        let bad = MlpArchitecture::new(vec![
            LayerSpec::Linear { inputs: 2, outputs: 3 },
            LayerSpec::Linear { inputs: 4, outputs: 2 },
        ]);
        assert!(bad.is_err());
        let bad_bn = MlpArchitecture::new(vec![
            LayerSpec::Linear { inputs: 2, outputs: 3 },
            LayerSpec::BatchNorm { channels: 2 },
            LayerSpec::Linear { inputs: 3, outputs: 2 },
        ]);
        assert!(bad_bn.is_err());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let arch = MlpArchitecture::new(vec![LayerSpec::Linear { inputs: 2, outputs: 4 }]).unwrap();
        let model = ParamModel::zeros(arch).unwrap();
        let batch = Tensor::from_rows(&[vec![0.3, -0.9], vec![5.0, 2.0]]).unwrap();
        let logits = model.forward(&batch).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        assert!(logits.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let arch = MlpArchitecture::new(vec![LayerSpec::Linear { inputs: 2, outputs: 2 }]).unwrap();
        let params = vec![
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(vec![2]),
        ];
        let model = ParamModel::from_parts(arch, params, vec![], Mode::Eval).unwrap();
        let batch = Tensor::from_rows(&[vec![0.25, -4.0]]).unwrap();
        assert_eq!(model.forward(&batch).unwrap().data(), &[0.25, -4.0]);
    }

    #[test]
    fn train_mode_batch_norm_centres_channels() {
        let arch = MlpArchitecture::table3();
        let model = ParamModel::init(arch, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(data, 8, 2, false).unwrap();
        let rec = model.record(&mut tape, x, true, false).unwrap();
        assert_eq!(tape.shape(rec.logits), (8, 4));
        assert!(tape.value(rec.logits).iter().all(|v| v.is_finite()));
        assert_eq!(rec.moments.len(), 10);
        // The output of the last batch-norm layer (gamma = 1, beta = 0) is centred per channel.
        let bn_out = Var::from_index_for_tests(rec.logits.index() - 3);
        let (n, ch) = tape.shape(bn_out);
        assert_eq!((n, ch), (8, 256));
        for c in 0..ch {
            let mean: f64 = (0..n).map(|r| tape.value(bn_out)[r * ch + c]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-5);
        }
    }

    #[test]
    fn train_mode_rejects_single_row() {
        let mut model = ParamModel::init(MlpArchitecture::blocks(2, 4, 1, 3), 0).unwrap();
        model.set_mode(Mode::Train);
        let batch = Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap();
        assert!(model.forward(&batch).is_err());
        model.set_mode(Mode::Eval);
        assert!(model.forward(&batch).is_ok());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let a = ParamModel::init(MlpArchitecture::table3(), 3).unwrap();
        let b = ParamModel::init(MlpArchitecture::table3(), 3).unwrap();
        let batch = Tensor::from_rows(&[vec![0.5, -0.5], vec![-0.1, 0.9]]).unwrap();
        let la = a.forward(&batch).unwrap();
        let lb = b.forward(&batch).unwrap();
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn width_mismatch_is_error() {
        let model = ParamModel::init(MlpArchitecture::table3(), 0).unwrap();
        let batch = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        assert!(matches!(model.forward(&batch), Err(Error::ShapeMismatch(_))));
    }
}
