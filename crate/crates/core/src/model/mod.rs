//! The CNN-LSTM nowcaster.
//!
//! One CNN maps each normalized block to a 50-dimensional feature vector:
//! the `(variable, y, x, z)` block is read as 120 channels `v·20 + z` of an
//! 18×18 image, then conv 5×5 → BN → ReLU, three conv 3×3 → BN → ReLU,
//! 2×2 max pooling, FC → ReLU and FC to 50. The same CNN runs on the blocks
//! at `t−2, t−1, t`; an LSTM reads the three features in order and a linear
//! classifier on its final hidden state gives two logits.
//!
//! LSTM gates are packed `[i, f, g, o]` along the `4H` axis.

pub mod gradcheck;
mod io;
mod train;

pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{
    batch_loss, loss_and_grads, predict_source, train, EpochLog, FileSamples, MemorySamples, SampleSource, TrainConfig,
    TrainOutcome, SELECTION_THRESHOLD,
};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NowcastError, Result};
use crate::pipeline::{Normalizer, BLOCK_LEN, NUM_VARIABLES, STEPS, WINDOW};
use crate::synth::LEVELS;
use crate::tensor::{Activation, BatchNormMode, BatchStats, BnState, Param, Tape, Tensor, Var};

pub const INPUT_CHANNELS: usize = NUM_VARIABLES * LEVELS;
pub const FEATURE_DIM: usize = 50;
pub const KERNELS: [usize; 4] = [5, 3, 3, 3];
/// Spatial extent after the input, each conv, and pooling.
pub const SPATIAL_CHAIN: [usize; 6] = [18, 14, 12, 10, 8, 4];
const CONV_LAYERS: usize = 4;
/// Blocks per CNN pass at inference; bounds memory, not results.
const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_channels: [usize; CONV_LAYERS],
    pub fc_hidden: usize,
    pub lstm_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_channels: [80, 64, 48, 32],
            fc_hidden: 128,
            lstm_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Narrow variant for gradient checks and fast tests.
    pub fn shrunken() -> Self {
        ModelConfig {
            conv_channels: [8, 8, 8, 8],
            fc_hidden: 16,
            lstm_hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.contains(&0) || self.fc_hidden == 0 {
            return Err(NowcastError::Config(format!("layer widths must be positive: {self:?}")));
        }
        if self.lstm_hidden < 2 {
            return Err(NowcastError::Config(format!(
                "lstm_hidden must be at least 2, got {}",
                self.lstm_hidden
            )));
        }
        Ok(())
    }

    pub fn flat_dim(&self) -> usize {
        self.conv_channels[3] * SPATIAL_CHAIN[5] * SPATIAL_CHAIN[5]
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = INPUT_CHANNELS;
        for (i, (&c, &k)) in self.conv_channels.iter().zip(&KERNELS).enumerate() {
            let l = i + 1;
            out.push((format!("conv{l}.weight"), vec![c, in_ch, k, k]));
            out.push((format!("conv{l}.bias"), vec![c]));
            out.push((format!("bn{l}.gamma"), vec![c]));
            out.push((format!("bn{l}.beta"), vec![c]));
            in_ch = c;
        }
        let h = self.lstm_hidden;
        out.push(("fc1.weight".into(), vec![self.fc_hidden, self.flat_dim()]));
        out.push(("fc1.bias".into(), vec![self.fc_hidden]));
        out.push(("fc2.weight".into(), vec![FEATURE_DIM, self.fc_hidden]));
        out.push(("fc2.bias".into(), vec![FEATURE_DIM]));
        out.push(("lstm.w_ih".into(), vec![4 * h, FEATURE_DIM]));
        out.push(("lstm.w_hh".into(), vec![4 * h, h]));
        out.push(("lstm.bias".into(), vec![4 * h]));
        out.push(("out.weight".into(), vec![2, h]));
        out.push(("out.bias".into(), vec![2]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

// Storage positions in `NowcastModel::params`.
const fn conv_w(layer: usize) -> usize {
    4 * layer
}
const fn conv_b(layer: usize) -> usize {
    4 * layer + 1
}
const fn bn_gamma(layer: usize) -> usize {
    4 * layer + 2
}
const fn bn_beta(layer: usize) -> usize {
    4 * layer + 3
}
const FC1_W: usize = 16;
const FC1_B: usize = 17;
const FC2_W: usize = 18;
const FC2_B: usize = 19;
const LSTM_W_IH: usize = 20;
const LSTM_W_HH: usize = 21;
const LSTM_B: usize = 22;
const OUT_W: usize = 23;
const OUT_B: usize = 24;

/// Free-form provenance stored with a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelEcho {
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NowcastModel {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub bn: Vec<BnState>,
    pub normalizer: Normalizer,
    pub echo: ModelEcho,
}

/// Tape handles of every parameter, aligned with `NowcastModel::params`.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Reorders a `(variable, y, x, z)` block into `(v·20 + z, y, x)` channels.
pub fn block_to_channels(block: &[f32], out: &mut Vec<f64>) -> Result<()> {
    if block.len() != BLOCK_LEN {
        return Err(NowcastError::dim("cnn input block", BLOCK_LEN, block.len()));
    }
    let plane = WINDOW * WINDOW;
    let start = out.len();
    out.resize(start + BLOCK_LEN, 0.0);
    let dst = &mut out[start..];
    for (i, &v) in block.iter().enumerate() {
        let z = i % LEVELS;
        let pix = (i / LEVELS) % plane;
        let var = i / (LEVELS * plane);
        dst[(var * LEVELS + z) * plane + pix] = v as f64;
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl NowcastModel {
    /// Fan-in scaled uniform initialization: `sqrt(6/fan_in)` ahead of a ReLU,
    /// `1/sqrt(fan_in)` otherwise. Biases start at zero except the LSTM forget
    /// gate at one; BN scales start at one.
    pub fn new(config: ModelConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        normalizer.check_variables()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.lstm_hidden;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let fan_in: usize = shape[1..].iter().product();
                let values = if name.ends_with(".gamma") {
                    vec![1.0; n]
                } else if name == "lstm.bias" {
                    (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else if name.starts_with("conv") || name == "fc1.weight" {
                    uniform(&mut rng, n, (6.0 / fan_in as f64).sqrt())
                } else {
                    uniform(&mut rng, n, 1.0 / (fan_in as f64).sqrt())
                };
                Param::new(name, Tensor::new(shape, values).expect("shape from config"))
            })
            .collect();
        let bn = config.conv_channels.iter().map(|&c| BnState::new(c)).collect();
        Ok(NowcastModel {
            config,
            params,
            bn,
            normalizer,
            echo: ModelEcho {
                seed,
                ..ModelEcho::default()
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.param(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    /// CNN over `[U,120,18,18]` input to `[U,50]` features. Train mode also
    /// returns each BN layer's batch statistics.
    pub fn cnn(&self, tape: &mut Tape, b: &Bound, input: Var, mode: BatchNormMode) -> Result<(Var, Vec<BatchStats>)> {
        let v = &b.0;
        let units = match tape.value(input).shape() {
            &[u, c, h, w] => {
                expect_extent("cnn input channels", INPUT_CHANNELS, c)?;
                expect_extent("cnn input height", SPATIAL_CHAIN[0], h)?;
                expect_extent("cnn input width", SPATIAL_CHAIN[0], w)?;
                u
            }
            other => return Err(NowcastError::dim("cnn input rank", 4, other.len())),
        };
        let mut x = input;
        let mut stats = Vec::new();
        for layer in 0..CONV_LAYERS {
            x = tape.conv2d(x, v[conv_w(layer)], v[conv_b(layer)])?;
            let s = SPATIAL_CHAIN[layer + 1];
            expect_shape(tape, x, &[units, self.config.conv_channels[layer], s, s], layer + 1)?;
            let (y, st) = tape.batch_norm(x, v[bn_gamma(layer)], v[bn_beta(layer)], &self.bn[layer], mode)?;
            stats.extend(st);
            x = tape.activation(y, Activation::Relu)?;
        }
        x = tape.max_pool2d(x)?;
        let s = SPATIAL_CHAIN[5];
        expect_shape(tape, x, &[units, self.config.conv_channels[3], s, s], 5)?;
        x = tape.reshape(x, vec![units, self.config.flat_dim()])?;
        x = tape.linear(x, v[FC1_W], Some(v[FC1_B]))?;
        x = tape.activation(x, Activation::Relu)?;
        x = tape.linear(x, v[FC2_W], Some(v[FC2_B]))?;
        expect_shape(tape, x, &[units, FEATURE_DIM], 6)?;
        Ok((x, stats))
    }

    /// Runs the LSTM over `[B,50]` steps in order; returns the final `[B,H]` hidden state.
    pub fn lstm(&self, tape: &mut Tape, b: &Bound, steps: &[Var]) -> Result<Var> {
        let v = &b.0;
        let h = self.config.lstm_hidden;
        let rows = match steps.first().map(|s| tape.value(*s).shape().to_vec()) {
            Some(shape) if shape.len() == 2 => {
                expect_extent("lstm input width", FEATURE_DIM, shape[1])?;
                shape[0]
            }
            Some(shape) => return Err(NowcastError::dim("lstm input rank", 2, shape.len())),
            None => return Err(NowcastError::dim("lstm steps", ">= 1", 0)),
        };
        let mut hidden = tape.constant(Tensor::zeros(&[rows, h]));
        let mut cell = tape.constant(Tensor::zeros(&[rows, h]));
        for &x in steps {
            if tape.value(x).shape() != [rows, FEATURE_DIM] {
                return Err(NowcastError::dim(
                    "lstm step shape",
                    format!("[{rows}, {FEATURE_DIM}]"),
                    format!("{:?}", tape.value(x).shape()),
                ));
            }
            let a = tape.linear(x, v[LSTM_W_IH], Some(v[LSTM_B]))?;
            let r = tape.linear(hidden, v[LSTM_W_HH], None)?;
            let gates = tape.add(a, r)?;
            let i = tape.slice_cols(gates, 0, h)?;
            let f = tape.slice_cols(gates, h, h)?;
            let g = tape.slice_cols(gates, 2 * h, h)?;
            let o = tape.slice_cols(gates, 3 * h, h)?;
            let i = tape.activation(i, Activation::Sigmoid)?;
            let f = tape.activation(f, Activation::Sigmoid)?;
            let g = tape.activation(g, Activation::Tanh)?;
            let o = tape.activation(o, Activation::Sigmoid)?;
            let keep = tape.mul(f, cell)?;
            let write = tape.mul(i, g)?;
            cell = tape.add(keep, write)?;
            let squashed = tape.activation(cell, Activation::Tanh)?;
            hidden = tape.mul(o, squashed)?;
        }
        Ok(hidden)
    }

    /// `[B,2]` logits from `[B,H]` hidden states.
    pub fn head(&self, tape: &mut Tape, b: &Bound, hidden: Var) -> Result<Var> {
        tape.linear(hidden, b.0[OUT_W], Some(b.0[OUT_B]))
    }

    /// Logits for samples whose steps index rows of a `[U,50]` feature matrix.
    pub fn logits_from_features(
        &self,
        tape: &mut Tape,
        b: &Bound,
        features: Var,
        samples: &[[usize; STEPS]],
    ) -> Result<Var> {
        let mut steps = Vec::with_capacity(STEPS);
        for s in 0..STEPS {
            let rows: Vec<usize> = samples.iter().map(|idx| idx[s]).collect();
            steps.push(tape.gather_rows(features, &rows)?);
        }
        let hidden = self.lstm(tape, b, &steps)?;
        self.head(tape, b, hidden)
    }

    /// Infer-mode features of each block.
    pub fn features(&self, blocks: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(blocks.len());
        for chunk in blocks.chunks(INFER_CHUNK) {
            let mut input = Vec::with_capacity(chunk.len() * BLOCK_LEN);
            for block in chunk {
                block_to_channels(block, &mut input)?;
            }
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let x = tape.constant(Tensor::new(
                vec![chunk.len(), INPUT_CHANNELS, WINDOW, WINDOW],
                input,
            )?);
            let (f, _) = self.cnn(&mut tape, &b, x, BatchNormMode::Infer)?;
            out.extend(tape.value(f).values().chunks(FEATURE_DIM).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Infer-mode 50-vector of one block.
    pub fn cnn_forward(&self, block: &[f32]) -> Result<Vec<f64>> {
        Ok(self.features(&[block])?.remove(0))
    }

    /// Final LSTM hidden state for three chronological feature vectors.
    pub fn lstm_forward(&self, steps: [&[f64]; STEPS]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let mut vars = Vec::with_capacity(STEPS);
        for s in steps {
            if s.len() != FEATURE_DIM {
                return Err(NowcastError::dim("lstm input width", FEATURE_DIM, s.len()));
            }
            vars.push(tape.constant(Tensor::new(vec![1, FEATURE_DIM], s.to_vec())?));
        }
        let h = self.lstm(&mut tape, &b, &vars)?;
        Ok(tape.value(h).values().to_vec())
    }

    /// Class probabilities `[p0, p1]` for precomputed features.
    pub fn probabilities_from_features(&self, features: &[Vec<f64>], samples: &[[usize; STEPS]]) -> Result<Vec<[f64; 2]>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = features.iter().find(|f| f.len() != FEATURE_DIM) {
            return Err(NowcastError::dim("feature width", FEATURE_DIM, bad.len()));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let flat: Vec<f64> = features.iter().flatten().copied().collect();
        let fv = tape.constant(Tensor::new(vec![features.len(), FEATURE_DIM], flat)?);
        let logits = self.logits_from_features(&mut tape, &b, fv, samples)?;
        let probs = tape.activation(logits, Activation::Softmax)?;
        Ok(tape.value(probs).values().chunks(2).map(|p| [p[0], p[1]]).collect())
    }

    /// Class probabilities for one sample's blocks at `t−2, t−1, t`.
    pub fn model_forward(&self, blocks: [&[f32]; STEPS]) -> Result<[f64; 2]> {
        let feats = self.features(&blocks)?;
        Ok(self.probabilities_from_features(&feats, &[[0, 1, 2]])?[0])
    }

    /// Probability of class 1 per sample, in input order. `norm` is the
    /// normalizer the blocks were built with and must match the model's.
    pub fn predict_batch(&self, norm: &Normalizer, samples: &[[&[f32]; STEPS]]) -> Result<Vec<f64>> {
        if norm != &self.normalizer {
            return Err(NowcastError::Config(
                "samples were normalized differently from the model's training data".into(),
            ));
        }
        // Identical slices share one CNN pass.
        let mut unique: Vec<&[f32]> = Vec::new();
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        let idx: Vec<[usize; STEPS]> = samples
            .iter()
            .map(|triple| {
                triple.map(|b| {
                    *seen.entry((b.as_ptr() as usize, b.len())).or_insert_with(|| {
                        unique.push(b);
                        unique.len() - 1
                    })
                })
            })
            .collect();
        let feats = self.features(&unique)?;
        Ok(self.probabilities_from_features(&feats, &idx)?.into_iter().map(|p| p[1]).collect())
    }
}

fn expect_extent(axis: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(NowcastError::dim(axis, expected, actual));
    }
    Ok(())
}

fn expect_shape(tape: &Tape, v: Var, expected: &[usize], layer: usize) -> Result<()> {
    let actual = tape.value(v).shape();
    if actual != expected {
        return Err(NowcastError::dim(
            format!("layer {layer} output"),
            format!("{expected:?}"),
            format!("{actual:?}"),
        ));
    }
    Ok(())
}
