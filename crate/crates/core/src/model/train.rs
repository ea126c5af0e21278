use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, ModelConfig, NowcastModel, INPUT_CHANNELS};
use crate::error::{NowcastError, Result};
use crate::pipeline::{LabeledSample, Normalizer, SampleFile, BLOCK_LEN, STEPS, WINDOW};
use crate::tensor::{BatchNormMode, BatchStats, Optimizer, OptimizerKind, Tape, Tensor, Var};
use crate::verify::{confusion, skill_scores};

/// Probability threshold for validation CSI during model selection.
pub const SELECTION_THRESHOLD: f64 = 0.5;
/// Blocks per inference pass during validation.
const VALIDATION_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub conv_channels: [usize; 4],
    pub fc_hidden: usize,
    pub lstm_hidden: usize,
    pub seed: u64,
    /// Epochs without a validation CSI improvement before stopping.
    pub patience: usize,
    /// Samples drawn (without replacement) per epoch; 0 uses the whole set.
    pub samples_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            conv_channels: m.conv_channels,
            fc_hidden: m.fc_hidden,
            lstm_hidden: m.lstm_hidden,
            seed: 0,
            patience: 5,
            samples_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            conv_channels: self.conv_channels,
            fc_hidden: self.fc_hidden,
            lstm_hidden: self.lstm_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(NowcastError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NowcastError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.model_config().validate()
    }
}

/// Labeled samples plus random access to their blocks.
pub trait SampleSource {
    fn samples(&self) -> &[LabeledSample];
    fn block(&mut self, index: usize) -> Result<Vec<f32>>;
}

pub struct FileSamples {
    file: SampleFile,
    labeled: Vec<LabeledSample>,
}

impl FileSamples {
    pub fn new(file: SampleFile) -> Result<Self> {
        let labeled = file.labeled()?;
        Ok(FileSamples { file, labeled })
    }

    pub fn file(&self) -> &SampleFile {
        &self.file
    }
}

impl SampleSource for FileSamples {
    fn samples(&self) -> &[LabeledSample] {
        &self.labeled
    }

    fn block(&mut self, index: usize) -> Result<Vec<f32>> {
        self.file.read_block(index)
    }
}

#[derive(Clone, Debug, Default)]
pub struct MemorySamples {
    pub blocks: Vec<Vec<f32>>,
    pub samples: Vec<LabeledSample>,
}

impl SampleSource for MemorySamples {
    fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    fn block(&mut self, index: usize) -> Result<Vec<f32>> {
        self.blocks
            .get(index)
            .cloned()
            .ok_or_else(|| NowcastError::Usage(format!("block {index} out of range")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_csi: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: NowcastModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn build_loss(
    model: &NowcastModel,
    blocks: &[&[f32]],
    samples: &[[usize; STEPS]],
    labels: &[usize],
    mode: BatchNormMode,
    trainable: bool,
) -> Result<(Tape, Bound, Var, Vec<BatchStats>)> {
    let mut input = Vec::with_capacity(blocks.len() * BLOCK_LEN);
    for b in blocks {
        super::block_to_channels(b, &mut input)?;
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable);
    let x = tape.constant(Tensor::new(vec![blocks.len(), INPUT_CHANNELS, WINDOW, WINDOW], input)?);
    let (features, stats) = model.cnn(&mut tape, &bound, x, mode)?;
    let logits = model.logits_from_features(&mut tape, &bound, features, samples)?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok((tape, bound, loss, stats))
}

/// Mean cross-entropy of a batch; `samples` index rows of `blocks`.
pub fn batch_loss(
    model: &NowcastModel,
    blocks: &[&[f32]],
    samples: &[[usize; STEPS]],
    labels: &[usize],
    mode: BatchNormMode,
) -> Result<f64> {
    Ok(batch_loss_with_branches(model, blocks, samples, labels, mode)?.0)
}

/// [`batch_loss`] plus the tape's branch signature.
pub(crate) fn batch_loss_with_branches(
    model: &NowcastModel,
    blocks: &[&[f32]],
    samples: &[[usize; STEPS]],
    labels: &[usize],
    mode: BatchNormMode,
) -> Result<(f64, Vec<u64>)> {
    let (tape, _, loss, _) = build_loss(model, blocks, samples, labels, mode, false)?;
    Ok((tape.value(loss).values()[0], tape.branch_signature()))
}

/// [`batch_loss`] plus the gradient of every parameter and, in train mode,
/// the batch-norm statistics the running estimates should absorb.
pub fn loss_and_grads(
    model: &NowcastModel,
    blocks: &[&[f32]],
    samples: &[[usize; STEPS]],
    labels: &[usize],
    mode: BatchNormMode,
) -> Result<(f64, Vec<Tensor>, Vec<BatchStats>)> {
    let (mut tape, bound, loss, stats) = build_loss(model, blocks, samples, labels, mode, true)?;
    let value = tape.value(loss).values()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new(), stats));
    }
    tape.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(&model.params)
        .map(|(v, p)| tape.take_grad(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok((value, grads, stats))
}

/// Infer-mode probability of class 1 for every sample of `source`.
pub fn predict_source(model: &NowcastModel, source: &mut dyn SampleSource) -> Result<Vec<f64>> {
    let samples = source.samples().to_vec();
    let mut needed: Vec<usize> = samples.iter().flat_map(|s| s.blocks).collect();
    needed.sort_unstable();
    needed.dedup();
    let mut features = Vec::with_capacity(needed.len());
    for chunk in needed.chunks(VALIDATION_CHUNK) {
        let blocks = chunk.iter().map(|&i| source.block(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f32]> = blocks.iter().map(|b| b.as_slice()).collect();
        features.extend(model.features(&refs)?);
    }
    let row = |block: usize| needed.binary_search(&block).expect("collected above");
    let idx: Vec<[usize; STEPS]> = samples.iter().map(|s| s.blocks.map(row)).collect();
    Ok(model
        .probabilities_from_features(&features, &idx)?
        .into_iter()
        .map(|p| p[1])
        .collect())
}

fn validation_csi(model: &NowcastModel, val: &mut dyn SampleSource) -> Result<Option<f64>> {
    let probs = predict_source(model, val)?;
    let labels: Vec<u8> = val.samples().iter().map(|s| s.meta.label).collect();
    Ok(skill_scores(&confusion(&probs, &labels, SELECTION_THRESHOLD)?).csi)
}

/// Mini-batch training with best-validation-CSI checkpointing and early stop.
/// `on_epoch` sees each log row as soon as it is final.
pub fn train(
    train_set: &mut dyn SampleSource,
    val_set: &mut dyn SampleSource,
    normalizer: &Normalizer,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.samples().is_empty() {
        return Err(NowcastError::Data("training split is empty".into()));
    }
    if val_set.samples().is_empty() {
        return Err(NowcastError::Data("validation split is empty".into()));
    }
    let mut model = NowcastModel::new(cfg.model_config(), normalizer.clone(), cfg.seed)?;
    model.echo.train = Some(cfg.clone());
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let samples = train_set.samples().to_vec();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let per_epoch = match cfg.samples_per_epoch {
        0 => samples.len(),
        n => n.min(samples.len()),
    };
    let mut best: Option<(Option<f64>, usize, NowcastModel)> = None;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch, chunk) in order[..per_epoch].chunks(cfg.batch_size).enumerate() {
            let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
            for &s in chunk {
                for b in samples[s].blocks {
                    rows.insert(b, 0);
                }
            }
            for (i, r) in rows.values_mut().enumerate() {
                *r = i;
            }
            let blocks = rows.keys().map(|&b| train_set.block(b)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f32]> = blocks.iter().map(|b| b.as_slice()).collect();
            let idx: Vec<[usize; STEPS]> = chunk.iter().map(|&s| samples[s].blocks.map(|b| rows[&b])).collect();
            let labels: Vec<usize> = chunk.iter().map(|&s| samples[s].meta.label as usize).collect();
            let (loss, grads, stats) = loss_and_grads(&model, &refs, &idx, &labels, BatchNormMode::Train)?;
            if !loss.is_finite() {
                return Err(NowcastError::Divergence { epoch, batch, loss });
            }
            for (p, g) in model.params.iter_mut().zip(grads) {
                p.grad = Some(g);
            }
            optimizer.step(&mut model.params)?;
            for (bn, st) in model.bn.iter_mut().zip(&stats) {
                bn.absorb(st);
            }
            loss_sum += loss;
            batches += 1;
        }
        let val_csi = validation_csi(&model, val_set)?;
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_csi,
        };
        on_epoch(&row);
        log.push(row);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_csi.unwrap_or(-1.0) > b.unwrap_or(-1.0),
        };
        if improved {
            best = Some((val_csi, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
    })
}
