use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{flow_l1, multitask_l1, FlowTargets, Supervision};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};
use super::schedule::OneCycle;
use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::geometry::{resize_flow, resize_image, WarpFlow};
use crate::metrics::{masked_mssim, Gray, MSSIM_MIN_SIDE};
use crate::model::{BookNet, BookNetConfig};
use crate::synth::{hsv_jitter, load_sample, BookSample, HsvRanges, Manifest};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub initial_div: f64,
    pub final_div: f64,
    pub optimizer: AdamWConfig,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub supervision: Supervision,
    pub augmentation: HsvRanges,
    /// Validate after every this many epochs, and always after the last.
    pub validate_every: usize,
    /// Write a checkpoint after every this many epochs, and always after the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 65,
            steps: None,
            batch_size: 4,
            max_lr: 1e-4,
            warmup_fraction: 0.3,
            initial_div: 25.0,
            final_div: 1e4,
            optimizer: AdamWConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            supervision: Supervision::ALL,
            augmentation: HsvRanges::default(),
            validate_every: 1,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !self.supervision.any() {
            return Err(Error::Config("at least one supervised flow is required".into()));
        }
        if self.validate_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("validation and checkpoint intervals must be positive".into()));
        }
        if self.steps.unwrap_or(self.epochs) == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max learning rate {}", self.max_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || self.initial_div <= 0.0 || self.final_div <= 0.0 {
            return Err(Error::Config("invalid one-cycle shape".into()));
        }
        self.augmentation.validate()
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * samples.div_ceil(self.batch_size))
    }

    pub fn schedule(&self, samples: usize) -> OneCycle {
        OneCycle {
            max_lr: self.max_lr,
            total_steps: self.total_steps(samples),
            warmup_fraction: self.warmup_fraction,
            initial_div: self.initial_div,
            final_div: self.final_div,
        }
    }
}

/// One sample prepared for a given network resolution.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    /// `[3, h, w]` network input.
    pub image: Tensor,
    pub targets: FlowTargets,
    /// Ground-truth spread flow at network resolution.
    pub flow: WarpFlow,
    /// Distorted and flat images at their stored resolution.
    pub distorted: Tensor,
    pub flat: Tensor,
}

impl TrainSample {
    pub fn new(id: impl Into<String>, sample: &BookSample, height: usize, width: usize) -> Result<Self> {
        let image = resize_image(&sample.distorted, height, width)?;
        let flow = resize_flow(&sample.full, height, width)?;
        Ok(TrainSample {
            id: id.into(),
            image,
            targets: FlowTargets::from_full(&flow)?,
            flow,
            distorted: sample.distorted.clone(),
            flat: sample.flat.clone(),
        })
    }
}

/// Load every manifest entry, resized to the network's input.
pub fn load_dataset(manifest_path: impl AsRef<Path>, config: &BookNetConfig) -> Result<Vec<TrainSample>> {
    let path = manifest_path.as_ref();
    let manifest = Manifest::load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    manifest
        .entries
        .iter()
        .map(|e| TrainSample::new(&e.id, &load_sample(dir, e)?, config.height, config.width))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub left: Option<f64>,
    pub right: Option<f64>,
    pub full: Option<f64>,
}

/// Batch-mean loss and gradients, one tape per sample.
pub fn batch_gradients(
    net: &BookNet,
    params: &ParamStore,
    batch: &[(&Tensor, &FlowTargets)],
    supervision: Supervision,
) -> Result<(LossParts, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut parts = LossParts {
        total: 0.0,
        left: supervision.left.then_some(0.0),
        right: supervision.right.then_some(0.0),
        full: supervision.full.then_some(0.0),
    };
    for (image, targets) in batch {
        let mut t = Tape::new();
        let p = params.bind(&mut t);
        let flows = net.forward(&mut t, &p, image)?;
        let loss = multitask_l1(&mut t, &flows, targets, supervision)?;
        let total = t.value(loss.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss ({total})")));
        }
        parts.total += scale * total;
        for (acc, var) in [(&mut parts.left, loss.left), (&mut parts.right, loss.right), (&mut parts.full, loss.full)] {
            if let (Some(a), Some(v)) = (acc.as_mut(), var) {
                *a += scale * t.value(v).item();
            }
        }
        let scaled = t.scale(loss.total, scale);
        let g = t.backward(scaled)?;
        for (acc, gi) in grads.iter_mut().zip(p.gradients(&g, params)) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    Ok((parts, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean absolute coordinate error of the spread flow.
    pub val_flow_l1: f64,
    /// Mean masked MS-SSIM of rectified validation images against their
    /// flat content, when the stored images are large enough.
    pub val_mssim: Option<f64>,
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Schedule { schedule: OneCycle, config: TrainConfig, samples: usize },
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps().map(|s| s.loss.total).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Mean spread-flow L1 and, when possible, mean masked MS-SSIM after
/// rectifying the stored distorted images.
pub fn evaluate(net: &BookNet, params: &ParamStore, samples: &[TrainSample]) -> Result<(f64, Option<f64>)> {
    let mut l1 = 0.0;
    let mut scores = Vec::new();
    for s in samples {
        let rect = net.rectify(params, &s.distorted)?;
        l1 += flow_l1(&rect.prediction.full, &s.flow)?;
        let (h, w) = (s.flat.shape()[1], s.flat.shape()[2]);
        if h.min(w) >= MSSIM_MIN_SIDE {
            let mask = vec![true; h * w];
            scores.push(masked_mssim(&Gray::from_rgb(&rect.image)?, &Gray::from_rgb(&s.flat)?, &mask)?);
        }
    }
    let n = samples.len().max(1) as f64;
    let mssim = (!scores.is_empty() && scores.len() == samples.len()).then(|| scores.iter().sum::<f64>() / n);
    Ok((l1 / n, mssim))
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn timing_path(&self) -> PathBuf {
        self.dir.join("timing.jsonl")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.bkpt"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("model.bkpt")
    }

    pub fn last_good_path(&self) -> PathBuf {
        self.dir.join("last_good.bkpt")
    }
}

#[derive(Serialize)]
struct Timing {
    step: usize,
    wall_ms: f64,
}

fn append_line(file: &mut Option<(BufWriter<File>, PathBuf)>, line: &str) -> Result<()> {
    if let Some((w, path)) = file {
        writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
    }
    Ok(())
}

fn open(path: PathBuf) -> Result<(BufWriter<File>, PathBuf)> {
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((BufWriter::new(f), path))
}

/// Train from `params` on `train`, validating on `validation` (or on `train`
/// when it is empty) at epoch ends. Shuffling and augmentation draws derive from the seed alone, so
/// the loss sequence is reproducible. With an output directory the log,
/// wall-clock timings and per-epoch checkpoints are written there; a
/// non-finite loss or gradient stops training after saving the parameters
/// from before the failing step.
pub fn train_loop(
    net: &BookNet,
    mut params: ParamStore,
    config: &TrainConfig,
    train: &[TrainSample],
    validation: &[TrainSample],
    output: Option<&TrainOutput>,
) -> Result<(ParamStore, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let schedule = config.schedule(train.len());
    let total = schedule.total_steps;
    let mut log = TrainLog::default();
    let (mut log_file, mut timing_file) = match output {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            (Some(open(o.log_path())?), Some(open(o.timing_path())?))
        }
        None => (None, None),
    };
    let record = |log: &mut TrainLog, r: LogRecord, file: &mut Option<(BufWriter<File>, PathBuf)>| -> Result<()> {
        append_line(file, &serde_json::to_string(&r).expect("log records serialize"))?;
        log.records.push(r);
        Ok(())
    };
    record(
        &mut log,
        LogRecord::Schedule {
            schedule,
            config: config.clone(),
            samples: train.len(),
        },
        &mut log_file,
    )?;
    let mut optim = AdamW::new(config.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0;
    let start = Instant::now();
    for step in 0..total {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let picked: Vec<usize> = order[cursor..(cursor + config.batch_size).min(order.len())].to_vec();
        cursor += picked.len();
        let images: Vec<Tensor> = picked
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let draw = config.seed ^ ((step as u64) << 20 | k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                hsv_jitter(&train[i].image, draw, &config.augmentation)
            })
            .collect();
        let batch: Vec<(&Tensor, &FlowTargets)> = picked
            .iter()
            .zip(&images)
            .map(|(&i, img)| (img, &train[i].targets))
            .collect();
        let lr = schedule.lr(step)?;
        let outcome = batch_gradients(net, &params, &batch, config.supervision).and_then(|(loss, mut grads)| {
            let norm = if config.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, config.clip_norm)
            } else {
                grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
            };
            optim.step(&mut params, &grads, lr)?;
            Ok((loss, norm))
        });
        let (loss, grad_norm) = match outcome {
            Ok(v) => v,
            Err(e @ Error::NonFinite(_)) => {
                if let Some(o) = output {
                    params.save(o.last_good_path())?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        record(
            &mut log,
            LogRecord::Step(StepRecord {
                step,
                epoch,
                lr,
                loss,
                grad_norm,
            }),
            &mut log_file,
        )?;
        append_line(
            &mut timing_file,
            &serde_json::to_string(&Timing {
                step,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })
            .expect("timing serializes"),
        )?;
        let last = step + 1 == total;
        if cursor >= order.len() || last {
            if last || (epoch + 1) % config.validate_every == 0 {
                let val = if validation.is_empty() { train } else { validation };
                let (val_flow_l1, val_mssim) = evaluate(net, &params, val)?;
                record(
                    &mut log,
                    LogRecord::Epoch(EpochRecord {
                        epoch,
                        step,
                        val_flow_l1,
                        val_mssim,
                    }),
                    &mut log_file,
                )?;
            }
            if let Some(o) = output {
                if last || (epoch + 1) % config.checkpoint_every == 0 {
                    params.save(o.checkpoint_path(epoch))?;
                }
            }
            epoch += 1;
        }
    }
    if let Some(o) = output {
        params.save(o.final_path())?;
    }
    for f in [&mut log_file, &mut timing_file].into_iter().flatten() {
        f.0.flush().map_err(|e| Error::io(f.1.as_path(), e))?;
    }
    Ok((params, log))
}
