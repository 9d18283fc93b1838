//! Joint-center localization with a single-scale grid proposer.
//!
//! The full preprocessed image (reference spacing) is shrunk so its longer
//! side is `input_size`, zero-padded to a square and mapped by a small conv
//! backbone to a `grid × grid` map. Every cell predicts an objectness logit
//! and sigmoid offsets `(dx, dy)` of the center within the cell. The box
//! around a center is a fixed square of `box_side` reference pixels.

use crate::curate::{Side, View};
use crate::error::{invalid, shape_err, Result};
use crate::model_io::Checkpoint;
use crate::nn::{collect_state, restore_state, Bindings, Conv2d, ConvBlock, ParamStore};
use crate::optim::{Adam, AdamConfig, Direction, EarlyStopMonitor, StopDecision};
use crate::preprocess::{fit_to_square, RasterF};
use crate::rng;
use crate::tensor::{Graph, Mode, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

pub const CHECKPOINT_KIND: &str = "grid_detector";
/// IoU threshold for a knee to count as found.
pub const IOU_THRESHOLD: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub grid: usize,
    pub blocks: Vec<BlockSpec>,
    /// Box side in reference pixels.
    pub box_side: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// BCE weight of the single positive cell; negatives weigh 1. The
    /// default balances one positive against the `grid² − 1` negatives.
    pub positive_weight: f64,
    /// Weight of the offset loss relative to objectness.
    pub offset_weight: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let b = |channels, stride, pool| BlockSpec { channels, stride, pool };
        DetectorConfig {
            input_size: 512,
            grid: 16,
            blocks: vec![b(4, 2, true), b(8, 2, true), b(16, 1, true), b(16, 1, false)],
            box_side: 1000.0,
            batch_size: 4,
            learning_rate: 1e-4,
            patience: 20,
            max_epochs: 200,
            positive_weight: 255.0,
            offset_weight: 1.0,
        }
    }
}

impl DetectorConfig {
    /// Spatial size of the backbone output for `input_size` inputs.
    pub fn output_size(&self) -> usize {
        let mut s = self.input_size;
        for b in &self.blocks {
            s = (s + 2 - 3) / b.stride + 1;
            if b.pool && s >= 2 {
                s /= 2;
            }
        }
        s
    }

    pub fn cell_size(&self) -> f64 {
        self.input_size as f64 / self.grid as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return Err(invalid!("detector blocks need positive channels and strides"));
        }
        if self.grid == 0 || self.output_size() != self.grid {
            return Err(invalid!(
                "backbone maps {0}×{0} inputs to {1}×{1}, but the grid is {2}×{2}",
                self.input_size,
                self.output_size(),
                self.grid
            ));
        }
        if self.input_size % self.grid != 0 {
            return Err(invalid!("input size {} is not a multiple of grid {}", self.input_size, self.grid));
        }
        if !(self.box_side > 0.0) || !(self.learning_rate > 0.0) || !(self.positive_weight > 0.0) {
            return Err(invalid!("box side, learning rate and positive weight must be positive"));
        }
        if self.offset_weight < 0.0 || self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(invalid!("offset weight must be >= 0; batch size, patience and max epochs >= 1"));
        }
        Ok(())
    }
}

/// Axis-aligned box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxF {
    pub fn square(center: (f64, f64), side: f64) -> Self {
        let h = side / 2.0;
        BoxF {
            x0: center.0 - h,
            y0: center.1 - h,
            x1: center.0 + h,
            y1: center.1 + h,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

pub fn iou(a: &BoxF, b: &BoxF) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.x1 > bx.x0 && bx.y1 > bx.y0) {
            return Err(invalid!("degenerate box {bx:?}"));
        }
    }
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Center in the coordinates of the image given to [`prepare_input`].
    pub center: (f64, f64),
    pub side: f64,
    pub score: f64,
    /// (row, column) of the proposing cell.
    pub cell: (usize, usize),
}

impl Detection {
    pub fn bbox(&self) -> BoxF {
        BoxF::square(self.center, self.side)
    }
}

/// Highest score wins; ties go to the first candidate (row-major order).
pub fn select_detection(candidates: &[Detection]) -> Result<Detection> {
    let mut best: Option<&Detection> = None;
    for d in candidates {
        if best.is_none_or(|b| d.score > b.score) {
            best = Some(d);
        }
    }
    best.copied().ok_or_else(|| invalid!("no detection candidates"))
}

/// A downscaled, square detector input. Pixels are kept in `f32` to halve
/// the memory of large training sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorInput {
    pub size: usize,
    pub pixels: Vec<f32>,
    /// Input pixels per original pixel.
    pub scale: f64,
}

pub fn prepare_input(img: &RasterF, size: usize) -> Result<DetectorInput> {
    let (sq, scale) = fit_to_square(img, size)?;
    Ok(DetectorInput {
        size,
        pixels: sq.data.iter().map(|&v| v as f32).collect(),
        scale,
    })
}

/// An input with its annotated joint center (original coordinates).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInput {
    pub input: DetectorInput,
    pub center: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDetector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    pub blocks: Vec<ConvBlock>,
    pub head: Conv2d,
}

impl GridDetector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0xDE7EC7]);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut c_in = 1;
        for (i, b) in config.blocks.iter().enumerate() {
            blocks.push(ConvBlock::new(&mut store, &format!("backbone.{i}"), c_in, b.channels, b.stride, b.pool, &mut r));
            c_in = b.channels;
        }
        let head = Conv2d::new(&mut store, "head", c_in, 3, 3, 1, &mut r);
        Ok(GridDetector {
            config,
            store,
            blocks,
            head,
        })
    }

    /// Raw `N × 3 × G × G` map: objectness logit, dx logit, dy logit.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Bindings)> {
        let b = self.store.bind(g);
        let mut h = x;
        for block in &mut self.blocks {
            h = block.forward(g, &b, h, mode)?;
        }
        let out = self.head.forward(g, &b, h)?;
        Ok((out, b))
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        collect_state(&self.store, &self.blocks.iter().collect::<Vec<_>>())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            tensors: self.state(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, path: &Path) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND, path)?;
        let config: DetectorConfig = serde_json::from_value(ck.config).map_err(|e| crate::Error::Format {
            path: path.into(),
            message: format!("bad detector config: {e}"),
        })?;
        let mut model = GridDetector::new(config, 0)?;
        restore_state(&mut model.store, &mut model.blocks.iter_mut().collect::<Vec<_>>(), ck.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, path)
    }
}

fn batch_tensor(inputs: &[&DetectorInput], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(inputs.len() * size * size);
    for inp in inputs {
        if inp.size != size || inp.pixels.len() != size * size {
            return Err(shape_err!("detector input is {}×{}, model expects {size}×{size}", inp.size, inp.size));
        }
        data.extend(inp.pixels.iter().map(|&v| v as f64));
    }
    Tensor::new(vec![inputs.len(), 1, size, size], data)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes a raw head map into per-cell detections for each batch item.
fn decode(config: &DetectorConfig, raw: &Tensor, inputs: &[&DetectorInput]) -> Result<Vec<Vec<Detection>>> {
    let (n, c, gh, gw) = raw.dims4()?;
    let g = config.grid;
    if c != 3 || gh != g || gw != g || n != inputs.len() {
        return Err(shape_err!("head output {:?} does not match a {g}×{g} grid", raw.shape()));
    }
    let cell = config.cell_size();
    let plane = g * g;
    let d = raw.data();
    Ok(inputs
        .iter()
        .enumerate()
        .map(|(i, inp)| {
            let base = i * 3 * plane;
            (0..plane)
                .map(|k| {
                    let (r, col) = (k / g, k % g);
                    let dx = sigmoid(d[base + plane + k]);
                    let dy = sigmoid(d[base + 2 * plane + k]);
                    Detection {
                        center: ((col as f64 + dx) * cell / inp.scale, (r as f64 + dy) * cell / inp.scale),
                        side: config.box_side,
                        score: sigmoid(d[base + k]),
                        cell: (r, col),
                    }
                })
                .collect()
        })
        .collect())
}

/// All `grid²` candidates for one input, in row-major cell order.
pub fn detector_forward(model: &mut GridDetector, input: &DetectorInput) -> Result<Vec<Detection>> {
    Ok(detect_batch(model, &[input])?.pop().expect("one item"))
}

/// Inference over several inputs in one pass (evaluation mode).
pub fn detect_batch(model: &mut GridDetector, inputs: &[&DetectorInput]) -> Result<Vec<Vec<Detection>>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let x = g.constant(batch_tensor(inputs, model.config.input_size)?);
    let (out, _) = model.forward(&mut g, x, Mode::Eval)?;
    decode(&model.config, g.value(out), inputs)
}

/// Cell index and in-cell offsets of an original-coordinate center.
pub fn encode_target(config: &DetectorConfig, input: &DetectorInput, center: (f64, f64)) -> Result<((usize, usize), (f64, f64))> {
    let cell = config.cell_size();
    let x = center.0 * input.scale;
    let y = center.1 * input.scale;
    let limit = input.size as f64;
    if !(x >= 0.0 && y >= 0.0 && x < limit && y < limit) {
        return Err(invalid!("annotated center ({:.1}, {:.1}) lies outside the image", center.0, center.1));
    }
    let col = ((x / cell).floor() as usize).min(config.grid - 1);
    let row = ((y / cell).floor() as usize).min(config.grid - 1);
    Ok(((row, col), (x / cell - col as f64, y / cell - row as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_mean_iou: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedDetector {
    pub model: GridDetector,
    pub best_val_iou: f64,
    pub best_epoch: usize,
    pub history: Vec<DetectorEpoch>,
}

/// Training loss of one batch (train-mode batch norm) with the gradient of
/// every parameter.
pub fn detector_loss(model: &mut GridDetector, batch: &[&LabeledInput]) -> Result<(f64, Vec<Option<Tensor>>)> {
    let cfg = model.config.clone();
    let g2 = cfg.grid * cfg.grid;
    let n = batch.len();
    let mut obj_t = vec![0.0; n * g2];
    let mut obj_w = vec![1.0; n * g2];
    let mut off_t = vec![0.0; n * 2 * g2];
    let mut off_m = vec![0.0; n * 2 * g2];
    for (i, s) in batch.iter().enumerate() {
        let ((r, c), (dx, dy)) = encode_target(&cfg, &s.input, s.center)?;
        let k = r * cfg.grid + c;
        obj_t[i * g2 + k] = 1.0;
        obj_w[i * g2 + k] = cfg.positive_weight;
        off_t[i * 2 * g2 + k] = dx;
        off_t[i * 2 * g2 + g2 + k] = dy;
        off_m[i * 2 * g2 + k] = 1.0;
        off_m[i * 2 * g2 + g2 + k] = 1.0;
    }
    let inputs: Vec<&DetectorInput> = batch.iter().map(|s| &s.input).collect();
    let mut g = Graph::new();
    let x = g.constant(batch_tensor(&inputs, cfg.input_size)?);
    let (out, b) = model.forward(&mut g, x, Mode::Train)?;
    let logits = g.slice_channels(out, 0, 1)?;
    let bce = g.sigmoid_bce(logits, &obj_t, &obj_w)?;
    let offsets = g.slice_channels(out, 1, 2)?;
    let offsets = g.sigmoid(offsets);
    let mse = g.masked_squared_error(offsets, &off_t, &off_m)?;
    let mse = g.scale(mse, cfg.offset_weight);
    let loss = g.add(bce, mse)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0];
    Ok((value, model.store.grads(&g, &b)))
}

/// IoU of each selected detection against the annotated box.
pub fn detection_ious(model: &mut GridDetector, samples: &[LabeledInput]) -> Result<Vec<f64>> {
    let side = model.config.box_side;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let inputs: Vec<&DetectorInput> = chunk.iter().map(|s| &s.input).collect();
        for (cands, s) in detect_batch(model, &inputs)?.iter().zip(chunk) {
            let det = select_detection(cands)?;
            out.push(iou(&det.bbox(), &BoxF::square(s.center, side))?);
        }
    }
    Ok(out)
}

/// Trains with batch-shuffled Adam and keeps the snapshot with the best
/// validation mean IoU. `on_epoch` sees every epoch as it finishes.
pub fn train_detector(
    config: DetectorConfig,
    train: &[LabeledInput],
    val: &[LabeledInput],
    seed: u64,
    mut on_epoch: impl FnMut(&DetectorEpoch),
) -> Result<TrainedDetector> {
    if train.is_empty() || val.is_empty() {
        return Err(invalid!("detector training needs non-empty train and validation sets"));
    }
    let mut model = GridDetector::new(config, seed)?;
    for s in train.iter().chain(val) {
        encode_target(&model.config, &s.input, s.center)?;
    }
    let cfg = model.config.clone();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut monitor = EarlyStopMonitor::new(cfg.patience, Direction::Maximize);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng::stream(seed, &[0x5EED, epoch as u64]));
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledInput> = idx.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = detector_loss(&mut model, &batch)?;
            adam.step_store(&mut model.store, &grads)?;
            loss_sum += loss * batch.len() as f64;
        }
        let ious = detection_ious(&mut model, val)?;
        let val_mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
        let rec = DetectorEpoch {
            epoch,
            loss: loss_sum / train.len() as f64,
            val_mean_iou,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
        if monitor.update(val_mean_iou, || model.clone()) == StopDecision::Stop {
            break;
        }
    }
    let best_epoch = monitor.best_epoch().unwrap_or(0);
    let (model, best_val_iou) = monitor
        .into_best()
        .ok_or_else(|| invalid!("validation IoU was never finite"))?;
    Ok(TrainedDetector {
        model,
        best_val_iou,
        best_epoch,
        history,
    })
}

/// Detection quality on the 0–100 IoU scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub n: usize,
    pub fraction_iou_at_least_075: f64,
    pub mean_iou: f64,
    pub std_iou: f64,
}

/// Summarizes IoUs given on the 0–1 scale; the standard deviation is the
/// population one.
pub fn detection_metrics(ious: &[f64]) -> Result<DetectionMetrics> {
    if ious.is_empty() {
        return Err(invalid!("cannot evaluate detection on an empty test set"));
    }
    let n = ious.len() as f64;
    let pct: Vec<f64> = ious.iter().map(|v| v * 100.0).collect();
    let mean = pct.iter().sum::<f64>() / n;
    let var = pct.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(DetectionMetrics {
        n: ious.len(),
        fraction_iou_at_least_075: ious.iter().filter(|&&v| v >= IOU_THRESHOLD).count() as f64 / n,
        mean_iou: mean,
        std_iou: var.sqrt(),
    })
}

pub fn evaluate_detection(model: &mut GridDetector, test: &[LabeledInput]) -> Result<DetectionMetrics> {
    if test.is_empty() {
        return Err(invalid!("cannot evaluate detection on an empty test set"));
    }
    detection_metrics(&detection_ious(model, test)?)
}

/// Trained detectors for each (view, side). In `shared` mode one model per
/// view is stored under [`Side::Right`] and left images are mirrored before
/// detection.
#[derive(Clone, Debug, Default)]
pub struct DetectorSet {
    pub shared: bool,
    pub models: BTreeMap<(View, Side), GridDetector>,
}

impl DetectorSet {
    pub fn key(&self, view: View, side: Side) -> (View, Side) {
        if self.shared {
            (view, Side::Right)
        } else {
            (view, side)
        }
    }

    /// Joint center of a preprocessed full image (reference spacing).
    pub fn locate(&mut self, view: View, side: Side, pre: &RasterF) -> Result<Detection> {
        let key = self.key(view, side);
        let flip = self.shared && side == Side::Left;
        let model = self
            .models
            .get_mut(&key)
            .ok_or_else(|| invalid!("no detector for {} {}", key.0, key.1))?;
        let img = if flip { pre.flip_horizontal() } else { pre.clone() };
        let input = prepare_input(&img, model.config.input_size)?;
        let mut det = select_detection(&detector_forward(model, &input)?)?;
        if flip {
            det.center.0 = (pre.width as f64 - 1.0) - det.center.0;
        }
        let (x, y) = det.center;
        if !(x >= 0.0 && y >= 0.0 && x < pre.width as f64 && y < pre.height as f64) {
            return Err(invalid!(
                "{view} detector placed the joint center at ({x:.1}, {y:.1}), outside the {}×{} image",
                pre.width,
                pre.height
            ));
        }
        Ok(det)
    }
}
