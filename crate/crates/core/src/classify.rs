//! KL-grade classifiers: the two-branch PA + LAT network, its single-view
//! variants, the class-balanced sampler and the warm-up/augmented training
//! schedule.

use crate::curate::{Side, View};
use crate::detect::DetectorSet;
use crate::error::{invalid, shape_err, Error, Result};
use crate::model_io::Checkpoint;
use crate::nn::{collect_state, restore_state, Bindings, ConvBlock, Linear, ParamStore};
use crate::optim::{multi_restart_train, restart_seeds, Adam, AdamConfig, Direction, EarlyStopMonitor, RestartOutcome, StopDecision};
use crate::preprocess::{augment, augment_one, crop_patch, preprocess_raw, resize_patch, AugmentSpec, Image, Raster16, RasterF, PATCH_SIZE, REFERENCE_SPACING};
use crate::rng;
use crate::tensor::{softmax, Graph, Mode, Tensor, Var};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

pub const NUM_GRADES: usize = 5;
pub const CHECKPOINT_KIND: &str = "kl_classifier";

/// Which views a classifier consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Multi,
    Pa,
    Lat,
}

impl InputMode {
    pub const ALL: [InputMode; 3] = [InputMode::Lat, InputMode::Pa, InputMode::Multi];

    pub fn name(self) -> &'static str {
        match self {
            InputMode::Multi => "multi",
            InputMode::Pa => "pa",
            InputMode::Lat => "lat",
        }
    }

    pub fn views(self) -> &'static [View] {
        match self {
            InputMode::Multi => &[View::Pa, View::Lat],
            InputMode::Pa => &[View::Pa],
            InputMode::Lat => &[View::Lat],
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multi" | "pa+lat" => Ok(InputMode::Multi),
            "pa" => Ok(InputMode::Pa),
            "lat" => Ok(InputMode::Lat),
            _ => Err(invalid!("unknown input mode `{s}` (expected multi, pa or lat)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub input_size: usize,
    /// Output channels of each branch block (conv, BN, ReLU, 2×2 max-pool).
    pub branch_widths: Vec<usize>,
    /// Output channels of each shared block after the concatenation.
    pub trunk_widths: Vec<usize>,
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Leading epochs trained without augmentation.
    pub warmup_epochs: usize,
    pub restarts: usize,
    /// Samples drawn per epoch; the training set size when absent.
    pub epoch_size: Option<usize>,
    pub augment: AugmentSpec,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            input_size: 256,
            branch_widths: vec![16, 32, 64],
            trunk_widths: vec![128, 128],
            hidden: 128,
            batch_size: 16,
            learning_rate: 1e-5,
            patience: 20,
            max_epochs: 200,
            warmup_epochs: 10,
            restarts: 10,
            epoch_size: None,
            augment: AugmentSpec::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.branch_widths.is_empty() || self.hidden == 0 {
            return Err(invalid!("classifier needs a positive input size, hidden width and at least one branch block"));
        }
        if self.branch_widths.iter().chain(&self.trunk_widths).any(|&c| c == 0) {
            return Err(invalid!("classifier block widths must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(invalid!("learning rate, batch size, patience and max epochs must be positive"));
        }
        if self.restarts == 0 || self.epoch_size == Some(0) {
            return Err(invalid!("restarts and epoch size must be positive"));
        }
        self.augment.validate()
    }
}

/// A square knee patch at model input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn from_raster(img: &RasterF) -> Result<Self> {
        if img.width != img.height {
            return Err(shape_err!("patch must be square, got {}×{}", img.width, img.height));
        }
        Ok(Patch {
            size: img.width,
            data: img.data.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_raster(&self) -> RasterF {
        Image {
            width: self.size,
            height: self.size,
            spacing: PATCH_SIZE as f64 * REFERENCE_SPACING / self.size as f64,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn zeros(size: usize) -> Self {
        Patch {
            size,
            data: vec![0.0; size * size],
        }
    }
}

/// Crops the 700-px patch around `center` (reference pixels), resizes it to
/// `size` and mirrors left knees so every patch shows a right knee.
pub fn knee_patch(pre: &RasterF, center: (f64, f64), side: Side, size: usize) -> Result<Patch> {
    let crop = crop_patch(pre, center, PATCH_SIZE)?;
    let small = resize_patch(&crop, size)?;
    let small = match side {
        Side::Right => small,
        Side::Left => small.flip_horizontal(),
    };
    Patch::from_raster(&small)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub id: String,
    pub grade: u8,
    pub pa: Option<Patch>,
    pub lat: Option<Patch>,
}

impl PatchSample {
    pub fn view(&self, view: View) -> Option<&Patch> {
        match view {
            View::Pa => self.pa.as_ref(),
            View::Lat => self.lat.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlClassifier {
    pub config: ClassifierConfig,
    pub mode: InputMode,
    pub store: ParamStore,
    /// One block stack per view in [`InputMode::views`] order.
    pub branches: Vec<Vec<ConvBlock>>,
    pub trunk: Vec<ConvBlock>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl KlClassifier {
    pub fn new(config: ClassifierConfig, mode: InputMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0xC1A55, mode as u64]);
        let mut store = ParamStore::new();
        let mut branches = Vec::new();
        for view in mode.views() {
            let mut blocks = Vec::new();
            let mut c_in = 1;
            for (i, &c) in config.branch_widths.iter().enumerate() {
                let name = format!("{}.{i}", view.name().to_ascii_lowercase());
                blocks.push(ConvBlock::new(&mut store, &name, c_in, c, 1, true, &mut r));
                c_in = c;
            }
            branches.push(blocks);
        }
        let mut c_in = config.branch_widths.last().expect("validated") * mode.views().len();
        let mut trunk = Vec::new();
        for (i, &c) in config.trunk_widths.iter().enumerate() {
            trunk.push(ConvBlock::new(&mut store, &format!("trunk.{i}"), c_in, c, 1, true, &mut r));
            c_in = c;
        }
        let fc1 = Linear::new(&mut store, "fc1", c_in, config.hidden, &mut r);
        let fc2 = Linear::new(&mut store, "fc2", config.hidden, NUM_GRADES, &mut r);
        Ok(KlClassifier {
            config,
            mode,
            store,
            branches,
            trunk,
            fc1,
            fc2,
        })
    }

    /// Zeroes the output layer so every input scores 0.2 per grade.
    pub fn zero_head(&mut self) {
        for id in [self.fc2.weight, self.fc2.bias] {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Logits `N × 5` for one input tensor per view.
    pub fn forward(&mut self, g: &mut Graph, inputs: &[Var], mode: Mode) -> Result<(Var, Bindings)> {
        if inputs.len() != self.branches.len() {
            return Err(shape_err!("{} inputs for a {}-branch classifier", inputs.len(), self.branches.len()));
        }
        let b = self.store.bind(g);
        let mut feats = Vec::with_capacity(inputs.len());
        for (blocks, &x) in self.branches.iter_mut().zip(inputs) {
            let mut h = x;
            for block in blocks.iter_mut() {
                h = block.forward(g, &b, h, mode)?;
            }
            feats.push(h);
        }
        let mut h = feats[0];
        for &f in &feats[1..] {
            h = g.channel_concat(h, f)?;
        }
        for block in &mut self.trunk {
            h = block.forward(g, &b, h, mode)?;
        }
        let h = g.global_avg_pool(h)?;
        let h = self.fc1.forward(g, &b, h)?;
        let h = g.relu(h);
        let logits = self.fc2.forward(g, &b, h)?;
        Ok((logits, b))
    }

    fn all_blocks(&self) -> Vec<&ConvBlock> {
        self.branches.iter().flatten().chain(&self.trunk).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::json!({ "mode": self.mode, "config": self.config }),
            tensors: collect_state(&self.store, &self.all_blocks()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, path: &Path) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND, path)?;
        #[derive(Deserialize)]
        struct Header {
            mode: InputMode,
            config: ClassifierConfig,
        }
        let h: Header = serde_json::from_value(ck.config).map_err(|e| Error::Format {
            path: path.into(),
            message: format!("bad classifier header: {e}"),
        })?;
        let mut model = KlClassifier::new(h.config, h.mode, 0)?;
        let mut blocks: Vec<&mut ConvBlock> = model.branches.iter_mut().flatten().chain(model.trunk.iter_mut()).collect();
        restore_state(&mut model.store, &mut blocks, ck.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, path)
    }
}

/// Stacks the patches of each required view into `N × 1 × S × S` tensors.
fn batch_tensors(model: &KlClassifier, samples: &[&PatchSample]) -> Result<Vec<Tensor>> {
    let s = model.config.input_size;
    model
        .mode
        .views()
        .iter()
        .map(|&view| {
            let mut data = Vec::with_capacity(samples.len() * s * s);
            for smp in samples {
                let p = smp
                    .view(view)
                    .ok_or_else(|| invalid!("exam {} has no {view} patch, required by the {} model", smp.id, model.mode))?;
                if p.size != s || p.data.len() != s * s {
                    return Err(shape_err!("exam {}: {view} patch is {}×{}, model expects {s}×{s}", smp.id, p.size, p.size));
                }
                data.extend(p.data.iter().map(|&v| v as f64));
            }
            Tensor::new(vec![samples.len(), 1, s, s], data)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scores: [f64; NUM_GRADES],
    pub grade: u8,
}

impl Prediction {
    /// Argmax with ties resolved toward the lower grade.
    pub fn from_scores(scores: [f64; NUM_GRADES]) -> Self {
        let mut grade = 0;
        for (i, &v) in scores.iter().enumerate() {
            if v > scores[grade] {
                grade = i;
            }
        }
        Prediction {
            scores,
            grade: grade as u8,
        }
    }
}

/// Evaluation-mode predictions, processed in chunks of 32.
pub fn predict(model: &mut KlClassifier, samples: &[PatchSample]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let refs: Vec<&PatchSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let xs: Vec<Var> = batch_tensors(model, &refs)?.into_iter().map(|t| g.constant(t)).collect();
        let (logits, _) = model.forward(&mut g, &xs, Mode::Eval)?;
        let probs = softmax(g.value(logits))?;
        for row in probs.data().chunks(NUM_GRADES) {
            out.push(Prediction::from_scores(row.try_into().expect("5 scores")));
        }
    }
    Ok(out)
}

/// Scores for one exam. Only the patches the model's mode needs are read.
pub fn classify_forward(model: &mut KlClassifier, pa: Option<&Patch>, lat: Option<&Patch>) -> Result<Prediction> {
    let sample = PatchSample {
        id: "input".into(),
        grade: 0,
        pa: pa.cloned(),
        lat: lat.cloned(),
    };
    Ok(predict(model, std::slice::from_ref(&sample))?[0])
}

/// Training-mode cross-entropy of one batch and the gradient of every
/// parameter.
pub fn classifier_loss(model: &mut KlClassifier, batch: &[&PatchSample]) -> Result<(f64, Vec<Option<Tensor>>)> {
    let labels: Vec<usize> = batch.iter().map(|s| s.grade as usize).collect();
    let mut g = Graph::new();
    let xs: Vec<Var> = batch_tensors(model, batch)?.into_iter().map(|t| g.constant(t)).collect();
    let (logits, b) = model.forward(&mut g, &xs, Mode::Train)?;
    let loss = g.softmax_cross_entropy(logits, &labels)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0];
    Ok((value, model.store.grads(&g, &b)))
}

fn class_lists(grades: &[u8]) -> Result<[Vec<usize>; NUM_GRADES]> {
    let mut lists: [Vec<usize>; NUM_GRADES] = Default::default();
    for (i, &g) in grades.iter().enumerate() {
        lists
            .get_mut(g as usize)
            .ok_or_else(|| invalid!("grade {g} outside 0..=4"))?
            .push(i);
    }
    if let Some(empty) = lists.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(empty));
    }
    Ok(lists)
}

/// Draws a class uniformly, then a case of that class uniformly with
/// replacement.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    classes: [Vec<usize>; NUM_GRADES],
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(grades: &[u8], seed: u64) -> Result<Self> {
        Ok(BalancedSampler {
            classes: class_lists(grades)?,
            rng: rng::stream(seed, &[0xBA1A]),
        })
    }

    /// Index of the next sample and its grade.
    pub fn draw(&mut self) -> (usize, u8) {
        let c = self.rng.random_range(0..NUM_GRADES);
        let list = &self.classes[c];
        (list[self.rng.random_range(0..list.len())], c as u8)
    }
}

pub fn balanced_batch(sampler: &mut BalancedSampler, batch_size: usize) -> Vec<(usize, u8)> {
    (0..batch_size).map(|_| sampler.draw()).collect()
}

/// Indices of a class-balanced validation subset: the size of the smallest
/// class drawn without replacement from every class, ascending within each
/// class, classes in grade order.
pub fn build_balanced_validation(grades: &[u8], seed: u64) -> Result<Vec<usize>> {
    let lists = class_lists(grades)?;
    let m = lists.iter().map(Vec::len).min().expect("5 classes");
    let mut out = Vec::with_capacity(m * NUM_GRADES);
    for (c, list) in lists.iter().enumerate() {
        let mut r = rng::stream(seed, &[0x7A1, c as u64]);
        let mut pick: Vec<usize> = index::sample(&mut r, list.len(), m).into_iter().map(|k| list[k]).collect();
        pick.sort_unstable();
        out.extend(pick);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Augmented,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Augmented => "augmented",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub val_accuracy: f64,
    #[serde(skip)]
    pub seconds: f64,
}

/// `epoch,phase,loss,val_accuracy,seconds`
pub fn write_epoch_log<W: Write>(mut w: W, epochs: &[ClassifierEpoch]) -> std::io::Result<()> {
    writeln!(w, "epoch,phase,loss,val_accuracy,seconds")?;
    for e in epochs {
        writeln!(w, "{},{},{:.6},{:.6},{:.3}", e.epoch, e.phase.name(), e.loss, e.val_accuracy, e.seconds)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub model: KlClassifier,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub history: Vec<ClassifierEpoch>,
}

fn augmented(sample: &PatchSample, spec: &AugmentSpec, r: &mut ChaCha8Rng) -> Result<PatchSample> {
    let (pa, lat) = match (&sample.pa, &sample.lat) {
        (Some(pa), Some(lat)) => {
            let (a, b) = augment(&pa.to_raster(), &lat.to_raster(), spec, r)?;
            (Some(Patch::from_raster(&a)?), Some(Patch::from_raster(&b)?))
        }
        (Some(p), None) => (Some(Patch::from_raster(&augment_one(&p.to_raster(), spec, r)?)?), None),
        (None, Some(p)) => (None, Some(Patch::from_raster(&augment_one(&p.to_raster(), spec, r)?)?)),
        (None, None) => (None, None),
    };
    Ok(PatchSample {
        id: sample.id.clone(),
        grade: sample.grade,
        pa,
        lat,
    })
}

/// Keeps only the views a model reads, so augmentation skips the others.
fn restricted(sample: &PatchSample, mode: InputMode) -> PatchSample {
    PatchSample {
        id: sample.id.clone(),
        grade: sample.grade,
        pa: if mode.views().contains(&View::Pa) { sample.pa.clone() } else { None },
        lat: if mode.views().contains(&View::Lat) { sample.lat.clone() } else { None },
    }
}

pub fn accuracy_on(model: &mut KlClassifier, samples: &[PatchSample]) -> Result<f64> {
    let preds = predict(model, samples)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| p.grade == s.grade).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// One training run: balanced batches, no augmentation for the warm-up
/// epochs, early stopping on validation accuracy. Returns the best snapshot.
pub fn train_classifier(
    config: ClassifierConfig,
    mode: InputMode,
    train: &[PatchSample],
    val: &[PatchSample],
    seed: u64,
    mut on_epoch: impl FnMut(&ClassifierEpoch),
) -> Result<TrainedClassifier> {
    if val.is_empty() {
        return Err(invalid!("classifier training needs a non-empty validation set"));
    }
    let grades: Vec<u8> = train.iter().map(|s| s.grade).collect();
    let mut sampler = BalancedSampler::new(&grades, seed)?;
    let mut model = KlClassifier::new(config, mode, seed)?;
    let refs: Vec<&PatchSample> = train.iter().chain(val).collect();
    batch_tensors(&model, &refs)?;
    let cfg = model.config.clone();
    let epoch_size = cfg.epoch_size.unwrap_or(train.len());
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut monitor = EarlyStopMonitor::new(cfg.patience, Direction::Maximize);
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let phase = if epoch <= cfg.warmup_epochs { Phase::Warmup } else { Phase::Augmented };
        let mut aug_rng = rng::stream(seed, &[0xA06, epoch as u64]);
        let mut loss_sum = 0.0;
        let mut done = 0;
        while done < epoch_size {
            let n = cfg.batch_size.min(epoch_size - done);
            let picks = balanced_batch(&mut sampler, n);
            let batch: Vec<PatchSample> = match phase {
                Phase::Warmup => picks.iter().map(|&(i, _)| restricted(&train[i], mode)).collect(),
                Phase::Augmented => picks
                    .iter()
                    .map(|&(i, _)| augmented(&restricted(&train[i], mode), &cfg.augment, &mut aug_rng))
                    .collect::<Result<_>>()?,
            };
            let refs: Vec<&PatchSample> = batch.iter().collect();
            let (loss, grads) = classifier_loss(&mut model, &refs)?;
            adam.step_store(&mut model.store, &grads)?;
            loss_sum += loss * n as f64;
            done += n;
        }
        let val_accuracy = accuracy_on(&mut model, val)?;
        let rec = ClassifierEpoch {
            epoch,
            phase,
            loss: loss_sum / epoch_size as f64,
            val_accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
        if monitor.update(val_accuracy, || model.clone()) == StopDecision::Stop {
            break;
        }
    }
    let best_epoch = monitor.best_epoch().unwrap_or(0);
    let (model, best_val_accuracy) = monitor
        .into_best()
        .ok_or_else(|| invalid!("validation accuracy was never finite"))?;
    Ok(TrainedClassifier {
        model,
        best_val_accuracy,
        best_epoch,
        history,
    })
}

/// `config.restarts` independent runs; the best validation accuracy wins.
pub fn train_with_restarts(
    config: &ClassifierConfig,
    mode: InputMode,
    train: &[PatchSample],
    val: &[PatchSample],
    seed: u64,
    mut on_epoch: impl FnMut(usize, &ClassifierEpoch),
) -> Result<RestartOutcome<TrainedClassifier>> {
    config.validate()?;
    multi_restart_train(&restart_seeds(seed, config.restarts), |i, s| {
        let t = train_classifier(config.clone(), mode, train, val, s, |e| on_epoch(i, e))?;
        let score = t.best_val_accuracy;
        Ok((t, score))
    })
}

/// Raw radiographs of one knee exam.
#[derive(Clone, Debug, PartialEq)]
pub struct RawExam {
    pub id: String,
    pub side: Side,
    pub pa: Option<Raster16>,
    pub lat: Option<Raster16>,
}

/// Where crop centers come from.
pub enum CenterSource<'a> {
    Detectors(&'a mut DetectorSet),
    /// Known centers in native pixels of each view's raw image.
    Known { pa: Option<(f64, f64)>, lat: Option<(f64, f64)> },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineOutput {
    pub prediction: Prediction,
    /// Crop centers per view, reference pixels.
    pub centers: Vec<(View, (f64, f64))>,
}

/// Maps a native pixel coordinate onto the resampled reference grid.
pub fn native_to_reference(p: (f64, f64), native: &Raster16, reference: &RasterF) -> (f64, f64) {
    let kx = reference.width as f64 / native.width as f64;
    let ky = reference.height as f64 / native.height as f64;
    ((p.0 + 0.5) * kx - 0.5, (p.1 + 0.5) * ky - 0.5)
}

/// preprocess → locate → crop → resize for each of `views`. The returned
/// sample carries `grade` unchanged.
pub fn extract_patches(
    exam: &RawExam,
    views: &[View],
    centers: &mut CenterSource<'_>,
    size: usize,
    grade: u8,
) -> Result<(PatchSample, Vec<(View, (f64, f64))>)> {
    let mut sample = PatchSample {
        id: exam.id.clone(),
        grade,
        pa: None,
        lat: None,
    };
    let mut found = Vec::new();
    for &view in views {
        let raw = match view {
            View::Pa => exam.pa.as_ref(),
            View::Lat => exam.lat.as_ref(),
        }
        .ok_or_else(|| invalid!("exam {} has no {view} image", exam.id))?;
        let pre = preprocess_raw(raw).map_err(|e| invalid!("exam {} {view}: {e}", exam.id))?;
        let c = match centers {
            CenterSource::Detectors(set) => set
                .locate(view, exam.side, &pre)
                .map_err(|e| invalid!("exam {}: {e}", exam.id))?
                .center,
            CenterSource::Known { pa, lat } => {
                let p = match view {
                    View::Pa => *pa,
                    View::Lat => *lat,
                }
                .ok_or_else(|| invalid!("exam {} has no known {view} center", exam.id))?;
                native_to_reference(p, raw, &pre)
            }
        };
        let patch = knee_patch(&pre, c, exam.side, size).map_err(|e| invalid!("exam {}: {e}", exam.id))?;
        match view {
            View::Pa => sample.pa = Some(patch),
            View::Lat => sample.lat = Some(patch),
        }
        found.push((view, c));
    }
    Ok((sample, found))
}

/// The full chain for one exam: preprocess → locate → crop → resize →
/// classify, reading only the views the model needs.
pub fn predict_pipeline(classifier: &mut KlClassifier, exam: &RawExam, centers: &mut CenterSource<'_>) -> Result<PipelineOutput> {
    let (sample, found) = extract_patches(exam, classifier.mode.views(), centers, classifier.config.input_size, 0)?;
    let prediction = classify_forward(classifier, sample.pa.as_ref(), sample.lat.as_ref())?;
    Ok(PipelineOutput {
        prediction,
        centers: found,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ClassifierConfig {
        ClassifierConfig {
            input_size: 16,
            branch_widths: vec![2, 3],
            trunk_widths: vec![4],
            hidden: 4,
            batch_size: 4,
            ..ClassifierConfig::default()
        }
    }

    fn sample(i: usize, grade: u8, size: usize) -> PatchSample {
        let p = |k: usize| Patch {
            size,
            data: (0..size * size).map(|j| (((j * 31 + i * 17 + k) % 23) as f32) / 23.0).collect(),
        };
        PatchSample {
            id: format!("s{i}"),
            grade,
            pa: Some(p(0)),
            lat: Some(p(5)),
        }
    }

    #[test]
    fn argmax_prefers_lower_grade_on_ties() {
        assert_eq!(Prediction::from_scores([0.1, 0.5, 0.2, 0.1, 0.1]).grade, 1);
        assert_eq!(Prediction::from_scores([0.2; 5]).grade, 0);
        assert_eq!(Prediction::from_scores([0.1, 0.3, 0.3, 0.2, 0.1]).grade, 1);
    }

    #[test]
    fn zero_head_gives_uniform_scores() {
        for mode in InputMode::ALL {
            let mut m = KlClassifier::new(tiny(), mode, 1).unwrap();
            m.zero_head();
            let s = sample(0, 0, 16);
            let p = classify_forward(&mut m, s.pa.as_ref(), s.lat.as_ref()).unwrap();
            assert!(p.scores.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn scores_sum_to_one_and_inputs_are_checked() {
        let mut m = KlClassifier::new(tiny(), InputMode::Multi, 2).unwrap();
        let s = sample(3, 0, 16);
        let p = classify_forward(&mut m, s.pa.as_ref(), s.lat.as_ref()).unwrap();
        assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(classify_forward(&mut m, s.pa.as_ref(), None).unwrap_err().to_string().contains("LAT"));
        let big = sample(3, 0, 32);
        assert!(classify_forward(&mut m, big.pa.as_ref(), big.lat.as_ref()).is_err());
        // Zero LAT patches still give a valid distribution.
        let z = Patch::zeros(16);
        let p = classify_forward(&mut m, s.pa.as_ref(), Some(&z)).unwrap();
        assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_rejects_missing_classes_and_is_deterministic() {
        assert!(matches!(BalancedSampler::new(&[0, 1, 2, 3], 0), Err(Error::EmptyClass(4))));
        let grades = [0, 1, 2, 3, 4];
        let mut a = BalancedSampler::new(&grades, 9).unwrap();
        let mut b = BalancedSampler::new(&grades, 9).unwrap();
        let ba = balanced_batch(&mut a, 50);
        assert_eq!(ba, balanced_batch(&mut b, 50));
        assert!(ba.iter().all(|&(i, g)| grades[i] == g));
    }

    #[test]
    fn balanced_validation_uses_the_smallest_class() {
        let counts = [678usize, 263, 329, 316, 154];
        let grades: Vec<u8> = counts.iter().enumerate().flat_map(|(g, &n)| std::iter::repeat_n(g as u8, n)).collect();
        let v = build_balanced_validation(&grades, 4).unwrap();
        assert_eq!(v.len(), 770);
        for g in 0..5u8 {
            assert_eq!(v.iter().filter(|&&i| grades[i] == g).count(), 154);
        }
        let mut dedup = v.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 770);
        assert_eq!(v, build_balanced_validation(&grades, 4).unwrap());
        let even = [0u8, 1, 2, 3, 4, 0, 1, 2, 3, 4];
        assert_eq!(build_balanced_validation(&even, 1).unwrap().len(), 10);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let mut m = KlClassifier::new(tiny(), InputMode::Pa, 5).unwrap();
        let s = sample(1, 2, 16);
        let before = classify_forward(&mut m, s.pa.as_ref(), None).unwrap();
        let mut back = KlClassifier::from_checkpoint(m.to_checkpoint(), Path::new("mem")).unwrap();
        assert_eq!(back.mode, InputMode::Pa);
        assert_eq!(classify_forward(&mut back, s.pa.as_ref(), None).unwrap(), before);
    }

    #[test]
    fn loss_decreases_over_first_steps() {
        let mut m = KlClassifier::new(tiny(), InputMode::Multi, 7).unwrap();
        let batch: Vec<PatchSample> = (0..8).map(|i| sample(i, (i % 5) as u8, 16)).collect();
        let refs: Vec<&PatchSample> = batch.iter().collect();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3));
        let mut last = f64::INFINITY;
        for _ in 0..5 {
            let (loss, grads) = classifier_loss(&mut m, &refs).unwrap();
            assert!(loss < last, "{loss} !< {last}");
            last = loss;
            adam.step_store(&mut m.store, &grads).unwrap();
        }
    }

    #[test]
    fn epoch_log_has_the_documented_header() {
        let mut buf = Vec::new();
        let e = ClassifierEpoch {
            epoch: 1,
            phase: Phase::Warmup,
            loss: 1.5,
            val_accuracy: 0.25,
            seconds: 0.5,
        };
        write_epoch_log(&mut buf, &[e]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,phase,loss,val_accuracy,seconds\n1,warmup,"));
    }
}
