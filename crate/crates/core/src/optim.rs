//! Adam, early stopping, and best-of-N restart selection.

use crate::error::{invalid, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam with lazily shaped moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Every parameter needs a gradient; on error nothing
    /// is modified.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], names: &dyn Fn(usize) -> String) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            match g {
                None => return Err(Error::MissingGradient(names(i))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(invalid!(
                        "gradient shape {:?} does not match parameter `{}` {:?}",
                        g.shape(),
                        names(i),
                        p.shape()
                    ))
                }
                _ => {}
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(invalid!("parameter set changed between Adam steps"));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let g = g.as_ref().expect("checked above").data();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }

    /// [`Adam::step`] over a whole [`ParamStore`].
    pub fn step_store(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        let names: Vec<String> = (0..store.len()).map(|i| store.name(i).to_string()).collect();
        self.step(store.values_mut(), grads, &|i| names[i].clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best score seen and a snapshot taken at that epoch. Only
/// strict improvements count.
#[derive(Clone, Debug)]
pub struct EarlyStopMonitor<S> {
    pub patience: usize,
    pub direction: Direction,
    best_score: Option<f64>,
    best_epoch: Option<usize>,
    best_checkpoint: Option<S>,
    epochs_since_improvement: usize,
    epochs_seen: usize,
}

impl<S> EarlyStopMonitor<S> {
    pub fn new(patience: usize, direction: Direction) -> Self {
        EarlyStopMonitor {
            patience,
            direction,
            best_score: None,
            best_epoch: None,
            best_checkpoint: None,
            epochs_since_improvement: 0,
            epochs_seen: 0,
        }
    }

    /// Records one epoch's score. `snapshot` is only invoked on improvement.
    pub fn update(&mut self, score: f64, snapshot: impl FnOnce() -> S) -> StopDecision {
        self.epochs_seen += 1;
        let improved = match self.best_score {
            None => !score.is_nan(),
            Some(best) => match self.direction {
                Direction::Maximize => score > best,
                Direction::Minimize => score < best,
            },
        };
        if improved {
            self.best_score = Some(score);
            self.best_epoch = Some(self.epochs_seen);
            self.best_checkpoint = Some(snapshot());
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best_score
    }

    /// 1-based epoch of the best score.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_checkpoint(&self) -> Option<&S> {
        self.best_checkpoint.as_ref()
    }

    pub fn into_best(self) -> Option<(S, f64)> {
        self.best_checkpoint.zip(self.best_score)
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since_improvement
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RestartRecord {
    pub index: usize,
    pub seed: u64,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct RestartOutcome<M> {
    pub model: M,
    pub score: f64,
    pub best_index: usize,
    pub restarts: Vec<RestartRecord>,
}

/// Default number of independently initialized training runs.
pub const DEFAULT_RESTARTS: usize = 10;

/// Runs `train` once per seed and keeps the run with the highest validation
/// score; ties go to the earliest seed. Failed runs are recorded and skipped.
pub fn multi_restart_train<M, F>(seeds: &[u64], mut train: F) -> Result<RestartOutcome<M>>
where
    F: FnMut(usize, u64) -> Result<(M, f64)>,
{
    if seeds.is_empty() {
        return Err(invalid!("multi_restart_train needs at least one restart"));
    }
    let mut best: Option<(M, f64, usize)> = None;
    let mut restarts = Vec::with_capacity(seeds.len());
    for (index, &seed) in seeds.iter().enumerate() {
        match train(index, seed) {
            Ok((model, score)) => {
                restarts.push(RestartRecord {
                    index,
                    seed,
                    score: Some(score),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((_, s, _)) => score > *s,
                };
                if better {
                    best = Some((model, score, index));
                }
            }
            Err(e) => restarts.push(RestartRecord {
                index,
                seed,
                score: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (model, score, best_index) = best.ok_or(Error::AllRestartsFailed(seeds.len()))?;
    Ok(RestartOutcome {
        model,
        score,
        best_index,
        restarts,
    })
}

/// `n` restart seeds derived from a base seed.
pub fn restart_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| crate::rng::mix(base, &[i])).collect()
}
