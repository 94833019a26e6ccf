//! Mini-batch training with Adam, plateau learning-rate halving, early
//! stopping on validation loss, best-parameter retention and resumable
//! per-epoch state.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atomic;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::SampleWindow;
use crate::error::{Error, Result};
use crate::grid::GridFrame;
use crate::model::{ModelInput, Network};
use crate::seed::derive_seed;
use crate::tensor::ParameterSet;

/// Name of the precipitation variable inside sample windows.
pub const PRECIP_VARIABLE: &str = "tp";
/// Name of the derived wind-speed variable inside sample windows.
pub const WIND_VARIABLE: &str = "ws";

const SHUFFLE_TAG: u64 = 1;
const DROPOUT_TAG: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_halving_patience: usize,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 2,
            max_epochs: 200,
            early_stop_patience: 15,
            lr_halving_patience: 4,
            lr_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            horizon: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
            ("lr_halving_patience", self.lr_halving_patience),
            ("horizon", self.horizon),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// One training example in model-ready form (normalized, `f32`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub precip: Vec<f32>,
    pub wind: Option<Vec<f32>>,
    pub target: Vec<f32>,
}

impl Sample {
    /// Extracts precipitation, the target and, if present, wind speed.
    pub fn from_window(window: &SampleWindow) -> Result<Self> {
        let cast = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        Ok(Sample {
            precip: cast(&window.input(PRECIP_VARIABLE)?.values),
            wind: window.inputs.get(WIND_VARIABLE).map(|b| cast(&b.values)),
            target: cast(window.target.values()),
        })
    }

    pub fn input(&self) -> ModelInput<'_, f32> {
        ModelInput {
            precip: &self.precip,
            wind: self.wind.as_deref(),
        }
    }
}

/// Mean squared error between two equal-shape frames.
pub fn mse_loss(pred: &GridFrame, target: &GridFrame) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Config(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(squared_error(pred.values(), target.values()) / pred.values().len() as f64)
}

fn squared_error<A: Copy + Into<f64>>(a: &[A], b: &[A]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum()
}

/// Adam with bias correction; moments are kept in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(config: &TrainConfig, parameters: usize) -> Self {
        Adam {
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            m: vec![0.0; parameters],
            v: vec![0.0; parameters],
        }
    }

    pub fn apply(&mut self, params: &mut ParameterSet<f32>, grads: &ParameterSet<f32>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut i = 0;
        for (p, g) in params.tensors.iter_mut().zip(&grads.tensors) {
            for (w, &gv) in p.data.iter_mut().zip(&g.data) {
                let gv = f64::from(gv);
                let m = self.beta1 * f64::from(self.m[i]) + (1.0 - self.beta1) * gv;
                let v = self.beta2 * f64::from(self.v[i]) + (1.0 - self.beta2) * gv * gv;
                self.m[i] = m as f32;
                self.v[i] = v as f32;
                *w = (f64::from(*w) - lr * (m / c1) / ((v / c2).sqrt() + self.epsilon)) as f32;
                i += 1;
            }
        }
    }

    fn encode(&self) -> Vec<u8> {
        self.m.iter().chain(&self.v).flat_map(|x| x.to_le_bytes()).collect()
    }

    fn decode(&mut self, bytes: &[u8]) -> Result<()> {
        let n = self.m.len();
        if bytes.len() != 8 * n {
            return Err(Error::Corruption {
                layer: "<optimizer>".into(),
                message: format!("expected {} bytes of moments, found {}", 8 * n, bytes.len()),
            });
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        self.m.copy_from_slice(&vals[..n]);
        self.v.copy_from_slice(&vals[n..]);
        Ok(())
    }
}

/// Bookkeeping for plateau halving and early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauTracker {
    pub lr: f64,
    pub best: Option<f64>,
    pub best_epoch: usize,
    /// Consecutive epochs without improvement.
    pub stale: usize,
    /// Same, but also reset when the learning rate changes.
    pub stale_since_lr_change: usize,
}

/// What the tracker decided after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

impl PlateauTracker {
    pub fn new(lr: f64) -> Self {
        PlateauTracker {
            lr,
            best: None,
            best_epoch: 0,
            stale: 0,
            stale_since_lr_change: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64, config: &TrainConfig) -> Observation {
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.best_epoch = epoch;
            self.stale = 0;
            self.stale_since_lr_change = 0;
            return Observation {
                improved: true,
                halved: false,
                stop: false,
            };
        }
        self.stale += 1;
        self.stale_since_lr_change += 1;
        if self.stale >= config.early_stop_patience {
            return Observation {
                improved: false,
                halved: false,
                stop: true,
            };
        }
        let halved = self.stale_since_lr_change >= config.lr_halving_patience;
        if halved {
            self.lr *= config.lr_factor;
            self.stale_since_lr_change = 0;
        }
        Observation {
            improved: false,
            halved,
            stop: false,
        }
    }
}

/// Learning rate in effect at each epoch and the stopping epoch, for a
/// scripted validation-loss sequence.
pub fn simulate_schedule(val_losses: &[f64], config: &TrainConfig) -> (Vec<f64>, Option<usize>) {
    let mut tracker = PlateauTracker::new(config.learning_rate);
    let mut lrs = Vec::new();
    for (i, &loss) in val_losses.iter().enumerate().take(config.max_epochs) {
        lrs.push(tracker.lr);
        if tracker.observe(i + 1, loss, config).stop {
            return (lrs, Some(i + 1));
        }
    }
    (lrs, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// `None` while training is unfinished.
    pub stop_reason: Option<StopReason>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:e},{:e},{:e},{:.3}", e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds);
        }
        out
    }

    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        atomic::write_file(csv, self.to_csv().as_bytes())?;
        let body = serde_json::to_vec_pretty(self).map_err(|e| Error::json("training history", e))?;
        atomic::write_file(json, &body)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for per-epoch resumable state; resumes if it holds state.
    pub state_dir: Option<PathBuf>,
    /// Return after this many epochs in this call, leaving training
    /// unfinished (used to exercise resumption).
    pub halt_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub best: Network<f32>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    config: TrainConfig,
    epochs_completed: usize,
    tracker: PlateauTracker,
    history: TrainHistory,
    adam_step: u64,
}

const STATE_FILE: &str = "state.json";
const OPTIMIZER_FILE: &str = "optimizer.bin";
const CURRENT_DIR: &str = "current";
const BEST_DIR: &str = "best";

fn save_state(dir: &Path, state: &TrainState, current: &Network<f32>, best: &Network<f32>, adam: &Adam) -> Result<()> {
    let json = serde_json::to_vec_pretty(state).map_err(|e| Error::json("training state", e))?;
    atomic::write_dir(dir, |tmp| {
        save_checkpoint(current, &tmp.join(CURRENT_DIR))?;
        save_checkpoint(best, &tmp.join(BEST_DIR))?;
        atomic::write_file(&tmp.join(OPTIMIZER_FILE), &adam.encode())?;
        atomic::write_file(&tmp.join(STATE_FILE), &json)
    })
}

fn load_state(dir: &Path, net: &Network<f32>, adam: &mut Adam) -> Result<Option<(TrainState, Network<f32>, Network<f32>)>> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let state: TrainState = serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    let current = load_checkpoint(&dir.join(CURRENT_DIR), Some(net.kind))?;
    let best = load_checkpoint(&dir.join(BEST_DIR), Some(net.kind))?;
    if current.config != net.config {
        return Err(Error::Config("saved training state belongs to a different model configuration".into()));
    }
    let opt = dir.join(OPTIMIZER_FILE);
    adam.decode(&fs::read(&opt).map_err(|e| Error::io(&opt, e))?)?;
    adam.step = state.adam_step;
    Ok(Some((state, current, best)))
}

fn mean_loss(net: &Network<f32>, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let y = net.predict(&s.input())?;
        total += squared_error(&y, &s.target) / y.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `net` in place and returns the best-validation parameters.
pub fn train(
    net: &mut Network<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty train and validation sets (got {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut adam = Adam::new(config, net.parameter_count());
    let mut tracker = PlateauTracker::new(config.learning_rate);
    let mut history = TrainHistory::default();
    let mut best = net.clone();
    let mut start = 1;
    if let Some(dir) = &options.state_dir {
        if let Some((state, current, saved_best)) = load_state(dir, net, &mut adam)? {
            if state.config != *config {
                return Err(Error::Config(format!(
                    "training state in {} was written with a different configuration",
                    dir.display()
                )));
            }
            *net = current;
            best = saved_best;
            tracker = state.tracker;
            history = state.history;
            start = state.epochs_completed + 1;
            log::info!("resuming at epoch {start} from {}", dir.display());
        }
    }
    if history.stop_reason.is_some() {
        return Ok(TrainOutcome { best, history });
    }
    let mut grads = net.params.zeros_like();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut ran = 0;
    for epoch in start..=config.max_epochs {
        let clock = Instant::now();
        let lr = tracker.lr;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[SHUFFLE_TAG, epoch as u64])));
        let mut train_total = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            grads.fill_zero();
            let mut batch_loss = 0.0;
            for (i, &idx) in batch.iter().enumerate() {
                let s = &train_set[idx];
                let seed = derive_seed(config.seed, &[DROPOUT_TAG, epoch as u64, step as u64, i as u64]);
                let (y, trace) = net.forward(&s.input(), Some(seed))?;
                let n = y.len() as f64;
                batch_loss += squared_error(&y, &s.target) / n;
                let scale = (2.0 / (n * batch.len() as f64)) as f32;
                let d: Vec<f32> = y.iter().zip(&s.target).map(|(a, b)| scale * (a - b)).collect();
                net.backward(&trace, &d, &mut grads);
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: step,
                    param_norm: net.params.l2_norm(),
                    loss: batch_loss / batch.len() as f64,
                });
            }
            train_total += batch_loss;
            adam.apply(&mut net.params, &grads, lr);
        }
        let train_loss = train_total / train_set.len() as f64;
        let val_loss = mean_loss(net, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: order.len().div_ceil(config.batch_size),
                param_norm: net.params.l2_norm(),
                loss: val_loss,
            });
        }
        let obs = tracker.observe(epoch, val_loss, config);
        if obs.improved {
            best.params = net.params.clone();
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: clock.elapsed().as_secs_f64(),
        });
        history.best_epoch = tracker.best_epoch;
        history.best_val_loss = tracker.best;
        if obs.stop {
            history.stop_reason = Some(StopReason::EarlyStop);
        } else if epoch == config.max_epochs {
            history.stop_reason = Some(StopReason::MaxEpochs);
        }
        log::info!(
            "epoch {epoch}: train {train_loss:.4e} val {val_loss:.4e} lr {lr:.2e}{}",
            if obs.halved { " (halving)" } else { "" }
        );
        if let Some(dir) = &options.state_dir {
            let state = TrainState {
                config: config.clone(),
                epochs_completed: epoch,
                tracker: tracker.clone(),
                history: history.clone(),
                adam_step: adam.step,
            };
            save_state(dir, &state, net, &best, &adam)?;
        }
        ran += 1;
        if obs.stop || options.halt_after.is_some_and(|h| ran >= h) {
            break;
        }
    }
    Ok(TrainOutcome { best, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoreUNetConfig, ModelKind};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn mse_cases() {
        let a = GridFrame::filled(1, 1, 1.0);
        let b = GridFrame::filled(1, 1, 0.0);
        assert_eq!(mse_loss(&a, &b).unwrap(), 1.0);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert!(mse_loss(&a, &GridFrame::filled(2, 1, 0.0)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..64).map(|_| rng.random()).collect();
        let t: Vec<f64> = (0..64).map(|_| rng.random()).collect();
        let mut direct = 0.0;
        for i in 0..64 {
            direct += (p[i] - t[i]) * (p[i] - t[i]);
        }
        let got = mse_loss(&GridFrame::new(8, 8, p).unwrap(), &GridFrame::new(8, 8, t).unwrap()).unwrap();
        assert!((got - direct / 64.0).abs() < 1e-15);
    }

    #[test]
    fn plateau_trace_matches_hand_simulation() {
        let mut losses = vec![5.0];
        losses.extend(std::iter::repeat_n(4.0, 40));
        let (lrs, stop) = simulate_schedule(&losses, &cfg());
        assert_eq!(stop, Some(17));
        let halvings: Vec<usize> = (1..lrs.len()).filter(|&i| lrs[i] < lrs[i - 1]).collect();
        // lrs[i] is the rate during epoch i+1; a halving decided at epoch e
        // shows up from epoch e+1, i.e. index e.
        assert_eq!(halvings, vec![6, 10, 14]);
        assert_eq!(lrs[5], 1e-4);
        assert_eq!(lrs[6], 5e-5);
    }

    #[test]
    fn decreasing_losses_run_to_the_cap() {
        let losses: Vec<f64> = (0..250).map(|i| 1.0 / (i + 1) as f64).collect();
        let (lrs, stop) = simulate_schedule(&losses, &cfg());
        assert_eq!(stop, None);
        assert_eq!(lrs.len(), 200);
        assert!(lrs.iter().all(|&l| l == 1e-4));
    }

    /// Independent reference: recount from the history at every epoch.
    fn reference(losses: &[f64], c: &TrainConfig) -> (Vec<f64>, Option<usize>) {
        let mut lr = c.learning_rate;
        let mut lrs = vec![];
        let mut best = f64::INFINITY;
        let mut last_improve = 0usize;
        let mut last_change = 0usize;
        for (i, &l) in losses.iter().enumerate().take(c.max_epochs) {
            let e = i + 1;
            lrs.push(lr);
            if l < best {
                best = l;
                last_improve = e;
                continue;
            }
            if e - last_improve >= c.early_stop_patience {
                return (lrs, Some(e));
            }
            if e - last_improve.max(last_change) >= c.lr_halving_patience {
                lr *= c.lr_factor;
                last_change = e;
            }
        }
        (lrs, None)
    }

    proptest! {
        #[test]
        fn schedule_matches_reference(
            losses in proptest::collection::vec(0u8..6, 1..120),
            halving in 1usize..6,
            stop in 1usize..20,
        ) {
            let c = TrainConfig { lr_halving_patience: halving, early_stop_patience: stop, ..cfg() };
            let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
            let (lrs, s) = simulate_schedule(&losses, &c);
            prop_assert_eq!((lrs.clone(), s), reference(&losses, &c));
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn adam_moves_exactly_the_parameters_with_gradient() {
        let net = Network::<f32>::new(ModelKind::CoreUNet, tiny_model(), 0).unwrap();
        let mut params = net.params.clone();
        let mut grads = params.zeros_like();
        let mut adam = Adam::new(&cfg(), params.count());
        adam.apply(&mut params, &grads, 1e-4);
        assert_eq!(params, net.params);
        *grads.flat_mut(5) = 0.3;
        *grads.flat_mut(70) = -1e-6;
        let mut adam = Adam::new(&cfg(), params.count());
        adam.apply(&mut params, &grads, 1e-4);
        let before: Vec<f32> = net.params.values().collect();
        let changed: Vec<usize> = params.values().zip(&before).enumerate().filter(|(_, (a, b))| a != *b).map(|(i, _)| i).collect();
        assert_eq!(changed, vec![5, 70]);
    }

    fn tiny_model() -> CoreUNetConfig {
        CoreUNetConfig {
            levels: 2,
            base_channels: 2,
            input_lag: 2,
            height: 4,
            width: 4,
            dropout_rate: 0.5,
        }
    }

    fn samples(n: usize, salt: u64, wind: bool) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(salt);
        (0..n)
            .map(|_| {
                let precip: Vec<f32> = (0..32).map(|_| rng.random::<f32>() * 0.1).collect();
                let target = precip[16..].to_vec();
                Sample {
                    wind: wind.then(|| (0..32).map(|_| rng.random::<f32>()).collect()),
                    precip,
                    target,
                }
            })
            .collect()
    }

    fn short() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 6,
            seed: 9,
            ..cfg()
        }
    }

    #[test]
    fn training_is_deterministic_and_returns_best() {
        let (tr, va) = (samples(6, 1, true), samples(3, 2, true));
        let run = || {
            let mut net = Network::<f32>::new(ModelKind::WfUNet, tiny_model(), 4).unwrap();
            let out = train(&mut net, &tr, &va, &short(), &TrainOptions::default()).unwrap();
            (net, out)
        };
        let (net_a, a) = run();
        let (net_b, b) = run();
        assert_eq!(net_a, net_b);
        assert_eq!(a.best, b.best);
        let strip = |h: &TrainHistory| h.epochs.iter().map(|e| (e.train_loss, e.val_loss, e.lr)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_eq!(a.history.stop_reason, Some(StopReason::MaxEpochs));
        let best_val = mean_loss(&a.best, &va).unwrap();
        let min = a.history.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(best_val, min);
        assert_eq!(a.history.best_val_loss, Some(min));
    }

    #[test]
    fn halted_run_resumes_to_the_same_result() {
        let (tr, va) = (samples(5, 3, false), samples(2, 4, false));
        let fresh = || Network::<f32>::new(ModelKind::CoreUNet, tiny_model(), 2).unwrap();
        let mut whole = fresh();
        let full = train(&mut whole, &tr, &va, &short(), &TrainOptions::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            state_dir: Some(dir.path().join("state")),
            halt_after: Some(2),
        };
        let mut first = fresh();
        let partial = train(&mut first, &tr, &va, &short(), &opts).unwrap();
        assert_eq!(partial.history.epochs.len(), 2);
        assert_eq!(partial.history.stop_reason, None);
        let mut second = fresh();
        let opts = TrainOptions { halt_after: None, ..opts };
        let resumed = train(&mut second, &tr, &va, &short(), &opts).unwrap();
        assert_eq!(second, whole);
        assert_eq!(resumed.best, full.best);
        let strip = |h: &TrainHistory| h.epochs.iter().map(|e| (e.train_loss, e.val_loss, e.lr)).collect::<Vec<_>>();
        assert_eq!(strip(&resumed.history), strip(&full.history));

        let changed = TrainConfig { seed: 10, ..short() };
        assert!(matches!(train(&mut fresh(), &tr, &va, &changed, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostics() {
        let mut tr = samples(2, 5, false);
        tr[1].precip[0] = f32::NAN;
        let va = samples(1, 6, false);
        let mut net = Network::<f32>::new(ModelKind::CoreUNet, tiny_model(), 0).unwrap();
        let c = TrainConfig { batch_size: 1, ..short() };
        match train(&mut net, &tr, &va, &c, &TrainOptions::default()) {
            Err(e @ Error::NonFinite { epoch: 1, .. }) => assert!(e.to_string().contains("epoch 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_sets_and_bad_configs_are_rejected() {
        let mut net = Network::<f32>::new(ModelKind::CoreUNet, tiny_model(), 0).unwrap();
        let s = samples(2, 1, false);
        assert!(train(&mut net, &s, &[], &short(), &TrainOptions::default()).is_err());
        let bad = TrainConfig { batch_size: 0, ..short() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { learning_rate: 0.0, ..short() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                lr: 1e-4,
                seconds: 1.0,
            }],
            stop_reason: Some(StopReason::MaxEpochs),
            best_epoch: 1,
            best_val_loss: Some(0.25),
        };
        let csv = h.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("epoch,train_loss,val_loss,lr,seconds\n1,"));
        assert!(serde_json::to_string(&h).unwrap().contains("\"max-epochs\""));
    }
}
