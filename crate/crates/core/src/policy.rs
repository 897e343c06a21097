//! Feed-forward control policy and its imitation trainer.
//!
//! The policy is a fixed-topology multilayer perceptron, `F -> 120 -> 120 ->
//! 120 -> 4`, with ReLU hidden units and a sigmoid output layer, so raw
//! outputs are throttles in `(0, 1)^4`. An affine output stage maps throttle
//! to rotor RPM. Inputs are standardized with per-feature statistics frozen
//! from the training split.
//!
//! Training is plain minibatch Adam on the mean squared error against optimal
//! controls, with a reduce-on-plateau learning-rate schedule. Everything is
//! seed-deterministic: initialization, epoch shuffles, and therefore the whole
//! loss history.

use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlInput, QuadState};
use crate::io::{self, ArtifactHeader};

/// Count of flight-state features shared by every input variant.
pub const BASE_FEATURES: usize = 19;
/// Hidden-layer width.
pub const HIDDEN_WIDTH: usize = 120;
/// Output dimension (one throttle per rotor).
pub const OUTPUTS: usize = 4;

/// Errors from policy construction, inference, training, or persistence.
#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("feature arity mismatch: network expects {expected}, got {found}")]
    ArityMismatch { expected: usize, found: usize },
    #[error("label width {found} does not match the {OUTPUTS} rotor outputs")]
    LabelWidth { found: usize },
    #[error("feature rows {features} and label rows {labels} differ")]
    RowMismatch { features: usize, labels: usize },
    #[error("training set is empty")]
    EmptySet,
    #[error("invalid train config: {reason}")]
    InvalidConfig { reason: String },
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid input variant: {reason}")]
    InvalidVariant { reason: String },
    #[error(transparent)]
    Io(#[from] io::IoError),
}

/// Input layout of a policy: which quantities feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    rename_all = "snake_case",
    tag = "input_variant",
    content = "waypoint_arity"
)]
pub enum Variant {
    /// The 19 flight-state features only.
    Base,
    /// Flight state plus the believed rotor-speed ceiling in RPM; the RPM
    /// output mapping also uses that ceiling instead of the trained one.
    AdaptiveLimit,
    /// Flight state plus 1-3 values describing the geometry of the upcoming
    /// waypoint pair.
    WaypointRelative(usize),
}

impl Variant {
    /// Total network input width.
    pub fn arity(&self) -> usize {
        BASE_FEATURES + self.extension_len()
    }

    /// Count of inputs appended after the 19 flight-state features.
    pub fn extension_len(&self) -> usize {
        match self {
            Variant::Base => 0,
            Variant::AdaptiveLimit => 1,
            Variant::WaypointRelative(k) => *k,
        }
    }

    /// Rejects waypoint arities outside the supported 1-3 range.
    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            Variant::WaypointRelative(k) if !(1..=3).contains(k) => {
                Err(PolicyError::InvalidVariant {
                    reason: format!("waypoint arity {k} outside 1..=3"),
                })
            }
            _ => Ok(()),
        }
    }
}

/// Builds the network input vector for one observation.
///
/// The 19 flight-state features are the position relative to the target
/// waypoint, velocity, Euler angles, body rates, the four rotor speeds, and
/// the external-moment estimate, in the state's own frame. `extension` holds
/// the variant-specific extra inputs (empty for [`Variant::Base`], the
/// believed rotor ceiling in RPM for [`Variant::AdaptiveLimit`], waypoint
/// geometry values for [`Variant::WaypointRelative`]).
pub fn assemble_features(
    variant: Variant,
    state: &QuadState,
    target: &Vector3<f64>,
    extension: &[f64],
) -> Result<Vec<f64>, PolicyError> {
    if extension.len() != variant.extension_len() {
        return Err(PolicyError::ArityMismatch {
            expected: variant.arity(),
            found: BASE_FEATURES + extension.len(),
        });
    }
    let mut f = Vec::with_capacity(variant.arity());
    f.extend((state.position - target).iter());
    f.extend(state.velocity.iter());
    f.extend(state.attitude.iter());
    f.extend(state.body_rates.iter());
    f.extend(state.rotor_speeds.iter());
    f.extend(state.moment_disturbance.iter());
    f.extend_from_slice(extension);
    Ok(f)
}

/// One dense layer, `w` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: Array2<f64>,
    b: Array1<f64>,
}

/// The trained policy: network weights, input normalization, and the RPM
/// output mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    variant: Variant,
    layers: Vec<Layer>,
    norm_mean: Array1<f64>,
    norm_std: Array1<f64>,
    /// Idle rotor speed for the RPM mapping, RPM.
    pub omega_min: f64,
    /// Full-throttle rotor speed for the RPM mapping, RPM.
    pub omega_max: f64,
    /// Free-form provenance carried through serialization.
    pub provenance: Option<serde_json::Value>,
}

/// Optimizer and schedule settings for [`PolicyNet::train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate on a validation plateau.
    pub plateau_factor: f64,
    /// Epochs without validation improvement before the rate drops.
    pub plateau_patience: usize,
    /// Absolute validation-loss improvement that resets the plateau counter.
    pub plateau_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            plateau_factor: 0.9,
            plateau_patience: 6,
            plateau_threshold: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks positivity and range invariants.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |reason: String| Err(PolicyError::InvalidConfig { reason });
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor {} outside (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            return bad("plateau patience must be positive".into());
        }
        if !(self.plateau_threshold >= 0.0) {
            return bad(format!("plateau threshold {} must be >= 0", self.plateau_threshold));
        }
        Ok(())
    }
}

/// Feature/label pairs ready for the optimizer: `features` is `n x arity`,
/// `labels` is `n x 4` of throttles in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub features: Array2<f64>,
    pub labels: Array2<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, arity: usize) -> Result<(), PolicyError> {
        if self.features.ncols() != arity {
            return Err(PolicyError::ArityMismatch {
                expected: arity,
                found: self.features.ncols(),
            });
        }
        if self.labels.ncols() != OUTPUTS {
            return Err(PolicyError::LabelWidth { found: self.labels.ncols() });
        }
        if self.features.nrows() != self.labels.nrows() {
            return Err(PolicyError::RowMismatch {
                features: self.features.nrows(),
                labels: self.labels.nrows(),
            });
        }
        if self.is_empty() {
            return Err(PolicyError::EmptySet);
        }
        Ok(())
    }
}

/// Per-epoch history returned by [`PolicyNet::train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch's minibatch passes.
    pub train_loss: Vec<f64>,
    /// Full-set validation loss after each epoch.
    pub val_loss: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub learning_rate: Vec<f64>,
    /// Validation loss after the final epoch.
    pub final_val_loss: f64,
}

/// RMS control error implied by an MSE loss, as a percentage of the unit
/// throttle range: `100 sqrt(loss)`.
pub fn control_error_pct(loss: f64) -> f64 {
    100.0 * loss.sqrt()
}

/// Result of comparing backpropagated gradients against finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest relative deviation over the probed parameters.
    pub max_relative_error: f64,
    /// Euclidean norm of the full analytic gradient.
    pub analytic_norm: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl PolicyNet {
    /// Seed-deterministic network with uniform fan-in-scaled weights
    /// (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases, and identity
    /// normalization. `omega_min`/`omega_max` fix the RPM output mapping.
    pub fn new_seeded(
        variant: Variant,
        omega_min: f64,
        omega_max: f64,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        variant.validate()?;
        if !(omega_max > omega_min) || !(omega_min >= 0.0) {
            return Err(PolicyError::InvalidConfig {
                reason: format!("rotor limits [{omega_min}, {omega_max}] not increasing"),
            });
        }
        let sizes = layer_sizes(variant);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-limit..limit)
            });
            layers.push(Layer { w, b: Array1::zeros(fan_out) });
        }
        Ok(Self {
            variant,
            layers,
            norm_mean: Array1::zeros(variant.arity()),
            norm_std: Array1::ones(variant.arity()),
            omega_min,
            omega_max,
            provenance: None,
        })
    }

    /// Policy that ignores its inputs and always outputs `u`: zero weights
    /// with the final biases at the logits of `u`. Useful as a simulation
    /// baseline, e.g. exact hover at `u = [0.5; 4]`.
    pub fn constant_output(
        variant: Variant,
        omega_min: f64,
        omega_max: f64,
        u: [f64; 4],
    ) -> Result<Self, PolicyError> {
        if u.iter().any(|v| !(0.0 < *v && *v < 1.0)) {
            return Err(PolicyError::InvalidConfig {
                reason: format!("constant output {u:?} must lie strictly inside (0, 1)"),
            });
        }
        let mut net = Self::new_seeded(variant, omega_min, omega_max, 0)?;
        for layer in &mut net.layers {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        let out = net.layers.last_mut().expect("network has layers");
        for (b, v) in out.b.iter_mut().zip(u) {
            *b = (v / (1.0 - v)).ln();
        }
        Ok(net)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Network input width.
    pub fn arity(&self) -> usize {
        self.variant.arity()
    }

    /// Per-feature standardization statistics, (mean, std).
    pub fn normalization(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.norm_mean, &self.norm_std)
    }

    /// Installs standardization statistics (stds floored away from zero).
    pub fn set_normalization(
        &mut self,
        mean: Array1<f64>,
        std: Array1<f64>,
    ) -> Result<(), PolicyError> {
        if mean.len() != self.arity() || std.len() != self.arity() {
            return Err(PolicyError::ArityMismatch {
                expected: self.arity(),
                found: mean.len(),
            });
        }
        self.norm_mean = mean;
        self.norm_std = std.mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Ok(())
    }

    /// Evaluates the network on one feature vector, yielding throttles in
    /// `(0, 1)^4`.
    pub fn forward(&self, features: &[f64]) -> Result<ControlInput, PolicyError> {
        if features.len() != self.arity() {
            return Err(PolicyError::ArityMismatch {
                expected: self.arity(),
                found: features.len(),
            });
        }
        let mut a: Array1<f64> = Array1::from_iter(
            features
                .iter()
                .zip(self.norm_mean.iter())
                .zip(self.norm_std.iter())
                .map(|((x, m), s)| (x - m) / s),
        );
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.w.dot(&a) + &layer.b;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            } else {
                z.mapv_inplace(sigmoid);
            }
            a = z;
        }
        Ok(ControlInput::new(a[0], a[1], a[2], a[3]))
    }

    /// Network output in `[0, 1]` together with its rotor speed command in
    /// RPM: `(ceiling - omega_min) u + omega_min`. The ceiling is the trained
    /// `omega_max`, except for [`Variant::AdaptiveLimit`] nets where the
    /// believed ceiling supplied as the last feature is used instead.
    pub fn command(&self, features: &[f64]) -> Result<([f64; 4], [f64; 4]), PolicyError> {
        let u = self.forward(features)?.as_array();
        let ceiling = match self.variant {
            Variant::AdaptiveLimit => features[self.arity() - 1],
            _ => self.omega_max,
        };
        let span = ceiling - self.omega_min;
        Ok((u, std::array::from_fn(|i| self.omega_min + span * u[i])))
    }

    /// Rotor speed commands in RPM; see [`PolicyNet::command`].
    pub fn command_rpm(&self, features: &[f64]) -> Result<[f64; 4], PolicyError> {
        Ok(self.command(features)?.1)
    }

    /// Mean squared error of the network over a whole set.
    pub fn evaluate_loss(&self, set: &TrainingSet) -> Result<f64, PolicyError> {
        set.validate(self.arity())?;
        let y = self.forward_batch(&set.features);
        let diff = &y - &set.labels;
        Ok(diff.mapv(|d| d * d).sum() / (diff.len() as f64))
    }

    /// Minibatch Adam on the MSE against the labels, with per-epoch derived
    /// shuffles and a reduce-on-plateau schedule driven by the validation
    /// loss. Normalization statistics are (re)computed from `train` and
    /// frozen into the network before the first step.
    pub fn train(
        &mut self,
        train: &TrainingSet,
        val: &TrainingSet,
        config: &TrainConfig,
    ) -> Result<TrainReport, PolicyError> {
        config.validate()?;
        train.validate(self.arity())?;
        val.validate(self.arity())?;

        let (mean, std) = standardization(&train.features);
        self.set_normalization(mean, std)?;

        let n = train.len();
        let mut adam: Vec<AdamSlot> = self.layers.iter().map(AdamSlot::like).collect();
        let mut step = 0u64;
        let mut lr = config.learning_rate;
        let mut best_val = f64::INFINITY;
        let mut stale_epochs = 0usize;
        let mut report = TrainReport {
            train_loss: Vec::with_capacity(config.epochs),
            val_loss: Vec::with_capacity(config.epochs),
            learning_rate: Vec::with_capacity(config.epochs),
            final_val_loss: f64::NAN,
        };
        let mut order: Vec<usize> = (0..n).collect();

        for epoch in 0..config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
            order.shuffle(&mut rng);
            let mut sse = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let x = train.features.select(Axis(0), chunk);
                let t = train.labels.select(Axis(0), chunk);
                let (acts, y) = self.forward_cached(&x);
                let diff = &y - &t;
                sse += diff.mapv(|d| d * d).sum();
                let grads = self.backward(&acts, &y, &t);
                step += 1;
                self.adam_step(&grads, &mut adam, lr, step);
            }
            let train_loss = sse / ((n * OUTPUTS) as f64);
            let val_loss = self.evaluate_loss(val)?;
            if !train_loss.is_finite() || !val_loss.is_finite() {
                return Err(PolicyError::Diverged { epoch });
            }
            report.train_loss.push(train_loss);
            report.val_loss.push(val_loss);
            report.learning_rate.push(lr);
            if val_loss < best_val - config.plateau_threshold {
                best_val = val_loss;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= config.plateau_patience {
                    lr *= config.plateau_factor;
                    stale_epochs = 0;
                }
            }
        }
        report.final_val_loss = *report.val_loss.last().expect("at least one epoch");
        Ok(report)
    }

    /// Compares the backpropagated gradient against central finite
    /// differences (step 1e-5) on a deterministic spread of at most 200
    /// parameters, and reports the full analytic gradient norm.
    pub fn gradient_check(&self, set: &TrainingSet) -> Result<GradientCheck, PolicyError> {
        set.validate(self.arity())?;
        let (acts, y) = self.forward_cached(&set.features);
        let grads = self.backward(&acts, &y, &set.labels);
        let flat: Vec<f64> = grads
            .iter()
            .flat_map(|g| g.w.iter().chain(g.b.iter()).copied().collect::<Vec<_>>())
            .collect();
        let analytic_norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();

        let total = flat.len();
        let stride = (total / 200).max(1);
        let h = 1e-5;
        let mut probe = self.clone();
        let mut max_rel: f64 = 0.0;
        for idx in (0..total).step_by(stride) {
            let base = probe.param(idx);
            probe.set_param(idx, base + h);
            let up = probe.evaluate_loss(set)?;
            probe.set_param(idx, base - h);
            let down = probe.evaluate_loss(set)?;
            probe.set_param(idx, base);
            let fd = (up - down) / (2.0 * h);
            let an = flat[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        Ok(GradientCheck { max_relative_error: max_rel, analytic_norm })
    }

    /// Writes the network as a versioned container file.
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let header = PolicyHeader {
            variant: self.variant,
            layer_sizes: layer_sizes(self.variant),
            omega_min: self.omega_min,
            omega_max: self.omega_max,
            provenance: self.provenance.clone(),
        };
        let mut payload =
            Vec::with_capacity(2 * self.arity() + self.layers.iter().map(Layer::len).sum::<usize>());
        payload.extend(self.norm_mean.iter());
        payload.extend(self.norm_std.iter());
        for layer in &self.layers {
            payload.extend(layer.w.iter());
            payload.extend(layer.b.iter());
        }
        io::write_container(path, &header, &payload)?;
        Ok(())
    }

    /// Reads a network written by [`PolicyNet::save`]; the round trip is
    /// lossless (bitwise-equal parameters and outputs).
    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let (header, payload): (PolicyHeader, Vec<f64>) = io::read_container(path)?;
        header.variant.validate()?;
        let sizes = layer_sizes(header.variant);
        if header.layer_sizes != sizes {
            return Err(PolicyError::InvalidVariant {
                reason: format!(
                    "layer sizes {:?} do not match the fixed topology {:?}",
                    header.layer_sizes, sizes
                ),
            });
        }
        let arity = header.variant.arity();
        let expected: usize = 2 * arity
            + sizes.windows(2).map(|p| p[1] * p[0] + p[1]).sum::<usize>();
        if payload.len() != expected {
            return Err(PolicyError::InvalidVariant {
                reason: format!("payload length {} != expected {expected}", payload.len()),
            });
        }
        let mut at = 0usize;
        let mut take = |n: usize| {
            let slice = payload[at..at + n].to_vec();
            at += n;
            slice
        };
        let norm_mean = Array1::from_vec(take(arity));
        let norm_std = Array1::from_vec(take(arity));
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = Array2::from_shape_vec((fan_out, fan_in), take(fan_out * fan_in))
                .expect("length checked above");
            let b = Array1::from_vec(take(fan_out));
            layers.push(Layer { w, b });
        }
        Ok(Self {
            variant: header.variant,
            layers,
            norm_mean,
            norm_std,
            omega_min: header.omega_min,
            omega_max: header.omega_max,
            provenance: header.provenance,
        })
    }

    /// Batched forward pass (rows are samples).
    fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).1
    }

    /// Forward pass keeping each layer's input activation for backprop.
    fn forward_cached(&self, x: &Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut a = (x - &self.norm_mean) / &self.norm_std;
        let mut acts = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w.t()) + &layer.b;
            acts.push(a);
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            } else {
                z.mapv_inplace(sigmoid);
            }
            a = z;
        }
        (acts, a)
    }

    /// Gradient of the mean squared error with respect to every parameter.
    fn backward(&self, acts: &[Array2<f64>], y: &Array2<f64>, t: &Array2<f64>) -> Vec<Gradients> {
        let scale = 2.0 / (y.len() as f64);
        // Output stage: d loss / d z = scale (y - t) y (1 - y).
        let mut delta = (y - t) * y * (y.mapv(|v| 1.0 - v)) * scale;
        let mut grads = vec![
            Gradients {
                w: Array2::zeros((0, 0)),
                b: Array1::zeros(0)
            };
            self.layers.len()
        ];
        for l in (0..self.layers.len()).rev() {
            grads[l].w = delta.t().dot(&acts[l]);
            grads[l].b = delta.sum_axis(Axis(0));
            if l > 0 {
                // acts[l] is the ReLU output feeding layer l, so its sign
                // pattern is exactly the ReLU derivative mask.
                let mask = acts[l].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                delta = delta.dot(&self.layers[l].w) * mask;
            }
        }
        grads
    }

    fn adam_step(&mut self, grads: &[Gradients], adam: &mut [AdamSlot], lr: f64, step: u64) {
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for ((layer, g), slot) in self.layers.iter_mut().zip(grads).zip(adam.iter_mut()) {
            slot.mw.zip_mut_with(&g.w, |m, &gv| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gv);
            slot.vw.zip_mut_with(&g.w, |v, &gv| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gv * gv);
            ndarray::Zip::from(&mut layer.w)
                .and(&slot.mw)
                .and(&slot.vw)
                .for_each(|w, &m, &v| *w -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS));
            slot.mb.zip_mut_with(&g.b, |m, &gv| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gv);
            slot.vb.zip_mut_with(&g.b, |v, &gv| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gv * gv);
            ndarray::Zip::from(&mut layer.b)
                .and(&slot.mb)
                .and(&slot.vb)
                .for_each(|b, &m, &v| *b -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS));
        }
    }

    /// Total parameter count (weights and biases).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    fn param(&self, idx: usize) -> f64 {
        let (l, off) = self.locate(idx);
        let layer = &self.layers[l];
        if off < layer.w.len() {
            layer.w.as_slice().expect("standard layout")[off]
        } else {
            layer.b[off - layer.w.len()]
        }
    }

    fn set_param(&mut self, idx: usize, value: f64) {
        let (l, off) = self.locate(idx);
        let layer = &mut self.layers[l];
        if off < layer.w.len() {
            layer.w.as_slice_mut().expect("standard layout")[off] = value;
        } else {
            let w_len = layer.w.len();
            layer.b[off - w_len] = value;
        }
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            if idx < layer.len() {
                return (l, idx);
            }
            idx -= layer.len();
        }
        panic!("parameter index out of range");
    }
}

impl Layer {
    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Debug, Clone)]
struct Gradients {
    w: Array2<f64>,
    b: Array1<f64>,
}

struct AdamSlot {
    mw: Array2<f64>,
    vw: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
}

impl AdamSlot {
    fn like(layer: &Layer) -> Self {
        Self {
            mw: Array2::zeros(layer.w.raw_dim()),
            vw: Array2::zeros(layer.w.raw_dim()),
            mb: Array1::zeros(layer.b.raw_dim()),
            vb: Array1::zeros(layer.b.raw_dim()),
        }
    }
}

/// Fixed topology for a variant: input, three hidden layers, output.
fn layer_sizes(variant: Variant) -> Vec<usize> {
    vec![variant.arity(), HIDDEN_WIDTH, HIDDEN_WIDTH, HIDDEN_WIDTH, OUTPUTS]
}

/// Per-column mean and standard deviation (population form).
pub fn standardization(features: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = features.nrows().max(1) as f64;
    let mean = features.sum_axis(Axis(0)) / n;
    let mut var = Array1::zeros(features.ncols());
    for row in features.rows() {
        for (i, x) in row.iter().enumerate() {
            let d = x - mean[i];
            var[i] += d * d;
        }
    }
    let std = var.mapv(|v: f64| (v / n).sqrt());
    (mean, std)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Splits one run seed into independent per-purpose streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finalizer over the combined words; avalanche keeps nearby
    // stream indices statistically independent.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    #[serde(flatten)]
    variant: Variant,
    layer_sizes: Vec<usize>,
    omega_min: f64,
    omega_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

impl ArtifactHeader for PolicyHeader {
    const KIND: &'static str = "policy";
}
