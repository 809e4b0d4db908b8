//! Feed-forward ReLU networks emulating one symbol interval of the harvester:
//! `N1(v0, x) ≈ v_next` and `N2(v0, x) ≈ avg_power`, trained with Adam on a
//! mean-absolute-percentage loss. The rectifier is blind to the carrier sign,
//! so the networks see `|x|`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eh_circuit::{Rectifier, Sample};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    NextState,
    Reward,
}

impl Target {
    pub fn of(self, s: &Sample) -> f64 {
        match self {
            Target::NextState => s.v_next,
            Target::Reward => s.avg_power,
        }
    }

    /// Denominator floor of the percentage loss.
    pub fn floor(self) -> f64 {
        match self {
            Target::NextState => 1e-6,
            Target::Reward => 1e-9,
        }
    }
}

/// Maps fit on the training split: z-scored inputs, min-max output. With
/// `log_floor` set, the output range is fit on `ln(max(y, log_floor))` and
/// the network predicts the logarithm of the target. With `log_input` set,
/// each input `u` enters as `ln(u + log_input)` before z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub in_mean: [f64; 2],
    pub in_std: [f64; 2],
    pub out_min: f64,
    pub out_max: f64,
    #[serde(default)]
    pub log_floor: Option<f64>,
    #[serde(default)]
    pub log_input: Option<f64>,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            in_mean: [0.0; 2],
            in_std: [1.0; 2],
            out_min: 0.0,
            out_max: 1.0,
            log_floor: None,
            log_input: None,
        }
    }

    pub fn fit(rows: &[Sample], target: Target, log_output: bool) -> Self {
        let n = rows.len().max(1) as f64;
        let log_input = log_output.then_some(Target::NextState.floor());
        let cols = [|s: &Sample| s.v0, |s: &Sample| s.x_eh.abs()];
        let mut in_mean = [0.0; 2];
        let mut in_std = [1.0; 2];
        for (j, col) in cols.iter().enumerate() {
            let feature = |s: &Sample| input_feature(log_input, col(s));
            let mean = rows.iter().map(feature).sum::<f64>() / n;
            let var = rows.iter().map(|s| (feature(s) - mean).powi(2)).sum::<f64>() / n;
            in_mean[j] = mean;
            in_std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let floor = target.floor();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in rows {
            let y = if log_output { target.of(s).max(floor).ln() } else { target.of(s) };
            lo = lo.min(y);
            hi = hi.max(y);
        }
        if !(hi > lo) {
            hi = lo + 1.0;
        }
        Self {
            in_mean,
            in_std,
            out_min: lo,
            out_max: hi,
            log_floor: log_output.then_some(floor),
            log_input,
        }
    }

    fn input(&self, v0: f64, x: f64) -> [f64; 2] {
        [
            (input_feature(self.log_input, v0) - self.in_mean[0]) / self.in_std[0],
            (input_feature(self.log_input, x.abs()) - self.in_mean[1]) / self.in_std[1],
        ]
    }

    fn output(&self, o: f64) -> f64 {
        let y = self.out_min + (self.out_max - self.out_min) * o;
        match self.log_floor {
            Some(_) => y.exp(),
            None => y,
        }
    }

    /// Inverse of `output`.
    fn normalized_target(&self, t: f64) -> f64 {
        let y = match self.log_floor {
            Some(f) => t.max(f).ln(),
            None => t,
        };
        (y - self.out_min) / self.output_scale()
    }

    /// `d output / d o` at output value `y`.
    fn output_slope(&self, y: f64) -> f64 {
        match self.log_floor {
            Some(_) => self.output_scale() * y,
            None => self.output_scale(),
        }
    }

    fn output_scale(&self) -> f64 {
        self.out_max - self.out_min
    }
}

fn input_feature(log_input: Option<f64>, u: f64) -> f64 {
    match log_input {
        Some(f) => (u.max(0.0) + f).ln(),
        None => u,
    }
}

/// Dense layer, `w` row-major with shape `rows × cols` (outputs × inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            out.push(self.b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// Hidden widths; input width is 2 and output width 1.
    pub hidden: Vec<usize>,
    pub layers: Vec<Layer>,
    pub norm: Normalization,
}

impl MlpParams {
    pub fn zeros(hidden: &[usize], norm: Normalization) -> Self {
        let mut widths = vec![2];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect();
        Self {
            hidden: hidden.to_vec(),
            layers,
            norm,
        }
    }

    /// Uniform fan-in scaled initialization, `U(±√(6/fan_in))`, zero biases.
    pub fn init<R: Rng>(hidden: &[usize], norm: Normalization, rng: &mut R) -> Self {
        let mut m = Self::zeros(hidden, norm);
        for layer in &mut m.layers {
            let bound = (6.0 / layer.cols as f64).sqrt();
            for w in &mut layer.w {
                *w = rng.gen_range(-bound..bound);
            }
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.hidden.len() + 1 {
            return Err(Error::invalid("layer count does not match architecture"));
        }
        let mut width = 2;
        for (i, l) in self.layers.iter().enumerate() {
            let expect = self.hidden.get(i).copied().unwrap_or(1);
            if l.cols != width || l.rows != expect || l.w.len() != l.rows * l.cols || l.b.len() != l.rows {
                return Err(Error::invalid(format!("layer {i} has incompatible dimensions")));
            }
            width = l.rows;
        }
        let n = &self.norm;
        let consts = [n.in_mean[0], n.in_mean[1], n.in_std[0], n.in_std[1], n.out_min, n.out_max];
        if consts.iter().any(|v| !v.is_finite())
            || n.in_std.contains(&0.0)
            || [n.log_floor, n.log_input]
                .iter()
                .flatten()
                .any(|f| !(*f > 0.0 && f.is_finite()))
        {
            return Err(Error::invalid("normalization constants must be finite"));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    #[cfg(test)]
    fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            if k < l.w.len() {
                return &mut l.w[k];
            }
            k -= l.w.len();
            if k < l.b.len() {
                return &mut l.b[k];
            }
            k -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    fn set_flat(&mut self, p: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
    }

    /// Normalized-space output.
    fn forward_normalized(&self, v0: f64, x: f64) -> f64 {
        const STACK: usize = 32;
        let width = self.layers.iter().map(|l| l.rows.max(l.cols)).max().unwrap_or(2);
        if width <= STACK {
            self.forward_into(v0, x, &mut [0.0; STACK], &mut [0.0; STACK])
        } else {
            self.forward_into(v0, x, &mut vec![0.0; width], &mut vec![0.0; width])
        }
    }

    fn forward_into(&self, v0: f64, x: f64, cur: &mut [f64], next: &mut [f64]) -> f64 {
        cur[..2].copy_from_slice(&self.norm.input(v0, x));
        let last = self.layers.len() - 1;
        let (mut cur, mut next) = (cur, next);
        for (i, l) in self.layers.iter().enumerate() {
            for r in 0..l.rows {
                let row = &l.w[r * l.cols..(r + 1) * l.cols];
                let z = l.b[r] + row.iter().zip(&cur[..l.cols]).map(|(a, b)| a * b).sum::<f64>();
                next[r] = if i < last { z.max(0.0) } else { z };
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }
}

pub fn mlp_forward(m: &MlpParams, v0: f64, x_eh: f64) -> Result<f64> {
    if !(v0.is_finite() && x_eh.is_finite()) {
        return Err(Error::invalid("network inputs must be finite"));
    }
    let y = m.norm.output(m.forward_normalized(v0, x_eh));
    if !y.is_finite() {
        return Err(Error::numeric("non-finite network output"));
    }
    Ok(y)
}

/// `(100/N) Σ |pred − target| / max(|target|, floor)`.
pub fn mape_floored(pred: &[f64], target: &[f64], floor: f64) -> f64 {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs() / t.abs().max(floor))
        .sum();
    100.0 * s / pred.len() as f64
}

pub fn mape(pred: &[f64], target: &[f64]) -> f64 {
    mape_floored(pred, target, f64::MIN_POSITIVE)
}

/// Loss and its gradient with respect to every parameter (flattened in
/// layer order, weights before biases) over a set of rows.
#[cfg(test)]
fn loss_and_grad(m: &MlpParams, rows: &[&Sample], target: Target, grad: &mut [f64]) -> f64 {
    loss_and_grad_with(m, rows, target, false, grad)
}

/// With `squared`, the loss is the mean squared error in normalized output
/// units instead of the percentage loss.
fn loss_and_grad_with(m: &MlpParams, rows: &[&Sample], target: Target, squared: bool, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = rows.len() as f64;
    let floor = target.floor();
    let nl = m.layers.len();
    let mut acts: Vec<Vec<f64>> = vec![Vec::new(); nl + 1];
    let mut offsets = Vec::with_capacity(nl);
    let mut k = 0;
    for l in &m.layers {
        offsets.push(k);
        k += l.w.len() + l.b.len();
    }
    let mut loss = 0.0;
    let mut delta = Vec::new();
    let mut prev_delta = Vec::new();
    for s in rows {
        acts[0].clear();
        acts[0].extend_from_slice(&m.norm.input(s.v0, s.x_eh));
        for (i, l) in m.layers.iter().enumerate() {
            let (lo, hi) = acts.split_at_mut(i + 1);
            l.apply(&lo[i], &mut hi[0]);
            if i + 1 < nl {
                for v in &mut hi[0] {
                    *v = v.max(0.0);
                }
            }
        }
        let y = m.norm.output(acts[nl][0]);
        let t = target.of(s);
        let denom = t.abs().max(floor);
        let d_out = if squared {
            let r = acts[nl][0] - m.norm.normalized_target(t);
            loss += r * r / 100.0;
            2.0 * r / n
        } else {
            loss += (y - t).abs() / denom;
            let sign = if y > t {
                1.0
            } else if y < t {
                -1.0
            } else {
                0.0
            };
            sign * 100.0 * m.norm.output_slope(y) / (n * denom)
        };
        delta.clear();
        delta.push(d_out);
        for i in (0..nl).rev() {
            let l = &m.layers[i];
            let input = &acts[i];
            let off = offsets[i];
            for r in 0..l.rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + r * l.cols..off + (r + 1) * l.cols];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[off + l.w.len() + r] += d;
            }
            if i == 0 {
                break;
            }
            prev_delta.clear();
            prev_delta.resize(l.cols, 0.0);
            for r in 0..l.rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                for c in 0..l.cols {
                    prev_delta[c] += d * l.w[r * l.cols + c];
                }
            }
            for (pd, a) in prev_delta.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *pd = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut prev_delta);
        }
    }
    100.0 * loss / n
}

pub fn dataset_mape(m: &MlpParams, rows: &[Sample], target: Target) -> f64 {
    let pred: Vec<f64> = rows
        .iter()
        .map(|s| m.norm.output(m.forward_normalized(s.v0, s.x_eh)))
        .collect();
    let truth: Vec<f64> = rows.iter().map(|s| target.of(s)).collect();
    mape_floored(&pred, &truth, target.floor())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Initial epochs fit on squared error before switching to the
    /// percentage loss.
    pub warmup_epochs: usize,
    /// Consecutive rolled-back epochs before the learning rate halves.
    pub stall_epochs: usize,
    /// Fit the logarithm of the target.
    pub log_output: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 5,
            hidden_units: 7,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 1000,
            patience: 100,
            warmup_epochs: 100,
            stall_epochs: 3,
            log_output: true,
            n_train: 11000,
            n_val: 3000,
            n_test: 750,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.hidden_units == 0 {
            return Err(Error::invalid("batch size, epochs and hidden units must be positive"));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::invalid("training and validation splits must be non-empty"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_units; self.hidden_layers]
    }

    pub fn total_rows(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_mape: f64,
    pub val_mape: f64,
    pub test_mape: f64,
    pub learning_rate: f64,
    /// The epoch raised the training loss and was rolled back.
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub target: Target,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub train_mape: f64,
    pub val_mape: f64,
    pub test_mape: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    grad: Vec<f64>,
}

impl Adam {
    fn new(np: usize) -> Self {
        Self {
            m: vec![0.0; np],
            v: vec![0.0; np],
            t: 0,
            grad: vec![0.0; np],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn epoch(
        &mut self,
        model: &mut MlpParams,
        rows: &[Sample],
        order: &[usize],
        target: Target,
        squared: bool,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        let mut batch: Vec<&Sample> = Vec::with_capacity(cfg.batch_size);
        let mut p = model.flat();
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &rows[i]));
            loss_and_grad_with(model, &batch, target, squared, &mut self.grad);
            self.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(self.t);
            let bc2 = 1.0 - cfg.beta2.powi(self.t);
            for (k, pk) in p.iter_mut().enumerate() {
                let g = self.grad[k];
                self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
                self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
                *pk -= lr * (self.m[k] / bc1) / ((self.v[k] / bc2).sqrt() + cfg.epsilon);
            }
            model.set_flat(&p);
        }
    }
}

/// Mini-batch Adam on the percentage loss. Rows are split in order into
/// train/validation/test. An epoch that raises the full training loss is
/// rolled back; after `stall_epochs` consecutive rolled-back epochs the learning
/// rate halves. Returns the parameters with the best validation loss.
pub fn train(data: &[Sample], target: Target, cfg: &TrainConfig) -> Result<(MlpParams, TrainReport)> {
    cfg.validate()?;
    if data.len() < cfg.total_rows() {
        return Err(Error::invalid(format!(
            "dataset has {} rows, split needs {}",
            data.len(),
            cfg.total_rows()
        )));
    }
    let (train_rows, rest) = data.split_at(cfg.n_train);
    let (val_rows, rest) = rest.split_at(cfg.n_val);
    let test_rows = &rest[..cfg.n_test];

    let mut rng = crate::rng::stream(cfg.seed, "surrogate-train");
    let norm = Normalization::fit(train_rows, target, cfg.log_output);
    let mut model = MlpParams::init(&cfg.hidden(), norm, &mut rng);
    let np = model.n_params();
    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut adam = Adam::new(np);
    for _ in 0..cfg.warmup_epochs {
        order.shuffle(&mut rng);
        adam.epoch(&mut model, train_rows, &order, target, true, lr, cfg);
    }
    if model.flat().iter().any(|v| !v.is_finite()) {
        return Err(Error::Training {
            last_finite_epoch: 0,
            reason: "warm-up diverged".into(),
        });
    }
    adam = Adam::new(np);

    let mut train_loss = dataset_mape(&model, train_rows, target);
    let mut best_val = dataset_mape(&model, val_rows, target);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut stall = 0;
    let mut since_val_best = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut last_finite = 0;

    for epoch in 1..=cfg.epochs {
        let snapshot = (model.flat(), adam.m.clone(), adam.v.clone(), adam.t);
        order.shuffle(&mut rng);
        adam.epoch(&mut model, train_rows, &order, target, false, lr, cfg);
        let p = model.flat();
        let new_train = dataset_mape(&model, train_rows, target);
        if !new_train.is_finite() || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                last_finite_epoch: last_finite,
                reason: "training loss became non-finite".into(),
            });
        }
        last_finite = epoch;
        let rejected = new_train > train_loss;
        if rejected {
            model.set_flat(&snapshot.0);
            adam.m = snapshot.1;
            adam.v = snapshot.2;
            adam.t = snapshot.3;
            stall += 1;
        } else {
            stall = 0;
            train_loss = new_train;
        }
        if stall >= cfg.stall_epochs {
            lr *= 0.5;
            stall = 0;
        }
        let val = dataset_mape(&model, val_rows, target);
        let test = dataset_mape(&model, test_rows, target);
        epochs.push(EpochReport {
            epoch,
            train_mape: train_loss,
            val_mape: val,
            test_mape: test,
            learning_rate: lr,
            rejected,
        });
        if val < best_val {
            best_val = val;
            best = model.clone();
            best_epoch = epoch;
            since_val_best = 0;
        } else {
            since_val_best += 1;
            if since_val_best >= cfg.patience || lr < cfg.learning_rate * 1e-6 {
                break;
            }
        }
    }
    let report = TrainReport {
        target,
        best_epoch,
        train_mape: dataset_mape(&best, train_rows, target),
        val_mape: best_val,
        test_mape: dataset_mape(&best, test_rows, target),
        epochs,
    };
    Ok((best, report))
}

/// The `N1`/`N2` pair for one symbol duration, with the state and reward
/// ceilings used for clamping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogatePair {
    pub version: u32,
    pub t_s: f64,
    pub v_max: f64,
    pub p_max: f64,
    pub next_state: MlpParams,
    pub reward: MlpParams,
}

impl SurrogatePair {
    /// Trains both networks on samples drawn from `rect`.
    pub fn train(rect: &Rectifier, data: &[Sample], cfg: &TrainConfig) -> Result<(Self, TrainReport, TrainReport)> {
        let (next_state, next_report) = train(data, Target::NextState, cfg)?;
        let (reward, reward_report) = train(data, Target::Reward, cfg)?;
        let pair = Self {
            version: MODEL_FORMAT_VERSION,
            t_s: rect.params().t,
            v_max: rect.v_max(),
            p_max: rect.p_max(),
            next_state,
            reward,
        };
        Ok((pair, next_report, reward_report))
    }

    pub fn predict_next_state(&self, v0: f64, x_eh: f64) -> Result<f64> {
        Ok(mlp_forward(&self.next_state, v0, x_eh)?.clamp(0.0, self.v_max))
    }

    pub fn predict_reward(&self, v0: f64, x_eh: f64) -> Result<f64> {
        Ok(mlp_forward(&self.reward, v0, x_eh)?.clamp(0.0, self.p_max))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("model file: {e}")))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_FORMAT_VERSION as u64 => {}
            Some(v) => return Err(Error::invalid(format!("unsupported model version {v}"))),
            None => return Err(Error::invalid("model file lacks a version field")),
        }
        let pair: Self = serde_json::from_value(value).map_err(|e| Error::invalid(format!("model file: {e}")))?;
        pair.next_state.validate()?;
        pair.reward.validate()?;
        Ok(pair)
    }
}
