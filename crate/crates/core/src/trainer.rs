//! Losses, Adam, bi-level training of model parameters and injection weights,
//! and early stopping.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{windows, SplitView, Splits, WindowSample};
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::model::{BoundParams, Model, ModelSpec, ParamStore};
use crate::tensor::{check_gradients, relative_error, Graph, Tensor, Var};
use crate::tokenizer::NormStats;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterMode {
    /// Differentiate through the unrolled inner SGD step.
    Exact,
    /// Treat the post-inner-step parameters as constants.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerOptimizer {
    Sgd,
    Adam,
}

impl fmt::Display for OuterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OuterMode::Exact => "exact",
            OuterMode::FirstOrder => "first-order",
        })
    }
}

impl FromStr for OuterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(OuterMode::Exact),
            "first-order" | "first_order" => Ok(OuterMode::FirstOrder),
            _ => Err(Error::Config(format!("unknown outer mode '{s}' (exact | first-order)"))),
        }
    }
}

impl fmt::Display for InnerOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InnerOptimizer::Sgd => "sgd",
            InnerOptimizer::Adam => "adam",
        })
    }
}

impl FromStr for InnerOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(InnerOptimizer::Sgd),
            "adam" => Ok(InnerOptimizer::Adam),
            _ => Err(Error::Config(format!("unknown inner optimizer '{s}' (sgd | adam)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub outer_mode: OuterMode,
    pub inner_optimizer: InnerOptimizer,
    /// Step between consecutive training windows.
    pub window_stride: usize,
    /// Step between consecutive validation/test windows.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta1: 1e-3,
            eta2: 1e-3,
            batch_size: 32,
            max_epochs: 40,
            patience: 3,
            seed: 0,
            outer_mode: OuterMode::FirstOrder,
            inner_optimizer: InnerOptimizer::Adam,
            window_stride: 1,
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.eta1 > 0.0 && self.eta1.is_finite() && self.eta2 > 0.0 && self.eta2.is_finite()) {
            return bad("learning rates must be finite and > 0");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.window_stride == 0 || self.eval_stride == 0 {
            return bad("batch_size, max_epochs and strides must be >= 1");
        }
        if self.outer_mode == OuterMode::Exact && self.inner_optimizer == InnerOptimizer::Adam {
            return Err(Error::Unsupported(
                "exact outer gradient requires the sgd inner optimizer".into(),
            ));
        }
        Ok(())
    }

    /// `(eta1, eta2)` for a 1-based epoch: halved every epoch after the first.
    pub fn rates(&self, epoch: usize) -> (f64, f64) {
        let f = 0.5f64.powi(epoch.saturating_sub(1) as i32);
        (self.eta1 * f, self.eta2 * f)
    }
}

// ---- losses -------------------------------------------------------------

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

pub fn mse(pred: &Matrix, target: &Matrix) -> Result<f64> {
    check_same("mse", pred, target)?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn mae(pred: &Matrix, target: &Matrix) -> Result<f64> {
    check_same("mae", pred, target)?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Mean squared error recorded in the graph against a constant target.
pub fn mse_graph(g: &mut Graph, pred: Var, target: &Matrix) -> Result<Var> {
    let (r, c) = g.dims(pred);
    if [r, c] != target.shape() {
        return Err(shape_err("mse", &[r, c], &target.shape()));
    }
    let y = g.constant(target);
    let d = g.sub(pred, y)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

// ---- optimizers ---------------------------------------------------------

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    debug_assert!(t >= 1);
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

/// Adam moments for every tensor of a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let z: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        for (i, g) in grads.iter().enumerate() {
            adam_step(store.get_mut(i).values_mut(), g, &mut self.m[i], &mut self.v[i], lr, self.t);
        }
    }
}

#[derive(Debug, Clone)]
pub enum InnerState {
    Sgd,
    Adam(AdamState),
}

impl InnerState {
    pub fn new(opt: InnerOptimizer, store: &ParamStore) -> Self {
        match opt {
            InnerOptimizer::Sgd => InnerState::Sgd,
            InnerOptimizer::Adam => InnerState::Adam(AdamState::new(store)),
        }
    }
}

// ---- bi-level steps -----------------------------------------------------

/// Batch loss and gradients, one graph per window. Gradient lists are empty
/// for stores that are not trainable.
pub fn batch_gradients(
    model: &Model,
    batch: &[WindowSample],
    wrt_params: bool,
    wrt_injection: bool,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let zeros = |s: &ParamStore, on: bool| -> Vec<Vec<f64>> {
        if on {
            s.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
        } else {
            Vec::new()
        }
    };
    let mut gp = zeros(&model.params, wrt_params);
    let mut gi = zeros(&model.injection, wrt_injection);
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for w in batch {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, wrt_params, wrt_injection);
        let out = model.forward_graph(&mut g, &bound, &w.x)?;
        let loss = mse_graph(&mut g, out.prediction, &w.y)?;
        total += g.scalar_value(loss)?;
        let mut wrt = Vec::new();
        if wrt_params {
            wrt.extend_from_slice(&bound.params);
        }
        if wrt_injection {
            wrt.extend_from_slice(&bound.injection);
        }
        if wrt.is_empty() {
            continue;
        }
        let grads = g.grad(loss, &wrt, false)?;
        let (p_part, i_part) = grads.split_at(if wrt_params { bound.params.len() } else { 0 });
        for (acc, v) in gp.iter_mut().zip(p_part) {
            acc.iter_mut().zip(g.value(*v)).for_each(|(a, b)| *a += scale * b);
        }
        for (acc, v) in gi.iter_mut().zip(i_part) {
            acc.iter_mut().zip(g.value(*v)).for_each(|(a, b)| *a += scale * b);
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss is {loss}")));
    }
    Ok((loss, gp, gi))
}

/// Mean batch loss of the model as it stands.
pub fn batch_loss(model: &Model, batch: &[WindowSample]) -> Result<f64> {
    batch_gradients(model, batch, false, false).map(|r| r.0)
}

/// Inner update of all non-injection parameters with the injection raws held
/// fixed. Returns the pre-step batch loss.
pub fn inner_step(model: &mut Model, state: &mut InnerState, batch: &[WindowSample], eta1: f64) -> Result<f64> {
    let (loss, grads, _) = batch_gradients(model, batch, true, false)?;
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inner-step gradient".into()));
    }
    match state {
        InnerState::Sgd => {
            for (i, g) in grads.iter().enumerate() {
                sgd_step(model.params.get_mut(i).values_mut(), g, eta1);
            }
        }
        InnerState::Adam(adam) => adam.step(&mut model.params, &grads, eta1),
    }
    Ok(loss)
}

fn graph_batch_loss(g: &mut Graph, model: &Model, bound: &BoundParams, batch: &[WindowSample]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for w in batch {
        let out = model.forward_graph(g, bound, &w.x)?;
        let l = mse_graph(g, out.prediction, &w.y)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Gradient of the post-inner-step loss with respect to the injection raws.
///
/// `model.params` must hold θ¹ (the parameters after the inner step).
/// In exact mode `theta` supplies the pre-step θ, the inner SGD step is
/// re-unrolled in the graph and the gradient includes the path through θ¹.
pub fn outer_gradient(
    model: &Model,
    theta: Option<&[Vec<f64>]>,
    batch: &[WindowSample],
    eta1: f64,
    mode: OuterMode,
) -> Result<(f64, Vec<Vec<f64>>)> {
    match mode {
        OuterMode::FirstOrder => {
            let (loss, _, gi) = batch_gradients(model, batch, false, true)?;
            Ok((loss, gi))
        }
        OuterMode::Exact => {
            let theta = theta.ok_or_else(|| {
                Error::InvalidArgument("exact outer gradient needs the pre-step parameters".into())
            })?;
            let mut pre = model.clone();
            pre.params.set_values(theta)?;
            let mut g = Graph::new();
            let bound = pre.bind(&mut g, true, true);
            let l1 = graph_batch_loss(&mut g, &pre, &bound, batch)?;
            let g_theta = g.grad(l1, &bound.params, true)?;
            let mut theta1 = Vec::with_capacity(g_theta.len());
            for (&p, &gp) in bound.params.iter().zip(&g_theta) {
                let step = g.scale(gp, eta1);
                theta1.push(g.sub(p, step)?);
            }
            let unrolled = BoundParams {
                params: theta1,
                injection: bound.injection.clone(),
            };
            let l2 = graph_batch_loss(&mut g, &pre, &unrolled, batch)?;
            let loss = g.scalar_value(l2)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("outer loss is {loss}")));
            }
            let grads = g.grad(l2, &bound.injection, false)?;
            Ok((loss, grads.iter().map(|&v| g.value(v).to_vec()).collect()))
        }
    }
}

/// Outer update: one Adam step on the injection raws. Returns the outer loss.
pub fn outer_step(
    model: &mut Model,
    adam: &mut AdamState,
    theta: Option<&[Vec<f64>]>,
    batch: &[WindowSample],
    eta1: f64,
    eta2: f64,
    mode: OuterMode,
) -> Result<f64> {
    let (loss, grads) = outer_gradient(model, theta, batch, eta1, mode)?;
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("outer-step gradient".into()));
    }
    adam.step(&mut model.injection, &grads, eta2);
    Ok(loss)
}

/// Largest relative error between autodiff and central differences of the
/// batch loss, over every model parameter and injection raw.
pub fn model_gradient_check(model: &Model, batch: &[WindowSample], h: f64) -> Result<f64> {
    let n = model.params.len();
    let mut tensors: Vec<Tensor> = model.params.tensors().iter().chain(model.injection.tensors()).cloned().collect();
    tensors.iter_mut().for_each(|t| t.set_requires_grad(true));
    check_gradients(
        |g, vars| {
            let bound = BoundParams {
                params: vars[..n].to_vec(),
                injection: vars[n..].to_vec(),
            };
            graph_batch_loss(g, model, &bound, batch)
        },
        &mut tensors,
        h,
    )
}

/// Largest relative error between the exact outer gradient and central
/// differences of (one SGD inner step, then the batch loss) in the raws.
pub fn bilevel_gradient_check(model: &Model, batch: &[WindowSample], eta1: f64, h: f64) -> Result<f64> {
    let two_stage = |raws: &[Vec<f64>]| -> Result<f64> {
        let mut m = model.clone();
        m.injection.set_values(raws)?;
        inner_step(&mut m, &mut InnerState::Sgd, batch, eta1)?;
        batch_loss(&m, batch)
    };
    let theta = model.params.values();
    let mut stepped = model.clone();
    inner_step(&mut stepped, &mut InnerState::Sgd, batch, eta1)?;
    let (_, exact) = outer_gradient(&stepped, Some(&theta), batch, eta1, OuterMode::Exact)?;
    let raws = model.injection.values();
    let mut worst: f64 = 0.0;
    for (t, grads) in exact.iter().enumerate() {
        for (j, &analytic) in grads.iter().enumerate() {
            let mut plus = raws.clone();
            plus[t][j] += h;
            let mut minus = raws.clone();
            minus[t][j] -= h;
            let fd = (two_stage(&plus)? - two_stage(&minus)?) / (2.0 * h);
            worst = worst.max(relative_error(analytic, fd));
        }
    }
    Ok(worst)
}

// ---- early stopping -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
            epoch: 0,
        }
    }

    /// Records one epoch's validation loss.
    pub fn update(&mut self, val: f64) -> StopDecision {
        self.epoch += 1;
        if val < self.best {
            self.best = val;
            self.best_epoch = self.epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

// ---- orchestration ------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub seconds: f64,
    /// Mean effective injection weights at the end of the epoch.
    pub gamma_mean: f64,
    pub xi_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub test_mse: f64,
    pub test_mae: f64,
}

impl RunMetrics {
    /// CSV trace; wall-clock times are omitted so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mse,val_mae\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.val_mse, e.val_mae);
        }
        let _ = writeln!(s, "test,{},{}", self.test_mse, self.test_mae);
        s
    }
}

/// Normalized windows over a split view.
pub fn split_windows(splits: &Splits, view: &SplitView, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<WindowSample>> {
    let data = splits.normalized(view)?;
    let ws: Vec<WindowSample> = windows(&data, view.start, lookback, horizon, stride).collect();
    Ok(ws)
}

/// `(MSE, MAE)` averaged over windows. With `norm` the forecasts and targets
/// are mapped back to the original scale first.
pub fn evaluate(model: &Model, samples: &[WindowSample], norm: Option<&NormStats>) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("no evaluation windows".into()));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for w in samples {
        let pred = model.forward(&w.x)?;
        let (p, y) = match norm {
            Some(n) => (n.invert(&pred)?, n.invert(&w.y)?),
            None => (pred, w.y.clone()),
        };
        se += mse(&p, &y)?;
        ae += mae(&p, &y)?;
    }
    let n = samples.len() as f64;
    let out = (se / n, ae / n);
    if !(out.0.is_finite() && out.1.is_finite()) {
        return Err(Error::NonFinite("evaluation error is not finite".into()));
    }
    Ok(out)
}

fn mean_effective(model: &Model, pick_gamma: bool) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in model.encoders() {
        let idx = if pick_gamma { e.gamma_index() } else { e.xi_index() };
        for &r in model.injection.get(idx).values() {
            sum += crate::tensor::softplus(r);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Bi-level training with early stopping; returns the best-validation model.
pub fn train(splits: &Splits, spec: &ModelSpec, tc: &TrainConfig) -> Result<(Model, RunMetrics)> {
    tc.validate()?;
    let mut model = Model::new(spec, tc.seed)?;
    let metrics = train_model(&mut model, splits, tc)?;
    Ok((model, metrics))
}

/// Trains an already constructed model in place.
pub fn train_model(model: &mut Model, splits: &Splits, tc: &TrainConfig) -> Result<RunMetrics> {
    tc.validate()?;
    let (t, s) = (model.spec().lookback(), model.spec().horizon());
    let train_w = split_windows(splits, &splits.train, t, s, tc.window_stride)?;
    let val_w = split_windows(splits, &splits.val, t, s, tc.eval_stride)?;
    let test_w = split_windows(splits, &splits.test, t, s, tc.eval_stride)?;
    if train_w.is_empty() || val_w.is_empty() || test_w.is_empty() {
        return Err(Error::Data(format!(
            "splits yield {}/{}/{} train/val/test windows; all must be non-empty",
            train_w.len(),
            val_w.len(),
            test_w.len()
        )));
    }
    let bilevel = model.tem_enabled();
    let mut inner = InnerState::new(tc.inner_optimizer, &model.params);
    let mut outer = AdamState::new(&model.injection);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5e_ed0f_ba7c);
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best = (model.params.values(), model.injection.values());
    let mut epochs = Vec::new();

    for epoch in 1..=tc.max_epochs {
        let started = Instant::now();
        let (eta1, eta2) = tc.rates(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<WindowSample> = chunk.iter().map(|&i| train_w[i].clone()).collect();
            let inj_before = model.injection.checksum();
            let theta = (bilevel && tc.outer_mode == OuterMode::Exact).then(|| model.params.values());
            let loss = inner_step(model, &mut inner, &batch, eta1).map_err(|e| annotate(e, epoch))?;
            if model.injection.checksum() != inj_before {
                return Err(Error::InvalidArgument("injection raws changed during the inner step".into()));
            }
            if bilevel {
                let params_before = model.params.checksum();
                outer_step(model, &mut outer, theta.as_deref(), &batch, eta1, eta2, tc.outer_mode)
                    .map_err(|e| annotate(e, epoch))?;
                if model.params.checksum() != params_before {
                    return Err(Error::InvalidArgument("model parameters changed during the outer step".into()));
                }
            }
            loss_sum += loss;
            n_batches += 1;
        }
        let (val_mse, val_mae) = evaluate(model, &val_w, None)?;
        let decision = stopper.update(val_mse);
        if decision == StopDecision::Improved {
            best = (model.params.values(), model.injection.values());
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_mse,
            val_mae,
            seconds: started.elapsed().as_secs_f64(),
            gamma_mean: mean_effective(model, true),
            xi_mean: mean_effective(model, false),
        };
        log::info!(
            "epoch {epoch}: train {:.6} val mse {:.6} mae {:.6} ({:.1}s)",
            m.train_loss,
            m.val_mse,
            m.val_mae,
            m.seconds
        );
        epochs.push(m);
        if decision == StopDecision::Stop {
            log::info!("early stop after epoch {epoch}; best epoch {}", stopper.best_epoch());
            break;
        }
    }
    model.params.set_values(&best.0)?;
    model.injection.set_values(&best.1)?;
    let (test_mse, test_mae) = evaluate(model, &test_w, Some(&splits.norm))?;
    Ok(RunMetrics {
        epochs,
        best_epoch: stopper.best_epoch(),
        test_mse,
        test_mae,
    })
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests;
