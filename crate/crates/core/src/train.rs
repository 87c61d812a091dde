//! MSE loss, Adam, the training loop and a finite-difference gradient
//! checker.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, ShapeError};
use crate::models::{
    backward, forward, forward_teacher_forced, init_params_seeded, Architecture, Gate, Mode,
    ModelError, ModelParams, ModelRng, ModelSpec, ParamGrads,
};
use crate::preprocess::WindowedDataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset does not match the model: {0}")]
    DatasetMismatch(String),
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seq2seq only: feed ground-truth targets to the decoder while training.
    pub teacher_forcing: bool,
    pub seed: u64,
    /// Shuffle window order (never the time order inside a window).
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            teacher_forcing: false,
            seed: 42,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return fail("adam epsilon must be positive");
        }
        Ok(())
    }
}

/// Mean squared error over every entry and its gradient `2(pred − target)/(N·H)`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.map(|d| 2.0 * d / n);
    Ok((loss, grad))
}

/// Adam moment accumulators, one pair per parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .matrices()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let grads = grads.matrices();
    let mut params = params.matrices_mut();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::DatasetMismatch(
            "parameter, gradient and state counts differ".into(),
        ));
    }
    for ((p, g), m) in params.iter().zip(&grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(ShapeError::Mismatch {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            }
            .into());
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (idx, p) in params.iter_mut().enumerate() {
        let g = grads[idx].as_slice();
        let m = state.m[idx].as_mut_slice();
        let v = state.v[idx].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

fn check_dataset(spec: &ModelSpec, dataset: &WindowedDataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if dataset.window != spec.window
        || dataset.horizon != spec.horizon
        || dataset.features() != spec.features
    {
        return Err(TrainError::DatasetMismatch(format!(
            "dataset is window {} horizon {} features {}, spec is {} / {} / {}",
            dataset.window,
            dataset.horizon,
            dataset.features(),
            spec.window,
            spec.horizon,
            spec.features
        )));
    }
    Ok(())
}

fn uses_teacher(spec: &ModelSpec, cfg: &TrainConfig) -> bool {
    cfg.teacher_forcing && spec.architecture == Architecture::Seq2seq
}

/// Trains freshly initialised parameters (seeded by `spec.seed`); shuffling
/// and dropout draw from `cfg.seed`. Returns the mean per-sample loss of
/// every epoch.
pub fn train(
    spec: &ModelSpec,
    dataset: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    let params = init_params_seeded(spec)?;
    train_from(spec, params, dataset, cfg)
}

/// [`train`] starting from the given parameters.
pub fn train_from(
    spec: &ModelSpec,
    mut params: ModelParams,
    dataset: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    spec.validate()?;
    cfg.validate()?;
    params.check(spec)?;
    check_dataset(spec, dataset)?;

    let mut rng = ModelRng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let teacher = uses_teacher(spec, cfg);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.select(chunk);
            let target = batch.target_matrix();
            let (pred, cache) = if teacher {
                forward_teacher_forced(
                    spec,
                    &params,
                    &batch.inputs,
                    &batch.targets,
                    Mode::Train(&mut rng),
                )?
            } else {
                forward(spec, &params, &batch.inputs, Mode::Train(&mut rng))?
            };
            let (loss, grad) = mse_loss(&pred, &target)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let grads = backward(spec, &params, &cache, &grad)?;
            adam_step(&mut params, &grads, &mut state, cfg)?;
            total += loss * chunk.len() as f64;
        }
        history.push(total / dataset.len() as f64);
    }
    Ok((params, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Seq2seq only.
    pub teacher_forcing: bool,
    /// Seed of the (fixed) dropout masks.
    pub mask_seed: u64,
    /// Zero this gate's backpropagated gradients in the first layer of the
    /// first stack, to confirm the checker notices.
    pub inject_fault: Option<Gate>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            teacher_forcing: false,
            mask_seed: 0,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(matrix index, entry index)` of the worst entry, in
    /// [`ModelParams::matrices`] order.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Relative error `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between backpropagated and central-difference
/// gradients of the MSE loss, over every parameter of a freshly initialised
/// model. Runs in train mode with fixed dropout masks.
pub fn grad_check(
    spec: &ModelSpec,
    inputs: &[Matrix],
    targets: &[Matrix],
    epsilon: f64,
) -> Result<f64> {
    let params = init_params_seeded(spec)?;
    let opts = GradCheckOptions {
        epsilon,
        ..GradCheckOptions::default()
    };
    Ok(grad_check_with(spec, &params, inputs, targets, &opts)?.max_relative_error)
}

pub fn grad_check_with(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &[Matrix],
    targets: &[Matrix],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if inputs.len() != targets.len() {
        return Err(TrainError::DatasetMismatch(format!(
            "{} inputs for {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let teacher = opts.teacher_forcing && spec.architecture == Architecture::Seq2seq;
    let target = Matrix::from_fn(targets.len(), spec.horizon, |n, k| targets[n].get(k, 0));
    let run = |p: &ModelParams| {
        let mut rng = ModelRng::seed_from_u64(opts.mask_seed);
        if teacher {
            forward_teacher_forced(spec, p, inputs, targets, Mode::Train(&mut rng))
        } else {
            forward(spec, p, inputs, Mode::Train(&mut rng))
        }
    };

    let (pred, cache) = run(params)?;
    let (_, grad) = mse_loss(&pred, &target)?;
    let mut analytic = backward(spec, params, &cache, &grad)?;
    if let Some(gate) = opts.inject_fault {
        let g = analytic.stacks[0][0].gate_mut(gate);
        for m in [&mut g.w, &mut g.r, &mut g.b] {
            m.as_mut_slice().fill(0.0);
        }
    }

    let loss_at = |p: &ModelParams| -> Result<f64> {
        let (pred, _) = run(p)?;
        Ok(mse_loss(&pred, &target)?.0)
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    let analytic = analytic.matrices();
    for (mi, g) in analytic.iter().enumerate() {
        for (j, &g_bp) in g.as_slice().iter().enumerate() {
            let original = probe.matrices()[mi].as_slice()[j];
            probe.matrices_mut()[mi].as_mut_slice()[j] = original + opts.epsilon;
            let up = loss_at(&probe)?;
            probe.matrices_mut()[mi].as_mut_slice()[j] = original - opts.epsilon;
            let down = loss_at(&probe)?;
            probe.matrices_mut()[mi].as_mut_slice()[j] = original;
            let g_fd = (up - down) / (2.0 * opts.epsilon);
            let err = relative_error(g_bp, g_fd);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (mi, j);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_spec(architecture: Architecture) -> ModelSpec {
        ModelSpec {
            architecture,
            layers: 2,
            units: 4,
            dropout_rate: 0.2,
            window: 5,
            horizon: 2,
            features: 2,
            seed: 7,
        }
    }

    fn sample(spec: &ModelSpec, n: usize, seed: u64) -> (Vec<Matrix>, Vec<Matrix>) {
        let mut rng = ModelRng::seed_from_u64(seed);
        let inputs = (0..n)
            .map(|_| {
                Matrix::from_fn(spec.window, spec.features, |_, _| {
                    rng.random_range(-1.0..1.0)
                })
            })
            .collect();
        let targets = (0..n)
            .map(|_| Matrix::from_fn(spec.horizon, 1, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        (inputs, targets)
    }

    fn dataset(spec: &ModelSpec, n: usize, seed: u64) -> WindowedDataset {
        let (inputs, targets) = sample(spec, n, seed);
        let start = chrono::NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        WindowedDataset {
            inputs,
            targets,
            window: spec.window,
            horizon: spec.horizon,
            target_dates: vec![start; n],
        }
    }

    #[test]
    fn mse_basics() {
        let a = Matrix::filled(2, 2, 0.3);
        let (l, g) = mse_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        let (l, _) = mse_loss(&Matrix::filled(2, 2, 0.1), &Matrix::zeros(2, 2)).unwrap();
        assert!((l - 0.01).abs() < 1e-15);
        assert!(mse_loss(&a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn mse_grad_matches_differences() {
        let mut rng = ModelRng::seed_from_u64(1);
        let pred = Matrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let target = Matrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let (_, grad) = mse_loss(&pred, &target).unwrap();
        let eps = 1e-6;
        for j in 0..pred.len() {
            let mut up = pred.clone();
            up.as_mut_slice()[j] += eps;
            let mut down = pred.clone();
            down.as_mut_slice()[j] -= eps;
            let fd = (mse_loss(&up, &target).unwrap().0 - mse_loss(&down, &target).unwrap().0)
                / (2.0 * eps);
            assert!((fd - grad.as_slice()[j]).abs() < 1e-9);
        }
    }

    fn tiny_params() -> (ModelSpec, ModelParams) {
        let spec = ModelSpec {
            layers: 1,
            units: 1,
            window: 1,
            horizon: 1,
            features: 1,
            ..ModelSpec::default()
        };
        let params = init_params_seeded(&spec).unwrap();
        (spec, params)
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let (_, params) = tiny_params();
        let mut p = params.clone();
        let mut state = AdamState::new(&p);
        adam_step(
            &mut p,
            &params.zeros_like(),
            &mut state,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(p, params);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (_, params) = tiny_params();
        let mut grads = params.zeros_like();
        for (k, m) in grads.matrices_mut().into_iter().enumerate() {
            let g = if k % 2 == 0 { 0.3 } else { -2.0 };
            m.as_mut_slice().fill(g);
        }
        let cfg = TrainConfig::default();
        let mut p = params.clone();
        adam_step(&mut p, &grads, &mut AdamState::new(&params), &cfg).unwrap();
        for ((after, before), g) in p
            .matrices()
            .iter()
            .zip(params.matrices())
            .zip(grads.matrices())
        {
            for ((a, b), g) in after
                .as_slice()
                .iter()
                .zip(before.as_slice())
                .zip(g.as_slice())
            {
                let expected = -cfg.learning_rate * g.signum();
                assert!(((a - b) - expected).abs() <= cfg.learning_rate * 1e-6);
            }
        }
    }

    /// Scalar Adam written independently of `adam_step`.
    fn scalar_adam(mut w: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        w
    }

    #[test]
    fn adam_two_steps_match_scalar_trace() {
        let (_, params) = tiny_params();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let (g1, g2) = (0.7, -0.25);
        let mut p = params.clone();
        let mut state = AdamState::new(&p);
        for g in [g1, g2] {
            let mut grads = params.zeros_like();
            for m in grads.matrices_mut() {
                m.as_mut_slice().fill(g);
            }
            adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        }
        for (after, before) in p.matrices().iter().zip(params.matrices()) {
            for (a, b) in after.as_slice().iter().zip(before.as_slice()) {
                let expected = scalar_adam(
                    *b,
                    &[g1, g2],
                    cfg.learning_rate,
                    cfg.beta1,
                    cfg.beta2,
                    cfg.epsilon,
                );
                assert!((a - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initialisation() {
        let spec = small_spec(Architecture::TwoPath);
        let data = dataset(&spec, 6, 2);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (params, history) = train(&spec, &data, &cfg).unwrap();
        assert_eq!(params, init_params_seeded(&spec).unwrap());
        assert_eq!(history.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = small_spec(Architecture::Seq2seq);
        let data = dataset(&spec, 10, 3);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            teacher_forcing: true,
            ..TrainConfig::default()
        };
        let a = train(&spec, &data, &cfg).unwrap();
        let b = train(&spec, &data, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train(&spec, &data, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = small_spec(Architecture::Vanilla);
        let mut data = dataset(&spec, 3, 1);
        assert!(matches!(
            train(
                &spec,
                &data,
                &TrainConfig {
                    epochs: 0,
                    ..TrainConfig::default()
                }
            ),
            Err(TrainError::InvalidConfig(_))
        ));
        data.window = 3;
        assert!(matches!(
            train(&spec, &data, &TrainConfig::default()),
            Err(TrainError::DatasetMismatch(_))
        ));
        let empty = data.select(&[]);
        assert!(matches!(
            train(&spec, &empty, &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "lr": 0.1}"#).is_err());
    }

    #[test]
    fn gradients_check_out_for_every_architecture() {
        for arch in Architecture::ALL {
            let spec = small_spec(arch);
            let (inputs, targets) = sample(&spec, 3, 9);
            let err = grad_check(&spec, &inputs, &targets, 1e-5).unwrap();
            assert!(err < 1e-4, "{arch:?}: {err}");
        }
    }

    #[test]
    fn teacher_forced_gradients_check_out() {
        let spec = small_spec(Architecture::Seq2seq);
        let (inputs, targets) = sample(&spec, 3, 4);
        let params = init_params_seeded(&spec).unwrap();
        let opts = GradCheckOptions {
            teacher_forcing: true,
            ..GradCheckOptions::default()
        };
        let report = grad_check_with(&spec, &params, &inputs, &targets, &opts).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        assert_eq!(report.entries_checked, params.param_count());
    }

    #[test]
    fn checker_detects_an_injected_fault() {
        let spec = small_spec(Architecture::Vanilla);
        let (inputs, targets) = sample(&spec, 3, 5);
        let params = init_params_seeded(&spec).unwrap();
        let opts = GradCheckOptions {
            inject_fault: Some(Gate::Forget),
            ..GradCheckOptions::default()
        };
        let report = grad_check_with(&spec, &params, &inputs, &targets, &opts).unwrap();
        assert!(report.max_relative_error > 1e-2);
    }

    #[test]
    fn step_size_robustness() {
        let spec = small_spec(Architecture::Bidirectional);
        let (inputs, targets) = sample(&spec, 2, 6);
        let a = grad_check(&spec, &inputs, &targets, 1e-5).unwrap();
        let b = grad_check(&spec, &inputs, &targets, 1e-6).unwrap();
        assert!(a < 1e-4);
        let ratio = a.max(1e-12) / b.max(1e-12);
        assert!((0.01..=100.0).contains(&ratio), "{a} vs {b}");
    }

    #[test]
    fn single_sample_loss_settles_and_falls() {
        for arch in Architecture::ALL {
            let spec = ModelSpec {
                architecture: arch,
                layers: 2,
                units: 8,
                dropout_rate: 0.0,
                window: 10,
                horizon: 2,
                features: 1,
                seed: 42,
            };
            let ds = dataset(&spec, 1, 5);
            let cfg = TrainConfig {
                epochs: 300,
                batch_size: 1,
                learning_rate: 3e-4,
                ..TrainConfig::default()
            };
            let (_, history) = train(&spec, &ds, &cfg).unwrap();
            for (e, w) in history.windows(2).enumerate().skip(49) {
                assert!(
                    w[1] <= w[0] + 1e-6,
                    "{}: epoch {} rose {} -> {}",
                    arch.name(),
                    e + 2,
                    w[0],
                    w[1]
                );
            }
            assert!(history[299] < 1e-4, "{}: {}", arch.name(), history[299]);
        }
    }
}
