//! The four LSTM forecasting architectures with exact backpropagation through
//! time.
//!
//! Every architecture is assembled from stacks of standard (peephole-free)
//! LSTM cells:
//!
//! ```text
//! i = σ(x·W_i + h·R_i + b_i)     f = σ(x·W_f + h·R_f + b_f)
//! o = σ(x·W_o + h·R_o + b_o)     g = tanh(x·W_g + h·R_g + b_g)
//! c = f ⊙ c_prev + i ⊙ g         h = o ⊙ tanh(c)
//! ```
//!
//! A stack feeds each layer's full hidden sequence to the layer above. In
//! train mode an inverted-dropout mask is applied to every layer's output
//! (the recurrent path always sees the undropped state). The dense head reads
//! the top layer at the final time step:
//!
//! * `vanilla`: one stack, head `U × H`.
//! * `bidirectional`: a forward-time and a reversed-time stack, final top
//!   states concatenated, head `2U × H`.
//! * `two_path`: two independently initialised forward stacks over the same
//!   input, final top states concatenated, head `2U × H`.
//! * `seq2seq`: the encoder's final state yields the first forecast through a
//!   `U × 1` head and seeds a decoder stack (input width 1) that is unrolled
//!   for the remaining `H − 1` steps. Each decoder step consumes the previous
//!   forecast, or the previous ground-truth target under teacher forcing.
//!
//! Batches are processed time-major: step `t` of a batch is an `N × F` matrix
//! holding row `t` of every sample window.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{sigmoid, sigmoid_grad, tanh_act, tanh_grad, Matrix, ShapeError};

/// Generator used for initialisation and dropout masks.
pub type ModelRng = ChaCha8Rng;

pub const PARAMS_MAGIC: &[u8; 4] = b"QBNN";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("batch does not match the spec: {0}")]
    BatchMismatch(String),
    #[error("parameters do not match the spec: {0}")]
    ParamsMismatch(String),
    #[error("forward cache does not match: {0}")]
    CacheMismatch(String),
    #[error("parameter file: {0}")]
    Format(String),
    #[error("parameter file i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Vanilla,
    Bidirectional,
    Seq2seq,
    TwoPath,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Self::Vanilla,
        Self::Bidirectional,
        Self::Seq2seq,
        Self::TwoPath,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Bidirectional => "bidirectional",
            Self::Seq2seq => "seq2seq",
            Self::TwoPath => "two_path",
        }
    }

    fn code(self) -> u8 {
        match self {
            Self::Vanilla => 0,
            Self::Bidirectional => 1,
            Self::Seq2seq => 2,
            Self::TwoPath => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.code() == code)
    }
}

impl std::str::FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ModelError::InvalidSpec(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_units")]
    pub units: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    pub window: usize,
    pub horizon: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_layers() -> usize {
    4
}
fn default_units() -> usize {
    50
}
fn default_dropout() -> f64 {
    0.2
}
fn default_features() -> usize {
    1
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::Vanilla,
            layers: default_layers(),
            units: default_units(),
            dropout_rate: default_dropout(),
            window: 60,
            horizon: 1,
            features: default_features(),
            seed: 42,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.layers == 0 {
            return fail("layers must be >= 1");
        }
        if self.units == 0 {
            return fail("units must be >= 1");
        }
        if self.window == 0 {
            return fail("window must be >= 1");
        }
        if self.horizon == 0 {
            return fail("horizon must be >= 1");
        }
        if self.features == 0 {
            return fail("features must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    fn stack_inputs(&self) -> Vec<usize> {
        match self.architecture {
            Architecture::Vanilla => vec![self.features],
            Architecture::Bidirectional | Architecture::TwoPath => {
                vec![self.features, self.features]
            }
            Architecture::Seq2seq => vec![self.features, 1],
        }
    }

    fn dense_shape(&self) -> (usize, usize) {
        match self.architecture {
            Architecture::Vanilla => (self.units, self.horizon),
            Architecture::Bidirectional | Architecture::TwoPath => (2 * self.units, self.horizon),
            Architecture::Seq2seq => (self.units, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Self::Input, Self::Forget, Self::Output, Self::Candidate];
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// Input weights, `F_in × U`.
    pub w: Matrix,
    /// Recurrent weights, `U × U`.
    pub r: Matrix,
    /// Bias, `1 × U`.
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    pub gates: [GateParams; 4],
}

impl LstmCellParams {
    pub fn zeros(inputs: usize, units: usize) -> Self {
        let gate = || GateParams {
            w: Matrix::zeros(inputs, units),
            r: Matrix::zeros(units, units),
            b: Matrix::zeros(1, units),
        };
        Self {
            gates: [gate(), gate(), gate(), gate()],
        }
    }

    pub fn gate(&self, g: Gate) -> &GateParams {
        &self.gates[g as usize]
    }

    pub fn gate_mut(&mut self, g: Gate) -> &mut GateParams {
        &mut self.gates[g as usize]
    }

    pub fn inputs(&self) -> usize {
        self.gates[0].w.rows()
    }

    pub fn units(&self) -> usize {
        self.gates[0].w.cols()
    }
}

/// All trainable weights. `stacks[0]` is the main (or encoder, or forward)
/// stack; `stacks[1]` is the second path, the reversed-time stack or the
/// decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub stacks: Vec<Vec<LstmCellParams>>,
    pub dense_w: Matrix,
    pub dense_b: Matrix,
}

/// Gradients share the parameter layout.
pub type ParamGrads = ModelParams;

impl ModelParams {
    /// Zero parameters shaped for `spec`.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let stacks = spec
            .stack_inputs()
            .into_iter()
            .map(|first| {
                (0..spec.layers)
                    .map(|l| {
                        LstmCellParams::zeros(if l == 0 { first } else { spec.units }, spec.units)
                    })
                    .collect()
            })
            .collect();
        let (d, h) = spec.dense_shape();
        Self {
            stacks,
            dense_w: Matrix::zeros(d, h),
            dense_b: Matrix::zeros(1, h),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for m in out.matrices_mut() {
            m.as_mut_slice().fill(0.0);
        }
        out
    }

    /// Every parameter matrix in a fixed order: stack by stack, layer by
    /// layer, gates input/forget/output/candidate with `w`, `r`, `b` each,
    /// then the dense weights and bias.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for stack in &self.stacks {
            for cell in stack {
                for g in &cell.gates {
                    out.extend([&g.w, &g.r, &g.b]);
                }
            }
        }
        out.push(&self.dense_w);
        out.push(&self.dense_b);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for stack in &mut self.stacks {
            for cell in stack {
                for g in &mut cell.gates {
                    out.push(&mut g.w);
                    out.push(&mut g.r);
                    out.push(&mut g.b);
                }
            }
        }
        out.push(&mut self.dense_w);
        out.push(&mut self.dense_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    /// Checks that every matrix has the shape `spec` implies.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let expected = Self::zeros(spec);
        let ours = self.matrices();
        let theirs = expected.matrices();
        if ours.len() != theirs.len() {
            return Err(ModelError::ParamsMismatch(format!(
                "{} matrices, expected {}",
                ours.len(),
                theirs.len()
            )));
        }
        for (idx, (a, b)) in ours.iter().zip(&theirs).enumerate() {
            if a.shape() != b.shape() {
                return Err(ModelError::ParamsMismatch(format!(
                    "matrix {idx} is {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

fn glorot(rng: &mut ModelRng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

/// Glorot-uniform weights, zero biases except a forget-gate bias of one.
pub fn init_params(spec: &ModelSpec, rng: &mut ModelRng) -> Result<ModelParams> {
    spec.validate()?;
    let mut params = ModelParams::zeros(spec);
    for stack in &mut params.stacks {
        for cell in stack {
            let (inputs, units) = (cell.inputs(), cell.units());
            for (idx, gate) in cell.gates.iter_mut().enumerate() {
                gate.w = glorot(rng, inputs, units);
                gate.r = glorot(rng, units, units);
                if idx == Gate::Forget as usize {
                    gate.b = Matrix::filled(1, units, 1.0);
                }
            }
        }
    }
    let (d, h) = spec.dense_shape();
    params.dense_w = glorot(rng, d, h);
    Ok(params)
}

/// [`init_params`] driven by `spec.seed`.
pub fn init_params_seeded(spec: &ModelSpec) -> Result<ModelParams> {
    init_params(spec, &mut ModelRng::seed_from_u64(spec.seed))
}

/// Intermediates of one cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub c_prev: Matrix,
    /// Gate pre-activations in [`Gate`] order.
    pub pre: [Matrix; 4],
    pub i: Matrix,
    pub f: Matrix,
    pub o: Matrix,
    pub g: Matrix,
    pub c: Matrix,
    pub tanh_c: Matrix,
    pub h: Matrix,
}

/// One step of a standard LSTM cell over a batch (`x` is `N × F_in`, the
/// states are `N × U`).
pub fn lstm_cell_step(
    x: &Matrix,
    h_prev: &Matrix,
    c_prev: &Matrix,
    p: &LstmCellParams,
) -> Result<(Matrix, Matrix, CellCache)> {
    if x.cols() != p.inputs()
        || h_prev.cols() != p.units()
        || c_prev.shape() != h_prev.shape()
        || x.rows() != h_prev.rows()
    {
        return Err(ModelError::BatchMismatch(format!(
            "cell expects x: N×{}, states: N×{}; got {:?}, {:?}, {:?}",
            p.inputs(),
            p.units(),
            x.shape(),
            h_prev.shape(),
            c_prev.shape()
        )));
    }
    let affine = |g: Gate| -> Result<Matrix> {
        let gp = p.gate(g);
        Ok(x.matmul(&gp.w)?
            .add(&h_prev.matmul(&gp.r)?)?
            .add_row(&gp.b)?)
    };
    let pre = [
        affine(Gate::Input)?,
        affine(Gate::Forget)?,
        affine(Gate::Output)?,
        affine(Gate::Candidate)?,
    ];
    let i = sigmoid(&pre[0]);
    let f = sigmoid(&pre[1]);
    let o = sigmoid(&pre[2]);
    let g = tanh_act(&pre[3]);
    let c = f.hadamard(c_prev)?.add(&i.hadamard(&g)?)?;
    let tanh_c = tanh_act(&c);
    let h = o.hadamard(&tanh_c)?;
    let cache = CellCache {
        x: x.clone(),
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        pre,
        i,
        f,
        o,
        g,
        c: c.clone(),
        tanh_c,
        h: h.clone(),
    };
    Ok((h, c, cache))
}

/// Backward through one cell step. Accumulates parameter gradients into
/// `grad` and returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_backward(
    p: &LstmCellParams,
    cache: &CellCache,
    dh: &Matrix,
    dc: &Matrix,
    grad: &mut LstmCellParams,
) -> Result<(Matrix, Matrix, Matrix)> {
    let d_o = dh.hadamard(&cache.tanh_c)?;
    let dc_total = dc.add(&dh.hadamard(&cache.o)?.hadamard(&tanh_grad(&cache.tanh_c))?)?;
    let d_i = dc_total.hadamard(&cache.g)?;
    let d_g = dc_total.hadamard(&cache.i)?;
    let d_f = dc_total.hadamard(&cache.c_prev)?;
    let dc_prev = dc_total.hadamard(&cache.f)?;

    let d_pre = [
        d_i.hadamard(&sigmoid_grad(&cache.i))?,
        d_f.hadamard(&sigmoid_grad(&cache.f))?,
        d_o.hadamard(&sigmoid_grad(&cache.o))?,
        d_g.hadamard(&tanh_grad(&cache.g))?,
    ];

    let mut dx = Matrix::zeros(cache.x.rows(), cache.x.cols());
    let mut dh_prev = Matrix::zeros(cache.h_prev.rows(), cache.h_prev.cols());
    for (idx, da) in d_pre.iter().enumerate() {
        let gp = &p.gates[idx];
        let gg = &mut grad.gates[idx];
        gg.w.add_assign(&cache.x.t_matmul(da)?)?;
        gg.r.add_assign(&cache.h_prev.t_matmul(da)?)?;
        gg.b.add_assign(&da.sum_rows())?;
        dx.add_assign(&da.matmul_t(&gp.w)?)?;
        dh_prev.add_assign(&da.matmul_t(&gp.r)?)?;
    }
    Ok((dx, dh_prev, dc_prev))
}

/// Train mode carries the generator that draws dropout masks.
pub enum Mode<'a> {
    Train(&'a mut ModelRng),
    Eval,
}

struct Dropout<'a> {
    keep: f64,
    rng: Option<&'a mut ModelRng>,
}

impl<'a> Dropout<'a> {
    fn new(rate: f64, mode: Mode<'a>) -> Self {
        let rng = match mode {
            Mode::Train(rng) if rate > 0.0 => Some(rng),
            _ => None,
        };
        Self {
            keep: 1.0 - rate,
            rng,
        }
    }

    fn mask(&mut self, rows: usize, cols: usize) -> Option<Matrix> {
        let rng = self.rng.as_mut()?;
        let keep = self.keep;
        let scale = 1.0 / keep;
        Some(Matrix::from_fn(rows, cols, |_, _| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

/// One time step through every layer of a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub cells: Vec<CellCache>,
    /// Dropout mask applied to each layer's output, if any.
    pub masks: Vec<Option<Matrix>>,
    /// Top layer output after dropout.
    pub out: Matrix,
}

type StackState = Vec<(Matrix, Matrix)>;

fn zero_state(stack: &[LstmCellParams], batch: usize) -> StackState {
    stack
        .iter()
        .map(|c| {
            (
                Matrix::zeros(batch, c.units()),
                Matrix::zeros(batch, c.units()),
            )
        })
        .collect()
}

fn stack_step(
    stack: &[LstmCellParams],
    x: &Matrix,
    state: &mut StackState,
    dropout: &mut Dropout,
) -> Result<StepCache> {
    let mut cells = Vec::with_capacity(stack.len());
    let mut masks = Vec::with_capacity(stack.len());
    let mut input = x.clone();
    for (cell, slot) in stack.iter().zip(state.iter_mut()) {
        let (h, c, cache) = lstm_cell_step(&input, &slot.0, &slot.1, cell)?;
        let mask = dropout.mask(h.rows(), h.cols());
        input = match &mask {
            Some(m) => h.hadamard(m)?,
            None => h.clone(),
        };
        *slot = (h, c);
        cells.push(cache);
        masks.push(mask);
    }
    Ok(StepCache {
        cells,
        masks,
        out: input,
    })
}

fn stack_step_backward(
    stack: &[LstmCellParams],
    grads: &mut [LstmCellParams],
    cache: &StepCache,
    d_out: Option<&Matrix>,
    carry: &mut StackState,
) -> Result<Matrix> {
    let mut d_above = d_out.cloned();
    for l in (0..stack.len()).rev() {
        let mut dh = carry[l].0.clone();
        if let Some(d) = d_above.take() {
            let d = match &cache.masks[l] {
                Some(m) => d.hadamard(m)?,
                None => d,
            };
            dh.add_assign(&d)?;
        }
        let (dx, dh_prev, dc_prev) =
            lstm_cell_backward(&stack[l], &cache.cells[l], &dh, &carry[l].1, &mut grads[l])?;
        carry[l] = (dh_prev, dc_prev);
        d_above = Some(dx);
    }
    Ok(d_above.expect("stack has at least one layer"))
}

fn run_stack(
    stack: &[LstmCellParams],
    xs: &[Matrix],
    reverse: bool,
    dropout: &mut Dropout,
    state: &mut StackState,
) -> Result<Vec<StepCache>> {
    let order: Box<dyn Iterator<Item = &Matrix>> = if reverse {
        Box::new(xs.iter().rev())
    } else {
        Box::new(xs.iter())
    };
    order
        .map(|x| stack_step(stack, x, state, dropout))
        .collect()
}

/// Backward over a whole processed sequence whose only output gradient is
/// at the final processed step.
fn backprop_sequence(
    stack: &[LstmCellParams],
    grads: &mut [LstmCellParams],
    steps: &[StepCache],
    d_final: &Matrix,
    carry: &mut StackState,
) -> Result<()> {
    let last = steps.len() - 1;
    for (idx, step) in steps.iter().enumerate().rev() {
        let d_out = (idx == last).then_some(d_final);
        stack_step_backward(stack, grads, step, d_out, carry)?;
    }
    Ok(())
}

/// Everything a forward pass computed, in processing order.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub architecture: Architecture,
    pub batch: usize,
    /// Per stack, one [`StepCache`] per processed time step (the decoder of
    /// `seq2seq` lives in `decoder`).
    pub stacks: Vec<Vec<StepCache>>,
    pub decoder: Vec<StepCache>,
    /// Inputs of every dense-head application.
    pub dense_inputs: Vec<Matrix>,
    /// Decoder step inputs (`N × 1`).
    pub decoder_inputs: Vec<Matrix>,
    pub teacher_forced: bool,
}

impl ForwardCache {
    /// Undropped top-layer hidden state after the last processed step of a
    /// stack.
    pub fn final_hidden(&self, stack: usize) -> Option<&Matrix> {
        self.stacks.get(stack)?.last()?.cells.last().map(|c| &c.h)
    }
}

fn time_major(spec: &ModelSpec, inputs: &[Matrix]) -> Result<Vec<Matrix>> {
    if inputs.is_empty() {
        return Err(ModelError::BatchMismatch("empty batch".into()));
    }
    for (n, m) in inputs.iter().enumerate() {
        if m.shape() != (spec.window, spec.features) {
            return Err(ModelError::BatchMismatch(format!(
                "sample {n} is {:?}, expected {}x{}",
                m.shape(),
                spec.window,
                spec.features
            )));
        }
    }
    Ok((0..spec.window)
        .map(|t| Matrix::from_fn(inputs.len(), spec.features, |n, f| inputs[n].get(t, f)))
        .collect())
}

fn dense(params: &ModelParams, z: &Matrix) -> Result<Matrix> {
    Ok(z.matmul(&params.dense_w)?.add_row(&params.dense_b)?)
}

/// Runs the model over a batch of `window × features` samples and returns
/// `N × horizon` predictions with the cache needed by [`backward`].
pub fn forward(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &[Matrix],
    mode: Mode,
) -> Result<(Matrix, ForwardCache)> {
    forward_impl(spec, params, inputs, None, mode)
}

/// Like [`forward`], but a `seq2seq` decoder consumes the ground-truth
/// targets (`horizon × 1` per sample) instead of its own forecasts. Other
/// architectures ignore the targets.
pub fn forward_teacher_forced(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &[Matrix],
    targets: &[Matrix],
    mode: Mode,
) -> Result<(Matrix, ForwardCache)> {
    forward_impl(spec, params, inputs, Some(targets), mode)
}

fn forward_impl(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &[Matrix],
    teacher: Option<&[Matrix]>,
    mode: Mode,
) -> Result<(Matrix, ForwardCache)> {
    spec.validate()?;
    params.check(spec)?;
    let xs = time_major(spec, inputs)?;
    let batch = inputs.len();
    let mut dropout = Dropout::new(spec.dropout_rate, mode);

    let mut cache = ForwardCache {
        architecture: spec.architecture,
        batch,
        stacks: Vec::new(),
        decoder: Vec::new(),
        dense_inputs: Vec::new(),
        decoder_inputs: Vec::new(),
        teacher_forced: false,
    };

    let predictions = match spec.architecture {
        Architecture::Vanilla => {
            let mut state = zero_state(&params.stacks[0], batch);
            let steps = run_stack(&params.stacks[0], &xs, false, &mut dropout, &mut state)?;
            let z = steps.last().expect("window >= 1").out.clone();
            cache.stacks.push(steps);
            let y = dense(params, &z)?;
            cache.dense_inputs.push(z);
            y
        }
        Architecture::Bidirectional | Architecture::TwoPath => {
            let reverse = spec.architecture == Architecture::Bidirectional;
            let mut s0 = zero_state(&params.stacks[0], batch);
            let first = run_stack(&params.stacks[0], &xs, false, &mut dropout, &mut s0)?;
            let mut s1 = zero_state(&params.stacks[1], batch);
            let second = run_stack(&params.stacks[1], &xs, reverse, &mut dropout, &mut s1)?;
            let z = first
                .last()
                .expect("window >= 1")
                .out
                .concat_cols(&second.last().expect("window >= 1").out)?;
            cache.stacks.push(first);
            cache.stacks.push(second);
            let y = dense(params, &z)?;
            cache.dense_inputs.push(z);
            y
        }
        Architecture::Seq2seq => {
            if let Some(targets) = teacher {
                if targets.len() != batch || targets.iter().any(|t| t.shape() != (spec.horizon, 1))
                {
                    return Err(ModelError::BatchMismatch(format!(
                        "teacher forcing needs {batch} targets of {}x1",
                        spec.horizon
                    )));
                }
                cache.teacher_forced = true;
            }
            let mut state = zero_state(&params.stacks[0], batch);
            let enc = run_stack(&params.stacks[0], &xs, false, &mut dropout, &mut state)?;
            let z0 = enc.last().expect("window >= 1").out.clone();
            cache.stacks.push(enc);
            let mut prev = dense(params, &z0)?;
            cache.dense_inputs.push(z0);
            let mut columns = vec![prev.clone()];
            for k in 1..spec.horizon {
                let u = match teacher {
                    Some(targets) => Matrix::from_fn(batch, 1, |n, _| targets[n].get(k - 1, 0)),
                    None => prev.clone(),
                };
                let step = stack_step(&params.stacks[1], &u, &mut state, &mut dropout)?;
                let y = dense(params, &step.out)?;
                cache.dense_inputs.push(step.out.clone());
                cache.decoder.push(step);
                cache.decoder_inputs.push(u);
                columns.push(y.clone());
                prev = y;
            }
            Matrix::from_fn(batch, spec.horizon, |n, k| columns[k].get(n, 0))
        }
    };
    Ok((predictions, cache))
}

/// Eval-mode predictions.
pub fn predict(spec: &ModelSpec, params: &ModelParams, inputs: &[Matrix]) -> Result<Matrix> {
    forward(spec, params, inputs, Mode::Eval).map(|(y, _)| y)
}

fn dense_backward(
    params: &ModelParams,
    grads: &mut ParamGrads,
    z: &Matrix,
    dy: &Matrix,
) -> Result<Matrix> {
    grads.dense_w.add_assign(&z.t_matmul(dy)?)?;
    grads.dense_b.add_assign(&dy.sum_rows())?;
    Ok(dy.matmul_t(&params.dense_w)?)
}

/// Exact gradients of a scalar loss with respect to every parameter, given
/// `loss_grad = ∂loss/∂predictions` (`N × horizon`).
pub fn backward(
    spec: &ModelSpec,
    params: &ModelParams,
    cache: &ForwardCache,
    loss_grad: &Matrix,
) -> Result<ParamGrads> {
    params.check(spec)?;
    if cache.architecture != spec.architecture {
        return Err(ModelError::CacheMismatch(format!(
            "cache is for {}, spec is {}",
            cache.architecture.name(),
            spec.architecture.name()
        )));
    }
    if loss_grad.shape() != (cache.batch, spec.horizon) {
        return Err(ModelError::CacheMismatch(format!(
            "loss gradient is {:?}, expected {}x{}",
            loss_grad.shape(),
            cache.batch,
            spec.horizon
        )));
    }
    let expected_stacks = if spec.architecture == Architecture::Vanilla
        || spec.architecture == Architecture::Seq2seq
    {
        1
    } else {
        2
    };
    if cache.stacks.len() != expected_stacks || cache.stacks.iter().any(|s| s.len() != spec.window)
    {
        return Err(ModelError::CacheMismatch(
            "stack steps do not match the spec".into(),
        ));
    }

    let mut grads = params.zeros_like();
    let batch = cache.batch;
    match spec.architecture {
        Architecture::Vanilla => {
            let dz = dense_backward(params, &mut grads, &cache.dense_inputs[0], loss_grad)?;
            let mut carry = zero_state(&params.stacks[0], batch);
            backprop_sequence(
                &params.stacks[0],
                &mut grads.stacks[0],
                &cache.stacks[0],
                &dz,
                &mut carry,
            )?;
        }
        Architecture::Bidirectional | Architecture::TwoPath => {
            let u = spec.units;
            let dz = dense_backward(params, &mut grads, &cache.dense_inputs[0], loss_grad)?;
            for (idx, range) in [(0, 0..u), (1, u..2 * u)] {
                let d_final = dz.slice_cols(range.start, range.end)?;
                let mut carry = zero_state(&params.stacks[idx], batch);
                backprop_sequence(
                    &params.stacks[idx],
                    &mut grads.stacks[idx],
                    &cache.stacks[idx],
                    &d_final,
                    &mut carry,
                )?;
            }
        }
        Architecture::Seq2seq => {
            if cache.decoder.len() + 1 != spec.horizon || cache.dense_inputs.len() != spec.horizon {
                return Err(ModelError::CacheMismatch(
                    "decoder steps do not match the horizon".into(),
                ));
            }
            let mut feedback: Vec<Matrix> =
                (0..spec.horizon).map(|_| Matrix::zeros(batch, 1)).collect();
            let mut carry = zero_state(&params.stacks[1], batch);
            for k in (1..spec.horizon).rev() {
                let dy = loss_grad.slice_cols(k, k + 1)?.add(&feedback[k])?;
                let dz = dense_backward(params, &mut grads, &cache.dense_inputs[k], &dy)?;
                let du = stack_step_backward(
                    &params.stacks[1],
                    &mut grads.stacks[1],
                    &cache.decoder[k - 1],
                    Some(&dz),
                    &mut carry,
                )?;
                if !cache.teacher_forced {
                    feedback[k - 1].add_assign(&du)?;
                }
            }
            let dy0 = loss_grad.slice_cols(0, 1)?.add(&feedback[0])?;
            let dz0 = dense_backward(params, &mut grads, &cache.dense_inputs[0], &dy0)?;
            // The decoder's initial state is the encoder's final state.
            backprop_sequence(
                &params.stacks[0],
                &mut grads.stacks[0],
                &cache.stacks[0],
                &dz0,
                &mut carry,
            )?;
        }
    }
    Ok(grads)
}

/// Writes `QBNN` magic, format version, the spec fields and then every
/// parameter matrix (`u32` rows, `u32` cols, row-major `f64` data), all
/// little-endian, in [`ModelParams::matrices`] order.
pub fn write_params(w: &mut impl Write, spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    params.check(spec)?;
    let mut buf = Vec::with_capacity(64 + params.param_count() * 8);
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    buf.push(spec.architecture.code());
    for v in [
        spec.layers,
        spec.units,
        spec.window,
        spec.horizon,
        spec.features,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&spec.dropout_rate.to_le_bytes());
    buf.extend_from_slice(&spec.seed.to_le_bytes());
    let matrices = params.matrices();
    buf.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for m in matrices {
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| ModelError::Format("unexpected end of file".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice has length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn read_params(r: &mut impl Read) -> Result<(ModelSpec, ModelParams)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if &cur.take::<4>()? != PARAMS_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != PARAMS_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let [code] = cur.take::<1>()?;
    let architecture = Architecture::from_code(code)
        .ok_or_else(|| ModelError::Format(format!("unknown architecture code {code}")))?;
    let spec = ModelSpec {
        architecture,
        layers: cur.u32()? as usize,
        units: cur.u32()? as usize,
        window: cur.u32()? as usize,
        horizon: cur.u32()? as usize,
        features: cur.u32()? as usize,
        dropout_rate: cur.f64()?,
        seed: cur.u64()?,
    };
    spec.validate()?;
    let mut params = ModelParams::zeros(&spec);
    let count = cur.u32()? as usize;
    let mut matrices = params.matrices_mut();
    if count != matrices.len() {
        return Err(ModelError::Format(format!(
            "{count} matrices, spec implies {}",
            matrices.len()
        )));
    }
    for (idx, m) in matrices.iter_mut().enumerate() {
        let shape = (cur.u32()? as usize, cur.u32()? as usize);
        if shape != m.shape() {
            return Err(ModelError::Format(format!(
                "matrix {idx} is {shape:?}, spec implies {:?}",
                m.shape()
            )));
        }
        for v in m.as_mut_slice() {
            *v = cur.f64()?;
            if !v.is_finite() {
                return Err(ModelError::Format(format!(
                    "non-finite value in matrix {idx}"
                )));
            }
        }
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Format("trailing bytes".into()));
    }
    Ok((spec, params))
}
