//! Finite-difference gradient verification.
//!
//! The analytic gradient is computed at the precision under test; the
//! numeric reference always runs the same graph in `f64` with central
//! differences, so an `f32` check compares against a clean oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NormMode, Tape, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// A scalar-valued graph that can be built at any precision.
pub trait Differentiable {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var, TensorError>;
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of random coordinates to check.
    pub coords: usize,
    pub seed: u64,
    /// Relative floor for the error denominator, as a fraction of the
    /// largest analytic gradient magnitude of the same input.
    pub floor: f64,
}

impl GradCheckConfig {
    pub fn f32_default() -> Self {
        GradCheckConfig { step: 1e-3, coords: 24, seed: 0, floor: 1e-3 }
    }

    pub fn f64_default() -> Self {
        GradCheckConfig { step: 1e-6, coords: 24, seed: 0, floor: 1e-3 }
    }

    pub fn for_precision<T: Scalar>() -> Self {
        if T::NAME == "f64" {
            Self::f64_default()
        } else {
            Self::f32_default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    /// Coordinates skipped because the function is not smooth there.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn eval_f64<F: Differentiable>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(TensorError::Contract("gradcheck function must return a scalar".into()));
    }
    Ok(tape.data(out)[0])
}

/// Checks `coords` random coordinates of the gradient of `f` at `inputs`.
pub fn gradcheck<T: Scalar, F: Differentiable>(
    f: &F,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast::<T>().with_grad())).collect();
    let out = f.eval(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    let scales: Vec<f64> = analytic.iter().map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect();

    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let base = eval_f64(f, inputs)?;
    let mut attempts = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    while report.checks.len() < cfg.coords && attempts < cfg.coords * 8 {
        attempts += 1;
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let orig = inputs[which].data()[flat];
        work[which].data_mut()[flat] = orig + cfg.step;
        let plus = eval_f64(f, &work)?;
        work[which].data_mut()[flat] = orig - cfg.step;
        let minus = eval_f64(f, &work)?;
        work[which].data_mut()[flat] = orig;

        let fwd = (plus - base) / cfg.step;
        let bwd = (base - minus) / cfg.step;
        let floor = cfg.floor * scales[which];
        if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()).max(floor).max(1e-12) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[which][flat];
        let denom = a.abs().max(numeric.abs()).max(floor).max(f64::MIN_POSITIVE);
        report.checks.push(CoordinateCheck {
            input: which,
            index: flat,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / denom,
        });
    }
    Ok(report)
}

// ------------------------------------------------------------- op suite

/// One entry per differentiable tape operation, plus the composite losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpCase {
    Conv2d,
    Conv2dStrided,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Add,
    Mul,
    Affine,
    MatMul,
    Transpose,
    AddBias,
    GlobalAvgPool,
    L2Normalize,
    LogSoftmax,
    LogSoftmaxMasked,
    Select,
    SumRows,
    Sum,
    Mean,
    Reshape,
    NtXent,
    Byol,
    SwappedPrediction,
}

impl OpCase {
    pub const ALL: [OpCase; 23] = [
        OpCase::Conv2d,
        OpCase::Conv2dStrided,
        OpCase::BatchNormTrain,
        OpCase::BatchNormEval,
        OpCase::Relu,
        OpCase::Add,
        OpCase::Mul,
        OpCase::Affine,
        OpCase::MatMul,
        OpCase::Transpose,
        OpCase::AddBias,
        OpCase::GlobalAvgPool,
        OpCase::L2Normalize,
        OpCase::LogSoftmax,
        OpCase::LogSoftmaxMasked,
        OpCase::Select,
        OpCase::SumRows,
        OpCase::Sum,
        OpCase::Mean,
        OpCase::Reshape,
        OpCase::NtXent,
        OpCase::Byol,
        OpCase::SwappedPrediction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpCase::Conv2d => "conv2d",
            OpCase::Conv2dStrided => "conv2d_strided",
            OpCase::BatchNormTrain => "batch_norm_train",
            OpCase::BatchNormEval => "batch_norm_eval",
            OpCase::Relu => "relu",
            OpCase::Add => "add",
            OpCase::Mul => "mul",
            OpCase::Affine => "affine",
            OpCase::MatMul => "matmul",
            OpCase::Transpose => "transpose",
            OpCase::AddBias => "add_bias",
            OpCase::GlobalAvgPool => "global_avg_pool",
            OpCase::L2Normalize => "l2_normalize",
            OpCase::LogSoftmax => "log_softmax",
            OpCase::LogSoftmaxMasked => "log_softmax_masked",
            OpCase::Select => "select",
            OpCase::SumRows => "sum_rows",
            OpCase::Sum => "sum",
            OpCase::Mean => "mean",
            OpCase::Reshape => "reshape",
            OpCase::NtXent => "nt_xent",
            OpCase::Byol => "byol",
            OpCase::SwappedPrediction => "swapped_prediction",
        }
    }

    /// Random inputs for the case.
    pub fn inputs(self, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
        let mut t = |shape: &[usize]| random_tensor(shape, &mut rng);
        match self {
            OpCase::Conv2d => vec![t(&[2, 3, 5, 5]), t(&[4, 3, 3, 3])],
            OpCase::Conv2dStrided => vec![t(&[2, 2, 7, 6]), t(&[3, 2, 3, 3])],
            OpCase::BatchNormTrain | OpCase::BatchNormEval => vec![t(&[4, 3, 2, 2]), t(&[3]), t(&[3])],
            OpCase::Relu | OpCase::Affine | OpCase::Transpose | OpCase::SumRows | OpCase::Reshape => vec![t(&[4, 5])],
            OpCase::Add | OpCase::Mul => vec![t(&[3, 4]), t(&[3, 4])],
            OpCase::MatMul => vec![t(&[3, 4]), t(&[4, 5])],
            OpCase::AddBias => vec![t(&[3, 4]), t(&[4])],
            OpCase::GlobalAvgPool => vec![t(&[2, 3, 3, 4])],
            OpCase::L2Normalize => vec![t(&[4, 6])],
            OpCase::LogSoftmax => vec![t(&[3, 5])],
            OpCase::LogSoftmaxMasked => vec![t(&[5, 5])],
            OpCase::Select | OpCase::Sum | OpCase::Mean => vec![t(&[3, 4])],
            OpCase::NtXent => vec![t(&[8, 5])],
            OpCase::Byol => vec![t(&[4, 6])],
            OpCase::SwappedPrediction => vec![t(&[4, 5]), t(&[4, 5])],
        }
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("shape matches data")
}

/// Reduces an op's output to a scalar through a fixed random weighting, so
/// every output coordinate contributes a distinct gradient.
struct Probe {
    case: OpCase,
    seed: u64,
}

impl Differentiable for Probe {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var, TensorError> {
        use crate::objectives;
        let out = match self.case {
            OpCase::Conv2d => tape.conv2d(x[0], x[1], 1, 1)?,
            OpCase::Conv2dStrided => tape.conv2d(x[0], x[1], 2, 0)?,
            OpCase::BatchNormTrain => tape.batch_norm(x[0], x[1], x[2], NormMode::Train, None, T::of_f64(1e-5))?.0,
            OpCase::BatchNormEval => {
                let mean = [0.1, -0.2, 0.3].map(T::of_f64);
                let var = [0.5, 1.2, 2.0].map(T::of_f64);
                tape.batch_norm(x[0], x[1], x[2], NormMode::Eval, Some((&mean, &var)), T::of_f64(1e-5))?.0
            }
            OpCase::Relu => tape.relu(x[0])?,
            OpCase::Add => tape.add(x[0], x[1])?,
            OpCase::Mul => tape.mul(x[0], x[1])?,
            OpCase::Affine => tape.affine(x[0], T::of_f64(-1.7), T::of_f64(0.4))?,
            OpCase::MatMul => tape.matmul(x[0], x[1])?,
            OpCase::Transpose => tape.transpose(x[0])?,
            OpCase::AddBias => tape.add_bias(x[0], x[1])?,
            OpCase::GlobalAvgPool => tape.global_avg_pool(x[0])?,
            OpCase::L2Normalize => tape.l2_normalize(x[0], T::of_f64(1e-12))?,
            OpCase::LogSoftmax => tape.log_softmax(x[0], false)?,
            OpCase::LogSoftmaxMasked => tape.log_softmax(x[0], true)?,
            OpCase::Select => tape.select(x[0], vec![0, 5, 5, 11, 2, 7])?,
            OpCase::SumRows => tape.sum_rows(x[0])?,
            OpCase::Sum => return tape.sum(x[0]),
            OpCase::Mean => return tape.mean(x[0]),
            OpCase::Reshape => tape.reshape(x[0], vec![2, 10])?,
            OpCase::NtXent => return objectives::nt_xent_loss(tape, x[0], 0.5),
            OpCase::Byol => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6279);
                let target = tape.constant(random_tensor(&[4, 6], &mut rng).cast::<T>());
                return objectives::byol_loss(tape, x[0], target);
            }
            OpCase::SwappedPrediction => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7177);
                let mut q = || {
                    let raw: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    objectives::sinkhorn(&raw, 4, 5, 0.5, 3)
                };
                let (q1, q2) = (q(), q());
                return objectives::swapped_prediction_loss(tape, x[0], x[1], &q1, &q2, 0.3);
            }
        };
        let shape = tape.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7765_6967);
        let w = random_tensor(&shape, &mut rng).cast::<T>();
        let w = tape.constant(w);
        let weighted = tape.mul(out, w)?;
        tape.sum(weighted)
    }
}

/// Runs the gradient check for one case at precision `T`.
pub fn check_op<T: Scalar>(case: OpCase, seed: u64) -> Result<GradCheckReport, TensorError> {
    let inputs = case.inputs(seed);
    let cfg = GradCheckConfig { seed, ..GradCheckConfig::for_precision::<T>() };
    gradcheck::<T, _>(&Probe { case, seed }, &inputs, &cfg)
}
