//! Numeric kernels, a reverse-mode tape, and a finite-difference verifier.
//!
//! Every trainable loss in the engine is assembled from the operations on
//! [`Tape`]. The [`Kernel`] trait packages a forward/backward pair so that
//! [`check_gradient`] can compare the analytic backward against central
//! differences.

mod sparse;
mod tape;

pub use sparse::Csr;
pub use tape::{Gradients, Tape, Var};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Negative slope used by every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, stable for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Softmax of a non-empty slice (max-shifted).
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "softmax_row needs a non-empty vector");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_sim length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine_sim on a zero vector; returning 0");
        return 0.0;
    }
    dot / (na * nb)
}

/// A differentiable operation with an explicit backward.
pub trait Kernel {
    fn name(&self) -> &str;

    fn arity(&self) -> usize;

    fn forward(&self, inputs: &[Array2<f64>]) -> Array2<f64>;

    /// Vector-Jacobian product: gradients of `⟨upstream, forward(inputs)⟩`
    /// with respect to each input.
    fn backward(
        &self,
        inputs: &[Array2<f64>],
        output: &Array2<f64>,
        upstream: &Array2<f64>,
    ) -> Vec<Array2<f64>>;
}

/// Any closure that records its computation on a tape is a kernel; the
/// backward pass is the tape's reverse sweep.
pub struct TapeKernel<F> {
    name: String,
    arity: usize,
    build: F,
}

impl<F> TapeKernel<F>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    pub fn new(name: impl Into<String>, arity: usize, build: F) -> Self {
        TapeKernel {
            name: name.into(),
            arity,
            build,
        }
    }
}

impl<F> Kernel for TapeKernel<F>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn arity(&self) -> usize {
        self.arity
    }

    fn forward(&self, inputs: &[Array2<f64>]) -> Array2<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = (self.build)(&mut tape, &vars);
        tape.value(out).clone()
    }

    fn backward(
        &self,
        inputs: &[Array2<f64>],
        _output: &Array2<f64>,
        upstream: &Array2<f64>,
    ) -> Vec<Array2<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = (self.build)(&mut tape, &vars);
        let up = tape.leaf(upstream.clone());
        let weighted = tape.mul(out, up);
        let total = tape.sum(weighted);
        let grads = tape.backward(total);
        vars.iter()
            .zip(inputs)
            .map(|(&v, x)| grads.get_or_zeros(v, x.dim()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub kernel: String,
    pub max_rel_error: f64,
    pub trials: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    /// Folds another report for the same kernel into this one.
    pub fn merge(&mut self, other: &GradReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.trials += other.trials;
        self.pass = self.pass && other.pass && self.max_rel_error <= self.tolerance;
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Compares `kernel.backward` against central differences of
/// `⟨u, forward(x)⟩` for a fixed pseudo-random upstream `u`.
pub fn check_gradient(kernel: &dyn Kernel, inputs: &[Array2<f64>], eps: f64, tol: f64) -> GradReport {
    assert!(eps > 0.0 && eps <= 1e-2, "eps must lie in (0, 1e-2]");
    assert_eq!(inputs.len(), kernel.arity(), "wrong number of inputs");
    let fail = |err: f64| GradReport {
        kernel: kernel.name().to_string(),
        max_rel_error: err,
        trials: 1,
        tolerance: tol,
        pass: false,
    };
    if inputs.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return fail(f64::INFINITY);
    }

    let output = kernel.forward(inputs);
    if output.iter().any(|v| !v.is_finite()) {
        return fail(f64::INFINITY);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let upstream = output.mapv(|_| rng.random_range(-1.0..1.0));
    let project = |out: &Array2<f64>| -> f64 { (out * &upstream).sum() };
    let analytic = kernel.backward(inputs, &output, &upstream);

    let mut worst = 0.0f64;
    let mut probe: Vec<Array2<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for (flat, &x0) in input.iter().enumerate() {
            let idx = (flat / input.ncols(), flat % input.ncols());
            probe[k][idx] = x0 + eps;
            let hi = project(&kernel.forward(&probe));
            probe[k][idx] = x0 - eps;
            let lo = project(&kernel.forward(&probe));
            probe[k][idx] = x0;
            if !hi.is_finite() || !lo.is_finite() {
                return fail(f64::INFINITY);
            }
            let numeric = (hi - lo) / (2.0 * eps);
            worst = worst.max(rel_error(analytic[k][idx], numeric));
        }
    }
    GradReport {
        kernel: kernel.name().to_string(),
        max_rel_error: worst,
        trials: 1,
        tolerance: tol,
        pass: worst <= tol,
    }
}

/// Runs [`check_gradient`] over `trials` seeded input draws.
pub fn check_gradient_trials(
    kernel: &dyn Kernel,
    trials: usize,
    seed: u64,
    eps: f64,
    tol: f64,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Vec<Array2<f64>>,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        kernel: kernel.name().to_string(),
        max_rel_error: 0.0,
        trials: 0,
        tolerance: tol,
        pass: true,
    };
    for _ in 0..trials {
        let inputs = draw(&mut rng);
        report.merge(&check_gradient(kernel, &inputs, eps, tol));
    }
    report
}

/// Uniform `[-scale, scale)` matrix.
pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// The elementwise and row kernels, exposed for gradient checking.
pub fn builtin_kernels() -> Vec<Box<dyn Kernel>> {
    vec![
        Box::new(TapeKernel::new("sigmoid", 1, |t: &mut Tape, x: &[Var]| t.sigmoid(x[0]))),
        Box::new(TapeKernel::new("log_sigmoid", 1, |t: &mut Tape, x: &[Var]| {
            t.log_sigmoid(x[0])
        })),
        Box::new(TapeKernel::new("leaky_relu", 1, |t: &mut Tape, x: &[Var]| {
            t.leaky_relu(x[0], LEAKY_SLOPE)
        })),
        Box::new(TapeKernel::new("softmax_row", 1, |t: &mut Tape, x: &[Var]| {
            // mix the columns into one logit column so any input width works
            let (n, c) = t.shape(x[0]);
            let mix = t.leaf(Array2::from_shape_fn((c, 1), |(k, _)| 1.0 / (k + 1) as f64));
            let col = t.matmul(x[0], mix);
            t.segment_softmax(col, std::rc::Rc::new(vec![0, n]))
        })),
        Box::new(TapeKernel::new("cosine_rows", 2, |t: &mut Tape, x: &[Var]| {
            let a = t.normalize_rows(x[0]);
            let b = t.normalize_rows(x[1]);
            t.row_dot(a, b)
        })),
        Box::new(TapeKernel::new("matmul", 2, |t: &mut Tape, x: &[Var]| {
            t.matmul_t(x[0], x[1], false, true)
        })),
    ]
}
