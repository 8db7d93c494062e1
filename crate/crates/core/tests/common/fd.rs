//! Central finite-difference gradient checks.
//!
//! Every check contracts the op output with a fixed random tensor `R`, so the
//! scalar `L = Σ out·R` has gradients of order one in every input. The
//! numeric side re-runs the forward in f32 and reduces `L` in f64.

use fdg_core::autodiff::{Tape, Var};
use fdg_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tolerance on `|a − n| / max(|a|, |n|, 1)`.
pub const TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub name: String,
    pub coords: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.worst < TOL
    }

    pub fn merge(name: &str, parts: &[FdReport]) -> FdReport {
        let worst = parts
            .iter()
            .max_by(|a, b| a.worst.total_cmp(&b.worst))
            .cloned()
            .unwrap_or(FdReport { name: String::new(), coords: 0, worst: 0.0, worst_at: String::new() });
        FdReport {
            name: name.to_string(),
            coords: parts.iter().map(|p| p.coords).sum(),
            worst: worst.worst,
            worst_at: format!("{} {}", worst.name, worst.worst_at),
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `±[lo, hi]`, never closer than `lo` to zero (keeps ReLU kinks
/// away from the probed points).
pub fn away_from_zero(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn contract(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Check every input of `build` at `per_input` random coordinates (all
/// coordinates when the input is smaller).
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    per_input: usize,
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value = |xs: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars).expect("forward");
        tape.value(out).clone()
    };
    let out0 = value(inputs);
    let r = random_tensor(out0.shape(), -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).expect("mul");
    let loss = tape.sum(prod);
    tape.backward(loss).expect("backward");
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let loss_at = |xs: &[Tensor]| contract(&value(xs), &r);
    let mut report = FdReport { name: name.to_string(), coords: 0, worst: 0.0, worst_at: String::new() };
    for (k, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if x.numel() <= per_input {
            (0..x.numel()).collect()
        } else {
            (0..per_input).map(|_| rng.random_range(0..x.numel())).collect()
        };
        for i in coords {
            let n = numeric(inputs, k, i, &loss_at);
            let a = grads[k].data()[i] as f64;
            let e = rel_err(a, n);
            report.coords += 1;
            if e > report.worst || report.worst_at.is_empty() {
                report.worst = report.worst.max(e);
                report.worst_at = format!("input {k}[{i}] analytic {a:.6e} numeric {n:.6e}");
            }
        }
    }
    report
}

/// Richardson-extrapolated central difference of `f` in coordinate `i` of
/// input `k`: `(4·D(h/2) − D(h)) / 3`.
pub fn numeric(inputs: &[Tensor], k: usize, i: usize, f: &dyn Fn(&[Tensor]) -> f64) -> f64 {
    let x0 = inputs[k].data()[i];
    let h = 1e-2 * x0.abs().max(1.0);
    let central = |h: f32| {
        let mut plus = inputs.to_vec();
        plus[k].data_mut()[i] = x0 + h;
        let mut minus = inputs.to_vec();
        minus[k].data_mut()[i] = x0 - h;
        let span = (x0 + h) as f64 - (x0 - h) as f64;
        (f(&plus) - f(&minus)) / span
    };
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}
