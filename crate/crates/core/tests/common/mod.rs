//! Shared test oracles.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Relative-error bound for analytic vs numeric gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely; central
/// differences cannot resolve them relatively in f64.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

fn values(v: &Var) -> Vec<f64> {
    v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn set_values(v: &Var, data: &[f64]) {
    let t = Tensor::from_vec(data.to_vec(), v.dims(), &Device::Cpu).unwrap();
    v.set(&t).unwrap();
}

/// Compares backprop gradients of the scalar `f()` with central differences
/// at up to `per_var` random coordinates of each named f64 variable.
pub fn gradcheck<F>(vars: &[(String, Var)], f: F, per_var: usize, seed: u64) -> GradReport
where
    F: Fn() -> Tensor,
{
    let out = f();
    assert_eq!(out.dtype(), DType::F64, "gradcheck runs in f64");
    assert_eq!(out.elem_count(), 1, "gradcheck needs a scalar");
    let grads = out.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let scalar = |t: Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base = values(var);
        let n = base.len();
        let picks: Vec<usize> = if n <= per_var {
            (0..n).collect()
        } else {
            (0..per_var).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let mut x = base.clone();
            x[i] = base[i] + FD_STEP;
            set_values(var, &x);
            let up = scalar(f());
            x[i] = base[i] - FD_STEP;
            set_values(var, &x);
            let down = scalar(f());
            set_values(var, &base);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    assert!(report.checked > 0, "gradcheck compared nothing");
    report
}

/// Random f64 variable with entries in [-1, 1).
pub fn rand_var(shape: &[usize], rng: &mut ChaCha8Rng) -> Var {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap()
}

/// Fixed random weights for turning a tensor into a scalar; a plain sum
/// hides errors that cancel across elements.
pub fn probe(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn weighted_sum(t: &Tensor, seed: u64) -> Tensor {
    (t * probe(t.dims(), seed)).unwrap().sum_all().unwrap()
}

/// Every parameter of a store as (name, var) pairs.
pub fn store_vars(store: &segchange::nn::ParamStore) -> Vec<(String, Var)> {
    store.iter().map(|(n, v)| (n.clone(), v.clone())).collect()
}

/// Overwrites every parameter with uniform values in [-scale, scale).
pub fn randomize(store: &segchange::nn::ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, v) in store.iter() {
        let data: Vec<f64> = (0..v.elem_count()).map(|_| rng.gen_range(-scale..scale)).collect();
        let t = Tensor::from_vec(data, v.dims(), &Device::Cpu)
            .unwrap()
            .to_dtype(v.dtype())
            .unwrap();
        v.set(&t).unwrap();
    }
}

/// Row-major copy of any tensor as f64.
pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    rand_var(shape, rng).as_tensor().clone()
}
