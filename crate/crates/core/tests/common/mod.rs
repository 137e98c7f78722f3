#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svs_core::matrix::Matrix;
use svs_core::svd::{reconstruct, svd};
use svs_core::tensor_store::{Checkpoint, DType, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in [-1, 1].
pub fn random_matrix(rng: &mut impl Rng, m: usize, n: usize) -> Matrix {
    let data = (0..m * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Matrix::from_vec(m, n, data).unwrap()
}

/// `U diag(sigma) V^T` with random orthonormal bases; `sigma` needs
/// `min(m, n)` entries.
pub fn with_spectrum(rng: &mut impl Rng, m: usize, n: usize, sigma: &[f64]) -> Matrix {
    let f = svd(&random_matrix(rng, m, n)).unwrap();
    reconstruct(&f.with_sigma(sigma.to_vec()).unwrap())
}

pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max)
}

/// Entries of `sigma` relative to its largest value.
pub fn max_rel_to_top(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let top = b.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / top).fold(0.0, f64::max)
}

pub fn f64_tensor(name: &str, shape: Vec<usize>, values: &[f64]) -> Tensor {
    Tensor::from_f64(name, shape, DType::F64, values).unwrap()
}

/// A checkpoint of layers `l{i}.weight` with matching `l{i}.bias` plus one
/// unpaired rank-1 gain, in random dtypes and shapes.
pub fn random_checkpoint(rng: &mut impl Rng, layers: usize, dtype: Option<DType>) -> Checkpoint {
    let mut ck = Checkpoint::new();
    let pick =
        |rng: &mut dyn rand::RngCore| dtype.unwrap_or(if rng.random_bool(0.5) { DType::F32 } else { DType::F64 });
    for i in 0..layers {
        let rank = rng.random_range(2..=4usize);
        let mut shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=5usize)).collect();
        shape[0] = rng.random_range(2..=6);
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        ck.insert(Tensor::from_f64(format!("l{i}.weight"), shape.clone(), pick(rng), &vals).unwrap()).unwrap();
        let b: Vec<f64> = (0..shape[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        ck.insert(Tensor::from_f64(format!("l{i}.bias"), vec![shape[0]], pick(rng), &b).unwrap()).unwrap();
    }
    let g: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
    ck.insert(Tensor::from_f64("norm.gain", vec![3], pick(rng), &g).unwrap()).unwrap();
    ck
}

fn gram(w: &Matrix) -> Matrix {
    w.transpose().matmul(w)
}

/// Singular values of a 2x2 matrix from the quadratic `l^2 - tr l + det = 0`.
pub fn oracle_2x2(w: &Matrix) -> [f64; 2] {
    let g = gram(w);
    let tr = g[(0, 0)] + g[(1, 1)];
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    let disc = ((tr * tr) / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc;
    // product form keeps the small root accurate
    let l2 = if l1 > 0.0 { det / l1 } else { 0.0 };
    [l1.sqrt(), l2.max(0.0).sqrt()]
}

/// Singular values of a 3x3 matrix from the trigonometric solution of the
/// characteristic cubic of the symmetric matrix `W^T W`.
pub fn oracle_3x3(w: &Matrix) -> [f64; 3] {
    let a = gram(w);
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = (a[(0, 0)] + a[(1, 1)] + a[(2, 2)]) / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = Matrix::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            b[(i, j)] = (a[(i, j)] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det_b = b[(0, 0)] * (b[(1, 1)] * b[(2, 2)] - b[(1, 2)] * b[(2, 1)])
        - b[(0, 1)] * (b[(1, 0)] * b[(2, 2)] - b[(1, 2)] * b[(2, 0)])
        + b[(0, 2)] * (b[(1, 0)] * b[(2, 1)] - b[(1, 1)] * b[(2, 0)]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let l2 = 3.0 * q - l1 - l3;
    // the smallest root loses relative accuracy through cancellation; recover
    // it from the determinant of W^T W instead
    let det_a = a[(0, 0)] * (a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)])
        - a[(0, 1)] * (a[(1, 0)] * a[(2, 2)] - a[(1, 2)] * a[(2, 0)])
        + a[(0, 2)] * (a[(1, 0)] * a[(2, 1)] - a[(1, 1)] * a[(2, 0)]);
    let l3 = if l1 * l2 > 0.0 { det_a / (l1 * l2) } else { l3 };
    [l1.sqrt(), l2.max(0.0).sqrt(), l3.max(0.0).sqrt()]
}
