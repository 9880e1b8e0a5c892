//! Dense-matrix oracles shared by the integration tests.
#![allow(dead_code)]

use mscnn::grid::{Grid2D, Image, TransferKind};
use mscnn::stencil::Stencil;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_stencil(rng: &mut ChaCha8Rng, k: usize) -> Stencil {
    Stencil::new(k, (0..k * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, grid: Grid2D) -> Image {
    Image::new(
        grid,
        (0..grid.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

pub fn vec_of(img: &Image) -> DVector<f64> {
    DVector::from_column_slice(img.values())
}

/// The circulant matrix of `s` on `grid`, written out entry by entry.
pub fn circulant(s: &Stencil, grid: Grid2D) -> DMatrix<f64> {
    let (nx, ny, k) = (grid.nx(), grid.ny(), s.k());
    let c = (k / 2) as isize;
    let mut m = DMatrix::zeros(nx * ny, nx * ny);
    for i in 0..ny {
        for j in 0..nx {
            for p in 0..k {
                for q in 0..k {
                    let r = (i as isize + p as isize - c).rem_euclid(ny as isize) as usize;
                    let col = (j as isize + q as isize - c).rem_euclid(nx as isize) as usize;
                    m[(i * nx + j, r * nx + col)] += s.at(p, q);
                }
            }
        }
    }
    m
}

/// 1D restriction (n × 2n) and prolongation (2n × n) matrices.
pub fn transfer_1d(kind: TransferKind, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let f = 2 * n;
    let mut r = DMatrix::zeros(n, f);
    let mut p = DMatrix::zeros(f, n);
    let w = |i: isize, m: usize| i.rem_euclid(m as isize) as usize;
    match kind {
        TransferKind::ConstantAverage => {
            for i in 0..n {
                r[(i, 2 * i)] = 0.5;
                r[(i, 2 * i + 1)] = 0.5;
                p[(2 * i, i)] = 1.0;
                p[(2 * i + 1, i)] = 1.0;
            }
        }
        TransferKind::BilinearFullWeighting => {
            for i in 0..n {
                let b = 2 * i as isize;
                for (off, wt) in [(-1, 0.125), (0, 0.375), (1, 0.375), (2, 0.125)] {
                    r[(i, w(b + off, f))] += wt;
                }
                p[(2 * i, i)] += 0.75;
                p[(2 * i, w(i as isize - 1, n))] += 0.25;
                p[(2 * i + 1, i)] += 0.75;
                p[(2 * i + 1, w(i as isize + 1, n))] += 0.25;
            }
        }
    }
    (r, p)
}

/// 2D restriction and prolongation on a square coarse grid of side `n`.
pub fn transfer_2d(kind: TransferKind, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (r, p) = transfer_1d(kind, n);
    (r.kronecker(&r), p.kronecker(&p))
}

/// Largest distance in a greedy nearest-neighbour pairing of two multisets.
pub fn multiset_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut used = vec![false; b.len()];
    let mut worst = 0.0f64;
    for x in a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, y)| (j, (x - y).norm()))
            .min_by(|l, r| l.1.total_cmp(&r.1))
            .unwrap();
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}
