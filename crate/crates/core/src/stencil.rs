//! Convolution stencils on periodic grids: application, circulant spectra,
//! and Galerkin transfer of stencils between dyadic resolutions.
//!
//! Convolution follows the cross-correlation convention with the center
//! weight aligned to the output pixel:
//!
//! ```text
//! out(i, j) = Σ_{p,q} w(p, q) · img(i + p − c, j + q − c)     (periodic)
//! ```
//!
//! where `c = k / 2`. The coarse stencil of a fine stencil `s_h` is defined
//! by the Galerkin product `K_H = R K_h(s_h) P`, truncated to the same
//! `k × k` support. That relation is linear in the weights, so it is
//! captured once per `(k, TransferPair)` as a `k² × k²` [`CoarsenMap`];
//! refinement solves the same system in reverse.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{prolong_image, restrict_image, wrap, Grid2D, Image, TransferPair};

/// Condition number above which a coarsening map is treated as singular.
pub const ILL_POSED_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    k: usize,
    weights: Vec<f64>,
}

impl Stencil {
    pub fn new(k: usize, weights: Vec<f64>) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Dimension(format!("stencil size {k} must be odd")));
        }
        if weights.len() != k * k {
            return Err(Error::Dimension(format!(
                "stencil of size {k} needs {} weights, got {}",
                k * k,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "stencil weights must be finite".into(),
            ));
        }
        Ok(Self { k, weights })
    }

    pub fn zeros(k: usize) -> Self {
        assert!(k % 2 == 1, "stencil size must be odd");
        Self {
            k,
            weights: vec![0.0; k * k],
        }
    }

    pub fn identity(k: usize) -> Self {
        let mut s = Self::zeros(k);
        let c = k / 2;
        s.weights[c * k + c] = 1.0;
        s
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn center(&self) -> usize {
        self.k / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn at(&self, p: usize, q: usize) -> f64 {
        self.weights[p * self.k + q]
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Stencil) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Multi-channel convolution: `c_out × c_in` stencils, output-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilBank {
    c_in: usize,
    c_out: usize,
    stencils: Vec<Stencil>,
}

impl StencilBank {
    pub fn new(c_in: usize, c_out: usize, stencils: Vec<Stencil>) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Dimension(
                "stencil bank needs at least one channel".into(),
            ));
        }
        if stencils.len() != c_in * c_out {
            return Err(Error::Dimension(format!(
                "bank {c_out}x{c_in} needs {} stencils, got {}",
                c_in * c_out,
                stencils.len()
            )));
        }
        let k = stencils[0].k;
        if stencils.iter().any(|s| s.k != k) {
            return Err(Error::Dimension("bank stencils differ in size".into()));
        }
        Ok(Self {
            c_in,
            c_out,
            stencils,
        })
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            c_in,
            c_out,
            stencils: vec![Stencil::zeros(k); c_in * c_out],
        }
    }

    /// Identity on the diagonal channel pairs, zero elsewhere. With
    /// `c_in = 1` this replicates the input into every output channel.
    pub fn identity(c_in: usize, c_out: usize, k: usize) -> Self {
        let mut bank = Self::zeros(c_in, c_out, k);
        for o in 0..c_out {
            if c_in == 1 || o < c_in {
                let i = if c_in == 1 { 0 } else { o };
                bank.stencils[o * c_in + i] = Stencil::identity(k);
            }
        }
        bank
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn k(&self) -> usize {
        self.stencils[0].k
    }

    pub fn get(&self, out: usize, inp: usize) -> &Stencil {
        &self.stencils[out * self.c_in + inp]
    }

    pub fn get_mut(&mut self, out: usize, inp: usize) -> &mut Stencil {
        &mut self.stencils[out * self.c_in + inp]
    }

    pub fn stencils(&self) -> &[Stencil] {
        &self.stencils
    }

    pub fn stencils_mut(&mut self) -> &mut [Stencil] {
        &mut self.stencils
    }

    /// All weights, flattened in storage order.
    pub fn flat(&self) -> impl Iterator<Item = &f64> {
        self.stencils.iter().flat_map(|s| s.weights.iter())
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.stencils.iter_mut().flat_map(|s| s.weights.iter_mut())
    }

    pub fn num_weights(&self) -> usize {
        self.stencils.len() * self.k() * self.k()
    }

    pub fn same_shape(&self, other: &StencilBank) -> bool {
        self.c_in == other.c_in && self.c_out == other.c_out && self.k() == other.k()
    }

    pub fn max_abs_diff(&self, other: &StencilBank) -> f64 {
        self.flat()
            .zip(other.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `dst += K(s) src` on an `nx × ny` periodic grid.
pub(crate) fn correlate_add(s: &Stencil, src: &[f64], nx: usize, ny: usize, dst: &mut [f64]) {
    let k = s.k;
    let c = (k / 2) as isize;
    for p in 0..k {
        for q in 0..k {
            let w = s.weights[p * k + q];
            if w == 0.0 {
                continue;
            }
            let dy = p as isize - c;
            let dx = q as isize - c;
            for i in 0..ny {
                let si = wrap(i as isize + dy, ny) * nx;
                let di = i * nx;
                for j in 0..nx {
                    dst[di + j] += w * src[si + wrap(j as isize + dx, nx)];
                }
            }
        }
    }
}

/// `dst += K(s)ᵀ src`.
pub(crate) fn correlate_transpose_add(
    s: &Stencil,
    src: &[f64],
    nx: usize,
    ny: usize,
    dst: &mut [f64],
) {
    let k = s.k;
    let c = (k / 2) as isize;
    for p in 0..k {
        for q in 0..k {
            let w = s.weights[p * k + q];
            if w == 0.0 {
                continue;
            }
            let dy = p as isize - c;
            let dx = q as isize - c;
            for i in 0..ny {
                let si = i * nx;
                let di = wrap(i as isize + dy, ny) * nx;
                for j in 0..nx {
                    dst[di + wrap(j as isize + dx, nx)] += w * src[si + j];
                }
            }
        }
    }
}

/// `grad(p, q) += Σ_{i,j} upstream(i, j) · input(i + p − c, j + q − c)`, the
/// derivative of `⟨upstream, K(s) input⟩` with respect to the weights.
pub(crate) fn weight_gradient_add(
    k: usize,
    upstream: &[f64],
    input: &[f64],
    nx: usize,
    ny: usize,
    grad: &mut [f64],
) {
    let c = (k / 2) as isize;
    for p in 0..k {
        for q in 0..k {
            let dy = p as isize - c;
            let dx = q as isize - c;
            let mut acc = 0.0;
            for i in 0..ny {
                let si = wrap(i as isize + dy, ny) * nx;
                let ui = i * nx;
                for j in 0..nx {
                    acc += upstream[ui + j] * input[si + wrap(j as isize + dx, nx)];
                }
            }
            grad[p * k + q] += acc;
        }
    }
}

/// Periodic cross-correlation of `img` with `s`.
pub fn conv_apply(s: &Stencil, img: &Image) -> Result<Image> {
    let g = img.grid();
    check_fits(s.k, &g)?;
    let mut out = vec![0.0; g.len()];
    correlate_add(s, img.values(), g.nx(), g.ny(), &mut out);
    Image::new(g, out)
}

fn check_fits(k: usize, g: &Grid2D) -> Result<()> {
    if g.nx() < k || g.ny() < k {
        return Err(Error::Dimension(format!(
            "grid {}x{} is smaller than stencil {k}x{k}",
            g.nx(),
            g.ny()
        )));
    }
    Ok(())
}

/// Eigenvalues of the circulant operator `K(s)` on a grid, indexed by
/// frequency `(ω_row, ω_col)` at `ω_row * nx + ω_col`.
#[derive(Debug, Clone)]
pub struct Symbol {
    pub grid: Grid2D,
    pub values: Vec<Complex64>,
}

/// Evaluates `λ(ω) = Σ_{p,q} w(p,q) exp(2πi (ω_r (p−c)/ny + ω_c (q−c)/nx))`,
/// the discrete Fourier transform of the centered stencil.
pub fn stencil_symbol(s: &Stencil, grid: &Grid2D) -> Result<Symbol> {
    check_fits(s.k, grid)?;
    let (nx, ny) = (grid.nx(), grid.ny());
    let c = s.center() as f64;
    let tau = std::f64::consts::TAU;
    let mut values = Vec::with_capacity(grid.len());
    for wr in 0..ny {
        for wc in 0..nx {
            let mut acc = Complex64::new(0.0, 0.0);
            for p in 0..s.k {
                for q in 0..s.k {
                    let w = s.at(p, q);
                    if w == 0.0 {
                        continue;
                    }
                    let phase = tau
                        * (wr as f64 * (p as f64 - c) / ny as f64
                            + wc as f64 * (q as f64 - c) / nx as f64);
                    acc += w * Complex64::from_polar(1.0, phase);
                }
            }
            values.push(acc);
        }
    }
    Ok(Symbol {
        grid: *grid,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    /// `max Re(λ)` over the spectrum.
    pub max_real: f64,
    /// `max |1 + δt λ|`, the linearized forward-Euler amplification.
    pub spectral_radius_step: f64,
}

pub fn stability_report(s: &Stencil, grid: &Grid2D, dt: f64) -> Result<StabilityReport> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "time step {dt} must be positive"
        )));
    }
    let sym = stencil_symbol(s, grid)?;
    let max_real = sym
        .values
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let spectral_radius_step = sym
        .values
        .iter()
        .map(|l| (Complex64::new(1.0, 0.0) + dt * l).norm())
        .fold(0.0, f64::max);
    Ok(StabilityReport {
        max_real,
        spectral_radius_step,
    })
}

/// Linear map from fine stencil weights to coarse stencil weights for one
/// transfer pair, together with its LU factors for the reverse solve.
#[derive(Debug, Clone)]
pub struct CoarsenMap {
    k: usize,
    transfer: TransferPair,
    matrix: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    condition: f64,
    truncation_mass: f64,
}

impl CoarsenMap {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn transfer(&self) -> TransferPair {
        self.transfer
    }

    /// `k² × k²` matrix, row-major entry `(i, j)` at `matrix()[(i, j)]`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// 2-norm condition number of the map.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Total absolute Galerkin weight falling outside the `k × k` window,
    /// summed over all unit fine stencils.
    pub fn truncation_mass(&self) -> f64 {
        self.truncation_mass
    }
}

pub fn build_coarsen_map(k: usize, t: &TransferPair) -> Result<CoarsenMap> {
    if k.is_multiple_of(2) || k == 0 {
        return Err(Error::Dimension(format!("stencil size {k} must be odd")));
    }
    let n = k * k;
    let c = k / 2;
    // 4k fine cells per side keeps the coarse support clear of wraparound.
    let fine = Grid2D::new(4 * k, 4 * k, 1.0)?;
    let coarse = fine.coarsen()?;
    let (r0, c0) = (coarse.ny() / 2, coarse.nx() / 2);
    let delta = Image::delta(coarse, r0, c0);
    let lifted = prolong_image(&delta, t);

    let mut matrix = DMatrix::zeros(n, n);
    let mut truncation_mass = 0.0;
    for j in 0..n {
        let mut unit = Stencil::zeros(k);
        unit.weights[j] = 1.0;
        let response = restrict_image(&conv_apply(&unit, &lifted)?, t)?;
        // (K_H δ)(I, J) = s_H(r0 − I + c, c0 − J + c).
        let mut kept = 0.0;
        for p in 0..k {
            for q in 0..k {
                let v = response.at(r0 + c - p, c0 + c - q);
                matrix[(p * k + q, j)] = v;
                kept += v.abs();
            }
        }
        let total: f64 = response.values().iter().map(|v| v.abs()).sum();
        truncation_mass += (total - kept).max(0.0);
    }

    let sv = matrix.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(condition <= ILL_POSED_CONDITION) {
        return Err(Error::IllPosed { condition });
    }
    let lu = matrix.clone().lu();
    Ok(CoarsenMap {
        k,
        transfer: *t,
        matrix,
        lu,
        condition,
        truncation_mass,
    })
}

pub fn coarsen_stencil(s: &Stencil, m: &CoarsenMap) -> Result<Stencil> {
    check_map_size(s, m)?;
    let fine = DVector::from_column_slice(&s.weights);
    let coarse = &m.matrix * fine;
    Ok(Stencil {
        k: s.k,
        weights: coarse.as_slice().to_vec(),
    })
}

/// Solves `M s_h = s_H` for the fine stencil whose coarsening is `s_H`.
pub fn refine_stencil(s_coarse: &Stencil, m: &CoarsenMap) -> Result<Stencil> {
    check_map_size(s_coarse, m)?;
    let rhs = DVector::from_column_slice(&s_coarse.weights);
    let fine = m.lu.solve(&rhs).ok_or(Error::IllPosed {
        condition: f64::INFINITY,
    })?;
    Ok(Stencil {
        k: s_coarse.k,
        weights: fine.as_slice().to_vec(),
    })
}

fn check_map_size(s: &Stencil, m: &CoarsenMap) -> Result<()> {
    if s.k != m.k {
        return Err(Error::Dimension(format!(
            "stencil size {} does not match coarsening map size {}",
            s.k, m.k
        )));
    }
    Ok(())
}

pub fn coarsen_bank(b: &StencilBank, m: &CoarsenMap) -> Result<StencilBank> {
    map_bank(b, |s| coarsen_stencil(s, m))
}

pub fn refine_bank(b: &StencilBank, m: &CoarsenMap) -> Result<StencilBank> {
    map_bank(b, |s| refine_stencil(s, m))
}

fn map_bank(b: &StencilBank, f: impl Fn(&Stencil) -> Result<Stencil>) -> Result<StencilBank> {
    let stencils = b.stencils.iter().map(f).collect::<Result<Vec<_>>>()?;
    StencilBank::new(b.c_in, b.c_out, stencils)
}
