//! Cell-centered periodic 2D grids, images on them, and the dyadic
//! restriction/prolongation pairs that move images between resolutions.
//!
//! Storage is row-major with the origin at the top-left cell: the value of
//! row `iy`, column `ix` lives at `iy * nx + ix`. All boundary handling is
//! periodic.

use crate::error::{Error, Result};

/// A uniform cell-centered grid of `nx × ny` square pixels with edge `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
    h: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, h: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Dimension(format!("grid {nx}x{ny} has no cells")));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Dimension(format!("pixel size {h} must be positive")));
        }
        Ok(Self { nx, ny, h })
    }

    /// Square `n × n` grid covering the unit square (`h = 1/n`).
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0 / n as f64)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel area `h^d` with `d = 2`.
    pub fn cell_area(&self) -> f64 {
        self.h * self.h
    }

    pub fn coarsen(&self) -> Result<Self> {
        if !self.nx.is_multiple_of(2) || !self.ny.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "cannot coarsen odd grid {}x{}",
                self.nx, self.ny
            )));
        }
        Ok(Self {
            nx: self.nx / 2,
            ny: self.ny / 2,
            h: 2.0 * self.h,
        })
    }

    pub fn refine(&self) -> Self {
        Self {
            nx: 2 * self.nx,
            ny: 2 * self.ny,
            h: 0.5 * self.h,
        }
    }

    /// Same cell counts (pixel size may differ).
    pub fn same_shape(&self, other: &Grid2D) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }
}

/// A scalar field sampled at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    grid: Grid2D,
    values: Vec<f64>,
}

impl Image {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "image has {} values but grid {}x{} needs {}",
                values.len(),
                grid.nx,
                grid.ny,
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "image contains non-finite values".into(),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid2D, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Unit impulse at `(row, col)`.
    pub fn delta(grid: Grid2D, row: usize, col: usize) -> Self {
        let mut img = Self::zeros(grid);
        img.values[row * grid.nx + col] = 1.0;
        img
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.nx + col]
    }

    /// Periodic translation: the output at `(r, c)` is the input at
    /// `(r - dy, c - dx)` modulo the grid.
    pub fn shifted(&self, dy: isize, dx: isize) -> Self {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut out = vec![0.0; self.values.len()];
        for r in 0..ny {
            let sr = wrap(r as isize - dy, ny);
            for c in 0..nx {
                let sc = wrap(c as isize - dx, nx);
                out[r * nx + c] = self.values[sr * nx + sc];
            }
        }
        Self {
            grid: self.grid,
            values: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub(crate) fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Which restriction/prolongation pair to use between dyadic levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransferKind {
    /// Mean over each 2×2 block; piecewise-constant injection back.
    #[default]
    ConstantAverage,
    /// Cell-centered bilinear prolongation (9/16, 3/16, 3/16, 1/16) with
    /// full-weighting restriction `R = Pᵀ / 4`.
    BilinearFullWeighting,
}

impl TransferKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransferKind::ConstantAverage => "constant",
            TransferKind::BilinearFullWeighting => "bilinear",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "constant" => Some(TransferKind::ConstantAverage),
            "bilinear" => Some(TransferKind::BilinearFullWeighting),
            _ => None,
        }
    }
}

/// A matched restriction/prolongation pair. `gamma` is the eigenvalue of
/// `R P` on constant images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferPair {
    pub kind: TransferKind,
    pub gamma: f64,
}

impl Default for TransferPair {
    fn default() -> Self {
        Self::new(TransferKind::default())
    }
}

impl TransferPair {
    pub fn new(kind: TransferKind) -> Self {
        // Both pairs are normalized so that R P maps a constant to itself.
        Self { kind, gamma: 1.0 }
    }

    pub fn constant_average() -> Self {
        Self::new(TransferKind::ConstantAverage)
    }

    pub fn bilinear() -> Self {
        Self::new(TransferKind::BilinearFullWeighting)
    }

    /// 1D prolongation taps: coarse indices and weights feeding fine index `f`.
    fn prolong_taps(&self, f: usize, n_coarse: usize) -> Vec<(usize, f64)> {
        let i = f / 2;
        match self.kind {
            TransferKind::ConstantAverage => vec![(i, 1.0)],
            TransferKind::BilinearFullWeighting => {
                let neighbor = if f.is_multiple_of(2) {
                    wrap(i as isize - 1, n_coarse)
                } else {
                    wrap(i as isize + 1, n_coarse)
                };
                vec![(i, 0.75), (neighbor, 0.25)]
            }
        }
    }

    /// 1D restriction taps: fine indices and weights feeding coarse index `i`.
    fn restrict_taps(&self, i: usize, n_fine: usize) -> Vec<(usize, f64)> {
        match self.kind {
            TransferKind::ConstantAverage => vec![(2 * i, 0.5), (2 * i + 1, 0.5)],
            TransferKind::BilinearFullWeighting => {
                let base = 2 * i as isize;
                vec![
                    (wrap(base - 1, n_fine), 0.125),
                    (wrap(base, n_fine), 0.375),
                    (wrap(base + 1, n_fine), 0.375),
                    (wrap(base + 2, n_fine), 0.125),
                ]
            }
        }
    }
}

/// `y_H = R y_h`.
pub fn restrict_image(img: &Image, t: &TransferPair) -> Result<Image> {
    let fine = img.grid;
    let coarse = fine.coarsen()?;
    let cols: Vec<_> = (0..coarse.nx)
        .map(|i| t.restrict_taps(i, fine.nx))
        .collect();
    let rows: Vec<_> = (0..coarse.ny)
        .map(|i| t.restrict_taps(i, fine.ny))
        .collect();
    Ok(apply_separable(img, coarse, &rows, &cols))
}

/// `ỹ_h = P y_H`.
pub fn prolong_image(img: &Image, t: &TransferPair) -> Image {
    let coarse = img.grid;
    let fine = coarse.refine();
    let cols: Vec<_> = (0..fine.nx).map(|f| t.prolong_taps(f, coarse.nx)).collect();
    let rows: Vec<_> = (0..fine.ny).map(|f| t.prolong_taps(f, coarse.ny)).collect();
    apply_separable(img, fine, &rows, &cols)
}

fn apply_separable(
    img: &Image,
    out_grid: Grid2D,
    rows: &[Vec<(usize, f64)>],
    cols: &[Vec<(usize, f64)>],
) -> Image {
    let src_nx = img.grid.nx;
    let mut values = Vec::with_capacity(out_grid.len());
    for row_taps in rows {
        for col_taps in cols {
            let mut acc = 0.0;
            for &(r, wr) in row_taps {
                for &(c, wc) in col_taps {
                    acc += wr * wc * img.values[r * src_nx + c];
                }
            }
            values.push(acc);
        }
    }
    Image {
        grid: out_grid,
        values,
    }
}

/// Max over coarse basis images `e_i` of `‖R P e_i − γ e_i‖∞`, where `grid`
/// is the fine grid of the pair.
pub fn verify_rp_identity(t: &TransferPair, grid: &Grid2D) -> Result<f64> {
    let coarse = grid.coarsen()?;
    let mut worst = 0.0f64;
    for r in 0..coarse.ny {
        for c in 0..coarse.nx {
            let e = Image::delta(coarse, r, c);
            let rp = restrict_image(&prolong_image(&e, t), t)?;
            let dev = rp
                .values
                .iter()
                .zip(&e.values)
                .map(|(a, b)| (a - t.gamma * b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(dev);
        }
    }
    Ok(worst)
}

/// Normalized 1D Gaussian taps on offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "blur sigma {sigma} must be positive"
        )));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|w| *w /= total);
    Ok(taps)
}

/// Periodic Gaussian smoothing, applied separably along rows then columns.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    let taps = gaussian_kernel_1d(sigma)?;
    let radius = (taps.len() / 2) as isize;
    let (nx, ny) = (img.grid.nx, img.grid.ny);

    let mut tmp = vec![0.0; img.values.len()];
    for r in 0..ny {
        let row = &img.values[r * nx..(r + 1) * nx];
        for c in 0..nx {
            let mut acc = 0.0;
            for (k, w) in taps.iter().enumerate() {
                acc += w * row[wrap(c as isize + k as isize - radius, nx)];
            }
            tmp[r * nx + c] = acc;
        }
    }
    let mut out = vec![0.0; img.values.len()];
    for r in 0..ny {
        for c in 0..nx {
            let mut acc = 0.0;
            for (k, w) in taps.iter().enumerate() {
                acc += w * tmp[wrap(r as isize + k as isize - radius, ny) * nx + c];
            }
            out[r * nx + c] = acc;
        }
    }
    Ok(Image {
        grid: img.grid,
        values: out,
    })
}
