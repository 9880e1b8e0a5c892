//! Residual forward propagation as forward Euler in time,
//!
//! ```text
//! y_0 = L x,    y_{k+1} = y_k + δt · σ(K(s_k) y_k + b_k),    k = 0..N-1
//! ```
//!
//! the `h^d`-scaled softmax classifier on the final state, the
//! cross-entropy objective, and its reverse-mode gradient.

use rayon::prelude::*;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::grid::{Grid2D, Image};
use crate::stencil::{correlate_add, correlate_transpose_add, weight_gradient_add, StencilBank};
use crate::training::{reg_value_and_grad, RegConfig};

/// Examples per reduction chunk. Chunk boundaries do not depend on the
/// worker count, so batch sums are identical for any degree of parallelism.
const REDUCTION_CHUNK: usize = 16;

/// A stack of `channels` images on one grid, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid: Grid2D,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(grid: Grid2D, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() * channels {
            return Err(Error::Dimension(format!(
                "feature map needs {} values, got {}",
                grid.len() * channels,
                data.len()
            )));
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn zeros(grid: Grid2D, channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; grid.len() * channels],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            grid: img.grid(),
            channels: 1,
            data: img.values().to_vec(),
        }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_image(&self, c: usize) -> Image {
        Image::new(self.grid, self.channel(c).to_vec()).expect("channel matches grid")
    }

    pub fn from_channels(channels: &[Image]) -> Result<Self> {
        let grid = channels
            .first()
            .ok_or_else(|| Error::Dimension("feature map needs a channel".into()))?
            .grid();
        if channels.iter().any(|c| c.grid() != grid) {
            return Err(Error::Dimension("channels live on different grids".into()));
        }
        let data = channels
            .iter()
            .flat_map(|c| c.values().iter().copied())
            .collect();
        Self::new(grid, channels.len(), data)
    }

    pub fn with_grid(mut self, grid: Grid2D) -> Result<Self> {
        if !grid.same_shape(&self.grid) {
            return Err(Error::Dimension("grid shape differs".into()));
        }
        self.grid = grid;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationKind {
    #[default]
    Tanh,
    Identity,
}

impl ActivationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(ActivationKind::Tanh),
            "identity" => Some(ActivationKind::Identity),
            _ => None,
        }
    }
}

/// `σ_α(z) = f(α z)`, with `α` an input gain (default 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub kind: ActivationKind,
    pub gain: f64,
}

impl Default for Activation {
    fn default() -> Self {
        Self::tanh()
    }
}

impl Activation {
    pub fn tanh() -> Self {
        Self {
            kind: ActivationKind::Tanh,
            gain: 1.0,
        }
    }

    pub fn identity() -> Self {
        Self {
            kind: ActivationKind::Identity,
            gain: 1.0,
        }
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match self.kind {
            ActivationKind::Tanh => (self.gain * z).tanh(),
            ActivationKind::Identity => self.gain * z,
        }
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match self.kind {
            ActivationKind::Tanh => {
                let t = (self.gain * z).tanh();
                self.gain * (1.0 - t * t)
            }
            ActivationKind::Identity => self.gain,
        }
    }
}

/// Propagation parameters `θ_k = (s_k, b_k)`, time step, and the embedding `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    dt: f64,
    final_time: f64,
    banks: Vec<StencilBank>,
    biases: Vec<Vec<f64>>,
    embed: StencilBank,
    learn_embed: bool,
    activation: Activation,
}

impl NetworkParams {
    /// Builds parameters for `banks.len()` layers with step `dt`; the final
    /// time is `N · dt`.
    pub fn new(
        dt: f64,
        banks: Vec<StencilBank>,
        biases: Vec<Vec<f64>>,
        embed: StencilBank,
        activation: Activation,
        learn_embed: bool,
    ) -> Result<Self> {
        let final_time = dt * banks.len() as f64;
        Self::with_final_time(
            dt,
            final_time,
            banks,
            biases,
            embed,
            activation,
            learn_embed,
        )
    }

    pub fn with_final_time(
        dt: f64,
        final_time: f64,
        banks: Vec<StencilBank>,
        biases: Vec<Vec<f64>>,
        embed: StencilBank,
        activation: Activation,
        learn_embed: bool,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "time step {dt} must be positive"
            )));
        }
        let n = banks.len() as f64;
        if (n * dt - final_time).abs() > 1e-12 * final_time.abs().max(dt) {
            return Err(Error::InvalidArgument(format!(
                "final time {final_time} differs from N·δt = {}",
                n * dt
            )));
        }
        if embed.c_in() != 1 {
            return Err(Error::Dimension(
                "embedding must take a single input channel".into(),
            ));
        }
        let nf = embed.c_out();
        let k = embed.k();
        if biases.len() != banks.len() {
            return Err(Error::Dimension(
                "one bias vector per layer required".into(),
            ));
        }
        for (bank, bias) in banks.iter().zip(&biases) {
            if bank.c_in() != nf || bank.c_out() != nf || bank.k() != k {
                return Err(Error::Dimension(format!(
                    "layer bank {}x{} (k={}) does not match {nf} channels, k={k}",
                    bank.c_out(),
                    bank.c_in(),
                    bank.k()
                )));
            }
            if bias.len() != nf {
                return Err(Error::Dimension(
                    "bias length must equal channel count".into(),
                ));
            }
        }
        Ok(Self {
            dt,
            final_time,
            banks,
            biases,
            embed,
            learn_embed,
            activation,
        })
    }

    /// All-zero layers with the channel-replicating embedding.
    pub fn zeros(layers: usize, final_time: f64, channels: usize, k: usize) -> Result<Self> {
        let dt = if layers == 0 {
            1.0
        } else {
            final_time / layers as f64
        };
        let final_time = if layers == 0 { 0.0 } else { final_time };
        Self::with_final_time(
            dt,
            final_time,
            vec![StencilBank::zeros(channels, channels, k); layers],
            vec![vec![0.0; channels]; layers],
            StencilBank::identity(1, channels, k),
            Activation::default(),
            false,
        )
    }

    pub fn num_layers(&self) -> usize {
        self.banks.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    pub fn channels(&self) -> usize {
        self.embed.c_out()
    }

    pub fn k(&self) -> usize {
        self.embed.k()
    }

    pub fn banks(&self) -> &[StencilBank] {
        &self.banks
    }

    pub fn banks_mut(&mut self) -> &mut [StencilBank] {
        &mut self.banks
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn embed(&self) -> &StencilBank {
        &self.embed
    }

    pub fn embed_mut(&mut self) -> &mut StencilBank {
        &mut self.embed
    }

    pub fn learn_embed(&self) -> bool {
        self.learn_embed
    }

    pub fn set_learn_embed(&mut self, learn: bool) {
        self.learn_embed = learn;
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn set_activation(&mut self, act: Activation) {
        self.activation = act;
    }

    /// Replaces banks and biases while keeping embedding/activation; the
    /// time step is set to `final_time / N`.
    pub(crate) fn replace_layers(
        &self,
        dt: f64,
        banks: Vec<StencilBank>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        Self::with_final_time(
            dt,
            self.final_time,
            banks,
            biases,
            self.embed.clone(),
            self.activation,
            self.learn_embed,
        )
    }

    pub(crate) fn with_banks(&self, embed: StencilBank, banks: Vec<StencilBank>) -> Result<Self> {
        Self::with_final_time(
            self.dt,
            self.final_time,
            banks,
            self.biases.clone(),
            embed,
            self.activation,
            self.learn_embed,
        )
    }
}

/// Softmax classifier: one weight field per class over all feature
/// channels, plus class biases `μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    weights: Vec<FeatureMap>,
    mu: Vec<f64>,
}

impl Classifier {
    pub fn new(weights: Vec<FeatureMap>, mu: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != mu.len() {
            return Err(Error::Dimension(format!(
                "classifier has {} weight fields and {} biases",
                weights.len(),
                mu.len()
            )));
        }
        let (g, c) = (weights[0].grid, weights[0].channels);
        if weights.iter().any(|w| w.grid != g || w.channels != c) {
            return Err(Error::Dimension(
                "classifier weight fields differ in shape".into(),
            ));
        }
        Ok(Self { weights, mu })
    }

    pub fn zeros(num_classes: usize, grid: Grid2D, channels: usize) -> Self {
        Self {
            weights: vec![FeatureMap::zeros(grid, channels); num_classes],
            mu: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.mu.len()
    }

    pub fn grid(&self) -> Grid2D {
        self.weights[0].grid
    }

    pub fn channels(&self) -> usize {
        self.weights[0].channels
    }

    pub fn weights(&self) -> &[FeatureMap] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [FeatureMap] {
        &mut self.weights
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn mu_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }
}

/// States `y_0 … y_N` of one forward pass plus the pre-activations
/// `K(s_k) y_k + b_k` needed by the reverse sweep.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<FeatureMap>,
    pub preacts: Vec<FeatureMap>,
}

impl Trajectory {
    pub fn output(&self) -> &FeatureMap {
        self.states.last().expect("trajectory holds y_0")
    }
}

fn check_stencil_fits(k: usize, grid: &Grid2D) -> Result<()> {
    if grid.nx() < k || grid.ny() < k {
        return Err(Error::Dimension(format!(
            "grid {}x{} is smaller than stencil {k}x{k}",
            grid.nx(),
            grid.ny()
        )));
    }
    Ok(())
}

/// Applies a bank: `out_o = Σ_i K(s_{o,i}) y_i`.
pub fn apply_bank(bank: &StencilBank, y: &FeatureMap) -> Result<FeatureMap> {
    if bank.c_in() != y.channels {
        return Err(Error::Dimension(format!(
            "bank expects {} input channels, got {}",
            bank.c_in(),
            y.channels
        )));
    }
    check_stencil_fits(bank.k(), &y.grid)?;
    let (nx, ny, n) = (y.grid.nx(), y.grid.ny(), y.grid.len());
    let mut out = FeatureMap::zeros(y.grid, bank.c_out());
    for o in 0..bank.c_out() {
        let dst = &mut out.data[o * n..(o + 1) * n];
        for i in 0..bank.c_in() {
            correlate_add(bank.get(o, i), y.channel(i), nx, ny, dst);
        }
    }
    Ok(out)
}

/// `y_0 = L x`.
pub fn embed_input(x: &Image, p: &NetworkParams) -> Result<FeatureMap> {
    apply_bank(&p.embed, &FeatureMap::from_image(x))
}

/// `y + δt σ(bank ∗ y + bias)`.
pub fn forward_step(
    y: &FeatureMap,
    bank: &StencilBank,
    bias: &[f64],
    dt: f64,
    act: Activation,
) -> Result<FeatureMap> {
    Ok(step_with_preact(y, bank, bias, dt, act)?.0)
}

fn step_with_preact(
    y: &FeatureMap,
    bank: &StencilBank,
    bias: &[f64],
    dt: f64,
    act: Activation,
) -> Result<(FeatureMap, FeatureMap)> {
    if bank.c_out() != y.channels || bias.len() != bank.c_out() {
        return Err(Error::Dimension(format!(
            "residual step needs {} channels and biases, got {} channels and {} biases",
            bank.c_out(),
            y.channels,
            bias.len()
        )));
    }
    let mut z = apply_bank(bank, y)?;
    let n = y.grid.len();
    for (o, b) in bias.iter().enumerate() {
        z.data[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
    }
    let mut next = y.clone();
    for (yv, zv) in next.data.iter_mut().zip(&z.data) {
        *yv += dt * act.eval(*zv);
    }
    Ok((next, z))
}

/// Runs the embedding and all `N` residual steps, keeping every state.
pub fn forward_propagate(x: &Image, p: &NetworkParams) -> Result<Trajectory> {
    let y0 = embed_input(x, p)?;
    if y0.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { layer: 0 });
    }
    let mut states = Vec::with_capacity(p.num_layers() + 1);
    let mut preacts = Vec::with_capacity(p.num_layers());
    states.push(y0);
    for (k, (bank, bias)) in p.banks.iter().zip(&p.biases).enumerate() {
        let (next, z) = step_with_preact(&states[k], bank, bias, p.dt, p.activation)?;
        if next.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { layer: k + 1 });
        }
        states.push(next);
        preacts.push(z);
    }
    Ok(Trajectory { states, preacts })
}

/// Output state only.
pub fn propagate(x: &Image, p: &NetworkParams) -> Result<FeatureMap> {
    let mut traj = forward_propagate(x, p)?;
    Ok(traj.states.pop().expect("trajectory holds y_0"))
}

fn check_classifier(y: &FeatureMap, c: &Classifier) -> Result<()> {
    if !y.grid.same_shape(&c.grid()) || y.channels != c.channels() {
        return Err(Error::Dimension(format!(
            "features {}x{}x{} do not match classifier {}x{}x{}",
            y.channels,
            y.grid.ny(),
            y.grid.nx(),
            c.channels(),
            c.grid().ny(),
            c.grid().nx()
        )));
    }
    Ok(())
}

/// `z_j = h^d ⟨w_j, y⟩ + μ_j`.
pub fn logits(y_out: &FeatureMap, c: &Classifier) -> Result<Vec<f64>> {
    check_classifier(y_out, c)?;
    let area = y_out.grid.cell_area();
    Ok(c.weights
        .iter()
        .zip(&c.mu)
        .map(|(w, mu)| area * dot(&w.data, &y_out.data) + mu)
        .collect())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-log softmax(z)[label]`, computed stably.
pub fn cross_entropy(z: &[f64], label: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Class probabilities `softmax(h^d Wᵀ y + μ)`.
pub fn classify(y_out: &FeatureMap, c: &Classifier) -> Result<Vec<f64>> {
    Ok(softmax(&logits(y_out, c)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub data_term: f64,
    pub reg_term: f64,
}

fn check_labels(batch: &Batch<'_>, c: &Classifier) -> Result<()> {
    let num_classes = c.num_classes();
    if let Some(&label) = batch.labels().iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidLabel { label, num_classes });
    }
    Ok(())
}

/// Mean cross-entropy over the batch only.
pub fn data_loss(batch: &Batch<'_>, p: &NetworkParams, c: &Classifier) -> Result<f64> {
    check_labels(batch, c)?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let partial: Vec<f64> = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|(lo, hi)| -> Result<f64> {
            let mut acc = 0.0;
            for i in lo..hi {
                let (x, label) = batch.get(i);
                acc += cross_entropy(&logits(&propagate(x, p)?, c)?, label);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(partial.iter().sum::<f64>() / batch.len() as f64)
}

/// Objective `(1/m) Σ S(...) + R(W, μ, s, b)`.
pub fn loss(
    batch: &Batch<'_>,
    p: &NetworkParams,
    c: &Classifier,
    reg: &RegConfig,
) -> Result<LossValue> {
    let data_term = data_loss(batch, p, c)?;
    let reg_term = reg_value_and_grad(p, c, reg).value;
    Ok(LossValue {
        total: data_term + reg_term,
        data_term,
        reg_term,
    })
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(REDUCTION_CHUNK)
        .map(|lo| (lo, (lo + REDUCTION_CHUNK).min(n)))
        .collect()
}

/// Derivatives of the objective with respect to every parameter block.
/// `embed` is `None` when the embedding is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub banks: Vec<StencilBank>,
    pub biases: Vec<Vec<f64>>,
    pub embed: Option<StencilBank>,
    pub weights: Vec<FeatureMap>,
    pub mu: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &NetworkParams, c: &Classifier) -> Self {
        Self {
            banks: p
                .banks
                .iter()
                .map(|b| StencilBank::zeros(b.c_in(), b.c_out(), b.k()))
                .collect(),
            biases: p.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            embed: p
                .learn_embed
                .then(|| StencilBank::zeros(1, p.embed.c_out(), p.embed.k())),
            weights: c
                .weights
                .iter()
                .map(|w| FeatureMap::zeros(w.grid, w.channels))
                .collect(),
            mu: vec![0.0; c.mu.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.banks.iter_mut().zip(&other.banks) {
            a.flat_mut().zip(b.flat()).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        if let (Some(a), Some(b)) = (self.embed.as_mut(), other.embed.as_ref()) {
            a.flat_mut().zip(b.flat()).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        self.mu.iter_mut().zip(&other.mu).for_each(|(x, y)| *x += y);
    }

    /// Squared norm of the propagation blocks (banks, biases, embedding).
    pub fn propagation_norm_sq(&self) -> f64 {
        let banks: f64 = self
            .banks
            .iter()
            .flat_map(|b| b.flat())
            .map(|v| v * v)
            .sum();
        let biases: f64 = self.biases.iter().flatten().map(|v| v * v).sum();
        let embed: f64 = self
            .embed
            .iter()
            .flat_map(|b| b.flat())
            .map(|v| v * v)
            .sum();
        banks + biases + embed
    }

    fn check_finite(&self) -> Result<()> {
        let finite = |mut it: Box<dyn Iterator<Item = &f64> + '_>| it.all(|v| v.is_finite());
        if !finite(Box::new(self.banks.iter().flat_map(|b| b.flat()))) {
            return Err(Error::NonFiniteGradient { block: "banks" });
        }
        if !finite(Box::new(self.biases.iter().flatten())) {
            return Err(Error::NonFiniteGradient { block: "biases" });
        }
        if !finite(Box::new(self.embed.iter().flat_map(|b| b.flat()))) {
            return Err(Error::NonFiniteGradient { block: "embed" });
        }
        if !finite(Box::new(self.weights.iter().flat_map(|w| w.data.iter()))) {
            return Err(Error::NonFiniteGradient {
                block: "classifier.weights",
            });
        }
        if !finite(Box::new(self.mu.iter())) {
            return Err(Error::NonFiniteGradient {
                block: "classifier.mu",
            });
        }
        Ok(())
    }
}

/// Reverse sweep for one example, scaled by `scale`, accumulated into `g`.
/// Returns the example's cross-entropy.
fn backprop_example(
    x: &Image,
    label: usize,
    p: &NetworkParams,
    c: &Classifier,
    scale: f64,
    g: &mut Gradients,
) -> Result<f64> {
    let traj = forward_propagate(x, p)?;
    let y_out = traj.output();
    let z = logits(y_out, c)?;
    let ce = cross_entropy(&z, label);
    let mut dz = softmax(&z);
    dz[label] -= 1.0;
    dz.iter_mut().for_each(|v| *v *= scale);

    let grid = y_out.grid;
    let (nx, ny, n) = (grid.nx(), grid.ny(), grid.len());
    let area = grid.cell_area();
    let nf = p.channels();

    let mut gy = vec![0.0; nf * n];
    for (j, dzj) in dz.iter().enumerate() {
        g.mu[j] += dzj;
        let w = &c.weights[j].data;
        let gw = &mut g.weights[j].data;
        let s = area * dzj;
        for ((gwv, yv), (gyv, wv)) in gw.iter_mut().zip(&y_out.data).zip(gy.iter_mut().zip(w)) {
            *gwv += s * yv;
            *gyv += s * wv;
        }
    }

    let act = p.activation;
    let mut delta = vec![0.0; nf * n];
    for k in (0..p.num_layers()).rev() {
        let zk = &traj.preacts[k].data;
        for ((d, gyv), zv) in delta.iter_mut().zip(&gy).zip(zk) {
            *d = p.dt * gyv * act.derivative(*zv);
        }
        let yk = &traj.states[k];
        let bank = &p.banks[k];
        for o in 0..nf {
            let d_o = &delta[o * n..(o + 1) * n];
            g.biases[k][o] += d_o.iter().sum::<f64>();
            for i in 0..nf {
                weight_gradient_add(
                    bank.k(),
                    d_o,
                    yk.channel(i),
                    nx,
                    ny,
                    g.banks[k].get_mut(o, i).weights_mut(),
                );
                correlate_transpose_add(bank.get(o, i), d_o, nx, ny, &mut gy[i * n..(i + 1) * n]);
            }
        }
    }

    if let Some(ge) = g.embed.as_mut() {
        for o in 0..nf {
            weight_gradient_add(
                p.embed.k(),
                &gy[o * n..(o + 1) * n],
                x.values(),
                nx,
                ny,
                ge.get_mut(o, 0).weights_mut(),
            );
        }
    }
    Ok(ce)
}

/// Objective value and reverse-mode gradient over a batch. Per-example work
/// runs in parallel; partial sums are reduced in ascending chunk order.
pub fn gradient(
    batch: &Batch<'_>,
    p: &NetworkParams,
    c: &Classifier,
    reg: &RegConfig,
) -> Result<(LossValue, Gradients)> {
    check_labels(batch, c)?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scale = 1.0 / batch.len() as f64;
    let partials: Vec<(f64, Gradients)> = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|(lo, hi)| -> Result<(f64, Gradients)> {
            let mut g = Gradients::zeros_like(p, c);
            let mut ce = 0.0;
            for i in lo..hi {
                let (x, label) = batch.get(i);
                ce += backprop_example(x, label, p, c, scale, &mut g)?;
            }
            Ok((ce, g))
        })
        .collect::<Result<_>>()?;

    let mut total = Gradients::zeros_like(p, c);
    let mut ce_sum = 0.0;
    for (ce, g) in &partials {
        ce_sum += ce;
        total.add_assign(g);
    }
    let reg_eval = reg_value_and_grad(p, c, reg);
    total.add_assign(&reg_eval.grads);
    total.check_finite()?;
    let data_term = ce_sum * scale;
    Ok((
        LossValue {
            total: data_term + reg_eval.value,
            data_term,
            reg_term: reg_eval.value,
        },
        total,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledDataset;
    use crate::stencil::{conv_apply, Stencil};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn rand_bank(rng: &mut impl Rng, c_in: usize, c_out: usize, scale: f64) -> StencilBank {
        StencilBank::new(
            c_in,
            c_out,
            (0..c_in * c_out)
                .map(|_| Stencil::new(3, rand_vec(rng, 9, scale)).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn rand_params(rng: &mut impl Rng, layers: usize, nf: usize, act: Activation) -> NetworkParams {
        NetworkParams::new(
            0.5,
            (0..layers).map(|_| rand_bank(rng, nf, nf, 0.5)).collect(),
            (0..layers).map(|_| rand_vec(rng, nf, 0.3)).collect(),
            rand_bank(rng, 1, nf, 1.0),
            act,
            false,
        )
        .unwrap()
    }

    fn rand_image(rng: &mut impl Rng, grid: Grid2D) -> Image {
        Image::new(grid, rand_vec(rng, grid.len(), 1.0)).unwrap()
    }

    #[test]
    fn params_validate_time_and_shapes() {
        let e = StencilBank::identity(1, 2, 3);
        assert!(NetworkParams::with_final_time(
            0.5,
            1.5,
            vec![StencilBank::zeros(2, 2, 3); 2],
            vec![vec![0.0; 2]; 2],
            e.clone(),
            Activation::tanh(),
            false
        )
        .is_err());
        assert!(NetworkParams::new(
            0.5,
            vec![StencilBank::zeros(3, 3, 3)],
            vec![vec![0.0; 3]],
            e,
            Activation::tanh(),
            false
        )
        .is_err());
    }

    #[test]
    fn embed_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Grid2D::new(5, 5, 0.2).unwrap();
        let x = rand_image(&mut rng, g);
        let p = NetworkParams::zeros(1, 1.0, 1, 3).unwrap();
        assert_eq!(embed_input(&x, &p).unwrap().data(), x.values());

        let mut p = NetworkParams::zeros(1, 1.0, 3, 3).unwrap();
        *p.embed_mut() = StencilBank::zeros(1, 3, 3);
        assert!(embed_input(&x, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        *p.embed_mut() = rand_bank(&mut rng, 1, 3, 1.0);
        let y0 = embed_input(&x, &p).unwrap();
        for o in 0..3 {
            let expect = conv_apply(p.embed().get(o, 0), &x).unwrap();
            assert_eq!(y0.channel(o), expect.values());
        }
    }

    #[test]
    fn forward_step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Grid2D::new(4, 4, 0.25).unwrap();
        let y = FeatureMap::new(g, 2, rand_vec(&mut rng, 32, 1.0)).unwrap();
        let out = forward_step(
            &y,
            &StencilBank::zeros(2, 2, 3),
            &[0.0, 0.0],
            0.7,
            Activation::tanh(),
        )
        .unwrap();
        assert_eq!(out, y);
        let out = forward_step(
            &y,
            &StencilBank::identity(2, 2, 3),
            &[0.0, 0.0],
            1.0,
            Activation::identity(),
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(y.data()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        assert!(forward_step(
            &y,
            &StencilBank::zeros(3, 3, 3),
            &[0.0; 3],
            1.0,
            Activation::tanh()
        )
        .is_err());
    }

    #[test]
    fn forward_step_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid2D::new(5, 4, 0.25).unwrap();
        let nf = 2;
        let y = FeatureMap::new(g, nf, rand_vec(&mut rng, 40, 1.0)).unwrap();
        let bank = rand_bank(&mut rng, nf, nf, 1.0);
        let bias = rand_vec(&mut rng, nf, 1.0);
        let act = Activation {
            kind: ActivationKind::Tanh,
            gain: 1.3,
        };
        let out = forward_step(&y, &bank, &bias, 0.3, act).unwrap();
        for o in 0..nf {
            for r in 0..4 {
                for col in 0..5 {
                    let mut z = bias[o];
                    for i in 0..nf {
                        for p in 0..3 {
                            for q in 0..3 {
                                let rr = (r + 4 + p - 1) % 4;
                                let cc = (col + 5 + q - 1) % 5;
                                z += bank.get(o, i).at(p, q) * y.channel(i)[rr * 5 + cc];
                            }
                        }
                    }
                    let expect = y.channel(o)[r * 5 + col] + 0.3 * (1.3 * z).tanh();
                    assert!((out.channel(o)[r * 5 + col] - expect).abs() <= 1e-13);
                }
            }
        }
    }

    #[test]
    fn forward_propagate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Grid2D::new(6, 6, 1.0 / 6.0).unwrap();
        let x = rand_image(&mut rng, g);

        let p0 = NetworkParams::zeros(0, 0.0, 2, 3).unwrap();
        let t = forward_propagate(&x, &p0).unwrap();
        assert_eq!(t.states.len(), 1);

        let pz = NetworkParams::zeros(3, 1.0, 2, 3).unwrap();
        let t = forward_propagate(&x, &pz).unwrap();
        assert!(t.states.iter().all(|s| s == &t.states[0]));

        let p = rand_params(&mut rng, 2, 2, Activation::tanh());
        let t = forward_propagate(&x, &p).unwrap();
        let y1 = forward_step(
            &embed_input(&x, &p).unwrap(),
            &p.banks()[0],
            &p.biases()[0],
            p.dt(),
            p.activation(),
        )
        .unwrap();
        let y2 = forward_step(&y1, &p.banks()[1], &p.biases()[1], p.dt(), p.activation()).unwrap();
        assert_eq!(t.output(), &y2);
    }

    #[test]
    fn divergence_names_layer() {
        let g = Grid2D::new(4, 4, 1.0).unwrap();
        let x = Image::constant(g, 1.0);
        let mut p = NetworkParams::zeros(3, 3.0, 1, 3).unwrap();
        p.set_activation(Activation::identity());
        for b in p.banks_mut() {
            b.get_mut(0, 0).weights_mut()[4] = 1e200;
        }
        match forward_propagate(&x, &p) {
            Err(Error::Divergence { layer }) => assert_eq!(layer, 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn classify_examples() {
        let g = Grid2D::new(4, 4, 0.25).unwrap();
        let y = FeatureMap::new(g, 2, vec![0.3; 32]).unwrap();
        let c = Classifier::zeros(10, g, 2);
        let pr = classify(&y, &c).unwrap();
        assert!(pr.iter().all(|v| (v - 0.1).abs() < 1e-15));

        let lw = [0.1f64, 0.2, 0.7];
        let mut c = Classifier::zeros(3, g, 2);
        c.mu_mut().iter_mut().zip(lw).for_each(|(m, w)| *m = w.ln());
        let pr = classify(&y, &c).unwrap();
        for (a, b) in pr.iter().zip(lw) {
            assert!((a - b).abs() < 1e-15);
        }
        let bad = Classifier::zeros(3, Grid2D::new(2, 2, 0.5).unwrap(), 2);
        assert!(classify(&y, &bad).is_err());
    }

    #[test]
    fn classify_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Grid2D::new(3, 5, 0.4).unwrap();
        let y = FeatureMap::new(g, 2, rand_vec(&mut rng, 30, 1.0)).unwrap();
        let w: Vec<FeatureMap> = (0..4)
            .map(|_| FeatureMap::new(g, 2, rand_vec(&mut rng, 30, 3.0)).unwrap())
            .collect();
        let mu = rand_vec(&mut rng, 4, 1.0);
        let c = Classifier::new(w.clone(), mu.clone()).unwrap();
        let got = classify(&y, &c).unwrap();
        let mut z = [0.0; 4];
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..30 {
                s += w[j].data()[i] * y.data()[i];
            }
            z[j] = 0.16 * s + mu[j];
        }
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let tot: f64 = e.iter().sum();
        for j in 0..4 {
            assert!((got[j] - e[j] / tot).abs() <= 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    fn tiny_dataset(rng: &mut impl Rng, m: usize, classes: usize, g: Grid2D) -> LabeledDataset {
        let images = (0..m).map(|_| rand_image(rng, g)).collect();
        let labels = (0..m).map(|i| i % classes).collect();
        LabeledDataset::new_unchecked(images, labels, classes)
    }

    #[test]
    fn loss_examples() {
        let g = Grid2D::new(4, 4, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = tiny_dataset(&mut rng, 5, 10, g);
        let p = NetworkParams::zeros(1, 1.0, 1, 3).unwrap();
        let c = Classifier::zeros(10, g, 1);
        let l = loss(&data.batch(), &p, &c, &RegConfig::default()).unwrap();
        assert!((l.data_term - 10f64.ln()).abs() < 1e-14);

        // Confident correct predictions: margin 25 in the logits.
        let data = tiny_dataset(&mut rng, 3, 3, g);
        let mut c = Classifier::zeros(3, g, 1);
        let idx: Vec<usize> = vec![0];
        let batch = data.subset(&idx);
        c.mu_mut()[0] = 25.0;
        let l = loss(&batch, &p, &c, &RegConfig::default()).unwrap();
        assert!(l.data_term <= 1e-8);

        let mut bad = Classifier::zeros(2, g, 1);
        bad.mu_mut()[0] = 0.0;
        assert!(matches!(
            loss(&data.batch(), &p, &bad, &RegConfig::default()),
            Err(Error::InvalidLabel { label: 2, .. })
        ));
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Grid2D::new(4, 4, 0.25).unwrap();
        let data = tiny_dataset(&mut rng, 3, 2, g);
        let p = rand_params(&mut rng, 1, 1, Activation::tanh());
        let w: Vec<FeatureMap> = (0..2)
            .map(|_| FeatureMap::new(g, 1, rand_vec(&mut rng, 16, 2.0)).unwrap())
            .collect();
        let c = Classifier::new(w, vec![0.1, -0.2]).unwrap();
        let got = loss(&data.batch(), &p, &c, &RegConfig::default()).unwrap();

        // Scalar re-implementation: 1 channel, 1 layer.
        let mut total = 0.0;
        for (x, &label) in data.images().iter().zip(data.labels()) {
            let e = p.embed().get(0, 0);
            let s = p.banks()[0].get(0, 0);
            let at = |v: &[f64], r: isize, cc: isize| {
                v[(r.rem_euclid(4) * 4 + cc.rem_euclid(4)) as usize]
            };
            let mut y0 = vec![0.0; 16];
            for r in 0..4isize {
                for cc in 0..4isize {
                    let mut acc = 0.0;
                    for pp in 0..3isize {
                        for qq in 0..3isize {
                            acc += e.at(pp as usize, qq as usize)
                                * at(x.values(), r + pp - 1, cc + qq - 1);
                        }
                    }
                    y0[(r * 4 + cc) as usize] = acc;
                }
            }
            let mut y1 = y0.clone();
            for r in 0..4isize {
                for cc in 0..4isize {
                    let mut acc = p.biases()[0][0];
                    for pp in 0..3isize {
                        for qq in 0..3isize {
                            acc +=
                                s.at(pp as usize, qq as usize) * at(&y0, r + pp - 1, cc + qq - 1);
                        }
                    }
                    y1[(r * 4 + cc) as usize] += p.dt() * acc.tanh();
                }
            }
            let z: Vec<f64> = (0..2)
                .map(|j| {
                    0.0625
                        * c.weights()[j]
                            .data()
                            .iter()
                            .zip(&y1)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                        + c.mu()[j]
                })
                .collect();
            let lse = (z[0].exp() + z[1].exp()).ln();
            total += lse - z[label];
        }
        assert!((got.data_term - total / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_problem_has_zero_gradient() {
        let g = Grid2D::new(4, 4, 0.25).unwrap();
        let data = LabeledDataset::new_unchecked(vec![Image::zeros(g); 4], vec![0, 1, 0, 1], 2);
        let p = NetworkParams::zeros(2, 1.0, 2, 3).unwrap();
        let c = Classifier::zeros(2, g, 2);
        let (_, gr) = gradient(&data.batch(), &p, &c, &RegConfig::default()).unwrap();
        assert_eq!(gr.propagation_norm_sq(), 0.0);
        assert!(gr
            .weights
            .iter()
            .all(|w| w.data().iter().all(|&v| v == 0.0)));
        assert!(gr.mu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mu_gradient_is_mean_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = Grid2D::new(4, 4, 0.25).unwrap();
        let data = tiny_dataset(&mut rng, 7, 3, g);
        let p = rand_params(&mut rng, 2, 2, Activation::tanh());
        let mut c = Classifier::zeros(3, g, 2);
        c.mu_mut().copy_from_slice(&[0.2, -0.4, 0.9]);
        let (_, gr) = gradient(&data.batch(), &p, &c, &RegConfig::default()).unwrap();
        let probs = softmax(c.mu());
        for j in 0..3 {
            let freq = data.labels().iter().filter(|&&l| l == j).count() as f64 / 7.0;
            assert!((gr.mu[j] - (probs[j] - freq)).abs() < 1e-14);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn identity_activation_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = rand_params(&mut rng, 3, 2, Activation::identity());
            for bias in p.biases_mut() { bias.iter_mut().for_each(|v| *v = 0.0); }
            let g = Grid2D::new(5, 5, 0.2).unwrap();
            let u = rand_image(&mut rng, g);
            let v = rand_image(&mut rng, g);
            let mix = Image::new(g, u.values().iter().zip(v.values()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = propagate(&mix, &p).unwrap();
            let pu = propagate(&u, &p).unwrap();
            let pv = propagate(&v, &p).unwrap();
            for i in 0..lhs.data().len() {
                prop_assert!((lhs.data()[i] - (a * pu.data()[i] + b * pv.data()[i])).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_is_on_simplex(z in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn loss_invariant_under_relabeling(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Grid2D::new(4, 4, 0.25).unwrap();
            let data = tiny_dataset(&mut rng, 6, 3, g);
            let p = rand_params(&mut rng, 1, 2, Activation::tanh());
            let w: Vec<FeatureMap> = (0..3).map(|_| FeatureMap::new(g, 2, rand_vec(&mut rng, 32, 2.0)).unwrap()).collect();
            let mu = rand_vec(&mut rng, 3, 1.0);
            let c = Classifier::new(w.clone(), mu.clone()).unwrap();
            let perm = [2usize, 0, 1];
            let mut pw = w.clone();
            let mut pmu = mu.clone();
            for j in 0..3 { pw[perm[j]] = w[j].clone(); pmu[perm[j]] = mu[j]; }
            let pc = Classifier::new(pw, pmu).unwrap();
            let relabeled = LabeledDataset::new_unchecked(
                data.images().to_vec(), data.labels().iter().map(|&l| perm[l]).collect(), 3);
            let reg = RegConfig { lambda_w: 0.3, lambda_theta: 0.2 };
            let l1 = loss(&data.batch(), &p, &c, &reg).unwrap();
            let l2 = loss(&relabeled.batch(), &p, &pc, &reg).unwrap();
            prop_assert!((l1.total - l2.total).abs() <= 1e-13);
        }
    }

    fn perturbed(
        p: &NetworkParams,
        c: &Classifier,
        idx: usize,
        eps: f64,
    ) -> (NetworkParams, Classifier) {
        let (mut p, mut c) = (p.clone(), c.clone());
        let mut slots: Vec<&mut f64> = Vec::new();
        for b in p.banks.iter_mut() {
            slots.extend(b.flat_mut());
        }
        for b in p.biases.iter_mut() {
            slots.extend(b.iter_mut());
        }
        slots.extend(p.embed.flat_mut());
        for w in c.weights.iter_mut() {
            slots.extend(w.data.iter_mut());
        }
        slots.extend(c.mu.iter_mut());
        *slots[idx] += eps;
        (p, c)
    }

    fn flat_gradient(g: &Gradients, embed_len: usize) -> Vec<f64> {
        let mut v: Vec<f64> = g
            .banks
            .iter()
            .flat_map(|b| b.flat().copied().collect::<Vec<_>>())
            .collect();
        v.extend(g.biases.iter().flatten());
        match &g.embed {
            Some(e) => v.extend(e.flat()),
            None => v.extend(std::iter::repeat_n(0.0, embed_len)),
        }
        v.extend(g.weights.iter().flat_map(|w| w.data.iter()));
        v.extend(&g.mu);
        v
    }

    fn check_central_differences(act: Activation, learn_embed: bool, reg: RegConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid2D::new(4, 5, 0.25).unwrap();
        let data = tiny_dataset(&mut rng, 3, 3, g);
        let mut p = rand_params(&mut rng, 3, 2, act);
        p.set_learn_embed(learn_embed);
        let c = Classifier::new(
            (0..3)
                .map(|_| FeatureMap::new(g, 2, rand_vec(&mut rng, 40, 2.0)).unwrap())
                .collect(),
            rand_vec(&mut rng, 3, 0.5),
        )
        .unwrap();
        let batch = data.batch();
        let (_, gr) = gradient(&batch, &p, &c, &reg).unwrap();
        let embed_len = p.embed.flat().count();
        let flat = flat_gradient(&gr, embed_len);
        let embed_start = gr.banks.iter().map(|b| b.flat().count()).sum::<usize>()
            + gr.biases.iter().map(Vec::len).sum::<usize>();
        let eps = 1e-5;
        for (idx, &an) in flat.iter().enumerate() {
            if !learn_embed && (embed_start..embed_start + embed_len).contains(&idx) {
                assert_eq!(an, 0.0);
                continue;
            }
            let (pp, cp) = perturbed(&p, &c, idx, eps);
            let (pm, cm) = perturbed(&p, &c, idx, -eps);
            let fp = loss(&batch, &pp, &cp, &reg).unwrap().total;
            let fm = loss(&batch, &pm, &cm, &reg).unwrap().total;
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                "parameter {idx}: analytic {an} vs central difference {fd}"
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let reg = RegConfig {
            lambda_w: 0.3,
            lambda_theta: 0.7,
        };
        check_central_differences(Activation::tanh(), false, RegConfig::default(), 20);
        check_central_differences(Activation::tanh(), true, reg, 21);
        check_central_differences(
            Activation {
                kind: ActivationKind::Tanh,
                gain: 1.7,
            },
            true,
            reg,
            22,
        );
        check_central_differences(Activation::identity(), true, reg, 23);
    }
}
