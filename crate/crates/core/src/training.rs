//! Regularization and block-coordinate-descent training.
//!
//! Each outer iteration takes one first-order step on the propagation
//! parameters (fixed step or Armijo backtracking) and then a few damped
//! Newton steps on the convex classifier subproblem with propagation frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{Batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::propagation::{
    cross_entropy, dot, gradient, loss, propagate, softmax, Activation, Classifier, FeatureMap,
    Gradients, LossValue, NetworkParams,
};
use crate::stencil::{Stencil, StencilBank};

/// Weights of the smoothness penalties.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegConfig {
    /// Spatial smoothness of the classifier weight fields.
    pub lambda_w: f64,
    /// Smoothness of the layer parameters across time.
    pub lambda_theta: f64,
}

pub struct RegEval {
    pub value: f64,
    pub grads: Gradients,
}

/// `λ_w Σ_j h² ‖∇_h w_j‖² + λ_θ Σ_k ‖θ_{k+1} − θ_k‖² / δt`, with periodic
/// forward differences for `∇_h`.
pub fn reg_value_and_grad(p: &NetworkParams, c: &Classifier, r: &RegConfig) -> RegEval {
    let mut grads = Gradients::zeros_like(p, c);
    let mut value = 0.0;

    if r.lambda_w != 0.0 {
        for (w, gw) in c.weights().iter().zip(grads.weights.iter_mut()) {
            let (v, g) = spatial_smoothness(w);
            value += r.lambda_w * v;
            gw.data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += r.lambda_w * b);
        }
    }

    if r.lambda_theta != 0.0 && p.num_layers() > 1 {
        let scale = r.lambda_theta / p.dt();
        for k in 0..p.num_layers() - 1 {
            let (b0, b1) = (&p.banks()[k], &p.banks()[k + 1]);
            let (c0, c1) = (&p.biases()[k], &p.biases()[k + 1]);
            let diffs: Vec<f64> = b1.flat().zip(b0.flat()).map(|(x, y)| x - y).collect();
            let bdiffs: Vec<f64> = c1.iter().zip(c0).map(|(x, y)| x - y).collect();
            value += scale
                * (diffs.iter().map(|d| d * d).sum::<f64>()
                    + bdiffs.iter().map(|d| d * d).sum::<f64>());
            for (g, d) in grads.banks[k].flat_mut().zip(&diffs) {
                *g -= 2.0 * scale * d;
            }
            for (g, d) in grads.banks[k + 1].flat_mut().zip(&diffs) {
                *g += 2.0 * scale * d;
            }
            for (o, d) in bdiffs.iter().enumerate() {
                grads.biases[k][o] -= 2.0 * scale * d;
                grads.biases[k + 1][o] += 2.0 * scale * d;
            }
        }
    }
    RegEval { value, grads }
}

/// Value and gradient of `h² Σ_c Σ_pix |∇_h w|²` for one weight field.
fn spatial_smoothness(w: &FeatureMap) -> (f64, Vec<f64>) {
    let g = w.grid();
    let (nx, ny, n) = (g.nx(), g.ny(), g.len());
    let scale = g.cell_area() / (g.h() * g.h());
    let mut value = 0.0;
    let mut grad = vec![0.0; w.data().len()];
    for ch in 0..w.channels() {
        let f = w.channel(ch);
        let gr = &mut grad[ch * n..(ch + 1) * n];
        for r in 0..ny {
            for col in 0..nx {
                let i = r * nx + col;
                let right = r * nx + (col + 1) % nx;
                let down = ((r + 1) % ny) * nx + col;
                let dx = f[right] - f[i];
                let dy = f[down] - f[i];
                value += scale * (dx * dx + dy * dy);
                gr[right] += 2.0 * scale * dx;
                gr[i] -= 2.0 * scale * dx;
                gr[down] += 2.0 * scale * dy;
                gr[i] -= 2.0 * scale * dy;
            }
        }
    }
    (value, grad)
}

/// Applies `Hv` of the spatial penalty (it is quadratic, so `Hv = ∇R(v)`).
fn spatial_smoothness_hv(v: &FeatureMap) -> Vec<f64> {
    spatial_smoothness(v).1
}

/// The classifier subproblem with frozen features.
struct ClassifierProblem<'a> {
    features: &'a [FeatureMap],
    labels: &'a [usize],
    grid: Grid2D,
    channels: usize,
    classes: usize,
    lambda_w: f64,
}

const CLASSIFIER_CHUNK: usize = 32;

impl ClassifierProblem<'_> {
    fn field_len(&self) -> usize {
        self.grid.len() * self.channels
    }

    fn dim(&self) -> usize {
        self.classes * (self.field_len() + 1)
    }

    fn pack(&self, c: &Classifier) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        for w in c.weights() {
            x.extend_from_slice(w.data());
        }
        x.extend_from_slice(c.mu());
        x
    }

    fn unpack(&self, x: &[f64]) -> Classifier {
        let d = self.field_len();
        let weights = (0..self.classes)
            .map(|j| {
                FeatureMap::new(self.grid, self.channels, x[j * d..(j + 1) * d].to_vec())
                    .expect("packed field length")
            })
            .collect();
        let mu = x[self.classes * d..].to_vec();
        Classifier::new(weights, mu).expect("classifier shape")
    }

    fn logits(&self, x: &[f64], feat: &FeatureMap) -> Vec<f64> {
        let d = self.field_len();
        let area = self.grid.cell_area();
        (0..self.classes)
            .map(|j| area * dot(&x[j * d..(j + 1) * d], feat.data()) + x[self.classes * d + j])
            .collect()
    }

    /// Removes the directions that shift every class equally: softmax is
    /// blind to them, and so is the smoothness penalty when they are
    /// spatially constant.
    fn project_shifts(&self, v: &mut [f64]) {
        let (d, n, ell) = (self.field_len(), self.grid.len(), self.classes);
        let mu = &mut v[ell * d..];
        let mean = mu.iter().sum::<f64>() / ell as f64;
        mu.iter_mut().for_each(|x| *x -= mean);
        if self.lambda_w == 0.0 {
            for t in 0..d {
                let mean = (0..ell).map(|j| v[j * d + t]).sum::<f64>() / ell as f64;
                (0..ell).for_each(|j| v[j * d + t] -= mean);
            }
        } else {
            for ch in 0..self.channels {
                let block = |j: usize| j * d + ch * n..j * d + (ch + 1) * n;
                let mean = (0..ell)
                    .map(|j| v[block(j)].iter().sum::<f64>())
                    .sum::<f64>()
                    / (ell * n) as f64;
                (0..ell).for_each(|j| v[block(j)].iter_mut().for_each(|x| *x -= mean));
            }
        }
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let m = self.features.len();
        (0..m)
            .step_by(CLASSIFIER_CHUNK)
            .map(|lo| (lo, (lo + CLASSIFIER_CHUNK).min(m)))
            .collect()
    }

    fn reg_field(&self, x: &[f64], j: usize) -> FeatureMap {
        let d = self.field_len();
        FeatureMap::new(self.grid, self.channels, x[j * d..(j + 1) * d].to_vec())
            .expect("packed field length")
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let m = self.features.len() as f64;
        let parts: Vec<f64> = self
            .chunks()
            .into_par_iter()
            .map(|(lo, hi)| {
                (lo..hi)
                    .map(|i| cross_entropy(&self.logits(x, &self.features[i]), self.labels[i]))
                    .sum()
            })
            .collect();
        let mut f = parts.iter().sum::<f64>() / m;
        if self.lambda_w != 0.0 {
            for j in 0..self.classes {
                f += self.lambda_w * spatial_smoothness(&self.reg_field(x, j)).0;
            }
        }
        f
    }

    /// Objective, gradient, and per-example probabilities.
    fn evaluate(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
        let m = self.features.len() as f64;
        let d = self.field_len();
        let area = self.grid.cell_area();
        let parts: Vec<(f64, Vec<f64>, Vec<Vec<f64>>)> = self
            .chunks()
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut g = vec![0.0; self.dim()];
                let mut f = 0.0;
                let mut probs = Vec::with_capacity(hi - lo);
                for i in lo..hi {
                    let feat = &self.features[i];
                    let z = self.logits(x, feat);
                    f += cross_entropy(&z, self.labels[i]);
                    let p = softmax(&z);
                    for j in 0..self.classes {
                        let r = p[j] - if j == self.labels[i] { 1.0 } else { 0.0 };
                        let s = area * r / m;
                        g[j * d..(j + 1) * d]
                            .iter_mut()
                            .zip(feat.data())
                            .for_each(|(a, y)| *a += s * y);
                        g[self.classes * d + j] += r / m;
                    }
                    probs.push(p);
                }
                (f, g, probs)
            })
            .collect();
        let mut f = 0.0;
        let mut g = vec![0.0; self.dim()];
        let mut probs = Vec::with_capacity(self.features.len());
        for (pf, pg, pp) in parts {
            f += pf;
            g.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
            probs.extend(pp);
        }
        f /= m;
        if self.lambda_w != 0.0 {
            for j in 0..self.classes {
                let (v, rg) = spatial_smoothness(&self.reg_field(x, j));
                f += self.lambda_w * v;
                g[j * d..(j + 1) * d]
                    .iter_mut()
                    .zip(rg)
                    .for_each(|(a, b)| *a += self.lambda_w * b);
            }
        }
        (f, g, probs)
    }

    /// Exact Hessian-vector product (softmax Hessian plus regularizer).
    fn hess_vec(&self, probs: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        let m = self.features.len() as f64;
        let d = self.field_len();
        let area = self.grid.cell_area();
        let parts: Vec<Vec<f64>> = self
            .chunks()
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut out = vec![0.0; self.dim()];
                for i in lo..hi {
                    let feat = &self.features[i];
                    let p = &probs[i];
                    let du = self.logits(v, feat);
                    let pdu: f64 = p.iter().zip(&du).map(|(a, b)| a * b).sum();
                    for j in 0..self.classes {
                        let dp = p[j] * (du[j] - pdu) / m;
                        let s = area * dp;
                        out[j * d..(j + 1) * d]
                            .iter_mut()
                            .zip(feat.data())
                            .for_each(|(a, y)| *a += s * y);
                        out[self.classes * d + j] += dp;
                    }
                }
                out
            })
            .collect();
        let mut hv = vec![0.0; self.dim()];
        for part in parts {
            hv.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        if self.lambda_w != 0.0 {
            for j in 0..self.classes {
                let rv = spatial_smoothness_hv(&self.reg_field(v, j));
                hv[j * d..(j + 1) * d]
                    .iter_mut()
                    .zip(rv)
                    .for_each(|(a, b)| *a += self.lambda_w * b);
            }
        }
        hv
    }
}

/// Truncated conjugate gradients on `H d = −g`. Returns `None` if negative
/// curvature shows up before any progress is made.
fn newton_direction(
    prob: &ClassifierProblem<'_>,
    probs: &[Vec<f64>],
    g: &[f64],
) -> Option<Vec<f64>> {
    let mut g = g.to_vec();
    prob.project_shifts(&mut g);
    let gnorm = norm(&g);
    let tol = gnorm * gnorm.sqrt().min(0.1);
    let max_iter = prob.dim().min(250);
    let mut d = vec![0.0; g.len()];
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut dir = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..max_iter {
        if rr.sqrt() <= tol {
            break;
        }
        let mut hd = prob.hess_vec(probs, &dir);
        prob.project_shifts(&mut hd);
        let curv = dot(&dir, &hd);
        if !(curv > 1e-300 * dot(&dir, &dir)) {
            return if it == 0 { None } else { Some(d) };
        }
        let alpha = rr / curv;
        d.iter_mut().zip(&dir).for_each(|(a, b)| *a += alpha * b);
        r.iter_mut().zip(&hd).for_each(|(a, b)| *a -= alpha * b);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        dir.iter_mut().zip(&r).for_each(|(a, b)| *a = b + beta * *a);
        rr = rr_new;
    }
    Some(d)
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Outcome of the inner Newton iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonReport {
    /// Objective before the first step, then after each step.
    pub objectives: Vec<f64>,
    /// Steps that fell back to an Armijo gradient step.
    pub fallbacks: usize,
}

const NEWTON_MAX_HALVINGS: usize = 20;

/// Damped Newton iterations on the regularized multinomial regression
/// subproblem `(1/m) Σ CE(softmax(h^d Wᵀ y_i + μ), c_i) + λ_w Σ_j R(w_j)`.
pub fn newton_classifier_step(
    features: &[FeatureMap],
    labels: &[usize],
    c: &Classifier,
    reg: &RegConfig,
    steps: usize,
) -> Result<(Classifier, NewtonReport)> {
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if features.len() != labels.len() {
        return Err(Error::Dimension(
            "one label per feature map required".into(),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c.num_classes()) {
        return Err(Error::InvalidLabel {
            label,
            num_classes: c.num_classes(),
        });
    }
    if features
        .iter()
        .any(|f| !f.grid().same_shape(&c.grid()) || f.channels() != c.channels())
    {
        return Err(Error::Dimension(
            "features do not match classifier shape".into(),
        ));
    }
    let prob = ClassifierProblem {
        features,
        labels,
        grid: c.grid(),
        channels: c.channels(),
        classes: c.num_classes(),
        lambda_w: reg.lambda_w,
    };
    let mut x = prob.pack(c);
    let mut report = NewtonReport {
        objectives: Vec::with_capacity(steps + 1),
        fallbacks: 0,
    };
    let (mut f, mut g, mut probs) = prob.evaluate(&x);
    report.objectives.push(f);

    for _ in 0..steps {
        if norm(&g) == 0.0 {
            report.objectives.push(f);
            continue;
        }
        let mut accepted = None;
        if let Some(d) = newton_direction(&prob, &probs, &g).filter(|d| dot(d, &g) < 0.0) {
            let mut alpha = 1.0;
            for _ in 0..=NEWTON_MAX_HALVINGS {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                let ft = prob.objective(&trial);
                if ft < f {
                    accepted = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
        }
        if accepted.is_none() {
            report.fallbacks += 1;
            accepted = armijo_gradient_step(&prob, &x, f, &g);
        }
        if let Some(next) = accepted {
            x = next;
            (f, g, probs) = prob.evaluate(&x);
        }
        report.objectives.push(f);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient {
            block: "classifier",
        });
    }
    Ok((prob.unpack(&x), report))
}

fn armijo_gradient_step(
    prob: &ClassifierProblem<'_>,
    x: &[f64],
    f: f64,
    g: &[f64],
) -> Option<Vec<f64>> {
    let gg = dot(g, g);
    let mut eta = 1.0;
    for _ in 0..40 {
        let trial: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - eta * b).collect();
        if prob.objective(&trial) <= f - 1e-4 * eta * gg && eta * gg > 0.0 {
            return Some(trial);
        }
        eta *= 0.5;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Fixed { step: f64 },
    Armijo { step0: f64, beta: f64, c: f64 },
}

impl StepRule {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepRule::Fixed { step } => step > 0.0,
            StepRule::Armijo { step0, beta, c } => {
                step0 > 0.0 && beta > 0.0 && beta < 1.0 && c > 0.0 && c < 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid step rule {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcdConfig {
    pub outer_iters: usize,
    pub newton_steps: usize,
    pub step_rule: StepRule,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for BcdConfig {
    fn default() -> Self {
        Self {
            outer_iters: 20,
            newton_steps: 5,
            step_rule: StepRule::Armijo {
                step0: 1.0,
                beta: 0.5,
                c: 1e-4,
            },
            batch_size: None,
            seed: 0,
        }
    }
}

/// One row of a training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub data_term: f64,
    pub reg_term: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: NetworkParams,
    pub classifier: Classifier,
    /// Metrics of the starting point (iteration 0).
    pub initial: IterRecord,
    pub history: Vec<IterRecord>,
}

impl TrainResult {
    pub fn final_record(&self) -> IterRecord {
        self.history.last().copied().unwrap_or(self.initial)
    }
}

/// Seeded per-epoch shuffles consumed in consecutive batches.
struct BatchSampler {
    n: usize,
    size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, size: Option<usize>, seed: u64) -> Self {
        let size = size.filter(|&s| s > 0 && s < n).unwrap_or(n);
        Self {
            n,
            size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: usize::MAX,
        }
    }

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.size == self.n {
            return None;
        }
        if self.pos == usize::MAX || self.pos + self.size > self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        Some(b)
    }
}

fn updated_params(p: &NetworkParams, g: &Gradients, step: f64) -> NetworkParams {
    let mut next = p.clone();
    for (b, gb) in next.banks_mut().iter_mut().zip(&g.banks) {
        b.flat_mut()
            .zip(gb.flat())
            .for_each(|(w, d)| *w -= step * d);
    }
    for (b, gb) in next.biases_mut().iter_mut().zip(&g.biases) {
        b.iter_mut().zip(gb).for_each(|(w, d)| *w -= step * d);
    }
    if let Some(ge) = &g.embed {
        next.embed_mut()
            .flat_mut()
            .zip(ge.flat())
            .for_each(|(w, d)| *w -= step * d);
    }
    next
}

/// One propagation-parameter step on `batch`.
fn propagation_step(
    batch: &Batch<'_>,
    p: &NetworkParams,
    c: &Classifier,
    reg: &RegConfig,
    rule: StepRule,
) -> Result<NetworkParams> {
    let (value, g) = gradient(batch, p, c, reg)?;
    match rule {
        StepRule::Fixed { step } => Ok(updated_params(p, &g, step)),
        StepRule::Armijo { step0, beta, c: c1 } => {
            let gg = g.propagation_norm_sq();
            if gg == 0.0 {
                return Ok(p.clone());
            }
            let mut eta = step0;
            for _ in 0..40 {
                let trial = updated_params(p, &g, eta);
                match loss(batch, &trial, c, reg) {
                    Ok(l) if l.total <= value.total - c1 * eta * gg => return Ok(trial),
                    Ok(_) | Err(Error::Divergence { .. }) => {}
                    Err(e) => return Err(e),
                }
                eta *= beta;
            }
            Ok(p.clone())
        }
    }
}

/// Output states of a batch, in batch order.
pub fn batch_features(batch: &Batch<'_>, p: &NetworkParams) -> Result<Vec<FeatureMap>> {
    (0..batch.len())
        .into_par_iter()
        .map(|i| propagate(batch.get(i).0, p))
        .collect()
}

/// Objective and accuracy over a whole dataset in one pass.
pub fn objective_and_accuracy(
    data: &LabeledDataset,
    p: &NetworkParams,
    c: &Classifier,
    reg: &RegConfig,
) -> Result<(LossValue, f64)> {
    let ev = evaluate(data, p, c)?;
    let reg_term = reg_value_and_grad(p, c, reg).value;
    Ok((
        LossValue {
            total: ev.mean_loss + reg_term,
            data_term: ev.mean_loss,
            reg_term,
        },
        ev.accuracy,
    ))
}

fn record(
    iter: usize,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    p: &NetworkParams,
    c: &Classifier,
    reg: &RegConfig,
) -> Result<IterRecord> {
    let (l, train_acc) = objective_and_accuracy(train, p, c, reg)?;
    let val_acc = val
        .map(|v| evaluate(v, p, c).map(|e| e.accuracy))
        .transpose()?;
    Ok(IterRecord {
        iter,
        loss: l.total,
        data_term: l.data_term,
        reg_term: l.reg_term,
        train_acc,
        val_acc,
    })
}

/// Block-coordinate descent for `cfg.outer_iters` iterations.
pub fn bcd_train(
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    p0: &NetworkParams,
    c0: &Classifier,
    reg: &RegConfig,
    cfg: &BcdConfig,
) -> Result<TrainResult> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.step_rule.validate()?;
    let grid = train.grid().expect("nonempty");
    if !grid.same_shape(&c0.grid()) {
        return Err(Error::Dimension(format!(
            "training grid {}x{} does not match classifier grid {}x{}",
            grid.nx(),
            grid.ny(),
            c0.grid().nx(),
            c0.grid().ny()
        )));
    }
    let wrap = |iteration: usize| {
        move |e: Error| Error::Training {
            iteration,
            source: Box::new(e),
        }
    };

    let mut p = p0.clone();
    let mut c = c0.clone();
    let initial = record(0, train, val, &p, &c, reg).map_err(wrap(0))?;
    let mut history = Vec::with_capacity(cfg.outer_iters);
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.seed);

    for it in 1..=cfg.outer_iters {
        let idx = sampler.next();
        let batch = match &idx {
            Some(i) => train.subset(i),
            None => train.batch(),
        };
        p = propagation_step(&batch, &p, &c, reg, cfg.step_rule).map_err(wrap(it))?;
        let feats = batch_features(&batch, &p).map_err(wrap(it))?;
        c = newton_classifier_step(&feats, batch.labels(), &c, reg, cfg.newton_steps)
            .map_err(wrap(it))?
            .0;
        history.push(record(it, train, val, &p, &c, reg).map_err(wrap(it))?);
    }
    Ok(TrainResult {
        params: p,
        classifier: c,
        initial,
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(data: &LabeledDataset, p: &NetworkParams, c: &Classifier) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ell = c.num_classes();
    if let Some(&label) = data.labels().iter().find(|&&l| l >= ell) {
        return Err(Error::InvalidLabel {
            label,
            num_classes: ell,
        });
    }
    let per_example: Vec<(usize, f64)> = data
        .images()
        .par_iter()
        .zip(data.labels().par_iter())
        .map(|(x, &label)| -> Result<(usize, f64)> {
            let z = crate::propagation::logits(&propagate(x, p)?, c)?;
            Ok((argmax(&z), cross_entropy(&z, label)))
        })
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0usize; ell]; ell];
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    for (&label, &(pred, l)) in data.labels().iter().zip(&per_example) {
        confusion[label][pred] += 1;
        correct += usize::from(pred == label);
        total_loss += l;
    }
    let m = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / m,
        mean_loss: total_loss / m,
        confusion,
    })
}

/// Network shape and initialization scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    pub layers: usize,
    pub final_time: f64,
    pub channels: usize,
    pub k: usize,
    pub activation: Activation,
    pub learn_embed: bool,
    /// Standard deviation of random stencil and classifier weights.
    pub init_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            layers: 2,
            final_time: 1.0,
            channels: 4,
            k: 3,
            activation: Activation::tanh(),
            learn_embed: false,
            init_scale: 0.1,
        }
    }
}

/// Random propagation parameters (normal stencils, zero biases,
/// replicating embedding) and a random classifier with zero `μ`.
pub fn init_model(
    arch: &Architecture,
    grid: Grid2D,
    num_classes: usize,
    seed: u64,
) -> Result<(NetworkParams, Classifier)> {
    if arch.layers == 0 || !(arch.final_time > 0.0) {
        return Err(Error::InvalidArgument(
            "network needs layers and a positive final time".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, arch.init_scale.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (nf, k) = (arch.channels, arch.k);
    let mut banks = Vec::with_capacity(arch.layers);
    for _ in 0..arch.layers {
        let stencils = (0..nf * nf)
            .map(|_| Stencil::new(k, (0..k * k).map(|_| normal.sample(&mut rng)).collect()))
            .collect::<Result<Vec<_>>>()?;
        banks.push(StencilBank::new(nf, nf, stencils)?);
    }
    let params = NetworkParams::new(
        arch.final_time / arch.layers as f64,
        banks,
        vec![vec![0.0; nf]; arch.layers],
        StencilBank::identity(1, nf, k),
        arch.activation,
        arch.learn_embed,
    )?;
    let weights = (0..num_classes)
        .map(|_| {
            FeatureMap::new(
                grid,
                nf,
                (0..grid.len() * nf)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let classifier = Classifier::new(weights, vec![0.0; num_classes])?;
    Ok((params, classifier))
}
