//! Moving networks across image resolutions and depths.
//!
//! Resolution changes map every stencil bank through a [`CoarsenMap`] and
//! transfer classifier fields with the image operators. Depth changes
//! interpolate layer parameters in time at a fixed final time.

use std::time::Instant;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::grid::{gaussian_blur, prolong_image, restrict_image, TransferPair};
use crate::propagation::{Classifier, FeatureMap, NetworkParams};
use crate::stencil::{build_coarsen_map, coarsen_bank, refine_bank, CoarsenMap};
use crate::training::{
    bcd_train, init_model, objective_and_accuracy, Architecture, BcdConfig, RegConfig, TrainResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Coarsen,
    Refine,
}

impl Direction {
    pub fn name(&self) -> &'static str {
        match self {
            Direction::Coarsen => "coarsen",
            Direction::Refine => "refine",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "coarsen" => Some(Direction::Coarsen),
            "refine" => Some(Direction::Refine),
            _ => None,
        }
    }
}

/// Restricts (or prolongs) every channel of a field.
pub fn transfer_field(
    f: &FeatureMap,
    direction: Direction,
    t: &TransferPair,
) -> Result<FeatureMap> {
    let channels = (0..f.channels())
        .map(|c| {
            let img = f.channel_image(c);
            match direction {
                Direction::Coarsen => restrict_image(&img, t),
                Direction::Refine => Ok(prolong_image(&img, t)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMap::from_channels(&channels)
}

fn transfer_classifier(
    c: &Classifier,
    direction: Direction,
    t: &TransferPair,
) -> Result<Classifier> {
    let weights = c
        .weights()
        .iter()
        .map(|w| transfer_field(w, direction, t))
        .collect::<Result<Vec<_>>>()?;
    Classifier::new(weights, c.mu().to_vec())
}

/// Moves a model one octave coarser or finer: Galerkin-transferred stencils
/// (layers and embedding) and transferred classifier fields. Biases, `δt`,
/// `N` and `μ` are kept.
pub fn adapt_model_resolution(
    p: &NetworkParams,
    c: &Classifier,
    direction: Direction,
    m: &CoarsenMap,
    t: &TransferPair,
) -> Result<(NetworkParams, Classifier)> {
    if m.k() != p.k() {
        return Err(Error::Dimension(format!(
            "coarsening map is for {0}x{0} stencils, network uses {1}x{1}",
            m.k(),
            p.k()
        )));
    }
    let c2 = transfer_classifier(c, direction, t)?;
    let map_bank = |b| match direction {
        Direction::Coarsen => coarsen_bank(b, m),
        Direction::Refine => refine_bank(b, m),
    };
    let banks = p.banks().iter().map(map_bank).collect::<Result<Vec<_>>>()?;
    let embed = map_bank(p.embed())?;
    Ok((p.with_banks(embed, banks)?, c2))
}

/// The baseline that reuses the stencils unchanged on the new grid; only
/// the classifier fields are transferred.
pub fn adapt_model_naive(
    p: &NetworkParams,
    c: &Classifier,
    direction: Direction,
    t: &TransferPair,
) -> Result<(NetworkParams, Classifier)> {
    Ok((p.clone(), transfer_classifier(c, direction, t)?))
}

/// Datasets at successively coarser resolutions; level 0 is the finest.
#[derive(Debug, Clone)]
pub struct ResolutionPyramid {
    train: Vec<LabeledDataset>,
    val: Option<Vec<LabeledDataset>>,
    transfer: TransferPair,
    blur_sigma: f64,
}

fn coarser(d: &LabeledDataset, t: &TransferPair, sigma: f64) -> Result<LabeledDataset> {
    if sigma == 0.0 {
        return d.map_images(|img| restrict_image(img, t));
    }
    d.map_images(|img| restrict_image(&gaussian_blur(img, sigma)?, t))
}

impl ResolutionPyramid {
    /// Builds `coarse_levels + 1` levels; level `i + 1` is the blurred and
    /// restricted level `i`. A zero `blur_sigma` skips the blur.
    pub fn build(
        train: &LabeledDataset,
        val: Option<&LabeledDataset>,
        coarse_levels: usize,
        transfer: TransferPair,
        blur_sigma: f64,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(blur_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "blur sigma must be nonnegative".into(),
            ));
        }
        let mut levels = vec![train.clone()];
        let mut vlevels = val.map(|v| vec![v.clone()]);
        for i in 0..coarse_levels {
            levels.push(coarser(&levels[i], &transfer, blur_sigma)?);
            if let Some(vl) = vlevels.as_mut() {
                let next = coarser(&vl[i], &transfer, blur_sigma)?;
                vl.push(next);
            }
        }
        Ok(Self {
            train: levels,
            val: vlevels,
            transfer,
            blur_sigma,
        })
    }

    /// Number of levels (`n_c + 1`).
    pub fn levels(&self) -> usize {
        self.train.len()
    }

    pub fn coarse_levels(&self) -> usize {
        self.train.len() - 1
    }

    pub fn train(&self, level: usize) -> &LabeledDataset {
        &self.train[level]
    }

    pub fn val(&self, level: usize) -> Option<&LabeledDataset> {
        self.val.as_ref().map(|v| &v[level])
    }

    pub fn transfer(&self) -> TransferPair {
        self.transfer
    }

    pub fn blur_sigma(&self) -> f64 {
        self.blur_sigma
    }
}

/// Training configuration for each pyramid level (index 0 = finest).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSchedule {
    configs: Vec<BcdConfig>,
}

impl LevelSchedule {
    pub fn new(configs: Vec<BcdConfig>) -> Result<Self> {
        if configs.is_empty() || configs.iter().any(|c| c.outer_iters == 0) {
            return Err(Error::InvalidArgument(
                "every level needs a positive iteration count".into(),
            ));
        }
        Ok(Self { configs })
    }

    pub fn uniform(levels: usize, cfg: BcdConfig) -> Result<Self> {
        Self::new(vec![cfg; levels])
    }

    pub fn config(&self, level: usize) -> &BcdConfig {
        &self.configs[level]
    }

    pub fn levels(&self) -> usize {
        self.configs.len()
    }
}

#[derive(Debug, Clone)]
pub struct LevelResult {
    pub level: usize,
    pub result: TrainResult,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct MultilevelResult {
    /// Coarsest level first.
    pub levels: Vec<LevelResult>,
    pub params: NetworkParams,
    pub classifier: Classifier,
}

/// Coarse-to-fine training: train on the coarsest level, refine the model
/// one octave, retrain, and so on down to level 0. `init` must be shaped for
/// the coarsest grid.
pub fn multilevel_train(
    pyr: &ResolutionPyramid,
    sched: &LevelSchedule,
    init: (&NetworkParams, &Classifier),
    reg: &RegConfig,
) -> Result<MultilevelResult> {
    if sched.levels() != pyr.levels() {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} levels, pyramid has {}",
            sched.levels(),
            pyr.levels()
        )));
    }
    let map = if pyr.coarse_levels() > 0 {
        Some(build_coarsen_map(init.0.k(), &pyr.transfer())?)
    } else {
        None
    };
    let (mut p, mut c) = (init.0.clone(), init.1.clone());
    let mut levels = Vec::with_capacity(pyr.levels());
    for level in (0..pyr.levels()).rev() {
        let start = Instant::now();
        let result = bcd_train(
            pyr.train(level),
            pyr.val(level),
            &p,
            &c,
            reg,
            sched.config(level),
        )?;
        let wall_seconds = start.elapsed().as_secs_f64();
        (p, c) = (result.params.clone(), result.classifier.clone());
        if level > 0 {
            let m = map.as_ref().expect("built when levels > 1");
            (p, c) = adapt_model_resolution(&p, &c, Direction::Refine, m, &pyr.transfer())?;
        }
        levels.push(LevelResult {
            level,
            result,
            wall_seconds,
        });
    }
    Ok(MultilevelResult {
        levels,
        params: p,
        classifier: c,
    })
}

/// Interpolates layer parameters onto `factor · N` layers at the same final
/// time. Parameters sit at `t_k = k δt`; beyond `t_{N−1}` the last layer is
/// held constant.
pub fn prolong_depth(p: &NetworkParams, factor: usize) -> Result<NetworkParams> {
    if factor < 2 {
        return Err(Error::InvalidArgument(format!(
            "depth factor {factor} must be at least 2"
        )));
    }
    let n = p.num_layers();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot deepen a network without layers".into(),
        ));
    }
    let mut banks = Vec::with_capacity(n * factor);
    let mut biases = Vec::with_capacity(n * factor);
    for j in 0..n * factor {
        let (k, r) = (j / factor, j % factor);
        if k + 1 >= n || r == 0 {
            let k = k.min(n - 1);
            banks.push(p.banks()[k].clone());
            biases.push(p.biases()[k].clone());
            continue;
        }
        let w = r as f64 / factor as f64;
        let mut bank = p.banks()[k].clone();
        bank.flat_mut()
            .zip(p.banks()[k + 1].flat())
            .for_each(|(a, b)| *a += w * (b - *a));
        banks.push(bank);
        biases.push(
            p.biases()[k]
                .iter()
                .zip(&p.biases()[k + 1])
                .map(|(a, b)| a + w * (b - a))
                .collect(),
        );
    }
    p.replace_layers(p.dt() / factor as f64, banks, biases)
}

#[derive(Debug, Clone)]
pub struct DepthResult {
    pub depth: usize,
    /// Trained from the prolonged shallower model (random at the first depth).
    pub warm: TrainResult,
    /// Trained from a fresh random initialization; absent at the first depth,
    /// where the warm run already starts from random parameters.
    pub cold: Option<TrainResult>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct DeepenResult {
    pub depths: Vec<DepthResult>,
    pub params: NetworkParams,
    pub classifier: Classifier,
}

/// Trains at `depths[0]` from a random start, then prolongs to each deeper
/// network and retrains, keeping the classifier. Every deeper level also
/// gets a cold control run from random parameters.
pub fn shallow_to_deep_train(
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    depths: &[usize],
    arch: &Architecture,
    reg: &RegConfig,
    cfg: &BcdConfig,
    seed: u64,
) -> Result<DeepenResult> {
    if depths.is_empty() || depths[0] == 0 {
        return Err(Error::InvalidArgument(
            "depths must be positive and nonempty".into(),
        ));
    }
    for w in depths.windows(2) {
        if w[1] <= w[0] || w[1] % w[0] != 0 {
            return Err(Error::InvalidArgument(format!(
                "depth {} does not strictly divide {}",
                w[0], w[1]
            )));
        }
    }
    let grid = train.grid().ok_or(Error::EmptyDataset)?;
    let classes = train.num_classes();
    let shaped = |layers| Architecture { layers, ..*arch };

    let start = Instant::now();
    let (p0, c0) = init_model(&shaped(depths[0]), grid, classes, seed)?;
    let first = bcd_train(train, val, &p0, &c0, reg, cfg)?;
    let mut p = first.params.clone();
    let mut c = first.classifier.clone();
    let mut out = vec![DepthResult {
        depth: depths[0],
        warm: first,
        cold: None,
        wall_seconds: start.elapsed().as_secs_f64(),
    }];
    for &depth in &depths[1..] {
        let start = Instant::now();
        let pw = prolong_depth(&p, depth / p.num_layers())?;
        let warm = bcd_train(train, val, &pw, &c, reg, cfg)?;
        let wall_seconds = start.elapsed().as_secs_f64();
        let (pc, cc) = init_model(&shaped(depth), grid, classes, seed)?;
        let cold = bcd_train(train, val, &pc, &cc, reg, cfg)?;
        p = warm.params.clone();
        c = warm.classifier.clone();
        out.push(DepthResult {
            depth,
            warm,
            cold: Some(cold),
            wall_seconds,
        });
    }
    Ok(DeepenResult {
        depths: out,
        params: p,
        classifier: c,
    })
}

/// Objective of a fresh random model on `data` (the cold-start reference).
pub fn cold_initial_loss(
    data: &LabeledDataset,
    arch: &Architecture,
    reg: &RegConfig,
    seed: u64,
) -> Result<f64> {
    let grid = data.grid().ok_or(Error::EmptyDataset)?;
    let (p, c) = init_model(arch, grid, data.num_classes(), seed)?;
    Ok(objective_and_accuracy(data, &p, &c, reg)?.0.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::grid::{Grid2D, Image};
    use crate::propagation::Activation;
    use crate::stencil::{Stencil, StencilBank};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, grid: Grid2D, layers: usize) -> (NetworkParams, Classifier) {
        let arch = Architecture {
            layers,
            channels: 2,
            init_scale: 0.7,
            ..Architecture::default()
        };
        let (mut p, c) = init_model(&arch, grid, 3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for b in p.biases_mut() {
            b.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        (p, c)
    }

    #[test]
    fn coarsen_then_refine_restores_banks() {
        let g = Grid2D::unit_square(8).unwrap();
        for t in [TransferPair::constant_average(), TransferPair::bilinear()] {
            let m = build_coarsen_map(3, &t).unwrap();
            let (p, c) = random_model(1, g, 3);
            let (pc, cc) = adapt_model_resolution(&p, &c, Direction::Coarsen, &m, &t).unwrap();
            assert_eq!(cc.grid().nx(), 4);
            let (pr, _) = adapt_model_resolution(&pc, &cc, Direction::Refine, &m, &t).unwrap();
            for (a, b) in p.banks().iter().zip(pr.banks()) {
                assert!(a.max_abs_diff(b) <= 1e-10);
            }
            assert!(p.embed().max_abs_diff(pr.embed()) <= 1e-10);
            assert_eq!(p.biases(), pr.biases());
            assert_eq!(pr.dt(), p.dt());
        }
    }

    #[test]
    fn block_constant_classifier_round_trips() {
        let t = TransferPair::constant_average();
        let m = build_coarsen_map(3, &t).unwrap();
        let coarse = Grid2D::unit_square(4).unwrap();
        let (p, c) = random_model(2, coarse, 1);
        let (pf, cf) = adapt_model_resolution(&p, &c, Direction::Refine, &m, &t).unwrap();
        let (_, cb) = adapt_model_resolution(&pf, &cf, Direction::Coarsen, &m, &t).unwrap();
        for (a, b) in c.weights().iter().zip(cb.weights()) {
            assert!(a.max_abs_diff(b) <= 1e-14);
        }
        assert_eq!(c.mu(), cb.mu());
    }

    #[test]
    fn identity_network_stays_identity() {
        let t = TransferPair::constant_average();
        let m = build_coarsen_map(3, &t).unwrap();
        let g = Grid2D::unit_square(8).unwrap();
        let p = NetworkParams::new(
            0.5,
            vec![StencilBank::identity(2, 2, 3); 2],
            vec![vec![0.0; 2]; 2],
            StencilBank::identity(1, 2, 3),
            Activation::tanh(),
            false,
        )
        .unwrap();
        let c = Classifier::zeros(2, g, 2);
        let (pc, _) = adapt_model_resolution(&p, &c, Direction::Coarsen, &m, &t).unwrap();
        for (a, b) in p.banks().iter().zip(pc.banks()) {
            assert!(a.max_abs_diff(b) <= 1e-14);
        }
    }

    #[test]
    fn odd_grid_cannot_coarsen() {
        let t = TransferPair::constant_average();
        let m = build_coarsen_map(3, &t).unwrap();
        let (p, c) = random_model(3, Grid2D::new(5, 5, 0.2).unwrap(), 1);
        assert!(matches!(
            adapt_model_resolution(&p, &c, Direction::Coarsen, &m, &t),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn prolong_depth_examples() {
        let a = Stencil::new(3, vec![1.0; 9]).unwrap();
        let b = Stencil::new(3, vec![3.0; 9]).unwrap();
        let p = NetworkParams::new(
            0.5,
            vec![
                StencilBank::new(1, 1, vec![a]).unwrap(),
                StencilBank::new(1, 1, vec![b]).unwrap(),
            ],
            vec![vec![-1.0], vec![1.0]],
            StencilBank::identity(1, 1, 3),
            Activation::tanh(),
            false,
        )
        .unwrap();
        let q = prolong_depth(&p, 2).unwrap();
        assert_eq!(q.num_layers(), 4);
        assert_eq!(q.dt(), 0.25);
        assert_eq!(q.final_time(), p.final_time());
        let centers: Vec<f64> = q.banks().iter().map(|b| b.get(0, 0).at(1, 1)).collect();
        assert_eq!(centers, vec![1.0, 2.0, 3.0, 3.0]);
        let biases: Vec<f64> = q.biases().iter().map(|b| b[0]).collect();
        assert_eq!(biases, vec![-1.0, 0.0, 1.0, 1.0]);
        assert!(prolong_depth(&p, 1).is_err());
    }

    #[test]
    fn prolong_depth_keeps_constants_and_final_time() {
        let (mut p, _) = random_model(4, Grid2D::unit_square(4).unwrap(), 3);
        let first = p.banks()[0].clone();
        let bias = p.biases()[0].clone();
        for b in p.banks_mut() {
            b.clone_from(&first);
        }
        for b in p.biases_mut() {
            b.clone_from(&bias);
        }
        for factor in [2, 3, 4] {
            let q = prolong_depth(&p, factor).unwrap();
            assert_eq!(q.final_time(), p.final_time());
            assert!(q.banks().iter().all(|b| b == &first));
            assert!(q.biases().iter().all(|b| b == &bias));
        }
    }

    #[test]
    fn pyramid_levels_are_blurred_restrictions() {
        let g = Grid2D::unit_square(8).unwrap();
        let d = make_synthetic(SyntheticKind::Bars, 6, g, 0.0, 1).unwrap();
        let t = TransferPair::bilinear();
        let pyr = ResolutionPyramid::build(&d, Some(&d), 2, t, 0.8).unwrap();
        assert_eq!(pyr.levels(), 3);
        assert_eq!(pyr.train(2).grid().unwrap().nx(), 2);
        let expect: Image =
            restrict_image(&gaussian_blur(&pyr.train(0).images()[3], 0.8).unwrap(), &t).unwrap();
        assert_eq!(pyr.train(1).images()[3], expect);
        assert_eq!(pyr.val(1).unwrap().images()[3], expect);
        assert_eq!(pyr.train(1).labels(), d.labels());
    }

    #[test]
    fn single_level_multilevel_is_plain_training() {
        let g = Grid2D::unit_square(8).unwrap();
        let d = make_synthetic(SyntheticKind::Bars, 12, g, 0.1, 2).unwrap();
        let (p, c) = init_model(&Architecture::default(), g, 2, 3).unwrap();
        let cfg = BcdConfig {
            outer_iters: 3,
            ..BcdConfig::default()
        };
        let reg = RegConfig {
            lambda_w: 1e-3,
            lambda_theta: 1e-3,
        };
        let pyr =
            ResolutionPyramid::build(&d, None, 0, TransferPair::constant_average(), 0.0).unwrap();
        let sched = LevelSchedule::uniform(1, cfg).unwrap();
        let ml = multilevel_train(&pyr, &sched, (&p, &c), &reg).unwrap();
        let plain = bcd_train(&d, None, &p, &c, &reg, &cfg).unwrap();
        assert_eq!(ml.params, plain.params);
        assert_eq!(ml.classifier, plain.classifier);
        assert_eq!(ml.levels[0].result.history, plain.history);
    }

    #[test]
    fn multilevel_histories_follow_schedule() {
        let g = Grid2D::unit_square(8).unwrap();
        let d = make_synthetic(SyntheticKind::Bars, 12, g, 0.1, 2).unwrap();
        let pyr =
            ResolutionPyramid::build(&d, None, 1, TransferPair::constant_average(), 0.5).unwrap();
        let (p, c) = init_model(&Architecture::default(), g.coarsen().unwrap(), 2, 3).unwrap();
        let base = BcdConfig::default();
        let sched = LevelSchedule::new(vec![
            BcdConfig {
                outer_iters: 2,
                ..base
            },
            BcdConfig {
                outer_iters: 3,
                ..base
            },
        ])
        .unwrap();
        let ml = multilevel_train(&pyr, &sched, (&p, &c), &RegConfig::default()).unwrap();
        let lens: Vec<(usize, usize)> = ml
            .levels
            .iter()
            .map(|l| (l.level, l.result.history.len()))
            .collect();
        assert_eq!(lens, vec![(1, 3), (0, 2)]);
        assert_eq!(ml.classifier.grid().nx(), 8);
        assert!(LevelSchedule::new(vec![BcdConfig {
            outer_iters: 0,
            ..base
        }])
        .is_err());
    }

    #[test]
    fn deepen_validates_and_records() {
        let g = Grid2D::unit_square(8).unwrap();
        let d = make_synthetic(SyntheticKind::Bars, 8, g, 0.1, 2).unwrap();
        let cfg = BcdConfig {
            outer_iters: 2,
            ..BcdConfig::default()
        };
        let arch = Architecture::default();
        let reg = RegConfig::default();
        assert!(shallow_to_deep_train(&d, None, &[2, 3], &arch, &reg, &cfg, 0).is_err());
        assert!(shallow_to_deep_train(&d, None, &[4, 2], &arch, &reg, &cfg, 0).is_err());
        let r = shallow_to_deep_train(&d, None, &[1, 2, 4], &arch, &reg, &cfg, 0).unwrap();
        assert_eq!(r.depths.len(), 3);
        assert!(r.depths[0].cold.is_none());
        for dr in &r.depths {
            assert_eq!(dr.warm.history.len(), 2);
            assert_eq!(dr.warm.params.num_layers(), dr.depth);
        }
        assert_eq!(r.params.num_layers(), 4);

        let (p0, c0) = init_model(&Architecture { layers: 1, ..arch }, g, 2, 0).unwrap();
        let plain = bcd_train(&d, None, &p0, &c0, &reg, &cfg).unwrap();
        let single = shallow_to_deep_train(&d, None, &[1], &arch, &reg, &cfg, 0).unwrap();
        assert_eq!(single.depths[0].warm.history, plain.history);
    }
}
