//! Implicit adversarial perturbations: projected gradient ascent on the
//! continuous perturbations (delta_x, delta_y) injected at configurable
//! model sites, maximizing the base objective's consistency term.

use rand::Rng;

use crate::autodiff::{Array, Graph};
use crate::model::{BoundParams, ParamSet, PerturbationSite, Side, TokenSeq};
use crate::objectives::{build_loss_o, LossOpts, ObjectiveError};

/// A finished pair of perturbations, one per side, each inside its
/// epsilon-ball in Frobenius norm.
#[derive(Clone, Debug)]
pub struct PerturbationPair {
    pub delta_x: Array,
    pub delta_y: Array,
    pub site_x: PerturbationSite,
    pub site_y: PerturbationSite,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AdvGradConfig {
    pub site_x: PerturbationSite,
    pub site_y: PerturbationSite,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub noise_range: f64,
    pub enable_x: bool,
    pub enable_y: bool,
}

impl Default for AdvGradConfig {
    fn default() -> Self {
        AdvGradConfig {
            site_x: PerturbationSite::embedding(Side::Encoder),
            site_y: PerturbationSite::embedding(Side::Decoder),
            epsilon: 0.2,
            alpha: 0.4,
            steps: 1,
            noise_range: 1e-2,
            enable_x: true,
            enable_y: true,
        }
    }
}

/// Radial projection onto the Frobenius epsilon-ball.
pub fn project_ball(delta: &Array, epsilon: f64) -> Array {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let norm = delta.frobenius_norm();
    if norm <= epsilon {
        return delta.clone();
    }
    let scale = epsilon / norm;
    let mut out = delta.clone();
    out.data.iter_mut().for_each(|v| *v *= scale);
    out
}

/// One normalized ascent step followed by projection. A vanishing
/// gradient skips the step (projection only).
pub fn ascent_step(delta: &Array, grad: &Array, alpha: f64, epsilon: f64) -> Array {
    assert_eq!(delta.shape, grad.shape, "gradient shape mismatch");
    let gnorm = grad.frobenius_norm();
    if gnorm < 1e-12 {
        return project_ball(delta, epsilon);
    }
    let mut stepped = delta.clone();
    let scale = alpha / gnorm;
    for (d, g) in stepped.data.iter_mut().zip(&grad.data) {
        *d += scale * g;
    }
    project_ball(&stepped, epsilon)
}

/// Uniform noise in (-range, +range), the ascent starting point.
pub fn sample_noise<R: Rng>(shape: Vec<usize>, range: f64, rng: &mut R) -> Array {
    assert!(range >= 0.0, "noise range must be non-negative");
    let n = shape.iter().product();
    if range == 0.0 {
        return Array::zeros(shape);
    }
    let data = (0..n).map(|_| rng.gen_range(-range..range)).collect();
    Array::new(shape, data)
}

/// Run `steps` rounds of projected gradient ascent starting from the
/// given initializations. Each round re-evaluates the base objective at
/// the current perturbations and steps both sides from one backward pass.
pub fn build_advgrad_from(
    params: &ParamSet,
    x: &TokenSeq,
    y: &TokenSeq,
    init_x: Array,
    init_y: Array,
    cfg: &AdvGradConfig,
    smoothing: f64,
) -> Result<PerturbationPair, ObjectiveError> {
    let opts = LossOpts { smoothing, ..Default::default() };
    let mut delta_x = if cfg.enable_x {
        init_x
    } else {
        Array::zeros(init_x.shape.clone())
    };
    let mut delta_y = if cfg.enable_y {
        init_y
    } else {
        Array::zeros(init_y.shape.clone())
    };
    for _ in 0..cfg.steps.max(1) {
        let graph = Graph::new();
        let bp = BoundParams::bind(&graph, params);
        let built = build_loss_o(
            &graph,
            &bp,
            params,
            x,
            y,
            delta_x.clone(),
            delta_y.clone(),
            cfg.site_x,
            cfg.site_y,
            true,
            &opts,
        )?;
        graph.backward(&built.total)?;
        if cfg.enable_x {
            let gx = built.delta_x.grad()?;
            delta_x = ascent_step(&delta_x, &gx, cfg.alpha, cfg.epsilon);
        }
        if cfg.enable_y {
            let gy = built.delta_y.grad()?;
            delta_y = ascent_step(&delta_y, &gy, cfg.alpha, cfg.epsilon);
        }
    }
    Ok(PerturbationPair {
        delta_x,
        delta_y,
        site_x: cfg.site_x,
        site_y: cfg.site_y,
        epsilon: cfg.epsilon,
        alpha: cfg.alpha,
        steps: cfg.steps.max(1),
    })
}

/// Sample fresh uniform initializations, then run the ascent.
pub fn build_advgrad<R: Rng>(
    params: &ParamSet,
    x: &TokenSeq,
    y: &TokenSeq,
    cfg: &AdvGradConfig,
    smoothing: f64,
    rng: &mut R,
) -> Result<PerturbationPair, ObjectiveError> {
    let wx = params.cfg.site_width(cfg.site_x);
    let wy = params.cfg.site_width(cfg.site_y);
    let init_x = sample_noise(vec![x.len(), wx], cfg.noise_range, rng);
    let init_y = sample_noise(vec![y.len(), wy], cfg.noise_range, rng);
    build_advgrad_from(params, x, y, init_x, init_y, cfg, smoothing)
}
