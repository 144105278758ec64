//! The adversarial-augmentation training loop: one half-weighted backward
//! pass on the base objective, construction of the implicit (gradient)
//! and explicit (token-swap) adversarial samples from that pass, a second
//! half-weighted backward on their consistency losses, then one Adam step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

use crate::advgrad::{ascent_step, sample_noise};
use crate::advswap::{
    pick_target_context, rank_top_k, select_word_overlapping, spans_to_mask, swap_token,
    ContextMode, SelectStrategy,
};
use crate::autodiff::{Array, Graph, Tensor};
use crate::model::{
    decoder_input, forward, BoundParams, ParamSet, PerturbationSite, Side, TokenSeq,
    NUM_SPECIALS,
};
use crate::objectives::{kl_sym_rows_graph, nll_graph, LossOpts};
use crate::tasks::Sample;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub label_smoothing: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub ascent_steps: usize,
    pub k: f64,
    pub noise_range: f64,
    pub enable_advgrad: bool,
    pub enable_advswap: bool,
    /// keep the consistency (symmetric-KL) terms; disabling switches the
    /// adversarial losses to plain smoothed NLL on the adversarial passes
    pub kl_enabled: bool,
    pub enable_delta_x: bool,
    pub enable_delta_y: bool,
    pub site_x: PerturbationSite,
    pub site_y: PerturbationSite,
    pub context_mode: ContextMode,
    pub num_spans: usize,
    pub span_len: usize,
    pub strategy: SelectStrategy,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            label_smoothing: 0.1,
            alpha: 0.4,
            epsilon: 0.2,
            ascent_steps: 1,
            k: 0.15,
            noise_range: 1e-2,
            enable_advgrad: true,
            enable_advswap: true,
            kl_enabled: true,
            enable_delta_x: true,
            enable_delta_y: true,
            site_x: PerturbationSite::embedding(Side::Encoder),
            site_y: PerturbationSite::embedding(Side::Decoder),
            context_mode: ContextMode::Spans,
            num_spans: 2,
            span_len: 3,
            strategy: SelectStrategy::GradientRanking,
            batch_size: 8,
            epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0
            || !(0.0..1.0).contains(&self.label_smoothing)
            || self.alpha <= 0.0
            || self.epsilon <= 0.0
            || self.ascent_steps == 0
            || !(self.k > 0.0 && self.k <= 1.0)
            || self.noise_range < 0.0
            || self.batch_size == 0
        {
            return Err(TrainError::BadConfig);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepReport {
    pub step: usize,
    pub nll: f64,
    pub kl_o: f64,
    pub loss_i: f64,
    pub loss_e: f64,
    pub grad_norm: f64,
    pub delta_x_norm: f64,
    pub delta_y_norm: f64,
    pub swaps: usize,
}

pub const STEP_LOG_HEADER: &str =
    "step\tnll\tkl_o\tloss_i\tloss_e\tgrad_norm\tdelta_x_norm\tdelta_y_norm\tswaps";

impl StepReport {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.step,
            self.nll,
            self.kl_o,
            self.loss_i,
            self.loss_e,
            self.grad_norm,
            self.delta_x_norm,
            self.delta_y_norm,
            self.swaps
        )
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration")]
    BadConfig,
    #[error("non-finite {term} = {value} at step {step}; step aborted, no update applied")]
    NonFinite { term: &'static str, value: f64, step: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Objective(#[from] crate::objectives::ObjectiveError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Swap(#[from] crate::advswap::SwapError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

/// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
pub struct AdamState {
    m: HashMap<String, Array>,
    v: HashMap<String, Array>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|(n, a)| (n.clone(), Array::zeros(a.shape.clone())))
            .collect();
        let v = params
            .entries()
            .iter()
            .map(|(n, a)| (n.clone(), Array::zeros(a.shape.clone())))
            .collect();
        AdamState { m, v, t: 0 }
    }
}

pub fn optimizer_update(
    params: &mut ParamSet,
    grads: &HashMap<String, Array>,
    state: &mut AdamState,
    lr: f64,
) {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    params.for_each_mut(|name, value| {
        let g = match grads.get(name) {
            Some(g) => g,
            None => return,
        };
        assert_eq!(g.shape, value.shape, "gradient shape mismatch for {name}");
        let m = state.m.get_mut(name).expect("adam state");
        let v = state.v.get_mut(name).expect("adam state");
        for i in 0..value.data.len() {
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * g.data[i];
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * g.data[i] * g.data[i];
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            value.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    });
}

fn grad_l2(grads: &HashMap<String, Array>) -> f64 {
    grads
        .values()
        .flat_map(|a| a.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// One training step over a mini-batch: per sample, build the base
/// objective on a fresh graph (clean + noise-perturbed passes), backward
/// with weight 1/2, construct both adversarial augmentations from that
/// pass, add their consistency losses (two more forward passes), backward
/// with weight 1/2, and accumulate the batch-averaged gradient into one
/// optimizer update.
pub fn advseq_step(
    params: &mut ParamSet,
    batch: &[Sample],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport, TrainError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let b = batch.len() as f64;
    let half = 0.5 / b;
    let opts = LossOpts { smoothing: cfg.label_smoothing, ..Default::default() };
    let mut acc: HashMap<String, Array> = HashMap::new();
    let mut report = StepReport { step, ..Default::default() };

    for sample in batch {
        let x = &sample.x;
        // train against the EOS-terminated target so decoding learns to
        // stop; corpus targets store content tokens only
        let y = &TokenSeq::new(
            sample.y.ids.iter().copied().chain(std::iter::once(crate::model::EOS)).collect(),
        );
        let wx = params.cfg.site_width(cfg.site_x);
        let wy = params.cfg.site_width(cfg.site_y);
        // one noise draw feeds both the base KL term and the ascent start
        let mut noise_x = sample_noise(vec![x.len(), wx], cfg.noise_range, rng);
        let mut noise_y = sample_noise(vec![y.len(), wy], cfg.noise_range, rng);
        if !cfg.enable_delta_x {
            noise_x = Array::zeros(vec![x.len(), wx]);
        }
        if !cfg.enable_delta_y {
            noise_y = Array::zeros(vec![y.len(), wy]);
        }

        let graph = Graph::new();
        let bp = BoundParams::bind(&graph, params);
        let dec_ids = decoder_input(y);
        let clean = forward(&graph, &bp, &params.cfg, &x.ids, &dec_ids, &[]);
        let dx = graph.leaf(noise_x.clone());
        let dy = graph.leaf(noise_y.clone());
        // the noisy pass only matters when its KL term is live or the
        // ascent needs a gradient at the perturbation sites
        let noisy = if cfg.kl_enabled || cfg.enable_advgrad {
            Some(forward(
                &graph,
                &bp,
                &params.cfg,
                &x.ids,
                &dec_ids,
                &[(cfg.site_x, &dx), (cfg.site_y, &dy)],
            ))
        } else {
            None
        };
        let nll = nll_graph(&graph, &clean.log_probs, &y.ids, cfg.label_smoothing, None);
        let loss_o = if cfg.kl_enabled {
            let kl_o = kl_sym_rows_graph(&graph, noisy.as_ref().unwrap(), &clean, None, &opts);
            report.kl_o += kl_o.value().data[0] / b;
            nll.add(&kl_o)
        } else {
            nll.clone()
        };
        let nll_val = nll.value().data[0];
        report.nll += nll_val / b;
        let loss_o_val = loss_o.value().data[0];
        if !loss_o_val.is_finite() {
            return Err(TrainError::NonFinite { term: "loss_o", value: loss_o_val, step });
        }
        graph.backward_seeded(&loss_o, half)?;

        // adversarial consistency: KL when enabled, adversarial-pass NLL
        // under the no-KL ablation (the terms would otherwise vanish)
        let adv_loss = |pass: &crate::model::Pass, mask: Option<&[bool]>| -> Tensor {
            if cfg.kl_enabled {
                kl_sym_rows_graph(&graph, pass, &clean, mask, &opts)
            } else {
                nll_graph(&graph, &pass.log_probs, &y.ids, cfg.label_smoothing, mask)
            }
        };

        let mut aug_terms: Vec<Tensor> = Vec::new();

        if cfg.enable_advgrad {
            // ascent gradients: from the base backward when the KL term is
            // live, otherwise from a transient pass on the noisy NLL
            let (mut gx, mut gy) = if cfg.kl_enabled {
                (dx.grad()?, dy.grad()?)
            } else {
                let noisy_nll = nll_graph(
                    &graph,
                    &noisy.as_ref().unwrap().log_probs,
                    &y.ids,
                    cfg.label_smoothing,
                    None,
                );
                let tg = graph.transient_gradients(&noisy_nll, 1.0)?;
                (
                    tg.get(&dx).unwrap_or_else(|| Array::zeros(vec![x.len(), wx])),
                    tg.get(&dy).unwrap_or_else(|| Array::zeros(vec![y.len(), wy])),
                )
            };
            let mut adv_x = noise_x.clone();
            let mut adv_y = noise_y.clone();
            for ascent in 0..cfg.ascent_steps {
                if ascent > 0 {
                    // true multi-step ascent re-evaluates the landscape
                    let lx = graph.leaf(adv_x.clone());
                    let ly = graph.leaf(adv_y.clone());
                    let pass = forward(
                        &graph,
                        &bp,
                        &params.cfg,
                        &x.ids,
                        &dec_ids,
                        &[(cfg.site_x, &lx), (cfg.site_y, &ly)],
                    );
                    let root = if cfg.kl_enabled {
                        kl_sym_rows_graph(&graph, &pass, &clean, None, &opts)
                    } else {
                        nll_graph(&graph, &pass.log_probs, &y.ids, cfg.label_smoothing, None)
                    };
                    let tg = graph.transient_gradients(&root, 1.0)?;
                    gx = tg.get(&lx).unwrap_or_else(|| Array::zeros(adv_x.shape.clone()));
                    gy = tg.get(&ly).unwrap_or_else(|| Array::zeros(adv_y.shape.clone()));
                }
                if cfg.enable_delta_x {
                    adv_x = ascent_step(&adv_x, &gx, cfg.alpha, cfg.epsilon);
                }
                if cfg.enable_delta_y {
                    adv_y = ascent_step(&adv_y, &gy, cfg.alpha, cfg.epsilon);
                }
            }
            report.delta_x_norm += adv_x.frobenius_norm() / b;
            report.delta_y_norm += adv_y.frobenius_norm() / b;
            let cx = graph.constant(adv_x);
            let cy = graph.constant(adv_y);
            let adv_pass = forward(
                &graph,
                &bp,
                &params.cfg,
                &x.ids,
                &dec_ids,
                &[(cfg.site_x, &cx), (cfg.site_y, &cy)],
            );
            let li = adv_loss(&adv_pass, None);
            report.loss_i += li.value().data[0] / b;
            aug_terms.push(li);
        }

        if cfg.enable_advswap {
            let context = pick_target_context(
                x,
                y,
                cfg.context_mode,
                cfg.num_spans,
                cfg.span_len,
                16,
                rng,
            );
            let mask = spans_to_mask(&context, y.len());
            let selected: Vec<usize> = match cfg.strategy {
                SelectStrategy::WordOverlapping => {
                    select_word_overlapping(x, y, &context).into_iter().collect()
                }
                SelectStrategy::GradientRanking => {
                    let eligible: Vec<usize> = (0..x.len())
                        .filter(|&i| x.ids[i] >= NUM_SPECIALS)
                        .collect();
                    if eligible.is_empty() {
                        Vec::new()
                    } else {
                        let masked_nll = nll_graph(
                            &graph,
                            &clean.log_probs,
                            &y.ids,
                            cfg.label_smoothing,
                            Some(&mask),
                        );
                        let tg = graph.transient_gradients(&masked_nll, 1.0)?;
                        let rows = tg
                            .get(&clean.enc_sites[0])
                            .unwrap_or_else(|| Array::zeros(vec![x.len(), wx]));
                        let scored: Vec<(usize, f64)> = eligible
                            .iter()
                            .map(|&p| {
                                (p, rows.row(p).iter().map(|v| v * v).sum::<f64>().sqrt())
                            })
                            .collect();
                        rank_top_k(scored, cfg.k).into_iter().collect()
                    }
                }
            };
            let mut x_adv = x.clone();
            if !selected.is_empty() {
                let masked_nll = nll_graph(
                    &graph,
                    &clean.log_probs,
                    &y.ids,
                    cfg.label_smoothing,
                    Some(&mask),
                );
                let tg = graph.transient_gradients(&masked_nll, 1.0)?;
                let rows = tg
                    .get(&clean.enc_sites[0])
                    .unwrap_or_else(|| Array::zeros(vec![x.len(), wx]));
                for &pos in &selected {
                    x_adv.ids[pos] = swap_token(params, x, pos, rows.row(pos))?;
                }
            }
            report.swaps += selected.len();
            let swap_dec = decoder_input(y);
            let swap_pass = forward(&graph, &bp, &params.cfg, &x_adv.ids, &swap_dec, &[]);
            let le = adv_loss(&swap_pass, Some(&mask));
            report.loss_e += le.value().data[0] / b;
            aug_terms.push(le);
        }

        if let Some(first) = aug_terms.first().cloned() {
            let total = aug_terms[1..].iter().fold(first, |a, t| a.add(t));
            let total_val = total.value().data[0];
            if !total_val.is_finite() {
                return Err(TrainError::NonFinite {
                    term: "loss_i + loss_e",
                    value: total_val,
                    step,
                });
            }
            graph.backward_seeded(&total, half)?;
        }

        for (name, g) in bp.grads() {
            match acc.get_mut(&name) {
                Some(a) => {
                    for (ai, gi) in a.data.iter_mut().zip(&g.data) {
                        *ai += gi;
                    }
                }
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }

    report.grad_norm = grad_l2(&acc);
    if !report.grad_norm.is_finite() {
        return Err(TrainError::NonFinite { term: "gradient", value: report.grad_norm, step });
    }
    optimizer_update(params, &acc, adam, cfg.learning_rate);
    Ok(report)
}

/// Shuffled mini-batch epochs of [`advseq_step`]. The callback observes
/// each finished step with the updated parameters (for logging and
/// checkpointing).
pub fn train<F: FnMut(&StepReport, &ParamSet)>(
    params: &mut ParamSet,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut callback: F,
) -> Result<Vec<StepReport>, TrainError> {
    cfg.validate()?;
    let mut adam = AdamState::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        // Fisher-Yates with the run RNG keeps epochs deterministic
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let report = advseq_step(params, &batch, cfg, &mut adam, step, &mut rng)?;
            callback(&report, params);
            reports.push(report);
            step += 1;
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchKind, ModelConfig};
    use crate::objectives::nll_smoothed;
    use crate::objectives::ProbSeq;

    fn toy_params(seed: u64) -> ParamSet {
        let cfg = ModelConfig {
            vocab_size: 14,
            embed_dim: 8,
            hidden_dim: 10,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            arch: ArchKind::Attention,
            max_decode_len: 8,
            max_positions: 16,
        };
        ParamSet::init(cfg, seed)
    }

    fn toy_batch() -> Vec<Sample> {
        vec![
            Sample {
                x: TokenSeq::new(vec![4, 5, 6]),
                y: TokenSeq::new(vec![4, 5, 6]),
            },
            Sample {
                x: TokenSeq::new(vec![7, 8]),
                y: TokenSeq::new(vec![7, 8]),
            },
        ]
    }

    // reference Adam trace, recomputed here from the textbook recurrences
    #[test]
    fn adam_matches_reference_trace() {
        use rand::Rng;
        let mut params = toy_params(3);
        let name = "emb".to_string();
        let shape = params.get("emb").shape.clone();
        let n = params.get("emb").data.len();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut state = AdamState::new(&params);
        // independent oracle state
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut theta = params.get("emb").data.clone();
        let lr = 1e-3;
        for t in 1..=10u64 {
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut grads = HashMap::new();
            grads.insert(name.clone(), Array::new(shape.clone(), g.clone()));
            optimizer_update(&mut params, &grads, &mut state, lr);
            for i in 0..n {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
                let vh = v[i] / (1.0 - 0.999f64.powi(t as i32));
                theta[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
            for (a, b) in params.get("emb").data.iter().zip(&theta) {
                assert!((a - b).abs() < 1e-15, "divergence at t={t}");
            }
        }
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut params = toy_params(3);
        let before = params.snapshot();
        let mut state = AdamState::new(&params);
        let grads: HashMap<String, Array> = params
            .entries()
            .iter()
            .map(|(n, a)| (n.clone(), Array::zeros(a.shape.clone())))
            .collect();
        optimizer_update(&mut params, &grads, &mut state, 1e-3);
        for (n, a) in params.entries() {
            assert_eq!(a.data, before.get(n).data);
        }
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut params = toy_params(3);
        let before = params.get("emb").data.clone();
        let mut state = AdamState::new(&params);
        let shape = params.get("emb").shape.clone();
        let n = before.len();
        let mut grads = HashMap::new();
        grads.insert("emb".to_string(), Array::new(shape, vec![0.5; n]));
        optimizer_update(&mut params, &grads, &mut state, 1e-3);
        // at t=1, m_hat = g and v_hat = g^2, so the step is ~ -lr
        for (a, b) in params.get("emb").data.iter().zip(&before) {
            assert!((b - a - 1e-3).abs() < 1e-9);
        }
    }

    // half-weighting identity: augmentations off and noise zero make the
    // accumulated gradient exactly half the plain NLL gradient
    #[test]
    fn half_weighted_gradient_identity() {
        let params = toy_params(5);
        let batch = vec![toy_batch()[0].clone()];
        let cfg = TrainConfig {
            enable_advgrad: false,
            enable_advswap: false,
            noise_range: 0.0,
            learning_rate: 1e-9, // tiny lr so params barely move for the check
            ..Default::default()
        };
        // run one step but capture the accumulated gradient by replaying
        // the same computation: clean NLL on an independent graph
        let mut p1 = params.snapshot();
        let mut adam = AdamState::new(&p1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = advseq_step(&mut p1, &batch, &cfg, &mut adam, 0, &mut rng).unwrap();
        assert_eq!(report.kl_o, 0.0);
        assert_eq!(report.swaps, 0);

        // independent: full NLL gradient on the EOS-terminated target
        let graph = Graph::new();
        let bp = BoundParams::bind(&graph, &params);
        let y_ext = TokenSeq::new(
            batch[0].y.ids.iter().copied().chain(std::iter::once(crate::model::EOS)).collect(),
        );
        let dec = decoder_input(&y_ext);
        let pass = forward(&graph, &bp, &params.cfg, &batch[0].x.ids, &dec, &[]);
        let nll = nll_graph(&graph, &pass.log_probs, &y_ext.ids, 0.1, None);
        graph.backward(&nll).unwrap();
        let full: f64 = bp
            .grads()
            .iter()
            .flat_map(|(_, g)| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(
            (report.grad_norm * 2.0 - full).abs() < 1e-12,
            "2*{} != {}",
            report.grad_norm,
            full
        );
    }

    #[test]
    fn determinism_across_runs() {
        let cfg = TrainConfig { batch_size: 2, epochs: 3, ..Default::default() };
        let samples = toy_batch();
        let mut p1 = toy_params(7);
        let mut p2 = toy_params(7);
        let r1 = train(&mut p1, &samples, &cfg, |_, _| {}).unwrap();
        let r2 = train(&mut p2, &samples, &cfg, |_, _| {}).unwrap();
        assert_eq!(r1.len(), r2.len());
        for (n, a) in p1.entries() {
            assert_eq!(a.data, p2.get(n).data, "param {n} differs");
        }
    }

    #[test]
    fn epochs_zero_no_change() {
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let samples = toy_batch();
        let mut p = toy_params(7);
        let before = p.snapshot();
        let reports = train(&mut p, &samples, &cfg, |_, _| {}).unwrap();
        assert!(reports.is_empty());
        for (n, a) in p.entries() {
            assert_eq!(a.data, before.get(n).data);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let mut p = toy_params(7);
        let mut adam = AdamState::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            advseq_step(&mut p, &[], &TrainConfig::default(), &mut adam, 0, &mut rng),
            Err(TrainError::EmptyBatch)
        ));
    }

    #[test]
    fn nonfinite_loss_skips_update() {
        let mut p = toy_params(7);
        // poison a weight so the forward produces NaN
        p.get_mut("emb").data[40] = f64::NAN;
        let before = p.snapshot();
        let mut adam = AdamState::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = advseq_step(&mut p, &toy_batch(), &TrainConfig::default(), &mut adam, 0, &mut rng);
        assert!(matches!(got, Err(TrainError::NonFinite { .. })));
        for (n, a) in p.entries() {
            let b = &before.get(n).data;
            for (x, y) in a.data.iter().zip(b.iter()) {
                assert!(x.to_bits() == y.to_bits());
            }
        }
    }

    #[test]
    fn full_step_reports_finite_components() {
        let mut p = toy_params(9);
        let mut adam = AdamState::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = TrainConfig { span_len: 1, ..Default::default() };
        let r = advseq_step(&mut p, &toy_batch(), &cfg, &mut adam, 0, &mut rng).unwrap();
        for v in [r.nll, r.kl_o, r.loss_i, r.loss_e, r.grad_norm, r.delta_x_norm, r.delta_y_norm] {
            assert!(v.is_finite());
        }
        assert!(r.nll > 0.0);
        assert!(r.grad_norm > 0.0);
        assert!(r.delta_x_norm <= cfg.epsilon + 1e-9);
        assert!(r.delta_y_norm <= cfg.epsilon + 1e-9);
    }

    // a handful of steps on a tiny copy batch should reduce the NLL
    #[test]
    fn nll_decreases_on_tiny_copy() {
        let mut p = toy_params(11);
        let samples = toy_batch();
        let cfg = TrainConfig { batch_size: 2, epochs: 600, span_len: 1, ..Default::default() };
        let reports = train(&mut p, &samples, &cfg, |_, _| {}).unwrap();
        let first = reports.first().unwrap().nll;
        let last = reports.last().unwrap().nll;
        assert!(last < first, "nll {first} -> {last}");
        // sanity: the trained model now assigns high probability to gold
        let dist = crate::model::teacher_forced_dist(&p, &samples[0].x, &samples[0].y, &[]).unwrap();
        let nll = nll_smoothed(&ProbSeq::unmasked(dist), &samples[0].y, 0.0);
        assert!(nll.value < 1.0, "gold NLL after training = {}", nll.value);
    }

    // flag isolation: toggling advswap must not change the advgrad-only
    // gradient path when swaps are the only difference
    #[test]
    fn disabled_components_contribute_zero() {
        let samples = toy_batch();
        // baseline: nothing enabled vs. only kl disabled paths produce
        // the same parameters when the extra terms are all off
        let cfg_a = TrainConfig {
            enable_advgrad: false,
            enable_advswap: false,
            noise_range: 0.0,
            ..Default::default()
        };
        let cfg_b = TrainConfig {
            enable_advgrad: false,
            enable_advswap: false,
            noise_range: 0.0,
            kl_enabled: false,
            ..Default::default()
        };
        // with zero noise the KL term is exactly zero, so its gradient
        // vanishes and both runs must match bit-for-bit
        let mut pa = toy_params(13);
        let mut pb = toy_params(13);
        train(&mut pa, &samples, &cfg_a, |_, _| {}).unwrap();
        train(&mut pb, &samples, &cfg_b, |_, _| {}).unwrap();
        for (n, a) in pa.entries() {
            let b = pb.get(n);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12, "param {n} path-dependent");
            }
        }
    }
}
