//! Scalar objectives and their analytic gradients.
//!
//! * cosine cross-entropy,
//! * the covariance constraint loss `−½ Σ (1 + log σ² − σ²)`, zero exactly at σ² = 1,
//! * the base objective `CE + γ·CCL`,
//! * similarity-weighted priors `N(μ̃, I)` over the other classes' prototypes,
//! * the closed-form Gaussian KL to that prior,
//! * the incremental objective `CE(x) + CE(μ̂ + σ̂ ⊙ x) + α·KL`.
//!
//! Batch objectives average per-sample terms. Prior means are inputs to the
//! objective and are not differentiated through.

use crate::error::{ensure_same_len, Error, Result};
use crate::mathcore::{axpy, cosine_similarity, stable_softmax, RandomStream, Vec64};
use crate::model::{
    cosine_logits_backward, perturb, GaussianStats, GradientBundle, MlpExtractor, Network,
    OutputGrad, PrototypeClassifier, StatisticsHead, LOGVAR_MAX, LOGVAR_MIN,
};

/// Probabilities are floored here before taking the log.
pub const CE_PROB_FLOOR: f64 = 1e-12;

/// Default finite-difference step for [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Acceptance threshold on the maximum relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// A loss value with its labeled parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub components: Vec<(&'static str, f64)>,
}

impl LossValue {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, v)| v)
    }
}

/// Weights of the CCL term (`gamma`) and of the KL term (`alpha`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyperparams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            alpha: 0.01,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `−log max(p[label], 1e-12)`.
pub fn ce_cosine_loss(probabilities: &[f64], label_index: usize) -> Result<f64> {
    let p = probabilities.get(label_index).ok_or(Error::OutOfRange {
        context: "cross-entropy label",
        index: label_index,
        len: probabilities.len(),
    })?;
    Ok(-p.max(CE_PROB_FLOOR).ln())
}

fn ccl_sample(logvar: &[f64]) -> f64 {
    -0.5 * logvar.iter().map(|&lv| 1.0 + lv - lv.exp()).sum::<f64>()
}

/// Batch mean of `−½ Σ_i (1 + logvar_i − exp(logvar_i))`.
pub fn ccl_loss(logvar_batch: &[Vec64]) -> Result<f64> {
    if logvar_batch.is_empty() {
        return Err(Error::Empty("log-variance batch"));
    }
    let dim = logvar_batch[0].len();
    let mut total = 0.0;
    for lv in logvar_batch {
        ensure_same_len("log-variance batch", lv.len(), dim)?;
        total += ccl_sample(lv);
    }
    Ok(total / logvar_batch.len() as f64)
}

/// `CE + γ·CCL` with both parts reported.
pub fn base_loss(
    probabilities: &[f64],
    label_index: usize,
    logvar_batch: &[Vec64],
    hp: Hyperparams,
) -> Result<LossValue> {
    hp.validate()?;
    let ce = ce_cosine_loss(probabilities, label_index)?;
    let ccl = ccl_loss(logvar_batch)?;
    Ok(LossValue {
        value: ce + hp.gamma * ccl,
        components: vec![("ce", ce), ("ccl", ccl)],
    })
}

/// Softmax-normalized similarity of a sample to every class other than its own.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityWeights {
    pub weights: Vec64,
    pub own_class: usize,
}

/// `exp(cos(w_c, f))` normalized over the classes `c ≠ own_class`; zero at
/// `own_class`.
pub fn similarity_scores(
    f: &[f64],
    classifier: &PrototypeClassifier,
    own_class: usize,
) -> Result<SimilarityWeights> {
    if classifier.len() < 2 {
        return Err(Error::InvalidArgument(
            "similarity scores need at least two classes".into(),
        ));
    }
    if own_class >= classifier.len() {
        return Err(Error::OutOfRange {
            context: "own class",
            index: own_class,
            len: classifier.len(),
        });
    }
    let mut logits = classifier.cosine_logits(f)?;
    logits.remove(own_class);
    let mut weights = stable_softmax(&logits)?;
    weights.insert(own_class, 0.0);
    Ok(SimilarityWeights { weights, own_class })
}

/// `μ̃ = Σ_{c ≠ own} S_c · w_c`.
pub fn prior_mean(weights: &SimilarityWeights, classifier: &PrototypeClassifier) -> Result<Vec64> {
    ensure_same_len(
        "similarity weights",
        weights.weights.len(),
        classifier.len(),
    )?;
    let mut mu = vec![0.0; classifier.dim()];
    for (c, (w, &s)) in classifier
        .prototypes()
        .iter()
        .zip(&weights.weights)
        .enumerate()
    {
        if c != weights.own_class {
            axpy(&mut mu, w, s);
        }
    }
    Ok(mu)
}

/// `KL[N(μ̂, σ̂²) ‖ N(μ̃, I)] = ½ Σ (σ̂² + (μ̂ − μ̃)² − 1 − log σ̂²)`.
pub fn kl_to_prior(stats: &GaussianStats, mu_tilde: &[f64]) -> Result<f64> {
    ensure_same_len("KL mean", stats.mu_hat.len(), mu_tilde.len())?;
    ensure_same_len("KL log-variance", stats.logvar_hat.len(), mu_tilde.len())?;
    Ok(0.5
        * stats
            .mu_hat
            .iter()
            .zip(&stats.logvar_hat)
            .zip(mu_tilde)
            .map(|((&m, &lv), &t)| lv.exp() + (m - t).powi(2) - 1.0 - lv)
            .sum::<f64>())
}

/// `CE(f) + CE(perturbed_f) + α·KL(stats ‖ N(μ̃, I))`.
pub fn incremental_loss(
    f: &[f64],
    perturbed_f: &[f64],
    classifier: &PrototypeClassifier,
    label_index: usize,
    stats: &GaussianStats,
    mu_tilde: &[f64],
    hp: Hyperparams,
) -> Result<LossValue> {
    hp.validate()?;
    let ce = ce_cosine_loss(&classifier.classify(f)?, label_index)?;
    let ce_perturbed = ce_cosine_loss(&classifier.classify(perturbed_f)?, label_index)?;
    let kl = kl_to_prior(stats, mu_tilde)?;
    Ok(LossValue {
        value: ce + ce_perturbed + hp.alpha * kl,
        components: vec![("ce", ce), ("ce_perturbed", ce_perturbed), ("kl", kl)],
    })
}

/// Batch objectives with analytic gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    CrossEntropy,
    CovarianceConstraint,
    Base { gamma: f64 },
    Kl,
    Incremental { alpha: f64 },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::CrossEntropy => "cross_entropy",
            Objective::CovarianceConstraint => "covariance_constraint",
            Objective::Base { .. } => "base",
            Objective::Kl => "kl_to_prior",
            Objective::Incremental { .. } => "incremental",
        }
    }

    fn needs_head(&self) -> bool {
        !matches!(self, Objective::CrossEntropy)
    }

    fn needs_prior(&self) -> bool {
        matches!(self, Objective::Kl | Objective::Incremental { .. })
    }
}

/// One training sample: raw input, index of its class in the classifier and,
/// for KL-bearing objectives, a fixed prior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub input: Vec64,
    pub label_index: usize,
    pub prior_mean: Option<Vec64>,
}

struct CeTerm {
    loss: f64,
    d_f: Vec64,
    d_w: Vec<(usize, Vec64)>,
}

fn ce_with_grad(classifier: &PrototypeClassifier, f: &[f64], label: usize) -> Result<CeTerm> {
    let probs = classifier.classify(f)?;
    let loss = ce_cosine_loss(&probs, label)?;
    if probs[label] < CE_PROB_FLOOR {
        return Ok(CeTerm {
            loss,
            d_f: vec![0.0; f.len()],
            d_w: Vec::new(),
        });
    }
    let mut d_logits = probs;
    d_logits[label] -= 1.0;
    let (d_f, d_w) = cosine_logits_backward(classifier, f, &d_logits);
    Ok(CeTerm { loss, d_f, d_w })
}

fn scale(v: &mut [f64], s: f64) {
    v.iter_mut().for_each(|x| *x *= s);
}

/// Evaluates a batch objective; with `grads` set, accumulates its gradient.
pub fn evaluate_objective(
    net: &Network,
    objective: Objective,
    batch: &[TrainingItem],
    mut grads: Option<&mut GradientBundle>,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if objective.needs_head() && net.head.is_none() {
        return Err(Error::InvalidArgument(format!(
            "objective {} needs a statistics head",
            objective.name()
        )));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let (mut ce_sum, mut ccl_sum, mut kl_sum, mut cep_sum) = (0.0, 0.0, 0.0, 0.0);

    for item in batch {
        if item.label_index >= net.classifier.len() {
            return Err(Error::OutOfRange {
                context: "training label",
                index: item.label_index,
                len: net.classifier.len(),
            });
        }
        let pass = net.forward(&item.input, grads.is_some())?;
        let f = &pass.features;
        let d = f.len();
        let mut up = OutputGrad::new(d);

        let uses_ce = matches!(
            objective,
            Objective::CrossEntropy | Objective::Base { .. } | Objective::Incremental { .. }
        );
        if uses_ce {
            let t = ce_with_grad(&net.classifier, f, item.label_index)?;
            ce_sum += t.loss;
            axpy(&mut up.features, &t.d_f, inv_n);
            up.prototypes.extend(t.d_w.into_iter().map(|(c, mut g)| {
                scale(&mut g, inv_n);
                (c, g)
            }));
        }

        let stats = pass.stats.as_ref();
        let ccl_weight = match objective {
            Objective::CovarianceConstraint => Some(1.0),
            Objective::Base { gamma } => Some(gamma),
            _ => None,
        };
        if let Some(weight) = ccl_weight {
            let lv = &stats.expect("head checked above").logvar_hat;
            ccl_sum += ccl_sample(lv);
            let d_lv = lv
                .iter()
                .map(|&v| inv_n * weight * 0.5 * (v.exp() - 1.0))
                .collect();
            up.logvar_hat = Some(d_lv);
        }

        let kl_weight = match objective {
            Objective::Kl => Some(1.0),
            Objective::Incremental { alpha } => Some(alpha),
            _ => None,
        };
        if let Some(weight) = kl_weight {
            let st = stats.expect("head checked above");
            let prior = item.prior_mean.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("{} needs prior means", objective.name()))
            })?;
            kl_sum += kl_to_prior(st, prior)?;
            let d_mu: Vec64 = st
                .mu_hat
                .iter()
                .zip(prior)
                .map(|(m, t)| inv_n * weight * (m - t))
                .collect();
            let d_lv: Vec64 = st
                .logvar_hat
                .iter()
                .map(|&v| inv_n * weight * 0.5 * (v.exp() - 1.0))
                .collect();
            up.mu_hat = Some(d_mu);
            up.logvar_hat = Some(d_lv);
        }

        if let Objective::Incremental { .. } = objective {
            let st = stats.expect("head checked above");
            let pf = perturb(f, st)?;
            let t = ce_with_grad(&net.classifier, &pf, item.label_index)?;
            cep_sum += t.loss;
            up.prototypes.extend(t.d_w.into_iter().map(|(c, mut g)| {
                scale(&mut g, inv_n);
                (c, g)
            }));
            // pf = μ̂ + exp(lv/2) ⊙ f
            let d_mu = up.mu_hat.get_or_insert_with(|| vec![0.0; d]);
            axpy(d_mu, &t.d_f, inv_n);
            let d_lv = up.logvar_hat.get_or_insert_with(|| vec![0.0; d]);
            for i in 0..d {
                let sigma = (0.5 * st.logvar_hat[i]).exp();
                d_lv[i] += inv_n * t.d_f[i] * 0.5 * sigma * f[i];
                up.features[i] += inv_n * t.d_f[i] * sigma;
            }
        }

        if let Some(g) = grads.as_deref_mut() {
            net.backward_into(&pass, &up, g)?;
        }
    }

    let (ce, ccl, kl, cep) = (
        ce_sum * inv_n,
        ccl_sum * inv_n,
        kl_sum * inv_n,
        cep_sum * inv_n,
    );
    let lv = match objective {
        Objective::CrossEntropy => LossValue {
            value: ce,
            components: vec![("ce", ce)],
        },
        Objective::CovarianceConstraint => LossValue {
            value: ccl,
            components: vec![("ccl", ccl)],
        },
        Objective::Base { gamma } => LossValue {
            value: ce + gamma * ccl,
            components: vec![("ce", ce), ("ccl", ccl)],
        },
        Objective::Kl => LossValue {
            value: kl,
            components: vec![("kl", kl)],
        },
        Objective::Incremental { alpha } => LossValue {
            value: ce + cep + alpha * kl,
            components: vec![("ce", ce), ("ce_perturbed", cep), ("kl", kl)],
        },
    };
    if !lv.value.is_finite() {
        return Err(Error::NonFinite("loss value"));
    }
    Ok(lv)
}

/// Value and full gradient (every parameter, extractor included).
pub fn objective_with_grad(
    net: &Network,
    objective: Objective,
    batch: &[TrainingItem],
) -> Result<(LossValue, GradientBundle)> {
    let mut g = GradientBundle::zeros_like(net, true);
    let v = evaluate_objective(net, objective, batch, Some(&mut g))?;
    Ok((v, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

/// Central differences carry round-off near `1e-11` at unit loss scale, so
/// magnitudes below `1e-6` are compared against that floor instead.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` against central differences of `eval` at `params`.
pub fn check_gradient(
    params: &[f64],
    analytic: &[f64],
    step: f64,
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    ensure_same_len("gradient check", params.len(), analytic.len())?;
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
        coordinates: params.len(),
    };
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = eval(&probe)?;
        probe[i] = params[i] - step;
        let down = eval(&probe)?;
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || i == 0 {
            report = GradCheckReport {
                max_rel_error: err.max(report.max_rel_error),
                worst_index: i,
                analytic: analytic[i],
                numeric,
                coordinates: params.len(),
            };
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Test hook: multiplies this analytic coordinate by 2 before comparing.
    pub corrupt_coordinate: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            corrupt_coordinate: None,
        }
    }
}

/// Maximum relative error between the analytic gradient of `objective` and
/// central finite differences over every parameter coordinate of `net`.
pub fn grad_check(
    net: &Network,
    objective: Objective,
    batch: &[TrainingItem],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = objective_with_grad(net, objective, batch)?;
    let mut analytic = grads.flatten(net);
    if let Some(i) = opts.corrupt_coordinate {
        let len = analytic.len();
        let slot = analytic.get_mut(i).ok_or(Error::OutOfRange {
            context: "corrupted coordinate",
            index: i,
            len,
        })?;
        *slot *= 2.0;
    }
    let params = net.parameters();
    let mut probe_net = net.clone();
    check_gradient(&params, &analytic, opts.step, |p| {
        probe_net.set_parameters(p)?;
        Ok(evaluate_objective(&probe_net, objective, batch, None)?.value)
    })
}

/// Margin kept between the sampled point and any non-differentiable kink
/// (relu at zero, log-variance clamp bounds, cosine clamp at ±1).
const KINK_MARGIN: f64 = 1e-3;

/// A random network and batch for gradient checking `objective`. Draws are
/// repeated until every relu pre-activation and raw log-variance sits at
/// least 1e-3 away from its kink.
pub fn random_grad_check_case(
    objective: Objective,
    stream: &mut RandomStream,
) -> Result<(Network, Vec<TrainingItem>)> {
    for _ in 0..1000 {
        let input_dim = 2 + stream.below(4);
        let n_hidden = 1 + stream.below(2);
        let hidden: Vec<usize> = (0..n_hidden).map(|_| 2 + stream.below(4)).collect();
        let feature_dim = 2 + stream.below(3);
        let n_classes = 2 + stream.below(4);
        let batch_size = 1 + stream.below(4);

        let mut extractor = MlpExtractor::init(input_dim, &hidden, feature_dim, stream);
        // Bias-free relu nets are positively homogeneous, so cosine losses
        // have exactly-flat directions there.
        for layer in extractor.layers_mut() {
            for b in &mut layer.bias {
                *b = 0.5 * stream.normal();
            }
        }
        let ids: Vec<usize> = (0..n_classes).collect();
        let classifier = PrototypeClassifier::random(feature_dim, &ids, stream)?;
        let mut head = StatisticsHead::random(feature_dim, stream);
        for layer in [&mut head.mu, &mut head.logvar] {
            for b in &mut layer.bias {
                *b = 0.3 * stream.normal();
            }
        }
        // Keep σ̂ moderate so the perturbed CE stays in a well-conditioned range.
        for w in head.logvar.weights.values_mut() {
            *w *= 0.5;
        }
        let net = Network {
            extractor,
            classifier,
            head: Some(head),
        };

        let mut batch = Vec::with_capacity(batch_size);
        let mut ok = true;
        for _ in 0..batch_size {
            let input = stream.draw_normal(input_dim)?;
            let label_index = stream.below(n_classes);
            let f = net.extractor.extract_features(&input)?;
            let raw_lv = net.head.as_ref().unwrap().logvar.forward(&f)?;
            let margin_ok = net.extractor.min_relu_margin(&input)? > KINK_MARGIN
                && raw_lv.iter().all(|v| {
                    (v - LOGVAR_MIN).abs() > KINK_MARGIN && (v - LOGVAR_MAX).abs() > KINK_MARGIN
                });
            let cos_ok = net
                .classifier
                .prototypes()
                .iter()
                .all(|w| cosine_similarity(w, &f).is_ok_and(|c| c.abs() < 1.0 - KINK_MARGIN));
            if !margin_ok || !cos_ok {
                ok = false;
                break;
            }
            let prior_mean = objective
                .needs_prior()
                .then(|| {
                    let sw = similarity_scores(&f, &net.classifier, label_index)?;
                    prior_mean(&sw, &net.classifier)
                })
                .transpose()?;
            batch.push(TrainingItem {
                input,
                label_index,
                prior_mean,
            });
        }
        if ok {
            return Ok((net, batch));
        }
    }
    Err(Error::Infeasible(
        "could not sample a kink-free gradient-check case".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mu: &[f64], lv: &[f64]) -> GaussianStats {
        GaussianStats {
            mu_hat: mu.to_vec(),
            logvar_hat: lv.to_vec(),
        }
    }

    #[test]
    fn ce_examples() {
        let c = 7;
        let uniform = vec![1.0 / c as f64; c];
        assert!((ce_cosine_loss(&uniform, 3).unwrap() - (c as f64).ln()).abs() < 1e-12);
        assert_eq!(ce_cosine_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        let clf =
            PrototypeClassifier::new(2, vec![0, 1], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = clf.classify(&[1.0, 0.0]).unwrap();
        let e = 1f64.exp();
        let oracle = -(e / (e + 1.0)).ln();
        let got = ce_cosine_loss(&p, 0).unwrap();
        assert!((got - oracle).abs() < 1e-9);
        assert!((got - 0.313_261_69).abs() < 1e-8);
        assert!(ce_cosine_loss(&p, 2).is_err());
        assert!((ce_cosine_loss(&[1.0, 0.0], 1).unwrap() - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ccl_examples() {
        assert_eq!(ccl_loss(&[vec![0.0; 5], vec![0.0; 5]]).unwrap(), 0.0);
        let e = 1f64.exp();
        let got = ccl_loss(&[vec![1.0]]).unwrap();
        assert!((got - (-0.5 * (2.0 - e))).abs() < 1e-12);
        assert!((got - 0.359_140_91).abs() < 1e-8);
        let lv = 0.25f64.ln();
        let got = ccl_loss(&[vec![lv]]).unwrap();
        assert!((got - (-0.5 * (1.0 + lv - 0.25))).abs() < 1e-12);
        assert!((got - 0.318_147_18).abs() < 1e-8);
        assert!(ccl_loss(&[]).is_err());
        assert!(ccl_loss(&[vec![0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn base_loss_examples() {
        let probs = [0.2, 0.5, 0.3];
        let ce = ce_cosine_loss(&probs, 1).unwrap();
        let lvs = vec![vec![1.0]];
        let zero_gamma = base_loss(
            &probs,
            1,
            &lvs,
            Hyperparams {
                gamma: 0.0,
                alpha: 0.0,
            },
        )
        .unwrap();
        assert_eq!(zero_gamma.value, ce);
        let unit = base_loss(&probs, 1, &[vec![0.0; 3]], Hyperparams::default()).unwrap();
        assert_eq!(unit.value, ce);
        let v = base_loss(
            &probs,
            1,
            &lvs,
            Hyperparams {
                gamma: 0.01,
                alpha: 0.0,
            },
        )
        .unwrap();
        assert!((v.value - (ce + 0.003_591_4)).abs() < 1e-7);
        assert_eq!(v.component("ce"), Some(ce));
        assert!(
            (v.value - (v.component("ce").unwrap() + 0.01 * v.component("ccl").unwrap())).abs()
                < 1e-12
        );
        assert!(base_loss(
            &probs,
            1,
            &lvs,
            Hyperparams {
                gamma: -1.0,
                alpha: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn similarity_examples() {
        let clf = PrototypeClassifier::new(
            2,
            vec![0, 1, 2],
            vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, -1.0]],
        )
        .unwrap();
        let s = similarity_scores(&[1.0, 0.0], &clf, 0).unwrap();
        assert_eq!(s.weights[0], 0.0);
        assert!((s.weights[1] - 0.5).abs() < 1e-12 && (s.weights[2] - 0.5).abs() < 1e-12);

        let two =
            PrototypeClassifier::new(2, vec![0, 1], vec![vec![1.0, 0.0], vec![0.3, 2.0]]).unwrap();
        assert_eq!(
            similarity_scores(&[0.2, 0.9], &two, 0).unwrap().weights,
            vec![0.0, 1.0]
        );

        let one = PrototypeClassifier::new(2, vec![0], vec![vec![1.0, 0.0]]).unwrap();
        assert!(similarity_scores(&[1.0, 0.0], &one, 0).is_err());
        assert!(similarity_scores(&[1.0, 0.0], &two, 2).is_err());
    }

    #[test]
    fn similarity_matches_hand_normalization() {
        let mut s = RandomStream::new(31, "sim");
        for _ in 0..20 {
            let clf = PrototypeClassifier::random(3, &[0, 1, 2, 3, 4], &mut s).unwrap();
            let f = s.draw_normal(3).unwrap();
            let own = s.below(5);
            let got = similarity_scores(&f, &clf, own).unwrap();
            let exps: Vec<f64> = clf
                .prototypes()
                .iter()
                .map(|w| cosine_similarity(w, &f).unwrap().exp())
                .collect();
            let denom: f64 = exps
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != own)
                .map(|(_, e)| e)
                .sum();
            for (c, (e, w)) in exps.iter().zip(&got.weights).enumerate() {
                let expected = if c == own { 0.0 } else { e / denom };
                assert!((w - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn prior_mean_examples() {
        let clf = PrototypeClassifier::new(
            2,
            vec![0, 1, 2],
            vec![vec![5.0, 5.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let onehot = SimilarityWeights {
            weights: vec![0.0, 0.0, 1.0],
            own_class: 0,
        };
        assert_eq!(prior_mean(&onehot, &clf).unwrap(), vec![0.0, 1.0]);
        let half = SimilarityWeights {
            weights: vec![0.0, 0.5, 0.5],
            own_class: 0,
        };
        assert_eq!(prior_mean(&half, &clf).unwrap(), vec![0.5, 0.5]);
        let uniform = SimilarityWeights {
            weights: vec![0.5, 0.0, 0.5],
            own_class: 1,
        };
        assert_eq!(prior_mean(&uniform, &clf).unwrap(), vec![2.5, 3.0]);
        let bad = SimilarityWeights {
            weights: vec![1.0],
            own_class: 0,
        };
        assert!(prior_mean(&bad, &clf).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(
            kl_to_prior(&stats(&[0.3, -1.0], &[0.0, 0.0]), &[0.3, -1.0]).unwrap(),
            0.0
        );
        assert!((kl_to_prior(&stats(&[1.0], &[0.0]), &[0.0]).unwrap() - 0.5).abs() < 1e-12);
        let lv = 4f64.ln();
        let got = kl_to_prior(&stats(&[0.2, 0.7], &[lv, lv]), &[0.2, 0.7]).unwrap();
        assert!((got - (4.0 - 1.0 - 4f64.ln())).abs() < 1e-12);
        assert!((got - 1.613_705_64).abs() < 1e-8);
        assert!(kl_to_prior(&stats(&[1.0], &[0.0]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn incremental_examples() {
        let mut s = RandomStream::new(12, "incr");
        let clf = PrototypeClassifier::random(3, &[0, 1, 2], &mut s).unwrap();
        let f = s.draw_normal(3).unwrap();
        let id = stats(&[0.0; 3], &[0.0; 3]);
        let pf = perturb(&f, &id).unwrap();
        let ce = ce_cosine_loss(&clf.classify(&f).unwrap(), 1).unwrap();
        let v = incremental_loss(
            &f,
            &pf,
            &clf,
            1,
            &id,
            &[0.4, 0.1, 0.0],
            Hyperparams {
                gamma: 0.0,
                alpha: 0.0,
            },
        )
        .unwrap();
        assert_eq!(v.value, 2.0 * ce);

        let st = stats(&s.draw_normal(3).unwrap(), &s.draw_normal(3).unwrap());
        let mu_t = s.draw_normal(3).unwrap();
        let pf = perturb(&f, &st).unwrap();
        let at = |alpha| {
            incremental_loss(
                &f,
                &pf,
                &clf,
                2,
                &st,
                &mu_t,
                Hyperparams { gamma: 0.0, alpha },
            )
            .unwrap()
        };
        let kl = kl_to_prior(&st, &mu_t).unwrap();
        let base = at(0.0).value;
        assert!((at(0.5).value - base - 0.5 * kl).abs() < 1e-12);
        assert!((at(2.0).value - base - 2.0 * kl).abs() < 1e-12);

        // component-sum oracle
        let ce1 = ce_cosine_loss(&clf.classify(&f).unwrap(), 2).unwrap();
        let ce2 = ce_cosine_loss(&clf.classify(&pf).unwrap(), 2).unwrap();
        assert!((at(0.3).value - (ce1 + ce2 + 0.3 * kl)).abs() < 1e-10);
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let params = vec![0.3, -1.2, 2.0, 0.05];
        let weights = [1.0, 2.0, 0.5, 3.0];
        let analytic: Vec<f64> = params.iter().zip(&weights).map(|(p, w)| w * p).collect();
        let r = check_gradient(&params, &analytic, FD_STEP, |p| {
            Ok(0.5 * p.iter().zip(&weights).map(|(x, w)| w * x * x).sum::<f64>())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn every_objective_passes_grad_check() {
        let mut s = RandomStream::new(99, "gradcheck-unit");
        for obj in [
            Objective::CrossEntropy,
            Objective::CovarianceConstraint,
            Objective::Base { gamma: 0.7 },
            Objective::Kl,
            Objective::Incremental { alpha: 0.3 },
        ] {
            for _ in 0..10 {
                let (net, batch) = random_grad_check_case(obj, &mut s).unwrap();
                let r = grad_check(&net, obj, &batch, GradCheckOptions::default()).unwrap();
                assert!(
                    r.passed(),
                    "{}: {r:?} at {:?}",
                    obj.name(),
                    net.parameter_name(r.worst_index)
                );
            }
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut s = RandomStream::new(5, "corrupt");
        let obj = Objective::Base { gamma: 0.5 };
        let (net, batch) = random_grad_check_case(obj, &mut s).unwrap();
        let (_, g) = objective_with_grad(&net, obj, &batch).unwrap();
        let flat = g.flatten(&net);
        let idx = flat
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        let opts = GradCheckOptions {
            corrupt_coordinate: Some(idx),
            ..GradCheckOptions::default()
        };
        let r = grad_check(&net, obj, &batch, opts).unwrap();
        assert!(r.max_rel_error > 0.1 && !r.passed());
        assert_eq!(r.worst_index, idx);
    }

    #[test]
    fn kl_objective_requires_priors() {
        let mut s = RandomStream::new(1, "prior");
        let (net, mut batch) = random_grad_check_case(Objective::Kl, &mut s).unwrap();
        batch[0].prior_mean = None;
        assert!(evaluate_objective(&net, Objective::Kl, &batch, None).is_err());
    }

    proptest! {
        #[test]
        fn ccl_nonnegative(lv in proptest::collection::vec(-10.0..10.0f64, 1..6)) {
            let v = ccl_loss(std::slice::from_ref(&lv)).unwrap();
            prop_assert!(v >= 0.0);
            if lv.iter().any(|&x| x != 0.0) {
                prop_assert!(v > 0.0);
            }
        }

        #[test]
        fn kl_nonnegative(
            mu in proptest::collection::vec(-5.0..5.0f64, 3),
            lv in proptest::collection::vec(-5.0..5.0f64, 3),
            t in proptest::collection::vec(-5.0..5.0f64, 3),
        ) {
            prop_assert!(kl_to_prior(&stats(&mu, &lv), &t).unwrap() >= 0.0);
        }

        #[test]
        fn ce_invariant_to_feature_scale(seed in 0u64..500, lambda in 0.01..100.0f64) {
            let mut s = RandomStream::new(seed, "ce-scale");
            let clf = PrototypeClassifier::random(4, &[0, 1, 2], &mut s).unwrap();
            let f = s.draw_normal(4).unwrap();
            let g: Vec<f64> = f.iter().map(|v| v * lambda).collect();
            let a = ce_cosine_loss(&clf.classify(&f).unwrap(), 1).unwrap();
            let b = ce_cosine_loss(&clf.classify(&g).unwrap(), 1).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
