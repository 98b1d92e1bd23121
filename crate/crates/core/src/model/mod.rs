//! Learnable components: the MLP feature extractor, the cosine prototype
//! classifier and the Gaussian statistics head, with explicit forward and
//! hand-derived backward passes.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::error::{ensure_same_len, Error, Result};
use crate::mathcore::{
    axpy, cosine_similarity, cosine_similarity_grad, linear_forward, stable_softmax, Mat64,
    RandomStream, Vec64,
};

/// Bounds applied to the predicted log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected layer `act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Mat64,
    pub bias: Vec64,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weights: Mat64, bias: Vec64, activation: Activation) -> Result<Self> {
        ensure_same_len("dense bias", bias.len(), weights.rows())?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// He-normal weights (std = sqrt(2 / fan_in)) and zero bias.
    pub fn he_normal(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        stream: &mut RandomStream,
    ) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        Self {
            weights: Mat64::random_normal(out_dim, in_dim, std, stream),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Mat64::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    fn pre_activation(&self, x: &[f64]) -> Result<Vec64> {
        linear_forward(&self.weights, &self.bias, x)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec64> {
        let mut z = self.pre_activation(x)?;
        for v in &mut z {
            *v = self.activation.apply(*v);
        }
        Ok(z)
    }
}

/// Gradient of a [`Dense`] layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Mat64,
    pub bias: Vec64,
}

impl DenseGrad {
    fn zeros_like(layer: &Dense) -> Self {
        Self {
            weights: Mat64::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }

    /// Accumulates `d_pre ⊗ input` and returns `Wᵀ d_pre`.
    fn accumulate(&mut self, layer: &Dense, input: &[f64], d_pre: &[f64]) -> Result<Vec64> {
        self.weights.add_outer(d_pre, input, 1.0);
        axpy(&mut self.bias, d_pre, 1.0);
        layer.weights.transpose_mul_vec(d_pre)
    }
}

/// Feature extractor `f_ψ: ℝ^D → ℝ^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpExtractor {
    layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
struct ExtractorCache {
    inputs: Vec<Vec64>,
    pre: Vec<Vec64>,
}

impl MlpExtractor {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("extractor layers"));
        }
        for pair in layers.windows(2) {
            ensure_same_len("extractor layer chain", pair[0].out_dim(), pair[1].in_dim())?;
        }
        Ok(Self { layers })
    }

    /// Relu hidden layers followed by a linear projection to `feature_dim`.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        stream: &mut RandomStream,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &width in hidden {
            layers.push(Dense::he_normal(prev, width, Activation::Relu, stream));
            prev = width;
        }
        layers.push(Dense::he_normal(
            prev,
            feature_dim,
            Activation::Identity,
            stream,
        ));
        Self { layers }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Dense {
                weights: Mat64::identity(dim),
                bias: vec![0.0; dim],
                activation: Activation::Identity,
            }],
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn extract_features(&self, x: &[f64]) -> Result<Vec64> {
        ensure_same_len("extractor input", x.len(), self.input_dim())?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("extracted features"));
        }
        Ok(h)
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(Vec64, ExtractorCache)> {
        ensure_same_len("extractor input", x.len(), self.input_dim())?;
        let mut cache = ExtractorCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_vec();
        for layer in &self.layers {
            let z = layer.pre_activation(&h)?;
            let out = z.iter().map(|&v| layer.activation.apply(v)).collect();
            cache.inputs.push(std::mem::replace(&mut h, out));
            cache.pre.push(z);
        }
        Ok((h, cache))
    }

    /// Smallest |pre-activation| over relu units for input `x`; `INFINITY`
    /// when the network has no relu layers.
    pub fn min_relu_margin(&self, x: &[f64]) -> Result<f64> {
        let (_, cache) = self.forward_cached(x)?;
        Ok(self
            .layers
            .iter()
            .zip(&cache.pre)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, z)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min))
    }

    fn backward(
        &self,
        cache: &ExtractorCache,
        d_out: Vec64,
        grads: &mut [DenseGrad],
    ) -> Result<Vec64> {
        let mut d = d_out;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (di, &z) in d.iter_mut().zip(&cache.pre[l]) {
                    if z <= 0.0 {
                        *di = 0.0;
                    }
                }
            }
            d = grads[l].accumulate(layer, &cache.inputs[l], &d)?;
        }
        Ok(d)
    }
}

/// Ordered per-class prototypes. Prototypes are stored unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeClassifier {
    dim: usize,
    class_ids: Vec<usize>,
    prototypes: Vec<Vec64>,
}

impl PrototypeClassifier {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            class_ids: Vec::new(),
            prototypes: Vec::new(),
        }
    }

    pub fn new(dim: usize, class_ids: Vec<usize>, prototypes: Vec<Vec64>) -> Result<Self> {
        ensure_same_len("classifier rows", class_ids.len(), prototypes.len())?;
        let mut out = Self::empty(dim);
        for (id, w) in class_ids.into_iter().zip(prototypes) {
            out.push(id, w)?;
        }
        Ok(out)
    }

    /// One N(0, 1) prototype per class id.
    pub fn random(dim: usize, class_ids: &[usize], stream: &mut RandomStream) -> Result<Self> {
        let mut out = Self::empty(dim);
        for &id in class_ids {
            out.push(id, (0..dim).map(|_| stream.normal()).collect())?;
        }
        Ok(out)
    }

    /// Adds a class at its sorted position; existing rows keep their
    /// relative order and values.
    pub fn push(&mut self, class_id: usize, prototype: Vec64) -> Result<()> {
        ensure_same_len("prototype", prototype.len(), self.dim)?;
        if prototype.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype"));
        }
        match self.class_ids.binary_search(&class_id) {
            Ok(_) => Err(Error::InvalidArgument(format!(
                "class id {class_id} already has a prototype"
            ))),
            Err(pos) => {
                self.class_ids.insert(pos, class_id);
                self.prototypes.insert(pos, prototype);
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn prototypes(&self) -> &[Vec64] {
        &self.prototypes
    }

    pub fn prototypes_mut(&mut self) -> &mut [Vec64] {
        &mut self.prototypes
    }

    pub fn index_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.binary_search(&class_id).ok()
    }

    /// Cosine similarity of `f` to every prototype.
    pub fn cosine_logits(&self, f: &[f64]) -> Result<Vec64> {
        if self.is_empty() {
            return Err(Error::Empty("classifier"));
        }
        ensure_same_len("classifier input", f.len(), self.dim)?;
        self.prototypes
            .iter()
            .map(|w| cosine_similarity(w, f))
            .collect()
    }

    /// Softmax over cosine similarities.
    pub fn classify(&self, f: &[f64]) -> Result<Vec64> {
        stable_softmax(&self.cosine_logits(f)?)
    }

    /// Class id with the highest score; ties go to the lowest id.
    pub fn predict_label(&self, f: &[f64]) -> Result<usize> {
        let probs = self.classify(f)?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate().skip(1) {
            if p > probs[best] {
                best = i;
            }
        }
        Ok(self.class_ids[best])
    }
}

/// Coordinate-wise mean of a non-empty feature list.
pub fn compute_prototype(features: &[Vec64]) -> Result<Vec64> {
    let first = features
        .first()
        .ok_or(Error::Empty("prototype feature list"))?;
    let mut sum = vec![0.0; first.len()];
    for f in features {
        ensure_same_len("prototype feature", f.len(), sum.len())?;
        axpy(&mut sum, f, 1.0);
    }
    let n = features.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Per-sample Gaussian `N(mu_hat, exp(logvar_hat))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu_hat: Vec64,
    pub logvar_hat: Vec64,
}

impl GaussianStats {
    pub fn variance(&self) -> Vec64 {
        self.logvar_hat.iter().map(|lv| lv.exp()).collect()
    }

    pub fn std_dev(&self) -> Vec64 {
        self.logvar_hat.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Two linear maps predicting mean and log-variance from a feature.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticsHead {
    pub mu: Dense,
    pub logvar: Dense,
}

impl StatisticsHead {
    pub fn new(mu: Dense, logvar: Dense) -> Result<Self> {
        for layer in [&mu, &logvar] {
            ensure_same_len("statistics head", layer.in_dim(), layer.out_dim())?;
        }
        ensure_same_len("statistics head", mu.in_dim(), logvar.in_dim())?;
        Ok(Self { mu, logvar })
    }

    pub fn random(dim: usize, stream: &mut RandomStream) -> Self {
        Self {
            mu: Dense::he_normal(dim, dim, Activation::Identity, stream),
            logvar: Dense::he_normal(dim, dim, Activation::Identity, stream),
        }
    }

    /// All-zero head: predicts `mu_hat = 0` and `sigma = 1` for every input.
    pub fn zeros(dim: usize) -> Self {
        Self {
            mu: Dense::zeros(dim, dim, Activation::Identity),
            logvar: Dense::zeros(dim, dim, Activation::Identity),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.in_dim()
    }

    pub fn predict_statistics(&self, f: &[f64]) -> Result<GaussianStats> {
        Ok(self.forward_raw(f)?.0)
    }

    /// Statistics plus the unclamped log-variance.
    fn forward_raw(&self, f: &[f64]) -> Result<(GaussianStats, Vec64)> {
        let mu_hat = self.mu.forward(f)?;
        let raw = self.logvar.forward(f)?;
        let logvar_hat = raw
            .iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok((GaussianStats { mu_hat, logvar_hat }, raw))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub mu: DenseGrad,
    pub logvar: DenseGrad,
}

/// `mu_hat + exp(logvar_hat / 2) ⊙ f`.
pub fn perturb(f: &[f64], stats: &GaussianStats) -> Result<Vec64> {
    ensure_same_len("perturbation mean", f.len(), stats.mu_hat.len())?;
    ensure_same_len("perturbation log-variance", f.len(), stats.logvar_hat.len())?;
    Ok(f.iter()
        .zip(&stats.mu_hat)
        .zip(&stats.logvar_hat)
        .map(|((&x, &m), &lv)| m + (0.5 * lv).exp() * x)
        .collect())
}

/// Extractor, classifier and optional statistics head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub extractor: MlpExtractor,
    pub classifier: PrototypeClassifier,
    pub head: Option<StatisticsHead>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    extractor: ExtractorCache,
    raw_logvar: Option<Vec64>,
}

/// Output of [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: Vec64,
    pub stats: Option<GaussianStats>,
    cache: Option<ForwardCache>,
}

impl ForwardPass {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// Gradient of a scalar loss with respect to the network outputs of one
/// forward pass: the feature vector, the head statistics (post-clamp) and any
/// prototypes the loss reads directly.
#[derive(Debug, Clone, Default)]
pub struct OutputGrad {
    pub features: Vec64,
    pub mu_hat: Option<Vec64>,
    pub logvar_hat: Option<Vec64>,
    pub prototypes: Vec<(usize, Vec64)>,
}

impl OutputGrad {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            features: vec![0.0; feature_dim],
            ..Self::default()
        }
    }
}

/// Parameter gradients mirroring a [`Network`]. `extractor` is `None` when the
/// extractor is frozen and excluded from backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub extractor: Option<Vec<DenseGrad>>,
    pub prototypes: Vec<Vec64>,
    pub head: Option<HeadGrad>,
    /// Accumulated gradient with respect to the network input.
    pub input: Vec64,
}

impl GradientBundle {
    pub fn zeros_like(net: &Network, include_extractor: bool) -> Self {
        Self {
            extractor: include_extractor.then(|| {
                net.extractor
                    .layers
                    .iter()
                    .map(DenseGrad::zeros_like)
                    .collect()
            }),
            prototypes: vec![vec![0.0; net.classifier.dim()]; net.classifier.len()],
            head: net.head.as_ref().map(|h| HeadGrad {
                mu: DenseGrad::zeros_like(&h.mu),
                logvar: DenseGrad::zeros_like(&h.logvar),
            }),
            input: vec![0.0; net.extractor.input_dim()],
        }
    }

    /// Flattened gradient in [`Network::parameters`] order. A skipped
    /// extractor contributes zeros.
    pub fn flatten(&self, net: &Network) -> Vec<f64> {
        let mut out = Vec::with_capacity(net.parameter_count());
        match &self.extractor {
            Some(layers) => {
                for g in layers {
                    out.extend_from_slice(g.weights.values());
                    out.extend_from_slice(&g.bias);
                }
            }
            None => {
                let n: usize = net
                    .extractor
                    .layers
                    .iter()
                    .map(|l| l.weights.values().len() + l.bias.len())
                    .sum();
                out.extend(std::iter::repeat_n(0.0, n));
            }
        }
        for p in &self.prototypes {
            out.extend_from_slice(p);
        }
        if let Some(h) = &self.head {
            for g in [&h.mu, &h.logvar] {
                out.extend_from_slice(g.weights.values());
                out.extend_from_slice(&g.bias);
            }
        }
        out
    }

    pub fn is_finite(&self, net: &Network) -> bool {
        self.flatten(net).iter().all(|v| v.is_finite())
    }
}

impl Network {
    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn forward(&self, x: &[f64], with_cache: bool) -> Result<ForwardPass> {
        let (features, ext_cache) = self.extractor.forward_cached(x)?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("extracted features"));
        }
        let (stats, raw) = match &self.head {
            Some(head) => {
                let (s, raw) = head.forward_raw(&features)?;
                (Some(s), Some(raw))
            }
            None => (None, None),
        };
        let cache = with_cache.then_some(ForwardCache {
            extractor: ext_cache,
            raw_logvar: raw,
        });
        Ok(ForwardPass {
            features,
            stats,
            cache,
        })
    }

    /// Propagates `upstream` through the head and extractor, accumulating
    /// parameter gradients into `grads`.
    pub fn backward_into(
        &self,
        pass: &ForwardPass,
        upstream: &OutputGrad,
        grads: &mut GradientBundle,
    ) -> Result<()> {
        let cache = pass.cache.as_ref().ok_or(Error::MissingCache)?;
        ensure_same_len(
            "feature gradient",
            upstream.features.len(),
            pass.features.len(),
        )?;

        for (idx, g) in &upstream.prototypes {
            let slot = grads.prototypes.get_mut(*idx).ok_or(Error::OutOfRange {
                context: "prototype gradient",
                index: *idx,
                len: self.classifier.len(),
            })?;
            axpy(slot, g, 1.0);
        }

        let mut d_features = upstream.features.clone();
        if upstream.mu_hat.is_some() || upstream.logvar_hat.is_some() {
            let head = self.head.as_ref().ok_or_else(|| {
                Error::InvalidArgument("statistics gradient without a head".into())
            })?;
            let head_grads = grads
                .head
                .as_mut()
                .ok_or_else(|| Error::InvalidArgument("gradient bundle lacks a head".into()))?;
            if let Some(d_mu) = &upstream.mu_hat {
                let back = head_grads.mu.accumulate(&head.mu, &pass.features, d_mu)?;
                axpy(&mut d_features, &back, 1.0);
            }
            if let Some(d_lv) = &upstream.logvar_hat {
                let raw = cache.raw_logvar.as_ref().ok_or(Error::MissingCache)?;
                let d_raw: Vec64 = d_lv
                    .iter()
                    .zip(raw)
                    .map(|(&g, &r)| {
                        if (LOGVAR_MIN..=LOGVAR_MAX).contains(&r) {
                            g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let back = head_grads
                    .logvar
                    .accumulate(&head.logvar, &pass.features, &d_raw)?;
                axpy(&mut d_features, &back, 1.0);
            }
        }

        if let Some(layers) = grads.extractor.as_mut() {
            let d_input = self
                .extractor
                .backward(&cache.extractor, d_features, layers)?;
            axpy(&mut grads.input, &d_input, 1.0);
        }
        Ok(())
    }

    pub fn backward(&self, pass: &ForwardPass, upstream: &OutputGrad) -> Result<GradientBundle> {
        let mut grads = GradientBundle::zeros_like(self, true);
        self.backward_into(pass, upstream, &mut grads)?;
        Ok(grads)
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_parameters(|_, v| n += v.len());
        n
    }

    /// Visits every trainable tensor in a fixed order: extractor layers
    /// (weights then bias), prototypes in class order, then head (mu, logvar).
    pub fn visit_parameters(&self, mut f: impl FnMut(String, &[f64])) {
        for (i, l) in self.extractor.layers.iter().enumerate() {
            f(format!("extractor.{i}.weight"), l.weights.values());
            f(format!("extractor.{i}.bias"), &l.bias);
        }
        for (id, p) in self
            .classifier
            .class_ids
            .iter()
            .zip(&self.classifier.prototypes)
        {
            f(format!("classifier.prototype.{id}"), p);
        }
        if let Some(h) = &self.head {
            f("head.mu.weight".into(), h.mu.weights.values());
            f("head.mu.bias".into(), &h.mu.bias);
            f("head.logvar.weight".into(), h.logvar.weights.values());
            f("head.logvar.bias".into(), &h.logvar.bias);
        }
    }

    fn visit_parameters_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for l in &mut self.extractor.layers {
            f(l.weights.values_mut());
            f(&mut l.bias);
        }
        for p in &mut self.classifier.prototypes {
            f(p);
        }
        if let Some(h) = &mut self.head {
            f(h.mu.weights.values_mut());
            f(&mut h.mu.bias);
            f(h.logvar.weights.values_mut());
            f(&mut h.logvar.bias);
        }
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit_parameters(|_, v| out.extend_from_slice(v));
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        ensure_same_len("parameter vector", values.len(), self.parameter_count())?;
        let mut offset = 0;
        self.visit_parameters_mut(|slot| {
            slot.copy_from_slice(&values[offset..offset + slot.len()]);
            offset += slot.len();
        });
        Ok(())
    }

    /// Name and in-tensor offset of flattened coordinate `index`.
    pub fn parameter_name(&self, index: usize) -> Option<(String, usize)> {
        let mut offset = 0;
        let mut found = None;
        self.visit_parameters(|name, v| {
            if found.is_none() && index < offset + v.len() {
                found = Some((name, index - offset));
            }
            offset += v.len();
        });
        found
    }
}

/// Gradient contribution of `−log p[label]`-style losses on cosine logits:
/// given `d_logits`, returns `(d_feature, per-prototype d_w)`.
pub(crate) fn cosine_logits_backward(
    classifier: &PrototypeClassifier,
    f: &[f64],
    d_logits: &[f64],
) -> (Vec64, Vec<(usize, Vec64)>) {
    let mut d_f = vec![0.0; f.len()];
    let mut d_w = Vec::with_capacity(classifier.len());
    for (c, (w, &g)) in classifier.prototypes.iter().zip(d_logits).enumerate() {
        if g == 0.0 {
            continue;
        }
        let (dw, df) = cosine_similarity_grad(w, f);
        axpy(&mut d_f, &df, g);
        d_w.push((c, dw.into_iter().map(|v| v * g).collect()));
    }
    (d_f, d_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(s: &mut RandomStream, n: usize) -> Vec64 {
        s.draw_normal(n).unwrap()
    }

    #[test]
    fn identity_extractor_passes_through() {
        let ext = MlpExtractor::identity(2);
        assert_eq!(ext.extract_features(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert!(ext.extract_features(&[1.0]).is_err());
    }

    #[test]
    fn relu_zeroes_negative_preactivation() {
        let w = Mat64::from_rows(&[vec![-1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let ext = MlpExtractor::new(vec![
            Dense::new(w, vec![0.0, 0.0], Activation::Relu).unwrap()
        ])
        .unwrap();
        assert_eq!(ext.extract_features(&[2.0, 3.0]).unwrap(), vec![0.0, 3.0]);
    }

    #[test]
    fn two_layer_matches_hand_composition() {
        let mut s = RandomStream::new(11, "compose");
        let ext = MlpExtractor::init(5, &[4], 3, &mut s);
        let x = rand_vec(&mut s, 5);
        let l = ext.layers();
        let h: Vec64 = linear_forward(&l[0].weights, &l[0].bias, &x)
            .unwrap()
            .into_iter()
            .map(|v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let expected = linear_forward(&l[1].weights, &l[1].bias, &h).unwrap();
        assert_eq!(ext.extract_features(&x).unwrap(), expected);
    }

    #[test]
    fn extractor_rejects_broken_chain() {
        let a = Dense::zeros(3, 4, Activation::Relu);
        let b = Dense::zeros(5, 2, Activation::Identity);
        assert!(MlpExtractor::new(vec![a, b]).is_err());
    }

    #[test]
    fn classify_examples() {
        let clf =
            PrototypeClassifier::new(2, vec![0, 1], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = clf.classify(&[1.0, 0.0]).unwrap();
        assert!((p[0] - 0.731_058_58).abs() < 1e-8);
        assert!((p[1] - 0.268_941_42).abs() < 1e-8);
        let e = 1f64.exp();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-9);

        let uniform = clf.classify(&[1.0, 1.0]).unwrap();
        assert!((uniform[0] - 0.5).abs() < 1e-12);

        let single = PrototypeClassifier::new(2, vec![3], vec![vec![1.0, 2.0]]).unwrap();
        assert_eq!(single.classify(&[0.3, -1.0]).unwrap(), vec![1.0]);

        assert!(PrototypeClassifier::empty(2).classify(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn predict_label_rules() {
        let clf =
            PrototypeClassifier::new(2, vec![4, 9], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(clf.predict_label(&[1.0, 0.0]).unwrap(), 4);
        assert_eq!(clf.predict_label(&[0.0, 1.0]).unwrap(), 9);
        assert_eq!(clf.predict_label(&[1.0, 1.0]).unwrap(), 4);
    }

    #[test]
    fn predict_label_matches_independent_scan() {
        let mut s = RandomStream::new(5, "scan");
        for _ in 0..50 {
            let ids: Vec<usize> = (0..6).map(|i| i * 3 + 1).collect();
            let clf = PrototypeClassifier::random(4, &ids, &mut s).unwrap();
            let f = rand_vec(&mut s, 4);
            let probs = clf.classify(&f).unwrap();
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (i, &p) in probs.iter().enumerate() {
                if p > best.0 {
                    best = (p, ids[i]);
                }
            }
            assert_eq!(clf.predict_label(&f).unwrap(), best.1);
        }
    }

    #[test]
    fn push_keeps_ids_sorted_and_unique() {
        let mut clf = PrototypeClassifier::empty(2);
        clf.push(3, vec![1.0, 0.0]).unwrap();
        assert!(clf.push(3, vec![0.0, 1.0]).is_err());
        assert!(clf.push(4, vec![0.0]).is_err());
        clf.push(1, vec![0.0, 1.0]).unwrap();
        assert_eq!(clf.class_ids(), &[1, 3]);
        assert_eq!(clf.prototypes()[1], vec![1.0, 0.0]);
    }

    #[test]
    fn prototype_examples() {
        assert_eq!(
            compute_prototype(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            compute_prototype(&[vec![0.3, -2.0]]).unwrap(),
            vec![0.3, -2.0]
        );
        assert!(compute_prototype(&[]).is_err());

        let mut s = RandomStream::new(3, "proto");
        let feats: Vec<Vec64> = (0..5).map(|_| rand_vec(&mut s, 4)).collect();
        let mean = compute_prototype(&feats).unwrap();
        for j in 0..4 {
            let mut acc = 0.0;
            for f in &feats {
                acc += f[j];
            }
            assert!((mean[j] - acc / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn statistics_head_examples() {
        let mut head = StatisticsHead::zeros(3);
        head.mu.bias = vec![1.0, -2.0, 0.5];
        head.logvar.bias = vec![0.3, 25.0, -40.0];
        let st = head.predict_statistics(&[9.0, 9.0, 9.0]).unwrap();
        assert_eq!(st.mu_hat, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.logvar_hat, vec![0.3, 10.0, -10.0]);

        let mut s = RandomStream::new(8, "head");
        let head = StatisticsHead::random(4, &mut s);
        let f = rand_vec(&mut s, 4);
        let st = head.predict_statistics(&f).unwrap();
        assert_eq!(st.mu_hat.len(), 4);
        assert_eq!(st.logvar_hat.len(), 4);
        let mu = linear_forward(&head.mu.weights, &head.mu.bias, &f).unwrap();
        let lv: Vec64 = linear_forward(&head.logvar.weights, &head.logvar.bias, &f)
            .unwrap()
            .into_iter()
            .map(|v| v.clamp(-10.0, 10.0))
            .collect();
        assert_eq!(st.mu_hat, mu);
        assert_eq!(st.logvar_hat, lv);
        assert!(head.predict_statistics(&[1.0]).is_err());
    }

    #[test]
    fn perturb_examples() {
        let f = vec![1.5, -2.0, 0.25];
        let id = GaussianStats {
            mu_hat: vec![0.0; 3],
            logvar_hat: vec![0.0; 3],
        };
        assert_eq!(perturb(&f, &id).unwrap(), f);

        let collapsed = GaussianStats {
            mu_hat: vec![0.1, 0.2, 0.3],
            logvar_hat: vec![-10.0; 3],
        };
        let p = perturb(&f, &collapsed).unwrap();
        let bound = (-5f64).exp() * 2.0;
        for (pi, mi) in p.iter().zip(&collapsed.mu_hat) {
            assert!((pi - mi).abs() <= bound);
        }

        let mut s = RandomStream::new(21, "perturb");
        let f = rand_vec(&mut s, 5);
        let st = GaussianStats {
            mu_hat: rand_vec(&mut s, 5),
            logvar_hat: rand_vec(&mut s, 5),
        };
        let p = perturb(&f, &st).unwrap();
        for i in 0..5 {
            let sigma = st.logvar_hat[i].exp().sqrt();
            assert!((p[i] - (st.mu_hat[i] + sigma * f[i])).abs() < 1e-12);
        }
        assert!(perturb(&f[..2], &st).is_err());
    }

    #[test]
    fn backward_of_half_squared_norm_through_identity() {
        let net = Network {
            extractor: MlpExtractor::identity(3),
            classifier: PrototypeClassifier::empty(3),
            head: None,
        };
        let x = vec![0.5, -1.0, 2.0];
        let pass = net.forward(&x, true).unwrap();
        // d(½‖f‖²)/df = f
        let up = OutputGrad {
            features: pass.features.clone(),
            ..OutputGrad::default()
        };
        let g = net.backward(&pass, &up).unwrap();
        assert_eq!(g.input, x);
        let layer = &g.extractor.as_ref().unwrap()[0];
        assert_eq!(layer.bias, x);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(layer.weights.get(r, c), x[r] * x[c]);
            }
        }
    }

    #[test]
    fn backward_requires_cache() {
        let net = Network {
            extractor: MlpExtractor::identity(2),
            classifier: PrototypeClassifier::empty(2),
            head: None,
        };
        let pass = net.forward(&[1.0, 2.0], false).unwrap();
        let up = OutputGrad::new(2);
        assert!(matches!(net.backward(&pass, &up), Err(Error::MissingCache)));
    }

    #[test]
    fn untouched_parameters_get_zero_gradient() {
        let mut s = RandomStream::new(4, "untouched");
        let net = Network {
            extractor: MlpExtractor::init(3, &[4], 2, &mut s),
            classifier: PrototypeClassifier::random(2, &[0, 1], &mut s).unwrap(),
            head: Some(StatisticsHead::random(2, &mut s)),
        };
        let pass = net.forward(&[0.2, -0.4, 1.0], true).unwrap();
        let up = OutputGrad {
            features: vec![1.0, -1.0],
            ..OutputGrad::default()
        };
        let g = net.backward(&pass, &up).unwrap();
        assert!(g.prototypes.iter().flatten().all(|&v| v == 0.0));
        let h = g.head.unwrap();
        assert!(h.mu.weights.values().iter().all(|&v| v == 0.0));
        assert!(h.logvar.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_round_trip_and_names() {
        let mut s = RandomStream::new(9, "params");
        let mut net = Network {
            extractor: MlpExtractor::init(3, &[4], 2, &mut s),
            classifier: PrototypeClassifier::random(2, &[5, 7], &mut s).unwrap(),
            head: Some(StatisticsHead::random(2, &mut s)),
        };
        let p = net.parameters();
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 2 + 2 + 2 * 2 + 2 * (4 + 2));
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        net.set_parameters(&shifted).unwrap();
        assert_eq!(net.parameters(), shifted);
        assert_eq!(
            net.parameter_name(0),
            Some(("extractor.0.weight".into(), 0))
        );
        assert_eq!(net.parameter_name(12), Some(("extractor.0.bias".into(), 0)));
        assert_eq!(
            net.parameter_name(26),
            Some(("classifier.prototype.5".into(), 0))
        );
        assert_eq!(net.parameter_name(p.len()), None);
    }
}
