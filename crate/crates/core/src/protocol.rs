//! Base-session training, incremental class updates and full multi-session
//! runs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, SessionDataset};
use crate::error::{Error, Result};
use crate::losses::{
    evaluate_objective, prior_mean, similarity_scores, Hyperparams, Objective, TrainingItem,
};
use crate::mathcore::{axpy, RandomStream, Vec64};
use crate::metrics::{evaluate, SessionReport};
use crate::model::{
    compute_prototype, Dense, GradientBundle, MlpExtractor, Network, PrototypeClassifier,
    StatisticsHead,
};

/// How new classes enter the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Class-mean prototypes only.
    Prototype,
    /// Class-mean prototypes refined by cross-entropy.
    FinetuneCe,
    /// Class-mean prototypes refined with semantic perturbation.
    Spl,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Prototype, Strategy::FinetuneCe, Strategy::Spl];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Prototype => "prototype",
            Strategy::FinetuneCe => "finetune_ce",
            Strategy::Spl => "spl",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub incremental_learning_rate: f64,
    pub incremental_epochs: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub strategy: Strategy,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Multiplier on the He-normal init of the base head's log-variance layer.
    pub logvar_init_scale: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            incremental_learning_rate: 0.01,
            incremental_epochs: 100,
            gamma: 0.01,
            alpha: 0.01,
            strategy: Strategy::Spl,
            hidden: vec![32, 32],
            feature_dim: 8,
            logvar_init_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            gamma: self.gamma,
            alpha: self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("train layer widths must be >= 1".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("incremental_learning_rate", self.incremental_learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("train.{name} must be > 0")));
            }
        }
        if !(self.logvar_init_scale.is_finite() && self.logvar_init_scale >= 0.0) {
            return Err(Error::Config("train.logvar_init_scale must be >= 0".into()));
        }
        self.hyperparams()
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))
    }
}

/// Mean loss over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub session: usize,
    pub epoch: usize,
    pub loss: f64,
    pub components: Vec<(String, f64)>,
}

/// Model state carried between sessions. The extractor never changes after
/// session 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedState {
    pub extractor: MlpExtractor,
    pub classifier: PrototypeClassifier,
    pub head: Option<StatisticsHead>,
    pub base_classes: BTreeSet<usize>,
    pub session_log: Vec<EpochLog>,
}

impl TrainedState {
    pub fn features(&self, samples: &[LabeledSample]) -> Result<Vec<Vec64>> {
        samples
            .iter()
            .map(|s| self.extractor.extract_features(&s.input))
            .collect()
    }

    /// Mean absolute predicted log-variance over `samples`.
    pub fn mean_abs_logvar(&self, samples: &[LabeledSample]) -> Result<f64> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("state has no statistics head".into()))?;
        if samples.is_empty() {
            return Err(Error::Empty("samples"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for f in self.features(samples)? {
            let st = head.predict_statistics(&f)?;
            total += st.logvar_hat.iter().map(|v| v.abs()).sum::<f64>();
            count += st.logvar_hat.len();
        }
        Ok(total / count as f64)
    }

    pub fn network(&self) -> Network {
        Network {
            extractor: self.extractor.clone(),
            classifier: self.classifier.clone(),
            head: self.head.clone(),
        }
    }
}

fn step_dense(layer: &mut Dense, w: &[f64], b: &[f64], lr: f64) {
    axpy(layer.weights.values_mut(), w, -lr);
    axpy(&mut layer.bias, b, -lr);
}

/// Gradient step on the extractor, the prototypes listed in `rows`, and the
/// head.
fn apply_step(net: &mut Network, g: &GradientBundle, lr: f64, rows: impl Iterator<Item = usize>) {
    if let Some(layers) = &g.extractor {
        for (layer, lg) in net.extractor.layers_mut().iter_mut().zip(layers) {
            step_dense(layer, lg.weights.values(), &lg.bias, lr);
        }
    }
    let protos = net.classifier.prototypes_mut();
    for c in rows {
        axpy(&mut protos[c], &g.prototypes[c], -lr);
    }
    if let (Some(head), Some(hg)) = (net.head.as_mut(), g.head.as_ref()) {
        step_dense(&mut head.mu, hg.mu.weights.values(), &hg.mu.bias, lr);
        step_dense(
            &mut head.logvar,
            hg.logvar.weights.values(),
            &hg.logvar.bias,
            lr,
        );
    }
}

struct EpochAccumulator {
    total: f64,
    components: Vec<(String, f64)>,
    count: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            total: 0.0,
            components: Vec::new(),
            count: 0,
        }
    }

    fn add(&mut self, value: &crate::losses::LossValue, n: usize) {
        let w = n as f64;
        self.total += value.value * w;
        for (i, (name, v)) in value.components.iter().enumerate() {
            match self.components.get_mut(i) {
                Some(slot) => slot.1 += v * w,
                None => self.components.push((name.to_string(), v * w)),
            }
        }
        self.count += n;
    }

    fn finish(self, session: usize, epoch: usize) -> EpochLog {
        let n = self.count.max(1) as f64;
        EpochLog {
            session,
            epoch,
            loss: self.total / n,
            components: self
                .components
                .into_iter()
                .map(|(k, v)| (k, v / n))
                .collect(),
        }
    }
}

fn check_session(session: &SessionDataset, first: bool) -> Result<()> {
    if first != (session.session_index == 0) {
        return Err(Error::InvalidArgument(format!(
            "session {} passed to the {} stage",
            session.session_index,
            if first { "base" } else { "incremental" }
        )));
    }
    if session.train.is_empty() {
        return Err(Error::Empty("session training samples"));
    }
    for s in &session.train {
        if !session.label_set.contains(&s.label) {
            return Err(Error::InvalidArgument(format!(
                "training label {} outside the session label set",
                s.label
            )));
        }
    }
    Ok(())
}

fn train_base_inner(
    cfg: &TrainConfig,
    session: &SessionDataset,
    with_head: bool,
) -> Result<TrainedState> {
    cfg.validate()?;
    check_session(session, true)?;
    let input_dim = session.train[0].input.len();
    let class_ids: Vec<usize> = session.label_set.iter().copied().collect();

    let mut init_ext = RandomStream::new(cfg.seed, "init/extractor");
    let mut init_clf = RandomStream::new(cfg.seed, "init/classifier");
    let extractor = MlpExtractor::init(input_dim, &cfg.hidden, cfg.feature_dim, &mut init_ext);
    let classifier = PrototypeClassifier::random(cfg.feature_dim, &class_ids, &mut init_clf)?;
    let head = with_head.then(|| {
        let mut h = StatisticsHead::random(
            cfg.feature_dim,
            &mut RandomStream::new(cfg.seed, "init/head"),
        );
        h.logvar
            .weights
            .values_mut()
            .iter_mut()
            .for_each(|w| *w *= cfg.logvar_init_scale);
        h
    });
    let mut net = Network {
        extractor,
        classifier,
        head,
    };
    let objective = if with_head {
        Objective::Base { gamma: cfg.gamma }
    } else {
        Objective::CrossEntropy
    };

    let items: Vec<TrainingItem> = session
        .train
        .iter()
        .map(|s| TrainingItem {
            input: s.input.clone(),
            label_index: net.classifier.index_of(s.label).unwrap_or(usize::MAX),
            prior_mean: None,
        })
        .collect();
    let mut shuffler = RandomStream::new(cfg.seed, "shuffle/base");
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let all_rows = net.classifier.len();
    for epoch in 0..cfg.epochs {
        shuffler.shuffle(&mut order);
        let mut acc = EpochAccumulator::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let mut g = GradientBundle::zeros_like(&net, true);
            let value = evaluate_objective(&net, objective, &batch, Some(&mut g))?;
            acc.add(&value, batch.len());
            apply_step(&mut net, &g, cfg.learning_rate, 0..all_rows);
        }
        log.push(acc.finish(0, epoch));
    }

    // Base prototypes become class means, matching how new classes enter.
    let state = TrainedState {
        extractor: net.extractor,
        classifier: PrototypeClassifier::empty(cfg.feature_dim),
        head: net.head,
        base_classes: session.label_set.clone(),
        session_log: log,
    };
    let classifier = class_mean_classifier(&state, &session.train, state.classifier.clone())?;
    Ok(TrainedState {
        classifier,
        ..state
    })
}

fn class_mean_classifier(
    state: &TrainedState,
    train: &[LabeledSample],
    mut classifier: PrototypeClassifier,
) -> Result<PrototypeClassifier> {
    let labels: BTreeSet<usize> = train.iter().map(|s| s.label).collect();
    for c in labels {
        let feats: Vec<Vec64> = train
            .iter()
            .filter(|s| s.label == c)
            .map(|s| state.extractor.extract_features(&s.input))
            .collect::<Result<_>>()?;
        classifier.push(c, compute_prototype(&feats)?)?;
    }
    Ok(classifier)
}

/// Trains extractor, classifier and statistics head on session 0 with
/// `CE + γ·CCL`. The classifier of the returned state holds class-mean
/// prototypes; the trained head is kept for inspection.
pub fn train_base(cfg: &TrainConfig, session: &SessionDataset) -> Result<TrainedState> {
    train_base_inner(cfg, session, true)
}

/// Session-0 training with cross-entropy only and no statistics head. With
/// equal seeds it follows the same trajectory as [`train_base`] at `γ = 0`.
pub fn train_base_ce(cfg: &TrainConfig, session: &SessionDataset) -> Result<TrainedState> {
    train_base_inner(cfg, session, false)
}

/// Adds the session's classes to the classifier. Old prototypes and the
/// extractor are left untouched.
pub fn incremental_update(
    state: &TrainedState,
    session: &SessionDataset,
    cfg: &TrainConfig,
    strategy: Strategy,
) -> Result<TrainedState> {
    cfg.validate()?;
    check_session(session, false)?;
    if let Some(&c) = session
        .label_set
        .iter()
        .find(|c| state.classifier.index_of(**c).is_some())
    {
        return Err(Error::InvalidArgument(format!(
            "session {} reuses class {c}",
            session.session_index
        )));
    }
    let classifier = class_mean_classifier(state, &session.train, state.classifier.clone())?;
    let mut next = TrainedState {
        extractor: state.extractor.clone(),
        classifier,
        head: None,
        base_classes: state.base_classes.clone(),
        session_log: state.session_log.clone(),
    };
    if strategy == Strategy::Prototype || cfg.incremental_epochs == 0 {
        return Ok(next);
    }

    let d = next.classifier.dim();
    let head = (strategy == Strategy::Spl).then(|| StatisticsHead::zeros(d));
    // Features are fixed, so training runs on an identity extractor.
    let mut net = Network {
        extractor: MlpExtractor::identity(d),
        classifier: next.classifier.clone(),
        head,
    };
    let feats = next.features(&session.train)?;
    let mut items: Vec<TrainingItem> = feats
        .iter()
        .zip(&session.train)
        .map(|(f, s)| TrainingItem {
            input: f.clone(),
            label_index: net.classifier.index_of(s.label).unwrap_or(usize::MAX),
            prior_mean: None,
        })
        .collect();
    let new_rows: Vec<usize> = session
        .label_set
        .iter()
        .filter_map(|&c| net.classifier.index_of(c))
        .collect();
    let objective = match strategy {
        Strategy::Spl => Objective::Incremental { alpha: cfg.alpha },
        _ => Objective::CrossEntropy,
    };
    let t = session.session_index;
    for epoch in 0..cfg.incremental_epochs {
        if strategy == Strategy::Spl {
            for item in &mut items {
                let w = similarity_scores(&item.input, &net.classifier, item.label_index)?;
                item.prior_mean = Some(prior_mean(&w, &net.classifier)?);
            }
        }
        let mut acc = EpochAccumulator::new();
        let mut g = GradientBundle::zeros_like(&net, false);
        let value = evaluate_objective(&net, objective, &items, Some(&mut g))?;
        acc.add(&value, items.len());
        apply_step(
            &mut net,
            &g,
            cfg.incremental_learning_rate,
            new_rows.iter().copied(),
        );
        next.session_log.push(acc.finish(t, epoch));
    }
    next.classifier = net.classifier;
    next.head = net.head;
    Ok(next)
}

/// Union of test samples over sessions `0..=t`.
pub fn seen_test_samples(sessions: &[SessionDataset], t: usize) -> Vec<LabeledSample> {
    sessions[..=t]
        .iter()
        .flat_map(|s| s.test.iter().cloned())
        .collect()
}

fn check_schedule(sessions: &[SessionDataset]) -> Result<()> {
    if sessions.is_empty() {
        return Err(Error::Empty("sessions"));
    }
    for (i, s) in sessions.iter().enumerate() {
        if s.session_index != i {
            return Err(Error::InvalidArgument(format!(
                "session at position {i} has index {}",
                s.session_index
            )));
        }
    }
    Ok(())
}

/// Runs sessions `1..` from an already trained base state, evaluating after
/// every session (session 0 included). Returns the reports and the final
/// state.
pub fn run_from_base(
    base: &TrainedState,
    sessions: &[SessionDataset],
    cfg: &TrainConfig,
    strategy: Strategy,
) -> Result<(Vec<SessionReport>, TrainedState)> {
    check_schedule(sessions)?;
    let mut reports = Vec::with_capacity(sessions.len());
    reports.push(evaluate(base, 0, &seen_test_samples(sessions, 0))?);
    let mut state = base.clone();
    for t in 1..sessions.len() {
        state = incremental_update(&state, &sessions[t], cfg, strategy)?;
        reports.push(evaluate(&state, t, &seen_test_samples(sessions, t))?);
    }
    Ok((reports, state))
}

/// Base training with `CE + γ·CCL` followed by `cfg.strategy` updates.
pub fn run_experiment(
    cfg: &TrainConfig,
    sessions: &[SessionDataset],
) -> Result<Vec<SessionReport>> {
    check_schedule(sessions)?;
    let base = train_base(cfg, &sessions[0])?;
    Ok(run_from_base(&base, sessions, cfg, cfg.strategy)?.0)
}

/// Final-session accuracy for every `(γ, α)` pair; `final_acc[i][j]` belongs to
/// `gammas[i]` and `alphas[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub gammas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub final_acc: Vec<Vec<f64>>,
}

impl SweepGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,alpha,final_acc\n");
        for (g, row) in self.gammas.iter().zip(&self.final_acc) {
            for (a, v) in self.alphas.iter().zip(row) {
                out.push_str(&format!("{g:?},{a:?},{v:?}\n"));
            }
        }
        out
    }
}

/// Base training is shared across the α values of one γ.
pub fn sweep_hyperparams(
    cfg: &TrainConfig,
    sessions: &[SessionDataset],
    gammas: &[f64],
    alphas: &[f64],
) -> Result<SweepGrid> {
    check_schedule(sessions)?;
    if gammas.is_empty() || alphas.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let mut final_acc = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let base_cfg = TrainConfig {
            gamma,
            ..cfg.clone()
        };
        let base = train_base(&base_cfg, &sessions[0])?;
        let mut row = Vec::with_capacity(alphas.len());
        for &alpha in alphas {
            let run_cfg = TrainConfig {
                alpha,
                ..base_cfg.clone()
            };
            let (reports, _) = run_from_base(&base, sessions, &run_cfg, cfg.strategy)?;
            row.push(reports.last().map_or(0.0, |r| r.acc_overall));
        }
        final_acc.push(row);
    }
    Ok(SweepGrid {
        gammas: gammas.to_vec(),
        alphas: alphas.to_vec(),
        final_acc,
    })
}
