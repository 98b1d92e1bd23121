//! Synthetic Gaussian-blob datasets, N-way K-shot session splitting and
//! embedding CSV import/export.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::mathcore::{norm, RandomStream, Vec64};
use crate::model::MlpExtractor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub input: Vec64,
    pub label: usize,
}

/// Train and test samples over a common input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    /// Distinct labels across both splits, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .train
            .iter()
            .chain(&self.test)
            .map(|s| s.label)
            .collect();
        set.into_iter().collect()
    }
}

/// Seeds are not read from or written to config files; runners set them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub input_dim: usize,
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Minimum pairwise distance between class centers.
    pub separation: f64,
    /// Isotropic within-class standard deviation.
    pub within_std: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            n_classes: 24,
            train_per_class: 50,
            test_per_class: 20,
            separation: 4.0,
            within_std: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("n_classes", self.n_classes),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("data.{name} must be >= 1")));
            }
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::Config("data.separation must be > 0".into()));
        }
        if !(self.within_std.is_finite() && self.within_std > 0.0) {
            return Err(Error::Config("data.within_std must be > 0".into()));
        }
        Ok(())
    }
}

const CENTER_ATTEMPTS: usize = 10_000;

/// Class centers lie on the sphere of radius `separation` (uniform
/// directions), accepted only when every pairwise distance is at least
/// `separation`. Samples are `center + within_std · N(0, I)`; train samples of
/// all classes come first, then test samples, each ordered by class.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate().map_err(|e| match e {
        Error::Config(m) => Error::InvalidArgument(m),
        other => other,
    })?;
    let mut centers_rng = RandomStream::new(cfg.seed, "data/centers");
    let mut centers: Vec<Vec64> = Vec::with_capacity(cfg.n_classes);
    for c in 0..cfg.n_classes {
        let mut placed = false;
        for _ in 0..CENTER_ATTEMPTS {
            let dir = centers_rng.draw_normal(cfg.input_dim)?;
            let n = norm(&dir);
            if n == 0.0 {
                continue;
            }
            let cand: Vec64 = dir.iter().map(|v| v * cfg.separation / n).collect();
            let far_enough = centers.iter().all(|o| {
                let d2: f64 = o.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() >= cfg.separation
            });
            if far_enough {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place class {c} of {} at separation {} in {} dimensions",
                cfg.n_classes, cfg.separation, cfg.input_dim
            )));
        }
    }

    let mut noise = RandomStream::new(cfg.seed, "data/samples");
    let mut draw = |count: usize| -> Result<Vec<LabeledSample>> {
        let mut out = Vec::with_capacity(count * cfg.n_classes);
        for (label, center) in centers.iter().enumerate() {
            for _ in 0..count {
                let input = center
                    .iter()
                    .map(|&m| m + cfg.within_std * noise.normal())
                    .collect();
                out.push(LabeledSample { input, label });
            }
        }
        Ok(out)
    };
    let train = draw(cfg.train_per_class)?;
    let test = draw(cfg.test_per_class)?;
    Ok(Dataset {
        input_dim: cfg.input_dim,
        train,
        test,
    })
}

/// Session schedule: `base_classes` in session 0, then `n_sessions` episodes
/// of `n_way` classes with `k_shot` training samples each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub base_classes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_sessions: usize,
    /// Seeds the few-shot sample selection.
    #[serde(skip)]
    pub seed: u64,
    /// When set, class order is shuffled with this seed instead of ascending.
    pub shuffle_classes: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            base_classes: 12,
            n_way: 3,
            k_shot: 5,
            n_sessions: 4,
            seed: 0,
            shuffle_classes: None,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_classes == 0 {
            return Err(Error::Config("split.base_classes must be >= 1".into()));
        }
        if self.n_sessions > 0 && (self.n_way == 0 || self.k_shot == 0) {
            return Err(Error::Config(
                "split.n_way and split.k_shot must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.n_sessions * self.n_way
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionDataset {
    pub session_index: usize,
    pub label_set: BTreeSet<usize>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

pub fn split_sessions(dataset: &Dataset, split: &SplitConfig) -> Result<Vec<SessionDataset>> {
    let mut classes = dataset.classes();
    let needed = split.total_classes();
    if needed > classes.len() {
        return Err(Error::Infeasible(format!(
            "schedule needs {} + {}x{} = {needed} classes but the dataset has {} (short by {})",
            split.base_classes,
            split.n_sessions,
            split.n_way,
            classes.len(),
            needed - classes.len()
        )));
    }
    if split.n_sessions > 0 && (split.n_way == 0 || split.k_shot == 0) {
        return Err(Error::InvalidArgument(
            "n_way and k_shot must be >= 1".into(),
        ));
    }
    if let Some(seed) = split.shuffle_classes {
        RandomStream::new(seed, "split/classes").shuffle(&mut classes);
    }

    let mut train_by_class: BTreeMap<usize, Vec<&LabeledSample>> = BTreeMap::new();
    for s in &dataset.train {
        train_by_class.entry(s.label).or_default().push(s);
    }
    let mut test_by_class: BTreeMap<usize, Vec<&LabeledSample>> = BTreeMap::new();
    for s in &dataset.test {
        test_by_class.entry(s.label).or_default().push(s);
    }

    let mut picker = RandomStream::new(split.seed, "split/shots");
    let mut sessions = Vec::with_capacity(split.n_sessions + 1);
    for t in 0..=split.n_sessions {
        let session_classes = if t == 0 {
            &classes[..split.base_classes]
        } else {
            let start = split.base_classes + (t - 1) * split.n_way;
            &classes[start..start + split.n_way]
        };
        let label_set: BTreeSet<usize> = session_classes.iter().copied().collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &label_set {
            let pool = train_by_class.get(&c).map_or(&[][..], Vec::as_slice);
            if t == 0 {
                train.extend(pool.iter().map(|s| (*s).clone()));
            } else {
                if pool.len() < split.k_shot {
                    return Err(Error::Infeasible(format!(
                        "class {c} has {} training samples, session {t} needs {} (short by {})",
                        pool.len(),
                        split.k_shot,
                        split.k_shot - pool.len()
                    )));
                }
                let mut idx: Vec<usize> = (0..pool.len()).collect();
                picker.shuffle(&mut idx);
                let mut chosen = idx[..split.k_shot].to_vec();
                chosen.sort_unstable();
                train.extend(chosen.into_iter().map(|i| pool[i].clone()));
            }
            if let Some(ts) = test_by_class.get(&c) {
                test.extend(ts.iter().map(|s| (*s).clone()));
            }
        }
        sessions.push(SessionDataset {
            session_index: t,
            label_set,
            train,
            test,
        });
    }
    Ok(sessions)
}

/// Sidecar record of how a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub generator: String,
    pub data_seed: u64,
    pub split_seed: u64,
    pub synthetic: SyntheticConfig,
    pub split: SplitConfig,
}

/// Writes the provenance as TOML: top-level `generator`, `data_seed` and
/// `split_seed`, then `[synthetic]` and `[split]` tables.
pub fn write_provenance(prov: &DatasetProvenance, path: &Path) -> Result<()> {
    let text = toml::to_string(prov).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads `label,f0,…,f{D-1}` rows.
pub fn load_embeddings_csv(path: &Path) -> Result<Vec<LabeledSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(path, 1, e.to_string()))?,
        None => {
            return Err(parse_err(
                path,
                1,
                "empty file; expected header `label,f0,...`",
            ))
        }
    };
    let dim = header.len().saturating_sub(1);
    let header_ok =
        dim >= 1 && &header[0] == "label" && (0..dim).all(|i| header[i + 1] == *format!("f{i}"));
    if !header_ok {
        return Err(parse_err(
            path,
            1,
            "malformed header; expected `label,f0,f1,...`",
        ));
    }
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", dim + 1, rec.len()),
            ));
        }
        let label = rec[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err(path, line, format!("label `{}` is not a class id", &rec[0])))?;
        let input = (1..=dim)
            .map(|i| {
                let v: f64 = rec[i].trim().parse().map_err(|_| {
                    parse_err(
                        path,
                        line,
                        format!("field {} `{}` is not numeric", i + 1, &rec[i]),
                    )
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(
                        path,
                        line,
                        format!("field {} is not finite", i + 1),
                    ))
                }
            })
            .collect::<Result<Vec64>>()?;
        out.push(LabeledSample { input, label });
    }
    Ok(out)
}

/// One row per sample: the label then the extracted features, written with
/// round-trip float formatting.
pub fn export_embeddings_csv(
    extractor: &MlpExtractor,
    samples: &[LabeledSample],
    path: &Path,
) -> Result<()> {
    let d = extractor.feature_dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("label".to_owned())
        .chain((0..d).map(|i| format!("f{i}")))
        .collect();
    let csv_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for s in samples {
        let f = extractor.extract_features(&s.input)?;
        let row: Vec<String> = std::iter::once(s.label.to_string())
            .chain(f.iter().map(|v| format!("{v:?}")))
            .collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(path, &bytes)
}
