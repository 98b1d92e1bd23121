//! Plain-text checkpoint format.
//!
//! One record per line, whitespace separated, keys unique:
//!
//! ```text
//! fscil-checkpoint 1
//! extractor.layers <L>
//! extractor.<i>.activation relu|identity
//! tensor extractor.<i>.weight <rows> <cols> <rows*cols values>
//! tensor extractor.<i>.bias <rows> 1 <rows values>
//! classifier.dim <d>
//! classifier.class_ids <id>...
//! tensor classifier.prototypes <n> <d> <n*d values>
//! head present|absent
//! tensor head.mu.weight <d> <d> ...      (when present; likewise head.mu.bias,
//!                                         head.logvar.weight, head.logvar.bias)
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Activation, Dense, MlpExtractor, Network, PrototypeClassifier, StatisticsHead};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::mathcore::Mat64;

const MAGIC: &str = "fscil-checkpoint 1";

pub fn write_checkpoint(net: &Network) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let layers = net.extractor.layers();
    let _ = writeln!(out, "extractor.layers {}", layers.len());
    for (i, l) in layers.iter().enumerate() {
        let _ = writeln!(out, "extractor.{i}.activation {}", l.activation.name());
        push_tensor(
            &mut out,
            &format!("extractor.{i}.weight"),
            l.weights.rows(),
            l.weights.cols(),
            l.weights.values(),
        );
        push_tensor(
            &mut out,
            &format!("extractor.{i}.bias"),
            l.bias.len(),
            1,
            &l.bias,
        );
    }
    let clf = &net.classifier;
    let _ = writeln!(out, "classifier.dim {}", clf.dim());
    out.push_str("classifier.class_ids");
    for id in clf.class_ids() {
        let _ = write!(out, " {id}");
    }
    out.push('\n');
    let flat: Vec<f64> = clf.prototypes().iter().flatten().copied().collect();
    push_tensor(
        &mut out,
        "classifier.prototypes",
        clf.len(),
        clf.dim(),
        &flat,
    );
    match &net.head {
        Some(h) => {
            out.push_str("head present\n");
            for (name, layer) in [("mu", &h.mu), ("logvar", &h.logvar)] {
                push_tensor(
                    &mut out,
                    &format!("head.{name}.weight"),
                    layer.weights.rows(),
                    layer.weights.cols(),
                    layer.weights.values(),
                );
                push_tensor(
                    &mut out,
                    &format!("head.{name}.bias"),
                    layer.bias.len(),
                    1,
                    &layer.bias,
                );
            }
        }
        None => out.push_str("head absent\n"),
    }
    out
}

fn push_tensor(out: &mut String, name: &str, rows: usize, cols: usize, values: &[f64]) {
    let _ = write!(out, "tensor {name} {rows} {cols}");
    for v in values {
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, write_checkpoint(net).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text, path)
}

struct Records<'a> {
    path: &'a Path,
    scalars: HashMap<String, (usize, Vec<&'a str>)>,
    tensors: HashMap<String, (usize, usize, usize, Vec<f64>)>,
}

impl<'a> Records<'a> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn scalar(&self, key: &str) -> Result<&[&'a str]> {
        self.scalars
            .get(key)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| self.err(0, format!("missing record `{key}`")))
    }

    fn count(&self, key: &str) -> Result<usize> {
        let (line, vals) = self
            .scalars
            .get(key)
            .ok_or_else(|| self.err(0, format!("missing record `{key}`")))?;
        match vals.as_slice() {
            [v] => v
                .parse()
                .map_err(|_| self.err(*line, format!("`{key}` expects a count"))),
            _ => Err(self.err(*line, format!("`{key}` expects one value"))),
        }
    }

    fn matrix(&self, key: &str) -> Result<Mat64> {
        let (line, rows, cols, values) = self
            .tensors
            .get(key)
            .ok_or_else(|| self.err(0, format!("missing tensor `{key}`")))?;
        Mat64::from_vec(*rows, *cols, values.clone()).map_err(|e| self.err(*line, e.to_string()))
    }

    fn vector(&self, key: &str) -> Result<Vec<f64>> {
        Ok(self.matrix(key)?.values().to_vec())
    }

    fn dense(&self, prefix: &str, activation: Activation) -> Result<Dense> {
        Dense::new(
            self.matrix(&format!("{prefix}.weight"))?,
            self.vector(&format!("{prefix}.bias"))?,
            activation,
        )
    }
}

pub fn read_checkpoint(text: &str, path: &Path) -> Result<Network> {
    let mut rec = Records {
        path,
        scalars: HashMap::new(),
        tensors: HashMap::new(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == MAGIC => {}
        _ => return Err(rec.err(1, format!("expected header `{MAGIC}`"))),
    }
    for (i, line) in lines {
        let lineno = i + 1;
        let mut tokens = line.split_whitespace();
        let Some(key) = tokens.next() else { continue };
        if key == "tensor" {
            let name = tokens
                .next()
                .ok_or_else(|| rec.err(lineno, "tensor without a name"))?;
            let mut dim = |what: &str| -> Result<usize> {
                tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| rec.err(lineno, format!("tensor `{name}` has a bad {what}")))
            };
            let rows = dim("row count")?;
            let cols = dim("column count")?;
            let values = tokens
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| rec.err(lineno, format!("tensor `{name}` has a non-numeric value")))?;
            if values.len() != rows * cols {
                return Err(rec.err(
                    lineno,
                    format!(
                        "tensor `{name}` declares {rows}x{cols} but has {} values",
                        values.len()
                    ),
                ));
            }
            if rec
                .tensors
                .insert(name.to_owned(), (lineno, rows, cols, values))
                .is_some()
            {
                return Err(rec.err(lineno, format!("duplicate tensor `{name}`")));
            }
        } else if rec
            .scalars
            .insert(key.to_owned(), (lineno, tokens.collect()))
            .is_some()
        {
            return Err(rec.err(lineno, format!("duplicate record `{key}`")));
        }
    }

    let n_layers = rec.count("extractor.layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let key = format!("extractor.{i}.activation");
        let act = match rec.scalar(&key)? {
            [name] => Activation::from_name(name),
            _ => None,
        }
        .ok_or_else(|| rec.err(0, format!("`{key}` must be relu or identity")))?;
        layers.push(rec.dense(&format!("extractor.{i}"), act)?);
    }
    let extractor = MlpExtractor::new(layers)?;

    let dim = rec.count("classifier.dim")?;
    let ids = rec
        .scalar("classifier.class_ids")?
        .iter()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| rec.err(0, "classifier.class_ids must be non-negative integers"))?;
    let protos = rec.matrix("classifier.prototypes")?;
    if protos.rows() != ids.len() || (protos.rows() > 0 && protos.cols() != dim) {
        return Err(rec.err(
            0,
            "classifier.prototypes shape disagrees with class ids / dim",
        ));
    }
    let rows = (0..protos.rows()).map(|r| protos.row(r).to_vec()).collect();
    let classifier = PrototypeClassifier::new(dim, ids, rows)?;

    let head = match rec.scalar("head")? {
        ["present"] => Some(StatisticsHead::new(
            rec.dense("head.mu", Activation::Identity)?,
            rec.dense("head.logvar", Activation::Identity)?,
        )?),
        ["absent"] => None,
        _ => return Err(rec.err(0, "`head` must be present or absent")),
    };

    Ok(Network {
        extractor,
        classifier,
        head,
    })
}
