//! Class-level prototype graph: import, attribute similarity, cropping and
//! class-level attention weights.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, TggError};
use crate::tensor::Tensor;

/// Symmetric class graph with weights in `[0, 1]` and a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeGraph {
    classes: Vec<String>,
    weights: Tensor,
}

impl PrototypeGraph {
    pub fn new(classes: Vec<String>, weights: Tensor) -> Result<Self> {
        let c = classes.len();
        if weights.shape() != [c, c] {
            return Err(TggError::Dimension {
                op: "prototype_graph",
                left: vec![c, c],
                right: weights.shape().to_vec(),
            });
        }
        for i in 0..c {
            if weights.get(i, i) != 0.0 {
                return Err(TggError::Invariant(format!("class {} has a self-weight", classes[i])));
            }
            for j in 0..c {
                let w = weights.get(i, j);
                if !(0.0..=1.0).contains(&w) {
                    return Err(TggError::Value(format!("weight {w} outside [0, 1]")));
                }
                if w != weights.get(j, i) {
                    return Err(TggError::Invariant(format!(
                        "asymmetric weights between {} and {}",
                        classes[i], classes[j]
                    )));
                }
            }
        }
        Ok(PrototypeGraph { classes, weights })
    }

    /// Graph with no edges.
    pub fn empty(classes: Vec<String>) -> Self {
        let c = classes.len();
        PrototypeGraph {
            classes,
            weights: Tensor::zeros(c, c),
        }
    }

    /// Builds from `(class_a, class_b, weight)` triples.
    ///
    /// Directed duplicates are merged by taking the maximum. If the largest
    /// weight exceeds 1 every weight is divided by it; weights already in
    /// `[0, 1]` are kept, so an exported graph reloads unchanged. Self-loops
    /// are dropped.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S, f64)], classes: &[String]) -> Result<Self> {
        let c = classes.len();
        let index = |name: &str| {
            classes
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| TggError::Schema(format!("edge names unknown class {name}")))
        };
        let mut w = Tensor::zeros(c, c);
        for (a, b, weight) in edges {
            if !(*weight >= 0.0) || !weight.is_finite() {
                return Err(TggError::Value(format!(
                    "edge {}-{} has invalid weight {weight}",
                    a.as_ref(),
                    b.as_ref()
                )));
            }
            let (i, j) = (index(a.as_ref())?, index(b.as_ref())?);
            if i == j {
                continue;
            }
            let m = w.get(i, j).max(*weight);
            w.set(i, j, m);
            w.set(j, i, m);
        }
        let max = w.max_abs();
        if max == 0.0 {
            log::warn!("prototype graph has no edges");
        } else if max > 1.0 {
            w = w.map(|v| v / max);
        }
        PrototypeGraph::new(classes.to_vec(), w)
    }

    /// Reads a `class_a<TAB>class_b<TAB>weight` file. Blank lines and lines
    /// starting with `#` are skipped; a first line whose weight is not a
    /// number is taken as a header.
    pub fn from_edge_list(path: &Path, classes: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut edges = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            let err = |msg: String| TggError::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                msg,
            };
            if fields.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let weight = match fields[2].parse::<f64>() {
                Ok(w) => w,
                Err(_) if edges.is_empty() && k == 0 => continue,
                Err(e) => return Err(err(format!("bad weight {:?}: {e}", fields[2]))),
            };
            edges.push((fields[0].to_string(), fields[1].to_string(), weight));
        }
        Self::from_edges(&edges, classes)
    }

    /// Normalized inner product of attribute rows, clamped to `[0, 1]`.
    pub fn from_attributes(attributes: &Tensor, classes: &[String]) -> Result<Self> {
        let c = attributes.rows();
        if classes.len() != c {
            return Err(TggError::Dimension {
                op: "from_attributes",
                left: vec![classes.len()],
                right: attributes.shape().to_vec(),
            });
        }
        let norms: Vec<f64> = (0..c)
            .map(|i| attributes.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(TggError::DegenerateClass(i));
        }
        let mut w = Tensor::zeros(c, c);
        for i in 0..c {
            for j in i + 1..c {
                let dot: f64 = attributes
                    .row(i)
                    .iter()
                    .zip(attributes.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let s = (dot / (norms[i] * norms[j])).clamp(0.0, 1.0);
                w.set(i, j, s);
                w.set(j, i, s);
            }
        }
        PrototypeGraph::new(classes.to_vec(), w)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.weights.get(a, b)
    }

    /// Undirected edges `(i, j, w)` with `i < j` and `w > 0`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let c = self.classes.len();
        let mut out = Vec::new();
        for i in 0..c {
            for j in i + 1..c {
                let w = self.weights.get(i, j);
                if w > 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }

    /// Zeroes every weight strictly below `threshold`.
    pub fn crop(&self, threshold: f64) -> PrototypeGraph {
        PrototypeGraph {
            classes: self.classes.clone(),
            weights: self.weights.map(|w| if w < threshold { 0.0 } else { w }),
        }
    }

    /// Relation weight between two classes as used by aggregation and the
    /// kernel template: 1 within a class, the graph weight across classes,
    /// and 0 when either class is unknown.
    pub fn relation(&self, a: Option<usize>, b: Option<usize>) -> f64 {
        match (a, b) {
            (Some(a), Some(b)) if a == b => 1.0,
            (Some(a), Some(b)) => self.weights.get(a, b),
            _ => 0.0,
        }
    }

    /// Softmax over [`relation`](Self::relation) weights between `v_class`
    /// and each neighbor's class. A row of all-zero weights gives uniform
    /// attention.
    pub fn class_attention_row(&self, v_class: Option<usize>, neighbors: &[Option<usize>]) -> Vec<f64> {
        let raw: Vec<f64> = neighbors.iter().map(|&u| self.relation(v_class, u)).collect();
        if raw.iter().all(|&w| w == 0.0) {
            return vec![1.0 / neighbors.len() as f64; neighbors.len()];
        }
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = raw.iter().map(|w| (w - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (i, j, w) in self.edges() {
            let _ = writeln!(out, "{}\t{}\t{w:.17e}", self.classes[i], self.classes[j]);
        }
        out
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list())?;
        Ok(())
    }
}
