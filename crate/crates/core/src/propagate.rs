//! Closed-form label propagation over a generated adjacency, the dual
//! seen/unseen propagation loss, and softmax prediction.

use crate::error::{Result, TggError};
use crate::relkernel::normalized_adjacency;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_MU: f64 = 0.5;

/// One-hot label rows with a labeled-row mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    y: Tensor,
    labeled: Vec<bool>,
}

impl LabelMatrix {
    /// `labels[i]` is the column of node `i`, or `None` for an unlabeled row.
    pub fn new(labels: &[Option<usize>], classes: usize) -> Result<Self> {
        let mut y = Tensor::zeros(labels.len(), classes);
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = *l {
                if c >= classes {
                    return Err(TggError::Dimension {
                        op: "label_matrix",
                        left: vec![labels.len(), classes],
                        right: vec![i, c],
                    });
                }
                y.set(i, c, 1.0);
            }
        }
        Ok(LabelMatrix {
            y,
            labeled: labels.iter().map(Option::is_some).collect(),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.y
    }

    pub fn labeled(&self) -> &[bool] {
        &self.labeled
    }

    /// Copy keeping only the rows where `keep` is true.
    pub fn masked(&self, keep: &[bool]) -> Tensor {
        let mut y = self.y.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                y.row_mut(i).fill(0.0);
            }
        }
        y
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu < 1.0 {
        Ok(())
    } else {
        Err(TggError::Config(format!("propagation mu must lie in (0, 1), got {mu}")))
    }
}

/// `I − μS` for the normalized adjacency `S`.
pub fn propagation_system<'t>(a: Var<'t>, mu: f64) -> Result<Var<'t>> {
    check_mu(mu)?;
    let n = a.shape()[0];
    let s = normalized_adjacency(a)?;
    a.tape().constant(Tensor::eye(n)).sub(&s.scale(mu))
}

/// `Y* = (I − μS)⁻¹ Y`.
pub fn propagate_closed_form<'t>(a: Var<'t>, y: &Tensor, mu: f64) -> Result<Var<'t>> {
    let m = propagation_system(a, mu)?;
    m.solve(&a.tape().constant(y.clone()))
}

/// Value-only [`propagate_closed_form`].
pub fn propagate_values(a: &Tensor, y: &Tensor, mu: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let out = propagate_closed_form(tape.constant(a.clone()), y, mu)?;
    let value = (*out.value()).clone();
    Ok(value)
}

/// `‖(I−μS)⁻¹ Y_S − (I−μS)⁻¹ Y_U‖²_F` with `Y_S`, `Y_U` the rows of `y`
/// selected by each mask.
pub fn dual_propagation_loss<'t>(
    a: Var<'t>,
    y: &LabelMatrix,
    seen: &[bool],
    unseen: &[bool],
    mu: f64,
) -> Result<Var<'t>> {
    if !seen.iter().any(|&s| s) || !unseen.iter().any(|&u| u) {
        return Err(TggError::Episode(
            "dual propagation needs labeled nodes in both domains".into(),
        ));
    }
    let m = propagation_system(a, mu)?;
    let tape = a.tape();
    let from_seen = m.solve(&tape.constant(y.masked(seen)))?;
    let from_unseen = m.solve(&tape.constant(y.masked(unseen)))?;
    Ok(from_seen.sub(&from_unseen)?.square().sum())
}

/// Row softmax of `scale · Y*` over the selected rows.
pub fn predict(y_star: &Tensor, rows: &[usize], scale: f64) -> Tensor {
    let mut p = y_star.select_rows(rows).map(|v| v * scale);
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    p
}

/// Index of the largest entry among `allowed` columns, first on ties.
pub fn argmax_among(row: &[f64], allowed: &[usize]) -> Option<usize> {
    allowed.iter().copied().fold(None, |best: Option<usize>, c| match best {
        Some(b) if row[b] >= row[c] => Some(b),
        _ => Some(c),
    })
}
