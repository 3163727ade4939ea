//! Differentiable sorting of candidate lists and the two losses built on it.

use crate::auction::AllocationSet;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{NmaError, Result};

/// Relaxed and hard descending sort of a score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPermutation {
    /// `L×L` row-stochastic relaxation; row `j` concentrates on the j-th largest score.
    pub soft: Tensor,
    /// `order[j]` is the index of the j-th largest score.
    pub order: Vec<usize>,
    pub tau: f64,
}

impl SoftPermutation {
    /// 0/1 permutation matrix of [`Self::order`].
    pub fn hard(&self) -> Tensor {
        permutation_matrix(&self.order)
    }
}

/// Descending argsort; equal scores keep ascending index order.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn permutation_matrix(order: &[usize]) -> Tensor {
    let n = order.len();
    let mut t = Tensor::zeros(n, n);
    for (j, &i) in order.iter().enumerate() {
        t.set(j, i, 1.0);
    }
    t
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(NmaError::InvalidConfig(format!("temperature must be positive, got {tau}")))
    }
}

/// Graph form of the relaxation for an `L×1` score column. Returns the full
/// `L×L` matrix, or only its first row (`1×L`) when `full` is false.
pub fn soft_sort_rows(g: &mut Graph, rs: Var, tau: f64, full: bool) -> Result<Var> {
    check_tau(tau)?;
    let [l, c] = g.shape(rs);
    if c != 1 || l == 0 {
        return Err(NmaError::ShapeMismatch {
            op: "soft_sort",
            left: [l, c],
            right: [l.max(1), 1],
        });
    }
    let a = g.pair_abs_diff(rs)?;
    let a1 = g.sum_cols(a)?;
    let a1_row = g.transpose(a1)?;
    let rs_row = g.transpose(rs)?;
    let rows = if full { l } else { 1 };
    // c_j = (L + 1 − 2j)·RS − A·1, j = 1..rows
    let coef = Tensor::column((1..=rows).map(|j| (l + 1) as f64 - 2.0 * j as f64).collect());
    let coef = g.input(coef)?;
    let scaled = g.matmul(coef, rs_row)?;
    let c = g.sub(scaled, a1_row)?;
    let c = g.scale(c, 1.0 / tau)?;
    g.softmax_rows(c)
}

/// Value-only relaxation and hard sort.
pub fn soft_sort(rs: &[f64], tau: f64) -> Result<SoftPermutation> {
    if rs.is_empty() {
        return Err(NmaError::InvalidConfig("cannot sort an empty score vector".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::column(rs.to_vec()))?;
    let m = soft_sort_rows(&mut g, x, tau, true)?;
    Ok(SoftPermutation {
        soft: g.value(m).clone(),
        order: descending_order(rs),
        tau,
    })
}

/// `L_tgt = −M̂[1,:]·R` for a `1×L` (or `L×L`) relaxation and `L×1` revenues.
pub fn revenue_loss(g: &mut Graph, m_hat: Var, revenue: Var) -> Result<Var> {
    let first = if g.shape(m_hat)[0] == 1 { m_hat } else { g.gather_rows(m_hat, &[0])? };
    let top = g.matmul(first, revenue)?;
    g.scale(top, -1.0)
}

/// `L_ce = −(1/L)·Σ_k log M̂[k, y_k]` with `y` the target descending order.
pub fn welfare_ce_loss(g: &mut Graph, m_hat: Var, target_order: &[usize]) -> Result<Var> {
    let [l, c] = g.shape(m_hat);
    if l != c || target_order.len() != l {
        return Err(NmaError::ShapeMismatch {
            op: "welfare_ce_loss",
            left: [l, c],
            right: [target_order.len(), target_order.len()],
        });
    }
    let at: Vec<(usize, usize)> = target_order.iter().enumerate().map(|(k, &y)| (k, y)).collect();
    let p = g.pick(m_hat, &at)?;
    let logp = g.log(p)?;
    let s = g.sum(logp)?;
    g.scale(s, -1.0 / l as f64)
}

/// Social welfare `Σ_s b·q̂` of every list in `set`.
pub fn list_welfare(set: &AllocationSet, bids: &[f64], q: &Tensor) -> Vec<f64> {
    (0..set.len())
        .map(|i| (0..set.k()).map(|s| bids[set.ad(i, s)] * q.at(i, s)).sum())
        .collect()
}

/// Target order for the welfare loss: lists by descending social welfare.
pub fn welfare_order(set: &AllocationSet, bids: &[f64], q: &Tensor) -> Vec<usize> {
    descending_order(&list_welfare(set, bids, q))
}
