//! Learned ranking rule: per-ad multipliers, list ranking scores, affine
//! maximizer selection and the matching payments, plus the differentiable
//! revenue of every candidate list used during training.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{AllocationSet, Allocation, AuctionInstance};
use crate::autodiff::{Graph, Mlp, ParamStore, Tensor, Var};
use crate::clpm::ctr_logit;
use crate::error::{NmaError, Result};

/// Divisors below this make a payment degenerate; it is then set to 0.
pub const MIN_DIVISOR: f64 = 1e-9;

/// Features the multiplier network may consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuInput {
    /// Shared ad embedding (id, category, brand).
    AdEmbedding,
    /// Logit of the ad's point-wise pCTR.
    PointwiseCtr,
    /// The ad's own bid. Always rejected: it would break incentive compatibility.
    Bid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuConfig {
    pub inputs: Vec<MuInput>,
    pub hidden: Vec<usize>,
}

impl Default for MuConfig {
    fn default() -> Self {
        Self {
            inputs: vec![MuInput::AdEmbedding],
            hidden: vec![32, 8, 1],
        }
    }
}

/// `f_μ(ad) = σ(MLP_μ(features))`, one multiplier per ad.
#[derive(Debug, Clone)]
pub struct MuNet {
    pub config: MuConfig,
    mlp: Mlp,
}

impl MuNet {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: MuConfig, embed_dim: usize, rng: &mut R) -> Result<Self> {
        if let Some(bad) = config.inputs.iter().find(|i| **i == MuInput::Bid) {
            return Err(NmaError::BidDerivedInput(format!("{bad:?}")));
        }
        if config.inputs.is_empty() || config.hidden.last() != Some(&1) {
            return Err(NmaError::InvalidConfig(
                "multiplier network needs inputs and a single output".into(),
            ));
        }
        let width: usize = config
            .inputs
            .iter()
            .map(|i| match i {
                MuInput::AdEmbedding => embed_dim,
                _ => 1,
            })
            .sum();
        let mlp = Mlp::init(store, "mu", width, &config.hidden, rng);
        Ok(Self { config, mlp })
    }

    /// `N×1` multipliers from the `N×d` ad embeddings, divided by their mean
    /// over the auction. Allocation and payments ignore a common factor on
    /// every multiplier, so the division changes nothing about the mechanism;
    /// it stops the relaxed sort from sharpening by inflating that factor.
    pub fn forward(&self, g: &mut Graph, inst: &AuctionInstance, ad_embedding: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.config.inputs.len());
        for input in &self.config.inputs {
            parts.push(match input {
                MuInput::AdEmbedding => ad_embedding,
                MuInput::PointwiseCtr => g.input(Tensor::column(inst.pointwise().into_iter().map(ctr_logit).collect()))?,
                MuInput::Bid => return Err(NmaError::BidDerivedInput("Bid".into())),
            });
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
        let z = self.mlp.forward(g, x)?;
        let mu = g.sigmoid(z)?;
        let n = g.shape(mu)[0] as f64;
        let total = g.sum(mu)?;
        let mean = g.scale(total, 1.0 / n)?;
        let one = g.input(Tensor::scalar(1.0))?;
        let inv = g.div(one, mean)?;
        g.matmul(mu, inv)
    }
}

/// Ranking score of one list and the score with each slot's term removed.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingScore {
    pub rs: f64,
    pub rs_minus: Vec<f64>,
}

/// `RS = Σ_j f_μ(a_j)·b_j·q̂_j` over K-length slot-aligned inputs.
pub fn ranking_score(mu: &[f64], bids: &[f64], q: &[f64]) -> Result<RankingScore> {
    if mu.len() != q.len() || bids.len() != q.len() {
        return Err(NmaError::ShapeMismatch {
            op: "ranking_score",
            left: [mu.len(), bids.len()],
            right: [1, q.len()],
        });
    }
    let terms: Vec<f64> = (0..q.len()).map(|j| mu[j] * bids[j] * q[j]).collect();
    let rs: f64 = terms.iter().sum();
    Ok(RankingScore {
        rs,
        rs_minus: terms.iter().map(|t| rs - t).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaymentFlag {
    /// Payment formula applied without clamping.
    Exact,
    /// Negative payment raised to 0.
    ClampedLow,
    /// Payment above the bid lowered to the bid.
    ClampedHigh,
    /// `f_μ·q̂` under [`MIN_DIVISOR`]; payment set to 0.
    Degenerate,
}

impl PaymentFlag {
    pub fn clamped(self) -> bool {
        self != PaymentFlag::Exact
    }
}

/// Clamps a raw payment into `[0, bid]`.
pub fn clamp_payment(raw: f64, divisor: f64, bid: f64) -> (f64, PaymentFlag) {
    if divisor < MIN_DIVISOR {
        (0.0, PaymentFlag::Degenerate)
    } else if raw < 0.0 {
        (0.0, PaymentFlag::ClampedLow)
    } else if raw > bid {
        (bid, PaymentFlag::ClampedHigh)
    } else {
        (raw, PaymentFlag::Exact)
    }
}

/// Result of one auction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismOutcome {
    pub allocation: Allocation,
    /// Per-click payment of each slot's ad after clamping.
    pub payments: Vec<f64>,
    pub raw_payments: Vec<f64>,
    pub flags: Vec<PaymentFlag>,
    /// Predicted CTR of each slot used for ranking and pricing.
    pub ctrs: Vec<f64>,
    pub ranking_score: f64,
    /// `Σ q̂·p` under the mechanism's own CTR estimates.
    pub expected_revenue: f64,
}

impl MechanismOutcome {
    pub fn clamp_count(&self) -> usize {
        self.flags.iter().filter(|f| f.clamped()).count()
    }
}

/// Bid-independent state of an affine maximizer over all candidate lists:
/// `RS(θ) = Σ_s w_s·μ(a_s)·b(a_s)·q̂(θ, s)`.
#[derive(Debug, Clone)]
pub struct PreparedAuction {
    pub set: Arc<AllocationSet>,
    /// `L×K` CTR estimates per list and slot.
    pub q: Tensor,
    /// Per-ad multipliers.
    pub mu: Vec<f64>,
    /// Per-slot multipliers.
    pub slot_weights: Vec<f64>,
}

impl PreparedAuction {
    pub fn new(set: Arc<AllocationSet>, q: Tensor, mu: Vec<f64>, slot_weights: Vec<f64>) -> Result<Self> {
        if q.shape() != [set.len(), set.k()] {
            return Err(NmaError::ShapeMismatch {
                op: "prepared_auction",
                left: q.shape(),
                right: [set.len(), set.k()],
            });
        }
        if mu.len() != set.n() || slot_weights.len() != set.k() {
            return Err(NmaError::ShapeMismatch {
                op: "prepared_auction",
                left: [mu.len(), slot_weights.len()],
                right: [set.n(), set.k()],
            });
        }
        Ok(Self {
            set,
            q,
            mu,
            slot_weights,
        })
    }

    fn term(&self, i: usize, s: usize, bids: &[f64]) -> f64 {
        let a = self.set.ad(i, s);
        self.slot_weights[s] * self.mu[a] * bids[a] * self.q.at(i, s)
    }

    fn divisor(&self, i: usize, s: usize) -> f64 {
        self.slot_weights[s] * self.mu[self.set.ad(i, s)] * self.q.at(i, s)
    }

    pub fn ranking_scores(&self, bids: &[f64]) -> Vec<f64> {
        (0..self.set.len())
            .map(|i| (0..self.set.k()).map(|s| self.term(i, s, bids)).sum())
            .collect()
    }

    /// Best score over the lists without each ad.
    fn best_without(&self, rs: &[f64]) -> Result<Vec<f64>> {
        (0..self.set.n())
            .map(|j| {
                let lists = self.set.excluding(j)?;
                Ok(rs[lists[argmax_among(rs, lists)]])
            })
            .collect()
    }

    fn check_bids(&self, bids: &[f64]) -> Result<()> {
        if bids.len() != self.set.n() {
            return Err(NmaError::ShapeMismatch {
                op: "bids",
                left: [1, bids.len()],
                right: [1, self.set.n()],
            });
        }
        Ok(())
    }

    fn price(&self, i: usize, bids: &[f64], rs: &[f64], best_without: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<PaymentFlag>) {
        let k = self.set.k();
        let mut raw = Vec::with_capacity(k);
        let mut paid = Vec::with_capacity(k);
        let mut flags = Vec::with_capacity(k);
        for s in 0..k {
            let a = self.set.ad(i, s);
            let rs_minus = rs[i] - self.term(i, s, bids);
            let div = self.divisor(i, s);
            let p = if div < MIN_DIVISOR { 0.0 } else { (best_without[a] - rs_minus) / div };
            let (c, f) = clamp_payment(p, div, bids[a]);
            raw.push(p);
            paid.push(c);
            flags.push(f);
        }
        (raw, paid, flags)
    }

    /// Winner by highest score (lowest index on ties) and its payments.
    pub fn select_and_price(&self, bids: &[f64]) -> Result<MechanismOutcome> {
        self.check_bids(bids)?;
        let rs = self.ranking_scores(bids);
        let best = argmax(&rs);
        let best_without = self.best_without(&rs)?;
        let (raw, payments, flags) = self.price(best, bids, &rs, &best_without);
        let ctrs = self.q.row_slice(best).to_vec();
        let expected_revenue = ctrs.iter().zip(&payments).map(|(q, p)| q * p).sum();
        Ok(MechanismOutcome {
            allocation: self.set.get(best).clone(),
            payments,
            raw_payments: raw,
            flags,
            ctrs,
            ranking_score: rs[best],
            expected_revenue,
        })
    }

    /// Expected revenue of every list priced as if it had won.
    pub fn expected_revenues(&self, bids: &[f64]) -> Result<Vec<f64>> {
        self.check_bids(bids)?;
        let rs = self.ranking_scores(bids);
        let best_without = self.best_without(&rs)?;
        Ok((0..self.set.len())
            .map(|i| {
                let (_, paid, _) = self.price(i, bids, &rs, &best_without);
                paid.iter().enumerate().map(|(s, p)| self.q.at(i, s) * p).sum()
            })
            .collect())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Position in `among` of the largest `v[among[_]]`, first on ties.
fn argmax_among(v: &[f64], among: &[usize]) -> usize {
    let mut best = 0;
    for (p, &i) in among.iter().enumerate().skip(1) {
        if v[i] > v[among[best]] {
            best = p;
        }
    }
    best
}

/// Graph nodes of the training-time mechanism for one request.
#[derive(Debug, Clone, Copy)]
pub struct ScoredLists {
    /// `L×1` ranking scores.
    pub rs: Var,
    /// `L×1` expected revenue of each list priced as if it won.
    pub revenue: Var,
}

/// Differentiable ranking scores and revenues of every list in `set`.
/// The argmax choices inside the payments are taken from the current values
/// and held fixed; gradients flow through the scores they select.
pub fn score_lists(g: &mut Graph, set: &AllocationSet, q: Var, mu: Var, bids: &[f64]) -> Result<ScoredLists> {
    let (l, k) = (set.len(), set.k());
    let flat = set.flat();
    let mu_lk = g.gather_rows(mu, flat)?;
    let mu_lk = g.reshape(mu_lk, [l, k])?;
    let b_lk = g.input(Tensor::new([l, k], flat.iter().map(|&a| bids[a]).collect())?)?;
    let div = g.mul(mu_lk, q)?;
    let terms = g.mul(div, b_lk)?;
    let rs = g.sum_cols(terms)?;

    let rs_val = g.value(rs).data().to_vec();
    let mut picks = Vec::with_capacity(set.n());
    for j in 0..set.n() {
        let lists = set.excluding(j)?;
        picks.push((lists[argmax_among(&rs_val, lists)], 0));
    }
    let best_without = g.pick(rs, &picks)?;
    let bw = g.gather_rows(best_without, flat)?;
    let bw = g.reshape(bw, [l, k])?;

    // p = (RS(best without a) − (RS(θ) − term)) / (μ·q̂)
    let neg_rs_minus = g.sub(terms, rs)?;
    let num = g.add(bw, neg_rs_minus)?;
    let div_val = g.value(div).clone();
    let safe = g.clamp(div, Tensor::filled(l, k, MIN_DIVISOR), Tensor::filled(l, k, f64::INFINITY))?;
    let raw = g.div(num, safe)?;
    let lo = Tensor::zeros(l, k);
    let hi = Tensor::new(
        [l, k],
        flat.iter()
            .zip(div_val.data())
            .map(|(&a, &d)| if d < MIN_DIVISOR { 0.0 } else { bids[a] })
            .collect(),
    )?;
    let pay = g.clamp(raw, lo, hi)?;
    let qp = g.mul(q, pay)?;
    let revenue = g.sum_cols(qp)?;
    Ok(ScoredLists { rs, revenue })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_score_examples() {
        let r = ranking_score(&[1.0, 1.0], &[1.0, 2.0], &[0.5, 0.25]).unwrap();
        assert_eq!(r.rs, 1.0);
        assert_eq!(r.rs_minus, vec![0.5, 0.5]);
        assert_eq!(ranking_score(&[0.0, 0.0], &[1.0, 2.0], &[0.5, 0.25]).unwrap().rs, 0.0);
    }

    #[test]
    fn single_slot_second_price() {
        let set = AllocationSet::shared(2, 1, 100).unwrap();
        let p = PreparedAuction::new(set, Tensor::column(vec![0.5, 0.5]), vec![1.0, 1.0], vec![1.0]).unwrap();
        let out = p.select_and_price(&[2.0, 1.0]).unwrap();
        assert_eq!(out.allocation, Allocation(vec![0]));
        assert!((out.payments[0] - 1.0).abs() < 1e-12);
        assert!((out.expected_revenue - 0.5).abs() < 1e-12);
        assert_eq!(out.flags, vec![PaymentFlag::Exact]);
    }

    #[test]
    fn payments_need_a_spare_ad() {
        let set = AllocationSet::shared(2, 2, 100).unwrap();
        let p = PreparedAuction::new(set, Tensor::filled(2, 2, 0.1), vec![1.0; 2], vec![1.0; 2]).unwrap();
        assert!(matches!(
            p.select_and_price(&[1.0, 1.0]),
            Err(NmaError::PaymentUndefined { .. })
        ));
    }

    #[test]
    fn clamp_rules() {
        assert_eq!(clamp_payment(-0.1, 1.0, 1.0), (0.0, PaymentFlag::ClampedLow));
        assert_eq!(clamp_payment(1.5, 1.0, 1.0), (1.0, PaymentFlag::ClampedHigh));
        assert_eq!(clamp_payment(0.5, 1e-12, 1.0), (0.0, PaymentFlag::Degenerate));
        assert_eq!(clamp_payment(0.5, 1.0, 1.0), (0.5, PaymentFlag::Exact));
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
