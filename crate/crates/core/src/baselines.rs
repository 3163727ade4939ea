//! Reference mechanisms and the common mechanism interface.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{AllocationSet, Allocation, AuctionInstance, DEFAULT_MAX_ALLOCATIONS, SW_EPSILON};
use crate::autodiff::Tensor;
use crate::error::{NmaError, Result};
use crate::eval;
use crate::ldrm::{clamp_payment, MechanismOutcome, PaymentFlag, PreparedAuction};
use crate::par::ExecMode;
use crate::synth::{true_ctr, ClickModel};
use crate::train::NmaModel;

/// CTR estimates an affine maximizer ranks and prices with.
#[derive(Debug, Clone)]
pub enum CtrSource {
    /// Ground-truth click probabilities.
    Oracle(Arc<ClickModel>),
    /// The trained model's CTR stage.
    Model(Arc<NmaModel>),
    /// Point-wise pCTR, identical in every slot and context.
    Pointwise,
}

/// Per-ad multipliers of an affine maximizer.
#[derive(Debug, Clone)]
pub enum AdWeights {
    Ones,
    Model(Arc<NmaModel>),
}

#[derive(Debug, Clone)]
pub enum Mechanism {
    /// Rank by bid × pCTR, pay the bid.
    Gfp,
    /// Rank by bid × pCTR, pay the next score over own pCTR.
    Gsp,
    /// `argmax Σ_s w_s·μ(a_s)·b(a_s)·q̂(θ,s)` with matching payments.
    Affine {
        name: String,
        ctr: CtrSource,
        ad_weights: AdWeights,
        slot_weights: Vec<f64>,
    },
}

/// Bid-independent per-auction state.
#[derive(Debug, Clone)]
pub enum Prepared {
    Position { pctr: Vec<f64>, slots: usize, first_price: bool },
    Affine(PreparedAuction),
}

impl Mechanism {
    /// VCG on the click oracle's true probabilities.
    pub fn vcg(oracle: Arc<ClickModel>) -> Self {
        let k = oracle.position.len();
        Self::Affine {
            name: "vcg_oracle".into(),
            ctr: CtrSource::Oracle(oracle),
            ad_weights: AdWeights::Ones,
            slot_weights: vec![1.0; k],
        }
    }

    pub fn wvcg(ctr: CtrSource, slot_weights: Vec<f64>) -> Self {
        Self::Affine {
            name: "wvcg".into(),
            ctr,
            ad_weights: AdWeights::Ones,
            slot_weights,
        }
    }

    /// VCG on a trained model's list-wise CTRs.
    pub fn model_vcg(model: Arc<NmaModel>) -> Self {
        let k = model.config.slots;
        Self::wvcg(CtrSource::Model(model), vec![1.0; k]).with_name("vcg")
    }

    pub fn nma(model: Arc<NmaModel>) -> Self {
        let k = model.config.slots;
        Self::Affine {
            name: "nma".into(),
            ctr: CtrSource::Model(Arc::clone(&model)),
            ad_weights: AdWeights::Model(model),
            slot_weights: vec![1.0; k],
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Mechanism::Gfp => "gfp",
            Mechanism::Gsp => "gsp",
            Mechanism::Affine { name, .. } => name,
        }
    }

    pub fn with_name(self, new: &str) -> Self {
        match self {
            Mechanism::Affine {
                ctr,
                ad_weights,
                slot_weights,
                ..
            } => Mechanism::Affine {
                name: new.into(),
                ctr,
                ad_weights,
                slot_weights,
            },
            other => other,
        }
    }

    pub fn prepare(&self, inst: &AuctionInstance) -> Result<Prepared> {
        match self {
            Mechanism::Gfp | Mechanism::Gsp => Ok(Prepared::Position {
                pctr: inst.pointwise(),
                slots: inst.slots,
                first_price: matches!(self, Mechanism::Gfp),
            }),
            Mechanism::Affine {
                ctr,
                ad_weights,
                slot_weights,
                ..
            } => {
                let set = AllocationSet::shared(inst.n_ads(), slot_weights.len(), DEFAULT_MAX_ALLOCATIONS)?;
                let q = match ctr {
                    CtrSource::Oracle(m) => oracle_table(m, inst, &set)?,
                    CtrSource::Model(m) => m.q_table(inst, &set)?,
                    CtrSource::Pointwise => crate::train::pointwise_table(inst, &set)?,
                };
                let mu = match ad_weights {
                    AdWeights::Ones => vec![1.0; inst.n_ads()],
                    AdWeights::Model(m) => m.mu_values(inst)?,
                };
                Ok(Prepared::Affine(PreparedAuction::new(set, q, mu, slot_weights.clone())?))
            }
        }
    }

    pub fn run(prepared: &Prepared, bids: &[f64]) -> Result<MechanismOutcome> {
        match prepared {
            Prepared::Position {
                pctr,
                slots,
                first_price,
            } => position_auction(pctr, bids, *slots, *first_price),
            Prepared::Affine(p) => p.select_and_price(bids),
        }
    }

    pub fn run_instance(&self, inst: &AuctionInstance) -> Result<MechanismOutcome> {
        Self::run(&self.prepare(inst)?, &inst.bids())
    }
}

/// True CTR of every slot of every list.
pub fn oracle_table(model: &ClickModel, inst: &AuctionInstance, set: &AllocationSet) -> Result<Tensor> {
    let mut data = Vec::with_capacity(set.len() * set.k());
    for a in set.as_slice() {
        data.extend(true_ctr(model, a, inst)?);
    }
    Tensor::new([set.len(), set.k()], data)
}

fn position_auction(pctr: &[f64], bids: &[f64], k: usize, first_price: bool) -> Result<MechanismOutcome> {
    if bids.len() != pctr.len() || k == 0 || k > bids.len() {
        return Err(NmaError::ShapeMismatch {
            op: "position_auction",
            left: [1, bids.len()],
            right: [k, pctr.len()],
        });
    }
    let ecpm: Vec<f64> = bids.iter().zip(pctr).map(|(b, q)| b * q).collect();
    let order = crate::ldsm::descending_order(&ecpm);
    let winners = &order[..k];
    let mut payments = Vec::with_capacity(k);
    let mut raw = Vec::with_capacity(k);
    let mut flags = Vec::with_capacity(k);
    for (s, &a) in winners.iter().enumerate() {
        let p = if first_price {
            bids[a]
        } else {
            let next = order.get(s + 1).map_or(0.0, |&o| ecpm[o]);
            next / pctr[a]
        };
        let (c, f) = if first_price { (p, PaymentFlag::Exact) } else { clamp_payment(p, pctr[a], bids[a]) };
        raw.push(p);
        payments.push(c);
        flags.push(f);
    }
    let ctrs: Vec<f64> = winners.iter().map(|&a| pctr[a]).collect();
    let expected_revenue = ctrs.iter().zip(&payments).map(|(q, p)| q * p).sum();
    Ok(MechanismOutcome {
        allocation: Allocation(winners.to_vec()),
        payments,
        raw_payments: raw,
        flags,
        ctrs,
        ranking_score: winners.iter().map(|&a| ecpm[a]).sum(),
        expected_revenue,
    })
}

pub fn run_gfp(inst: &AuctionInstance) -> Result<MechanismOutcome> {
    Mechanism::Gfp.run_instance(inst)
}

pub fn run_gsp(inst: &AuctionInstance) -> Result<MechanismOutcome> {
    Mechanism::Gsp.run_instance(inst)
}

pub fn run_vcg(inst: &AuctionInstance, ctr: CtrSource) -> Result<MechanismOutcome> {
    let k = inst.slots;
    Mechanism::wvcg(ctr, vec![1.0; k]).run_instance(inst)
}

/// Tuned per-slot weights and the bandit state that found them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WvcgParams {
    pub weights: Vec<f64>,
    pub arms: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub mean_rpm: Vec<f64>,
    pub mean_swmr: Vec<f64>,
    pub epsilon: f64,
    /// True when no arm met the welfare constraint and all-ones was used.
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditConfig {
    pub grid: Vec<f64>,
    pub rounds: usize,
    pub batch: usize,
    pub epsilon: f64,
    /// Welfare constraint: SWMR must stay at or above `1 − sw_epsilon`.
    pub sw_epsilon: f64,
    pub seed: u64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            grid: vec![0.6, 0.8, 1.0, 1.2, 1.4],
            rounds: 200,
            batch: 200,
            epsilon: 0.1,
            sw_epsilon: SW_EPSILON,
            seed: 0,
        }
    }
}

/// Every per-slot weight vector over `grid`.
pub fn weight_arms(grid: &[f64], k: usize) -> Vec<Vec<f64>> {
    let mut arms = vec![vec![]];
    for _ in 0..k {
        arms = arms
            .into_iter()
            .flat_map(|a| {
                grid.iter().map(move |&w| {
                    let mut b = a.clone();
                    b.push(w);
                    b
                })
            })
            .collect();
    }
    arms
}

/// ε-greedy search for per-slot weights maximizing RPM subject to the
/// welfare constraint, measured on random batches of `train` against VCG on
/// the same CTR source.
pub fn tune_wvcg_arms(
    train: &[AuctionInstance],
    ctr: &CtrSource,
    oracle: &ClickModel,
    arms: Vec<Vec<f64>>,
    cfg: &BanditConfig,
    mode: ExecMode,
) -> Result<WvcgParams> {
    if arms.is_empty() || train.is_empty() {
        return Err(NmaError::InvalidConfig("bandit needs arms and data".into()));
    }
    if arms.iter().flatten().any(|&w| !(w > 0.0)) {
        return Err(NmaError::InvalidConfig("slot weights must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reference = Mechanism::wvcg(ctr.clone(), vec![1.0; arms[0].len()]);
    let n = arms.len();
    let mut counts = vec![0usize; n];
    let mut rpm = vec![0.0; n];
    let mut swmr = vec![0.0; n];
    let feasible = |i: usize, swmr: &[f64]| swmr[i] >= 1.0 - cfg.sw_epsilon;
    let score = |i: usize, rpm: &[f64], swmr: &[f64]| if feasible(i, swmr) { rpm[i] } else { -1.0 + swmr[i] };
    for round in 0..cfg.rounds.max(n) {
        let arm = if round < n {
            round
        } else if rng.random::<f64>() < cfg.epsilon {
            rng.random_range(0..n)
        } else {
            (0..n)
                .max_by(|&a, &b| score(a, &rpm, &swmr).total_cmp(&score(b, &rpm, &swmr)).then(b.cmp(&a)))
                .expect("arms")
        };
        let batch: Vec<AuctionInstance> = (0..cfg.batch.min(train.len()))
            .map(|_| train[rng.random_range(0..train.len())].clone())
            .collect();
        let mech = Mechanism::wvcg(ctr.clone(), arms[arm].clone());
        let rep = eval::evaluate(&mech, Some(&reference), &batch, oracle, mode)?;
        counts[arm] += 1;
        let c = counts[arm] as f64;
        rpm[arm] += (rep.rpm - rpm[arm]) / c;
        swmr[arm] += (rep.swmr - swmr[arm]) / c;
    }
    let best = (0..n)
        .filter(|&i| feasible(i, &swmr))
        .max_by(|&a, &b| rpm[a].total_cmp(&rpm[b]).then(b.cmp(&a)));
    let k = arms[0].len();
    let (weights, fell_back) = match best {
        Some(i) => (arms[i].clone(), false),
        None => {
            log::warn!("no weight arm met the welfare constraint; falling back to all-ones");
            (vec![1.0; k], true)
        }
    };
    Ok(WvcgParams {
        weights,
        arms,
        counts,
        mean_rpm: rpm,
        mean_swmr: swmr,
        epsilon: cfg.epsilon,
        fell_back,
    })
}

pub fn tune_wvcg(
    train: &[AuctionInstance],
    ctr: &CtrSource,
    oracle: &ClickModel,
    cfg: &BanditConfig,
    mode: ExecMode,
) -> Result<WvcgParams> {
    let k = train.first().map_or(0, |i| i.slots);
    tune_wvcg_arms(train, ctr, oracle, weight_arms(&cfg.grid, k), cfg, mode)
}
