//! Metrics with expected-click accounting, incentive-compatibility probing,
//! ablation and sensitivity drivers, and run summaries.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auction::{AllocationSet, AuctionInstance, DEFAULT_MAX_ALLOCATIONS};
use crate::baselines::{tune_wvcg, BanditConfig, CtrSource, Mechanism, Prepared};
use crate::error::{NmaError, Result};
use crate::par::{self, ExecMode};
use crate::synth::{rng_for, true_ctr, ClickModel};
use crate::train::{self, CtrModel, NmaModel, TrainConfig, TrainOptions};

/// Per-auction totals under the click oracle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AuctionRecord {
    pub clicks: f64,
    pub revenue: f64,
    pub welfare: f64,
    /// Welfare of the reference mechanism on the same auction.
    pub welfare_ref: f64,
    /// Highest achievable welfare over all lists.
    pub welfare_opt: f64,
    pub impressions: usize,
    pub payments: usize,
    pub clamps: usize,
}

/// Largest `Σ v·true_ctr` over every list of `inst`.
pub fn optimal_welfare(oracle: &ClickModel, inst: &AuctionInstance) -> Result<f64> {
    let set = AllocationSet::shared(inst.n_ads(), inst.slots, DEFAULT_MAX_ALLOCATIONS)?;
    let values = inst.values();
    let mut best = f64::NEG_INFINITY;
    for a in set.as_slice() {
        let q = true_ctr(oracle, a, inst)?;
        let sw: f64 = a.slots().iter().zip(&q).map(|(&ad, p)| values[ad] * p).sum();
        best = best.max(sw);
    }
    Ok(best)
}

fn realized_welfare(mech: &Mechanism, inst: &AuctionInstance, oracle: &ClickModel) -> Result<f64> {
    let out = mech.run_instance(inst)?;
    let q = true_ctr(oracle, &out.allocation, inst)?;
    Ok(out.allocation.slots().iter().zip(&q).map(|(&ad, c)| c * inst.ads[ad].true_value).sum())
}

/// Scores one auction. Without a reference the welfare ratio is taken
/// against the best list under the oracle.
pub fn audit(
    mech: &Mechanism,
    reference: Option<&Mechanism>,
    inst: &AuctionInstance,
    oracle: &ClickModel,
) -> Result<AuctionRecord> {
    let out = mech.run_instance(inst)?;
    let q = true_ctr(oracle, &out.allocation, inst)?;
    let welfare_opt = optimal_welfare(oracle, inst)?;
    let mut r = AuctionRecord {
        impressions: out.allocation.len(),
        payments: out.payments.len(),
        clamps: out.clamp_count(),
        welfare_opt,
        welfare_ref: match reference {
            Some(m) => realized_welfare(m, inst, oracle)?,
            None => welfare_opt,
        },
        ..AuctionRecord::default()
    };
    for ((&ad, &p), &c) in out.allocation.slots().iter().zip(&out.payments).zip(&q) {
        r.clicks += c;
        r.revenue += c * p;
        r.welfare += c * inst.ads[ad].true_value;
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mechanism: String,
    pub auctions: usize,
    pub impressions: usize,
    pub ctr: f64,
    pub rpm: f64,
    pub swpm: f64,
    /// SWPM of the reference (VCG) mechanism.
    pub swpm_ref: f64,
    pub swmr: f64,
    /// SWPM of the best list under the oracle, and the ratio against it.
    pub swpm_opt: f64,
    pub swmr_opt: f64,
    /// Fraction of winner payments that were clamped.
    pub clamp_frequency: f64,
}

impl MetricsReport {
    pub fn from_records(mechanism: &str, recs: &[AuctionRecord]) -> Self {
        let imp: usize = recs.iter().map(|r| r.impressions).sum();
        let pays: usize = recs.iter().map(|r| r.payments).sum();
        let sum = |f: fn(&AuctionRecord) -> f64| recs.iter().map(f).sum::<f64>();
        let per_mille = |x: f64| if imp == 0 { 0.0 } else { x / imp as f64 * 1000.0 };
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 1.0 };
        let swpm = per_mille(sum(|r| r.welfare));
        let swpm_ref = per_mille(sum(|r| r.welfare_ref));
        let swpm_opt = per_mille(sum(|r| r.welfare_opt));
        Self {
            mechanism: mechanism.to_string(),
            auctions: recs.len(),
            impressions: imp,
            ctr: if imp == 0 { 0.0 } else { sum(|r| r.clicks) / imp as f64 },
            rpm: per_mille(sum(|r| r.revenue)),
            swpm,
            swpm_ref,
            swmr: ratio(swpm, swpm_ref),
            swpm_opt,
            swmr_opt: ratio(swpm, swpm_opt),
            clamp_frequency: if pays == 0 {
                0.0
            } else {
                recs.iter().map(|r| r.clamps).sum::<usize>() as f64 / pays as f64
            },
        }
    }
}

/// Runs `mech` on every instance and scores the outcomes with the oracle.
/// SWMR is measured against `reference` (normally VCG on the same CTR
/// source), or against the oracle optimum when it is `None`.
pub fn evaluate(
    mech: &Mechanism,
    reference: Option<&Mechanism>,
    set: &[AuctionInstance],
    oracle: &ClickModel,
    mode: ExecMode,
) -> Result<MetricsReport> {
    let recs = par::try_map(mode, set, |inst| audit(mech, reference, inst, oracle))?;
    Ok(MetricsReport::from_records(mech.name(), &recs))
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mechanism: String,
    pub seeds: usize,
    pub ctr: (f64, f64),
    pub rpm: (f64, f64),
    pub swpm: (f64, f64),
    pub swmr: (f64, f64),
    pub clamp_frequency: (f64, f64),
}

/// Mean ± std of each metric over per-seed reports of one mechanism.
pub fn summarize(reports: &[MetricsReport]) -> MetricSummary {
    let col = |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    MetricSummary {
        mechanism: reports.first().map(|r| r.mechanism.clone()).unwrap_or_default(),
        seeds: reports.len(),
        ctr: col(|r| r.ctr),
        rpm: col(|r| r.rpm),
        swpm: col(|r| r.swpm),
        swmr: col(|r| r.swmr),
        clamp_frequency: col(|r| r.clamp_frequency),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcTestConfig {
    pub betas: Vec<f64>,
    pub auctions: usize,
    pub repeats: usize,
    /// Ads probed per auction; `None` probes every ad.
    pub target_ads: Option<usize>,
    pub seed: u64,
}

impl Default for IcTestConfig {
    fn default() -> Self {
        Self {
            betas: (0..10).map(|i| 0.1 + 0.2 * i as f64).collect(),
            auctions: 2_000,
            repeats: 20,
            target_ads: None,
            seed: 0,
        }
    }
}

impl IcTestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.betas.is_empty() || self.betas.iter().any(|&b| !(b > 0.0)) {
            return Err(NmaError::InvalidConfig("perturbation factors must be positive".into()));
        }
        if self.auctions == 0 || self.repeats == 0 {
            return Err(NmaError::InvalidConfig("need at least one auction and repeat".into()));
        }
        Ok(())
    }
}

/// Regret totals over a group of probed ads.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegretTotals {
    pub regret: f64,
    /// Σ utility under truthful bidding.
    pub utility: f64,
    /// Σ expected value `true_ctr·v` of truthfully winning probed ads.
    pub welfare: f64,
    /// Regret and truthful utility when clicks follow the mechanism's own
    /// CTR estimates instead of the oracle.
    pub belief_regret: f64,
    pub belief_utility: f64,
}

impl RegretTotals {
    fn add(&mut self, o: &RegretTotals) {
        self.regret += o.regret;
        self.utility += o.utility;
        self.welfare += o.welfare;
        self.belief_regret += o.belief_regret;
        self.belief_utility += o.belief_utility;
    }

    /// Σ regret / Σ truthful utility; `None` when no probed ad has utility.
    pub fn utility_normalized(&self) -> Option<f64> {
        (self.utility > 0.0).then(|| self.regret / self.utility)
    }

    /// Σ regret / Σ truthful expected value.
    pub fn welfare_normalized(&self) -> Option<f64> {
        (self.welfare > 0.0).then(|| self.regret / self.welfare)
    }

    /// Utility-normalized regret with the mechanism's CTRs as click model.
    pub fn belief_normalized(&self) -> Option<f64> {
        (self.belief_utility > 0.0).then(|| self.belief_regret / self.belief_utility)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcrReport {
    pub mechanism: String,
    pub per_repeat: Vec<RegretTotals>,
    /// Mean ± std of the utility-normalized regret; `None` if undefined in any repeat.
    pub icr: Option<(f64, f64)>,
    /// Mean ± std of the welfare-normalized regret.
    pub icr_welfare: Option<(f64, f64)>,
    /// Mean ± std of the belief-utility-normalized regret.
    pub icr_belief: Option<(f64, f64)>,
    /// Largest single-ad regret seen.
    pub max_regret: f64,
}

/// Oracle utility, oracle value and belief utility of `ad`.
fn utility(oracle: &ClickModel, inst: &AuctionInstance, prepared: &Prepared, bids: &[f64], ad: usize) -> Result<[f64; 3]> {
    let out = Mechanism::run(prepared, bids)?;
    match out.allocation.slot_of(ad) {
        None => Ok([0.0; 3]),
        Some(s) => {
            let q = true_ctr(oracle, &out.allocation, inst)?[s];
            let v = inst.ads[ad].true_value;
            let margin = v - out.payments[s];
            Ok([q * margin, q * v, out.ctrs[s] * margin])
        }
    }
}

/// Regret of every probed ad of one auction with all others truthful.
pub fn auction_regret(
    oracle: &ClickModel,
    inst: &AuctionInstance,
    prepared: &Prepared,
    betas: &[f64],
    ads: &[usize],
) -> Result<(RegretTotals, f64)> {
    let values = inst.values();
    let mut t = RegretTotals::default();
    let mut worst = 0.0f64;
    for &j in ads {
        let [u0, w0, b0] = utility(oracle, inst, prepared, &values, j)?;
        let (mut best, mut best_belief) = (u0, b0);
        let mut bids = values.clone();
        for &beta in betas {
            bids[j] = beta * values[j];
            let [u, _, b] = utility(oracle, inst, prepared, &bids, j)?;
            best = best.max(u);
            best_belief = best_belief.max(b);
        }
        let r = (best - u0).max(0.0);
        t.regret += r;
        t.utility += u0;
        t.welfare += w0;
        t.belief_regret += (best_belief - b0).max(0.0);
        t.belief_utility += b0;
        worst = worst.max(r);
    }
    Ok((t, worst))
}

/// Probes random auctions by rescaling one bid at a time.
pub fn ic_regret(
    mech: &Mechanism,
    cfg: &IcTestConfig,
    set: &[AuctionInstance],
    oracle: &ClickModel,
    mode: ExecMode,
) -> Result<IcrReport> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(NmaError::InvalidConfig("empty evaluation set".into()));
    }
    let draws: Vec<Vec<(usize, Vec<usize>)>> = (0..cfg.repeats)
        .map(|r| {
            let mut rng = rng_for(cfg.seed, r as u64);
            (0..cfg.auctions)
                .map(|_| {
                    let i = rng.random_range(0..set.len());
                    let n = set[i].n_ads();
                    let ads = match cfg.target_ads {
                        Some(t) if t < n => rand::seq::index::sample(&mut rng, n, t).into_vec(),
                        _ => (0..n).collect(),
                    };
                    (i, ads)
                })
                .collect()
        })
        .collect();
    let mut needed: Vec<usize> = draws.iter().flatten().map(|(i, _)| *i).collect();
    needed.sort_unstable();
    needed.dedup();
    let prepared: BTreeMap<usize, Prepared> = needed
        .iter()
        .copied()
        .zip(par::try_map(mode, &needed, |&i| mech.prepare(&set[i]))?)
        .collect();

    let mut per_repeat = Vec::with_capacity(cfg.repeats);
    let mut max_regret = 0.0f64;
    for draw in &draws {
        let parts = par::try_map(mode, draw, |(i, ads)| auction_regret(oracle, &set[*i], &prepared[i], &cfg.betas, ads))?;
        let mut t = RegretTotals::default();
        for (p, w) in &parts {
            t.add(p);
            max_regret = max_regret.max(*w);
        }
        per_repeat.push(t);
    }
    let stat = |f: fn(&RegretTotals) -> Option<f64>| {
        per_repeat
            .iter()
            .map(f)
            .collect::<Option<Vec<f64>>>()
            .map(|v| mean_std(&v))
    };
    Ok(IcrReport {
        mechanism: mech.name().to_string(),
        icr: stat(RegretTotals::utility_normalized),
        icr_welfare: stat(RegretTotals::welfare_normalized),
        icr_belief: stat(RegretTotals::belief_normalized),
        per_repeat,
        max_regret,
    })
}

/// Trained variants compared in the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Nma,
    /// Point-wise pCTR in place of the list-wise predictor.
    NoClpm,
    /// Weighted VCG on a CTR-only trained predictor.
    NoLdrmLdsm,
    /// No welfare cross-entropy term.
    NoSwAux,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Nma, Variant::NoClpm, Variant::NoLdrmLdsm, Variant::NoSwAux];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Nma => "nma",
            Variant::NoClpm => "-clpm",
            Variant::NoLdrmLdsm => "-ldrm-ldsm",
            Variant::NoSwAux => "-sw_aux",
        }
    }

    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Nma => {}
            Variant::NoClpm => c.ctr_model = CtrModel::Pointwise,
            Variant::NoLdrmLdsm => {
                c.clpm_pretrain_epochs += c.epochs;
                c.epochs = 0;
            }
            Variant::NoSwAux => c.alpha_ce = 0.0,
        }
        c
    }
}

/// Trains `variant` and wraps it as a mechanism.
pub fn build_variant(
    variant: Variant,
    train_set: &[AuctionInstance],
    oracle: &ClickModel,
    base: &TrainConfig,
    bandit: &BanditConfig,
    mode: ExecMode,
) -> Result<(Mechanism, NmaModel)> {
    let cfg = variant.config(base);
    let out = train::train(train_set, &cfg, &TrainOptions { mode, ..Default::default() })?;
    let model = Arc::new(out.model.clone());
    let mech = match variant {
        Variant::NoLdrmLdsm => {
            let ctr = CtrSource::Model(Arc::clone(&model));
            let tuned = tune_wvcg(train_set, &ctr, oracle, &BanditConfig { seed: cfg.seed, ..bandit.clone() }, mode)?;
            Mechanism::wvcg(ctr, tuned.weights)
        }
        _ => Mechanism::nma(model),
    };
    Ok((mech.with_name(variant.label()), out.model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// Every variant under every seed, evaluated on `test`.
pub fn run_ablations(
    train_set: &[AuctionInstance],
    test: &[AuctionInstance],
    oracle: &ClickModel,
    base: &TrainConfig,
    seeds: &[u64],
    bandit: &BanditConfig,
    mode: ExecMode,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let base = TrainConfig { seed, ..base.clone() };
        // every variant of a seed is measured against VCG on the full model's CTRs
        let mut reference = None;
        for v in Variant::ALL {
            let (mech, model) = build_variant(v, train_set, oracle, &base, bandit, mode)?;
            if v == Variant::Nma {
                reference = Some(Mechanism::model_vcg(Arc::new(model)));
            }
            let metrics = evaluate(&mech, reference.as_ref(), test, oracle, mode)?;
            rows.push(AblationRow { variant: v, seed, metrics });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    AlphaCe,
    AlphaList,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::AlphaCe => "alpha_ce",
            SweepParam::AlphaList => "alpha_list",
        }
    }

    pub fn apply(self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut c = base.clone();
        match self {
            SweepParam::AlphaCe => c.alpha_ce = value,
            SweepParam::AlphaList => c.alpha_list = value,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: MetricsReport,
}

/// Trains one model per grid value with the base seed and evaluates it
/// against VCG on that model's CTRs.
pub fn sweep(
    param: SweepParam,
    grid: &[f64],
    train_set: &[AuctionInstance],
    test: &[AuctionInstance],
    oracle: &ClickModel,
    base: &TrainConfig,
    mode: ExecMode,
) -> Result<Vec<SweepPoint>> {
    grid.iter()
        .map(|&value| {
            let cfg = param.apply(base, value);
            let out = train::train(train_set, &cfg, &TrainOptions { mode, ..Default::default() })?;
            let model = Arc::new(out.model);
            let reference = Mechanism::model_vcg(Arc::clone(&model));
            Ok(SweepPoint {
                value,
                metrics: evaluate(&Mechanism::nma(model), Some(&reference), test, oracle, mode)?,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, param: SweepParam, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([param.name(), "rpm", "swpm", "swmr", "ctr"])?;
    for p in points {
        w.write_record([
            format!("{}", p.value),
            format!("{}", p.metrics.rpm),
            format!("{}", p.metrics.swpm),
            format!("{}", p.metrics.swmr),
            format!("{}", p.metrics.ctr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "mechanism",
        "auctions",
        "impressions",
        "ctr",
        "rpm",
        "swpm",
        "swmr",
        "swmr_opt",
        "clamp_frequency",
    ])?;
    for r in reports {
        w.write_record([
            r.mechanism.clone(),
            r.auctions.to_string(),
            r.impressions.to_string(),
            format!("{}", r.ctr),
            format!("{}", r.rpm),
            format!("{}", r.swpm),
            format!("{}", r.swmr),
            format!("{}", r.swmr_opt),
            format!("{}", r.clamp_frequency),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// AUC of list-wise and point-wise CTR estimates on the logged displays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub listwise: f64,
    pub pointwise: f64,
    pub impressions: usize,
    pub clicks: usize,
}

pub fn ctr_auc(model: &NmaModel, set: &[AuctionInstance], mode: ExecMode) -> Result<AucReport> {
    let rows = par::try_map(mode, set, |inst| -> Result<Vec<(f64, f64, u8)>> {
        let (Some(alloc), Some(clicks)) = (&inst.logged, &inst.clicks) else {
            return Ok(vec![]);
        };
        let q = model.clpm.predict_list_ctr(&model.store, inst, alloc)?;
        Ok(alloc
            .slots()
            .iter()
            .zip(q)
            .zip(clicks)
            .map(|((&a, q), &y)| (q, inst.ads[a].pointwise_pctr, y))
            .collect())
    })?;
    let flat: Vec<(f64, f64, u8)> = rows.into_iter().flatten().collect();
    let labels: Vec<u8> = flat.iter().map(|r| r.2).collect();
    let list: Vec<f64> = flat.iter().map(|r| r.0).collect();
    let point: Vec<f64> = flat.iter().map(|r| r.1).collect();
    Ok(AucReport {
        listwise: crate::clpm::auc(&list, &labels),
        pointwise: crate::clpm::auc(&point, &labels),
        impressions: labels.len(),
        clicks: labels.iter().filter(|&&y| y == 1).count(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub seed: u64,
    pub config_sha256: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub results: serde_json::Value,
}

impl RunSummary {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beta_grid() {
        let c = IcTestConfig::default();
        assert_eq!(c.betas.len(), 10);
        assert!((c.betas[0] - 0.1).abs() < 1e-12 && (c.betas[9] - 1.9).abs() < 1e-12);
        assert!(c.betas.iter().any(|&b| (b - 0.9).abs() < 1e-12));
        assert!(c.betas.iter().any(|&b| (b - 1.1).abs() < 1e-12));
    }

    #[test]
    fn metrics_from_records() {
        let r = AuctionRecord {
            clicks: 0.1,
            revenue: 0.05,
            welfare: 0.1,
            welfare_ref: 0.2,
            welfare_opt: 0.4,
            impressions: 2,
            payments: 2,
            clamps: 1,
        };
        let m = MetricsReport::from_records("x", &[r, r]);
        assert!((m.ctr - 0.05).abs() < 1e-12);
        assert!((m.rpm - 25.0).abs() < 1e-12);
        assert!((m.swmr - 0.5).abs() < 1e-12);
        assert!((m.swmr_opt - 0.25).abs() < 1e-12);
        assert_eq!(m.clamp_frequency, 0.5);
    }

    #[test]
    fn undefined_normalization() {
        let t = RegretTotals { regret: 0.0, utility: 0.0, welfare: 1.0, ..Default::default() };
        assert_eq!(t.utility_normalized(), None);
        assert_eq!(t.welfare_normalized(), Some(0.0));
    }
}
