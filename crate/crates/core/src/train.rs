//! Model bundle, combined loss and the mini-batch training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::auction::{AllocationSet, AuctionInstance, DEFAULT_MAX_ALLOCATIONS};
use crate::autodiff::{checkpoint, AdamState, Gradients, Graph, ParamStore, Tensor, Var};
use crate::clpm::{list_ctr_loss, Clpm, ClpmConfig, DEFAULT_HASH_ROWS};
use crate::error::{NmaError, Result};
use crate::ldrm::{score_lists, MuConfig, MuInput, MuNet, PreparedAuction};
use crate::ldsm::{revenue_loss, soft_sort_rows, welfare_ce_loss, welfare_order};
use crate::par::{self, ExecMode};
use crate::synth::rng_for;

/// Where the ranking stage takes its CTR estimates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CtrModel {
    /// List-wise predictor, trained jointly.
    #[default]
    Clpm,
    /// Each ad's point-wise pCTR in every slot of every list.
    Pointwise,
}

/// Training hyperparameters and model shape; read from a flat TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    /// Bids are multiplied by this inside the training objective so score gaps
    /// between lists are large next to `tau`. Allocation and payment rules are
    /// unaffected; it only sets the unit in which `tau` and the loss weights
    /// are read.
    pub value_scale: f64,
    /// Weight of the welfare cross-entropy term.
    pub alpha_ce: f64,
    /// Weight of the list-wise CTR term.
    pub alpha_list: f64,
    pub lr: f64,
    /// Decoupled Adam weight decay.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of CTR-only training before the joint objective starts.
    pub clpm_pretrain_epochs: usize,
    pub seed: u64,
    pub slots: usize,
    pub embed_dim: usize,
    pub att_hidden: Vec<usize>,
    pub list_hidden: Vec<usize>,
    pub mu_hidden: Vec<usize>,
    pub mu_inputs: Vec<MuInput>,
    pub hash_rows: usize,
    pub user_vocab: u64,
    pub request_vocab: u64,
    pub ctr_model: CtrModel,
    /// List-wise CTRs are a learned correction to the point-wise pCTR logit.
    pub pctr_residual: bool,
    /// Drop CTR-model gradients during the joint phase.
    pub freeze_clpm: bool,
    /// Treat predicted CTRs as constants inside the revenue and welfare
    /// losses, so the CTR model learns only from click labels. Without this
    /// the revenue term rewards inflating every prediction.
    pub detach_ctr: bool,
    pub max_allocations: usize,
}

impl Default for TrainConfig {
    /// Calibrated for the default synthetic benchmark: list scores are
    /// rescaled to order one, the CTR model is warmed up on clicks alone, and
    /// its loss weight is the large-log setting's.
    fn default() -> Self {
        Self {
            tau: 1.0,
            value_scale: 100.0,
            alpha_ce: 0.2,
            alpha_list: 0.3,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 256,
            epochs: 2,
            clpm_pretrain_epochs: 2,
            seed: 0,
            slots: 2,
            embed_dim: 8,
            att_hidden: vec![16, 1],
            list_hidden: vec![32, 16, 8],
            mu_hidden: vec![32, 8, 1],
            mu_inputs: vec![MuInput::AdEmbedding, MuInput::PointwiseCtr],
            hash_rows: DEFAULT_HASH_ROWS,
            user_vocab: 2_000,
            request_vocab: 24,
            ctr_model: CtrModel::Clpm,
            pctr_residual: true,
            freeze_clpm: false,
            detach_ctr: true,
            max_allocations: DEFAULT_MAX_ALLOCATIONS,
        }
    }
}

impl TrainConfig {
    /// Small public log setting.
    pub fn avito() -> Self {
        Self {
            tau: 1.0,
            alpha_ce: 0.2,
            alpha_list: 0.01,
            batch_size: 1024,
            ..Self::default()
        }
    }

    /// Large industrial log setting.
    pub fn meituan() -> Self {
        Self {
            tau: 0.1,
            alpha_ce: 0.4,
            alpha_list: 0.3,
            batch_size: 8192,
            list_hidden: vec![60, 32, 10],
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NmaError::InvalidConfig(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.value_scale > 0.0 && self.value_scale.is_finite()) {
            return bad(format!("value_scale must be positive, got {}", self.value_scale));
        }
        if !(self.alpha_ce >= 0.0 && self.alpha_list >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative".into());
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("need a positive learning rate and batch size".into());
        }
        if self.mu_inputs.contains(&MuInput::Bid) {
            return Err(NmaError::BidDerivedInput("Bid".into()));
        }
        self.clpm_config().validate()
    }

    pub fn clpm_config(&self) -> ClpmConfig {
        ClpmConfig {
            embed_dim: self.embed_dim,
            slots: self.slots,
            att_hidden: self.att_hidden.clone(),
            list_hidden: self.list_hidden.clone(),
            hash_rows: self.hash_rows,
            user_vocab: self.user_vocab,
            request_vocab: self.request_vocab,
            pctr_residual: self.pctr_residual,
        }
    }

    pub fn mu_config(&self) -> MuConfig {
        MuConfig {
            inputs: self.mu_inputs.clone(),
            hidden: self.mu_hidden.clone(),
        }
    }
}

/// Parameters plus the handles of both networks.
#[derive(Debug, Clone)]
pub struct NmaModel {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub clpm: Clpm,
    pub mu: MuNet,
}

impl NmaModel {
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, u64::MAX - 1);
        let mut store = ParamStore::new();
        let clpm = Clpm::init(&mut store, config.clpm_config(), &mut rng)?;
        let mu = MuNet::init(&mut store, config.mu_config(), config.embed_dim, &mut rng)?;
        Ok(Self {
            config,
            store,
            clpm,
            mu,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    pub fn load(config: TrainConfig, path: &Path) -> Result<Self> {
        let mut m = Self::init(config)?;
        let loaded = checkpoint::load(path)?;
        checkpoint::restore_into(&mut m.store, &loaded)?;
        Ok(m)
    }

    pub fn allocation_set(&self, inst: &AuctionInstance) -> Result<std::sync::Arc<AllocationSet>> {
        AllocationSet::shared(inst.n_ads(), self.config.slots, self.config.max_allocations)
    }

    /// `L×K` CTR table for every list of `set` (value only).
    pub fn q_table(&self, inst: &AuctionInstance, set: &AllocationSet) -> Result<Tensor> {
        match self.config.ctr_model {
            CtrModel::Clpm => self.clpm.predict_all(&self.store, inst, set),
            CtrModel::Pointwise => pointwise_table(inst, set),
        }
    }

    /// Per-ad multipliers (value only).
    pub fn mu_values(&self, inst: &AuctionInstance) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let e = self.clpm.ad_embeddings(&mut g, inst)?;
        let mu = self.mu.forward(&mut g, inst, e)?;
        Ok(g.value(mu).data().to_vec())
    }

    /// Bid-independent auction state under the learned rule.
    pub fn prepare(&self, inst: &AuctionInstance) -> Result<PreparedAuction> {
        let set = self.allocation_set(inst)?;
        let q = self.q_table(inst, &set)?;
        let mu = self.mu_values(inst)?;
        PreparedAuction::new(set, q, mu, vec![1.0; self.config.slots])
    }
}

/// Each ad's point-wise pCTR in every slot, blind to position and context.
pub fn pointwise_table(inst: &AuctionInstance, set: &AllocationSet) -> Result<Tensor> {
    let pw = inst.pointwise();
    Tensor::new([set.len(), set.k()], set.flat().iter().map(|&a| pw[a]).collect())
}

/// Loss terms of one batch (means over instances).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_tgt: f64,
    pub l_ce: f64,
    pub l_list: f64,
    pub alpha_ce: f64,
    pub alpha_list: f64,
}

impl LossBreakdown {
    pub fn combine(l_tgt: f64, l_ce: f64, l_list: f64, alpha_ce: f64, alpha_list: f64) -> Self {
        Self {
            total: l_tgt + alpha_ce * l_ce + alpha_list * l_list,
            l_tgt,
            l_ce,
            l_list,
            alpha_ce,
            alpha_list,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Only the list-wise CTR loss on logged displays.
    CtrOnly,
    /// The combined objective.
    Joint,
}

/// Graph nodes of every loss term for one instance.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub l_tgt: Option<Var>,
    pub l_ce: Option<Var>,
    pub l_list: Option<Var>,
}

/// Builds the loss of one instance on `g`.
pub fn instance_loss(g: &mut Graph, model: &NmaModel, inst: &AuctionInstance, phase: Phase) -> Result<LossNodes> {
    let cfg = &model.config;
    let labelled = match (&inst.logged, &inst.clicks) {
        (Some(a), Some(c)) if cfg.ctr_model == CtrModel::Clpm => Some((a, c)),
        _ => None,
    };
    let reps = model.clpm.ad_representations(g, inst)?;

    if phase == Phase::CtrOnly {
        let (alloc, clicks) = labelled.ok_or_else(|| NmaError::InvalidInstance {
            id: inst.id,
            reason: "CTR training needs a logged display with clicks".into(),
        })?;
        let q = model.clpm.predict_lists(g, &reps, alloc.slots())?;
        let l = list_ctr_loss(g, q, clicks)?;
        return Ok(LossNodes {
            total: l,
            l_tgt: None,
            l_ce: None,
            l_list: Some(l),
        });
    }

    let set = model.allocation_set(inst)?;
    let q = match cfg.ctr_model {
        CtrModel::Clpm => model.clpm.predict_lists(g, &reps, set.flat())?,
        CtrModel::Pointwise => g.input(pointwise_table(inst, &set)?)?,
    };
    let q_mech = if cfg.detach_ctr { g.input(g.value(q).clone())? } else { q };
    let mu = model.mu.forward(g, inst, reps.embedding)?;
    let bids: Vec<f64> = inst.bids().iter().map(|b| b * cfg.value_scale).collect();
    let scored = score_lists(g, &set, q_mech, mu, &bids)?;
    let full = cfg.alpha_ce > 0.0;
    let m_hat = soft_sort_rows(g, scored.rs, cfg.tau, full)?;
    let l_tgt = revenue_loss(g, m_hat, scored.revenue)?;
    let mut total = l_tgt;
    let mut l_ce = None;
    if full {
        let order = welfare_order(&set, &bids, g.value(q));
        let ce = welfare_ce_loss(g, m_hat, &order)?;
        let w = g.scale(ce, cfg.alpha_ce)?;
        total = g.add(total, w)?;
        l_ce = Some(ce);
    }
    let mut l_list = None;
    if let Some((alloc, clicks)) = labelled {
        let idx = set.index_of(alloc).ok_or_else(|| NmaError::InvalidInstance {
            id: inst.id,
            reason: "logged display is not a candidate list".into(),
        })?;
        let q_logged = g.gather_rows(q, &[idx])?;
        let ll = list_ctr_loss(g, q_logged, clicks)?;
        if cfg.alpha_list > 0.0 {
            let w = g.scale(ll, cfg.alpha_list)?;
            total = g.add(total, w)?;
        }
        l_list = Some(ll);
    }
    Ok(LossNodes {
        total,
        l_tgt: Some(l_tgt),
        l_ce,
        l_list,
    })
}

struct StepResult {
    grads: Gradients,
    l_tgt: f64,
    l_ce: f64,
    l_list: f64,
}

fn instance_step(model: &NmaModel, inst: &AuctionInstance, phase: Phase) -> Result<StepResult> {
    let mut g = Graph::new(&model.store);
    let nodes = instance_loss(&mut g, model, inst, phase)?;
    let back = g.backward(nodes.total)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    Ok(StepResult {
        grads: back.params,
        l_tgt: val(nodes.l_tgt),
        l_ce: val(nodes.l_ce),
        l_list: val(nodes.l_list),
    })
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: &'static str,
    pub loss: f64,
    pub l_tgt: f64,
    pub l_ce: f64,
    pub l_list: f64,
    pub eval_rpm: Option<f64>,
    pub eval_swpm: Option<f64>,
}

/// Hook called after every epoch; returns optional eval (RPM, SWPM).
pub type EpochEval<'a> = dyn Fn(&NmaModel) -> Result<(f64, f64)> + Sync + 'a;

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub mode: ExecMode,
    /// Directory for per-epoch and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    pub eval: Option<&'a EpochEval<'a>>,
}

pub struct TrainOutcome {
    pub model: NmaModel,
    pub curve: Vec<EpochRecord>,
}

/// Trains a fresh model on `train`. Deterministic given `config.seed`,
/// regardless of thread count.
pub fn train(train: &[AuctionInstance], config: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let model = NmaModel::init(config.clone())?;
    train_from(model, train, opts)
}

/// Continues training `model` with its own config.
pub fn train_from(mut model: NmaModel, train: &[AuctionInstance], opts: &TrainOptions) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(NmaError::InvalidConfig("empty training set".into()));
    }
    let cfg = model.config.clone();
    let mut adam = AdamState::new(&model.store, cfg.lr);
    adam.weight_decay = cfg.weight_decay;
    let mut curve = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let ctr_phase_epochs = if cfg.ctr_model == CtrModel::Clpm { cfg.clpm_pretrain_epochs } else { 0 };
    let mut step = 0usize;
    for epoch in 0..ctr_phase_epochs + cfg.epochs {
        let phase = if epoch < ctr_phase_epochs { Phase::CtrOnly } else { Phase::Joint };
        let mut pool: Vec<usize> = match phase {
            Phase::CtrOnly => (0..train.len())
                .filter(|&i| train[i].logged.is_some() && train[i].clicks.is_some())
                .collect(),
            Phase::Joint => (0..train.len()).collect(),
        };
        pool.shuffle(&mut rng_for(cfg.seed, epoch as u64));
        let (mut sums, mut count) = ([0.0f64; 3], 0usize);
        for batch in pool.chunks(cfg.batch_size) {
            let results = par::map(opts.mode, batch, |&i| instance_step(&model, &train[i], phase));
            let mut grads = Gradients::new();
            for r in results {
                let r = match r {
                    Ok(r) => r,
                    Err(NmaError::NonFinite { .. }) => {
                        return Err(NmaError::Diverged { step, last_good });
                    }
                    Err(e) => return Err(e),
                };
                grads.accumulate(&r.grads);
                sums[0] += r.l_tgt;
                sums[1] += r.l_ce;
                sums[2] += r.l_list;
                count += 1;
            }
            grads.scale(1.0 / batch.len() as f64);
            if phase == Phase::Joint && cfg.freeze_clpm {
                grads.remove_prefix(&model.store, "clpm.");
            }
            if grads.first_non_finite().is_some() {
                return Err(NmaError::Diverged { step, last_good });
            }
            adam.step(&mut model.store, &grads)?;
            step += 1;
        }
        let n = count.max(1) as f64;
        let (l_tgt, l_ce, l_list) = (sums[0] / n, sums[1] / n, sums[2] / n);
        let lb = match phase {
            Phase::CtrOnly => LossBreakdown::combine(0.0, 0.0, l_list, 0.0, 1.0),
            Phase::Joint => LossBreakdown::combine(l_tgt, l_ce, l_list, cfg.alpha_ce, cfg.alpha_list),
        };
        if !lb.total.is_finite() {
            return Err(NmaError::Diverged { step, last_good });
        }
        let eval = match opts.eval {
            Some(f) => Some(f(&model)?),
            None => None,
        };
        log::info!(
            "epoch {epoch} ({}) loss {:.6} tgt {:.6} ce {:.6} list {:.6}",
            phase_name(phase),
            lb.total,
            l_tgt,
            l_ce,
            l_list
        );
        curve.push(EpochRecord {
            epoch,
            phase: phase_name(phase),
            loss: lb.total,
            l_tgt,
            l_ce,
            l_list,
            eval_rpm: eval.map(|e| e.0),
            eval_swpm: eval.map(|e| e.1),
        });
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join(format!("epoch-{epoch:03}.json"));
            model.save(&path)?;
            last_good = Some(path);
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        model.save(&dir.join("final.json"))?;
    }
    Ok(TrainOutcome { model, curve })
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::CtrOnly => "ctr",
        Phase::Joint => "joint",
    }
}

/// Writes the loss curve as CSV.
pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "phase", "loss", "l_tgt", "l_ce", "l_list", "eval_rpm", "eval_swpm"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in curve {
        w.write_record([
            r.epoch.to_string(),
            r.phase.to_string(),
            format!("{}", r.loss),
            format!("{}", r.l_tgt),
            format!("{}", r.l_ce),
            format!("{}", r.l_list),
            opt(r.eval_rpm),
            opt(r.eval_swpm),
        ])?;
    }
    w.flush()?;
    Ok(())
}
