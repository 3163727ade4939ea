//! Context-aware list-wise CTR prediction.
//!
//! Per request the model embeds ads, organic items, the user and the request
//! context; lets organic items attend to each other; lets every ad attend to
//! the organic sequence; then scores a whole displayed list at once so every
//! slot's prediction sees the position and the co-displayed ads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{Allocation, AllocationSet, AuctionInstance};
use crate::autodiff::{Dense, Graph, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::error::{NmaError, Result};
use crate::synth::derive_seed;

pub const DEFAULT_HASH_ROWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClpmConfig {
    pub embed_dim: usize,
    pub slots: usize,
    pub att_hidden: Vec<usize>,
    pub list_hidden: Vec<usize>,
    /// Rows per hashed embedding table; the last row is the out-of-vocabulary row.
    pub hash_rows: usize,
    /// Ids at or above these bounds use the out-of-vocabulary row.
    pub user_vocab: u64,
    pub request_vocab: u64,
    /// Add each slot's point-wise pCTR logit to the head output, so the
    /// network learns a list-wise correction to the point-wise estimate.
    pub pctr_residual: bool,
}

impl Default for ClpmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            slots: 2,
            att_hidden: vec![16, 1],
            list_hidden: vec![32, 16, 8],
            hash_rows: DEFAULT_HASH_ROWS,
            user_vocab: 2_000,
            request_vocab: 24,
            pctr_residual: true,
        }
    }
}

impl ClpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.slots == 0 || self.hash_rows < 2 {
            return Err(NmaError::InvalidConfig(
                "clpm needs d > 0, K > 0 and at least 2 hash rows".into(),
            ));
        }
        if self.att_hidden.last() != Some(&1) {
            return Err(NmaError::InvalidConfig(
                "attention MLP must end in a single output".into(),
            ));
        }
        if self.list_hidden.is_empty() || self.list_hidden.contains(&0) {
            return Err(NmaError::InvalidConfig("list MLP needs non-empty positive sizes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    AdId,
    Category,
    Brand,
    OrganicId,
    OrganicCategory,
    User,
    Request,
}

const FIELDS: [(Field, &str); 7] = [
    (Field::AdId, "ad_id"),
    (Field::Category, "category"),
    (Field::Brand, "brand"),
    (Field::OrganicId, "organic_id"),
    (Field::OrganicCategory, "organic_category"),
    (Field::User, "user"),
    (Field::Request, "request"),
];

/// Parameter handles of the list-wise predictor.
#[derive(Debug, Clone)]
pub struct Clpm {
    pub config: ClpmConfig,
    tables: Vec<ParamId>,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    att: Mlp,
    list: Mlp,
    heads: Dense,
}

/// Per-request intermediate values shared by every candidate list.
#[derive(Debug, Clone, Copy)]
pub struct AdReps {
    /// `N×d` ad embeddings.
    pub embedding: Var,
    /// `N×(2d+1)`: embedding, target-attention output, pointwise pCTR logit.
    pub reps: Var,
    /// `1×2d`: user and request embeddings.
    pub context: Var,
    /// `N×1` point-wise pCTR logits.
    pub pctr_logit: Var,
}

impl Clpm {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: ClpmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let emb_std = 0.1;
        let tables = FIELDS
            .iter()
            .map(|(_, name)| store.insert_random(format!("clpm.emb.{name}"), config.hash_rows, d, emb_std, rng))
            .collect();
        let proj_std = (1.0 / d as f64).sqrt();
        let w_q = store.insert_random("clpm.w_q", d, d, proj_std, rng);
        let w_k = store.insert_random("clpm.w_k", d, d, proj_std, rng);
        let w_v = store.insert_random("clpm.w_v", d, d, proj_std, rng);
        let att = Mlp::init(store, "clpm.att", 2 * d, &config.att_hidden, rng);
        let list = Mlp::init(store, "clpm.list", config.slots * (2 * d + 1), &config.list_hidden, rng);
        let heads = Dense::init(store, "clpm.heads", list.outputs() + 2 * d, config.slots, rng);
        Ok(Self {
            config,
            tables,
            w_q,
            w_k,
            w_v,
            att,
            list,
            heads,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn table(&self, f: Field) -> ParamId {
        let i = FIELDS.iter().position(|(x, _)| *x == f).expect("known field");
        self.tables[i]
    }

    fn bucket(&self, field: Field, id: u64) -> usize {
        let vocab = match field {
            Field::User => Some(self.config.user_vocab),
            Field::Request => Some(self.config.request_vocab),
            _ => None,
        };
        let oov = self.config.hash_rows - 1;
        if vocab.is_some_and(|v| id >= v) {
            return oov;
        }
        (derive_seed(field as u64, id) % oov as u64) as usize
    }

    fn lookup(&self, g: &mut Graph, field: Field, ids: impl Iterator<Item = u64>) -> Result<Var> {
        let rows: Vec<usize> = ids.map(|id| self.bucket(field, id)).collect();
        g.embed(self.table(field), &rows)
    }

    /// `N×d` ad embeddings: the sum of id, category and brand embeddings.
    pub fn ad_embeddings(&self, g: &mut Graph, inst: &AuctionInstance) -> Result<Var> {
        let id = self.lookup(g, Field::AdId, inst.ads.iter().map(|a| a.id))?;
        let cat = self.lookup(g, Field::Category, inst.ads.iter().map(|a| a.category))?;
        let brand = self.lookup(g, Field::Brand, inst.ads.iter().map(|a| a.brand))?;
        let s = g.add(id, cat)?;
        g.add(s, brand)
    }

    /// `M×d` organic embeddings, `None` when the request has no organic items.
    pub fn organic_embeddings(&self, g: &mut Graph, inst: &AuctionInstance) -> Result<Option<Var>> {
        if inst.organic.is_empty() {
            return Ok(None);
        }
        let id = self.lookup(g, Field::OrganicId, inst.organic.iter().map(|o| o.id))?;
        let cat = self.lookup(g, Field::OrganicCategory, inst.organic.iter().map(|o| o.category))?;
        g.add(id, cat).map(Some)
    }

    /// Scaled dot-product self-attention over the organic items.
    pub fn self_attend_organic(&self, g: &mut Graph, e_oi: Var) -> Result<Var> {
        let wq = g.param(self.w_q)?;
        let wk = g.param(self.w_k)?;
        let wv = g.param(self.w_v)?;
        let q = g.matmul(e_oi, wq)?;
        let k = g.matmul(e_oi, wk)?;
        let v = g.matmul(e_oi, wv)?;
        let logits = g.matmul_t(q, k)?;
        let logits = g.scale(logits, 1.0 / (self.embed_dim() as f64).sqrt())?;
        let weights = g.softmax_rows(logits)?;
        g.matmul(weights, v)
    }

    /// `h_j = Σ_i e_j · MLP_att(e_j | h_i)` for every ad row of `e_ad`.
    /// Zero vectors when there are no organic items.
    pub fn target_attend(&self, g: &mut Graph, e_ad: Var, h_oi: Option<Var>) -> Result<Var> {
        let [n, d] = g.shape(e_ad);
        let Some(h_oi) = h_oi else {
            return g.input(Tensor::zeros(n, d));
        };
        let m = g.shape(h_oi)[0];
        let ad_idx: Vec<usize> = (0..n).flat_map(|j| std::iter::repeat_n(j, m)).collect();
        let oi_idx: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
        let left = g.gather_rows(e_ad, &ad_idx)?;
        let right = g.gather_rows(h_oi, &oi_idx)?;
        let pairs = g.concat(&[left, right])?;
        let w = self.att.forward(g, pairs)?;
        let w = g.reshape(w, [n, m])?;
        let total = g.sum_cols(w)?;
        g.mul(e_ad, total)
    }

    /// Everything about the request that does not depend on the list order.
    pub fn ad_representations(&self, g: &mut Graph, inst: &AuctionInstance) -> Result<AdReps> {
        let embedding = self.ad_embeddings(g, inst)?;
        let h_oi = match self.organic_embeddings(g, inst)? {
            Some(e_oi) => Some(self.self_attend_organic(g, e_oi)?),
            None => None,
        };
        let h_ad = self.target_attend(g, embedding, h_oi)?;
        let ctr = g.input(Tensor::column(inst.pointwise().into_iter().map(ctr_logit).collect()))?;
        let reps = g.concat(&[embedding, h_ad, ctr])?;
        let user = self.lookup(g, Field::User, std::iter::once(inst.user_id))?;
        let request = self.lookup(g, Field::Request, std::iter::once(inst.request_ctx))?;
        let context = g.concat(&[user, request])?;
        Ok(AdReps {
            embedding,
            reps,
            context,
            pctr_logit: ctr,
        })
    }

    /// `L×K` predicted CTRs for the lists given as row-major `L×K` ad indices.
    pub fn predict_lists(&self, g: &mut Graph, reps: &AdReps, flat: &[usize]) -> Result<Var> {
        let k = self.config.slots;
        if flat.len() % k != 0 {
            return Err(NmaError::ShapeMismatch {
                op: "predict_lists",
                left: [flat.len() / k, k],
                right: [1, flat.len()],
            });
        }
        let l = flat.len() / k;
        let parts = (0..k)
            .map(|s| {
                let idx: Vec<usize> = (0..l).map(|i| flat[i * k + s]).collect();
                g.gather_rows(reps.reps, &idx)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = g.concat(&parts)?;
        let e_list = self.list.forward(g, x)?;
        let ctx = g.gather_rows(reps.context, &vec![0; l])?;
        let z = g.concat(&[e_list, ctx])?;
        let mut logits = self.heads.forward(g, z)?;
        if self.config.pctr_residual {
            let cols = (0..k)
                .map(|s| {
                    let idx: Vec<usize> = (0..l).map(|i| flat[i * k + s]).collect();
                    g.gather_rows(reps.pctr_logit, &idx)
                })
                .collect::<Result<Vec<_>>>()?;
            let base = g.concat(&cols)?;
            logits = g.add(logits, base)?;
        }
        g.sigmoid(logits)
    }

    /// Predicted CTR of each slot of `alloc` (value only).
    pub fn predict_list_ctr(&self, store: &ParamStore, inst: &AuctionInstance, alloc: &Allocation) -> Result<Vec<f64>> {
        self.check_alloc(inst, alloc)?;
        let mut g = Graph::new(store);
        let reps = self.ad_representations(&mut g, inst)?;
        let q = self.predict_lists(&mut g, &reps, alloc.slots())?;
        Ok(g.value(q).data().to_vec())
    }

    /// `L×K` predictions for every list in `set` (value only).
    pub fn predict_all(&self, store: &ParamStore, inst: &AuctionInstance, set: &AllocationSet) -> Result<Tensor> {
        if set.n() != inst.n_ads() || set.k() != self.config.slots {
            return Err(NmaError::InvalidInstance {
                id: inst.id,
                reason: format!(
                    "allocation set is for N={} K={}, instance has N={} and model K={}",
                    set.n(),
                    set.k(),
                    inst.n_ads(),
                    self.config.slots
                ),
            });
        }
        let mut g = Graph::new(store);
        let reps = self.ad_representations(&mut g, inst)?;
        let q = self.predict_lists(&mut g, &reps, set.flat())?;
        Ok(g.value(q).clone())
    }

    fn check_alloc(&self, inst: &AuctionInstance, alloc: &Allocation) -> Result<()> {
        if alloc.len() != self.config.slots {
            return Err(NmaError::InvalidInstance {
                id: inst.id,
                reason: format!("list has {} slots, model expects {}", alloc.len(), self.config.slots),
            });
        }
        alloc.validate(inst.n_ads()).map_err(|reason| NmaError::InvalidInstance { id: inst.id, reason })
    }
}

/// Input encoding of a pointwise CTR. Raw probabilities near 0.05 would need
/// very large first-layer weights to move the output logit.
pub fn ctr_logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Summed binary cross-entropy of a `1×K` prediction against click labels.
pub fn list_ctr_loss(g: &mut Graph, q: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(q);
    if shape[0] * shape[1] != labels.len() {
        return Err(NmaError::ShapeMismatch {
            op: "list_ctr_loss",
            left: shape,
            right: [1, labels.len()],
        });
    }
    let y = Tensor::new(shape, labels.iter().map(|&v| f64::from(v)).collect())?;
    let one_minus_y = y.map(|v| 1.0 - v);
    let y = g.input(y)?;
    let one_minus_y = g.input(one_minus_y)?;
    let log_q = g.log(q)?;
    let neg_q = g.scale(q, -1.0)?;
    let one_minus_q = g.add_scalar(neg_q, 1.0)?;
    let log_1q = g.log(one_minus_q)?;
    let a = g.mul(y, log_q)?;
    let b = g.mul(one_minus_y, log_1q)?;
    let ll = g.add(a, b)?;
    let s = g.sum(ll)?;
    g.scale(s, -1.0)
}

/// Value-only counterpart of [`list_ctr_loss`].
pub fn bce(q: &[f64], labels: &[u8]) -> f64 {
    q.iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let y = f64::from(y);
            -(y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln())
        })
        .sum()
}

/// Area under the ROC curve with tied scores counted as one half.
/// Returns 0.5 when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            if labels[t] == 1 {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}
