//! Synthetic auction environment: a ground-truth click model with position
//! and ad-context externalities, bid sampling, GSP logging and dataset
//! generation.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::auction::{
    io, Ad, Allocation, AuctionConfig, AuctionInstance, OrganicItem, SCHEMA_VERSION,
};
use crate::error::{NmaError, Result};
use crate::par::{self, ExecMode};

pub const CTR_FLOOR: f64 = 1e-6;

/// Derives an independent stream seed from `(seed, index)` (splitmix64).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogAd {
    pub id: u64,
    pub category: u64,
    pub brand: u64,
    /// Slot-1, context-free click probability.
    pub attractiveness: f64,
}

/// Ground-truth user click model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickModel {
    pub seed: u64,
    /// Position multipliers γ₁ ≥ … ≥ γ_K > 0.
    pub position: Vec<f64>,
    /// Strength of the penalty for feature overlap with co-displayed ads.
    pub lambda: f64,
    pub catalog: Vec<CatalogAd>,
    #[serde(skip)]
    lookup: HashMap<u64, usize>,
}

impl ClickModel {
    pub fn new(seed: u64, position: Vec<f64>, lambda: f64, catalog: Vec<CatalogAd>) -> Result<Self> {
        if position.is_empty()
            || position.iter().any(|&g| !(g > 0.0))
            || position.windows(2).any(|w| w[1] > w[0])
        {
            return Err(NmaError::InvalidConfig(format!(
                "position multipliers must be positive and non-increasing: {position:?}"
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(NmaError::InvalidConfig(format!("lambda {lambda} outside [0,1]")));
        }
        for c in &catalog {
            if !(c.attractiveness > 0.0 && c.attractiveness < 1.0) {
                return Err(NmaError::InvalidConfig(format!(
                    "catalog ad {} attractiveness {} outside (0,1)",
                    c.id, c.attractiveness
                )));
            }
        }
        let mut m = Self {
            seed,
            position,
            lambda,
            catalog,
            lookup: HashMap::new(),
        };
        m.reindex();
        Ok(m)
    }

    fn reindex(&mut self) {
        self.lookup = self
            .catalog
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, i))
            .collect();
    }

    /// Builds the catalog from `spec`, deterministically in `seed`.
    pub fn generate(spec: &GenSpec, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, u64::MAX);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let cat_q: Vec<f64> = (0..spec.categories)
            .map(|_| (spec.category_spread * std_normal.sample(&mut rng)).exp())
            .collect();
        let brand_q: Vec<f64> = (0..spec.brands)
            .map(|_| (spec.brand_spread * std_normal.sample(&mut rng)).exp())
            .collect();
        let catalog = (0..spec.catalog_size as u64)
            .map(|id| {
                let category = rng.random_range(0..spec.categories as u64);
                let brand = rng.random_range(0..spec.brands as u64);
                let idio = (spec.ad_spread * std_normal.sample(&mut rng)).exp();
                let a = spec.base_ctr * cat_q[category as usize] * brand_q[brand as usize] * idio;
                CatalogAd {
                    id,
                    category,
                    brand,
                    attractiveness: a.clamp(1e-4, 0.5),
                }
            })
            .collect();
        let position = (0..spec.slots)
            .map(|s| spec.position_decay.powi(s as i32))
            .collect();
        Self::new(seed, position, spec.lambda, catalog)
    }

    pub fn attractiveness(&self, ad_id: u64) -> Result<f64> {
        self.lookup
            .get(&ad_id)
            .map(|&i| self.catalog[i].attractiveness)
            .ok_or_else(|| NmaError::Format(format!("ad {ad_id} is not in the click-model catalog")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m: ClickModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.reindex();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Fraction of shared categorical features (category, brand).
pub fn feature_overlap(a: &Ad, b: &Ad) -> f64 {
    let shared = u8::from(a.category == b.category) + u8::from(a.brand == b.brand);
    f64::from(shared) / 2.0
}

/// Multiplier applied to the ad in `slot` for the other displayed ads.
pub fn context_factor(lambda: f64, alloc: &Allocation, slot: usize, instance: &AuctionInstance) -> f64 {
    let k = alloc.len();
    if k <= 1 || lambda == 0.0 {
        return 1.0;
    }
    let me = &instance.ads[alloc.slots()[slot]];
    let total: f64 = alloc
        .slots()
        .iter()
        .enumerate()
        .filter(|&(s, _)| s != slot)
        .map(|(_, &o)| feature_overlap(me, &instance.ads[o]))
        .sum();
    (1.0 - lambda * total / (k - 1) as f64).clamp(0.5, 1.0)
}

/// True click probability of every slot of `alloc`.
pub fn true_ctr(model: &ClickModel, alloc: &Allocation, instance: &AuctionInstance) -> Result<Vec<f64>> {
    alloc
        .slots()
        .iter()
        .enumerate()
        .map(|(s, &ad)| {
            let gamma = *model.position.get(s).ok_or_else(|| {
                NmaError::InvalidConfig(format!("click model has no multiplier for slot {}", s + 1))
            })?;
            let a = model.attractiveness(instance.ads[ad].id)?;
            let p = a * gamma * context_factor(model.lambda, alloc, s, instance);
            Ok(p.clamp(CTR_FLOOR, 1.0 - CTR_FLOOR))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LoggingPolicy {
    /// Top-K by bid × pointwise pCTR, in descending order.
    #[default]
    Gsp,
    /// Uniformly random ordered K-selection.
    Random,
}

/// Dataset generation recipe; loaded from a flat TOML key-value file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub instances: usize,
    pub train_fraction: f64,
    /// N for the training split.
    pub ads: usize,
    /// N for the test split (defaults to `ads`).
    pub eval_ads: Option<usize>,
    pub slots: usize,
    pub organic: usize,
    pub bid_low: f64,
    pub bid_high: f64,
    pub logging: LoggingPolicy,
    /// σ of the log-normal multiplicative noise on pointwise pCTR.
    pub pctr_noise: f64,
    pub users: u64,
    pub request_contexts: u64,
    pub organic_pool: u64,
    pub catalog_size: usize,
    pub categories: usize,
    pub brands: usize,
    pub base_ctr: f64,
    pub category_spread: f64,
    pub brand_spread: f64,
    pub ad_spread: f64,
    pub position_decay: f64,
    pub lambda: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            instances: 60_000,
            train_fraction: 5.0 / 6.0,
            ads: 8,
            eval_ads: Some(10),
            slots: 2,
            organic: 4,
            bid_low: 0.5,
            bid_high: 1.5,
            logging: LoggingPolicy::Gsp,
            pctr_noise: 0.2,
            users: 2_000,
            request_contexts: 24,
            organic_pool: 500,
            catalog_size: 200,
            categories: 6,
            brands: 30,
            base_ctr: 0.05,
            category_spread: 0.5,
            brand_spread: 0.3,
            ad_spread: 0.2,
            position_decay: 0.6,
            lambda: 0.5,
        }
    }
}

impl GenSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GenSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_count(&self) -> usize {
        ((self.instances as f64) * self.train_fraction).round() as usize
    }

    pub fn eval_ads(&self) -> usize {
        self.eval_ads.unwrap_or(self.ads)
    }

    pub fn auction_config(&self, ads: usize) -> AuctionConfig {
        AuctionConfig {
            ads,
            slots: self.slots,
            organic: self.organic,
            ..AuctionConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NmaError::InvalidConfig(m));
        if self.instances == 0 {
            return bad("instances must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0,1)", self.train_fraction));
        }
        if !(self.bid_low > 0.0 && self.bid_high > self.bid_low) {
            return bad(format!("bad bid range [{}, {}]", self.bid_low, self.bid_high));
        }
        if self.catalog_size < self.ads.max(self.eval_ads()) {
            return bad("catalog smaller than the ads per request".into());
        }
        if self.categories == 0 || self.brands == 0 || self.users == 0 || self.request_contexts == 0 {
            return bad("feature cardinalities must be positive".into());
        }
        if !(self.position_decay > 0.0 && self.position_decay <= 1.0) {
            return bad(format!("position_decay {} outside (0,1]", self.position_decay));
        }
        self.auction_config(self.ads).validate()?;
        self.auction_config(self.eval_ads()).validate()
    }
}

/// Train/test split together with the click model that generated it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub model: ClickModel,
    pub train: Vec<AuctionInstance>,
    pub test: Vec<AuctionInstance>,
}

impl Dataset {
    pub const TRAIN_FILE: &'static str = "train.jsonl";
    pub const TEST_FILE: &'static str = "test.jsonl";
    pub const MODEL_FILE: &'static str = "click_model.json";

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::save_jsonl(&dir.join(Self::TRAIN_FILE), &self.train)?;
        io::save_jsonl(&dir.join(Self::TEST_FILE), &self.test)?;
        self.model.save(&dir.join(Self::MODEL_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model_path = dir.join(Self::MODEL_FILE);
        if !model_path.exists() {
            return Err(NmaError::MissingOracle);
        }
        Ok(Self {
            model: ClickModel::load(&model_path)?,
            train: io::load_jsonl(&dir.join(Self::TRAIN_FILE))?,
            test: io::load_jsonl(&dir.join(Self::TEST_FILE))?,
        })
    }
}

fn gsp_display(ads: &[Ad], k: usize) -> Allocation {
    let mut order: Vec<usize> = (0..ads.len()).collect();
    let ecpm = |i: usize| ads[i].bid * ads[i].pointwise_pctr;
    order.sort_by(|&a, &b| ecpm(b).total_cmp(&ecpm(a)).then(a.cmp(&b)));
    order.truncate(k);
    Allocation(order)
}

fn generate_instance(spec: &GenSpec, model: &ClickModel, seed: u64, index: usize, n_ads: usize) -> Result<AuctionInstance> {
    let mut rng = rng_for(seed, index as u64);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let picks = sample(&mut rng, model.catalog.len(), n_ads);
    let ads: Vec<Ad> = picks
        .iter()
        .map(|ci| {
            let c = &model.catalog[ci];
            let bid = rng.random_range(spec.bid_low..spec.bid_high);
            let noise = (spec.pctr_noise * std_normal.sample(&mut rng)).exp();
            Ad {
                id: c.id,
                category: c.category,
                brand: c.brand,
                bid,
                pointwise_pctr: (c.attractiveness * noise).clamp(CTR_FLOOR, 1.0 - CTR_FLOOR),
                true_value: bid,
            }
        })
        .collect();
    let organic = (0..spec.organic)
        .map(|_| {
            let id = rng.random_range(0..spec.organic_pool);
            OrganicItem {
                id,
                category: id % spec.categories as u64,
            }
        })
        .collect();
    let user_id = rng.random_range(0..spec.users);
    let request_ctx = rng.random_range(0..spec.request_contexts);
    let logged = match spec.logging {
        LoggingPolicy::Gsp => gsp_display(&ads, spec.slots),
        LoggingPolicy::Random => {
            Allocation(sample(&mut rng, n_ads, spec.slots).into_iter().collect())
        }
    };
    let mut inst = AuctionInstance {
        schema_version: SCHEMA_VERSION,
        id: index as u64,
        slots: spec.slots,
        ads,
        organic,
        user_id,
        request_ctx,
        logged: Some(logged.clone()),
        clicks: None,
    };
    let probs = true_ctr(model, &logged, &inst)?;
    inst.clicks = Some(
        probs
            .iter()
            .map(|&p| u8::from(rng.random::<f64>() < p))
            .collect(),
    );
    Ok(inst)
}

/// Generates the train/test split. Instance `i` draws from its own stream
/// `(seed, i)`, so output is independent of thread count.
pub fn generate_dataset(spec: &GenSpec, model: &ClickModel, seed: u64, mode: ExecMode) -> Result<Dataset> {
    spec.validate()?;
    let n_train = spec.train_count().min(spec.instances);
    let insts = par::map_range(mode, spec.instances, |i| {
        let n = if i < n_train { spec.ads } else { spec.eval_ads() };
        generate_instance(spec, model, seed, i, n)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut train = insts;
    let test = train.split_off(n_train);
    Ok(Dataset {
        model: model.clone(),
        train,
        test,
    })
}

/// Convenience: catalog + dataset from one seed.
pub fn generate(spec: &GenSpec, seed: u64, mode: ExecMode) -> Result<Dataset> {
    let model = ClickModel::generate(spec, seed)?;
    generate_dataset(spec, &model, seed, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst_with(ads: Vec<(u64, u64, u64)>) -> AuctionInstance {
        AuctionInstance {
            schema_version: SCHEMA_VERSION,
            id: 0,
            slots: 2,
            ads: ads
                .into_iter()
                .map(|(id, category, brand)| Ad {
                    id,
                    category,
                    brand,
                    bid: 1.0,
                    pointwise_pctr: 0.1,
                    true_value: 1.0,
                })
                .collect(),
            organic: vec![],
            user_id: 0,
            request_ctx: 0,
            logged: None,
            clicks: None,
        }
    }

    fn model(position: Vec<f64>, lambda: f64) -> ClickModel {
        let catalog = vec![
            CatalogAd { id: 0, category: 0, brand: 0, attractiveness: 0.2 },
            CatalogAd { id: 1, category: 0, brand: 1, attractiveness: 0.1 },
            CatalogAd { id: 2, category: 1, brand: 2, attractiveness: 0.3 },
        ];
        ClickModel::new(1, position, lambda, catalog).unwrap()
    }

    #[test]
    fn no_externalities_gives_base_attractiveness() {
        let m = model(vec![1.0, 1.0], 0.0);
        let inst = inst_with(vec![(0, 0, 0), (1, 0, 1), (2, 1, 2)]);
        let p = true_ctr(&m, &Allocation(vec![0, 1]), &inst).unwrap();
        assert_eq!(p, vec![0.2, 0.1]);
        let q = true_ctr(&m, &Allocation(vec![1, 0]), &inst).unwrap();
        assert_eq!(q, vec![0.1, 0.2]);
    }

    #[test]
    fn demotion_halves_probability() {
        let m = model(vec![1.0, 0.5], 0.0);
        let inst = inst_with(vec![(0, 0, 0), (1, 0, 1), (2, 1, 2)]);
        let top = true_ctr(&m, &Allocation(vec![0, 2]), &inst).unwrap();
        let swapped = true_ctr(&m, &Allocation(vec![2, 0]), &inst).unwrap();
        assert!((swapped[1] - top[0] / 2.0).abs() < 1e-15);
    }

    #[test]
    fn overlap_penalizes_similar_neighbours() {
        let m = model(vec![1.0, 1.0], 0.5);
        let inst = inst_with(vec![(0, 0, 0), (1, 0, 1), (2, 1, 2)]);
        // ads 0 and 1 share a category: overlap 0.5, factor 0.75
        let p = true_ctr(&m, &Allocation(vec![0, 1]), &inst).unwrap();
        assert!((p[0] - 0.2 * 0.75).abs() < 1e-15);
        let q = true_ctr(&m, &Allocation(vec![0, 2]), &inst).unwrap();
        assert!((q[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_increasing_positions() {
        assert!(ClickModel::new(0, vec![0.5, 1.0], 0.0, vec![]).is_err());
        assert!(ClickModel::new(0, vec![1.0, 0.0], 0.0, vec![]).is_err());
    }

    #[test]
    fn gen_spec_parses_flat_toml() {
        let spec = GenSpec::from_toml("instances = 100\nads = 5\neval_ads = 6\nlambda = 0.0\n").unwrap();
        assert_eq!(spec.instances, 100);
        assert_eq!(spec.eval_ads(), 6);
        assert!(GenSpec::from_toml("instances = 0").is_err());
        assert!(GenSpec::from_toml("bogus = 1").is_err());
    }
}
