use serde::{Deserialize, Serialize};

use crate::error::{NmaError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Decline threshold of social welfare relative to the welfare-maximizing list.
pub const SW_EPSILON: f64 = 0.05;

/// Default enumeration cap; large enough for N=10, K=3 (720 lists).
pub const DEFAULT_MAX_ALLOCATIONS: usize = 5_040;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuctionConfig {
    /// Candidate ads per request (N).
    pub ads: usize,
    /// Ad slots (K).
    pub slots: usize,
    /// Organic items per request (M).
    pub organic: usize,
    /// Embedding width (d).
    pub embed_dim: usize,
    /// Upper bound on N!/(N−K)!.
    pub max_allocations: usize,
    /// When the enumeration cap is exceeded, keep only this many ads ranked
    /// by bid × pointwise pCTR instead of failing.
    #[serde(default)]
    pub prefilter: Option<usize>,
}

impl Default for AuctionConfig {
    fn default() -> Self {
        Self {
            ads: 8,
            slots: 2,
            organic: 4,
            embed_dim: 8,
            max_allocations: DEFAULT_MAX_ALLOCATIONS,
            prefilter: None,
        }
    }
}

impl AuctionConfig {
    pub fn with_ads(mut self, ads: usize) -> Self {
        self.ads = ads;
        self
    }

    pub fn allocation_count(&self) -> Option<usize> {
        allocation_count(self.ads, self.slots)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.slots > self.ads {
            return Err(NmaError::InvalidConfig(format!(
                "need 1 <= K <= N, got N={} K={}",
                self.ads, self.slots
            )));
        }
        if self.embed_dim == 0 {
            return Err(NmaError::InvalidConfig("embedding width must be positive".into()));
        }
        let effective = match self.prefilter {
            Some(p) if p >= self.slots && p < self.ads => p,
            _ => self.ads,
        };
        match allocation_count(effective, self.slots) {
            Some(c) if c <= self.max_allocations => Ok(()),
            _ => Err(NmaError::TooManyAllocations {
                n: effective,
                k: self.slots,
                cap: self.max_allocations,
            }),
        }
    }
}

/// Number of ordered K-selections from N items, `None` on overflow.
pub fn allocation_count(n: usize, k: usize) -> Option<usize> {
    if k > n {
        return Some(0);
    }
    (n - k + 1..=n).try_fold(1usize, |acc, x| acc.checked_mul(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ad {
    pub id: u64,
    pub category: u64,
    pub brand: u64,
    /// Submitted value per click.
    pub bid: f64,
    /// Point-wise predicted CTR, blind to position and co-displayed ads.
    pub pointwise_pctr: f64,
    /// Private value per click; equals `bid` under truthful play.
    pub true_value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganicItem {
    pub id: u64,
    pub category: u64,
}

/// Ordered ad indices, slot 1 first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allocation(pub Vec<usize>);

impl Allocation {
    pub fn slots(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, ad: usize) -> bool {
        self.0.contains(&ad)
    }

    pub fn slot_of(&self, ad: usize) -> Option<usize> {
        self.0.iter().position(|&a| a == ad)
    }

    pub fn validate(&self, n: usize) -> Result<(), String> {
        for (i, &a) in self.0.iter().enumerate() {
            if a >= n {
                return Err(format!("ad index {a} out of range (N={n})"));
            }
            if self.0[..i].contains(&a) {
                return Err(format!("ad index {a} repeated"));
            }
        }
        Ok(())
    }
}

/// One page-view request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionInstance {
    pub schema_version: u32,
    pub id: u64,
    pub slots: usize,
    pub ads: Vec<Ad>,
    pub organic: Vec<OrganicItem>,
    pub user_id: u64,
    pub request_ctx: u64,
    #[serde(default)]
    pub logged: Option<Allocation>,
    #[serde(default)]
    pub clicks: Option<Vec<u8>>,
}

impl AuctionInstance {
    pub fn n_ads(&self) -> usize {
        self.ads.len()
    }

    pub fn bids(&self) -> Vec<f64> {
        self.ads.iter().map(|a| a.bid).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.ads.iter().map(|a| a.true_value).collect()
    }

    pub fn pointwise(&self) -> Vec<f64> {
        self.ads.iter().map(|a| a.pointwise_pctr).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| NmaError::InvalidInstance {
            id: self.id,
            reason,
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(NmaError::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        if self.slots == 0 || self.slots > self.ads.len() {
            return Err(bad(format!(
                "{} slots for {} ads",
                self.slots,
                self.ads.len()
            )));
        }
        for (i, ad) in self.ads.iter().enumerate() {
            if self.ads[..i].iter().any(|o| o.id == ad.id) {
                return Err(bad(format!("duplicate ad id {}", ad.id)));
            }
            if !(ad.bid > 0.0 && ad.bid.is_finite()) {
                return Err(bad(format!("ad {} has non-positive bid {}", ad.id, ad.bid)));
            }
            if !(ad.pointwise_pctr > 0.0 && ad.pointwise_pctr < 1.0) {
                return Err(bad(format!(
                    "ad {} pointwise pCTR {} outside (0,1)",
                    ad.id, ad.pointwise_pctr
                )));
            }
        }
        match (&self.logged, &self.clicks) {
            (Some(alloc), clicks) => {
                if alloc.len() != self.slots {
                    return Err(bad(format!("logged display has {} slots", alloc.len())));
                }
                alloc.validate(self.ads.len()).map_err(bad)?;
                if let Some(c) = clicks {
                    if c.len() != self.slots || c.iter().any(|&y| y > 1) {
                        return Err(bad("click labels must be K values in {0,1}".into()));
                    }
                }
            }
            (None, Some(_)) => return Err(bad("click labels without a logged display".into())),
            (None, None) => {}
        }
        Ok(())
    }
}

/// Social welfare `Σ_j b_j · q̂(θ, a_j)` of an allocation.
pub fn social_welfare(alloc: &Allocation, bids: &[f64], ctrs: &[f64]) -> Result<f64> {
    if ctrs.len() != alloc.len() {
        return Err(NmaError::ShapeMismatch {
            op: "social_welfare",
            left: [1, alloc.len()],
            right: [1, ctrs.len()],
        });
    }
    let mut sw = 0.0;
    for (&ad, &q) in alloc.slots().iter().zip(ctrs) {
        let b = bids.get(ad).ok_or_else(|| NmaError::ShapeMismatch {
            op: "social_welfare",
            left: [1, bids.len()],
            right: [1, ad + 1],
        })?;
        sw += b * q;
    }
    Ok(sw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelfareReport {
    pub sw: f64,
    pub sw_star: f64,
    pub ratio: f64,
    pub epsilon: f64,
}

impl WelfareReport {
    pub fn new(sw: f64, sw_star: f64) -> Self {
        let ratio = if sw_star > 0.0 { sw / sw_star } else { 1.0 };
        Self {
            sw,
            sw_star,
            ratio,
            epsilon: SW_EPSILON,
        }
    }

    pub fn satisfied(&self) -> bool {
        1.0 - self.ratio < self.epsilon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welfare_examples() {
        let a = Allocation(vec![0, 1]);
        assert_eq!(social_welfare(&a, &[1.0, 2.0], &[0.5, 0.25]).unwrap(), 1.0);
        assert_eq!(social_welfare(&a, &[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(social_welfare(&a, &[1.0, 2.0], &[0.5]).is_err());
    }

    #[test]
    fn allocation_counts() {
        assert_eq!(allocation_count(3, 2), Some(6));
        assert_eq!(allocation_count(10, 2), Some(90));
        assert_eq!(allocation_count(20, 4), Some(116_280));
        assert_eq!(allocation_count(2, 3), Some(0));
    }

    #[test]
    fn config_cap_and_prefilter() {
        let mut cfg = AuctionConfig {
            ads: 20,
            slots: 4,
            ..AuctionConfig::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(NmaError::TooManyAllocations { n: 20, k: 4, .. })
        ));
        cfg.prefilter = Some(10);
        cfg.validate().unwrap();
        let bad = AuctionConfig {
            ads: 2,
            slots: 3,
            ..AuctionConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn welfare_report_threshold() {
        assert!(WelfareReport::new(0.96, 1.0).satisfied());
        assert!(!WelfareReport::new(0.95, 1.0).satisfied());
    }
}
