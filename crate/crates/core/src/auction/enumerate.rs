use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::types::{allocation_count, Allocation, AuctionConfig, AuctionInstance};
use crate::error::{NmaError, Result};

/// Every ordered K-selection of N ads in lexicographic order, plus the
/// per-ad "lists without this ad" index used by VCG-style payments.
#[derive(Debug)]
pub struct AllocationSet {
    n: usize,
    k: usize,
    allocs: Vec<Allocation>,
    flat: Vec<usize>,
    without: Vec<Vec<usize>>,
    all: Vec<usize>,
}

impl AllocationSet {
    pub fn new(n: usize, k: usize, cap: usize) -> Result<Self> {
        let count = match allocation_count(n, k) {
            Some(c) if c <= cap && k >= 1 && k <= n => c,
            _ => return Err(NmaError::TooManyAllocations { n, k, cap }),
        };
        let mut allocs = Vec::with_capacity(count);
        let mut current = Vec::with_capacity(k);
        let mut used = vec![false; n];
        fill(n, k, &mut current, &mut used, &mut allocs);
        debug_assert_eq!(allocs.len(), count);
        let flat = allocs.iter().flat_map(|a| a.0.iter().copied()).collect();
        let without = (0..n)
            .map(|j| {
                allocs
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| !a.contains(j))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        Ok(Self {
            n,
            k,
            all: (0..allocs.len()).collect(),
            allocs,
            flat,
            without,
        })
    }

    /// Process-wide cached set for `(n, k)`.
    pub fn shared(n: usize, k: usize, cap: usize) -> Result<Arc<Self>> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<AllocationSet>>>> =
            OnceLock::new();
        if allocation_count(n, k).is_none_or(|c| c > cap) {
            return Err(NmaError::TooManyAllocations { n, k, cap });
        }
        let cache = CACHE.get_or_init(Default::default);
        if let Some(s) = cache.lock().expect("cache lock").get(&(n, k)) {
            return Ok(Arc::clone(s));
        }
        let set = Arc::new(Self::new(n, k, cap)?);
        cache
            .lock()
            .expect("cache lock")
            .insert((n, k), Arc::clone(&set));
        Ok(set)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.allocs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allocs.is_empty()
    }

    pub fn get(&self, i: usize) -> &Allocation {
        &self.allocs[i]
    }

    pub fn as_slice(&self) -> &[Allocation] {
        &self.allocs
    }

    /// Ad at `slot` of list `i`.
    #[inline]
    pub fn ad(&self, i: usize, slot: usize) -> usize {
        self.flat[i * self.k + slot]
    }

    /// Row-major `len × k` ad indices.
    pub fn flat(&self) -> &[usize] {
        &self.flat
    }

    /// Indices of lists that do not contain `ad` (all lists if `ad ≥ N`).
    pub fn excluding(&self, ad: usize) -> Result<&[usize]> {
        if ad >= self.n {
            return Ok(&self.all);
        }
        if self.n - 1 < self.k {
            return Err(NmaError::PaymentUndefined {
                n: self.n,
                k: self.k,
            });
        }
        Ok(&self.without[ad])
    }

    /// Lexicographic rank of `alloc`, if it is a valid K-selection of N.
    pub fn index_of(&self, alloc: &Allocation) -> Option<usize> {
        if alloc.len() != self.k || alloc.validate(self.n).is_err() {
            return None;
        }
        let mut idx = 0;
        let mut used = vec![false; self.n];
        for (s, &a) in alloc.slots().iter().enumerate() {
            let smaller_unused = (0..a).filter(|&x| !used[x]).count();
            let tail = allocation_count(self.n - s - 1, self.k - s - 1)?;
            idx += smaller_unused * tail;
            used[a] = true;
        }
        Some(idx)
    }
}

fn fill(n: usize, k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Allocation>) {
    if cur.len() == k {
        out.push(Allocation(cur.clone()));
        return;
    }
    for a in 0..n {
        if used[a] {
            continue;
        }
        used[a] = true;
        cur.push(a);
        fill(n, k, cur, used, out);
        cur.pop();
        used[a] = false;
    }
}

/// All ordered K-selections for `instance`, honoring the config's cap.
pub fn enumerate_allocations(
    config: &AuctionConfig,
    instance: &AuctionInstance,
) -> Result<Arc<AllocationSet>> {
    AllocationSet::shared(instance.n_ads(), instance.slots, config.max_allocations)
}

/// Indices of `allocs` lists that leave out ad `ad`.
pub fn allocations_excluding(set: &AllocationSet, ad: usize) -> Result<Vec<usize>> {
    set.excluding(ad).map(<[usize]>::to_vec)
}

/// Restricts `instance` to its `keep` highest-eCPM ads (bid × pointwise
/// pCTR, ties by index), preserving their original relative order. Returns
/// the reduced instance and the original index of each kept ad. The logged
/// display survives only if all of its ads survive.
pub fn prefilter_top_ecpm(instance: &AuctionInstance, keep: usize) -> (AuctionInstance, Vec<usize>) {
    let n = instance.n_ads();
    if keep >= n {
        return (instance.clone(), (0..n).collect());
    }
    let mut order: Vec<usize> = (0..n).collect();
    let ecpm = |i: usize| instance.ads[i].bid * instance.ads[i].pointwise_pctr;
    order.sort_by(|&a, &b| ecpm(b).total_cmp(&ecpm(a)).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();

    let mut out = instance.clone();
    out.ads = kept.iter().map(|&i| instance.ads[i].clone()).collect();
    let remap = |a: usize| kept.iter().position(|&k| k == a);
    match instance
        .logged
        .as_ref()
        .map(|l| l.slots().iter().map(|&a| remap(a)).collect::<Option<Vec<_>>>())
    {
        Some(Some(mapped)) => out.logged = Some(Allocation(mapped)),
        _ => {
            out.logged = None;
            out.clicks = None;
        }
    }
    (out, kept)
}
