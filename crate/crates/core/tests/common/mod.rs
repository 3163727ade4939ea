#![allow(dead_code)]

use nma_core::auction::{Ad, Allocation, AuctionInstance, OrganicItem, SCHEMA_VERSION};
use nma_core::autodiff::{Graph, ParamStore, Var};
use nma_core::synth::{rng_for, GenSpec};
use rand::seq::SliceRandom;
use rand::Rng;

/// Initial step of the extrapolated central difference.
pub const FD_STEP: f64 = 1e-4;

/// Ridders' extrapolation of central differences of `f` at 0. Returns the
/// derivative estimate and its error estimate.
pub fn ridders(mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    const SHRINK: f64 = 1.4;
    const LEVELS: usize = 10;
    let mut h = FD_STEP;
    let mut central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let mut prev = vec![central(h)];
    let (mut best, mut err) = (prev[0], f64::INFINITY);
    for _ in 1..LEVELS {
        h /= SHRINK;
        let mut row = vec![central(h)];
        let mut fac = SHRINK * SHRINK;
        for j in 1..=prev.len() {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = next;
            }
            row.push(next);
        }
        let n = row.len();
        let diverging = (row[n - 1] - prev[n - 2]).abs() >= 2.0 * err;
        prev = row;
        if diverging {
            break;
        }
    }
    (best, err)
}

/// Random instance with distinct ad ids; bids in [0.5, 1.5], pCTRs in [0.01, 0.2].
pub fn toy_instance<R: Rng>(rng: &mut R, n: usize, k: usize, m: usize) -> AuctionInstance {
    let mut ids: Vec<u64> = (0..200).collect();
    ids.shuffle(rng);
    let ads = ids[..n]
        .iter()
        .map(|&id| {
            let bid = rng.random_range(0.5..1.5);
            Ad {
                id,
                category: id % 6,
                brand: id % 30,
                bid,
                pointwise_pctr: rng.random_range(0.01..0.2),
                true_value: bid,
            }
        })
        .collect();
    let organic = (0..m)
        .map(|_| OrganicItem {
            id: rng.random_range(0..500),
            category: rng.random_range(0..6),
        })
        .collect();
    AuctionInstance {
        schema_version: SCHEMA_VERSION,
        id: rng.random(),
        slots: k,
        ads,
        organic,
        user_id: rng.random_range(0..50),
        request_ctx: rng.random_range(0..24),
        logged: None,
        clicks: None,
    }
}

/// Same as [`toy_instance`] plus a logged display of the first `k` ads and labels.
pub fn labelled_instance<R: Rng>(rng: &mut R, n: usize, k: usize, m: usize) -> AuctionInstance {
    let mut inst = toy_instance(rng, n, k, m);
    inst.logged = Some(Allocation((0..k).collect()));
    inst.clicks = Some((0..k).map(|_| rng.random_bool(0.5) as u8).collect());
    inst
}

/// A few thousand instances from the default environment.
pub fn small_spec(instances: usize) -> GenSpec {
    GenSpec {
        instances,
        ..GenSpec::default()
    }
}

pub fn seeded(seed: u64) -> rand_chacha::ChaCha8Rng {
    rng_for(seed, 0)
}

/// Finite-difference check on `coords` random coordinates with a nonzero
/// analytic gradient. Returns the largest relative error.
pub fn gradcheck(store: &mut ParamStore, coords: usize, seed: u64, f: impl Fn(&mut Graph) -> Var) -> f64 {
    fd_check(store, coords, seed, f, false).worst
}

pub struct FdReport {
    /// Largest relative error over the checked coordinates.
    pub worst: f64,
    /// Coordinates skipped because the difference quotient could not resolve
    /// them to `RESOLUTION`.
    pub skipped: usize,
    /// Largest `|analytic − numeric| / error estimate` over skipped coordinates.
    pub skipped_ratio: f64,
}

/// Relative precision a coordinate's numeric derivative must reach to count
/// as resolved.
pub const RESOLUTION: f64 = 1e-5;

/// Like [`gradcheck`], but with `resolved_only` a coordinate whose
/// extrapolation error estimate exceeds `RESOLUTION · |numeric|` is replaced
/// by another one, so `coords` resolved coordinates are compared.
pub fn fd_check(
    store: &mut ParamStore,
    coords: usize,
    seed: u64,
    f: impl Fn(&mut Graph) -> Var,
    resolved_only: bool,
) -> FdReport {
    let analytic = {
        let mut g = Graph::new(store);
        let root = f(&mut g);
        let back = g.backward(root).unwrap();
        store
            .ids()
            .map(|id| back.params.dense(id, store))
            .collect::<Vec<_>>()
    };
    let mut candidates = Vec::new();
    for (p, t) in analytic.iter().enumerate() {
        for (i, &v) in t.data().iter().enumerate() {
            if v != 0.0 {
                candidates.push((p, i));
            }
        }
    }
    assert!(!candidates.is_empty(), "loss does not depend on any parameter");
    let mut rng = rng_for(seed, 1);
    candidates.shuffle(&mut rng);
    let ids: Vec<_> = store.ids().collect();
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let root = f(&mut g);
        g.value(root).item()
    };
    let mut report = FdReport {
        worst: 0.0,
        skipped: 0,
        skipped_ratio: 0.0,
    };
    let mut checked = 0;
    let pool = if resolved_only { candidates.len() } else { coords };
    for &(p, i) in candidates.iter().cycle().take(pool) {
        if checked == coords {
            break;
        }
        let id = ids[p];
        let orig = store.get(id).data()[i];
        let (numeric, err) = ridders(|h| {
            store.get_mut(id).data_mut()[i] = orig + h;
            eval(store)
        });
        store.get_mut(id).data_mut()[i] = orig;
        let a = analytic[p].data()[i];
        if resolved_only && err > RESOLUTION * numeric.abs() {
            report.skipped += 1;
            report.skipped_ratio = report.skipped_ratio.max((a - numeric).abs() / err.max(f64::MIN_POSITIVE));
            continue;
        }
        checked += 1;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        report.worst = report.worst.max(rel);
    }
    assert_eq!(checked, coords, "only {checked} coordinates could be resolved");
    report
}

/// All ordered `k`-lists of `0..n`, written without the library's enumerator.
pub fn brute_lists(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for a in 0..n {
            if !cur.contains(&a) {
                cur.push(a);
                rec(n, k, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::new(), &mut out);
    out
}

/// Textbook VCG over explicit lists: the welfare maximizer wins and each
/// winner pays, per click, the welfare loss it imposes on the others.
pub struct BruteVcg {
    pub winner: Vec<usize>,
    pub payments: Vec<f64>,
}

pub fn brute_vcg(lists: &[Vec<usize>], ctr: impl Fn(usize, usize) -> f64, bids: &[f64]) -> BruteVcg {
    let sw = |l: usize| -> f64 { lists[l].iter().enumerate().map(|(s, &a)| bids[a] * ctr(l, s)).sum() };
    let mut best = 0;
    for l in 1..lists.len() {
        if sw(l) > sw(best) {
            best = l;
        }
    }
    let winner = lists[best].clone();
    let payments = winner
        .iter()
        .enumerate()
        .map(|(s, &a)| {
            let without = (0..lists.len())
                .filter(|&l| !lists[l].contains(&a))
                .map(sw)
                .fold(0.0f64, f64::max);
            let others = sw(best) - bids[a] * ctr(best, s);
            (without - others) / ctr(best, s)
        })
        .collect();
    BruteVcg { winner, payments }
}

/// Click oracle over the ids used by [`toy_instance`], with position decay
/// and the overlap penalty switched on.
pub fn toy_oracle(seed: u64, lambda: f64, slots: usize) -> nma_core::synth::ClickModel {
    let mut rng = rng_for(seed, 2);
    let catalog = (0..200)
        .map(|id| nma_core::synth::CatalogAd {
            id,
            category: id % 6,
            brand: id % 30,
            attractiveness: rng.random_range(0.02..0.3),
        })
        .collect();
    nma_core::synth::ClickModel::new(seed, [1.0, 0.6, 0.4][..slots].to_vec(), lambda, catalog).unwrap()
}
