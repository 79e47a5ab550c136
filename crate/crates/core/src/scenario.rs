//! Cold-start scenario construction and proportion-preserving batching.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{overlapping_users, Domain, Interaction};
use crate::error::{CatnError, Result};

/// Which rating a training pair supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    /// Target-domain user document and source-domain item document,
    /// predicting a source rating.
    SourceFlow,
    /// Source-domain user document and target-domain item document,
    /// predicting a target rating.
    TargetFlow,
}

impl Flow {
    /// Domain of the rated item.
    pub fn item_domain(self) -> Domain {
        match self {
            Flow::SourceFlow => Domain::Source,
            Flow::TargetFlow => Domain::Target,
        }
    }

    /// Domain of the user document fed to this flow.
    pub fn user_domain(self) -> Domain {
        self.item_domain().other()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub flow: Flow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub pairs: Vec<Pair>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.pairs.len()
    }

    pub fn count(&self, flow: Flow) -> usize {
        self.pairs.iter().filter(|p| p.flow == flow).count()
    }

    pub fn flow_pairs(&self, flow: Flow) -> Vec<&Pair> {
        self.pairs.iter().filter(|p| p.flow == flow).collect()
    }
}

/// Partition sizes `(test, validation, training pool)` for `n` overlapping
/// users: half become cold-start users, of which 30% of `n` (rounded up) are
/// test users and the rest validation. Each part is at least 1 when `n ≥ 4`.
pub fn partition_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 4 {
        return Err(CatnError::Scenario(format!(
            "need at least 4 overlapping users to form test, validation and training partitions, got {n}"
        )));
    }
    let cold = n / 2;
    let test = (3 * n).div_ceil(10).clamp(1, cold - 1);
    let valid = cold - test;
    Ok((test, valid, n - cold))
}

/// Training users kept from a pool of `pool` users at fraction `eta`
/// (rounded down, at least one).
pub fn train_size(pool: usize, eta: f64) -> usize {
    (((pool as f64) * eta + 1e-9).floor() as usize).clamp(1, pool)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub seed: u64,
    pub eta: f64,
    pub test_users: Vec<String>,
    pub valid_users: Vec<String>,
    /// Training pool in shuffled order; the first `train_users.len()` are used.
    pub pool_users: Vec<String>,
    pub train_users: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub source: Vec<Interaction>,
    pub target: Vec<Interaction>,
    pub overlap_users: BTreeSet<String>,
    pub train_users: BTreeSet<String>,
    pub test_users: BTreeSet<String>,
    pub valid_users: BTreeSet<String>,
    pool_order: Vec<String>,
    pub eta: f64,
    pub seed: u64,
}

fn with_domain(mut v: Vec<Interaction>, d: Domain) -> Vec<Interaction> {
    v.iter_mut().for_each(|r| r.domain = d);
    v
}

pub fn split_scenario(source: Vec<Interaction>, target: Vec<Interaction>, eta: f64, seed: u64) -> Result<Scenario> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(CatnError::Scenario(format!("eta must be in (0, 1], got {eta}")));
    }
    let source = with_domain(source, Domain::Source);
    let target = with_domain(target, Domain::Target);
    let all: Vec<Interaction> = source.iter().chain(&target).cloned().collect();
    let overlap = overlapping_users(&all);
    let (n_test, n_valid, _) = partition_sizes(overlap.len())?;

    let mut order: Vec<String> = overlap.iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_users = order[..n_test].iter().cloned().collect();
    let valid_users = order[n_test..n_test + n_valid].iter().cloned().collect();
    let pool_order = order[n_test + n_valid..].to_vec();
    let train_users = pool_order[..train_size(pool_order.len(), eta)].iter().cloned().collect();
    Ok(Scenario {
        source,
        target,
        overlap_users: overlap,
        train_users,
        test_users,
        valid_users,
        pool_order,
        eta,
        seed,
    })
}

impl Scenario {
    pub fn interactions(&self, d: Domain) -> &[Interaction] {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn is_cold_start(&self, u: &str) -> bool {
        self.test_users.contains(u) || self.valid_users.contains(u)
    }

    pub fn cold_start_users(&self) -> BTreeSet<String> {
        self.test_users.union(&self.valid_users).cloned().collect()
    }

    /// Ratings of training users in `d`, in record order.
    pub fn training_ratings(&self, d: Domain) -> Vec<Pair> {
        let flow = match d {
            Domain::Source => Flow::SourceFlow,
            Domain::Target => Flow::TargetFlow,
        };
        self.interactions(d)
            .iter()
            .filter(|r| self.train_users.contains(&r.user_id))
            .map(|r| Pair {
                user: r.user_id.clone(),
                item: r.item_id.clone(),
                rating: r.rating,
                flow,
            })
            .collect()
    }

    /// Held-out target-domain ratings of the cold-start users in `split`.
    pub fn eval_pairs(&self, split: Split) -> Vec<Pair> {
        let users = match split {
            Split::Validation => &self.valid_users,
            Split::Test => &self.test_users,
        };
        self.target
            .iter()
            .filter(|r| users.contains(&r.user_id))
            .map(|r| Pair {
                user: r.user_id.clone(),
                item: r.item_id.clone(),
                rating: r.rating,
                flow: Flow::TargetFlow,
            })
            .collect()
    }

    /// Records the model may read text from: everything except the target
    /// reviews of cold-start users.
    pub fn visible_interactions(&self) -> Vec<Interaction> {
        self.source
            .iter()
            .chain(self.target.iter().filter(|r| !self.is_cold_start(&r.user_id)))
            .cloned()
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let err = |m: String| Err(CatnError::Scenario(m));
        if !self.test_users.is_disjoint(&self.valid_users) {
            return err("test and validation users overlap".into());
        }
        if let Some(u) = self.train_users.iter().find(|u| self.is_cold_start(u)) {
            return err(format!("training user `{u}` is also a cold-start user"));
        }
        for u in self.cold_start_users() {
            let has = |d: &[Interaction]| d.iter().any(|r| r.user_id == u);
            if !has(&self.source) || !has(&self.target) {
                return err(format!("cold-start user `{u}` lacks source or target interactions"));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> ScenarioManifest {
        ScenarioManifest {
            seed: self.seed,
            eta: self.eta,
            test_users: self.test_users.iter().cloned().collect(),
            valid_users: self.valid_users.iter().cloned().collect(),
            pool_users: self.pool_order.clone(),
            train_users: self.train_users.iter().cloned().collect(),
        }
    }

    pub fn save_manifest(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(path, s).map_err(|e| CatnError::io(path, e))
    }

    /// Rebuilds a scenario from explicit partitions.
    pub fn from_manifest(m: &ScenarioManifest, source: Vec<Interaction>, target: Vec<Interaction>) -> Result<Scenario> {
        let source = with_domain(source, Domain::Source);
        let target = with_domain(target, Domain::Target);
        let all: Vec<Interaction> = source.iter().chain(&target).cloned().collect();
        let s = Scenario {
            overlap_users: overlapping_users(&all),
            source,
            target,
            train_users: m.train_users.iter().cloned().collect(),
            test_users: m.test_users.iter().cloned().collect(),
            valid_users: m.valid_users.iter().cloned().collect(),
            pool_order: m.pool_users.clone(),
            eta: m.eta,
            seed: m.seed,
        };
        s.check_invariants()?;
        Ok(s)
    }

    pub fn load_manifest(path: &Path) -> Result<ScenarioManifest> {
        let s = std::fs::read_to_string(path).map_err(|e| CatnError::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// One epoch of batches. Both pools are shuffled, then apportioned so that
/// every batch holds source and target pairs in the global ratio
/// `|R_s| : |R_t|` (each count within one of its exact share) and every
/// training rating appears exactly once.
pub fn make_batches(scenario: &Scenario, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(CatnError::InvalidArgument(format!("batch size must be at least 2, got {batch_size}")));
    }
    let mut src = scenario.training_ratings(Domain::Source);
    let mut tgt = scenario.training_ratings(Domain::Target);
    if src.is_empty() || tgt.is_empty() {
        return Err(CatnError::Scenario("training needs ratings in both domains".into()));
    }
    let mut rng = epoch_rng(seed, epoch);
    src.shuffle(&mut rng);
    tgt.shuffle(&mut rng);
    Ok(apportion(src, tgt, batch_size))
}

fn apportion(src: Vec<Pair>, tgt: Vec<Pair>, batch_size: usize) -> Vec<Batch> {
    let (ns, nt) = (src.len(), tgt.len());
    let n_batches = (ns + nt).div_ceil(batch_size).clamp(1, ns.min(nt));
    let share = |total: usize, b: usize| (b + 1) * total / n_batches - b * total / n_batches;
    let mut src = src.into_iter();
    let mut tgt = tgt.into_iter();
    (0..n_batches)
        .map(|b| {
            let mut pairs: Vec<Pair> = src.by_ref().take(share(ns, b)).collect();
            pairs.extend(tgt.by_ref().take(share(nt, b)));
            Batch { pairs }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(k: usize, flow: Flow) -> Pair {
        Pair {
            user: format!("u{k}"),
            item: "i".into(),
            rating: 3.0,
            flow,
        }
    }

    fn pools(ns: usize, nt: usize) -> (Vec<Pair>, Vec<Pair>) {
        (
            (0..ns).map(|k| pair(k, Flow::SourceFlow)).collect(),
            (0..nt).map(|k| pair(k, Flow::TargetFlow)).collect(),
        )
    }

    #[test]
    fn table_two_partition_sizes() {
        // (overlap, test, valid, pool, pool at 50/20/10/5 %)
        let rows = [
            (6074, 1823, 1214, 3037, [1518, 607, 303, 151]),
            (2782, 835, 556, 1391, [695, 278, 139, 69]),
            (1705, 512, 340, 853, [426, 170, 85, 42]),
        ];
        for (n, test, valid, pool, etas) in rows {
            assert_eq!(partition_sizes(n).unwrap(), (test, valid, pool));
            assert_eq!(train_size(pool, 1.0), pool);
            for (eta, want) in [0.5, 0.2, 0.1, 0.05].into_iter().zip(etas) {
                assert_eq!(train_size(pool, eta), want, "n={n} eta={eta}");
            }
        }
    }

    #[test]
    fn tiny_partitions_are_nonempty() {
        assert_eq!(partition_sizes(4).unwrap(), (1, 1, 2));
        assert!(partition_sizes(3).is_err());
        assert_eq!(train_size(2, 0.05), 1);
    }

    #[test]
    fn symmetric_and_three_to_one_ratios() {
        let (s, t) = pools(256, 256);
        let b = apportion(s, t, 256);
        assert!(b.iter().all(|b| b.count(Flow::SourceFlow) == 128 && b.count(Flow::TargetFlow) == 128));

        let (s, t) = pools(768, 256);
        let b = apportion(s, t, 256);
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|b| b.count(Flow::SourceFlow) == 192 && b.count(Flow::TargetFlow) == 64));
    }

    #[test]
    fn stream_counts_match_counting_oracle() {
        let (s, t) = pools(1000, 400);
        let batches = apportion(s, t, 70);
        let (mut ts, mut tt) = (0, 0);
        for b in &batches {
            let (cs, ct) = (b.count(Flow::SourceFlow) as f64, b.count(Flow::TargetFlow) as f64);
            let size = cs + ct;
            assert!((cs - size * 5.0 / 7.0).abs() <= 1.0);
            assert!((ct - size * 2.0 / 7.0).abs() <= 1.0);
            ts += cs as usize;
            tt += ct as usize;
        }
        assert_eq!((ts, tt), (1000, 400));
    }

    #[test]
    fn small_pool_still_puts_one_of_each_in_every_batch() {
        let (s, t) = pools(50, 2);
        let batches = apportion(s, t, 4);
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.count(Flow::TargetFlow) == 1));
    }
}
