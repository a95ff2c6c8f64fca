//! Implicit-feedback ingestion and the source/target cold-start partition.
//!
//! Interaction files become dense-indexed binary datasets; a seeded split
//! carves out cold-start target users (truncated to a handful of
//! interactions), and per-user leave-one-out holdouts supply validation and
//! test items. Splits overlay the original index space: no reindexing happens
//! after a split, so dropped users and items simply have no split entries.

pub mod formats;
pub mod split;
pub mod splitfile;
pub mod synthetic;

use std::collections::BTreeSet;

pub use formats::{load_interactions, load_sensitive, RatingsFormat, SensitiveFormat, TokenTable};
pub use split::{cold_start_split, leave_one_out, sample_negatives};
pub use splitfile::{read_split, write_split};
pub use synthetic::{planted_dataset, PlantedSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("no interactions found in {0}")]
    EmptyDataset(String),
    #[error("users missing from attribute file: {}", .0.join(", "))]
    Coverage(Vec<String>),
    #[error("negative-sampling pool exhausted for user {user}: want {want}, have {have}")]
    PoolExhausted { user: usize, want: usize, have: usize },
    #[error("invalid argument: {0}")]
    InvalidSpec(String),
}

/// Binary interaction matrix with one sensitive bit per user.
///
/// Indices are dense in `[0, n_users)` x `[0, n_items)`, assigned in
/// first-appearance order of the source file; every user has at least one
/// interaction and no pair repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub n_users: usize,
    pub n_items: usize,
    items_by_user: Vec<BTreeSet<usize>>,
    pub sensitive: Vec<u8>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl InteractionDataset {
    /// Builds from (user, item) pairs, collapsing duplicates. Index density
    /// and per-user coverage are enforced; `sensitive` must label every user.
    pub fn from_parts(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        pairs: &[(usize, usize)],
        sensitive: Vec<u8>,
    ) -> Result<Self, DataError> {
        let (n_users, n_items) = (user_ids.len(), item_ids.len());
        if sensitive.len() != n_users {
            return Err(DataError::InvalidSpec(format!(
                "{} sensitive labels for {n_users} users",
                sensitive.len()
            )));
        }
        if let Some(&bad) = sensitive.iter().find(|&&a| a > 1) {
            return Err(DataError::InvalidSpec(format!("sensitive label {bad} not in {{0,1}}")));
        }
        let mut items_by_user = vec![BTreeSet::new(); n_users];
        for &(u, i) in pairs {
            if u >= n_users || i >= n_items {
                return Err(DataError::InvalidSpec(format!(
                    "pair ({u},{i}) outside {n_users}x{n_items}"
                )));
            }
            items_by_user[u].insert(i);
        }
        if let Some(u) = items_by_user.iter().position(|s| s.is_empty()) {
            return Err(DataError::InvalidSpec(format!("user {u} has no interactions")));
        }
        Ok(InteractionDataset { n_users, n_items, items_by_user, sensitive, user_ids, item_ids })
    }

    pub fn items_of(&self, user: usize) -> &BTreeSet<usize> {
        &self.items_by_user[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.items_by_user[user].contains(&item)
    }

    pub fn interaction_count(&self) -> usize {
        self.items_by_user.iter().map(|s| s.len()).sum()
    }

    /// All (user, item) pairs in ascending order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.interaction_count());
        for (u, items) in self.items_by_user.iter().enumerate() {
            for &i in items {
                out.push((u, i));
            }
        }
        out
    }
}

/// `(n, m, interactions, sparsity)` where sparsity = 1 - count / (n * m).
pub fn dataset_stats(ds: &InteractionDataset) -> (usize, usize, usize, f64) {
    let count = ds.interaction_count();
    let sparsity = 1.0 - count as f64 / (ds.n_users as f64 * ds.n_items as f64);
    (ds.n_users, ds.n_items, count, sparsity)
}

/// Keeps a seeded uniform fraction of users and re-densifies both index
/// spaces (items that lose all interactions drop out).
pub fn subsample_users(
    ds: &InteractionDataset,
    fraction: f64,
    seed: u64,
) -> Result<InteractionDataset, DataError> {
    use crate::numkit::rng::{salts, stream};
    use rand::seq::SliceRandom;

    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(DataError::InvalidSpec(format!("subsample fraction {fraction} outside (0,1]")));
    }
    let keep = ((ds.n_users as f64) * fraction).floor().max(1.0) as usize;
    let mut order: Vec<usize> = (0..ds.n_users).collect();
    order.shuffle(&mut stream(seed, salts::SUBSAMPLE, 0, 0));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();

    let mut item_map = std::collections::BTreeMap::new();
    let mut item_ids = Vec::new();
    let mut user_ids = Vec::new();
    let mut sensitive = Vec::new();
    let mut pairs = Vec::new();
    for (new_u, &u) in kept.iter().enumerate() {
        user_ids.push(ds.user_ids[u].clone());
        sensitive.push(ds.sensitive[u]);
        for &i in ds.items_of(u) {
            let next = item_map.len();
            let ni = *item_map.entry(i).or_insert_with(|| {
                item_ids.push(ds.item_ids[i].clone());
                next
            });
            pairs.push((new_u, ni));
        }
    }
    InteractionDataset::from_parts(user_ids, item_ids, &pairs, sensitive)
}

/// Which side of the cold-start partition a user landed on.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Domain {
    Source,
    Target,
}

/// Per-user holdout roles within the retained interactions.
#[derive(Clone, Debug, PartialEq)]
pub struct UserAssignment {
    pub domain: Domain,
    pub train: Vec<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
}

impl UserAssignment {
    /// Retained interactions across all roles, ascending.
    pub fn kept_items(&self) -> Vec<usize> {
        let mut out = self.train.clone();
        out.extend(self.val);
        out.extend(self.test);
        out.sort_unstable();
        out
    }

    /// Users with a single retained interaction cannot be ranked.
    pub fn eval_excluded(&self) -> bool {
        self.test.is_none()
    }
}

/// Disjoint source/target user partition with per-user holdouts. Overlays the
/// dataset's original index space; users dropped during the split are listed
/// in `dropped_users` and absent from `users`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub seed: u64,
    pub users: std::collections::BTreeMap<usize, UserAssignment>,
    pub dropped_users: Vec<usize>,
}

impl DomainSplit {
    pub fn domain_users(&self, domain: Domain) -> Vec<usize> {
        self.users.iter().filter(|(_, a)| a.domain == domain).map(|(&u, _)| u).collect()
    }

    pub fn source_users(&self) -> Vec<usize> {
        self.domain_users(Domain::Source)
    }

    pub fn target_users(&self) -> Vec<usize> {
        self.domain_users(Domain::Target)
    }
}
