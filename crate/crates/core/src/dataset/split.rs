//! Cold-start partitioning, leave-one-out holdouts, and negative sampling.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::numkit::rng::{salts, stream};

use super::{DataError, Domain, DomainSplit, InteractionDataset, UserAssignment};

/// Splits users into warm sources and cold targets. Targets are a seeded
/// uniform draw of `floor(n * target_fraction)` users, each truncated to at
/// most `max_keep` retained interactions; items no source user interacted
/// with are dropped from target lists, and targets left empty are dropped
/// entirely (with a warning on stderr).
pub fn cold_start_split(
    ds: &InteractionDataset,
    target_fraction: f64,
    max_keep: usize,
    seed: u64,
) -> Result<DomainSplit, DataError> {
    if !(0.0..1.0).contains(&target_fraction) {
        return Err(DataError::InvalidSpec(format!(
            "target_fraction {target_fraction} outside [0,1)"
        )));
    }
    if max_keep == 0 {
        return Err(DataError::InvalidSpec("max_keep must be at least 1".into()));
    }

    let n_targets = ((ds.n_users as f64) * target_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..ds.n_users).collect();
    order.shuffle(&mut stream(seed, salts::SPLIT, 0, 0));
    let target_set: BTreeSet<usize> = order.iter().take(n_targets).copied().collect();

    let mut source_has_item = vec![false; ds.n_items];
    for u in 0..ds.n_users {
        if !target_set.contains(&u) {
            for &i in ds.items_of(u) {
                source_has_item[i] = true;
            }
        }
    }

    let mut users = std::collections::BTreeMap::new();
    let mut dropped_users = Vec::new();
    for u in 0..ds.n_users {
        if !target_set.contains(&u) {
            let train: Vec<usize> = ds.items_of(u).iter().copied().collect();
            users.insert(u, UserAssignment { domain: Domain::Source, train, val: None, test: None });
            continue;
        }
        let mut items: Vec<usize> = ds.items_of(u).iter().copied().collect();
        items.shuffle(&mut stream(seed, salts::SPLIT, u as u64, 1));
        items.truncate(max_keep);
        items.retain(|&i| source_has_item[i]);
        items.sort_unstable();
        if items.is_empty() {
            eprintln!("warning: target user {} ({}) kept no warm items; dropped", u, ds.user_ids[u]);
            dropped_users.push(u);
            continue;
        }
        users.insert(
            u,
            UserAssignment { domain: Domain::Target, train: items, val: None, test: None },
        );
    }
    Ok(DomainSplit { seed, users, dropped_users })
}

/// Assigns per-user holdouts over the retained interactions: with three or
/// more, one validation and one test item; with exactly two, a test item
/// only; with one, the user trains but is excluded from ranking evaluation.
pub fn leave_one_out(split: &DomainSplit, seed: u64) -> DomainSplit {
    let mut users = std::collections::BTreeMap::new();
    for (&u, a) in &split.users {
        let mut kept = a.kept_items();
        kept.shuffle(&mut stream(seed, salts::HOLDOUT, u as u64, 0));
        let (test, val) = match kept.len() {
            0 => unreachable!("retained users always keep at least one item"),
            1 => (None, None),
            2 => (Some(kept.remove(0)), None),
            _ => (Some(kept.remove(0)), Some(kept.remove(0))),
        };
        kept.sort_unstable();
        users.insert(u, UserAssignment { domain: a.domain, train: kept, val, test });
    }
    DomainSplit { seed: split.seed, users, dropped_users: split.dropped_users.clone() }
}

/// Draws `k` distinct items the user never interacted with, also avoiding
/// `exclude`. Errors when the candidate pool is smaller than `k`.
pub fn sample_negatives(
    ds: &InteractionDataset,
    user: usize,
    k: usize,
    exclude: &BTreeSet<usize>,
    seed: u64,
) -> Result<Vec<usize>, DataError> {
    let interacted = ds.items_of(user);
    let forbidden = |i: usize| interacted.contains(&i) || exclude.contains(&i);
    let have = ds.n_items - (0..ds.n_items).filter(|&i| forbidden(i)).count();
    if k > have {
        return Err(DataError::PoolExhausted { user, want: k, have });
    }
    let mut rng = stream(seed, salts::NEGATIVES, user as u64, 0);
    if have <= 2 * k {
        let mut pool: Vec<usize> = (0..ds.n_items).filter(|&i| !forbidden(i)).collect();
        pool.shuffle(&mut rng);
        pool.truncate(k);
        return Ok(pool);
    }
    let mut picked = BTreeSet::new();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.gen_range(0..ds.n_items);
        if !forbidden(i) && picked.insert(i) {
            out.push(i);
        }
    }
    Ok(out)
}
