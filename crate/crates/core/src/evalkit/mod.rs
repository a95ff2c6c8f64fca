//! Measurement protocol: sampled-candidate ranking metrics, the fairness
//! attacker, and paired significance tests.
//!
//! Every evaluated user gets a candidate list of one held-out positive plus
//! 100 seeded negatives; metrics average over evaluable users with the
//! skipped count reported rather than silently folded in.

pub mod attacker;
pub mod metrics;
pub mod stat;

use std::collections::BTreeSet;

use crate::dataset::{sample_negatives, DataError, DomainSplit, InteractionDataset};
use crate::numkit::rng::{derive_seed, salts};
use crate::numkit::NumError;
use crate::recmodels::{topn_recommend, ModelError, ModelState};

pub use attacker::{
    attacker_auc_mean, discriminator_net, discriminator_sizes, train_attacker, AttackerConfig,
    AttackerOutcome,
};
pub use metrics::{auc_score, hit_at_n, ndcg_at_n};
pub use stat::{paired_t_test, permutation_p, TTestOutcome};

/// Negatives per candidate list.
pub const CANDIDATE_NEGATIVES: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("AUC undefined: only one class present")]
    SingleClass,
    #[error("attacker split degenerate after one resample")]
    DegenerateSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalRole {
    Val,
    Test,
}

impl EvalRole {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalRole::Val => "val",
            EvalRole::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            EvalRole::Val => 0,
            EvalRole::Test => 1,
        }
    }
}

/// One user's ranking instance: the held-out positive and seeded negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateList {
    pub user: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
    pub role: EvalRole,
}

impl CandidateList {
    /// Positive first, then negatives.
    pub fn items(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(1 + self.negatives.len());
        out.push(self.positive);
        out.extend(&self.negatives);
        out
    }
}

/// Builds the seeded candidate list for one user and role; `Ok(None)` when
/// the user holds no item for that role. Validation and test lists draw from
/// role-distinct streams.
pub fn build_candidate_list(
    ds: &InteractionDataset,
    split: &DomainSplit,
    user: usize,
    role: EvalRole,
    seed: u64,
) -> Result<Option<CandidateList>, EvalError> {
    let a = split
        .users
        .get(&user)
        .ok_or_else(|| EvalError::Protocol(format!("user {user} absent from split")))?;
    let positive = match role {
        EvalRole::Val => a.val,
        EvalRole::Test => a.test,
    };
    let Some(positive) = positive else {
        return Ok(None);
    };
    let negatives = sample_negatives(
        ds,
        user,
        CANDIDATE_NEGATIVES,
        &BTreeSet::new(),
        derive_seed(seed, salts::CANDIDATES, 0, role.index()),
    )?;
    Ok(Some(CandidateList { user, positive, negatives, role }))
}

/// Full evaluation artifact: per-user metric sequences and their means.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub role: String,
    pub seed: u64,
    pub cutoffs: Vec<usize>,
    pub evaluated_users: Vec<usize>,
    pub skipped_users: usize,
    pub mean_ndcg: Vec<f64>,
    pub mean_hit: Vec<f64>,
    pub per_user_ndcg: Vec<Vec<f64>>,
    pub per_user_hit: Vec<Vec<f64>>,
    pub attacker_auc: Option<f64>,
    pub config_fingerprint: String,
}

/// Ranks each user's candidate list with the model and the supplied user
/// embedding, then averages NDCG and Hit at every cutoff. Users without a
/// held-out item for the role are skipped and counted.
pub fn evaluate_ranking<F>(
    model: &ModelState,
    embed: F,
    ds: &InteractionDataset,
    split: &DomainSplit,
    users: &[usize],
    role: EvalRole,
    cutoffs: &[usize],
    seed: u64,
) -> Result<EvalReport, EvalError>
where
    F: Fn(usize) -> Result<Vec<f64>, EvalError>,
{
    assert!(!cutoffs.is_empty());
    let mut evaluated_users = Vec::new();
    let mut skipped = 0usize;
    let mut per_user_ndcg = vec![Vec::new(); cutoffs.len()];
    let mut per_user_hit = vec![Vec::new(); cutoffs.len()];

    for &user in users {
        let Some(list) = build_candidate_list(ds, split, user, role, seed)? else {
            skipped += 1;
            continue;
        };
        let row = embed(user)?;
        let items = list.items();
        let ranked = topn_recommend(model, user, &row, &items, items.len())?;
        for (ci, &n) in cutoffs.iter().enumerate() {
            per_user_ndcg[ci].push(ndcg_at_n(&ranked, list.positive, n)?);
            per_user_hit[ci].push(hit_at_n(&ranked, list.positive, n)?);
        }
        evaluated_users.push(user);
    }
    if evaluated_users.is_empty() {
        return Err(EvalError::Protocol("no evaluable users for role".into()));
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        role: role.as_str().to_string(),
        seed,
        cutoffs: cutoffs.to_vec(),
        evaluated_users,
        skipped_users: skipped,
        mean_ndcg: per_user_ndcg.iter().map(mean).collect(),
        mean_hit: per_user_hit.iter().map(mean).collect(),
        per_user_ndcg,
        per_user_hit,
        attacker_auc: None,
        config_fingerprint: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{cold_start_split, leave_one_out, InteractionDataset};
    use crate::numkit::rng::stream;
    use crate::numkit::Matrix;
    use crate::recmodels::{init_model, ScorerKind};

    fn two_item_dataset(n_users: usize, n_items: usize) -> InteractionDataset {
        let pairs: Vec<(usize, usize)> = (0..n_users)
            .flat_map(|u| [(u, u % n_items), (u, (u * 7 + 13) % n_items)])
            .collect();
        InteractionDataset::from_parts(
            (0..n_users).map(|u| format!("u{u}")).collect(),
            (0..n_items).map(|i| format!("i{i}")).collect(),
            &pairs,
            (0..n_users).map(|u| (u % 2) as u8).collect(),
        )
        .unwrap()
    }

    #[test]
    fn candidate_lists_are_distinct_per_role_and_valid() {
        let ds = two_item_dataset(40, 160);
        let split = leave_one_out(&cold_start_split(&ds, 0.0, 5, 4).unwrap(), 4);
        let user = *split
            .users
            .iter()
            .find(|(_, a)| a.test.is_some())
            .map(|(u, _)| u)
            .unwrap();
        let test_list = build_candidate_list(&ds, &split, user, EvalRole::Test, 5)
            .unwrap()
            .unwrap();
        assert_eq!(test_list.negatives.len(), CANDIDATE_NEGATIVES);
        let all: BTreeSet<usize> = test_list.items().into_iter().collect();
        assert_eq!(all.len(), 1 + CANDIDATE_NEGATIVES);
        for &i in &test_list.negatives {
            assert!(!ds.contains(user, i));
        }
        // Users here hold two interactions, so no validation item exists.
        assert!(build_candidate_list(&ds, &split, user, EvalRole::Val, 5).unwrap().is_none());
    }

    #[test]
    fn oracle_scorer_reaches_perfect_metrics() {
        let (n_users, n_items) = (60, 150);
        let ds = two_item_dataset(n_users, n_items);
        let split = leave_one_out(&cold_start_split(&ds, 0.0, 5, 1).unwrap(), 1);
        let mut model = init_model(ScorerKind::Pmf, n_items, n_users, n_items, 0);
        let mut eye = Matrix::zeros(n_items, n_items);
        for i in 0..n_items {
            eye[(i, i)] = 1.0;
        }
        model.item_emb = eye;
        let users: Vec<usize> = split.users.keys().copied().collect();
        let report = evaluate_ranking(
            &model,
            |u| {
                let mut row = vec![0.0; n_items];
                row[split.users[&u].test.unwrap()] = 1.0;
                Ok(row)
            },
            &ds,
            &split,
            &users,
            EvalRole::Test,
            &[5, 10],
            9,
        )
        .unwrap();
        assert_eq!(report.mean_ndcg, vec![1.0, 1.0]);
        assert_eq!(report.mean_hit, vec![1.0, 1.0]);
        assert_eq!(report.skipped_users, 0);
    }

    #[test]
    fn random_scorer_hits_at_the_uniform_rate() {
        let n_users = 2000;
        let ds = two_item_dataset(n_users, 300);
        let split = leave_one_out(&cold_start_split(&ds, 0.0, 5, 2).unwrap(), 2);
        let mut model = init_model(ScorerKind::Pmf, 8, n_users, 300, 0);
        model.item_emb = Matrix::randn(300, 8, 1.0, &mut stream(0, 94, 0, 0));
        let user_rows = Matrix::randn(n_users, 8, 1.0, &mut stream(0, 94, 1, 0));
        let users: Vec<usize> = split.users.keys().copied().collect();
        let report = evaluate_ranking(
            &model,
            |u| Ok(user_rows.row(u).to_vec()),
            &ds,
            &split,
            &users,
            EvalRole::Test,
            &[10],
            3,
        )
        .unwrap();
        let expectation = 10.0 / 101.0;
        assert!(
            (report.mean_hit[0] - expectation).abs() <= 0.02,
            "hit@10 {} vs {expectation}",
            report.mean_hit[0]
        );
        // Means restate the stored per-user values.
        let mean: f64 =
            report.per_user_hit[0].iter().sum::<f64>() / report.per_user_hit[0].len() as f64;
        assert_eq!(report.mean_hit[0], mean);
    }

    #[test]
    fn repeat_evaluation_is_bit_identical_and_counts_skips() {
        let mut pairs: Vec<(usize, usize)> = (0..30)
            .flat_map(|u| vec![(u, u % 140), (u, (u + 37) % 140), (u, (u + 81) % 140)])
            .collect();
        pairs.push((30, 139));
        let ds = InteractionDataset::from_parts(
            (0..31).map(|u| format!("u{u}")).collect(),
            (0..140).map(|i| format!("i{i}")).collect(),
            &pairs,
            vec![0; 31],
        )
        .unwrap();
        let split = leave_one_out(&cold_start_split(&ds, 0.0, 5, 6).unwrap(), 6);
        assert!(split.users[&30].eval_excluded());
        let model = init_model(ScorerKind::Pmf, 6, 31, 140, 1);
        let users: Vec<usize> = (0..31).collect();
        let run = || {
            evaluate_ranking(
                &model,
                |u| Ok(model.user_emb.row(u).to_vec()),
                &ds,
                &split,
                &users,
                EvalRole::Test,
                &[5, 10],
                11,
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a.skipped_users, 1);
        assert_eq!(a.evaluated_users.len(), 30);
        assert_eq!(a, run());
    }
}
