//! Adversarial fairness filtering on warm source users.
//!
//! A two-layer filter rewrites raw user embeddings while a deeper
//! discriminator tries to recover the sensitive bit from the filtered rows.
//! Training alternates per batch: the recommender and filter descend on the
//! composite loss (recommendation minus the weighted adversary loss), then
//! the frozen-filter discriminator takes several catch-up steps on its own
//! loss. Early stopping watches source validation NDCG@10.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{sample_negatives, DataError, DomainSplit, InteractionDataset};
use crate::evalkit::{discriminator_net, evaluate_ranking, EvalError, EvalRole};
use crate::numkit::rng::{derive_seed, salts, stream};
use crate::numkit::{
    adam_step, Matrix, MlpNet, MlpOptions, NumError, OptimizerState, Phase, Tape,
};
use crate::recmodels::{bpr_loss, init_model, l2_penalty, ModelState, ScorerKind};

#[derive(Debug, thiserror::Error)]
pub enum FairError {
    #[error("user {0} outside the source domain")]
    Domain(usize),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Loss magnitude treated as divergence even while still finite.
const DIVERGENCE_BOUND: f64 = 1e12;

/// Two affine layers with batch norm and leaky-ReLU between them; input and
/// output dimension are both `d`.
pub fn filter_net(d: usize, rng: &mut ChaCha8Rng) -> MlpNet {
    MlpNet::new(&[d, d, d], MlpOptions { hidden_norm: true, ..MlpOptions::default() }, rng)
}

#[derive(Clone, Debug)]
pub struct Step1Config {
    /// Adversary weight; the sweep grid is {1, 5, 10}, zero disables the
    /// adversary entirely.
    pub lambda_a: f64,
    /// Discriminator catch-up steps per alternation round.
    pub t_disc: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Discriminator hidden width; defaults to twice the embedding dimension.
    pub disc_hidden: Option<usize>,
    pub seed: u64,
}

impl Default for Step1Config {
    fn default() -> Self {
        Step1Config {
            lambda_a: 1.0,
            t_disc: 10,
            learning_rate: 1e-3,
            l2: 1e-5,
            batch_size: 512,
            max_epochs: 50,
            patience: 5,
            disc_hidden: None,
            seed: 0,
        }
    }
}

/// One training batch: aligned users, positive items, sampled negatives, and
/// sensitive labels.
#[derive(Clone, Debug)]
pub struct Step1Batch {
    pub users: Vec<usize>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Step1Grads {
    pub user_emb: Vec<f64>,
    pub score: Vec<Vec<f64>>,
    pub filter: Vec<Vec<f64>>,
    pub disc: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Step1Loss {
    pub l1: f64,
    pub l_rec: f64,
    pub l_a: f64,
    pub grads: Step1Grads,
}

/// Composite first-step loss on one batch: mean recommendation loss minus
/// `lambda_a` times the discriminator's mean logistic loss, plus batch-local
/// L2. Gradients cover every parameter group; callers apply the groups they
/// train. Batch norm uses batch statistics; `update_stats` controls whether
/// running statistics absorb them.
#[allow(clippy::too_many_arguments)]
pub fn step1_loss(
    model: &mut ModelState,
    filter: &mut MlpNet,
    disc: &mut MlpNet,
    source_users: &BTreeSet<usize>,
    batch: &Step1Batch,
    lambda_a: f64,
    l2: f64,
    update_stats: bool,
    drop_rng: &mut ChaCha8Rng,
) -> Result<Step1Loss, FairError> {
    if let Some(&u) = batch.users.iter().find(|u| !source_users.contains(u)) {
        return Err(FairError::Domain(u));
    }
    let mut tape = Tape::new();
    let (raw, user_table) = model.user_rows_raw(&mut tape, &batch.users)?;
    let ft = filter.forward(&mut tape, raw, Phase::Train { update_stats }, None)?;
    let pt = model.score_batch(&mut tape, ft.out, &batch.users, &batch.pos)?;
    let nt = model.score_batch(&mut tape, ft.out, &batch.users, &batch.neg)?;
    let l_rec = bpr_loss(&mut tape, pt.scores, nt.scores)?;
    let mut loss = if l2 > 0.0 {
        let reg = l2_penalty(&mut tape, &[raw, pt.item_rows, nt.item_rows], l2);
        tape.add(l_rec, reg)?
    } else {
        l_rec
    };
    let mut l_a_value = 0.0;
    let mut disc_trace = None;
    if lambda_a > 0.0 {
        let dt = disc.forward(
            &mut tape,
            ft.out,
            Phase::Train { update_stats },
            Some(drop_rng),
        )?;
        let l_a = tape.bce_with_logits_mean(dt.out, &batch.labels)?;
        l_a_value = tape.scalar(l_a);
        let weighted = tape.scale(l_a, -lambda_a);
        loss = tape.add(loss, weighted)?;
        disc_trace = Some(dt);
    }
    tape.backward(loss);
    let grads = Step1Grads {
        user_emb: tape.grad_or_zeros(user_table),
        score: model.score_grads(&tape, &[&pt, &nt]),
        filter: filter.grads_from(&tape, &[&ft]),
        disc: match &disc_trace {
            Some(dt) => disc.grads_from(&tape, &[dt]),
            None => disc.param_lens().iter().map(|&l| vec![0.0; l]).collect(),
        },
    };
    Ok(Step1Loss {
        l1: tape.scalar(loss),
        l_rec: tape.scalar(l_rec),
        l_a: l_a_value,
        grads,
    })
}

/// Discriminator loss on filtered rows with the filter frozen (batch-stat
/// batch norm, no running update). Dropout applies when `drop_rng` is given;
/// gradients are returned only then.
fn disc_l_a(
    model: &ModelState,
    filter: &mut MlpNet,
    disc: &mut MlpNet,
    users: &[usize],
    labels: &[f64],
    drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Option<Vec<Vec<f64>>>), FairError> {
    let mut tape = Tape::new();
    let (raw, _) = model.user_rows_raw(&mut tape, users)?;
    let ft = filter.forward(&mut tape, raw, Phase::Train { update_stats: false }, None)?;
    let train = drop_rng.is_some();
    let phase = if train { Phase::Train { update_stats: false } } else { Phase::Eval };
    let dt = disc.forward(&mut tape, ft.out, phase, drop_rng)?;
    let l_a = tape.bce_with_logits_mean(dt.out, labels)?;
    if !train {
        return Ok((tape.scalar(l_a), None));
    }
    tape.backward(l_a);
    let grads = disc.grads_from(&tape, &[&dt]);
    Ok((tape.scalar(l_a), Some(grads)))
}

/// Filtered embedding of one source user, eval-mode filter (running batch
/// norm statistics, no dropout).
pub fn fair_user_embedding(
    model: &ModelState,
    filter: &MlpNet,
    source_users: &BTreeSet<usize>,
    user: usize,
) -> Result<Vec<f64>, FairError> {
    if !source_users.contains(&user) {
        return Err(FairError::Domain(user));
    }
    let x = Matrix::from_vec(1, model.d, model.user_emb.row(user).to_vec());
    let y = filter.eval_forward(&x)?;
    Ok(y.row(0).to_vec())
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundLog {
    pub l_rec: f64,
    pub l_a: f64,
    /// Discriminator loss on the round's batch before and after its catch-up
    /// steps, measured without dropout.
    pub disc_l_a_start: f64,
    pub disc_l_a_end: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Step1History {
    pub rounds: Vec<RoundLog>,
    pub val_ndcg: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

pub struct Step1Artifacts {
    pub model: ModelState,
    pub filter: MlpNet,
    pub disc: MlpNet,
    pub history: Step1History,
}

fn source_pairs(split: &DomainSplit) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for &u in &split.source_users() {
        for &v in &split.users[&u].train {
            pairs.push((u, v));
        }
    }
    pairs
}

/// Trains the fair source model by per-batch alternation. Returns the model,
/// filter, and discriminator at the best validation epoch plus the loss
/// history.
pub fn step1_train(
    ds: &InteractionDataset,
    split: &DomainSplit,
    kind: ScorerKind,
    d: usize,
    cfg: &Step1Config,
) -> Result<Step1Artifacts, FairError> {
    assert!(cfg.lambda_a >= 0.0, "adversary weight must be nonnegative");
    assert!(cfg.t_disc >= 1 && cfg.batch_size >= 2 && cfg.learning_rate > 0.0);
    let sources: BTreeSet<usize> = split.source_users().into_iter().collect();
    let source_list: Vec<usize> = sources.iter().copied().collect();
    if source_pairs(split).is_empty() {
        return Err(FairError::Invalid("no source training interactions".into()));
    }
    let has_val = source_list.iter().any(|u| split.users[u].val.is_some());

    let mut model = init_model(kind, d, ds.n_users, ds.n_items, cfg.seed);
    let mut filter = filter_net(d, &mut stream(cfg.seed, salts::NET_INIT, 10, 0));
    let hidden = cfg.disc_hidden.unwrap_or(2 * d);
    let mut disc =
        discriminator_net(d, hidden, 0.3, false, &mut stream(cfg.seed, salts::NET_INIT, 11, 0));

    let mut model_lens = model.train_param_lens();
    model_lens.extend(filter.param_lens());
    let mut opt_model = OptimizerState::adam(cfg.learning_rate, &model_lens);
    let mut opt_disc = OptimizerState::adam(cfg.learning_rate, &disc.param_lens());
    let mut drop_rng_a = stream(cfg.seed, salts::DROPOUT, 0, 1);
    let mut drop_rng_b = stream(cfg.seed, salts::DROPOUT, 0, 2);

    let mut history = Step1History::default();
    let mut best: Option<(f64, usize, ModelState, MlpNet, MlpNet)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        history.epochs_run = epoch + 1;
        let mut pairs = source_pairs(split);
        use rand::seq::SliceRandom;
        pairs.shuffle(&mut stream(cfg.seed, salts::SHUFFLE, epoch as u64, 0));

        let mut batches: Vec<&[(usize, usize)]> = pairs.chunks(cfg.batch_size).collect();
        // Batch norm needs two rows; fold a trailing singleton backwards.
        if batches.len() >= 2 && batches.last().unwrap().len() == 1 {
            batches.pop();
            let n = batches.len();
            let start = (n - 1) * cfg.batch_size;
            batches[n - 1] = &pairs[start..];
        }

        let mut pair_idx = 0u64;
        for chunk in batches {
            let mut batch = Step1Batch {
                users: Vec::with_capacity(chunk.len()),
                pos: Vec::with_capacity(chunk.len()),
                neg: Vec::with_capacity(chunk.len()),
                labels: Vec::with_capacity(chunk.len()),
            };
            for &(u, v) in chunk {
                let neg = sample_negatives(
                    ds,
                    u,
                    1,
                    &BTreeSet::new(),
                    derive_seed(cfg.seed, salts::SHUFFLE, epoch as u64, pair_idx),
                )?[0];
                pair_idx += 1;
                batch.users.push(u);
                batch.pos.push(v);
                batch.neg.push(neg);
                batch.labels.push(ds.sensitive[u] as f64);
            }

            let out = step1_loss(
                &mut model,
                &mut filter,
                &mut disc,
                &sources,
                &batch,
                cfg.lambda_a,
                cfg.l2,
                true,
                &mut drop_rng_a,
            )?;
            if !out.l1.is_finite() || out.l1.abs() > DIVERGENCE_BOUND {
                return Err(FairError::Diverged { epoch, loss: out.l1 });
            }
            let mut grads = vec![out.grads.user_emb];
            grads.extend(out.grads.score);
            grads.extend(out.grads.filter);
            let mut params = model.train_params_mut();
            params.extend(filter.flat_params_mut());
            adam_step(&mut params, &grads, &mut opt_model)?;

            let (mut start_l_a, mut end_l_a) = (0.0, 0.0);
            if cfg.lambda_a > 0.0 {
                start_l_a =
                    disc_l_a(&model, &mut filter, &mut disc, &batch.users, &batch.labels, None)?.0;
                for _ in 0..cfg.t_disc {
                    let (l, grads) = disc_l_a(
                        &model,
                        &mut filter,
                        &mut disc,
                        &batch.users,
                        &batch.labels,
                        Some(&mut drop_rng_b),
                    )?;
                    if !l.is_finite() || l.abs() > DIVERGENCE_BOUND {
                        return Err(FairError::Diverged { epoch, loss: l });
                    }
                    adam_step(
                        &mut disc.flat_params_mut(),
                        &grads.expect("training pass returns gradients"),
                        &mut opt_disc,
                    )?;
                }
                end_l_a =
                    disc_l_a(&model, &mut filter, &mut disc, &batch.users, &batch.labels, None)?.0;
            }
            history.rounds.push(RoundLog {
                l_rec: out.l_rec,
                l_a: out.l_a,
                disc_l_a_start: start_l_a,
                disc_l_a_end: end_l_a,
            });
        }

        if !has_val {
            continue;
        }
        let report = evaluate_ranking(
            &model,
            |u| {
                fair_user_embedding(&model, &filter, &sources, u)
                    .map_err(|e| EvalError::Protocol(e.to_string()))
            },
            ds,
            split,
            &source_list,
            EvalRole::Val,
            &[10],
            cfg.seed,
        )?;
        let ndcg = report.mean_ndcg[0];
        history.val_ndcg.push(ndcg);
        let improved = best.as_ref().map_or(true, |(b, ..)| ndcg > *b);
        if improved {
            best = Some((ndcg, epoch, model.clone(), filter.clone(), disc.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    if let Some((_, epoch, m, f, dn)) = best {
        history.best_epoch = Some(epoch);
        model = m;
        filter = f;
        disc = dn;
    }
    Ok(Step1Artifacts { model, filter, disc, history })
}
