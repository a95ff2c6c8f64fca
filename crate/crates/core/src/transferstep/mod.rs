//! Adversarial transfer of fair source embeddings to cold-start targets.
//!
//! Target users get randomly initialized seed embeddings; a mapping net
//! carries seeds into the fair source embedding space while a spectrally
//! normalized domain discriminator tries to tell mapped targets from fair
//! source rows. Unsupervised training is the plain min-max alternation;
//! supervised training folds a recommendation loss over the targets' few
//! interactions into the mapping objective. Source-side parameters are
//! frozen by construction: this module takes them by shared reference.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{sample_negatives, DataError, DomainSplit, InteractionDataset};
use crate::evalkit::{
    discriminator_net, evaluate_ranking, train_attacker, AttackerConfig, EvalError, EvalRole,
};
use crate::numkit::layers::spectral_normalize;
use crate::numkit::rng::{derive_seed, salts, stream};
use crate::numkit::{
    adam_step, sgd_step, Matrix, MlpNet, MlpOptions, NumError, OptimizerState, Phase, Tape,
};
use crate::recmodels::{bpr_loss, ModelState};

/// Loss magnitude treated as divergence even while still finite.
const DIVERGENCE_BOUND: f64 = 1e12;
/// Power iterations for the initial spectral projection; per-step projections
/// warm-start from the stored vectors and need only one.
const SPECTRAL_INIT_ITERS: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("training diverged at round {round}: loss {loss}")]
    Diverged { round: usize, loss: f64 },
    #[error("invalid transfer setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Frozen target seed embeddings, N(0, 0.01 squared); the mapping trains
/// against them in unsupervised mode, and they join the trainable set in
/// supervised mode.
pub fn init_target_seeds(n_targets: usize, k: usize, seed: u64) -> Matrix {
    Matrix::randn(n_targets, k, 0.01, &mut stream(seed, salts::TARGET_SEEDS, 0, 0))
}

/// Four affine layers `k -> d -> d -> d -> d` with batch norm on the hidden
/// activations and a plain affine output.
pub fn mapping_net(k: usize, d: usize, rng: &mut ChaCha8Rng) -> MlpNet {
    MlpNet::new(&[k, d, d, d, d], MlpOptions { hidden_norm: true, ..MlpOptions::default() }, rng)
}

/// Domain discriminator: the shared six-layer stack with dropout plus
/// spectral normalization, projected once so every weight starts inside the
/// unit spectral ball.
pub fn domain_disc_net(d: usize, hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> MlpNet {
    let mut net = discriminator_net(d, hidden, dropout, true, rng);
    project_spectral(&mut net, SPECTRAL_INIT_ITERS);
    net
}

/// Divides every affine weight by its power-iteration top singular value;
/// returns the per-layer estimates.
pub fn project_spectral(net: &mut MlpNet, iters: usize) -> Vec<f64> {
    net.layers.iter_mut().map(|l| spectral_normalize(l, iters)).collect()
}

#[derive(Clone, Debug)]
pub struct Step2Config {
    /// Weight on the adversarial term of the supervised objective; the tuning
    /// range is [1, 10]. Unused in unsupervised mode.
    pub lambda_d: f64,
    /// Mapping (and supervised seed) Adam learning rate.
    pub map_lr: f64,
    /// Discriminator SGD learning rate; tuned within [1e-4, 1e-3].
    pub disc_lr: f64,
    /// Discriminator dropout; tuned within [0.3, 0.5].
    pub disc_dropout: f64,
    /// Discriminator hidden width; defaults to twice the embedding dimension.
    pub disc_hidden: Option<usize>,
    pub batch_size: usize,
    /// Unsupervised round cap.
    pub max_rounds: usize,
    /// Trailing rounds averaged for the accuracy stopping band.
    pub window: usize,
    /// Rounds before the stopping band is consulted; an untrained
    /// discriminator also sits near one-half accuracy.
    pub min_rounds: usize,
    /// Supervised epoch cap and validation patience.
    pub max_epochs: usize,
    pub patience: usize,
    /// Replace the saturating mapping objective log(1 - D(M(r))) with
    /// -log D(M(r)).
    pub non_saturating: bool,
    pub seed: u64,
}

impl Default for Step2Config {
    fn default() -> Self {
        Step2Config {
            lambda_d: 1.0,
            map_lr: 1e-3,
            disc_lr: 5e-4,
            disc_dropout: 0.3,
            disc_hidden: None,
            batch_size: 128,
            max_rounds: 2000,
            window: 20,
            min_rounds: 200,
            max_epochs: 50,
            patience: 5,
            non_saturating: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Step2Round {
    pub disc_loss: f64,
    pub map_loss: f64,
    /// Fraction of the discriminator batch classified correctly; logits at
    /// exactly zero score half.
    pub disc_acc: f64,
    /// Supervised rounds carry the recommendation term; zero otherwise.
    pub l_rec: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Step2History {
    pub rounds: Vec<Step2Round>,
    pub val_ndcg: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    /// Unsupervised: the accuracy band stopped training before the round cap.
    pub converged: bool,
}

pub struct Step2Artifacts {
    pub mapping: MlpNet,
    pub disc: MlpNet,
    /// Seed embeddings as trained (identical to the input in unsupervised
    /// mode).
    pub seeds: Matrix,
    /// Mapped target embeddings, one row per seed row, eval-mode mapping.
    pub target_emb: Matrix,
    pub history: Step2History,
}

/// Filtered source embeddings in `users` order, eval-mode filter.
pub fn fair_source_matrix(
    model: &ModelState,
    filter: &MlpNet,
    users: &[usize],
) -> Result<Matrix, TransferError> {
    let mut rows = Matrix::zeros(users.len(), model.d);
    for (r, &u) in users.iter().enumerate() {
        rows.row_mut(r).copy_from_slice(model.user_emb.row(u));
    }
    Ok(filter.eval_forward(&rows)?)
}

/// Bit-level hash over every source-side parameter and statistic; step-2
/// calls must leave it unchanged.
pub fn source_fingerprint(model: &ModelState, filter: &MlpNet) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |vs: &[f64]| {
        for v in vs {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(model.user_emb.data());
    eat(model.item_emb.data());
    for b in [&model.user_bias, &model.item_bias, &model.global_bias].into_iter().flatten() {
        eat(b.data());
    }
    let mut eat_net = |net: &MlpNet| {
        for l in &net.layers {
            eat(l.weight.data());
            eat(&l.bias);
            if let Some(n) = &l.norm {
                eat(&n.gamma);
                eat(&n.beta);
                eat(&n.run_mean);
                eat(&n.run_var);
            }
        }
    };
    for net in [&model.user_tower, &model.item_tower, &model.scorer].into_iter().flatten() {
        eat_net(net);
    }
    eat_net(filter);
    h
}

fn check_finite(loss: f64, round: usize) -> Result<(), TransferError> {
    if !loss.is_finite() || loss.abs() > DIVERGENCE_BOUND {
        return Err(TransferError::Diverged { round, loss });
    }
    Ok(())
}

/// Measures both sides of the domain objective on given row batches: the
/// discriminator's logistic loss over (source = 1, mapped target = 0) and
/// the saturating mapping loss log(1 - D(mapped)). Dropout applies when a
/// stream is given.
pub fn domain_loss(
    disc: &mut MlpNet,
    source_rows: &Matrix,
    mapped_rows: &Matrix,
    mut drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, f64), TransferError> {
    if source_rows.rows() == 0 || mapped_rows.rows() == 0 {
        return Err(TransferError::Invalid("domain loss needs nonempty batches".into()));
    }
    let mut tape = Tape::new();
    let s = tape.leaf(source_rows);
    let t = tape.leaf(mapped_rows);
    let phase = if drop_rng.is_some() { Phase::Train { update_stats: false } } else { Phase::Eval };
    let zs = disc.forward(&mut tape, s, phase, drop_rng.as_deref_mut())?;
    let zt = disc.forward(&mut tape, t, phase, drop_rng.as_deref_mut())?;
    let neg_zs = tape.scale(zs.out, -1.0);
    let sp_s = tape.softplus_all(neg_zs);
    let sp_t = tape.softplus_all(zt.out);
    let ms = tape.mean_all(sp_s);
    let mt = tape.mean_all(sp_t);
    let disc_loss = tape.add(ms, mt)?;
    let map_loss = tape.scale(mt, -1.0);
    Ok((tape.scalar(disc_loss), tape.scalar(map_loss)))
}

fn batch_accuracy(zs: &[f64], zt: &[f64]) -> f64 {
    let score = |z: f64, want_positive: bool| {
        if z == 0.0 {
            0.5
        } else if (z > 0.0) == want_positive {
            1.0
        } else {
            0.0
        }
    };
    let total: f64 = zs.iter().map(|&z| score(z, true)).sum::<f64>()
        + zt.iter().map(|&z| score(z, false)).sum::<f64>();
    total / (zs.len() + zt.len()) as f64
}

pub struct DiscStepOut {
    pub loss: f64,
    pub acc: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Discriminator side of the min-max: descend the negated log likelihood of
/// (source = 1, mapped target = 0) with the mapping frozen (batch-statistic
/// batch norm, no running update).
pub fn disc_step_loss(
    mapping: &mut MlpNet,
    disc: &mut MlpNet,
    src_rows: &Matrix,
    seed_rows: &Matrix,
    drop_rng: &mut ChaCha8Rng,
) -> Result<DiscStepOut, TransferError> {
    let mut tape = Tape::new();
    let s = tape.leaf(src_rows);
    let t_in = tape.leaf(seed_rows);
    let mapped = mapping.forward(&mut tape, t_in, Phase::Train { update_stats: false }, None)?;
    let zs = disc.forward(&mut tape, s, Phase::Train { update_stats: false }, Some(drop_rng))?;
    let zt = disc.forward(&mut tape, mapped.out, Phase::Train { update_stats: false }, Some(drop_rng))?;
    let acc = batch_accuracy(tape.value(zs.out), tape.value(zt.out));
    let neg_zs = tape.scale(zs.out, -1.0);
    let sp_s = tape.softplus_all(neg_zs);
    let sp_t = tape.softplus_all(zt.out);
    let ms = tape.mean_all(sp_s);
    let mt = tape.mean_all(sp_t);
    let loss = tape.add(ms, mt)?;
    tape.backward(loss);
    Ok(DiscStepOut {
        loss: tape.scalar(loss),
        acc,
        grads: disc.grads_from(&tape, &[&zs, &zt]),
    })
}

pub struct MapStepOut {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Mapping side: minimize log(1 - D(M(seed))) (or -log D with the
/// non-saturating flag) with the discriminator frozen but its dropout live.
pub fn map_step_loss(
    mapping: &mut MlpNet,
    disc: &mut MlpNet,
    seed_rows: &Matrix,
    non_saturating: bool,
    update_stats: bool,
    drop_rng: &mut ChaCha8Rng,
) -> Result<MapStepOut, TransferError> {
    let mut tape = Tape::new();
    let t_in = tape.leaf(seed_rows);
    let mapped = mapping.forward(&mut tape, t_in, Phase::Train { update_stats }, None)?;
    let zt = disc.forward(&mut tape, mapped.out, Phase::Train { update_stats: false }, Some(drop_rng))?;
    let loss = if non_saturating {
        let neg = tape.scale(zt.out, -1.0);
        let sp = tape.softplus_all(neg);
        tape.mean_all(sp)
    } else {
        let sp = tape.softplus_all(zt.out);
        let m = tape.mean_all(sp);
        tape.scale(m, -1.0)
    };
    tape.backward(loss);
    Ok(MapStepOut { loss: tape.scalar(loss), grads: mapping.grads_from(&tape, &[&mapped]) })
}

fn sample_rows(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..n)).collect()
}

fn gather_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Unsupervised step 2: alternate one discriminator SGD step and one mapping
/// Adam step per round on resampled batches until the trailing-window
/// discriminator accuracy sits in [0.45, 0.55] or the round cap. Consumes no
/// interactions; the seeds stay frozen.
pub fn step2_unsupervised(
    fair_src: &Matrix,
    seeds: &Matrix,
    cfg: &Step2Config,
) -> Result<Step2Artifacts, TransferError> {
    if fair_src.rows() == 0 || seeds.rows() == 0 {
        return Err(TransferError::Invalid("unsupervised transfer needs source and target rows".into()));
    }
    assert!(cfg.batch_size >= 2 && cfg.window >= 1);
    let d = fair_src.cols();
    let k = seeds.cols();
    let mut mapping = mapping_net(k, d, &mut stream(cfg.seed, salts::NET_INIT, 20, 0));
    let hidden = cfg.disc_hidden.unwrap_or(2 * d);
    let mut disc = domain_disc_net(
        d,
        hidden,
        cfg.disc_dropout,
        &mut stream(cfg.seed, salts::NET_INIT, 21, 0),
    );

    let mut opt_map = OptimizerState::adam(cfg.map_lr, &mapping.param_lens());
    let mut opt_disc = OptimizerState::sgd(cfg.disc_lr);
    let mut batch_rng = stream(cfg.seed, salts::DOMAIN_BATCH, 0, 0);
    let mut drop_disc = stream(cfg.seed, salts::DROPOUT, 0, 3);
    let mut drop_map = stream(cfg.seed, salts::DROPOUT, 0, 4);

    let mut history = Step2History::default();
    for round in 0..cfg.max_rounds {
        let src_idx = sample_rows(fair_src.rows(), cfg.batch_size, &mut batch_rng);
        let tgt_idx = sample_rows(seeds.rows(), cfg.batch_size, &mut batch_rng);
        let src_batch = gather_rows(fair_src, &src_idx);
        let tgt_batch = gather_rows(seeds, &tgt_idx);
        let dout = disc_step_loss(&mut mapping, &mut disc, &src_batch, &tgt_batch, &mut drop_disc)?;
        check_finite(dout.loss, round)?;
        sgd_step(&mut disc.flat_params_mut(), &dout.grads, &mut opt_disc)?;
        project_spectral(&mut disc, 1);

        let map_idx = sample_rows(seeds.rows(), cfg.batch_size, &mut batch_rng);
        let map_batch = gather_rows(seeds, &map_idx);
        let mout = map_step_loss(
            &mut mapping,
            &mut disc,
            &map_batch,
            cfg.non_saturating,
            true,
            &mut drop_map,
        )?;
        check_finite(mout.loss, round)?;
        adam_step(&mut mapping.flat_params_mut(), &mout.grads, &mut opt_map)?;

        history.rounds.push(Step2Round {
            disc_loss: dout.loss,
            map_loss: mout.loss,
            disc_acc: dout.acc,
            l_rec: 0.0,
        });
        if round + 1 >= cfg.min_rounds.max(cfg.window) {
            let tail = &history.rounds[history.rounds.len() - cfg.window..];
            let mean_acc = tail.iter().map(|r| r.disc_acc).sum::<f64>() / cfg.window as f64;
            if (0.45..=0.55).contains(&mean_acc) {
                history.converged = true;
                break;
            }
        }
    }
    let target_emb = mapping.eval_forward(seeds)?;
    Ok(Step2Artifacts { mapping, disc, seeds: seeds.clone(), target_emb, history })
}

/// One supervised batch: aligned seed-row indices, model user ids, item
/// pairs, plus a separate seed-row sample for the adversarial term.
#[derive(Clone, Debug)]
pub struct SupBatch {
    pub seed_rows: Vec<usize>,
    pub users: Vec<usize>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    pub adv_rows: Vec<usize>,
}

pub struct SupLossOut {
    pub loss: f64,
    pub l_rec: f64,
    /// Gradient over the full seed table (scatter-added).
    pub seed_grads: Vec<f64>,
    pub map_grads: Vec<Vec<f64>>,
}

/// Supervised objective on one batch: mean recommendation loss scored with
/// mapped seeds against the frozen model, plus `lambda_d` times the
/// saturating adversarial term over a separate target sample. Gradients
/// cover the seed table and the mapping only.
pub fn supervised_loss(
    model: &ModelState,
    mapping: &mut MlpNet,
    disc: &mut MlpNet,
    seeds: &Matrix,
    batch: &SupBatch,
    lambda_d: f64,
    update_stats: bool,
    drop_rng: &mut ChaCha8Rng,
) -> Result<SupLossOut, TransferError> {
    assert_eq!(batch.seed_rows.len(), batch.users.len());
    assert_eq!(batch.users.len(), batch.pos.len());
    assert_eq!(batch.pos.len(), batch.neg.len());
    let mut scoring = model.clone();
    let mut tape = Tape::new();
    let table = tape.leaf(seeds);
    let rec_in = tape.gather(table, &batch.seed_rows)?;
    let mapped = mapping.forward(&mut tape, rec_in, Phase::Train { update_stats }, None)?;
    let pt = scoring.score_batch(&mut tape, mapped.out, &batch.users, &batch.pos)?;
    let nt = scoring.score_batch(&mut tape, mapped.out, &batch.users, &batch.neg)?;
    let l_rec = bpr_loss(&mut tape, pt.scores, nt.scores)?;
    let mut loss = l_rec;
    let mut map_traces = vec![&mapped];
    let adv_trace;
    if lambda_d > 0.0 {
        if batch.adv_rows.is_empty() {
            return Err(TransferError::Invalid("adversarial term needs target rows".into()));
        }
        let adv_in = tape.gather(table, &batch.adv_rows)?;
        let am = mapping.forward(&mut tape, adv_in, Phase::Train { update_stats }, None)?;
        let zt = disc.forward(&mut tape, am.out, Phase::Train { update_stats: false }, Some(drop_rng))?;
        let sp = tape.softplus_all(zt.out);
        let m = tape.mean_all(sp);
        let adv = tape.scale(m, -lambda_d);
        loss = tape.add(l_rec, adv)?;
        adv_trace = Some(am);
        map_traces.push(adv_trace.as_ref().unwrap());
    }
    tape.backward(loss);
    Ok(SupLossOut {
        loss: tape.scalar(loss),
        l_rec: tape.scalar(l_rec),
        seed_grads: tape.grad_or_zeros(table),
        map_grads: mapping.grads_from(&tape, &map_traces),
    })
}

/// Mapped embedding of one seed row, eval-mode mapping.
pub fn mapped_row(mapping: &MlpNet, seeds: &Matrix, row: usize) -> Result<Vec<f64>, TransferError> {
    let x = Matrix::from_vec(1, seeds.cols(), seeds.row(row).to_vec());
    Ok(mapping.eval_forward(&x)?.row(0).to_vec())
}

/// Supervised step 2: epochs over the targets' few training pairs. Each
/// batch takes one Adam step on the seeds and mapping, then one
/// discriminator SGD step on the domain objective; early stopping watches
/// target validation NDCG@10. At `lambda_d` zero the discriminator is
/// skipped entirely and training reduces to fitting the targets by ranking
/// loss alone.
pub fn step2_supervised(
    model: &ModelState,
    fair_src: &Matrix,
    seeds: &Matrix,
    ds: &InteractionDataset,
    split: &DomainSplit,
    cfg: &Step2Config,
) -> Result<Step2Artifacts, TransferError> {
    assert!(cfg.lambda_d >= 0.0, "adversary weight must be nonnegative");
    assert!(cfg.batch_size >= 2);
    let targets = split.target_users();
    if targets.len() != seeds.rows() {
        return Err(TransferError::Invalid(format!(
            "{} seed rows for {} target users",
            seeds.rows(),
            targets.len()
        )));
    }
    let row_of: BTreeMap<usize, usize> = targets.iter().enumerate().map(|(r, &u)| (u, r)).collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for &u in &targets {
        for &v in &split.users[&u].train {
            pairs.push((u, v));
        }
    }
    if pairs.len() < 2 {
        return Err(TransferError::Invalid("supervised transfer needs at least two training pairs".into()));
    }
    let has_val = targets.iter().any(|u| split.users[u].val.is_some());

    let d = model.d;
    let k = seeds.cols();
    let mut seeds = seeds.clone();
    let mut mapping = mapping_net(k, d, &mut stream(cfg.seed, salts::NET_INIT, 20, 0));
    let hidden = cfg.disc_hidden.unwrap_or(2 * d);
    let mut disc = domain_disc_net(
        d,
        hidden,
        cfg.disc_dropout,
        &mut stream(cfg.seed, salts::NET_INIT, 21, 0),
    );

    let mut lens = vec![seeds.rows() * seeds.cols()];
    lens.extend(mapping.param_lens());
    let mut opt_map = OptimizerState::adam(cfg.map_lr, &lens);
    let mut opt_disc = OptimizerState::sgd(cfg.disc_lr);
    let mut adv_rng = stream(cfg.seed, salts::DOMAIN_BATCH, 1, 0);
    let mut disc_rng = stream(cfg.seed, salts::DOMAIN_BATCH, 2, 0);
    let mut drop_a = stream(cfg.seed, salts::DROPOUT, 0, 5);
    let mut drop_b = stream(cfg.seed, salts::DROPOUT, 0, 6);

    let mut history = Step2History::default();
    let mut best: Option<(f64, usize, Matrix, MlpNet, MlpNet)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        history.epochs_run = epoch + 1;
        let mut epoch_pairs = pairs.clone();
        use rand::seq::SliceRandom;
        epoch_pairs.shuffle(&mut stream(cfg.seed, salts::SHUFFLE, epoch as u64, 1));

        let mut batches: Vec<&[(usize, usize)]> = epoch_pairs.chunks(cfg.batch_size).collect();
        // Batch norm needs two rows; fold a trailing singleton backwards.
        if batches.len() >= 2 && batches.last().unwrap().len() == 1 {
            batches.pop();
            let n = batches.len();
            let start = (n - 1) * cfg.batch_size;
            batches[n - 1] = &epoch_pairs[start..];
        }

        let mut pair_idx = 0u64;
        for chunk in batches {
            let mut batch = SupBatch {
                seed_rows: Vec::with_capacity(chunk.len()),
                users: Vec::with_capacity(chunk.len()),
                pos: Vec::with_capacity(chunk.len()),
                neg: Vec::with_capacity(chunk.len()),
                adv_rows: Vec::new(),
            };
            for &(u, v) in chunk {
                let neg = sample_negatives(
                    ds,
                    u,
                    1,
                    &std::collections::BTreeSet::new(),
                    derive_seed(cfg.seed, salts::SHUFFLE, epoch as u64, pair_idx),
                )?[0];
                pair_idx += 1;
                batch.seed_rows.push(row_of[&u]);
                batch.users.push(u);
                batch.pos.push(v);
                batch.neg.push(neg);
            }
            if cfg.lambda_d > 0.0 {
                batch.adv_rows = sample_rows(seeds.rows(), cfg.batch_size.max(2), &mut adv_rng);
            }

            let out = supervised_loss(
                model,
                &mut mapping,
                &mut disc,
                &seeds,
                &batch,
                cfg.lambda_d,
                true,
                &mut drop_a,
            )?;
            check_finite(out.loss, epoch)?;
            let mut grads = vec![out.seed_grads];
            grads.extend(out.map_grads);
            let mut params: Vec<&mut [f64]> = vec![seeds.data_mut()];
            params.extend(mapping.flat_params_mut());
            adam_step(&mut params, &grads, &mut opt_map)?;

            let (mut disc_loss, mut acc) = (0.0, 0.5);
            if cfg.lambda_d > 0.0 {
                let src_idx = sample_rows(fair_src.rows(), cfg.batch_size, &mut disc_rng);
                let tgt_idx = sample_rows(seeds.rows(), cfg.batch_size, &mut disc_rng);
                let src_batch = gather_rows(fair_src, &src_idx);
                let tgt_batch = gather_rows(&seeds, &tgt_idx);
                let dout =
                    disc_step_loss(&mut mapping, &mut disc, &src_batch, &tgt_batch, &mut drop_b)?;
                check_finite(dout.loss, epoch)?;
                sgd_step(&mut disc.flat_params_mut(), &dout.grads, &mut opt_disc)?;
                project_spectral(&mut disc, 1);
                disc_loss = dout.loss;
                acc = dout.acc;
            }
            history.rounds.push(Step2Round {
                disc_loss,
                map_loss: out.loss - out.l_rec,
                disc_acc: acc,
                l_rec: out.l_rec,
            });
        }

        if !has_val {
            continue;
        }
        let report = evaluate_ranking(
            model,
            |u| {
                mapped_row(&mapping, &seeds, row_of[&u])
                    .map_err(|e| EvalError::Protocol(e.to_string()))
            },
            ds,
            split,
            &targets,
            EvalRole::Val,
            &[10],
            cfg.seed,
        )?;
        let ndcg = report.mean_ndcg[0];
        history.val_ndcg.push(ndcg);
        let improved = best.as_ref().map_or(true, |(b, ..)| ndcg > *b);
        if improved {
            best = Some((ndcg, epoch, seeds.clone(), mapping.clone(), disc.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    if let Some((_, epoch, s, m, dn)) = best {
        history.best_epoch = Some(epoch);
        seeds = s;
        mapping = m;
        disc = dn;
    }
    let target_emb = mapping.eval_forward(&seeds)?;
    Ok(Step2Artifacts { mapping, disc, seeds, target_emb, history })
}

/// Empirical check of the transfer argument's conclusion chain.
#[derive(Clone, Debug, Serialize)]
pub struct TheoremReport {
    /// Sensitive-attribute attacker on filtered source embeddings.
    pub step1_auc: f64,
    /// Domain attacker separating filtered source rows from mapped targets.
    pub domain_auc: f64,
    /// Sensitive-attribute attacker on mapped target embeddings.
    pub transfer_auc: f64,
}

/// Trains three post-hoc attackers: sensitive recovery on the fair source
/// rows, source-versus-mapped domain separation, and sensitive recovery on
/// the mapped target rows. Values near one-half mean the corresponding
/// information is absent.
pub fn theorem_check(
    fair_src: &Matrix,
    src_sensitive: &[u8],
    mapped: &Matrix,
    tgt_sensitive: &[u8],
    seed: u64,
) -> Result<TheoremReport, TransferError> {
    assert_eq!(fair_src.rows(), src_sensitive.len());
    assert_eq!(mapped.rows(), tgt_sensitive.len());
    let run = |emb: &Matrix, labels: &[u8], ix: u64| -> Result<f64, TransferError> {
        let cfg = AttackerConfig { seed: derive_seed(seed, salts::ATTACKER, 100, ix), ..AttackerConfig::default() };
        Ok(train_attacker(emb, labels, &cfg)?.auc)
    };
    let step1_auc = run(fair_src, src_sensitive, 0)?;
    let mut both = Matrix::zeros(fair_src.rows() + mapped.rows(), fair_src.cols());
    let mut domain_labels = Vec::with_capacity(both.rows());
    for r in 0..fair_src.rows() {
        both.row_mut(r).copy_from_slice(fair_src.row(r));
        domain_labels.push(1u8);
    }
    for r in 0..mapped.rows() {
        both.row_mut(fair_src.rows() + r).copy_from_slice(mapped.row(r));
        domain_labels.push(0u8);
    }
    let domain_auc = run(&both, &domain_labels, 1)?;
    let transfer_auc = run(mapped, tgt_sensitive, 2)?;
    Ok(TheoremReport { step1_auc, domain_auc, transfer_auc })
}
