//! Scoring models over user and item embedding tables.
//!
//! Four scorer families share one interface: a dot product (`pmf`), a dot
//! product with bias terms (`biasedmf`), twin tower nets feeding a dot
//! product (`dmf`), and a net over the concatenated pair (`mlp`). User rows
//! enter scoring as a tape buffer, so raw, filtered, and mapped embeddings
//! all share the same path.

use std::str::FromStr;

use crate::numkit::rng::{salts, stream};
use crate::numkit::{BufId, Matrix, MlpNet, MlpOptions, NumError, Phase, Tape};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("no candidates to rank")]
    EmptyCandidates,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerKind {
    Pmf,
    BiasedMf,
    Dmf,
    Mlp,
}

impl FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pmf" => Ok(ScorerKind::Pmf),
            "biasedmf" => Ok(ScorerKind::BiasedMf),
            "dmf" => Ok(ScorerKind::Dmf),
            "mlp" => Ok(ScorerKind::Mlp),
            other => Err(format!("unknown scorer {other:?} (want pmf|biasedmf|dmf|mlp)")),
        }
    }
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Pmf => "pmf",
            ScorerKind::BiasedMf => "biasedmf",
            ScorerKind::Dmf => "dmf",
            ScorerKind::Mlp => "mlp",
        }
    }
}

/// Embedding tables plus any scorer-specific parameters.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub kind: ScorerKind,
    pub d: usize,
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    pub user_bias: Option<Matrix>,
    pub item_bias: Option<Matrix>,
    pub global_bias: Option<Matrix>,
    pub user_tower: Option<MlpNet>,
    pub item_tower: Option<MlpNet>,
    pub scorer: Option<MlpNet>,
}

/// Embedding entries start at N(0, 0.01^2); bias terms start at zero.
pub const EMB_INIT_STD: f64 = 0.01;

pub fn init_model(kind: ScorerKind, d: usize, n_users: usize, n_items: usize, seed: u64) -> ModelState {
    assert!(d >= 2, "embedding dimension too small");
    let user_emb = Matrix::randn(n_users, d, EMB_INIT_STD, &mut stream(seed, salts::MODEL_INIT, 0, 0));
    let item_emb = Matrix::randn(n_items, d, EMB_INIT_STD, &mut stream(seed, salts::MODEL_INIT, 1, 0));
    let mut state = ModelState {
        kind,
        d,
        user_emb,
        item_emb,
        user_bias: None,
        item_bias: None,
        global_bias: None,
        user_tower: None,
        item_tower: None,
        scorer: None,
    };
    let plain = MlpOptions::default();
    match kind {
        ScorerKind::Pmf => {}
        ScorerKind::BiasedMf => {
            state.user_bias = Some(Matrix::zeros(n_users, 1));
            state.item_bias = Some(Matrix::zeros(n_items, 1));
            state.global_bias = Some(Matrix::zeros(1, 1));
        }
        ScorerKind::Dmf => {
            let opts = MlpOptions { final_activation: true, ..plain };
            state.user_tower =
                Some(MlpNet::new(&[d, d, d], opts.clone(), &mut stream(seed, salts::NET_INIT, 0, 0)));
            state.item_tower =
                Some(MlpNet::new(&[d, d, d], opts, &mut stream(seed, salts::NET_INIT, 1, 0)));
        }
        ScorerKind::Mlp => {
            let sizes = [2 * d, d, (d / 2).max(1), 1];
            state.scorer =
                Some(MlpNet::new(&sizes, plain, &mut stream(seed, salts::NET_INIT, 2, 0)));
        }
    }
    state
}

/// One scoring pass on a tape: the n x 1 score column plus the parameter
/// buffers in [`ModelState::score_params_mut`] order. `item_rows` exposes the
/// gathered item embeddings for batch-local regularization.
pub struct ScoreTrace {
    pub scores: BufId,
    pub item_rows: BufId,
    pub params: Vec<BufId>,
}

impl ModelState {
    /// Gathers raw user embedding rows; the second id is the table leaf whose
    /// gradient scatters back over the batch rows.
    pub fn user_rows_raw(&self, tape: &mut Tape, user_ids: &[usize]) -> Result<(BufId, BufId), NumError> {
        let table = tape.leaf(&self.user_emb);
        let rows = tape.gather(table, user_ids)?;
        Ok((rows, table))
    }

    /// Scores each (user row, item) pair. The scorer nets carry no batch norm
    /// or dropout, so scoring has no train/eval distinction.
    pub fn score_batch(
        &mut self,
        tape: &mut Tape,
        user_rows: BufId,
        user_ids: &[usize],
        item_ids: &[usize],
    ) -> Result<ScoreTrace, NumError> {
        assert_eq!(user_ids.len(), item_ids.len(), "batch columns disagree");
        let item_table = tape.leaf(&self.item_emb);
        let item_rows = tape.gather(item_table, item_ids)?;
        let mut params = vec![item_table];
        let scores = match self.kind {
            ScorerKind::Pmf => tape.row_dot(user_rows, item_rows)?,
            ScorerKind::BiasedMf => {
                let dot = tape.row_dot(user_rows, item_rows)?;
                let ub_table = tape.leaf(self.user_bias.as_ref().unwrap());
                let ib_table = tape.leaf(self.item_bias.as_ref().unwrap());
                let g = tape.leaf(self.global_bias.as_ref().unwrap());
                params.extend([ub_table, ib_table, g]);
                let ub = tape.gather(ub_table, user_ids)?;
                let ib = tape.gather(ib_table, item_ids)?;
                let sum = tape.add(dot, ub)?;
                let sum = tape.add(sum, ib)?;
                tape.add_scalar(sum, g)?
            }
            ScorerKind::Dmf => {
                let ut = self.user_tower.as_mut().unwrap().forward(
                    tape,
                    user_rows,
                    Phase::Eval,
                    None,
                )?;
                let it = self.item_tower.as_mut().unwrap().forward(
                    tape,
                    item_rows,
                    Phase::Eval,
                    None,
                )?;
                params.extend(&ut.params);
                params.extend(&it.params);
                tape.row_dot(ut.out, it.out)?
            }
            ScorerKind::Mlp => {
                let both = tape.concat_cols(user_rows, item_rows)?;
                let trace =
                    self.scorer.as_mut().unwrap().forward(tape, both, Phase::Eval, None)?;
                params.extend(&trace.params);
                trace.out
            }
        };
        Ok(ScoreTrace { scores, item_rows, params })
    }

    /// Tape-free scoring of one user row against a candidate list.
    pub fn score_candidates(
        &self,
        user: usize,
        user_row: &[f64],
        items: &[usize],
    ) -> Result<Vec<f64>, NumError> {
        assert_eq!(user_row.len(), self.d);
        let item_rows = {
            let mut m = Matrix::zeros(items.len(), self.d);
            for (r, &i) in items.iter().enumerate() {
                m.row_mut(r).copy_from_slice(self.item_emb.row(i));
            }
            m
        };
        let dot_against = |u: &[f64], rows: &Matrix| -> Vec<f64> {
            (0..rows.rows())
                .map(|r| rows.row(r).iter().zip(u).map(|(a, b)| a * b).sum())
                .collect()
        };
        match self.kind {
            ScorerKind::Pmf => Ok(dot_against(user_row, &item_rows)),
            ScorerKind::BiasedMf => {
                let ub = self.user_bias.as_ref().unwrap()[(user, 0)];
                let g = self.global_bias.as_ref().unwrap()[(0, 0)];
                let ib = self.item_bias.as_ref().unwrap();
                let mut scores = dot_against(user_row, &item_rows);
                for (s, &i) in scores.iter_mut().zip(items) {
                    *s += ub + ib[(i, 0)] + g;
                }
                Ok(scores)
            }
            ScorerKind::Dmf => {
                let u_in = Matrix::from_vec(1, self.d, user_row.to_vec());
                let u_out = self.user_tower.as_ref().unwrap().eval_forward(&u_in)?;
                let i_out = self.item_tower.as_ref().unwrap().eval_forward(&item_rows)?;
                Ok(dot_against(u_out.row(0), &i_out))
            }
            ScorerKind::Mlp => {
                let mut both = Matrix::zeros(items.len(), 2 * self.d);
                for r in 0..items.len() {
                    both.row_mut(r)[..self.d].copy_from_slice(user_row);
                    both.row_mut(r)[self.d..].copy_from_slice(item_rows.row(r));
                }
                let out = self.scorer.as_ref().unwrap().eval_forward(&both)?;
                Ok((0..items.len()).map(|r| out[(r, 0)]).collect())
            }
        }
    }

    /// Mutable views of the item-side and scorer parameters, in the order
    /// [`score_batch`] registers them. User embeddings are owned by the
    /// caller-facing gather path and excluded here.
    pub fn score_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.item_emb.data_mut()];
        if let Some(b) = self.user_bias.as_mut() {
            out.push(b.data_mut());
        }
        if let Some(b) = self.item_bias.as_mut() {
            out.push(b.data_mut());
        }
        if let Some(b) = self.global_bias.as_mut() {
            out.push(b.data_mut());
        }
        for net in [&mut self.user_tower, &mut self.item_tower, &mut self.scorer]
            .into_iter()
            .flatten()
        {
            out.extend(net.flat_params_mut());
        }
        out
    }

    /// Every trainable block: the user table first, then the
    /// [`Self::score_params_mut`] blocks in the same order.
    pub fn train_params_mut(&mut self) -> Vec<&mut [f64]> {
        let ModelState {
            user_emb,
            item_emb,
            user_bias,
            item_bias,
            global_bias,
            user_tower,
            item_tower,
            scorer,
            ..
        } = self;
        let mut out: Vec<&mut [f64]> = vec![user_emb.data_mut(), item_emb.data_mut()];
        for b in [user_bias, item_bias, global_bias].into_iter().flatten() {
            out.push(b.data_mut());
        }
        for net in [user_tower, item_tower, scorer].into_iter().flatten() {
            out.extend(net.flat_params_mut());
        }
        out
    }

    pub fn train_param_lens(&self) -> Vec<usize> {
        let mut out = vec![self.user_emb.rows() * self.user_emb.cols()];
        out.extend(self.score_param_lens());
        out
    }

    pub fn score_param_lens(&self) -> Vec<usize> {
        let mut out = vec![self.item_emb.rows() * self.item_emb.cols()];
        if let Some(b) = &self.user_bias {
            out.push(b.rows());
        }
        if let Some(b) = &self.item_bias {
            out.push(b.rows());
        }
        if self.global_bias.is_some() {
            out.push(1);
        }
        for net in [&self.user_tower, &self.item_tower, &self.scorer].into_iter().flatten() {
            out.extend(net.param_lens());
        }
        out
    }

    /// Sums buffer gradients across score traces, aligned with
    /// [`score_params_mut`].
    pub fn score_grads(&self, tape: &Tape, traces: &[&ScoreTrace]) -> Vec<Vec<f64>> {
        let lens = self.score_param_lens();
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| vec![0.0; l]).collect();
        for trace in traces {
            assert_eq!(trace.params.len(), grads.len(), "trace layout disagrees");
            for (acc, &id) in grads.iter_mut().zip(&trace.params) {
                if let Some(g) = tape.grad(id) {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
        }
        grads
    }
}

/// Mean BPR loss: softplus(-(pos - neg)) averaged over pairs.
pub fn bpr_loss(tape: &mut Tape, pos: BufId, neg: BufId) -> Result<BufId, NumError> {
    let diff = tape.sub(pos, neg)?;
    let neg_diff = tape.scale(diff, -1.0);
    let sp = tape.softplus_all(neg_diff);
    Ok(tape.mean_all(sp))
}

/// coef * sum of squared entries over the given buffers.
pub fn l2_penalty(tape: &mut Tape, bufs: &[BufId], coef: f64) -> BufId {
    let mut total = None;
    for &b in bufs {
        let sq = tape.sq_frobenius(b);
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq).expect("scalars always add"),
        });
    }
    let total = total.expect("at least one buffer");
    tape.scale(total, coef)
}

/// Top-n candidates by score, ties broken by ascending item index.
pub fn topn_recommend(
    model: &ModelState,
    user: usize,
    user_row: &[f64],
    candidates: &[usize],
    n: usize,
) -> Result<Vec<usize>, ModelError> {
    if candidates.is_empty() {
        return Err(ModelError::EmptyCandidates);
    }
    let scores = model.score_candidates(user, user_row, candidates)?;
    let mut order: Vec<(f64, usize)> = scores.iter().copied().zip(candidates.iter().copied()).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(n).map(|(_, i)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;

    #[test]
    fn embedding_init_moments_match() {
        let model = init_model(ScorerKind::Pmf, 100, 1000, 500, 3);
        for table in [&model.user_emb, &model.item_emb] {
            let data = table.data();
            let n = data.len() as f64;
            let mean: f64 = data.iter().sum::<f64>() / n;
            let var: f64 = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-3, "mean {mean}");
            assert!((var.sqrt() - EMB_INIT_STD).abs() / EMB_INIT_STD < 0.02, "std {}", var.sqrt());
        }
        assert_ne!(model.user_emb.data()[..10], model.item_emb.data()[..10]);
        let again = init_model(ScorerKind::Pmf, 100, 1000, 500, 3);
        assert_eq!(model.user_emb.data(), again.user_emb.data());
        let other = init_model(ScorerKind::Pmf, 100, 1000, 500, 4);
        assert_ne!(model.user_emb.data()[..10], other.user_emb.data()[..10]);
    }

    #[test]
    fn pmf_scores_are_bilinear_dots() {
        let mut model = init_model(ScorerKind::Pmf, 4, 3, 3, 0);
        model.item_emb = Matrix::from_vec(
            3,
            4,
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        );
        let row = [3.0, -1.0, 0.5, 2.0];
        let scores = model.score_candidates(0, &row, &[0, 1, 2]).unwrap();
        assert_eq!(scores, vec![3.0, -2.0, 0.0]);
        let doubled: Vec<f64> = row.iter().map(|x| 2.0 * x).collect();
        let scores2 = model.score_candidates(0, &doubled, &[0, 1, 2]).unwrap();
        for (a, b) in scores.iter().zip(&scores2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn biased_scores_reduce_to_bias_sums_on_zero_embeddings() {
        let mut model = init_model(ScorerKind::BiasedMf, 4, 2, 2, 0);
        model.item_emb = Matrix::zeros(2, 4);
        *model.user_bias.as_mut().unwrap() = Matrix::from_vec(2, 1, vec![0.5, -0.25]);
        *model.item_bias.as_mut().unwrap() = Matrix::from_vec(2, 1, vec![0.125, 2.0]);
        *model.global_bias.as_mut().unwrap() = Matrix::from_vec(1, 1, vec![10.0]);
        let scores = model.score_candidates(1, &[0.0; 4], &[0, 1]).unwrap();
        assert_eq!(scores, vec![10.0 - 0.25 + 0.125, 10.0 - 0.25 + 2.0]);
    }

    #[test]
    fn tape_and_eval_paths_agree() {
        for kind in [ScorerKind::Pmf, ScorerKind::BiasedMf, ScorerKind::Dmf, ScorerKind::Mlp] {
            let mut model = init_model(kind, 6, 5, 7, 9);
            // Spread the tiny init out so disagreements are visible.
            for v in model.item_emb.data_mut() {
                *v *= 40.0;
            }
            let users = [0usize, 3, 4];
            let items = [2usize, 0, 6];
            let mut tape = Tape::new();
            let (rows, _) = model.user_rows_raw(&mut tape, &users).unwrap();
            let trace = model.score_batch(&mut tape, rows, &users, &items).unwrap();
            let taped = tape.value(trace.scores).to_vec();
            for (b, (&u, &i)) in users.iter().zip(&items).enumerate() {
                let evald = model
                    .score_candidates(u, &model.user_emb.row(u).to_vec(), &[i])
                    .unwrap()[0];
                assert!((taped[b] - evald).abs() < 1e-12, "{kind:?} batch {b}");
            }
        }
    }

    #[test]
    fn repeated_scoring_is_bit_identical() {
        let model = init_model(ScorerKind::Dmf, 8, 4, 9, 2);
        let row = model.user_emb.row(1).to_vec();
        let a = model.score_candidates(1, &row, &[0, 3, 8]).unwrap();
        let b = model.score_candidates(1, &row, &[0, 3, 8]).unwrap();
        assert_eq!(a, b);
    }

    fn bpr_grad_check(kind: ScorerKind) {
        let seed_model = init_model(kind, 4, 6, 8, 5);
        let users = [0usize, 2, 5, 1];
        let pos = [1usize, 0, 7, 3];
        let neg = [4usize, 6, 2, 5];

        let mut params: Vec<Vec<f64>> = vec![seed_model.user_emb.data().to_vec()];
        {
            let mut m = seed_model.clone();
            for p in m.score_params_mut() {
                params.push(p.to_vec());
            }
        }
        // Lift parameters away from the tiny init so the loss curves; keep
        // every entry nonzero so the regularizer grips each coordinate.
        for block in params.iter_mut() {
            for (j, v) in block.iter_mut().enumerate() {
                *v = 0.4 * (*v * 90.0).sin() + 0.1 * ((j % 7) as f64 - 3.3) / 3.0;
            }
        }

        let report = grad_check(
            |p| {
                let mut model = seed_model.clone();
                model.user_emb.data_mut().copy_from_slice(&p[0]);
                for (dst, src) in model.score_params_mut().into_iter().zip(&p[1..]) {
                    dst.copy_from_slice(src);
                }
                let mut tape = Tape::new();
                let (rows, table) = model.user_rows_raw(&mut tape, &users)?;
                let pt = model.score_batch(&mut tape, rows, &users, &pos)?;
                let nt = model.score_batch(&mut tape, rows, &users, &neg)?;
                let loss = bpr_loss(&mut tape, pt.scores, nt.scores)?;
                // BPR alone leaves shared bias terms with zero gradient;
                // regularizing every parameter keeps the comparison away
                // from pure finite-difference noise.
                let mut reg_over = vec![rows];
                reg_over.extend(&pt.params);
                let reg = l2_penalty(&mut tape, &reg_over, 1e-2);
                let total = tape.add(loss, reg)?;
                tape.backward(total);
                let mut grads = vec![tape.grad_or_zeros(table)];
                grads.extend(model.score_grads(&tape, &[&pt, &nt]));
                Ok((tape.scalar(total), grads))
            },
            &mut params,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{kind:?}: max rel err {}", report.max_rel_err);
    }

    #[test]
    fn pmf_gradients_match_finite_differences() {
        bpr_grad_check(ScorerKind::Pmf);
    }

    #[test]
    fn biasedmf_gradients_match_finite_differences() {
        bpr_grad_check(ScorerKind::BiasedMf);
    }

    #[test]
    fn dmf_gradients_match_finite_differences() {
        bpr_grad_check(ScorerKind::Dmf);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        bpr_grad_check(ScorerKind::Mlp);
    }

    #[test]
    fn bpr_closed_form_at_zero_and_large_gaps() {
        let mut tape = Tape::new();
        let pos = tape.leaf(&Matrix::from_vec(2, 1, vec![0.0, 50.0]));
        let neg = tape.leaf(&Matrix::from_vec(2, 1, vec![0.0, 0.0]));
        let loss = bpr_loss(&mut tape, pos, neg).unwrap();
        // Pair 1 contributes ln 2, pair 2 essentially zero.
        assert!((tape.scalar(loss) - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn topn_matches_full_sort_and_breaks_ties_upward() {
        let mut model = init_model(ScorerKind::Pmf, 3, 2, 10, 1);
        for i in 0..10 {
            let v = ((i * 7) % 5) as f64;
            model.item_emb.row_mut(i).copy_from_slice(&[v, 0.0, 0.0]);
        }
        let row = [1.0, 0.0, 0.0];
        let candidates: Vec<usize> = (0..10).rev().collect();
        let top = topn_recommend(&model, 0, &row, &candidates, 10).unwrap();

        let scores = model.score_candidates(0, &row, &candidates).unwrap();
        let mut oracle: Vec<(f64, usize)> =
            scores.into_iter().zip(candidates.iter().copied()).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let oracle: Vec<usize> = oracle.into_iter().map(|(_, i)| i).collect();
        assert_eq!(top, oracle);

        // Scores repeat every 5 items; ties resolve to the lower index.
        let tied = topn_recommend(&model, 0, &row, &[9, 4], 2).unwrap();
        assert_eq!(tied, vec![4, 9]);

        assert!(matches!(
            topn_recommend(&model, 0, &row, &[], 3),
            Err(ModelError::EmptyCandidates)
        ));
    }
}
