//! Reverse-mode autodiff over flat 64-bit buffers.
//!
//! Forward helpers compute eagerly into an arena and push one record per
//! node; `backward` replays the records last-to-first, accumulating adjoints
//! per buffer. Values are 2-d throughout; scalars are 1x1 buffers. A fresh
//! tape is built per training step and dropped after gradient extraction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::scalar::{sigmoid, softplus};
use super::NumError;

pub type BufId = usize;

struct Buf {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

enum Op {
    Gather { table: BufId, rows: Vec<usize>, out: BufId },
    Affine { x: BufId, w: BufId, b: BufId, out: BufId },
    LeakyRelu { x: BufId, slope: f64, out: BufId },
    /// `xhat` and `inv_std` are saved forward results (batch statistics).
    BnTrain { x: BufId, gamma: BufId, beta: BufId, out: BufId, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Same normalization shape but against fixed running statistics, so the
    /// backward pass has no cross-batch coupling.
    BnEval { x: BufId, gamma: BufId, beta: BufId, out: BufId, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// `mask` entries are 0 or 1/(1-rate) (inverted scaling).
    Dropout { x: BufId, mask: Vec<f64>, out: BufId },
    ConcatCols { a: BufId, b: BufId, out: BufId },
    RowDot { a: BufId, b: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    /// Broadcast add of a 1x1 buffer.
    AddScalar { x: BufId, s: BufId, out: BufId },
    Scale { x: BufId, c: f64, out: BufId },
    Softplus { x: BufId, out: BufId },
    MeanAll { x: BufId, out: BufId },
    SumAll { x: BufId, out: BufId },
    /// Mean of softplus(z) - y*z over the batch; labels are constants.
    BceMean { z: BufId, labels: Vec<f64>, out: BufId },
    SqFrobenius { x: BufId, out: BufId },
}

/// Train-mode batch-normalization result: the tape node plus the batch
/// statistics the caller may fold into running averages.
pub struct BnForward {
    pub out: BufId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> BufId {
        debug_assert_eq!(data.len(), rows * cols);
        self.bufs.push(Buf { data, rows, cols });
        self.bufs.len() - 1
    }

    pub fn leaf(&mut self, m: &Matrix) -> BufId {
        self.push(m.rows(), m.cols(), m.data().to_vec())
    }

    /// 1 x n leaf from a flat slice (bias rows, scalar parameters).
    pub fn leaf_row(&mut self, v: &[f64]) -> BufId {
        self.push(1, v.len(), v.to_vec())
    }

    pub fn shape(&self, id: BufId) -> (usize, usize) {
        let b = &self.bufs[id];
        (b.rows, b.cols)
    }

    pub fn value(&self, id: BufId) -> &[f64] {
        &self.bufs[id].data
    }

    pub fn value_matrix(&self, id: BufId) -> Matrix {
        let b = &self.bufs[id];
        Matrix::from_vec(b.rows, b.cols, b.data.clone())
    }

    /// Value of a 1x1 buffer.
    pub fn scalar(&self, id: BufId) -> f64 {
        let b = &self.bufs[id];
        assert!(b.rows == 1 && b.cols == 1, "buffer {} is {}x{}, not scalar", id, b.rows, b.cols);
        b.data[0]
    }

    pub fn grad(&self, id: BufId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient of the backward root w.r.t. this buffer; zeros if none flowed.
    pub fn grad_or_zeros(&self, id: BufId) -> Vec<f64> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.bufs[id].data.len()],
        }
    }

    // ---- forward ops -------------------------------------------------------

    pub fn gather(&mut self, table: BufId, rows: &[usize]) -> Result<BufId, NumError> {
        let (tr, tc) = self.shape(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= tr) {
            return Err(NumError::Shape(format!("gather: row {bad} out of range for {tr}x{tc} table")));
        }
        let mut data = Vec::with_capacity(rows.len() * tc);
        for &r in rows {
            data.extend_from_slice(&self.bufs[table].data[r * tc..(r + 1) * tc]);
        }
        let out = self.push(rows.len(), tc, data);
        self.ops.push(Op::Gather { table, rows: rows.to_vec(), out });
        Ok(out)
    }

    pub fn affine(&mut self, x: BufId, w: BufId, b: BufId) -> Result<BufId, NumError> {
        let (n, i) = self.shape(x);
        let (wi, o) = self.shape(w);
        let (br, bc) = self.shape(b);
        if i != wi {
            return Err(NumError::Shape(format!("affine: input is {n}x{i} but weight fan-in is {wi}")));
        }
        if br != 1 || bc != o {
            return Err(NumError::Shape(format!("affine: bias is {br}x{bc}, want 1x{o}")));
        }
        let mut data = vec![0.0; n * o];
        for r in 0..n {
            let (xr, bd) = (&self.bufs[x].data[r * i..(r + 1) * i], &self.bufs[b].data);
            let orow = &mut data[r * o..(r + 1) * o];
            orow.copy_from_slice(bd);
            for (k, &xv) in xr.iter().enumerate() {
                let wrow = &self.bufs[w].data[k * o..(k + 1) * o];
                for j in 0..o {
                    orow[j] += xv * wrow[j];
                }
            }
        }
        let out = self.push(n, o, data);
        self.ops.push(Op::Affine { x, w, b, out });
        Ok(out)
    }

    pub fn leaky_relu(&mut self, x: BufId, slope: f64) -> BufId {
        assert!(slope > 0.0 && slope < 1.0, "leaky-relu slope {slope} outside (0,1)");
        let (n, c) = self.shape(x);
        let data: Vec<f64> =
            self.bufs[x].data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let out = self.push(n, c, data);
        self.ops.push(Op::LeakyRelu { x, slope, out });
        out
    }

    pub fn batch_norm_train(
        &mut self,
        x: BufId,
        gamma: BufId,
        beta: BufId,
        eps: f64,
    ) -> Result<BnForward, NumError> {
        let (n, d) = self.shape(x);
        if n < 2 {
            return Err(NumError::DegenerateBatch(n));
        }
        self.check_row_param("batch_norm gamma", gamma, d)?;
        self.check_row_param("batch_norm beta", beta, d)?;
        let xd = &self.bufs[x].data;
        let nf = n as f64;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                mean[j] += xd[r * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= nf;
        }
        for r in 0..n {
            for j in 0..d {
                let c = xd[r * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in var.iter_mut() {
            *v /= nf;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        for r in 0..n {
            for j in 0..d {
                xhat[r * d + j] = (xd[r * d + j] - mean[j]) * inv_std[j];
            }
        }
        let (gd, bd) = (&self.bufs[gamma].data, &self.bufs[beta].data);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for j in 0..d {
                data[r * d + j] = gd[j] * xhat[r * d + j] + bd[j];
            }
        }
        let out = self.push(n, d, data);
        self.ops.push(Op::BnTrain { x, gamma, beta, out, xhat, inv_std: inv_std.clone() });
        Ok(BnForward { out, mean, var })
    }

    pub fn batch_norm_eval(
        &mut self,
        x: BufId,
        gamma: BufId,
        beta: BufId,
        run_mean: &[f64],
        run_var: &[f64],
        eps: f64,
    ) -> Result<BufId, NumError> {
        let (n, d) = self.shape(x);
        self.check_row_param("batch_norm gamma", gamma, d)?;
        self.check_row_param("batch_norm beta", beta, d)?;
        if run_mean.len() != d || run_var.len() != d {
            return Err(NumError::Shape(format!(
                "batch_norm running stats have {} / {} entries, want {d}",
                run_mean.len(),
                run_var.len()
            )));
        }
        let inv_std: Vec<f64> = run_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xd = &self.bufs[x].data;
        let mut xhat = vec![0.0; n * d];
        for r in 0..n {
            for j in 0..d {
                xhat[r * d + j] = (xd[r * d + j] - run_mean[j]) * inv_std[j];
            }
        }
        let (gd, bd) = (&self.bufs[gamma].data, &self.bufs[beta].data);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for j in 0..d {
                data[r * d + j] = gd[j] * xhat[r * d + j] + bd[j];
            }
        }
        let out = self.push(n, d, data);
        self.ops.push(Op::BnEval { x, gamma, beta, out, xhat, inv_std });
        Ok(out)
    }

    /// Train-mode dropout with inverted scaling; rate 0 is the identity.
    pub fn dropout(&mut self, x: BufId, rate: f64, rng: &mut ChaCha8Rng) -> BufId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0,1)");
        if rate == 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - rate);
        let (n, c) = self.shape(x);
        let mask: Vec<f64> = (0..n * c)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data: Vec<f64> = self.bufs[x].data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = self.push(n, c, data);
        self.ops.push(Op::Dropout { x, mask, out });
        out
    }

    pub fn concat_cols(&mut self, a: BufId, b: BufId) -> Result<BufId, NumError> {
        let (na, ca) = self.shape(a);
        let (nb, cb) = self.shape(b);
        if na != nb {
            return Err(NumError::Shape(format!("concat: {na} rows vs {nb} rows")));
        }
        let mut data = Vec::with_capacity(na * (ca + cb));
        for r in 0..na {
            data.extend_from_slice(&self.bufs[a].data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.bufs[b].data[r * cb..(r + 1) * cb]);
        }
        let out = self.push(na, ca + cb, data);
        self.ops.push(Op::ConcatCols { a, b, out });
        Ok(out)
    }

    /// Per-row dot product of two n x d buffers; output is n x 1.
    pub fn row_dot(&mut self, a: BufId, b: BufId) -> Result<BufId, NumError> {
        let (na, ca) = self.shape(a);
        let (nb, cb) = self.shape(b);
        if na != nb || ca != cb {
            return Err(NumError::Shape(format!("row_dot: {na}x{ca} vs {nb}x{cb}")));
        }
        let mut data = vec![0.0; na];
        for r in 0..na {
            let (ra, rb) =
                (&self.bufs[a].data[r * ca..(r + 1) * ca], &self.bufs[b].data[r * ca..(r + 1) * ca]);
            data[r] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        }
        let out = self.push(na, 1, data);
        self.ops.push(Op::RowDot { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId, NumError> {
        self.check_same_shape("add", a, b)?;
        let (n, c) = self.shape(a);
        let data: Vec<f64> =
            self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(x, y)| x + y).collect();
        let out = self.push(n, c, data);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> Result<BufId, NumError> {
        self.check_same_shape("sub", a, b)?;
        let (n, c) = self.shape(a);
        let data: Vec<f64> =
            self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(x, y)| x - y).collect();
        let out = self.push(n, c, data);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn add_scalar(&mut self, x: BufId, s: BufId) -> Result<BufId, NumError> {
        let (sr, sc) = self.shape(s);
        if sr != 1 || sc != 1 {
            return Err(NumError::Shape(format!("add_scalar: addend is {sr}x{sc}, want 1x1")));
        }
        let sv = self.bufs[s].data[0];
        let (n, c) = self.shape(x);
        let data: Vec<f64> = self.bufs[x].data.iter().map(|&v| v + sv).collect();
        let out = self.push(n, c, data);
        self.ops.push(Op::AddScalar { x, s, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: BufId, c: f64) -> BufId {
        let (n, cc) = self.shape(x);
        let data: Vec<f64> = self.bufs[x].data.iter().map(|&v| c * v).collect();
        let out = self.push(n, cc, data);
        self.ops.push(Op::Scale { x, c, out });
        out
    }

    pub fn softplus_all(&mut self, x: BufId) -> BufId {
        let (n, c) = self.shape(x);
        let data: Vec<f64> = self.bufs[x].data.iter().map(|&v| softplus(v)).collect();
        let out = self.push(n, c, data);
        self.ops.push(Op::Softplus { x, out });
        out
    }

    pub fn mean_all(&mut self, x: BufId) -> BufId {
        let d = &self.bufs[x].data;
        assert!(!d.is_empty(), "mean of empty buffer");
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let out = self.push(1, 1, vec![m]);
        self.ops.push(Op::MeanAll { x, out });
        out
    }

    pub fn sum_all(&mut self, x: BufId) -> BufId {
        let s = self.bufs[x].data.iter().sum::<f64>();
        let out = self.push(1, 1, vec![s]);
        self.ops.push(Op::SumAll { x, out });
        out
    }

    /// Stable sigmoid cross-entropy on an n x 1 logit buffer, averaged over n.
    pub fn bce_with_logits_mean(&mut self, z: BufId, labels: &[f64]) -> Result<BufId, NumError> {
        let (n, c) = self.shape(z);
        if c != 1 || n != labels.len() {
            return Err(NumError::Shape(format!(
                "bce: logits are {n}x{c}, labels {}",
                labels.len()
            )));
        }
        assert!(labels.iter().all(|&y| y == 0.0 || y == 1.0), "bce labels must be 0 or 1");
        let zd = &self.bufs[z].data;
        let total: f64 = zd.iter().zip(labels).map(|(&zv, &y)| softplus(zv) - y * zv).sum();
        let out = self.push(1, 1, vec![total / n as f64]);
        self.ops.push(Op::BceMean { z, labels: labels.to_vec(), out });
        Ok(out)
    }

    pub fn sq_frobenius(&mut self, x: BufId) -> BufId {
        let s: f64 = self.bufs[x].data.iter().map(|&v| v * v).sum();
        let out = self.push(1, 1, vec![s]);
        self.ops.push(Op::SqFrobenius { x, out });
        out
    }

    fn check_row_param(&self, what: &str, id: BufId, d: usize) -> Result<(), NumError> {
        let (r, c) = self.shape(id);
        if r != 1 || c != d {
            return Err(NumError::Shape(format!("{what} is {r}x{c}, want 1x{d}")));
        }
        Ok(())
    }

    fn check_same_shape(&self, what: &str, a: BufId, b: BufId) -> Result<(), NumError> {
        let (na, ca) = self.shape(a);
        let (nb, cb) = self.shape(b);
        if na != nb || ca != cb {
            return Err(NumError::Shape(format!("{what}: {na}x{ca} vs {nb}x{cb}")));
        }
        Ok(())
    }

    // ---- backward ----------------------------------------------------------

    /// Seeds d(loss)/d(loss) = 1 and replays the record in reverse. Buffers
    /// that never influenced the root keep a `None` adjoint.
    pub fn backward(&mut self, loss: BufId) {
        {
            let b = &self.bufs[loss];
            assert!(b.rows == 1 && b.cols == 1, "backward root must be scalar");
        }
        self.grads = vec![None; self.bufs.len()];
        self.grads[loss] = Some(vec![1.0]);
        let bufs = &self.bufs;
        let grads = &mut self.grads;
        for op in self.ops.iter().rev() {
            match op {
                Op::Gather { table, rows, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let d = bufs[*out].cols;
                    let gt = acc(grads, *table, bufs[*table].data.len());
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gt[r * d + j] += go[k * d + j];
                        }
                    }
                }
                Op::Affine { x, w, b, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let (n, i) = (bufs[*x].rows, bufs[*x].cols);
                    let o = bufs[*w].cols;
                    let xd = &bufs[*x].data;
                    let wd = &bufs[*w].data;
                    {
                        let gx = acc(grads, *x, n * i);
                        for r in 0..n {
                            for k in 0..i {
                                let mut s = 0.0;
                                for j in 0..o {
                                    s += go[r * o + j] * wd[k * o + j];
                                }
                                gx[r * i + k] += s;
                            }
                        }
                    }
                    {
                        let gw = acc(grads, *w, i * o);
                        for r in 0..n {
                            for k in 0..i {
                                let xv = xd[r * i + k];
                                for j in 0..o {
                                    gw[k * o + j] += xv * go[r * o + j];
                                }
                            }
                        }
                    }
                    let gb = acc(grads, *b, o);
                    for r in 0..n {
                        for j in 0..o {
                            gb[j] += go[r * o + j];
                        }
                    }
                }
                Op::LeakyRelu { x, slope, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let xd = &bufs[*x].data;
                    let gx = acc(grads, *x, xd.len());
                    for k in 0..xd.len() {
                        // Subgradient at exactly 0 is the negative-branch slope.
                        gx[k] += go[k] * if xd[k] > 0.0 { 1.0 } else { *slope };
                    }
                }
                Op::BnTrain { x, gamma, beta, out, xhat, inv_std } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let (n, d) = (bufs[*x].rows, bufs[*x].cols);
                    let gam = bufs[*gamma].data.clone();
                    {
                        let gg = acc(grads, *gamma, d);
                        for r in 0..n {
                            for j in 0..d {
                                gg[j] += go[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    {
                        let gb = acc(grads, *beta, d);
                        for r in 0..n {
                            for j in 0..d {
                                gb[j] += go[r * d + j];
                            }
                        }
                    }
                    let gx = acc(grads, *x, n * d);
                    let nf = n as f64;
                    for j in 0..d {
                        let mut t1 = 0.0;
                        let mut t2 = 0.0;
                        for r in 0..n {
                            let dxh = go[r * d + j] * gam[j];
                            t1 += dxh;
                            t2 += dxh * xhat[r * d + j];
                        }
                        for r in 0..n {
                            let dxh = go[r * d + j] * gam[j];
                            gx[r * d + j] +=
                                inv_std[j] * (dxh - t1 / nf - xhat[r * d + j] * t2 / nf);
                        }
                    }
                }
                Op::BnEval { x, gamma, beta, out, xhat, inv_std } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let (n, d) = (bufs[*x].rows, bufs[*x].cols);
                    let gam = bufs[*gamma].data.clone();
                    {
                        let gg = acc(grads, *gamma, d);
                        for r in 0..n {
                            for j in 0..d {
                                gg[j] += go[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    {
                        let gb = acc(grads, *beta, d);
                        for r in 0..n {
                            for j in 0..d {
                                gb[j] += go[r * d + j];
                            }
                        }
                    }
                    let gx = acc(grads, *x, n * d);
                    for r in 0..n {
                        for j in 0..d {
                            gx[r * d + j] += go[r * d + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                Op::Dropout { x, mask, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let gx = acc(grads, *x, mask.len());
                    for k in 0..mask.len() {
                        gx[k] += go[k] * mask[k];
                    }
                }
                Op::ConcatCols { a, b, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let (n, ca) = (bufs[*a].rows, bufs[*a].cols);
                    let cb = bufs[*b].cols;
                    let co = ca + cb;
                    {
                        let ga = acc(grads, *a, n * ca);
                        for r in 0..n {
                            for j in 0..ca {
                                ga[r * ca + j] += go[r * co + j];
                            }
                        }
                    }
                    let gb = acc(grads, *b, n * cb);
                    for r in 0..n {
                        for j in 0..cb {
                            gb[r * cb + j] += go[r * co + ca + j];
                        }
                    }
                }
                Op::RowDot { a, b, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let (n, d) = (bufs[*a].rows, bufs[*a].cols);
                    let ad = &bufs[*a].data;
                    let bd = &bufs[*b].data;
                    {
                        let ga = acc(grads, *a, n * d);
                        for r in 0..n {
                            for j in 0..d {
                                ga[r * d + j] += go[r] * bd[r * d + j];
                            }
                        }
                    }
                    let gb = acc(grads, *b, n * d);
                    for r in 0..n {
                        for j in 0..d {
                            gb[r * d + j] += go[r] * ad[r * d + j];
                        }
                    }
                }
                Op::Add { a, b, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    {
                        let ga = acc(grads, *a, go.len());
                        for k in 0..go.len() {
                            ga[k] += go[k];
                        }
                    }
                    let gb = acc(grads, *b, go.len());
                    for k in 0..go.len() {
                        gb[k] += go[k];
                    }
                }
                Op::Sub { a, b, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    {
                        let ga = acc(grads, *a, go.len());
                        for k in 0..go.len() {
                            ga[k] += go[k];
                        }
                    }
                    let gb = acc(grads, *b, go.len());
                    for k in 0..go.len() {
                        gb[k] -= go[k];
                    }
                }
                Op::AddScalar { x, s, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    {
                        let gx = acc(grads, *x, go.len());
                        for k in 0..go.len() {
                            gx[k] += go[k];
                        }
                    }
                    let gs = acc(grads, *s, 1);
                    gs[0] += go.iter().sum::<f64>();
                }
                Op::Scale { x, c, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let gx = acc(grads, *x, go.len());
                    for k in 0..go.len() {
                        gx[k] += c * go[k];
                    }
                }
                Op::Softplus { x, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let xd = &bufs[*x].data;
                    let gx = acc(grads, *x, xd.len());
                    for k in 0..xd.len() {
                        gx[k] += go[k] * sigmoid(xd[k]);
                    }
                }
                Op::MeanAll { x, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let n = bufs[*x].data.len();
                    let gx = acc(grads, *x, n);
                    let c = go[0] / n as f64;
                    for g in gx.iter_mut() {
                        *g += c;
                    }
                }
                Op::SumAll { x, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let n = bufs[*x].data.len();
                    let gx = acc(grads, *x, n);
                    for g in gx.iter_mut() {
                        *g += go[0];
                    }
                }
                Op::BceMean { z, labels, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let zd = &bufs[*z].data;
                    let n = labels.len() as f64;
                    let gz = acc(grads, *z, zd.len());
                    for k in 0..zd.len() {
                        gz[k] += go[0] * (sigmoid(zd[k]) - labels[k]) / n;
                    }
                }
                Op::SqFrobenius { x, out } => {
                    let Some(go) = grads[*out].clone() else { continue };
                    let xd = &bufs[*x].data;
                    let gx = acc(grads, *x, xd.len());
                    for k in 0..xd.len() {
                        gx[k] += 2.0 * xd[k] * go[0];
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: BufId, n: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
}
