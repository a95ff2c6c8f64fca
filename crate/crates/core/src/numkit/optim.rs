//! Adam and SGD steps over flat parameter groups.

use super::NumError;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OptKind {
    Adam,
    Sgd,
}

/// Per-group optimizer state. Adam accumulators mirror the parameter layout
/// fixed at construction; both steps are pure functions of (params, grads,
/// state), so identical inputs give bit-identical outputs.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptKind,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn adam(learning_rate: f64, lens: &[usize]) -> Self {
        OptimizerState {
            kind: OptKind::Adam,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerState {
            kind: OptKind::Sgd,
            step_count: 0,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

fn check_layout(params: &[&mut [f64]], grads: &[Vec<f64>]) -> Result<(), NumError> {
    if params.len() != grads.len() {
        return Err(NumError::Shape(format!(
            "optimizer: {} parameter groups vs {} gradient groups",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(NumError::Shape(format!(
                "optimizer group {i}: {} params vs {} grads",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    st: &mut OptimizerState,
) -> Result<(), NumError> {
    assert_eq!(st.kind, OptKind::Adam, "adam_step on non-adam state");
    check_layout(params, grads)?;
    if params.len() != st.m.len() {
        return Err(NumError::Shape(format!(
            "optimizer: {} groups vs {} accumulators",
            params.len(),
            st.m.len()
        )));
    }
    st.step_count += 1;
    let c1 = 1.0 - st.beta1.powi(st.step_count as i32);
    let c2 = 1.0 - st.beta2.powi(st.step_count as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if p.len() != st.m[i].len() {
            return Err(NumError::Shape(format!(
                "optimizer group {i}: {} params vs {} accumulator entries",
                p.len(),
                st.m[i].len()
            )));
        }
        let (m, v) = (&mut st.m[i], &mut st.v[i]);
        for k in 0..p.len() {
            m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * g[k];
            v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= st.learning_rate * mh / (vh.sqrt() + st.epsilon);
        }
    }
    Ok(())
}

/// Plain gradient descent: p <- p - lr * g.
pub fn sgd_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    st: &mut OptimizerState,
) -> Result<(), NumError> {
    assert_eq!(st.kind, OptKind::Sgd, "sgd_step on non-sgd state");
    check_layout(params, grads)?;
    st.step_count += 1;
    for (p, g) in params.iter_mut().zip(grads) {
        for k in 0..p.len() {
            p[k] -= st.learning_rate * g[k];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_adam(params: &mut Vec<f64>, grads: &[Vec<f64>], st: &mut OptimizerState) {
        for g in grads {
            let mut refs = [params.as_mut_slice()];
            adam_step(&mut refs, std::slice::from_ref(g), st).unwrap();
        }
    }

    #[test]
    fn adam_first_step_moves_by_almost_lr() {
        // At t=1 the bias corrections cancel: delta = lr * g / (|g| + eps').
        let mut p = vec![1.0];
        let mut st = OptimizerState::adam(0.001, &[1]);
        run_adam(&mut p, &[vec![0.1]], &mut st);
        assert!((p[0] - (1.0 - 0.001)).abs() < 1e-6, "got {}", p[0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.3, -0.4];
        let mut st = OptimizerState::adam(0.01, &[2]);
        run_adam(&mut p, &[vec![0.0, 0.0]], &mut st);
        assert_eq!(p, vec![0.3, -0.4]);
    }

    #[test]
    fn adam_two_steps_match_hand_unrolled_recurrence() {
        let (lr, b1, b2, eps) = (0.002, 0.9, 0.999, 1e-8);
        let g = 0.37;
        let mut p = vec![1.5];
        let mut st = OptimizerState::adam(lr, &[1]);
        run_adam(&mut p, &[vec![g], vec![g]], &mut st);

        // Hand unrolled, scalar by scalar.
        let mut hp = 1.5;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2u32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1_pow(b1, t));
            let vh = v / (1.0 - b1_pow(b2, t));
            hp -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0] - hp).abs() < 1e-12, "{} vs {}", p[0], hp);
    }

    fn b1_pow(b: f64, t: u32) -> f64 {
        (0..t).fold(1.0, |acc, _| acc * b)
    }

    #[test]
    fn sgd_point_values() {
        let mut p = vec![1.0];
        let mut st = OptimizerState::sgd(0.1);
        let mut refs = [p.as_mut_slice()];
        sgd_step(&mut refs, &[vec![1.0]], &mut st).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut p2 = vec![0.25, -0.5];
        let g = vec![0.0, 0.0];
        let mut refs = [p2.as_mut_slice()];
        sgd_step(&mut refs, std::slice::from_ref(&g), &mut OptimizerState::sgd(0.1)).unwrap();
        assert_eq!(p2, vec![0.25, -0.5]);
    }

    #[test]
    fn sgd_matches_elementwise_oracle() {
        let lr = 0.03;
        let p0 = [0.2, -1.1, 3.0, 0.0];
        let g = vec![1.0, -2.0, 0.5, 4.0];
        let mut p = p0.to_vec();
        let mut refs = [p.as_mut_slice()];
        sgd_step(&mut refs, std::slice::from_ref(&g), &mut OptimizerState::sgd(lr)).unwrap();
        for k in 0..4 {
            assert_eq!(p[k], p0[k] - lr * g[k]);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![1.0, 2.0];
        let mut st = OptimizerState::adam(0.001, &[2]);
        let mut refs = [p.as_mut_slice()];
        let bad = adam_step(&mut refs, &[vec![0.1]], &mut st);
        assert!(matches!(bad, Err(NumError::Shape(_))));
    }

    #[test]
    fn steps_are_pure_given_identical_inputs() {
        let g = vec![vec![0.3, -0.2]];
        let mut p1 = vec![1.0, 2.0];
        let mut p2 = vec![1.0, 2.0];
        let mut s1 = OptimizerState::adam(0.005, &[2]);
        let mut s2 = OptimizerState::adam(0.005, &[2]);
        for _ in 0..5 {
            let mut r1 = [p1.as_mut_slice()];
            let mut r2 = [p2.as_mut_slice()];
            adam_step(&mut r1, &g, &mut s1).unwrap();
            adam_step(&mut r2, &g, &mut s2).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(s1.m, s2.m);
        assert_eq!(s1.v, s2.v);
    }
}
