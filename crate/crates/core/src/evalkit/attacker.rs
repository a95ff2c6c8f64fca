//! Post-hoc fairness attacker: can a fresh classifier recover the sensitive
//! bit from user embeddings?
//!
//! The attacker copies the fairness discriminator's architecture and
//! capacity, trains on a seeded 80% user split with Adam and logistic loss,
//! early-stops on held-out loss, and reports held-out AUC.

use crate::numkit::rng::{salts, stream};
use crate::numkit::scalar;
use crate::numkit::{
    adam_step, Matrix, MlpNet, MlpOptions, OptimizerState, Phase, Tape,
};

use super::metrics::auc_score;
use super::EvalError;

/// Discriminator layout: five hidden layers of one width, logit output.
pub fn discriminator_sizes(d: usize, hidden: usize) -> Vec<usize> {
    vec![d, hidden, hidden, hidden, hidden, hidden, 1]
}

/// Builds the shared discriminator/attacker net.
pub fn discriminator_net(
    d: usize,
    hidden: usize,
    dropout: f64,
    spectral: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> MlpNet {
    let opts = MlpOptions { dropout, spectral, ..MlpOptions::default() };
    MlpNet::new(&discriminator_sizes(d, hidden), opts, rng)
}

#[derive(Clone, Debug)]
pub struct AttackerConfig {
    /// Hidden width; defaults to twice the embedding dimension.
    pub hidden: Option<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            hidden: None,
            dropout: 0.3,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct AttackerOutcome {
    pub net: MlpNet,
    pub auc: f64,
    pub train_auc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub resampled: bool,
}

fn both_classes(labels: &[u8]) -> bool {
    labels.contains(&0) && labels.contains(&1)
}

fn take_rows(emb: &Matrix, idx: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(idx.len(), emb.cols());
    for (r, &i) in idx.iter().enumerate() {
        m.row_mut(r).copy_from_slice(emb.row(i));
    }
    m
}

pub fn train_attacker(
    embeddings: &Matrix,
    labels: &[u8],
    cfg: &AttackerConfig,
) -> Result<AttackerOutcome, EvalError> {
    let n = embeddings.rows();
    assert_eq!(n, labels.len(), "one label per embedding row");
    if !both_classes(labels) {
        return Err(EvalError::SingleClass);
    }

    let n_test = (n / 5).max(1);
    let mut resampled = false;
    let (train_idx, test_idx) = loop {
        let attempt = resampled as u64;
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream(cfg.seed, salts::ATTACKER, attempt, 0));
        let (test, train) = order.split_at(n_test);
        let ok = both_classes(&test.iter().map(|&i| labels[i]).collect::<Vec<_>>())
            && both_classes(&train.iter().map(|&i| labels[i]).collect::<Vec<_>>());
        if ok {
            break (train.to_vec(), test.to_vec());
        }
        if resampled {
            return Err(EvalError::DegenerateSplit);
        }
        resampled = true;
    };

    let d = embeddings.cols();
    let hidden = cfg.hidden.unwrap_or(2 * d);
    let mut net = discriminator_net(
        d,
        hidden,
        cfg.dropout,
        false,
        &mut stream(cfg.seed, salts::ATTACKER, 2, 0),
    );
    let mut drop_rng = stream(cfg.seed, salts::DROPOUT, cfg.seed, 0);
    let mut opt = OptimizerState::adam(cfg.learning_rate, &net.param_lens());

    let x_train = take_rows(embeddings, &train_idx);
    let y_train: Vec<f64> = train_idx.iter().map(|&i| labels[i] as f64).collect();
    let x_test = take_rows(embeddings, &test_idx);
    let y_test: Vec<f64> = test_idx.iter().map(|&i| labels[i] as f64).collect();
    let l_test: Vec<u8> = test_idx.iter().map(|&i| labels[i]).collect();

    let mut best: Option<(f64, usize, f64, MlpNet)> = None;
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut tape = Tape::new();
        let x = tape.leaf(&x_train);
        let trace = net.forward(
            &mut tape,
            x,
            Phase::Train { update_stats: true },
            Some(&mut drop_rng),
        )?;
        let loss = tape.bce_with_logits_mean(trace.out, &y_train)?;
        tape.backward(loss);
        let grads = net.grads_from(&tape, &[&trace]);
        adam_step(&mut net.flat_params_mut(), &grads, &mut opt)?;

        let logits = net.eval_forward(&x_test)?;
        let scores: Vec<f64> = (0..logits.rows()).map(|r| logits[(r, 0)]).collect();
        let val_bce = scalar::bce_with_logits(&scores, &y_test);
        let val_auc = auc_score(&scores, &l_test)?;
        let improved = best.as_ref().map_or(true, |(b, ..)| val_bce < *b);
        if improved {
            best = Some((val_bce, epoch, val_auc, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_epoch, auc, best_net) = best.expect("at least one epoch ran");
    let train_logits = best_net.eval_forward(&x_train)?;
    let train_scores: Vec<f64> = (0..train_logits.rows()).map(|r| train_logits[(r, 0)]).collect();
    let l_train: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let train_auc = auc_score(&train_scores, &l_train)?;
    Ok(AttackerOutcome { net: best_net, auc, train_auc, best_epoch, epochs_run, resampled })
}

/// Mean held-out AUC over several attacker seeds.
pub fn attacker_auc_mean(
    embeddings: &Matrix,
    labels: &[u8],
    cfg: &AttackerConfig,
    seeds: &[u64],
) -> Result<f64, EvalError> {
    assert!(!seeds.is_empty());
    let mut total = 0.0;
    for &s in seeds {
        let mut c = cfg.clone();
        c.seed = s;
        total += train_attacker(embeddings, labels, &c)?.auc;
    }
    Ok(total / seeds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn noise_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
        Matrix::randn(rows, cols, std, &mut stream(seed, 90, 0, 0))
    }

    fn planted_embeddings(n: usize, d: usize, seed: u64) -> (Matrix, Vec<u8>) {
        let mut emb = noise_matrix(n, d, 0.3, seed);
        let labels: Vec<u8> = (0..n).map(|u| (u % 2) as u8).collect();
        let mut rng = stream(seed, 91, 0, 0);
        for u in 0..n {
            let jitter: f64 = StandardNormal.sample(&mut rng);
            emb.row_mut(u)[0] = 2.0 * labels[u] as f64 + 0.1 * jitter;
        }
        (emb, labels)
    }

    #[test]
    fn planted_signal_is_recovered() {
        let (emb, labels) = planted_embeddings(300, 8, 1);
        let out = train_attacker(&emb, &labels, &AttackerConfig::default()).unwrap();
        assert!(out.auc >= 0.95, "auc {}", out.auc);
        assert!(!out.resampled);
    }

    #[test]
    fn noise_embeddings_score_near_half() {
        use rand::Rng;
        for seed in 0..5u64 {
            let emb = noise_matrix(1000, 8, 1.0, seed + 10);
            let mut rng = stream(seed, 92, 1, 0);
            let labels: Vec<u8> = (0..1000).map(|_| rng.gen_range(0..2) as u8).collect();
            let cfg = AttackerConfig { seed, ..AttackerConfig::default() };
            let out = train_attacker(&emb, &labels, &cfg).unwrap();
            assert!((0.4..=0.6).contains(&out.auc), "seed {seed}: auc {}", out.auc);
        }
    }

    #[test]
    fn shuffling_labels_destroys_a_recovered_signal() {
        let (emb, labels) = planted_embeddings(1000, 8, 3);
        let signal = train_attacker(&emb, &labels, &AttackerConfig::default()).unwrap();
        assert!(signal.auc >= 0.9);
        use rand::seq::SliceRandom;
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut stream(3, 93, 0, 0));
        let null = train_attacker(&emb, &shuffled, &AttackerConfig::default()).unwrap();
        assert!((0.4..=0.6).contains(&null.auc), "auc {}", null.auc);
    }

    #[test]
    fn tiny_init_embeddings_leak_nothing() {
        let emb = noise_matrix(1000, 16, 0.01, 7);
        let labels: Vec<u8> = (0..1000).map(|u| (u % 2) as u8).collect();
        let out = train_attacker(&emb, &labels, &AttackerConfig::default()).unwrap();
        assert!((0.4..=0.6).contains(&out.auc), "auc {}", out.auc);
    }

    #[test]
    fn single_class_and_degenerate_splits_error() {
        let emb = noise_matrix(20, 4, 1.0, 8);
        assert!(matches!(
            train_attacker(&emb, &vec![1u8; 20], &AttackerConfig::default()),
            Err(EvalError::SingleClass)
        ));
        // One minority example among 20: a 4-user test split usually misses
        // it; both sampled splits must contain it to succeed.
        let mut labels = vec![0u8; 20];
        labels[0] = 1;
        let out = train_attacker(&emb, &labels, &AttackerConfig::default());
        match out {
            Ok(o) => assert!(o.resampled || o.auc.is_finite()),
            Err(EvalError::DegenerateSplit) => {}
            Err(other) => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn multi_seed_mean_is_the_mean() {
        let (emb, labels) = planted_embeddings(200, 6, 12);
        let cfg = AttackerConfig::default();
        let mean = attacker_auc_mean(&emb, &labels, &cfg, &[1, 2]).unwrap();
        let a = train_attacker(&emb, &labels, &AttackerConfig { seed: 1, ..cfg.clone() })
            .unwrap()
            .auc;
        let b = train_attacker(&emb, &labels, &AttackerConfig { seed: 2, ..cfg.clone() })
            .unwrap()
            .auc;
        assert!((mean - (a + b) / 2.0).abs() < 1e-12);
    }
}
