//! Seeded synthetic corpus with a planted group signal.
//!
//! Items cycle through a fixed set of topics with a Zipf popularity skew
//! inside each topic. Users carry a balanced binary attribute; each group
//! prefers the topic order from one end, so interaction histories leak the
//! attribute at a strength set by `group_mix`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numkit::rng::{salts, stream};

use super::InteractionDataset;

#[derive(Clone, Debug)]
pub struct PlantedSpec {
    pub users: usize,
    pub items: usize,
    pub topics: usize,
    /// Weight of the group topic profile in each user's mixture, in [0, 1].
    pub group_mix: f64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Zipf exponent for within-topic item popularity.
    pub zipf_s: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            users: 1000,
            items: 500,
            topics: 10,
            group_mix: 0.6,
            min_interactions: 15,
            max_interactions: 25,
            zipf_s: 1.0,
            seed: 0,
        }
    }
}

/// Geometric decay across topic ranks; group 1 reads the ranks reversed.
const TOPIC_DECAY: f64 = 0.6;

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cum.push(acc);
    }
    cum
}

fn draw(cum: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let x = rng.gen::<f64>() * cum[cum.len() - 1];
    cum.partition_point(|&c| c <= x).min(cum.len() - 1)
}

pub fn planted_dataset(spec: &PlantedSpec) -> InteractionDataset {
    assert!(spec.topics >= 1 && spec.items >= spec.topics);
    assert!(1 <= spec.min_interactions && spec.min_interactions <= spec.max_interactions);
    assert!((0.0..=1.0).contains(&spec.group_mix));
    let mut rng = stream(spec.seed, salts::SYNTHETIC, 0, 0);

    let t = spec.topics;
    let mut items_in_topic: Vec<Vec<usize>> = vec![Vec::new(); t];
    for i in 0..spec.items {
        items_in_topic[i % t].push(i);
    }
    let item_cum: Vec<Vec<f64>> = items_in_topic
        .iter()
        .map(|items| {
            let w: Vec<f64> =
                (0..items.len()).map(|r| 1.0 / ((1 + r) as f64).powf(spec.zipf_s)).collect();
            cumulative(&w)
        })
        .collect();

    let group0: Vec<f64> = (0..t).map(|k| TOPIC_DECAY.powi(k as i32)).collect();
    let group1: Vec<f64> = group0.iter().rev().copied().collect();

    let mut pairs = Vec::new();
    let mut sensitive = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let a = (u % 2) as u8;
        sensitive.push(a);
        let group = if a == 1 { &group1 } else { &group0 };
        let personal: Vec<f64> = (0..t).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
        let psum: f64 = personal.iter().sum();
        let gsum: f64 = group.iter().sum();
        let mix: Vec<f64> = (0..t)
            .map(|k| spec.group_mix * group[k] / gsum + (1.0 - spec.group_mix) * personal[k] / psum)
            .collect();
        let topic_cum = cumulative(&mix);

        let k = rng.gen_range(spec.min_interactions..=spec.max_interactions);
        let budget = k.min(spec.items);
        let mut chosen = std::collections::BTreeSet::new();
        let mut attempts = 0usize;
        while chosen.len() < budget {
            let topic = draw(&topic_cum, &mut rng);
            let slot = draw(&item_cum[topic], &mut rng);
            chosen.insert(items_in_topic[topic][slot]);
            attempts += 1;
            if attempts > 50 * budget {
                // Popularity mass too concentrated; fall back to any unused item.
                for i in 0..spec.items {
                    if chosen.len() >= budget {
                        break;
                    }
                    chosen.insert(i);
                }
            }
        }
        for i in chosen {
            pairs.push((u, i));
        }
    }

    InteractionDataset::from_parts(
        (0..spec.users).map(|u| format!("su{u}")).collect(),
        (0..spec.items).map(|i| format!("si{i}")).collect(),
        &pairs,
        sensitive,
    )
    .expect("generator output satisfies dataset invariants")
}
