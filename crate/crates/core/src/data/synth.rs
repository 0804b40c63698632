//! Planted-signal synthetic datasets.
//!
//! Every mention gets a latent feature bundle drawn from N(0, 1). Its gold
//! entity sees the same latent; both sides then add independent Gaussian
//! noise of scale `noise`. Entities without a mention draw their own
//! latents.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::schema::{Dataset, EntityRecord, FeatureBundle, FeatureDims, KnowledgeBase, MentionRecord};
use super::DataError;
use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub mentions: usize,
    pub entities: usize,
    pub dims: FeatureDims,
    pub noise: f64,
    /// Visual rows per record (`n + 1`).
    pub img_rows: usize,
    /// Upper bound on text rows; each latent picks a count in `3..=txt_rows`.
    pub txt_rows: usize,
    /// Candidate list length per mention (gold included); 0 leaves lists
    /// out so ranking covers the whole KB.
    pub candidates: usize,
}

impl SynthSpec {
    pub fn new(seed: u64, mentions: usize, entities: usize, dims: FeatureDims, noise: f64) -> Self {
        SynthSpec {
            seed,
            mentions,
            entities,
            dims,
            noise,
            img_rows: 5,
            txt_rows: 6,
            candidates: 20,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite gaussian draw")
}

fn latent(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> FeatureBundle {
    let d = spec.dims;
    let txt_rows = rng.random_range(3.min(spec.txt_rows)..=spec.txt_rows.max(1));
    FeatureBundle::new(
        [
            gaussian(rng, &[d.d_c]),
            gaussian(rng, &[d.d_c]),
            gaussian(rng, &[d.d_c]),
            gaussian(rng, &[d.d_c]),
        ],
        gaussian(rng, &[spec.img_rows, d.d_c]),
        gaussian(rng, &[txt_rows, d.d_t]),
    )
}

fn perturb(rng: &mut ChaCha8Rng, t: &Tensor, noise: f64) -> Tensor {
    if noise == 0.0 {
        return t.clone();
    }
    let data = t
        .data()
        .iter()
        .map(|&v| v + (noise * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("finite perturbation")
}

fn noisy(rng: &mut ChaCha8Rng, b: &FeatureBundle, noise: f64) -> FeatureBundle {
    FeatureBundle::new(
        [
            perturb(rng, &b.img_cls[0], noise),
            perturb(rng, &b.img_cls[1], noise),
            perturb(rng, &b.img_cls[2], noise),
            perturb(rng, &b.img_cls[3], noise),
        ],
        perturb(rng, &b.img_local, noise),
        perturb(rng, &b.txt_hidden, noise),
    )
}

/// Deterministic for a fixed spec.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset, DataError> {
    if spec.entities < spec.mentions {
        return Err(DataError::Schema {
            record: "synth".into(),
            message: format!(
                "need at least as many entities ({}) as mentions ({})",
                spec.entities, spec.mentions
            ),
        });
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(DataError::Schema {
            record: "synth".into(),
            message: format!("noise scale {} must be finite and >= 0", spec.noise),
        });
    }
    if spec.img_rows == 0 || spec.txt_rows == 0 {
        return Err(DataError::Schema {
            record: "synth".into(),
            message: "row counts must be positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Entity slot order is shuffled so a mention's gold id says nothing about
    // its position.
    let mut slots: Vec<usize> = (0..spec.entities).collect();
    slots.shuffle(&mut rng);
    let entity_id = |slot: usize| format!("E{slot:06}");

    let mut mention_feats = Vec::with_capacity(spec.mentions);
    let mut entity_feats: Vec<Option<FeatureBundle>> = vec![None; spec.entities];
    for i in 0..spec.entities {
        let z = latent(&mut rng, spec);
        if i < spec.mentions {
            mention_feats.push(noisy(&mut rng, &z, spec.noise));
            entity_feats[slots[i]] = Some(noisy(&mut rng, &z, spec.noise));
        } else {
            entity_feats[slots[i]] = Some(z);
        }
    }

    let entities: Vec<EntityRecord> = entity_feats
        .into_iter()
        .enumerate()
        .map(|(slot, f)| EntityRecord {
            id: entity_id(slot),
            name: format!("entity {slot}"),
            attributes: String::new(),
            description: String::new(),
            features: f.expect("every slot filled"),
        })
        .collect();

    let n_cand = spec.candidates.min(spec.entities);
    let mut mentions = Vec::with_capacity(spec.mentions);
    for (i, features) in mention_feats.into_iter().enumerate() {
        let gold_slot = slots[i];
        let candidates = if n_cand == 0 {
            None
        } else {
            let mut pool: Vec<usize> = (0..spec.entities).filter(|&s| s != gold_slot).collect();
            let (picked, _) = pool.partial_shuffle(&mut rng, n_cand - 1);
            let mut c: Vec<usize> = picked.to_vec();
            c.push(gold_slot);
            c.sort_unstable();
            Some(c.into_iter().map(entity_id).collect())
        };
        mentions.push(MentionRecord {
            id: format!("M{i:06}"),
            sentence: format!("synthetic mention {i}"),
            aux_text: String::new(),
            gold: Some(entity_id(gold_slot)),
            candidates,
            features,
        });
    }

    let kb = Arc::new(KnowledgeBase::new(entities)?);
    Dataset::new("synth", spec.dims, mentions, kb)
}
