use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schema::FeatureBundle;
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled by the epoch seed; the ragged tail is dropped.
    Train,
    /// Dataset order; the ragged tail is kept.
    Eval,
}

/// Partitions `0..n` into batches of mention indices.
pub fn batch_iter(n: usize, batch_size: usize, epoch_seed: u64, mode: BatchMode) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    match mode {
        BatchMode::Train => {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
            order
                .chunks_exact(batch_size)
                .map(<[usize]>::to_vec)
                .collect()
        }
        BatchMode::Eval => order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    }
}

/// Padded stack of feature bundles. Padding rows are zero and masked out.
#[derive(Debug, Clone)]
pub struct FeatureBatch<T: Real> {
    /// Four `[B, d_c]` CLS matrices, shallow layer first.
    pub cls: [Tensor<T>; 4],
    /// `[B, Lv, d_c]`
    pub img_local: Tensor<T>,
    /// `B·Lv` validity bits.
    pub img_mask: Vec<bool>,
    /// `[B, Lt, d_t]`
    pub txt: Tensor<T>,
    /// `B·Lt` validity bits.
    pub txt_mask: Vec<bool>,
}

fn pad_rows<T: Real>(items: &[&Tensor], masks: &[&[bool]], rows: usize, width: usize) -> (Tensor<T>, Vec<bool>) {
    let b = items.len();
    let mut data = vec![T::zero(); b * rows * width];
    let mut mask = vec![false; b * rows];
    for (i, (t, m)) in items.iter().zip(masks).enumerate() {
        for (j, v) in t.data().iter().enumerate() {
            data[i * rows * width + j] = T::lit(*v as f64);
        }
        mask[i * rows..i * rows + m.len()].copy_from_slice(m);
    }
    (Tensor::from_parts(vec![b, rows, width], data), mask)
}

impl<T: Real> FeatureBatch<T> {
    pub fn assemble(items: &[&FeatureBundle]) -> Self {
        assert!(!items.is_empty(), "empty feature batch");
        let d_c = items[0].img_local.shape()[1];
        let d_t = items[0].txt_hidden.shape()[1];
        let cls = std::array::from_fn(|k| {
            let data = items
                .iter()
                .flat_map(|b| b.img_cls[k].data().iter().map(|&v| T::lit(v as f64)))
                .collect();
            Tensor::from_parts(vec![items.len(), d_c], data)
        });
        let lv = items.iter().map(|b| b.img_rows()).max().unwrap();
        let lt = items.iter().map(|b| b.txt_rows()).max().unwrap();
        let imgs: Vec<&Tensor> = items.iter().map(|b| &b.img_local).collect();
        let img_masks: Vec<&[bool]> = items.iter().map(|b| b.img_mask.as_slice()).collect();
        let (img_local, img_mask) = pad_rows(&imgs, &img_masks, lv, d_c);
        let txts: Vec<&Tensor> = items.iter().map(|b| &b.txt_hidden).collect();
        let txt_masks: Vec<&[bool]> = items.iter().map(|b| b.txt_mask.as_slice()).collect();
        let (txt, txt_mask) = pad_rows(&txts, &txt_masks, lt, d_t);
        FeatureBatch {
            cls,
            img_local,
            img_mask,
            txt,
            txt_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.cls[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn img_rows(&self) -> usize {
        self.img_local.shape()[1]
    }

    pub fn txt_rows(&self) -> usize {
        self.txt.shape()[1]
    }
}
