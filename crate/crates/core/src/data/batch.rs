use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureDataset;
use crate::attention::{build_masks, MaskSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokens::PAD;

/// Padded slice of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Dataset indices, in batch order.
    pub indices: Vec<usize>,
    /// `[B, T_max, F]`, zero beyond each sequence's length.
    pub frames: Tensor,
    pub src_lengths: Vec<usize>,
    /// `[B, L_max]` row-major, `PAD` beyond each target's length.
    pub targets: Vec<u32>,
    pub tgt_lengths: Vec<usize>,
    pub masks: MaskSet,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn max_target(&self) -> usize {
        self.tgt_lengths.iter().copied().max().unwrap_or(0)
    }

    /// `[T_max, F]` frames of item `i`, padding included.
    pub fn item_frames(&self, i: usize) -> Tensor {
        let s = self.frames.shape();
        let n = s[1] * s[2];
        Tensor::new(vec![s[1], s[2]], self.frames.data()[i * n..(i + 1) * n].to_vec()).expect("batch slice")
    }

    /// Unpadded target of item `i`.
    pub fn item_target(&self, i: usize) -> &[u32] {
        let l = self.max_target();
        &self.targets[i * l..i * l + self.tgt_lengths[i]]
    }
}

/// Splits `ds` into padded batches of at most `batch_size`, shuffled under
/// `seed` when `shuffle` is set.
pub fn make_batches(ds: &FeatureDataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    batch_order(ds.len(), batch_size, seed, shuffle)
        .iter()
        .map(|idx| collate(ds, idx))
        .collect()
}

/// Index groups that [`make_batches`] would produce, without collating.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn collate(ds: &FeatureDataset, idx: &[usize]) -> Result<Batch> {
    let f = ds.feature_dim;
    let src_lengths: Vec<usize> = idx.iter().map(|&i| ds.sequences[i].len()).collect();
    let tgt_lengths: Vec<usize> = idx.iter().map(|&i| ds.sequences[i].target.len()).collect();
    let t_max = src_lengths.iter().copied().max().unwrap_or(0);
    let l_max = tgt_lengths.iter().copied().max().unwrap_or(0);
    let mut frames = vec![0.0f32; idx.len() * t_max * f];
    let mut targets = vec![PAD; idx.len() * l_max];
    for (b, &i) in idx.iter().enumerate() {
        let s = &ds.sequences[i];
        let d = s.frames.data();
        frames[b * t_max * f..b * t_max * f + d.len()].copy_from_slice(d);
        targets[b * l_max..b * l_max + s.target.len()].copy_from_slice(&s.target);
    }
    // The decoder sees BOS + target, so the causal mask covers L_max + 1.
    let masks = build_masks(&src_lengths, l_max + 1)?;
    Ok(Batch {
        indices: idx.to_vec(),
        frames: Tensor::new(vec![idx.len(), t_max, f], frames)?,
        src_lengths,
        targets,
        tgt_lengths,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sequence;

    fn dataset(lens: &[usize]) -> FeatureDataset {
        let mut ds = FeatureDataset::new(2);
        for (i, &t) in lens.iter().enumerate() {
            ds.push(Sequence {
                id: i.to_string(),
                frames: Tensor::full(&[t, 2], (i + 1) as f32),
                target: vec![4 + i as u32; 1 + i % 3],
            })
            .unwrap();
        }
        ds
    }

    #[test]
    fn lengths_three_and_five() {
        let b = &make_batches(&dataset(&[3, 5]), 2, 0, false).unwrap()[0];
        assert_eq!(b.frames.shape(), &[2, 5, 2]);
        assert_eq!(b.masks.src_pad[0], vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.masks.src_pad[1], vec![1.0; 5]);
        assert_eq!(&b.frames.data()[6..10], &[0.0; 4]);
        assert_eq!(b.targets, vec![4, PAD, 5, 5]);
        assert_eq!(b.item_target(1), &[5, 5]);
    }

    #[test]
    fn hundred_items_in_thirty_twos() {
        let ds = dataset(&vec![2; 100]);
        let sizes: Vec<usize> = make_batches(&ds, 32, 1, true).unwrap().iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
    }

    #[test]
    fn order_kept_without_shuffle() {
        let ds = dataset(&[1, 2, 3, 4, 5]);
        let idx: Vec<usize> = make_batches(&ds, 2, 9, false)
            .unwrap()
            .into_iter()
            .flat_map(|b| b.indices)
            .collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn shuffle_is_seeded_permutation() {
        let ds = dataset(&[1; 40]);
        let run = |seed| -> Vec<usize> {
            make_batches(&ds, 7, seed, true)
                .unwrap()
                .into_iter()
                .flat_map(|b| b.indices)
                .collect()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        let mut sorted = run(3);
        sorted.sort();
        assert_eq!(sorted, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn item_frames_round_trip() {
        let ds = dataset(&[2, 4]);
        let b = &make_batches(&ds, 2, 0, false).unwrap()[0];
        let f0 = b.item_frames(0);
        assert_eq!(&f0.data()[..4], ds.sequences[0].frames.data());
        assert_eq!(&f0.data()[4..], &[0.0; 4]);
    }
}
