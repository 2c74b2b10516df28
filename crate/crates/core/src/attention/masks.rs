use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

/// Source padding masks (one per sequence, padded to the batch maximum)
/// and the shared causal target mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub src_pad: Vec<Vec<f32>>,
    pub tgt_causal: Tensor,
}

impl MaskSet {
    pub fn src_keep(&self, i: usize) -> Vec<bool> {
        self.src_pad[i].iter().map(|&v| v != 0.0).collect()
    }

    pub fn causal(&self) -> Mask {
        Mask::from_values(self.tgt_causal.shape().to_vec(), self.tgt_causal.data())
            .expect("causal mask shape is square")
    }
}

/// `true` for the first `len` of `total` frames.
pub fn padding_keep(len: usize, total: usize) -> Vec<bool> {
    (0..total).map(|t| t < len).collect()
}

/// Lower-triangular (diagonal included) keep mask `[len, len]`.
pub fn causal_mask(len: usize) -> Mask {
    let keep = (0..len * len).map(|i| i % len <= i / len).collect();
    Mask::new(vec![len, len], keep).expect("non-empty causal mask")
}

pub fn build_masks(src_lengths: &[usize], tgt_length: usize) -> Result<MaskSet> {
    if src_lengths.is_empty() {
        return Err(Error::invalid("build_masks: no sequences"));
    }
    if src_lengths.contains(&0) || tgt_length == 0 {
        return Err(Error::invalid("build_masks: zero-length sequence"));
    }
    let t = *src_lengths.iter().max().unwrap();
    let src_pad = src_lengths
        .iter()
        .map(|&len| (0..t).map(|i| if i < len { 1.0 } else { 0.0 }).collect())
        .collect();
    let tgt_causal = Tensor::from_fn(&[tgt_length, tgt_length], |i| {
        if i % tgt_length <= i / tgt_length {
            1.0
        } else {
            0.0
        }
    });
    Ok(MaskSet { src_pad, tgt_causal })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sequence_padded_to_five() {
        let m = build_masks(&[3, 5], 1).unwrap();
        assert_eq!(m.src_pad[0], vec![1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn causal_three_has_six_ones() {
        let m = build_masks(&[1], 3).unwrap();
        assert_eq!(m.tgt_causal.data().iter().filter(|&&v| v == 1.0).count(), 6);
        assert_eq!(m.tgt_causal.data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(causal_mask(3).keep().iter().filter(|&&k| k).count(), 6);
    }

    #[test]
    fn batch_of_two_and_four() {
        let m = build_masks(&[2, 4], 2).unwrap();
        assert_eq!(m.src_pad, vec![vec![1.0, 1.0, 0.0, 0.0], vec![1.0; 4]]);
        assert_eq!(m.src_keep(0), vec![true, true, false, false]);
    }

    #[test]
    fn zero_length_rejected() {
        assert!(build_masks(&[2, 0], 2).is_err());
        assert!(build_masks(&[2], 0).is_err());
    }
}
