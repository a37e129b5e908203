//! Whole-word masking: a selected word has all of its tokens masked
//! together, never a strict subset.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MqError, Result};
use crate::text::{TokenSequence, MASK, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Every selected position becomes the MASK token.
    AllMask,
    /// BERT-style 80% MASK / 10% random token / 10% unchanged.
    Bert801010,
}

/// A corrupted sequence plus the bookkeeping to score reconstruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSample {
    pub corrupted: Vec<u32>,
    /// Sorted masked positions m(x).
    pub masked_positions: Vec<usize>,
    /// Original ids at `masked_positions`, aligned.
    pub originals: Vec<u32>,
}

/// Masks whole word-spans until at least `rate` of the valid tokens are
/// covered (and at least one word when any valid token exists).
pub fn wwm_mask(
    seq: &TokenSequence,
    rate: f64,
    rng: &mut ChaCha8Rng,
    strategy: MaskStrategy,
    vocab_size: usize,
) -> Result<MaskedSample> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(MqError::InvalidArgument(format!(
            "mask rate must be in (0,1), got {rate}"
        )));
    }
    let valid_count = seq.valid_count();
    if valid_count == 0 {
        return Ok(MaskedSample {
            corrupted: seq.ids.clone(),
            masked_positions: vec![],
            originals: vec![],
        });
    }
    let target = ((rate * valid_count as f64).ceil() as usize).max(1);
    let mut order: Vec<usize> = (0..seq.word_spans.len()).collect();
    order.shuffle(rng);
    let mut positions = Vec::new();
    for &si in &order {
        if positions.len() >= target {
            break;
        }
        let (s, e) = seq.word_spans[si];
        positions.extend(s..e);
    }
    positions.sort_unstable();

    let mut corrupted = seq.ids.clone();
    let originals: Vec<u32> = positions.iter().map(|&p| seq.ids[p]).collect();
    for &p in &positions {
        corrupted[p] = match strategy {
            MaskStrategy::AllMask => MASK,
            MaskStrategy::Bert801010 => {
                let u: f64 = rng.random_range(0.0..1.0);
                if u < 0.8 {
                    MASK
                } else if u < 0.9 {
                    // random non-reserved token
                    rng.random_range(UNK + 1..vocab_size as u32)
                } else {
                    seq.ids[p]
                }
            }
        };
    }
    Ok(MaskedSample {
        corrupted,
        masked_positions: positions,
        originals,
    })
}
