//! Run-length coding of binary masks.
//!
//! A mask is scanned row-major and stored as alternating run lengths,
//! starting with a background run (which may be length 0 when the first
//! pixel is foreground). Runs always sum to `H·W`.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Encode a binary mask (`0`/nonzero) to alternating run lengths.
pub fn rle_encode(mask: &Array2<u8>) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current: u8 = 0; // runs start counting background
    let mut len: u32 = 0;
    for &v in mask.iter() {
        let bit = (v != 0) as u8;
        if bit == current {
            len += 1;
        } else {
            runs.push(len);
            current = bit;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

/// Decode alternating run lengths back to an `[h, w]` mask.
pub fn rle_decode(runs: &[u32], h: usize, w: usize) -> Result<Array2<u8>> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::format(format!(
            "rle: runs sum to {total}, expected {}",
            h * w
        )));
    }
    let mut flat = Vec::with_capacity(h * w);
    let mut bit = 0u8;
    for &r in runs {
        flat.extend(std::iter::repeat_n(bit, r as usize));
        bit ^= 1;
    }
    Ok(Array2::from_shape_vec((h, w), flat).expect("length checked above"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn encode_known_patterns() {
        // All background.
        let z = Array2::<u8>::zeros((2, 3));
        assert_eq!(rle_encode(&z), vec![6]);
        // Leading foreground ⇒ zero-length background run first.
        let m = arr2(&[[1u8, 1, 0], [0, 1, 0]]);
        assert_eq!(rle_encode(&m), vec![0, 2, 2, 1, 1]);
    }

    #[test]
    fn decode_rejects_bad_totals() {
        assert!(rle_decode(&[5], 2, 3).is_err());
        assert!(rle_decode(&[7], 2, 3).is_err());
        assert!(rle_decode(&[6], 2, 3).is_ok());
    }

    proptest! {
        #[test]
        fn round_trip(bits in proptest::collection::vec(0u8..2, 24)) {
            let mask = Array2::from_shape_vec((4, 6), bits).unwrap();
            let runs = rle_encode(&mask);
            let back = rle_decode(&runs, 4, 6).unwrap();
            prop_assert_eq!(mask, back);
        }
    }
}
