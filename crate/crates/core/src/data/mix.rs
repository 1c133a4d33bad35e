//! Phase-2 training mixture.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Indices (ascending) of the videos to compress: `floor(fraction * n)` of
/// them, chosen by `seed`.
pub fn compressed_selection(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("compressed fraction {fraction} outside [0, 1]")));
    }
    let k = ((fraction * n as f64).floor() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Phase-2 schedule: the selected records replaced by their compressed
/// counterparts. `compress` is called once per selected record, in order.
pub fn make_training_mix<T: Clone, F>(records: &[T], fraction: f64, seed: u64, mut compress: F) -> Result<Vec<T>>
where
    F: FnMut(&T) -> Result<T>,
{
    let chosen = compressed_selection(records.len(), fraction, seed)?;
    let mut out = records.to_vec();
    for i in chosen {
        out[i] = compress(&records[i])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_of_eight() {
        let a = compressed_selection(8, 0.25, 7).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, compressed_selection(8, 0.25, 7).unwrap());
        assert!(compressed_selection(8, 0.0, 7).unwrap().is_empty());
        assert_eq!(compressed_selection(8, 1.0, 7).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(compressed_selection(8, 1.5, 7).is_err());
    }

    #[test]
    fn mix_replaces_only_selected() {
        let recs: Vec<(usize, bool)> = (0..8).map(|i| (i, false)).collect();
        let mix = make_training_mix(&recs, 0.25, 3, |r| Ok((r.0, true))).unwrap();
        assert_eq!(mix.iter().filter(|r| r.1).count(), 2);
        assert!(mix.iter().enumerate().all(|(i, r)| r.0 == i));
    }
}
