use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Sizes for `n` items: every part but the last gets `floor(n·f)`, the last
/// takes the remainder.
fn part_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let a = ((n as f64 * fractions[0]) + 1e-9).floor() as usize;
    let b = (((n as f64 * fractions[1]) + 1e-9).floor() as usize).min(n - a);
    Ok([a, b, n - a - b])
}

/// Seeded shuffle of `0..n` cut into train/val/test index sets.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if n == 0 {
        return Err(Error::EmptyDataset("cannot split an empty dataset".into()));
    }
    let [a, b, _] = part_sizes(n, fractions)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "split", 0));
    let test = idx.split_off(a + b);
    let val = idx.split_off(a);
    Ok([idx, val, test])
}

pub fn split<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<[Vec<T>; 3]> {
    let parts = split_indices(items.len(), fractions, seed)?;
    Ok(parts.map(|p| p.into_iter().map(|i| items[i].clone()).collect()))
}
