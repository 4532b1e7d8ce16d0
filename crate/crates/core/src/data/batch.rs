use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sample indices of one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// The first `⌊fraction·n⌋` entries of a permutation of `0..n` fixed by `seed`.
pub fn subset(n: usize, seed: u64, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "data fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let take = (fraction * n as f64).floor() as usize;
    if take == 0 {
        return Err(Error::Data(format!(
            "fraction {fraction} of {n} samples selects nothing"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm.truncate(take);
    Ok(perm)
}

/// Mini-batches over the training subset for one epoch.
///
/// Membership depends only on `seed` and `fraction`; the order is reshuffled
/// from `(seed, epoch)`. The last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize, fraction: f64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order = subset(n, seed, fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch { indices: c.to_vec() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_keep_partial_tail() {
        let sizes: Vec<_> = batches(10, 4, 0, 0, 1.0).unwrap().iter().map(|b| b.indices.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn fraction_selects_stable_members() {
        let mut seen = None;
        for epoch in 0..5 {
            let mut members: Vec<_> = batches(10, 4, 3, epoch, 0.2)
                .unwrap()
                .into_iter()
                .flat_map(|b| b.indices)
                .collect();
            assert_eq!(members.len(), 2);
            members.sort();
            if let Some(prev) = &seen {
                assert_eq!(prev, &members);
            }
            seen = Some(members);
        }
    }

    #[test]
    fn epochs_reorder_same_members() {
        let a: Vec<_> = batches(50, 7, 1, 0, 1.0).unwrap().into_iter().flat_map(|b| b.indices).collect();
        let b: Vec<_> = batches(50, 7, 1, 1, 1.0).unwrap().into_iter().flat_map(|b| b.indices).collect();
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
        assert_eq!(a, batches(50, 7, 1, 0, 1.0).unwrap().into_iter().flat_map(|b| b.indices).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(batches(10, 0, 0, 0, 1.0), Err(Error::Config(_))));
        assert!(matches!(subset(10, 0, 1.5), Err(Error::Config(_))));
        assert!(matches!(subset(10, 0, 0.0), Err(Error::Config(_))));
        assert!(matches!(subset(3, 0, 0.2), Err(Error::Data(_))));
    }
}
