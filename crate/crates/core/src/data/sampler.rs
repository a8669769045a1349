use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vision::Modality;

/// An index into the image or the video pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PoolItem {
    pub modality: Modality,
    pub index: usize,
}

/// Derives the per-epoch shuffling seed.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One epoch of mixed batches. While both pools have items left, every
/// batch holds at least one of each, with counts proportional to what
/// remains in each pool; each item appears exactly once.
pub fn mixed_batches(
    images: usize,
    videos: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<PoolItem>>> {
    if batch_size == 0 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    if batch_size < 2 && images > 0 && videos > 0 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
    let mut img: Vec<usize> = (0..images).collect();
    let mut vid: Vec<usize> = (0..videos).collect();
    img.shuffle(&mut rng);
    vid.shuffle(&mut rng);
    let (mut i, mut v) = (0, 0);
    let mut out = Vec::new();
    while i < images || v < videos {
        let (ri, rv) = (images - i, videos - v);
        let b = batch_size.min(ri + rv);
        let ki = if ri == 0 {
            0
        } else if rv == 0 {
            b
        } else {
            let share = (b as f64 * ri as f64 / (ri + rv) as f64).round() as usize;
            share.clamp(1, b - 1).min(ri).max(b.saturating_sub(rv))
        };
        let kv = b - ki;
        let mut batch = Vec::with_capacity(b);
        batch.extend(img[i..i + ki].iter().map(|&index| PoolItem {
            modality: Modality::Image,
            index,
        }));
        batch.extend(vid[v..v + kv].iter().map(|&index| PoolItem {
            modality: Modality::Video,
            index,
        }));
        i += ki;
        v += kv;
        out.push(batch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn count(b: &[PoolItem], m: Modality) -> usize {
        b.iter().filter(|x| x.modality == m).count()
    }

    #[test]
    fn balanced_pools_split_evenly() {
        let batches = mixed_batches(100, 100, 8, 3, 0).unwrap();
        assert_eq!(batches.len(), 25);
        for b in &batches {
            assert_eq!(count(b, Modality::Image), 4);
            assert_eq!(count(b, Modality::Video), 4);
        }
    }

    #[test]
    fn empty_video_pool_gives_image_batches() {
        let batches = mixed_batches(10, 0, 4, 0, 0).unwrap();
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert!(batches.iter().flatten().all(|x| x.modality == Modality::Image));
    }

    #[test]
    fn batch_of_one_with_two_pools_is_rejected() {
        assert!(matches!(mixed_batches(3, 3, 1, 0, 0), Err(Error::BatchTooSmall(1))));
        assert!(mixed_batches(3, 0, 1, 0, 0).is_ok());
    }

    #[test]
    fn seeded_and_epoch_dependent() {
        assert_eq!(mixed_batches(30, 20, 8, 5, 1).unwrap(), mixed_batches(30, 20, 8, 5, 1).unwrap());
        assert_ne!(mixed_batches(30, 20, 8, 5, 1).unwrap(), mixed_batches(30, 20, 8, 5, 2).unwrap());
    }

    proptest! {
        #[test]
        fn epoch_is_the_pool_multiset(images in 0usize..60, videos in 0usize..60, b in 2usize..17, seed in any::<u64>()) {
            let batches = mixed_batches(images, videos, b, seed, 0).unwrap();
            let mut seen: Vec<PoolItem> = batches.iter().flatten().copied().collect();
            seen.sort();
            let mut expect: Vec<PoolItem> = (0..images)
                .map(|index| PoolItem { modality: Modality::Image, index })
                .chain((0..videos).map(|index| PoolItem { modality: Modality::Video, index }))
                .collect();
            expect.sort();
            prop_assert_eq!(seen, expect);
            let (mut ri, mut rv) = (images, videos);
            for batch in &batches {
                prop_assert!(!batch.is_empty() && batch.len() <= b);
                let (ci, cv) = (count(batch, Modality::Image), count(batch, Modality::Video));
                if ri > 0 && rv > 0 {
                    prop_assert!(ci >= 1 && cv >= 1);
                }
                ri -= ci;
                rv -= cv;
            }
        }
    }
}
