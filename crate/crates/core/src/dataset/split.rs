use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ImageSample, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidInput(format!(
                "split ratios must be non-negative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn of(samples: &[ImageSample]) -> Self {
        let mut counts = SplitCounts::default();
        for s in samples {
            match s.split {
                Some(Split::Train) => counts.train += 1,
                Some(Split::Val) => counts.val += 1,
                Some(Split::Test) => counts.test += 1,
                None => {}
            }
        }
        counts
    }
}

/// The official ISIC-2017 partition.
pub const ISIC2017_SPLIT: SplitCounts = SplitCounts {
    train: 2000,
    val: 150,
    test: 600,
};

fn floor_share(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 1e-9).floor() as usize
}

/// Seeded random split over source ids.
///
/// All tiles cut from one source land in the same split. Val and test sizes
/// are floored; the remainder goes to train. Returns per-sample counts.
pub fn split_dataset(samples: &mut [ImageSample], ratios: SplitRatios, seed: u64) -> Result<SplitCounts> {
    ratios.validate()?;
    if samples.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 samples to split, got {}",
            samples.len()
        )));
    }
    let mut sources: Vec<String> = samples.iter().map(|s| s.origin.source_id.clone()).collect();
    sources.sort();
    sources.dedup();
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = sources.len();
    let n_val = floor_share(n, ratios.val);
    let n_test = floor_share(n, ratios.test);
    let assignment: BTreeMap<String, Split> = sources
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            (id, split)
        })
        .collect();
    for s in samples.iter_mut() {
        s.split = Some(assignment[&s.origin.source_id]);
    }
    Ok(SplitCounts::of(samples))
}

/// Fixed split that ignores any seed.
///
/// Samples that already carry a split tag keep it, which requires every
/// sample to be tagged. Untagged samples are assigned in manifest order:
/// the first `counts.train` to train, then val, then test.
pub fn apply_fixed_split(samples: &mut [ImageSample], counts: SplitCounts) -> Result<SplitCounts> {
    let tagged = samples.iter().filter(|s| s.split.is_some()).count();
    if tagged == samples.len() {
        return Ok(SplitCounts::of(samples));
    }
    if tagged != 0 {
        return Err(Error::InvalidInput(format!(
            "fixed split: {tagged} of {} samples carry a split tag; tag all or none",
            samples.len()
        )));
    }
    if samples.len() != counts.total() {
        return Err(Error::InvalidInput(format!(
            "fixed split expects {} samples, got {}",
            counts.total(),
            samples.len()
        )));
    }
    for (i, s) in samples.iter_mut().enumerate() {
        s.split = Some(if i < counts.train {
            Split::Train
        } else if i < counts.train + counts.val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::dataset::{DatasetKind, Image, Mask, Origin};

    fn samples(n: usize) -> Vec<ImageSample> {
        (0..n)
            .map(|i| {
                ImageSample::new(
                    Image::zeros(1, 2, 2),
                    Mask::zeros(2, 2),
                    Origin::whole(DatasetKind::Synthetic, format!("img{i:04}")),
                )
                .unwrap()
            })
            .collect()
    }

    fn counts(n: usize, seed: u64) -> SplitCounts {
        split_dataset(&mut samples(n), SplitRatios::default(), seed).unwrap()
    }

    #[test]
    fn hundred_and_ten_samples() {
        assert_eq!(counts(100, 0), SplitCounts { train: 70, val: 10, test: 20 });
        assert_eq!(counts(10, 0), SplitCounts { train: 7, val: 1, test: 2 });
        // Floors go to val/test, the remainder to train.
        assert_eq!(counts(13, 0), SplitCounts { train: 10, val: 1, test: 2 });
    }

    #[test]
    fn same_seed_same_partition() {
        let mut a = samples(50);
        let mut b = samples(50);
        split_dataset(&mut a, SplitRatios::default(), 7).unwrap();
        split_dataset(&mut b, SplitRatios::default(), 7).unwrap();
        assert_eq!(a, b);
        let mut c = samples(50);
        split_dataset(&mut c, SplitRatios::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiles_of_one_source_share_a_split() {
        let mut all = Vec::new();
        for src in 0..10 {
            for t in 0..4 {
                let mut origin = Origin::whole(DatasetKind::Dermatomyositis, format!("slide{src}"));
                origin.tile = Some((t / 2, t % 2));
                all.push(ImageSample::new(Image::zeros(1, 1, 1), Mask::zeros(1, 1), origin).unwrap());
            }
        }
        let c = split_dataset(&mut all, SplitRatios::default(), 3).unwrap();
        assert_eq!(c, SplitCounts { train: 28, val: 4, test: 8 });
        for chunk in all.chunks(4) {
            assert!(chunk.iter().all(|s| s.split == chunk[0].split));
        }
    }

    #[test]
    fn too_few_samples_or_bad_ratios() {
        assert!(split_dataset(&mut samples(2), SplitRatios::default(), 0).is_err());
        let bad = SplitRatios { train: 0.5, val: 0.1, test: 0.1 };
        assert!(split_dataset(&mut samples(10), bad, 0).is_err());
    }

    #[test]
    fn fixed_split_ignores_seed() {
        let mut s = samples(2750);
        assert_eq!(apply_fixed_split(&mut s, ISIC2017_SPLIT).unwrap(), ISIC2017_SPLIT);
        assert!(apply_fixed_split(&mut samples(10), ISIC2017_SPLIT).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn splits_are_disjoint_and_exhaustive(n in 3usize..400, seed in 0u64..1000) {
            let mut s = samples(n);
            let c = split_dataset(&mut s, SplitRatios::default(), seed).unwrap();
            proptest::prop_assert_eq!(c.total(), n);
            proptest::prop_assert!(s.iter().all(|x| x.split.is_some()));
            let ids: HashSet<_> = s.iter().map(|x| x.origin.source_id.clone()).collect();
            proptest::prop_assert_eq!(ids.len(), n);
            proptest::prop_assert_eq!(c.val, n / 10);
            proptest::prop_assert_eq!(c.test, n / 5);
        }
    }
}
