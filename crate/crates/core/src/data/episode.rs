use std::collections::BTreeMap;

use rand::seq::index;

use super::annotation::InstanceAnnotation;
use super::split::DatasetSplit;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// One few-shot task: K supports and a query of the same category.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub category_id: u32,
    pub supports: Vec<InstanceAnnotation>,
    pub query: InstanceAnnotation,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }
}

/// Per-category index over an instance pool, reused across many draws.
#[derive(Debug, Clone)]
pub struct EpisodeSampler<'a> {
    by_category: BTreeMap<u32, Vec<&'a InstanceAnnotation>>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(pool: &'a [InstanceAnnotation]) -> Self {
        let mut by_category: BTreeMap<u32, Vec<&InstanceAnnotation>> = BTreeMap::new();
        for inst in pool {
            by_category.entry(inst.category_id).or_default().push(inst);
        }
        Self { by_category }
    }

    pub fn available(&self, category: u32) -> usize {
        self.by_category.get(&category).map_or(0, Vec::len)
    }

    /// Draws K + 1 distinct instances; the first becomes the query.
    pub fn sample(&self, category: u32, shots: usize, seed: u64) -> Result<Episode> {
        if shots == 0 {
            return Err(Error::Contract("an episode needs at least one support".into()));
        }
        let members = self.by_category.get(&category).map(Vec::as_slice).unwrap_or(&[]);
        if members.len() < shots + 1 {
            return Err(Error::Sampling {
                category,
                available: members.len(),
                needed: shots + 1,
            });
        }
        let mut rng = rng_for(seed, &[category as u64, shots as u64]);
        let picks = index::sample(&mut rng, members.len(), shots + 1);
        let mut picks = picks.iter().map(|i| members[i].clone());
        let query = picks.next().expect("k + 1 >= 2 picks");
        Ok(Episode {
            category_id: category,
            supports: picks.collect(),
            query,
        })
    }
}

pub fn sample_episode(
    split: &DatasetSplit,
    pool: &[InstanceAnnotation],
    category: u32,
    shots: usize,
    seed: u64,
) -> Result<Episode> {
    if !split.contains(category) {
        return Err(Error::Contract(format!("category {category} is not part of the split")));
    }
    EpisodeSampler::new(pool).sample(category, shots, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::annotation::{BBox, ImageRef, Keypoint, Visibility};
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn inst(id: u64, category_id: u32) -> InstanceAnnotation {
        InstanceAnnotation {
            id,
            image: ImageRef::Path(PathBuf::from(format!("{id}.png"))),
            image_size: (16, 16),
            category_id,
            bbox: BBox::new(0.0, 0.0, 16.0, 16.0),
            keypoints: vec![Keypoint::new(4.0, 4.0, Visibility::Visible)],
        }
    }

    fn split() -> DatasetSplit {
        DatasetSplit::new([1, 2], [], [3]).unwrap()
    }

    #[test]
    fn two_instances_one_shot_uses_both() {
        let pool = vec![inst(1, 1), inst(2, 1), inst(3, 2)];
        let ep = sample_episode(&split(), &pool, 1, 1, 5).unwrap();
        let mut ids = vec![ep.query.id, ep.supports[0].id];
        ids.sort();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(ep, sample_episode(&split(), &pool, 1, 1, 5).unwrap());
    }

    #[test]
    fn insufficient_instances_reported() {
        let pool = vec![inst(1, 1), inst(2, 1)];
        match sample_episode(&split(), &pool, 1, 2, 0) {
            Err(Error::Sampling { category, available, needed }) => {
                assert_eq!((category, available, needed), (1, 2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(sample_episode(&split(), &pool, 9, 1, 0).is_err());
    }

    #[test]
    fn query_frequency_is_uniform() {
        let pool: Vec<_> = (0..5).map(|i| inst(i, 1)).collect();
        let sampler = EpisodeSampler::new(&pool);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for seed in 0..draws {
            counts[sampler.sample(1, 1, seed).unwrap().query.id as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.2).abs() <= 0.02, "frequency {f}");
        }
    }

    proptest! {
        #[test]
        fn query_is_never_a_support(n in 2usize..12, k in 1usize..6, seed in any::<u64>()) {
            let pool: Vec<_> = (0..n as u64).map(|i| inst(i, 1)).collect();
            let sampler = EpisodeSampler::new(&pool);
            match sampler.sample(1, k, seed) {
                Ok(ep) => {
                    prop_assert_eq!(ep.supports.len(), k);
                    prop_assert!(ep.supports.iter().all(|s| s.id != ep.query.id));
                    let mut ids: Vec<_> = ep.supports.iter().map(|s| s.id).collect();
                    ids.sort();
                    ids.dedup();
                    prop_assert_eq!(ids.len(), k);
                    prop_assert!(ep.supports.iter().all(|s| s.category_id == 1));
                }
                Err(_) => prop_assert!(n < k + 1),
            }
        }
    }
}
