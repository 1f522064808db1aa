use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Fraction of the training set assigned to each device.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    fractions: BTreeMap<String, f64>,
}

impl PartitionPlan {
    pub fn new(fractions: impl IntoIterator<Item = (String, f64)>) -> Result<Self, DataError> {
        let mut map = BTreeMap::new();
        for (id, f) in fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(DataError::Config(format!(
                    "fraction for {id} must be in (0, 1], got {f}"
                )));
            }
            if map.insert(id.clone(), f).is_some() {
                return Err(DataError::Config(format!("device {id} listed twice")));
            }
        }
        if map.is_empty() {
            return Err(DataError::Config("partition plan has no devices".into()));
        }
        let total: f64 = map.values().sum();
        if total > 1.0 + 1e-9 {
            return Err(DataError::Config(format!(
                "fractions sum to {total}, more than 1"
            )));
        }
        Ok(Self { fractions: map })
    }

    /// Every device gets `1 / n`.
    pub fn balanced<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Result<Self, DataError> {
        let ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        let f = 1.0 / ids.len().max(1) as f64;
        Self::new(ids.into_iter().map(|id| (id, f)))
    }

    pub fn fractions(&self) -> &BTreeMap<String, f64> {
        &self.fractions
    }

    /// Shard size per device for a dataset of `n` samples.
    ///
    /// Each size is `round(f * n)`. If that overshoots `n`, the excess is taken
    /// from the device with the largest fraction (lowest id on ties). An
    /// undershoot leaves the remaining samples unassigned.
    pub fn sizes(&self, n: usize) -> BTreeMap<String, usize> {
        let mut sizes: BTreeMap<String, usize> = self
            .fractions
            .iter()
            .map(|(id, f)| (id.clone(), (f * n as f64).round() as usize))
            .collect();
        let total: usize = sizes.values().sum();
        if total > n {
            let largest = self
                .fractions
                .iter()
                .fold(None::<(&String, f64)>, |best, (id, &f)| match best {
                    Some((_, bf)) if bf >= f => best,
                    _ => Some((id, f)),
                })
                .map(|(id, _)| id.clone())
                .expect("plan is non-empty");
            let s = sizes.get_mut(&largest).expect("present");
            *s = s.saturating_sub(total - n);
        }
        sizes
    }
}

/// Sample indices owned by one device, in training order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shard {
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks(batch_size.max(1))
    }

    pub fn batch_count(&self, batch_size: usize) -> usize {
        self.indices.len().div_ceil(batch_size.max(1))
    }
}

/// Shuffles `0..n` with `seed`, then hands out contiguous ranges in device-id order.
pub fn partition(n: usize, plan: &PartitionPlan, seed: u64) -> BTreeMap<String, Shard> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    plan.sizes(n)
        .into_iter()
        .map(|(id, size)| {
            let shard = Shard {
                indices: order[start..start + size].to_vec(),
            };
            start += size;
            (id, shard)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(f: &[(&str, f64)]) -> PartitionPlan {
        PartitionPlan::new(f.iter().map(|(id, f)| (id.to_string(), *f))).unwrap()
    }

    #[test]
    fn balanced_quarters() {
        let shards = partition(
            2000,
            &PartitionPlan::balanced(["a", "b", "c", "d"]).unwrap(),
            5,
        );
        assert!(shards.values().all(|s| s.len() == 500));
    }

    #[test]
    fn half_on_one_device() {
        let third = 0.5 / 3.0;
        let p = plan(&[("a", 0.5), ("b", third), ("c", third), ("d", third)]);
        let sizes = p.sizes(2000);
        assert_eq!(sizes["a"], 1000);
        assert_eq!(sizes["b"], 333);
    }

    #[test]
    fn overshoot_is_trimmed_from_largest() {
        // round(2.5) twice = 6 > 5: the tie goes to the lowest id.
        let p = plan(&[("x", 0.5), ("y", 0.5)]);
        let sizes = p.sizes(5);
        assert_eq!((sizes["x"], sizes["y"]), (2, 3));
    }

    #[test]
    fn shards_are_disjoint() {
        let shards = partition(100, &plan(&[("a", 0.2), ("b", 0.3), ("c", 0.5)]), 9);
        let mut all: Vec<usize> = shards.values().flat_map(|s| s.indices.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn oversubscribed_plan_is_rejected() {
        assert!(PartitionPlan::new([("a".to_string(), 0.7), ("b".to_string(), 0.4)]).is_err());
        assert!(PartitionPlan::new([("a".to_string(), 0.0)]).is_err());
    }
}
