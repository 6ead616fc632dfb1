use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{split_by_counts, Dataset};
use crate::error::{Error, Result};
use crate::nn::DenseMatrix;

/// Parameters of the planted low-rank preference model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub warm_items: usize,
    pub cold_val_items: usize,
    pub cold_test_items: usize,
    /// Rank of the planted user/item factors.
    pub latent_dim: usize,
    pub attribute_dim: usize,
    /// Standard deviation of the additive attribute noise.
    pub attribute_noise: f64,
    /// Warm interactions per user: the top-scoring warm items.
    pub interactions_per_user: usize,
    /// Relevant items per user in each cold split: the top-scoring ones.
    pub relevant_per_user: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 200,
            warm_items: 300,
            cold_val_items: 100,
            cold_test_items: 100,
            latent_dim: 8,
            attribute_dim: 32,
            attribute_noise: 0.1,
            interactions_per_user: 10,
            relevant_per_user: 5,
        }
    }
}

impl SyntheticConfig {
    pub fn total_items(&self) -> usize {
        self.warm_items + self.cold_val_items + self.cold_test_items
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim > self.attribute_dim {
            return Err(Error::Config(format!(
                "latent dim {} must be in 1..={} (the attribute dim)",
                self.latent_dim, self.attribute_dim
            )));
        }
        if self.warm_items == 0 {
            return Err(Error::Config("synthetic data needs at least one warm item".into()));
        }
        if self.interactions_per_user > self.warm_items {
            return Err(Error::Config(format!(
                "{} interactions per user exceed the {} warm items",
                self.interactions_per_user, self.warm_items
            )));
        }
        for (name, size) in [("val", self.cold_val_items), ("test", self.cold_test_items)] {
            if size > 0 && self.relevant_per_user > size {
                return Err(Error::Config(format!(
                    "{} relevant items per user exceed the {size} {name} cold items",
                    self.relevant_per_user
                )));
            }
        }
        if !(self.attribute_noise >= 0.0) || !self.attribute_noise.is_finite() {
            return Err(Error::Config(format!(
                "attribute noise must be finite and non-negative, got {}",
                self.attribute_noise
            )));
        }
        Ok(())
    }
}

/// Ground-truth factors behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedModel {
    pub user_factors: DenseMatrix,
    pub item_factors: DenseMatrix,
    /// `latent_dim × attribute_dim` map from item factors to attributes.
    pub attribute_map: DenseMatrix,
}

impl PlantedModel {
    pub fn score(&self, user: usize, item: usize) -> f64 {
        self.user_factors
            .row(user)
            .iter()
            .zip(self.item_factors.row(item))
            .map(|(a, b)| a * b)
            .sum()
    }

    /// `items` sorted by planted score for `user`, best first, ties by id.
    pub fn rank(&self, user: usize, items: &[usize]) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = items.iter().map(|&i| (self.score(user, i), i)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().map(|(_, i)| i).collect()
    }

    /// SHA-256 over the factor matrices, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for m in [&self.user_factors, &self.item_factors, &self.attribute_map] {
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    generate_planted(config, seed).map(|(ds, _)| ds)
}

/// Draws Gaussian user/item factors, attributes `X = V·A + ε`, warm
/// interactions as each user's top-scoring warm items, and cold relevance as
/// each user's top-scoring items within every cold split.
pub fn generate_planted(config: &SyntheticConfig, seed: u64) -> Result<(Dataset, PlantedModel)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let k = config.latent_dim;
    let n_items = config.total_items();

    let user_factors = DenseMatrix::from_fn(config.users, k, |_, _| std.sample(&mut rng));
    let item_factors = DenseMatrix::from_fn(n_items, k, |_, _| std.sample(&mut rng));
    // entries of V·A then have unit variance
    let map_scale = 1.0 / (k as f64).sqrt();
    let attribute_map =
        DenseMatrix::from_fn(k, config.attribute_dim, |_, _| map_scale * std.sample(&mut rng));
    let mut attributes = item_factors.matmul(&attribute_map)?;
    if config.attribute_noise > 0.0 {
        let noise = Normal::new(0.0, config.attribute_noise).expect("validated noise");
        for v in attributes.as_mut_slice() {
            *v += noise.sample(&mut rng);
        }
    }

    let (warm, val, test) =
        split_by_counts(n_items, config.cold_val_items, config.cold_test_items, &mut rng);
    let planted = PlantedModel {
        user_factors,
        item_factors,
        attribute_map,
    };

    let interactions = (0..config.users)
        .map(|u| {
            let mut items: Vec<usize> = planted.rank(u, &warm)[..config.interactions_per_user].to_vec();
            for cold in [&val, &test] {
                if !cold.is_empty() {
                    items.extend_from_slice(&planted.rank(u, cold)[..config.relevant_per_user]);
                }
            }
            items
        })
        .collect();

    let dataset = Dataset::new(attributes, warm, val, test, interactions)?;
    Ok((dataset, planted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemSplit;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            users: 20,
            warm_items: 40,
            cold_val_items: 10,
            cold_test_items: 15,
            latent_dim: 4,
            attribute_dim: 6,
            attribute_noise: 0.0,
            interactions_per_user: 5,
            relevant_per_user: 3,
        }
    }

    #[test]
    fn config_errors() {
        let mut c = small();
        c.latent_dim = 7;
        assert!(matches!(generate_synthetic(&c, 0), Err(Error::Config(_))));
        let mut c = small();
        c.interactions_per_user = 41;
        assert!(matches!(generate_synthetic(&c, 0), Err(Error::Config(_))));
        let mut c = small();
        c.relevant_per_user = 11;
        assert!(generate_synthetic(&c, 0).is_err());
    }

    #[test]
    fn noiseless_attributes_are_linear_image_of_factors() {
        let (ds, planted) = generate_planted(&small(), 3).unwrap();
        let expect = planted.item_factors.matmul(&planted.attribute_map).unwrap();
        assert!(ds.attributes().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_planted(&small(), 17).unwrap();
        let b = generate_planted(&small(), 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1.fingerprint(), generate_planted(&small(), 18).unwrap().1.fingerprint());
    }

    #[test]
    fn interactions_are_top_scoring_items() {
        let cfg = small();
        let (ds, planted) = generate_planted(&cfg, 5).unwrap();
        for u in 0..cfg.users {
            let warm: Vec<usize> = ds.interactions_in(u, ItemSplit::Warm).unwrap();
            assert_eq!(warm.len(), cfg.interactions_per_user);
            let worst_pos = warm.iter().map(|&i| planted.score(u, i)).fold(f64::INFINITY, f64::min);
            for &i in ds.warm_items() {
                if !warm.contains(&i) {
                    assert!(planted.score(u, i) <= worst_pos);
                }
            }
            assert_eq!(ds.interactions_in(u, ItemSplit::Test).unwrap().len(), cfg.relevant_per_user);
            assert_eq!(ds.interactions_in(u, ItemSplit::Val).unwrap().len(), cfg.relevant_per_user);
        }
    }
}
