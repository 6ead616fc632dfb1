//! Interaction/attribute datasets, warm/cold item splits, negative sampling
//! and a planted-structure synthetic generator.

mod io;
mod synthetic;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DenseMatrix;

pub use io::{
    parse_attributes, parse_interactions, parse_split, read_attributes, read_interactions,
    read_split, write_attributes, write_interactions, write_split,
};
pub use synthetic::{generate_planted, generate_synthetic, PlantedModel, SyntheticConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemSplit {
    Warm,
    Val,
    Test,
}

/// How items are divided into warm, validation-cold and test-cold sets.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    Explicit {
        warm: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    },
    /// Uniform random split; val/test counts round down, warm takes the rest.
    Ratio {
        seed: u64,
        warm: f64,
        val: f64,
        test: f64,
    },
}

impl SplitSpec {
    /// Resolves the spec against an item universe `0..num_items`, returning
    /// sorted (warm, val, test) lists.
    pub fn resolve(&self, num_items: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        match self {
            SplitSpec::Explicit { warm, val, test } => {
                let mut lists = (warm.clone(), val.clone(), test.clone());
                lists.0.sort_unstable();
                lists.1.sort_unstable();
                lists.2.sort_unstable();
                Ok(lists)
            }
            &SplitSpec::Ratio {
                seed,
                warm,
                val,
                test,
            } => {
                for (name, r) in [("warm", warm), ("val", val), ("test", test)] {
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::Config(format!("{name} ratio {r} is outside [0, 1]")));
                    }
                }
                if (warm + val + test - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "split ratios must sum to 1, got {warm} + {val} + {test}"
                    )));
                }
                let n_val = floor_count(val, num_items);
                let n_test = floor_count(test, num_items);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(split_by_counts(num_items, n_val, n_test, &mut rng))
            }
        }
    }
}

fn floor_count(ratio: f64, n: usize) -> usize {
    // The epsilon keeps 0.3·10 (= 3.0000000000000004) and 0.29·100 (= 28.999999999999996) honest.
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Shuffles `0..num_items`; the first `n_val` become validation, the next
/// `n_test` test, the remainder warm. Each list is returned sorted.
pub(crate) fn split_by_counts<R: Rng + ?Sized>(
    num_items: usize,
    n_val: usize,
    n_test: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..num_items).collect();
    ids.shuffle(rng);
    let mut val = ids[..n_val].to_vec();
    let mut test = ids[n_val..n_val + n_test].to_vec();
    let mut warm = ids[n_val + n_test..].to_vec();
    warm.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (warm, val, test)
}

/// Users, the item attribute matrix, the warm/cold item partition and every
/// user's interactions (warm interactions train, cold ones only evaluate).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    num_users: usize,
    attributes: DenseMatrix,
    warm_items: Vec<usize>,
    cold_val_items: Vec<usize>,
    cold_test_items: Vec<usize>,
    interactions: Vec<Vec<usize>>,
    item_split: Vec<ItemSplit>,
    warm_row: Vec<Option<usize>>,
}

/// Positive and sampled negative items for one user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSampleBatch {
    pub user: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Set when fewer negatives than `ratio × positives` were available.
    pub shortfall: bool,
}

impl Dataset {
    /// Validates and assembles a dataset. Item lists are sorted; interaction
    /// lists are sorted per user.
    pub fn new(
        attributes: DenseMatrix,
        warm_items: Vec<usize>,
        cold_val_items: Vec<usize>,
        cold_test_items: Vec<usize>,
        mut interactions: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let num_items = attributes.rows();
        let mut item_split: Vec<Option<ItemSplit>> = vec![None; num_items];
        for (list, tag) in [
            (&warm_items, ItemSplit::Warm),
            (&cold_val_items, ItemSplit::Val),
            (&cold_test_items, ItemSplit::Test),
        ] {
            for &item in list.iter() {
                let slot = item_split.get_mut(item).ok_or_else(|| {
                    Error::Integrity(format!(
                        "split references item {item} but only {num_items} attribute rows exist"
                    ))
                })?;
                if let Some(prev) = slot {
                    return Err(Error::Integrity(format!(
                        "item {item} appears in both {prev:?} and {tag:?}"
                    )));
                }
                *slot = Some(tag);
            }
        }
        if let Some(item) = item_split.iter().position(Option::is_none) {
            return Err(Error::Integrity(format!(
                "item {item} is in none of the warm/val/test sets"
            )));
        }
        if warm_items.is_empty() {
            return Err(Error::Config("the warm item set is empty".into()));
        }
        let item_split: Vec<ItemSplit> = item_split.into_iter().map(Option::unwrap).collect();

        for (user, items) in interactions.iter_mut().enumerate() {
            items.sort_unstable();
            if let Some(w) = items.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::Integrity(format!(
                    "user {user} interacts with item {} more than once",
                    w[0]
                )));
            }
            if let Some(&bad) = items.iter().find(|&&i| i >= num_items) {
                return Err(Error::Integrity(format!(
                    "user {user} interacts with unknown item {bad}"
                )));
            }
        }

        let mut warm_items = warm_items;
        let mut cold_val_items = cold_val_items;
        let mut cold_test_items = cold_test_items;
        warm_items.sort_unstable();
        cold_val_items.sort_unstable();
        cold_test_items.sort_unstable();

        let mut warm_row = vec![None; num_items];
        for (row, &item) in warm_items.iter().enumerate() {
            warm_row[item] = Some(row);
        }
        Ok(Dataset {
            num_users: interactions.len(),
            attributes,
            warm_items,
            cold_val_items,
            cold_test_items,
            interactions,
            item_split,
            warm_row,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.attributes.rows()
    }

    pub fn num_warm(&self) -> usize {
        self.warm_items.len()
    }

    pub fn attribute_dim(&self) -> usize {
        self.attributes.cols()
    }

    pub fn attributes(&self) -> &DenseMatrix {
        &self.attributes
    }

    pub fn warm_items(&self) -> &[usize] {
        &self.warm_items
    }

    pub fn cold_val_items(&self) -> &[usize] {
        &self.cold_val_items
    }

    pub fn cold_test_items(&self) -> &[usize] {
        &self.cold_test_items
    }

    pub fn cold_items(&self, split: ItemSplit) -> &[usize] {
        match split {
            ItemSplit::Warm => &self.warm_items,
            ItemSplit::Val => &self.cold_val_items,
            ItemSplit::Test => &self.cold_test_items,
        }
    }

    pub fn item_split(&self, item: usize) -> Option<ItemSplit> {
        self.item_split.get(item).copied()
    }

    /// Row of `item` in warm-indexed matrices (global item embedding, `X_warm`).
    pub fn warm_row(&self, item: usize) -> Option<usize> {
        self.warm_row.get(item).copied().flatten()
    }

    pub fn interactions(&self, user: usize) -> Result<&[usize]> {
        self.interactions
            .get(user)
            .map(Vec::as_slice)
            .ok_or_else(|| self.unknown_user(user))
    }

    pub fn all_interactions(&self) -> &[Vec<usize>] {
        &self.interactions
    }

    fn unknown_user(&self, user: usize) -> Error {
        Error::Lookup(format!("unknown user {user} (dataset has {})", self.num_users))
    }

    /// Warm interactions of `user`, as warm row indices (ascending).
    pub fn warm_positive_rows(&self, user: usize) -> Result<Vec<usize>> {
        let items = self.interactions(user)?;
        let mut rows: Vec<usize> = items.iter().filter_map(|&i| self.warm_row(i)).collect();
        rows.sort_unstable();
        Ok(rows)
    }

    /// Interactions of `user` restricted to one item split.
    pub fn interactions_in(&self, user: usize, split: ItemSplit) -> Result<Vec<usize>> {
        Ok(self
            .interactions(user)?
            .iter()
            .copied()
            .filter(|&i| self.item_split[i] == split)
            .collect())
    }

    /// Attribute rows of the warm items, in warm order.
    pub fn warm_attributes(&self) -> DenseMatrix {
        self.attributes
            .gather_rows(&self.warm_items)
            .expect("warm ids index attribute rows")
    }

    pub fn attributes_of(&self, items: &[usize]) -> Result<DenseMatrix> {
        self.attributes.gather_rows(items)
    }

    /// Warm items `user` has never interacted with.
    pub fn uninteracted_items(&self, user: usize) -> Result<Vec<usize>> {
        let positives: HashSet<usize> = self.interactions(user)?.iter().copied().collect();
        Ok(self
            .warm_items
            .iter()
            .copied()
            .filter(|i| !positives.contains(i))
            .collect())
    }

    /// Draws `min(ratio·|positives|, |uninteracted|)` negatives uniformly
    /// without replacement from the user's uninteracted warm items.
    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        user: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<NegativeSampleBatch> {
        let positive_rows = self.warm_positive_rows(user)?;
        let (negative_rows, shortfall) =
            sample_negative_rows(&positive_rows, self.num_warm(), ratio, rng)?;
        if shortfall && negative_rows.is_empty() && !positive_rows.is_empty() {
            log::warn!("user {user} has interacted with every warm item; no negatives available");
        }
        let to_ids = |rows: Vec<usize>| rows.into_iter().map(|r| self.warm_items[r]).collect();
        Ok(NegativeSampleBatch {
            user,
            positives: to_ids(positive_rows),
            negatives: to_ids(negative_rows),
            shortfall,
        })
    }

    /// Partition and reference checks; always true for a constructed dataset.
    pub fn check_invariants(&self) -> Result<()> {
        Dataset::new(
            self.attributes.clone(),
            self.warm_items.clone(),
            self.cold_val_items.clone(),
            self.cold_test_items.clone(),
            self.interactions.clone(),
        )
        .map(|_| ())
    }
}

/// Warm rows not in `positives` (which must be sorted ascending).
pub fn complement_rows(positives: &[usize], num_warm: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(num_warm.saturating_sub(positives.len()));
    let mut it = positives.iter().peekable();
    for row in 0..num_warm {
        if it.peek() == Some(&&row) {
            it.next();
        } else {
            out.push(row);
        }
    }
    out
}

/// Negative sampling in warm-row space. Returns the sorted sample and whether
/// fewer than `ratio × |positives|` were available.
pub fn sample_negative_rows<R: Rng + ?Sized>(
    positives: &[usize],
    num_warm: usize,
    ratio: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, bool)> {
    if ratio < 1 {
        return Err(Error::Config(format!("negative sampling ratio must be ≥ 1, got {ratio}")));
    }
    let pool = complement_rows(positives, num_warm);
    let wanted = ratio * positives.len();
    let take = wanted.min(pool.len());
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    Ok((picked, take < wanted))
}

/// Reads the interaction and attribute files and applies `split`.
pub fn load_dataset(
    interactions_path: impl AsRef<Path>,
    attributes_path: impl AsRef<Path>,
    split: &SplitSpec,
) -> Result<Dataset> {
    let attributes = read_attributes(attributes_path.as_ref())?;
    let pairs = read_interactions(interactions_path.as_ref())?;
    build_dataset(attributes, &pairs, split)
}

/// Assembles a dataset from parsed `(user, item)` pairs.
pub fn build_dataset(
    attributes: DenseMatrix,
    pairs: &[(usize, usize)],
    split: &SplitSpec,
) -> Result<Dataset> {
    let num_items = attributes.rows();
    let num_users = pairs.iter().map(|&(u, _)| u + 1).max().unwrap_or(0);
    let mut interactions = vec![Vec::new(); num_users];
    for &(u, i) in pairs {
        if i >= num_items {
            return Err(Error::Integrity(format!(
                "interaction ({u}, {i}) references unknown item {i}; {num_items} items have attributes"
            )));
        }
        interactions[u].push(i);
    }
    let (warm, val, test) = split.resolve(num_items)?;
    Dataset::new(attributes, warm, val, test, interactions)
}
