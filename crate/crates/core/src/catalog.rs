//! Item catalog: ids, utilities, and feature vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a recommendable item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
    #[error("duplicate item id {0} in catalog")]
    DuplicateItem(ItemId),
    #[error("catalog items must share one feature dimension: item {id} has {got}, expected {expected}")]
    FeatureDimMismatch { id: ItemId, got: usize, expected: usize },
    #[error("catalog is empty")]
    Empty,
}

/// One catalog entry: utility `r_i` plus a feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub utility: f64,
    pub features: Vec<f64>,
}

/// Immutable item catalog. Iteration order is the insertion order, which
/// all downstream code treats as canonical for determinism.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    items: Vec<Item>,
    #[serde(skip)]
    by_id: BTreeMap<u32, usize>,
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl Catalog {
    pub fn new(items: Vec<Item>) -> Result<Self, CatalogError> {
        if items.is_empty() {
            return Err(CatalogError::Empty);
        }
        let dim = items[0].features.len();
        let mut by_id = BTreeMap::new();
        for (idx, item) in items.iter().enumerate() {
            if item.features.len() != dim {
                return Err(CatalogError::FeatureDimMismatch {
                    id: item.id,
                    got: item.features.len(),
                    expected: dim,
                });
            }
            if by_id.insert(item.id.0, idx).is_some() {
                return Err(CatalogError::DuplicateItem(item.id));
            }
        }
        Ok(Self { items, by_id })
    }

    /// Rebuild the id index after deserialization.
    pub fn reindex(self) -> Result<Self, CatalogError> {
        Self::new(self.items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.items[0].features.len()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.items.iter().map(|i| i.id)
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.by_id.contains_key(&id.0)
    }

    pub fn get(&self, id: ItemId) -> Result<&Item, CatalogError> {
        self.by_id
            .get(&id.0)
            .map(|&idx| &self.items[idx])
            .ok_or(CatalogError::UnknownItem(id))
    }

    /// Canonical position of `id` in the catalog.
    pub fn index_of(&self, id: ItemId) -> Result<usize, CatalogError> {
        self.by_id.get(&id.0).copied().ok_or(CatalogError::UnknownItem(id))
    }

    pub fn utility(&self, id: ItemId) -> Result<f64, CatalogError> {
        self.get(id).map(|i| i.utility)
    }
}
