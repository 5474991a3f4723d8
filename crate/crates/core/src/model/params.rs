//! Tagged parameter trees.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::scalar::Scalar;

/// Which side of the shape/appearance partition a leaf belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathTag {
    Shape,
    Appearance,
    DecoderShape,
    DecoderAppearance,
}

impl PathTag {
    /// Member of θ_S (shared under FedDis).
    pub fn is_shape(self) -> bool {
        matches!(self, PathTag::Shape | PathTag::DecoderShape)
    }

    pub fn is_appearance(self) -> bool {
        !self.is_shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafKind {
    Learnable,
    /// Batch-norm running mean or variance.
    NormStatistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf<T> {
    pub name: String,
    pub path: PathTag,
    pub kind: LeafKind,
    pub dims: Vec<usize>,
    pub values: Vec<T>,
}

impl<T> Leaf<T> {
    pub fn is_learnable(&self) -> bool {
        self.kind == LeafKind::Learnable
    }
}

/// Full parameter set of one autoencoder instance.
///
/// Leaf order is fixed by the architecture, so two trees built from the same
/// [`ArchConfig`] and `disentangled` flag line up index by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    pub disentangled: bool,
    pub seed: u64,
    pub leaves: Vec<Leaf<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn leaf(&self, name: &str) -> Option<&Leaf<T>> {
        self.leaves.iter().find(|l| l.name == name)
    }

    pub fn leaf_mut(&mut self, name: &str) -> Option<&mut Leaf<T>> {
        self.leaves.iter_mut().find(|l| l.name == name)
    }

    pub fn learnable_count(&self) -> usize {
        self.leaves
            .iter()
            .filter(|l| l.is_learnable())
            .map(|l| l.values.len())
            .sum()
    }

    /// Same architecture, leaf names, tags and dimensions.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.disentangled == other.disentangled
            && self.leaves.len() == other.leaves.len()
            && self.leaves.iter().zip(&other.leaves).all(|(a, b)| {
                a.name == b.name
                    && a.path == b.path
                    && a.kind == b.kind
                    && a.dims == b.dims
                    && a.values.len() == b.values.len()
            })
    }

    pub fn ensure_same_structure(&self, other: &Self) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::Protocol("parameter trees are not structurally identical".into()))
        }
    }

    /// SHA-256 over leaf names and value bit patterns, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for leaf in &self.leaves {
            h.update(leaf.name.as_bytes());
            for v in &leaf.values {
                h.update(v.to_bits_u64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            disentangled: self.disentangled,
            seed: self.seed,
            leaves: self
                .leaves
                .iter()
                .map(|l| Leaf {
                    name: l.name.clone(),
                    path: l.path,
                    kind: l.kind,
                    dims: l.dims.clone(),
                    values: l.values.iter().map(|v| U::c(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Per-leaf gradient buffers aligned with [`ModelParams::leaves`]; empty for
/// norm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub per_leaf: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            per_leaf: params
                .leaves
                .iter()
                .map(|l| {
                    if l.is_learnable() {
                        vec![T::zero(); l.values.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }

    pub fn leaf(&self, params: &ModelParams<T>, name: &str) -> Option<&[T]> {
        params
            .leaves
            .iter()
            .position(|l| l.name == name)
            .map(|i| self.per_leaf[i].as_slice())
    }
}
