//! Pathway prototypes from a gene-expression profile.
//!
//! Each pathway is a binary mask over a fixed gene ordering. The expression
//! values of a pathway's member genes form a dense slice whose length
//! depends only on the pathway; a pathway-specific self-normalizing network
//! maps each slice to a `d_e`-dimensional token.

use std::collections::{HashMap, HashSet};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{snn_forward, BinaryMask, Matrix};
use crate::params::Snn;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneOrder {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl GeneOrder {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate gene symbol {s}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn position(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update(s.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// A named set of gene symbols, in file order without duplicates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneSet {
    pub name: String,
    pub genes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathwayMaskSet {
    pub names: Vec<String>,
    pub masks: Vec<BinaryMask>,
    pub member_indices: Vec<Vec<usize>>,
}

impl PathwayMaskSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Slice width of every pathway.
    pub fn widths(&self) -> Vec<usize> {
        self.member_indices.iter().map(Vec::len).collect()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, members) in self.names.iter().zip(&self.member_indices) {
            h.update(name.as_bytes());
            h.update(b"\t");
            for m in members {
                h.update(m.to_le_bytes());
            }
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionProfile {
    pub patient_id: String,
    pub values: Vec<f64>,
}

/// Masks for every gene set over `order`. Genes missing from the order are
/// dropped with a warning; a set left empty is an error.
pub fn build_masks(gene_sets: &[GeneSet], order: &GeneOrder) -> Result<PathwayMaskSet> {
    let mut out = PathwayMaskSet {
        names: Vec::with_capacity(gene_sets.len()),
        masks: Vec::with_capacity(gene_sets.len()),
        member_indices: Vec::with_capacity(gene_sets.len()),
    };
    for set in gene_sets {
        let mut members: Vec<usize> = Vec::with_capacity(set.genes.len());
        let mut missing = 0;
        for g in &set.genes {
            match order.position(g) {
                Some(i) => members.push(i),
                None => missing += 1,
            }
        }
        if missing > 0 {
            log::warn!("{}: {missing} gene(s) not in the gene order", set.name);
        }
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(Error::EmptyPathway(set.name.clone()));
        }
        let member_set: HashSet<usize> = members.iter().copied().collect();
        let mask: Vec<bool> = (0..order.len()).map(|j| member_set.contains(&j)).collect();
        out.names.push(set.name.clone());
        out.masks.push(mask.into());
        out.member_indices.push(members);
    }
    Ok(out)
}

/// Member-gene values of every pathway. Selection is positional: a member
/// gene whose measured value is exactly zero stays in the slice.
pub fn pathway_slices(x: &ExpressionProfile, masks: &PathwayMaskSet) -> Result<Vec<Vec<f64>>> {
    let n_genes = masks.masks.first().map_or(0, BinaryMask::len);
    if x.values.len() != n_genes {
        return Err(Error::shape("pathway_slices", n_genes, x.values.len()));
    }
    Ok(masks
        .member_indices
        .iter()
        .map(|m| m.iter().map(|&j| x.values[j]).collect())
        .collect())
}

/// One token per pathway: row `i` is `snns[i]` applied to slice `i`.
pub fn embed_pathways(slices: &[Vec<f64>], snns: &[Snn]) -> Result<Matrix> {
    if slices.len() != snns.len() {
        return Err(Error::shape("embed_pathways", snns.len(), slices.len()));
    }
    let rows = slices
        .iter()
        .zip(snns)
        .map(|(s, net)| snn_forward(s, net))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Batched self-normalizing network on the tape: every row of `x` is one
/// input.
pub fn snn_on_tape(tape: &mut Tape, x: Var, snn: &Snn<Var>) -> Var {
    snn.layers.iter().fold(x, |h, layer| {
        let z = tape.affine(h, layer.weight, layer.bias);
        tape.selu(z)
    })
}
