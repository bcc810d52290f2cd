use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::sampler::ContextWindow;
use crate::store::{ColumnRef, RowRef};

/// The four relational attention patterns, in block order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionKind {
    Column,
    Feature,
    Neighbor,
    Full,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::Column,
        AttentionKind::Feature,
        AttentionKind::Neighbor,
        AttentionKind::Full,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            AttentionKind::Column => "col",
            AttentionKind::Feature => "feat",
            AttentionKind::Neighbor => "nbr",
            AttentionKind::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<AttentionKind> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.short_name() == s || format!("{k:?}").eq_ignore_ascii_case(s))
    }
}

/// Dense `n x n` visibility matrix with per-query lists of visible keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    bits: Vec<bool>,
    visible: Vec<Vec<u32>>,
}

impl Mask {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Mask {
        let mut bits = vec![false; n * n];
        for q in 0..n {
            for k in 0..n {
                bits[q * n + k] = f(q, k);
            }
        }
        Mask::from_bits(n, bits)
    }

    pub fn from_bits(n: usize, bits: Vec<bool>) -> Mask {
        assert_eq!(bits.len(), n * n, "mask must be n x n");
        let visible = (0..n)
            .map(|q| (0..n as u32).filter(|&k| bits[q * n + k as usize]).collect())
            .collect();
        Mask { n, bits, visible }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n + k]
    }

    /// Keys visible to query `q`, ascending.
    pub fn visible(&self, q: usize) -> &[u32] {
        &self.visible[q]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|q| (0..self.n).all(|k| self.get(q, k) == self.get(k, q)))
    }

    /// Rows of `1` / `.` characters, one line per query.
    pub fn to_text_grid(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for q in 0..self.n {
            for k in 0..self.n {
                s.push(if self.get(q, k) { '1' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    /// Binary PGM (P5) image: visible = 255, hidden = 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = write!(header, "P5\n{} {}\n255\n", self.n, self.n);
        let mut out = header.into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub column: Mask,
    pub feature: Mask,
    pub neighbor: Mask,
    pub full: Mask,
}

impl MaskSet {
    pub fn get(&self, kind: AttentionKind) -> &Mask {
        match kind {
            AttentionKind::Column => &self.column,
            AttentionKind::Feature => &self.feature,
            AttentionKind::Neighbor => &self.neighbor,
            AttentionKind::Full => &self.full,
        }
    }

    pub fn size(&self) -> usize {
        self.full.size()
    }
}

/// Builds the column, feature, neighbor and full masks from token metadata.
///
/// The construction groups tokens by column and by row instead of testing
/// every pair, so it does not share code with the pairwise predicates.
pub fn build_masks(window: &ContextWindow) -> MaskSet {
    let n = window.tokens.len();
    let mut by_column: HashMap<ColumnRef, Vec<usize>> = HashMap::new();
    let mut by_row: HashMap<RowRef, Vec<usize>> = HashMap::new();
    // Rows in the window that link to a given row.
    let mut referrers: HashMap<RowRef, Vec<RowRef>> = HashMap::new();
    for (i, t) in window.tokens.iter().enumerate() {
        by_column.entry(t.column).or_default().push(i);
        let slot = by_row.entry(t.row).or_default();
        if slot.is_empty() {
            for &parent in t.out_links.iter() {
                referrers.entry(parent).or_default().push(t.row);
            }
        }
        slot.push(i);
    }

    let mut column = vec![false; n * n];
    for members in by_column.values() {
        for &q in members {
            for &k in members {
                column[q * n + k] = true;
            }
        }
    }

    let mut feature = vec![false; n * n];
    let mut neighbor = vec![false; n * n];
    for (row, members) in &by_row {
        let first = &window.tokens[members[0]];
        let mut feature_keys: Vec<usize> = members.clone();
        for parent in first.out_links.iter() {
            if let Some(ks) = by_row.get(parent) {
                feature_keys.extend_from_slice(ks);
            }
        }
        let mut neighbor_keys: Vec<usize> = Vec::new();
        if let Some(children) = referrers.get(row) {
            for child in children {
                neighbor_keys.extend_from_slice(&by_row[child]);
            }
        }
        for &q in members {
            for &k in &feature_keys {
                feature[q * n + k] = true;
            }
            for &k in &neighbor_keys {
                neighbor[q * n + k] = true;
            }
        }
    }

    MaskSet {
        column: Mask::from_bits(n, column),
        feature: Mask::from_bits(n, feature),
        neighbor: Mask::from_bits(n, neighbor),
        full: Mask::from_bits(n, vec![true; n * n]),
    }
}

/// Applies a token permutation: `new[i] = old[perm[i]]`.
pub fn permute_mask(mask: &Mask, perm: &[usize]) -> Mask {
    Mask::from_fn(mask.size(), |q, k| mask.get(perm[q], perm[k]))
}

pub fn permute_masks(masks: &MaskSet, perm: &[usize]) -> MaskSet {
    MaskSet {
        column: permute_mask(&masks.column, perm),
        feature: permute_mask(&masks.feature, perm),
        neighbor: permute_mask(&masks.neighbor, perm),
        full: permute_mask(&masks.full, perm),
    }
}
