//! Modality signatures and the modality mask.
//!
//! A signature is the set of base modalities an item is built from. It is
//! declared metadata carried with each item; nothing here inspects content.
//! Two candidates are "the same modality" only when their signatures are
//! equal as sets: `{text, video}` and `{video}` differ.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base modalities. Declaration order is the canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Video,
}

/// The base-modality alphabet in canonical order.
pub const BASE_MODALITIES: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Video];

impl Modality {
    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Video => "video",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BASE_MODALITIES
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownModality(s.to_string()))
    }
}

/// Non-empty set of base modalities, stored as a bitmask so that ordering,
/// equality and hashing are canonical for free.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalitySignature(u8);

impl ModalitySignature {
    pub const TEXT: Self = Self(1);
    pub const IMAGE: Self = Self(2);
    pub const VIDEO: Self = Self(4);

    pub fn new(members: impl IntoIterator<Item = Modality>) -> Result<Self> {
        let bits = members.into_iter().fold(0u8, |acc, m| acc | m.bit());
        if bits == 0 {
            Err(Error::EmptySignature)
        } else {
            Ok(Self(bits))
        }
    }

    pub fn single(m: Modality) -> Self {
        Self(m.bit())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    /// Members in canonical order.
    pub fn members(self) -> impl Iterator<Item = Modality> {
        BASE_MODALITIES
            .into_iter()
            .filter(move |m| self.contains(*m))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_fused(self) -> bool {
        self.len() > 1
    }

    /// Bitmask with text = 1, image = 2, video = 4.
    pub fn bits(self) -> u8 {
        self.0
    }
}

/// Φ: the signature of an item is its declared modality set, canonicalised.
pub fn signature_of(declared: &[Modality]) -> Result<ModalitySignature> {
    ModalitySignature::new(declared.iter().copied())
}

impl fmt::Display for ModalitySignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for m in self.members() {
            if !first {
                f.write_str("+")?;
            }
            f.write_str(m.name())?;
            first = false;
        }
        Ok(())
    }
}

impl fmt::Debug for ModalitySignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig({self})")
    }
}

impl FromStr for ModalitySignature {
    type Err = Error;

    /// Accepts members joined by `+` in any order, e.g. `video+text`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::EmptySignature);
        }
        let members = s
            .split('+')
            .map(|part| part.trim().parse::<Modality>())
            .collect::<Result<Vec<_>>>()?;
        ModalitySignature::new(members)
    }
}

impl Serialize for ModalitySignature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModalitySignature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Binary N×(1+K) matrix marking which candidates share the positive's signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl MaskMatrix {
    /// Builds a mask from explicit entries, checking that each row keeps its
    /// positive column.
    pub fn from_rows(rows: Vec<Vec<bool>>, positive_columns: &[usize]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if positive_columns.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} mask rows but {} positive columns",
                n,
                positive_columns.len()
            )));
        }
        let cols = rows[0].len();
        let mut keep = Vec::with_capacity(n * cols);
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "mask row {r} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            let p = positive_columns[r];
            if p >= cols || !row[p] {
                return Err(Error::MaskDropsPositive { row: r, column: p });
            }
            keep.extend(row);
        }
        Ok(Self {
            rows: n,
            cols,
            keep,
        })
    }

    pub fn all_ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.keep[row * self.cols..(row + 1) * self.cols]
    }

    pub fn count_masked(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

/// `M[n][k] = 1` iff candidate (n, k) has exactly the signature of row n's positive.
pub fn build_mask(
    positive_signatures: &[ModalitySignature],
    candidate_signatures: &[Vec<ModalitySignature>],
    positive_columns: &[usize],
) -> Result<MaskMatrix> {
    if positive_signatures.len() != candidate_signatures.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} positive signatures for {} candidate rows",
            positive_signatures.len(),
            candidate_signatures.len()
        )));
    }
    let rows = positive_signatures
        .iter()
        .zip(candidate_signatures)
        .map(|(pos, row)| row.iter().map(|c| c == pos).collect())
        .collect();
    MaskMatrix::from_rows(rows, positive_columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T: ModalitySignature = ModalitySignature::TEXT;
    const V: ModalitySignature = ModalitySignature::VIDEO;
    const I: ModalitySignature = ModalitySignature::IMAGE;

    fn tv() -> ModalitySignature {
        "text+video".parse().unwrap()
    }

    #[test]
    fn signature_of_canonicalises() {
        assert_eq!(signature_of(&[Modality::Video]).unwrap(), V);
        let a = signature_of(&[Modality::Video, Modality::Text]).unwrap();
        let b = signature_of(&[Modality::Text, Modality::Video, Modality::Text]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "text+video");
        assert!(matches!(signature_of(&[]), Err(Error::EmptySignature)));
    }

    #[test]
    fn serialization_uses_canonical_order() {
        let s: ModalitySignature = "video+image+text".parse().unwrap();
        assert_eq!(s.to_string(), "text+image+video");
        assert_eq!(serde_json::to_string(&s).unwrap(), "\"text+image+video\"");
        let back: ModalitySignature = serde_json::from_str("\"image + text\"").unwrap();
        assert_eq!(back.to_string(), "text+image");
        assert!("audio".parse::<ModalitySignature>().is_err());
        assert!("".parse::<ModalitySignature>().is_err());
    }

    #[test]
    fn set_equality_not_overlap() {
        assert_ne!(tv(), V);
        assert!(tv().contains(Modality::Video));
        assert!(tv().is_fused());
    }

    #[test]
    fn mask_row_examples() {
        let m = build_mask(&[V], &[vec![V, T, tv()]], &[0]).unwrap();
        assert_eq!(m.row(0), &[true, false, false]);

        let m = build_mask(&[I], &[vec![I, I, I]], &[0]).unwrap();
        assert_eq!(m.row(0), &[true, true, true]);
    }

    #[test]
    fn mask_mixed_grid_matches_per_entry_check() {
        // oracle: entry-by-entry set comparison written out by hand
        let pos = [tv(), I];
        let grid = vec![vec![tv(), V, tv()], vec![I, tv(), T]];
        let m = build_mask(&pos, &grid, &[0, 0]).unwrap();
        assert_eq!(m.row(0), &[true, false, true]);
        assert_eq!(m.row(1), &[true, false, false]);
        assert_eq!(m.count_masked(), 3);
    }

    #[test]
    fn mask_errors() {
        assert!(matches!(
            build_mask(&[T, T], &[vec![T]], &[0, 0]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            build_mask(&[T, T], &[vec![T, I], vec![T]], &[0, 0]),
            Err(Error::ShapeMismatch(_))
        ));
        // positive column pointing at a differently-typed cell
        assert!(matches!(
            build_mask(&[T], &[vec![I, T]], &[0]),
            Err(Error::MaskDropsPositive { row: 0, column: 0 })
        ));
    }

    fn any_sig() -> impl Strategy<Value = ModalitySignature> {
        (1u8..8).prop_map(ModalitySignature)
    }

    proptest! {
        #[test]
        fn mask_is_permutation_equivariant(
            pos in any_sig(),
            others in prop::collection::vec(any_sig(), 0..6),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut row = vec![pos];
            row.extend(others);
            let base = build_mask(&[pos], &[row.clone()], &[0]).unwrap();
            let mut perm: Vec<usize> = (0..row.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<_> = perm.iter().map(|&i| row[i]).collect();
            let p = perm.iter().position(|&i| i == 0).unwrap();
            let m = build_mask(&[pos], &[permuted], &[p]).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(m.get(0, j), base.get(0, i));
            }
        }

        #[test]
        fn signature_roundtrips_through_text(s in any_sig()) {
            let back: ModalitySignature = s.to_string().parse().unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
