//! Blocked, permuted storage layouts for constant tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical dimensions from outermost to innermost. Each entry is a block of
/// one logical dimension; the blocks of a logical dimension appear in
/// outer-to-inner order and their extents multiply to that dimension's size.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PackedLayout {
    pub parts: Vec<(usize, u64)>,
}

impl PackedLayout {
    pub fn identity(shape: &[u64]) -> Self {
        PackedLayout {
            parts: shape.iter().copied().enumerate().collect(),
        }
    }

    pub fn is_identity(&self, shape: &[u64]) -> bool {
        let dims: Vec<(usize, u64)> = self.parts.iter().copied().filter(|(_, e)| *e > 1).collect();
        let ident: Vec<(usize, u64)> = shape.iter().copied().enumerate().filter(|(_, e)| *e > 1).collect();
        dims == ident
    }

    pub fn check(&self, shape: &[u64]) -> Result<()> {
        for (d, extent) in shape.iter().enumerate() {
            let prod: u64 = self.parts.iter().filter(|(pd, _)| *pd == d).map(|(_, e)| *e).product();
            if prod != *extent {
                return Err(Error::IllegalStep(format!(
                    "packing blocks of dim {d} multiply to {prod}, expected {extent}"
                )));
            }
        }
        if let Some((d, _)) = self.parts.iter().find(|(d, _)| *d >= shape.len()) {
            return Err(Error::IllegalStep(format!(
                "packing names dim {d} of a rank-{} buffer",
                shape.len()
            )));
        }
        if self.parts.iter().any(|(_, e)| *e == 0) {
            return Err(Error::IllegalStep("packing block of extent 0".into()));
        }
        Ok(())
    }

    /// Linear physical offset of a logical index.
    pub fn offset(&self, index: &[i64]) -> i64 {
        let mut rem: Vec<i64> = index.to_vec();
        // Inner block extent products per part, to peel digits outer-first.
        let mut digits = vec![0i64; self.parts.len()];
        for (p, (d, e)) in self.parts.iter().enumerate() {
            let inner: i64 = self.parts[p + 1..]
                .iter()
                .filter(|(pd, _)| pd == d)
                .map(|(_, e)| *e as i64)
                .product();
            digits[p] = rem[*d] / inner;
            rem[*d] %= inner;
            debug_assert!(digits[p] < *e as i64 || *e == 0);
        }
        let mut off = 0i64;
        for (p, (_, e)) in self.parts.iter().enumerate() {
            off = off * (*e as i64) + digits[p];
        }
        off
    }

    /// Repacks a row-major tensor of the given shape into this layout.
    pub fn pack(&self, shape: &[u64], data: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; data.len()];
        let mut idx = vec![0i64; shape.len()];
        for v in data {
            out[self.offset(&idx) as usize] = *v;
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] as i64 {
                    break;
                }
                idx[d] = 0;
            }
        }
        out
    }
}

/// Row-major offset.
pub fn row_major_offset(shape: &[u64], index: &[i64]) -> i64 {
    let mut off = 0i64;
    for (d, e) in shape.iter().enumerate() {
        off = off * (*e as i64) + index[d];
    }
    off
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matches_row_major() {
        let shape = [3, 4, 5];
        let l = PackedLayout::identity(&shape);
        for a in 0..3 {
            for b in 0..4 {
                for c in 0..5 {
                    assert_eq!(l.offset(&[a, b, c]), row_major_offset(&shape, &[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn blocked_offsets_form_a_permutation() {
        let shape = [8, 8];
        let l = PackedLayout {
            parts: vec![(1, 2), (0, 4), (1, 4), (0, 2)],
        };
        l.check(&shape).unwrap();
        let mut seen = [false; 64];
        for i in 0..8 {
            for j in 0..8 {
                let o = l.offset(&[i, j]) as usize;
                assert!(!seen[o]);
                seen[o] = true;
            }
        }
        // Brute force: j = j0*4 + j1, i = i0*2 + i1, order (j0, i0, j1, i1).
        assert_eq!(l.offset(&[3, 5]), ((4 + 1) * 4 + 1) * 2 + 1);
    }

    #[test]
    fn bad_products_rejected() {
        let l = PackedLayout {
            parts: vec![(0, 3), (1, 4)],
        };
        assert!(l.check(&[4, 4]).is_err());
    }
}
