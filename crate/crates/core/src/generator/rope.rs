use serde::{Deserialize, Serialize};

use crate::tensor::RotaryTable;

/// Feature widths given to the layer, token and rank rotary phases. The bands
/// are laid out in that order from feature 0; features past them are left
/// unrotated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopeBands {
    pub layer: usize,
    pub token: usize,
    pub rank: usize,
}

/// Equal thirds of the head width, each rounded down to even.
pub fn default_bands(head_width: usize) -> RopeBands {
    let third = (head_width / 3) & !1;
    RopeBands {
        layer: third,
        token: third,
        rank: third,
    }
}

/// Rotation table for `rows × heads` query/key rows of width `head_width`.
/// `position(row)` returns the (layer, token, rank) index of a row.
pub(crate) fn table(
    rows: usize,
    heads: usize,
    head_width: usize,
    bands: RopeBands,
    base: f64,
    position: impl Fn(usize) -> (usize, usize, usize),
) -> RotaryTable {
    let pairs = head_width / 2;
    let mut angles = vec![0.0; rows * heads * pairs];
    for row in 0..rows {
        let (li, ti, ri) = position(row);
        let mut row_angles = vec![0.0; pairs];
        let mut offset = 0;
        for (width, pos) in [(bands.layer, li), (bands.token, ti), (bands.rank, ri)] {
            for q in 0..width / 2 {
                let freq = base.powf(-2.0 * q as f64 / width as f64);
                row_angles[offset + q] = pos as f64 * freq;
            }
            offset += width / 2;
        }
        for h in 0..heads {
            let start = (row * heads + h) * pairs;
            angles[start..start + pairs].copy_from_slice(&row_angles);
        }
    }
    RotaryTable::from_angles(rows * heads, pairs, &angles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_thirds_are_even() {
        assert_eq!(default_bands(8), RopeBands { layer: 2, token: 2, rank: 2 });
        assert_eq!(default_bands(16), RopeBands { layer: 4, token: 4, rank: 4 });
        assert_eq!(default_bands(4), RopeBands { layer: 0, token: 0, rank: 0 });
    }
}
