use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// Binary masks for slots `0..=M` on a `rows x cols` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartMaskSet {
    num_slots: usize,
    rows: usize,
    cols: usize,
    masks: Vec<u8>,
    present: Vec<bool>,
}

impl PartMaskSet {
    pub fn new(num_slots: usize, rows: usize, cols: usize, masks: Vec<u8>, present: Vec<bool>) -> Result<Self> {
        if masks.len() != num_slots * rows * cols || present.len() != num_slots {
            return Err(input_err!("mask buffer does not match {num_slots}x{rows}x{cols}"));
        }
        if masks.iter().any(|&v| v > 1) {
            return Err(input_err!("mask values must be 0 or 1"));
        }
        let hw = rows * cols;
        for s in 0..num_slots {
            if !present[s] && masks[s * hw..(s + 1) * hw].iter().any(|&v| v != 0) {
                return Err(input_err!("absent slot {s} has a non-empty mask"));
            }
        }
        Ok(PartMaskSet {
            num_slots,
            rows,
            cols,
            masks,
            present,
        })
    }

    /// Masks from a per-cell slot label map; a slot is present iff it owns a cell.
    pub fn from_labels(num_parts: usize, rows: usize, cols: usize, labels: &[usize]) -> Self {
        let hw = rows * cols;
        let num_slots = num_parts + 1;
        let mut masks = vec![0u8; num_slots * hw];
        let mut present = vec![false; num_slots];
        for (i, &s) in labels.iter().enumerate() {
            masks[s * hw + i] = 1;
            present[s] = true;
        }
        PartMaskSet {
            num_slots,
            rows,
            cols,
            masks,
            present,
        }
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn mask(&self, slot: usize) -> &[u8] {
        let hw = self.cells();
        &self.masks[slot * hw..(slot + 1) * hw]
    }

    pub fn present(&self, slot: usize) -> bool {
        self.present[slot]
    }

    pub fn present_slots(&self) -> Vec<usize> {
        (0..self.num_slots).filter(|&s| self.present[s]).collect()
    }

    /// Marks a slot absent and clears its mask.
    pub fn mark_absent(&mut self, slot: usize) {
        let hw = self.cells();
        self.present[slot] = false;
        self.masks[slot * hw..(slot + 1) * hw].fill(0);
    }

    /// A low-resolution cell is set when at least half of the native cells it
    /// covers belong to the slot.
    pub fn downsample(&self, rows: usize, cols: usize) -> Result<PartMaskSet> {
        if rows == 0 || cols == 0 || rows > self.rows || cols > self.cols {
            return Err(input_err!(
                "grid resolution {rows}x{cols} must be within 1..={}x{}",
                self.rows,
                self.cols
            ));
        }
        if (rows, cols) == (self.rows, self.cols) {
            return Ok(self.clone());
        }
        let mut masks = vec![0u8; self.num_slots * rows * cols];
        for s in 0..self.num_slots {
            let src = self.mask(s);
            for r in 0..rows {
                let (r0, r1) = (r * self.rows / rows, (r + 1) * self.rows / rows);
                for c in 0..cols {
                    let (c0, c1) = (c * self.cols / cols, (c + 1) * self.cols / cols);
                    let mut on = 0;
                    for rr in r0..r1 {
                        for cc in c0..c1 {
                            on += src[rr * self.cols + cc] as usize;
                        }
                    }
                    let covered = (r1 - r0) * (c1 - c0);
                    if 2 * on >= covered {
                        masks[s * rows * cols + r * cols + c] = 1;
                    }
                }
            }
        }
        Ok(PartMaskSet {
            num_slots: self.num_slots,
            rows,
            cols,
            masks,
            present: self.present.clone(),
        })
    }

    pub fn flip_horizontal(&self) -> PartMaskSet {
        let mut out = self.clone();
        let hw = self.cells();
        for s in 0..self.num_slots {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out.masks[s * hw + r * self.cols + c] =
                        self.masks[s * hw + r * self.cols + (self.cols - 1 - c)];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_uses_half_coverage() {
        // 4x4 labels, slot 1 owns the left two columns plus two cells.
        let mut labels = vec![0usize; 16];
        for r in 0..4 {
            labels[r * 4] = 1;
            labels[r * 4 + 1] = 1;
        }
        // Exactly half of the top-right block: both slots claim it.
        labels[2] = 1;
        labels[6] = 1;
        let m = PartMaskSet::from_labels(1, 4, 4, &labels);
        let d = m.downsample(2, 2).unwrap();
        assert_eq!(d.mask(1), &[1, 1, 1, 0]);
        assert_eq!(d.mask(0), &[0, 1, 0, 1]);
        assert!(m.downsample(5, 4).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let m = PartMaskSet::from_labels(2, 3, 4, &labels);
        assert_ne!(m.flip_horizontal(), m);
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
    }

    #[test]
    fn absent_slots_must_be_empty() {
        assert!(PartMaskSet::new(2, 1, 1, vec![0, 1], vec![true, false]).is_err());
        let mut m = PartMaskSet::new(2, 1, 1, vec![0, 1], vec![true, true]).unwrap();
        m.mark_absent(1);
        assert_eq!(m.present_slots(), vec![0]);
    }
}
