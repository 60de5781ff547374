use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

/// One discovered part cluster: a slot (0 = background style, 1..=M object parts)
/// and a 1-based variant within that slot. `variant == None` marks the slot as
/// absent (occluded or never observed) in a particular image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartCode {
    pub slot: usize,
    pub variant: Option<usize>,
}

impl PartCode {
    pub fn new(slot: usize, variant: usize) -> Self {
        PartCode {
            slot,
            variant: Some(variant),
        }
    }

    pub fn absent(slot: usize) -> Self {
        PartCode {
            slot,
            variant: None,
        }
    }

    pub fn is_present(&self) -> bool {
        self.variant.is_some()
    }

    pub fn validate(&self, num_parts: usize, num_variants: usize) -> Result<()> {
        if self.slot > num_parts {
            return Err(input_err!(
                "slot {} out of range 0..={num_parts}",
                self.slot
            ));
        }
        match self.variant {
            Some(v) if v == 0 || v > num_variants => Err(input_err!(
                "variant {v} of slot {} out of range 1..={num_variants}",
                self.slot
            )),
            _ => Ok(()),
        }
    }

    /// Row of this code in a `(M+1)·K` token table. Absent codes have no row.
    pub fn row(&self, num_variants: usize) -> Option<usize> {
        self.variant
            .map(|v| self.slot * num_variants + (v - 1))
    }

    /// Inverse of [`PartCode::row`].
    pub fn from_row(row: usize, num_variants: usize) -> Self {
        PartCode::new(row / num_variants, row % num_variants + 1)
    }
}

impl fmt::Display for PartCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            Some(v) => write!(f, "{}:{}", self.slot, v),
            None => write!(f, "{}:-", self.slot),
        }
    }
}

/// One code per slot `0..=M`, in slot order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<PartCode>", into = "Vec<PartCode>")]
pub struct PartComposition {
    codes: Vec<PartCode>,
}

impl PartComposition {
    pub fn new(codes: Vec<PartCode>) -> Result<Self> {
        if codes.is_empty() {
            return Err(input_err!("a composition needs at least the background slot"));
        }
        for (i, c) in codes.iter().enumerate() {
            if c.slot != i {
                return Err(input_err!(
                    "composition slots must be 0..=M in order; position {i} holds slot {}",
                    c.slot
                ));
            }
            if c.variant == Some(0) {
                return Err(input_err!("variant ids are 1-based (slot {i})"));
            }
        }
        Ok(PartComposition { codes })
    }

    /// Builds a composition from per-slot variants (`None` = absent).
    pub fn from_variants(variants: &[Option<usize>]) -> Result<Self> {
        Self::new(
            variants
                .iter()
                .enumerate()
                .map(|(slot, &variant)| PartCode { slot, variant })
                .collect(),
        )
    }

    /// Number of object parts M (slots minus the background).
    pub fn num_parts(&self) -> usize {
        self.codes.len() - 1
    }

    pub fn num_slots(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[PartCode] {
        &self.codes
    }

    pub fn get(&self, slot: usize) -> Option<&PartCode> {
        self.codes.get(slot)
    }

    pub fn present(&self) -> impl Iterator<Item = &PartCode> {
        self.codes.iter().filter(|c| c.is_present())
    }

    pub fn variants(&self) -> Vec<Option<usize>> {
        self.codes.iter().map(|c| c.variant).collect()
    }

    pub fn validate(&self, num_parts: usize, num_variants: usize) -> Result<()> {
        if self.num_parts() != num_parts {
            return Err(input_err!(
                "composition has {} slots, expected {}",
                self.codes.len(),
                num_parts + 1
            ));
        }
        self.codes
            .iter()
            .try_for_each(|c| c.validate(num_parts, num_variants))
    }

    pub(crate) fn set(&mut self, slot: usize, variant: Option<usize>) {
        self.codes[slot].variant = variant;
    }
}

impl TryFrom<Vec<PartCode>> for PartComposition {
    type Error = Error;

    fn try_from(codes: Vec<PartCode>) -> Result<Self> {
        PartComposition::new(codes)
    }
}

impl From<PartComposition> for Vec<PartCode> {
    fn from(c: PartComposition) -> Self {
        c.codes
    }
}

impl fmt::Display for PartComposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.codes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Parses `"0:12,1:87,2:-"`. Slots may be listed in any order but each exactly
/// once, covering `0..=max_slot`; `-` marks an absent slot.
impl FromStr for PartComposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for item in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (slot, variant) = item
                .split_once(':')
                .ok_or_else(|| input_err!("expected slot:variant, got {item:?}"))?;
            let slot: usize = slot
                .trim()
                .parse()
                .map_err(|_| input_err!("bad slot in {item:?}"))?;
            let variant = match variant.trim() {
                "-" | "x" => None,
                v => Some(
                    v.parse::<usize>()
                        .map_err(|_| input_err!("bad variant in {item:?}"))?,
                ),
            };
            pairs.push(PartCode { slot, variant });
        }
        pairs.sort_by_key(|c| c.slot);
        for w in pairs.windows(2) {
            if w[0].slot == w[1].slot {
                return Err(input_err!("slot {} listed twice", w[0].slot));
            }
        }
        PartComposition::new(pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_is_a_bijection() {
        let (m, k) = (3, 5);
        let mut seen = vec![false; (m + 1) * k];
        for slot in 0..=m {
            for v in 1..=k {
                let code = PartCode::new(slot, v);
                let row = code.row(k).unwrap();
                assert!(!seen[row]);
                seen[row] = true;
                assert_eq!(PartCode::from_row(row, k), code);
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(PartCode::absent(2).row(k), None);
    }

    #[test]
    fn parse_and_display() {
        let c: PartComposition = "1:4,0:2,2:-,3:1".parse().unwrap();
        assert_eq!(c.to_string(), "0:2,1:4,2:-,3:1");
        assert_eq!(c.num_parts(), 3);
        assert_eq!(c.present().count(), 3);
        assert!("0:1,0:2".parse::<PartComposition>().is_err());
        assert!("0:1,2:2".parse::<PartComposition>().is_err());
        assert!("0:0".parse::<PartComposition>().is_err());
    }

    #[test]
    fn validate_bounds() {
        let c: PartComposition = "0:1,1:9".parse().unwrap();
        assert!(c.validate(1, 8).is_err());
        assert!(c.validate(1, 9).is_ok());
        assert!(c.validate(2, 9).is_err());
    }

    #[test]
    fn serde_rejects_misordered() {
        let json = r#"[{"slot":1,"variant":2},{"slot":0,"variant":1}]"#;
        assert!(serde_json::from_str::<PartComposition>(json).is_err());
        let ok: PartComposition =
            serde_json::from_str(r#"[{"slot":0,"variant":1},{"slot":1,"variant":null}]"#).unwrap();
        assert_eq!(ok.to_string(), "0:1,1:-");
    }
}
