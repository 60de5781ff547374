use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::codes::PartComposition;
use super::features::{ExtractorDescriptor, FeatureExtractor, FeatureGrid};
use super::kmeans::{kmeans, nearest, KMeansConfig};
use super::masks::PartMaskSet;
use crate::error::{input_err, Error, Result};

/// Three-tier part clustering: foreground/background split, M part clusters
/// over foreground patches, and K variants inside each part cluster and inside
/// the background (group 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartHierarchy {
    pub num_parts: usize,
    pub num_variants: usize,
    pub seed: u64,
    pub extractor: ExtractorDescriptor,
    pub dim: usize,
    pub fg_bg_centroids: Vec<Vec<f32>>,
    /// Which of the two top-level centroids is the background.
    pub background_cluster: usize,
    pub part_centroids: Vec<Vec<f32>>,
    /// `M+1` groups of `K` centroids; group 0 holds background styles.
    pub sub_centroids: Vec<Vec<Vec<f32>>>,
}

/// Per-patch tags at native patch resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchTags {
    pub rows: usize,
    pub cols: usize,
    /// Slot per patch (0 = background).
    pub slots: Vec<usize>,
    /// 1-based variant per patch.
    pub variants: Vec<usize>,
}

pub fn fit_hierarchy(
    features: &[FeatureGrid],
    num_parts: usize,
    num_variants: usize,
    seed: u64,
    extractor: ExtractorDescriptor,
) -> Result<PartHierarchy> {
    if features.is_empty() {
        return Err(input_err!("cannot fit a part hierarchy on an empty corpus"));
    }
    if num_parts == 0 || num_variants == 0 {
        return Err(Error::Config(format!(
            "need at least one part and one variant (got M={num_parts}, K={num_variants})"
        )));
    }
    let dim = features[0].dim();
    if let Some(g) = features.iter().find(|g| g.dim() != dim) {
        return Err(input_err!(
            "feature grid {} has dim {}, expected {dim}",
            g.source_image_id,
            g.dim()
        ));
    }
    let total: usize = features.iter().map(FeatureGrid::len).sum();
    let needed = num_parts.max(num_variants).max(2);
    if total < needed {
        return Err(input_err!("{total} patches is fewer than the {needed} needed"));
    }

    let mut all = Vec::with_capacity(total * dim);
    let mut border = Vec::with_capacity(total);
    for g in features {
        all.extend_from_slice(g.as_slice());
        border.extend((0..g.len()).map(|i| g.is_border(i)));
    }

    // Level 1: foreground / background.
    let top = kmeans(&all, dim, &KMeansConfig::new(2, seed))?;
    let mut border_votes = [0usize; 2];
    for (a, b) in top.assignments.iter().zip(&border) {
        if *b {
            border_votes[*a] += 1;
        }
    }
    let background_cluster = if border_votes[1] > border_votes[0] { 1 } else { 0 };
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (i, &a) in top.assignments.iter().enumerate() {
        let p = &all[i * dim..(i + 1) * dim];
        if a == background_cluster {
            bg.extend_from_slice(p);
        } else {
            fg.extend_from_slice(p);
        }
    }
    if fg.len() / dim < num_parts {
        return Err(Error::Config(format!(
            "only {} foreground patches for {num_parts} parts",
            fg.len() / dim
        )));
    }

    // Level 2: parts over foreground patches.
    let mid = kmeans(&fg, dim, &KMeansConfig::new(num_parts, seed.wrapping_add(1)))?;
    let mut groups: Vec<Vec<f32>> = vec![bg];
    groups.extend((0..num_parts).map(|_| Vec::new()));
    for (i, &a) in mid.assignments.iter().enumerate() {
        groups[a + 1].extend_from_slice(&fg[i * dim..(i + 1) * dim]);
    }

    // Level 3: variants inside every part cluster and the background.
    let mut sub_centroids = Vec::with_capacity(num_parts + 1);
    for (g, pts) in groups.iter().enumerate() {
        let count = pts.len() / dim;
        if count < num_variants {
            let name = if g == 0 {
                "background cluster".to_string()
            } else {
                format!("part cluster {g}")
            };
            return Err(Error::Config(format!(
                "{name} has {count} patches, fewer than K={num_variants}"
            )));
        }
        let fit = kmeans(pts, dim, &KMeansConfig::new(num_variants, seed.wrapping_add(2 + g as u64)))?;
        sub_centroids.push((0..num_variants).map(|v| fit.centroid(v).to_vec()).collect());
    }

    let h = PartHierarchy {
        num_parts,
        num_variants,
        seed,
        extractor,
        dim,
        fg_bg_centroids: (0..2).map(|i| top.centroid(i).to_vec()).collect(),
        background_cluster,
        part_centroids: (0..num_parts).map(|i| mid.centroid(i).to_vec()).collect(),
        sub_centroids,
    };
    h.validate()?;
    Ok(h)
}

impl PartHierarchy {
    /// Checks the structural invariants; an empty or truncated hierarchy is
    /// reported as not fitted.
    pub fn validate(&self) -> Result<()> {
        if self.fg_bg_centroids.is_empty() && self.part_centroids.is_empty() {
            return Err(Error::State("part hierarchy has not been fitted".into()));
        }
        let bad = |what: String| Err(Error::State(format!("malformed part hierarchy: {what}")));
        if self.fg_bg_centroids.len() != 2 || self.background_cluster > 1 {
            return bad("expected 2 top-level centroids".into());
        }
        if self.part_centroids.len() != self.num_parts {
            return bad(format!("expected {} part centroids", self.num_parts));
        }
        if self.sub_centroids.len() != self.num_parts + 1
            || self.sub_centroids.iter().any(|g| g.len() != self.num_variants)
        {
            return bad(format!(
                "expected {} groups of {} sub-centroids",
                self.num_parts + 1,
                self.num_variants
            ));
        }
        let all = self
            .fg_bg_centroids
            .iter()
            .chain(&self.part_centroids)
            .chain(self.sub_centroids.iter().flatten());
        for c in all {
            if c.len() != self.dim {
                return bad("centroid dimension mismatch".into());
            }
            if c.iter().any(|v| !v.is_finite()) {
                return bad("non-finite centroid".into());
            }
        }
        Ok(())
    }

    /// Sub-centroid of a present code.
    pub fn centroid(&self, slot: usize, variant: usize) -> Result<&[f32]> {
        self.sub_centroids
            .get(slot)
            .and_then(|g| variant.checked_sub(1).and_then(|v| g.get(v)))
            .map(Vec::as_slice)
            .ok_or_else(|| input_err!("no centroid for code {slot}:{variant}"))
    }

    pub fn tag_patches(&self, grid: &FeatureGrid) -> Result<PatchTags> {
        self.validate()?;
        if grid.dim() != self.dim {
            return Err(input_err!(
                "feature dim {} does not match hierarchy dim {}",
                grid.dim(),
                self.dim
            ));
        }
        let top: Vec<f32> = self.fg_bg_centroids.concat();
        let parts: Vec<f32> = self.part_centroids.concat();
        let subs: Vec<Vec<f32>> = self.sub_centroids.iter().map(|g| g.concat()).collect();
        let mut slots = Vec::with_capacity(grid.len());
        let mut variants = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let p = grid.patch(i);
            let slot = if nearest(p, &top, self.dim).0 == self.background_cluster {
                0
            } else {
                nearest(p, &parts, self.dim).0 + 1
            };
            slots.push(slot);
            variants.push(nearest(p, &subs[slot], self.dim).0 + 1);
        }
        Ok(PatchTags {
            rows: grid.rows(),
            cols: grid.cols(),
            slots,
            variants,
        })
    }
}

impl PatchTags {
    /// Majority variant per slot (ties to the lowest variant); slots without
    /// patches are absent.
    pub fn composition(&self, num_parts: usize, num_variants: usize) -> PartComposition {
        let mut votes = vec![vec![0usize; num_variants + 1]; num_parts + 1];
        for (&s, &v) in self.slots.iter().zip(&self.variants) {
            votes[s][v] += 1;
        }
        let variants: Vec<Option<usize>> = votes
            .iter()
            .map(|counts| {
                let mut best: Option<(usize, usize)> = None;
                for (v, &c) in counts.iter().enumerate().skip(1) {
                    if c > 0 && best.map_or(true, |(_, bc)| c > bc) {
                        best = Some((v, c));
                    }
                }
                best.map(|(v, _)| v)
            })
            .collect();
        PartComposition::from_variants(&variants).expect("slots are contiguous by construction")
    }

    pub fn masks(&self, num_parts: usize) -> PartMaskSet {
        PartMaskSet::from_labels(num_parts, self.rows, self.cols, &self.slots)
    }

    /// Slot labels encoded one base-36 digit per patch, row-major.
    pub fn encode_labels(&self) -> String {
        self.slots
            .iter()
            .map(|&s| std::char::from_digit(s as u32, 36).expect("slot < 36"))
            .collect()
    }
}

/// Tags an already-extracted feature grid and downsamples the masks.
pub fn tag_features(
    grid: &FeatureGrid,
    hierarchy: &PartHierarchy,
    grid_resolution: (usize, usize),
) -> Result<(PartComposition, PartMaskSet, PatchTags)> {
    let tags = hierarchy.tag_patches(grid)?;
    let composition = tags.composition(hierarchy.num_parts, hierarchy.num_variants);
    let masks = tags.masks(hierarchy.num_parts).downsample(grid_resolution.0, grid_resolution.1)?;
    Ok((composition, masks, tags))
}

pub fn tag_image(
    image: &RgbImage,
    extractor: &dyn FeatureExtractor,
    hierarchy: &PartHierarchy,
    grid_resolution: (usize, usize),
) -> Result<(PartComposition, PartMaskSet)> {
    hierarchy.validate()?;
    if extractor.descriptor() != hierarchy.extractor {
        return Err(Error::Config(format!(
            "extractor {:?} differs from the one the hierarchy was fitted with ({:?})",
            extractor.descriptor(),
            hierarchy.extractor
        )));
    }
    let grid = extractor.extract(image, "")?;
    let (c, m, _) = tag_features(&grid, hierarchy, grid_resolution)?;
    Ok((c, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::part_discovery::codes::PartCode;

    fn descriptor() -> ExtractorDescriptor {
        ExtractorDescriptor {
            name: "test".into(),
            input_resolution: 4,
            patch_size: 1,
        }
    }

    /// 4x4 grid: border = background (value 0), centre 2x2 = foreground.
    fn grid(id: &str, fg_val: f32) -> FeatureGrid {
        let mut data = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                let inner = (1..3).contains(&r) && (1..3).contains(&c);
                data.push(if inner { fg_val + c as f32 * 0.01 } else { 0.0 + r as f32 * 0.001 });
            }
        }
        FeatureGrid::new(id, 1, 4, 4, 1, data).unwrap()
    }

    #[test]
    fn degenerate_one_part_one_variant() {
        let grids = vec![grid("a", 5.0), grid("b", 6.0)];
        let h = fit_hierarchy(&grids, 1, 1, 3, descriptor()).unwrap();
        let tags = h.tag_patches(&grids[0]).unwrap();
        for (i, (&s, &v)) in tags.slots.iter().zip(&tags.variants).enumerate() {
            if grids[0].is_border(i) {
                assert_eq!((s, v), (0, 1));
            } else {
                assert_eq!((s, v), (1, 1));
            }
        }
        let comp = tags.composition(1, 1);
        assert_eq!(comp.codes(), &[PartCode::new(0, 1), PartCode::new(1, 1)]);
    }

    #[test]
    fn empty_corpus_is_an_input_error() {
        assert!(matches!(fit_hierarchy(&[], 2, 2, 0, descriptor()), Err(Error::Input(_))));
    }

    #[test]
    fn small_part_cluster_names_the_cluster() {
        let grids = vec![grid("a", 5.0)];
        match fit_hierarchy(&grids, 1, 5, 0, descriptor()) {
            Err(Error::Config(msg)) => assert!(msg.contains("part cluster 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn majority_vote_breaks_ties_low() {
        let tags = PatchTags {
            rows: 1,
            cols: 6,
            slots: vec![0, 1, 1, 1, 1, 0],
            variants: vec![2, 3, 1, 3, 1, 2],
        };
        let c = tags.composition(2, 3);
        assert_eq!(c.to_string(), "0:2,1:1,2:-");
        let masks = tags.masks(2);
        assert!(!masks.present(2));
        assert_eq!(masks.mask(1), &[0, 1, 1, 1, 1, 0]);
    }

    #[test]
    fn unfitted_hierarchy_is_a_state_error() {
        let h = PartHierarchy {
            num_parts: 2,
            num_variants: 2,
            seed: 0,
            extractor: descriptor(),
            dim: 1,
            fg_bg_centroids: vec![],
            background_cluster: 0,
            part_centroids: vec![],
            sub_centroids: vec![],
        };
        assert!(matches!(h.tag_patches(&grid("a", 1.0)), Err(Error::State(_))));
    }
}
