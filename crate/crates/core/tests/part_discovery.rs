mod common;

use partsmith::part_discovery::{
    cosine, discover, fit_hierarchy, tag_image, FeatureExtractor, PartCode, PatchStatsExtractor,
};
use partsmith::sprites::{generate_corpus, two_color_sprite, SpriteConfig, SPRITE_PARTS, SPRITE_VARIANTS};

fn corpus(n: usize, seed: u64) -> (Vec<partsmith::sprites::Sprite>, Vec<(String, image::RgbImage)>) {
    let sprites = generate_corpus(&SpriteConfig::default(), n, seed);
    let images = sprites.iter().map(|s| (s.id.clone(), s.image.clone())).collect();
    (sprites, images)
}

#[test]
fn foreground_patches_are_mutually_closer() {
    let cfg = SpriteConfig::default();
    let (img, fg) = two_color_sprite(&cfg, [200, 40, 40], [40, 90, 200]);
    let grid = PatchStatsExtractor::new(64, 4).unwrap().extract(&img, "two").unwrap();
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for i in 0..grid.len() {
        for j in (i + 1)..grid.len() {
            if fg[i] && fg[j] {
                within.push(cosine(grid.patch(i), grid.patch(j)));
            } else if fg[i] != fg[j] {
                across.push(cosine(grid.patch(i), grid.patch(j)));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let max_across = across.iter().cloned().fold(f64::MIN, f64::max);
    let min_within = within.iter().cloned().fold(f64::MAX, f64::min);
    assert!(mean(&within) > 0.99, "within {}", mean(&within));
    assert!(mean(&across) < 0.2, "across {}", mean(&across));
    assert!(min_within > max_across);
}

#[test]
fn sprite_parts_are_recovered() {
    let (sprites, images) = corpus(60, 5);
    let ex = PatchStatsExtractor::new(64, 4).unwrap();
    let dict = discover(&images, &ex, SPRITE_PARTS, SPRITE_VARIANTS, 0).unwrap();
    let purity = common::part_purity(&dict, &sprites);
    let ious = common::best_match_iou(&dict, &sprites);
    assert!(purity >= 0.9, "purity {purity}");
    assert!(ious.iter().all(|&v| v >= 0.8), "iou {ious:?}");
}

#[test]
fn refit_is_deterministic_and_tags_are_stable() {
    let (_, images) = corpus(20, 8);
    let ex = PatchStatsExtractor::new(64, 4).unwrap();
    let grids: Vec<_> = images.iter().map(|(id, img)| ex.extract(img, id).unwrap()).collect();
    let a = fit_hierarchy(&grids, 3, 4, 42, ex.descriptor()).unwrap();
    let b = fit_hierarchy(&grids, 3, 4, 42, ex.descriptor()).unwrap();
    assert_eq!(a, b);
    for g in &grids {
        let ta = a.tag_patches(g).unwrap();
        assert_eq!(ta, b.tag_patches(g).unwrap());
        // Completeness and disjointness at native resolution.
        let masks = ta.masks(3);
        for cell in 0..g.len() {
            let owners: u32 = (0..=3).map(|s| masks.mask(s)[cell] as u32).sum();
            assert_eq!(owners, 1);
        }
    }
}

#[test]
fn tag_image_reports_absent_parts() {
    let (sprites, images) = corpus(30, 3);
    let ex = PatchStatsExtractor::new(64, 4).unwrap();
    let dict = discover(&images, &ex, 3, 4, 1).unwrap();
    // Paint the whole image with the background colour of the first sprite.
    let bg = *sprites[0].image.get_pixel(0, 0);
    let blank = image::RgbImage::from_pixel(64, 64, bg);
    let (comp, masks) = tag_image(&blank, &ex, &dict.hierarchy, (8, 8)).unwrap();
    assert_eq!(comp.num_slots(), 4);
    assert!(comp.get(0).unwrap().is_present());
    for slot in 1..=3 {
        assert_eq!(*comp.get(slot).unwrap(), PartCode::absent(slot));
        assert!(!masks.present(slot));
        assert!(masks.mask(slot).iter().all(|&v| v == 0));
    }
    assert_eq!(masks.resolution(), (8, 8));
}

#[test]
fn mismatched_extractor_is_rejected() {
    let (_, images) = corpus(10, 3);
    let ex = PatchStatsExtractor::new(64, 4).unwrap();
    let dict = discover(&images, &ex, 3, 2, 1).unwrap();
    let other = PatchStatsExtractor::new(64, 8).unwrap();
    assert!(tag_image(&images[0].1, &other, &dict.hierarchy, (8, 8)).is_err());
}

#[test]
fn dictionary_round_trips_through_disk() {
    let (_, images) = corpus(8, 4);
    let ex = PatchStatsExtractor::new(64, 4).unwrap();
    let dict = discover(&images, &ex, 3, 2, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dict.json");
    dict.save(&path).unwrap();
    let back = partsmith::PartDictionary::load(&path).unwrap();
    assert_eq!(back, dict);

    let mut raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    raw["schema_version"] = 99.into();
    assert!(partsmith::PartDictionary::from_json(&raw.to_string()).is_err());
}
