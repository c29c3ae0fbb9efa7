mod common;

use colorimagine::colorspace::{lab_parts_to_rgb, lab_to_rgb, rgb_to_lab, srgb_to_lab, RgbImage};
use colorimagine::composition::{assemble_reference, assign_segments, edit_assignment, Choice, EditAction};
use colorimagine::imagination::LatentCode;
use colorimagine::simulation::{sample_mask, simulate_reference, MaskConfig, SimulationMask};
use ndarray::Array3;
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f32> {
    0.0f32..=1.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn colorspace_round_trip(r in unit(), g in unit(), b in unit()) {
        let img = RgbImage::uniform(1, 1, [r, g, b]).unwrap();
        let back = lab_to_rgb(&rgb_to_lab(&img));
        for (x, y) in [r, g, b].iter().zip(back.image.get(0, 0)) {
            prop_assert!((x - y).abs() <= 1e-3);
        }
    }

    #[test]
    fn gray_has_exactly_zero_chroma(v in unit()) {
        let lab = srgb_to_lab([v as f64; 3]);
        prop_assert_eq!(lab[1], 0.0);
        prop_assert_eq!(lab[2], 0.0);
    }

    #[test]
    fn scalar_conversion_matches_the_oracle(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let got = srgb_to_lab([r, g, b]);
        let want = common::oracle_lab([r, g, b]);
        for c in 0..3 {
            prop_assert!((got[c] - want[c]).abs() <= 1e-6, "{:?} vs {:?}", got, want);
        }
    }

    #[test]
    fn assignment_matches_brute_force(seed in any::<u64>()) {
        let (gray, refs) = common::random_instance(seed, 16, 6, 5);
        let a = assign_segments(&gray, &refs).unwrap();
        for (j, (best, scores)) in common::brute_force_assign(&gray, &refs) {
            let got = a.scores()[&j].clone();
            for (x, y) in got.iter().zip(&scores) {
                prop_assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()));
            }
            if common::runner_up_gap(&scores) > 1e-3 {
                prop_assert_eq!(a.choice(j), Some(Choice::Reference(best)));
            }
        }
    }

    #[test]
    fn chosen_score_is_minimal(seed in any::<u64>()) {
        let (gray, refs) = common::random_instance(seed, 16, 8, 6);
        let a = assign_segments(&gray, &refs).unwrap();
        for (j, choice) in a.beta() {
            let s = &a.scores()[j];
            let k = choice.index().unwrap();
            prop_assert!(s.iter().all(|&v| s[k] <= v));
            prop_assert!(s[..k].iter().all(|&v| v > s[k]), "ties go to the lowest index");
        }
    }

    #[test]
    fn adding_a_candidate_only_moves_strictly_improved_segments(seed in any::<u64>(), extra_seed in any::<u64>()) {
        let (gray, refs) = common::random_instance(seed, 12, 5, 4);
        let (h, w) = gray.dim();
        let (_, donor) = common::random_instance(extra_seed, 12, 1, 1);
        let extra = RgbImage::from_fn(h, w, |y, x| {
            let d = &donor.references[0];
            d.get(y % d.height(), x % d.width())
        })
        .unwrap();
        let grown = refs.with_candidate(extra, LatentCode::from_seed(99)).unwrap();
        let before = assign_segments(&gray, &refs).unwrap();
        let after = assign_segments(&gray, &grown).unwrap();
        let n = refs.len();
        for (j, old) in before.beta() {
            let new = after.choice(*j).unwrap();
            if new != *old {
                prop_assert_eq!(new, Choice::Reference(n));
                let s = &after.scores()[j];
                prop_assert!(s[n] < s[old.index().unwrap()]);
            }
        }
    }

    #[test]
    fn assembly_copies_from_the_provenance(seed in any::<u64>()) {
        let (gray, refs) = common::random_instance(seed, 12, 4, 4);
        let a = assign_segments(&gray, &refs).unwrap();
        let lightness = gray.mapv(|v| v * 100.0);
        let composed = assemble_reference(&a, &refs, &lightness).unwrap();
        for ((y, x), &src) in composed.provenance.indexed_iter() {
            let j = refs.segmentation.labels()[[y, x]];
            prop_assert_eq!(Some(Choice::Reference(src as usize)), a.choice(j));
            prop_assert_eq!(composed.image.get(y, x), refs.references[src as usize].get(y, x));
        }
    }

    #[test]
    fn resetting_every_edit_restores_the_automatic_assignment(
        seed in any::<u64>(),
        edits in prop::collection::vec((0usize..8, 0usize..10), 0..12),
    ) {
        let (gray, refs) = common::random_instance(seed, 10, 4, 4);
        let original = assign_segments(&gray, &refs).unwrap();
        let ids: Vec<u32> = original.beta().keys().copied().collect();
        let mut a = original.clone();
        for (pick, action) in edits {
            let j = ids[pick % ids.len()];
            let action = match action {
                0..=3 => EditAction::Exclude,
                4 => EditAction::Reset,
                i => EditAction::SetReference { index: i % refs.len() },
            };
            a = edit_assignment(&a, j, action).unwrap();
        }
        for &j in &ids {
            a = edit_assignment(&a, j, EditAction::Reset).unwrap();
        }
        prop_assert!(a.same_choices(&original));
        prop_assert!(a.reset_all() == original);
    }

    #[test]
    fn donor_equal_to_truth_hides_the_mask(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mask = sample_mask(h, w, seed, &MaskConfig::default());
        let img = synthetic(h, w, seed);
        let (x, y) = rgb_to_lab(&img).into_parts();
        let sim = simulate_reference(&x, &y, &y, &mask).unwrap();
        let plain = lab_parts_to_rgb(&x, &y).unwrap();
        prop_assert_eq!(sim.image, plain.image);
    }

    #[test]
    fn masks_are_deterministic_and_within_coverage(seed in any::<u64>(), h in 8usize..48, w in 8usize..48) {
        let cfg = MaskConfig::default();
        let a = sample_mask(h, w, seed, &cfg);
        prop_assert_eq!(&a, &sample_mask(h, w, seed, &cfg));
        let total = (h * w) as f64;
        let c = a.coverage();
        prop_assert!(c >= (cfg.coverage_min * total).ceil() / total - 1e-12);
        prop_assert!(c <= (cfg.coverage_max * total).floor() / total + 1e-12);
    }

    #[test]
    fn mixing_selects_per_pixel(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let mask = sample_mask(h, w, seed, &MaskConfig::default());
        let y = Array3::from_shape_fn((h, w, 2), |(a, b, c)| (a * 7 + b * 3 + c) as f32 - 20.0);
        let fake = Array3::from_shape_fn((h, w, 2), |(a, b, c)| 30.0 - (a * 5 + b + c * 11) as f32);
        let mixed = colorimagine::simulation::mix_chroma(&y, &fake, &mask.mask).unwrap();
        prop_assert_eq!(mixed, common::brute_force_mix(&y, &fake, &mask.mask));
    }
}

fn synthetic(h: usize, w: usize, seed: u64) -> RgbImage {
    let scene = colorimagine::synthetic::synthetic_scene(h.max(2), w.max(2), seed % 1000);
    scene.crop(0, 0, h, w)
}

#[test]
fn uniform_masks_select_one_source() {
    let img = synthetic(6, 5, 3);
    let donor = synthetic(6, 5, 4);
    let (x, y) = rgb_to_lab(&img).into_parts();
    let (_, fake) = rgb_to_lab(&donor).into_parts();
    let zero = simulate_reference(&x, &y, &fake, &SimulationMask::uniform(6, 5, 0)).unwrap();
    assert_eq!(zero.image, lab_parts_to_rgb(&x, &y).unwrap().image);
    let one = simulate_reference(&x, &y, &fake, &SimulationMask::uniform(6, 5, 1)).unwrap();
    assert_eq!(one.image, lab_parts_to_rgb(&x, &fake).unwrap().image);
}

#[test]
fn reference_set_rejects_mismatched_candidates() {
    let (_, refs) = common::random_instance(1, 8, 2, 2);
    let (h, w) = refs.segmentation.dim();
    let wrong = RgbImage::uniform(h + 1, w, [0.5; 3]).unwrap();
    assert!(refs.with_candidate(wrong, LatentCode::from_seed(5)).is_err());
}
