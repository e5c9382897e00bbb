use csft::data::ImageShape;
use csft::pipeline::style_contract;
use csft::stylization::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: ImageShape = ImageShape { channels: 3, height: 32, width: 32 };

#[test]
fn sci_moves_whole_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image: Vec<f64> = (0..SHAPE.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let perm = random_permutation(&mut rng, 16);
    let out = make_sci(&image, SHAPE, 8, &perm).unwrap();
    for c in 0..3 {
        for j in 0..16 {
            let (dy, dx) = (j / 4 * 8, j % 4 * 8);
            let (sy, sx) = (perm[j] / 4 * 8, perm[j] % 4 * 8);
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(out[c * 1024 + (dy + y) * 32 + dx + x], image[c * 1024 + (sy + y) * 32 + sx + x]);
                }
            }
        }
    }
    assert_eq!(make_sci(&out, SHAPE, 8, &inverse_permutation(&perm)).unwrap(), image);
}

#[test]
fn augmentation_is_a_function_of_its_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image: Vec<f64> = (0..SHAPE.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let params = AugmentParams::default();
    for f in 1..=5 {
        let a = augment(&image, SHAPE, StyleLabel(f), &params, 9).unwrap();
        assert_eq!(a, augment(&image, SHAPE, StyleLabel(f), &params, 9).unwrap());
        assert_ne!(a, image, "family {f} left the image unchanged");
    }
    assert!(augment(&image, SHAPE, StyleLabel(6), &params, 9).is_err());
}

#[test]
fn augmentations_keep_shape_while_shuffles_destroy_it() {
    let params = AugmentParams::default();
    for seed in 0..5 {
        let c = style_contract(&params, 8, seed).unwrap();
        assert!(c.clean_acc > 0.8, "seed {seed}: clean probe accuracy {}", c.clean_acc);
        for (f, r) in c.family_retention.iter().enumerate() {
            assert!(*r >= 0.7, "seed {seed}: family {} retains {r:.3}", f + 1);
        }
        assert!((c.sci_acc - c.chance).abs() <= 0.05, "seed {seed}: shuffled accuracy {}", c.sci_acc);
    }
}
