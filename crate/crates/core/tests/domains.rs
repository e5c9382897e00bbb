use csft::data::Dataset;
use csft::domains::*;
use csft::metrics::{LinearProbe, ProbeConfig};

fn latent_pairs(d: &Dataset) -> Vec<(usize, usize)> {
    d.latents.as_ref().unwrap().iter().map(|l| (l.shape, l.texture)).collect()
}

/// Plug-in mutual information estimate in nats.
fn mutual_information(pairs: &[(usize, usize)], k: usize) -> f64 {
    let n = pairs.len() as f64;
    let mut joint = vec![0.0; k * k];
    for &(s, z) in pairs {
        joint[s * k + z] += 1.0 / n;
    }
    let ps: Vec<f64> = (0..k).map(|s| (0..k).map(|z| joint[s * k + z]).sum()).collect();
    let pz: Vec<f64> = (0..k).map(|z| (0..k).map(|s| joint[s * k + z]).sum()).collect();
    let mut mi = 0.0;
    for s in 0..k {
        for z in 0..k {
            let p = joint[s * k + z];
            if p > 0.0 {
                mi += p * (p / (ps[s] * pz[z])).ln();
            }
        }
    }
    mi
}

#[test]
fn uniform_confounding_makes_texture_independent() {
    let d = sample_domain(&CausalGraphParams { confounder_strength: 0.2, seed: 4, noise_sigma: 0.0, ..Default::default() }, 10_000).unwrap();
    let mi = mutual_information(&latent_pairs(&d), 5);
    // the plug-in estimator's bias is about (k−1)²/(2N) = 8e-4 nats
    assert!(mi < 3e-3, "mutual information {mi}");
    let strong = sample_domain(&CausalGraphParams { seed: 4, noise_sigma: 0.0, ..Default::default() }, 2_000).unwrap();
    assert!(mutual_information(&latent_pairs(&strong), 5) > 0.5);
}

#[test]
fn class_counts_are_balanced_and_seed_stable() {
    let params = CausalGraphParams { seed: 21, ..Default::default() };
    let count = |d: &Dataset| {
        let mut c = [0usize; 5];
        d.goal_labels().unwrap().iter().for_each(|&y| c[y] += 1);
        c
    };
    let a = count(&sample_domain(&params, 1000).unwrap());
    assert!(a.iter().all(|&c| (150..=250).contains(&c)), "{a:?}");
    assert_eq!(a, count(&sample_domain(&params, 1000).unwrap()));
}

#[test]
fn paired_texture_frequency_matches_strength() {
    let d = sample_domain(&CausalGraphParams { seed: 8, noise_sigma: 0.0, ..Default::default() }.with_cyclic_pairing(2), 4000).unwrap();
    let paired = latent_pairs(&d).iter().filter(|&&(s, z)| z == (s + 2) % 5).count() as f64 / 4000.0;
    assert!((paired - 0.9).abs() < 0.02, "{paired}");
}

#[test]
fn repairing_shifts_a_pixel_probe_by_fifteen_points() {
    for seed in 0..5u64 {
        let (train, test) = sample_domain(&CausalGraphParams { seed: seed * 1000 + 1, ..Default::default() }, 1000).unwrap().split(0.8);
        let (_, target) =
            sample_domain(&CausalGraphParams { seed: seed * 1000 + 2, ..Default::default() }.with_cyclic_pairing(1), 1000).unwrap().split(0.8);
        let probe = LinearProbe::fit(train.images.as_slice(), 3072, train.goal_labels().unwrap(), 5, &ProbeConfig::default()).unwrap();
        let src = probe.accuracy(test.images.as_slice(), test.goal_labels().unwrap()).unwrap();
        let tgt = probe.accuracy(target.images.as_slice(), target.goal_labels().unwrap()).unwrap();
        assert!(src - tgt >= 0.15, "seed {seed}: source {src:.3}, target {tgt:.3}");
    }
}

#[test]
fn dataset_container_roundtrips_through_disk() {
    let d = sample_domain(&CausalGraphParams { seed: 2, ..Default::default() }, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csft");
    d.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.goal_labels, d.goal_labels);
    assert_eq!(back.latents, d.latents);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 12);
    for (a, b) in back.images.as_slice().iter().zip(d.images.as_slice()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}
