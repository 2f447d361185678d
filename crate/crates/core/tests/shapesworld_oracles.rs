//! Corpus-level oracles: expression uniqueness by brute-force resolution,
//! exhaustive pixel-diff edit locality, cue membership, pooled-region
//! brute force, and split-digest stability.

use uvl_core::grid::Mask;
use uvl_core::lvlm::pool_region_features;
use uvl_core::rng::SplitMix64;
use uvl_core::shapesworld::{
    default_edits, derive_cue, expr, generate_sample, make_edit_pair, write_corpus, CueMode,
    CuePayload, EditKind, GenConfig,
};

#[test]
fn referring_expressions_resolve_uniquely_for_1000_seeds() {
    let cfg = GenConfig::default();
    let mut checked = 0usize;
    for seed in 0..1000u64 {
        let s = generate_sample(seed, &cfg).unwrap();
        for (text, target) in &s.referring_expressions {
            // the resolver scans every instance and demands a unique match
            let got = expr::resolve(text, s.instances());
            assert_eq!(got, Ok(*target), "seed {seed}: '{text}'");
            checked += 1;
        }
    }
    assert!(checked >= 1000, "expected at least 1000 expressions, got {checked}");
}

#[test]
fn edit_locality_pixel_scan_for_100_triplets() {
    let cfg = GenConfig::default();
    let mut rng = SplitMix64::new(5);
    let mut done = 0usize;
    let mut seed = 0u64;
    while done < 100 {
        let s = generate_sample(seed, &cfg).unwrap();
        seed += 1;
        let inst = rng.below(s.instances().len());
        let kind = EditKind::ALL[rng.below(3)];
        let t = make_edit_pair(&s, kind, inst).unwrap();
        let dil = t.gt_mask.dilate(1);
        // exhaustive pixel scan: no change outside the dilated mask
        for y in 0..t.source.h {
            for x in 0..t.source.w {
                if !dil.get(x, y) {
                    assert_eq!(
                        t.source.get(x, y),
                        t.target.get(x, y),
                        "seed {} kind {:?} leaked at ({x},{y})",
                        seed - 1,
                        kind
                    );
                }
            }
        }
        if kind == EditKind::Remove {
            for (x, y) in t.gt_mask.fg_pixels() {
                assert_eq!(t.target.get(x, y), s.scene.background);
            }
        }
        done += 1;
    }
}

#[test]
fn scribble_membership_for_50_seeds() {
    let cfg = GenConfig::default();
    let s = generate_sample(3, &cfg).unwrap();
    let mask = &s.instances()[0].mask;
    for seed in 0..50u64 {
        let cue = derive_cue(mask, CueMode::Scribble, seed).unwrap();
        match &cue.payload {
            CuePayload::Scribble(pts) => {
                assert!(!pts.is_empty());
                for &(x, y) in pts {
                    assert!(mask.get(x, y), "seed {seed}: scribble left the mask at ({x},{y})");
                }
            }
            _ => panic!("expected scribble"),
        }
    }
}

#[test]
fn box_pooling_matches_bruteforce() {
    let mut rng = SplitMix64::new(9);
    let level = {
        let mut a = ndarray::ArrayD::<f64>::zeros(ndarray::IxDyn(&[6, 32, 32]));
        for v in a.iter_mut() {
            *v = rng.next_f64();
        }
        a
    };
    for trial in 0..20 {
        let x0 = rng.below(100);
        let y0 = rng.below(100);
        let x1 = x0 + 1 + rng.below(127 - x0.max(99));
        let y1 = y0 + 1 + rng.below(127 - y0.max(99));
        let cue = uvl_core::shapesworld::Cue {
            mode: CueMode::Box,
            payload: CuePayload::Box(x0, y0, x1, y1),
        };
        let pooled = pool_region_features(&level, &cue, (128, 128)).unwrap();
        // brute force: enumerate covered cells
        let (cx0, cy0) = (x0 / 4, y0 / 4);
        let (cx1, cy1) = (((x1 - 1) / 4).min(31), ((y1 - 1) / 4).min(31));
        let mut count = 0usize;
        let mut sums = vec![0.0f64; 6];
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                count += 1;
                for (ch, s) in sums.iter_mut().enumerate() {
                    *s += level[[ch, cy, cx]];
                }
            }
        }
        for ch in 0..6 {
            let want = sums[ch] / count as f64;
            assert!(
                (pooled[ch] - want).abs() < 1e-12,
                "trial {trial} channel {ch}: {} vs {want}",
                pooled[ch]
            );
        }
    }
}

#[test]
fn corpus_digests_stable_across_runs() {
    let cfg = GenConfig::default();
    let build = |dir: &std::path::Path| {
        let samples: Vec<_> = (0..6u64)
            .map(|s| {
                let smp = generate_sample(s, &cfg).unwrap();
                let edits = default_edits(&smp);
                (smp, edits)
            })
            .collect();
        write_corpus(dir, &samples[..5], &samples[5..]).unwrap()
    };
    let d1 = std::env::temp_dir().join(format!("uvl_oracle_c1_{}", std::process::id()));
    let d2 = std::env::temp_dir().join(format!("uvl_oracle_c2_{}", std::process::id()));
    for d in [&d1, &d2] {
        let _ = std::fs::remove_dir_all(d);
        std::fs::create_dir_all(d).unwrap();
    }
    let m1 = build(&d1);
    let m2 = build(&d2);
    assert_eq!(m1.digests, m2.digests);
    let _ = std::fs::remove_dir_all(&d1);
    let _ = std::fs::remove_dir_all(&d2);
}

#[test]
fn category_list_equals_present_kinds() {
    let cfg = GenConfig::default();
    for seed in 0..50u64 {
        let s = generate_sample(seed, &cfg).unwrap();
        let mut kinds: Vec<String> = s
            .instances()
            .iter()
            .map(|i| i.kind.name().to_string())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        kinds.sort();
        assert_eq!(s.category_list, kinds);
        for inst in s.instances() {
            assert!(inst.mask.fg_count() >= 16, "seed {seed}: tiny instance");
        }
        let _ = Mask::new(1, 1);
    }
}
