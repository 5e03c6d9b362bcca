use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tti_core::classifier::{BinaryMask, ClassifierBank, FrameClassifier, FrameFeatures, SupportShot};
use tti_core::episodes::{generate_synthetic, AreaSpec, Episode, SyntheticSpec};
use tti_core::losses::{compute_signatures, global_prototype, support_ce, Signatures};
use tti_core::metrics::{mean_iou, MaskSequence};
use tti_core::numerics::{cosine_similarity, Tensor};
use tti_core::optimizer::{
    lambda_schedule, predict_frames, run_episode, select_keyframe, tti_stage1, tti_stage2, Mode, TtiConfig,
};
use tti_core::Error;

fn episode(seed: u64, frames: usize, shots: usize) -> Episode {
    generate_synthetic(&SyntheticSpec {
        channels: 8,
        height: 10,
        width: 10,
        frames,
        shots,
        drift: 0.05,
        noise: 0.3,
        area: AreaSpec::Range { min: 0.1, max: 0.6 },
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn normalized(ep: &Episode) -> (Vec<FrameFeatures>, Vec<SupportShot>) {
    let q = ep.query.iter().map(FrameFeatures::normalized).collect();
    let s = ep
        .support
        .iter()
        .map(|s| SupportShot {
            features: s.features.normalized(),
            mask: s.mask.clone(),
        })
        .collect();
    (q, s)
}

#[test]
fn runs_are_bit_identical() {
    let ep = episode(1, 6, 2);
    for mode in [Mode::Tti, Mode::Baseline, Mode::Naive] {
        let cfg = TtiConfig {
            mode,
            ..Default::default()
        };
        let a = run_episode(&ep, &cfg).unwrap();
        let b = run_episode(&ep, &cfg).unwrap();
        assert_eq!(a, b);
        let expected = cfg.iterations + if mode == Mode::Tti { cfg.keyframe_iterations } else { 0 };
        assert_eq!(a.trace.records.len(), expected);
        if let Some(k) = a.trace.keyframe {
            assert!(k < ep.frames());
        }
    }
}

#[test]
fn baseline_frames_are_independent() {
    let ep = episode(2, 4, 2);
    let cfg = TtiConfig {
        mode: Mode::Baseline,
        ..Default::default()
    };
    let full = run_episode(&ep, &cfg).unwrap();
    for t in 0..ep.frames() {
        let single = Episode {
            query: vec![ep.query[t].clone()],
            gt: None,
            ..ep.clone()
        };
        let alone = run_episode(&single, &cfg).unwrap();
        for (a, b) in alone.trace.final_maps[0]
            .values()
            .iter()
            .zip(full.trace.final_maps[t].values())
        {
            assert!((a - b).abs() < 1e-12, "frame {t}: {a} vs {b}");
        }
    }
}

#[test]
fn prototype_is_taken_before_each_update() {
    let ep = episode(3, 5, 1);
    let (q, s) = normalized(&ep);
    let cfg = TtiConfig::default();
    let full = tti_stage1(&q, &s, &cfg).unwrap();
    for l in [cfg.prior_update + 2, cfg.prior_update + 9, cfg.iterations] {
        let shorter = tti_stage1(
            &q,
            &s,
            &TtiConfig {
                iterations: l - 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(full.records[l - 1].omega, global_prototype(&shorter.bank).omega, "iteration {l}");
    }
    let w0 = tti_core::classifier::imprint_weights(&s).unwrap();
    for (a, b) in full.records[0].omega.iter().zip(&w0) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn logged_lambdas_follow_the_schedule() {
    for shots in [1, 5] {
        let ep = episode(4, 3, shots);
        let cfg = TtiConfig::default();
        let r = run_episode(&ep, &cfg).unwrap();
        for rec in r.trace.records.iter().filter(|r| r.stage == 1) {
            assert_eq!(rec.lambdas, lambda_schedule(rec.iteration, shots, cfg.prior_update));
        }
    }
}

#[test]
fn tti_matches_baseline_until_the_consistency_term_starts() {
    let ep = generate_synthetic(&SyntheticSpec {
        noise: 0.2,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let tti = run_episode(&ep, &TtiConfig::default()).unwrap();
    let base = run_episode(
        &ep,
        &TtiConfig {
            mode: Mode::Baseline,
            ..Default::default()
        },
    )
    .unwrap();
    let lphi = TtiConfig::default().prior_update;
    assert_eq!(tti.trace.records[..lphi - 1], base.trace.records[..lphi - 1]);
}

#[test]
fn drift_free_episodes_are_solved_by_the_baseline() {
    for seed in 0..10 {
        let ep = generate_synthetic(&SyntheticSpec {
            noise: 0.2,
            seed,
            ..Default::default()
        })
        .unwrap();
        let r = run_episode(
            &ep,
            &TtiConfig {
                mode: Mode::Baseline,
                ..Default::default()
            },
        )
        .unwrap();
        let miou = mean_iou(&MaskSequence::new(r.masks).unwrap(), ep.gt.as_ref().unwrap()).unwrap();
        assert!(miou >= 0.95, "seed {seed}: {miou}");
    }
}

#[test]
fn descent_makes_progress_on_the_support_image() {
    let ep = episode(6, 3, 1);
    let (_, s) = normalized(&ep);
    let q = vec![s[0].features.clone(); 3];
    let cfg = TtiConfig::default();
    let r = tti_stage1(&q, &s, &cfg).unwrap();
    assert!(r.records.last().unwrap().ce < r.records[0].ce);
}

#[test]
fn five_shot_run_does_not_diverge() {
    let ep = episode(7, 6, 5);
    let (q, s) = normalized(&ep);
    let cfg = TtiConfig::default();
    let r = tti_stage1(&q, &s, &cfg).unwrap();
    let at_lphi = r.records[cfg.prior_update - 1].total;
    assert!(r.records.last().unwrap().total <= at_lphi);
}

#[test]
fn stage_two_edge_cases() {
    let ep = episode(8, 4, 1);
    let (q, s) = normalized(&ep);
    let cfg = TtiConfig::default();
    let bank = tti_stage1(&q, &s, &cfg).unwrap().bank;
    let (h, w) = (q[0].height(), q[0].width());

    let none = TtiConfig {
        keyframe_iterations: 0,
        ..cfg.clone()
    };
    let pseudo = BinaryMask::new(h, w, vec![true; h * w]).unwrap();
    assert_eq!(tti_stage2(&bank, &q[1], 1, &pseudo, &none).unwrap().0, bank);

    let ignored = BinaryMask::new(h, w, vec![false; h * w])
        .unwrap()
        .with_ignore(vec![true; h * w])
        .unwrap();
    assert_eq!(tti_stage2(&bank, &q[1], 1, &ignored, &cfg).unwrap().0, bank);
}

#[test]
fn stage_two_reduces_keyframe_cross_entropy() {
    for seed in 0..5 {
        let ep = episode(20 + seed, 6, 1);
        let r = run_episode(&ep, &TtiConfig::default()).unwrap();
        let stage_two: Vec<_> = r.trace.records.iter().filter(|r| r.stage == 2).collect();
        if stage_two.is_empty() {
            continue;
        }
        assert!(stage_two.last().unwrap().ce <= stage_two[0].ce + 1e-12, "seed {seed}");
    }
}

fn random_bank(rng: &mut ChaCha8Rng, n: usize, c: usize) -> ClassifierBank {
    ClassifierBank::new(
        (0..n)
            .map(|_| FrameClassifier::new((0..c).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.1, 20.0).unwrap())
            .collect(),
    )
    .unwrap()
}

fn random_frame(rng: &mut ChaCha8Rng, c: usize, s: usize) -> FrameFeatures {
    FrameFeatures::new(Tensor::new(vec![c, s, s], (0..c * s * s).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .unwrap()
}

#[test]
fn keyframe_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..50 {
        let n = rng.random_range(1..6);
        let bank = random_bank(&mut rng, n, 5);
        let frames: Vec<FrameFeatures> = (0..n).map(|_| random_frame(&mut rng, 5, 4).normalized()).collect();
        let maps = predict_frames(&frames, &bank).unwrap();
        let sigs: Vec<Signatures> = frames
            .iter()
            .zip(&maps)
            .map(|(f, m)| compute_signatures(f, m).unwrap())
            .collect();
        let omega = global_prototype(&bank).omega;
        let mut best = 0;
        let mut best_cos = f64::NEG_INFINITY;
        for (t, s) in sigs.iter().enumerate() {
            let c = cosine_similarity(&s.foreground, &omega).unwrap();
            if c > best_cos {
                best = t;
                best_cos = c;
            }
        }
        assert_eq!(select_keyframe(&bank, &sigs).unwrap(), best);
        if n == 1 {
            assert_eq!(best, 0);
        }
    }
}

#[test]
fn keyframe_ignores_feature_scale() {
    for seed in 0..10 {
        let ep = episode(50 + seed, 5, 1);
        let mut scaled = ep.clone();
        let factor = 0.5 + seed as f64 * 3.0;
        scaled.query = ep.query.iter().map(|f| f.scaled(factor).unwrap()).collect();
        let a = run_episode(&ep, &TtiConfig::default()).unwrap();
        let b = run_episode(&scaled, &TtiConfig::default()).unwrap();
        assert_eq!(a.trace.keyframe, b.trace.keyframe);
    }
}

#[test]
fn degenerate_signatures_give_no_keyframe() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let bank = random_bank(&mut rng, 2, 3);
    let sig = Signatures {
        foreground: vec![0.0; 3],
        background: vec![0.0; 3],
        foreground_mass: 0.0,
        background_mass: 0.0,
        frame: 0,
        iteration: 0,
    };
    assert!(matches!(select_keyframe(&bank, &[sig.clone(), sig]), Err(Error::NoKeyframe)));
}

#[test]
fn naive_mode_shares_one_classifier() {
    let ep = episode(9, 6, 2);
    let r = run_episode(
        &ep,
        &TtiConfig {
            mode: Mode::Naive,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(r.trace.bank.len(), 1);
    assert_eq!(r.masks.len(), 6);
    assert!(r.trace.keyframe.is_none());
    assert!(r.trace.records.iter().all(|rec| rec.lambdas.global == 0.0));
}

#[test]
fn empty_support_mask_is_reported() {
    let mut ep = episode(10, 2, 1);
    let (h, w) = (ep.support[0].mask.height(), ep.support[0].mask.width());
    ep.support[0].mask = BinaryMask::empty(h, w).unwrap();
    assert!(matches!(
        run_episode(&ep, &TtiConfig::default()),
        Err(Error::EmptySupportMask { shot: 0 })
    ));
}

#[test]
fn support_ce_of_final_classifiers_is_finite() {
    let ep = episode(11, 4, 2);
    let (_, s) = normalized(&ep);
    let r = run_episode(&ep, &TtiConfig::default()).unwrap();
    for clf in &r.trace.bank.frames {
        assert!(support_ce(&s, clf).unwrap().value.is_finite());
    }
}
