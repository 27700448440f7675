mod common;

use gdpo_core::flow::interpolate;
use gdpo_core::gdpo::{
    log_sum_exp, pgr_weights, softplus, verify_bound_chain, verify_product_inequality, verify_proof_steps,
    BoundInstance,
};
use gdpo_core::io::{decode_dataset, encode_dataset, ClipShape};
use gdpo_core::numerics::{forward, LoraAdapter, MlpParams};
use gdpo_core::physics::{
    corrupt, gen_pool, score, simulate, Condition, CorruptionKind, PoolRecord, Provenance, Trajectory, WorldConfig,
};
use gdpo_core::pipeline::{filter_pool, largest_remainder, sample_budget};
use gdpo_core::rng::seeded;
use gdpo_core::RewardSchedule;
use proptest::prelude::*;

/// Reference apportionment: hand out one unit at a time to the category with
/// the largest unmet fractional share.
fn brute_force_budget(h_f: &[usize], s_f: &[Option<f64>], tau: f64, n: usize) -> Vec<usize> {
    let weights: Vec<f64> = h_f
        .iter()
        .zip(s_f)
        .map(|(&h, s)| match s {
            Some(s) if h > 0 => (tau * (1.0 - s)).exp(),
            _ => 0.0,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return vec![0; h_f.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut taken = vec![false; h_f.len()];
    while left > 0 {
        let mut best: Option<usize> = None;
        for i in 0..exact.len() {
            if taken[i] {
                continue;
            }
            let frac = exact[i] - exact[i].floor();
            if best.is_none_or(|b| frac > exact[b] - exact[b].floor()) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        counts[b] += 1;
        left -= 1;
    }
    counts.iter().zip(h_f).map(|(&c, &h)| c.min(h)).collect()
}

fn arb_histograms() -> impl Strategy<Value = (Vec<usize>, Vec<Option<f64>>)> {
    (1usize..7).prop_flat_map(|k| {
        (
            prop::collection::vec(0usize..60, k),
            prop::collection::vec(prop::option::weighted(0.9, 0.0f64..=1.0), k),
        )
    })
}

fn arb_clip(frames: usize, dims: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            8 => -5.0f64..5.0,
            1 => prop::num::f64::ANY,
        ],
        frames * dims,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn schedule_is_monotone_and_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let s = RewardSchedule::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (wl, wh) = (pgr_weights(lo, &s).unwrap(), pgr_weights(hi, &s).unwrap());
        prop_assert!(wl.alpha <= wh.alpha && wl.gamma <= wh.gamma);
        for w in [wl, wh] {
            prop_assert!((0.5..=1.0).contains(&w.alpha));
            prop_assert!((2.0..=3.2).contains(&w.gamma));
            prop_assert!(w.alpha * w.gamma >= 1.0);
        }
    }

    #[test]
    fn product_inequality_holds(
        terms in prop::collection::vec((-20.0f64..20.0, 1e-6f64..=1.0, -3.0f64..3.0), 1..=8)
    ) {
        let x: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let alphas: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let gammas: Vec<f64> = terms.iter().map(|t| 1.0 / t.1 + t.2.abs()).collect();
        let r = verify_product_inequality(&x, &alphas, &gammas);
        prop_assert!(r.rejected.is_none());
        prop_assert!(r.holds, "{r:?}");
        prop_assert!(r.holds_with_unit, "{r:?}");
    }

    #[test]
    fn proof_steps_hold(u in 0.0f64..50.0, v in 0.0f64..50.0, alpha in 1e-6f64..=1.0) {
        prop_assert!(verify_proof_steps(u, v, alpha).unwrap().holds);
    }

    #[test]
    fn bound_chain_holds(
        m in 1usize..=4,
        t in 1usize..=6,
        seed in any::<u64>(),
        beta in 0.01f64..1.0,
    ) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let mut table = |n: usize| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>();
        let delta_w = table(t);
        let delta_l = (0..m).map(|_| table(t)).collect();
        let alphas = table(m).into_iter().map(|a| 0.05 + 0.95 * (a + 5.0) / 10.0).collect::<Vec<_>>();
        let gammas = alphas.iter().map(|a| 1.0 / a + 0.1).collect();
        let inst = BoundInstance { delta_w, delta_l, alphas, gammas, beta };
        let r = verify_bound_chain(&inst, 0, &mut rng).unwrap();
        prop_assert!(r.holds, "{r:?}");
    }

    #[test]
    fn softplus_matches_direct_formula(x in -30.0f64..30.0) {
        let direct = (1.0 + x.exp()).ln();
        prop_assert!((softplus(x) - direct).abs() <= 1e-12 * direct.max(1e-300).max(1.0));
    }

    #[test]
    fn log_sum_exp_matches_direct_formula(xs in prop::collection::vec(-30.0f64..30.0, 1..10)) {
        let direct = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!((log_sum_exp(&xs) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn budget_matches_brute_force((h_f, s_f) in arb_histograms(), tau in 0.0f64..6.0, n in 1usize..300) {
        let got = sample_budget(&h_f, &s_f, tau, n).unwrap();
        prop_assert_eq!(&got, &brute_force_budget(&h_f, &s_f, tau, n));
        for (g, h) in got.iter().zip(&h_f) {
            prop_assert!(g <= h);
        }
    }

    #[test]
    fn budget_ratio_follows_difficulty(
        s_f in prop::collection::vec(0.0f64..=1.0, 2..5),
        tau in 0.0f64..4.0,
    ) {
        // Uncapped: shares before rounding are N·r_k/Σr, so counts differ from
        // them by less than one.
        let k = s_f.len();
        let h_f = vec![1_000_000; k];
        let n = 10_000;
        let s: Vec<Option<f64>> = s_f.iter().copied().map(Some).collect();
        let got = sample_budget(&h_f, &s, tau, n).unwrap();
        prop_assert_eq!(got.iter().sum::<usize>(), n);
        let r: Vec<f64> = s_f.iter().map(|s| (tau * (1.0 - s)).exp()).collect();
        let total: f64 = r.iter().sum();
        for (g, rk) in got.iter().zip(&r) {
            prop_assert!((*g as f64 - n as f64 * rk / total).abs() < 1.0);
        }
    }

    #[test]
    fn largest_remainder_preserves_total(shares in prop::collection::vec(0.0f64..50.0, 1..8)) {
        let total: f64 = shares.iter().sum();
        let n = total.round() as usize;
        let scaled: Vec<f64> = shares.iter().map(|s| s * n as f64 / total.max(1e-12)).collect();
        let counts = largest_remainder(&scaled, n);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, s) in counts.iter().zip(&scaled) {
            prop_assert!((*c as f64 - s).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn score_stays_in_unit_interval(
        data in arb_clip(8, 2),
        category in 0usize..4,
        p in prop::collection::vec(-1.0f64..1.0, 2),
        v in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let world = WorldConfig { frames: 8, ..WorldConfig::default() };
        let traj = Trajectory::new(8, 2, world.frame_step, data).unwrap();
        let c = Condition { category, init_position: p, init_velocity: v };
        let s = score(&traj, &c, &world);
        prop_assert!(s.is_valid(), "{s:?}");
    }

    #[test]
    fn interpolation_hits_endpoints_and_is_linear(
        x0 in prop::collection::vec(-3.0f64..3.0, 6),
        x1 in prop::collection::vec(-3.0f64..3.0, 6),
        t in 0.0f64..=1.0,
    ) {
        prop_assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0.clone());
        prop_assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1.clone());
        let xt = interpolate(&x0, &x1, t).unwrap();
        let dt = 1e-3;
        let ahead = interpolate(&x0, &x1, t + dt).unwrap();
        for i in 0..6 {
            prop_assert!(((ahead[i] - xt[i]) / dt - (x1[i] - x0[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_adapter_is_identity(seed in any::<u64>(), input in prop::collection::vec(-2.0f64..2.0, 5)) {
        let mut rng = seeded(seed);
        let host = MlpParams::init(5, 12, 2, 3, &mut rng);
        let adapter = LoraAdapter::init(&host, 3, 1.0, 0.5, &mut rng).unwrap();
        prop_assert_eq!(forward(&host, Some(&adapter), &input).unwrap(), forward(&host, None, &input).unwrap());
    }

    #[test]
    fn dataset_text_round_trips(seed in any::<u64>(), n in 1usize..20) {
        let world = WorldConfig::default();
        let pool = gen_pool(&world, n, 0.5, &mut seeded(seed)).unwrap();
        let text = encode_dataset(&ClipShape::of_world(&world), &pool).unwrap();
        prop_assert_eq!(decode_dataset(&text).unwrap(), pool);
    }
}

#[test]
fn filtering_is_idempotent() {
    let world = WorldConfig::default();
    let pool = gen_pool(&world, 600, 0.5, &mut seeded(1)).unwrap();
    let once = filter_pool(&pool, 0.6, &world).unwrap().kept;
    assert!(!once.is_empty() && once.len() < pool.len());
    assert_eq!(filter_pool(&once, 0.6, &world).unwrap().kept, once);
}

#[test]
fn clean_clips_survive_filtering() {
    let world = WorldConfig::default();
    let pool = gen_pool(&world, 400, 1.0, &mut seeded(2)).unwrap();
    assert!(pool.iter().all(|r| r.provenance == Provenance::Clean));
    let kept = filter_pool(&pool, 0.6, &world).unwrap().kept;
    assert!(kept.len() as f64 >= 0.9 * pool.len() as f64, "{} of {}", kept.len(), pool.len());
}

#[test]
fn jitter_degrades_physics_score_monotonically() {
    let world = WorldConfig::default();
    let clips: Vec<(Condition, Trajectory)> = common::clean_pairs(&world, 200, 3);
    let mut rng = seeded(4);
    let mean_s_pc = |mag: f64, rng: &mut gdpo_core::rng::StreamRng| {
        clips
            .iter()
            .map(|(c, t)| score(&corrupt(t, CorruptionKind::Jitter, mag, rng).unwrap(), c, &world).s_pc)
            .sum::<f64>()
            / clips.len() as f64
    };
    let levels = [0.0, 0.002, 0.005, 0.01, 0.02, 0.05];
    let means: Vec<f64> = levels.iter().map(|&m| mean_s_pc(m, &mut rng)).collect();
    assert!(means[0] > 0.99);
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn zero_magnitude_corruption_is_identity() {
    let world = WorldConfig::default();
    let (c, t) = &common::clean_pairs(&world, 1, 5)[0];
    let mut rng = seeded(6);
    for kind in CorruptionKind::ALL {
        assert_eq!(&corrupt(t, kind, 0.0, &mut rng).unwrap(), t);
    }
    let cat = &world.categories[c.category];
    assert_eq!(&simulate(cat, &c.init_position, &c.init_velocity, world.frames, world.frame_step).unwrap(), t);
}

#[test]
fn pool_records_keep_their_provenance() {
    let world = WorldConfig::default();
    let pool: Vec<PoolRecord> = gen_pool(&world, 300, 0.3, &mut seeded(7)).unwrap();
    for r in &pool {
        match r.provenance {
            Provenance::Clean => assert_eq!(r.corruption_magnitude, 0.0),
            Provenance::Corrupted => assert!(r.corruption_magnitude > 0.0),
        }
    }
}
