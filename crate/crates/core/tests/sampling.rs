use colflux_core::column::{steady_state, ColumnParams, NoiseSpec, MIN_HOLDUP};
use colflux_core::sampling::{
    build_initial_pool, build_noise_pool, draw_noise, iman_conover, rng_for, spearman, RegionData,
};
use colflux_core::sobol::sobol_points;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn truncated_cdf(x: f64, sigma: f64, bound: f64) -> f64 {
    let n = Normal::new(0.0, sigma).unwrap();
    let (lo, hi) = (n.cdf(-bound), n.cdf(bound));
    ((n.cdf(x) - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn ks_distance(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs())
    })
}

#[test]
fn noise_marginals_follow_the_truncated_normal() {
    let spec = NoiseSpec::for_column(&ColumnParams::default());
    let classes = spec.classes(25);
    let mut rng = rng_for(17, 0);
    let draws: Vec<Vec<f64>> = (0..4000).map(|_| draw_noise(&spec, 25, &mut rng)).collect();
    for slot in [0, 12, 24, 25, 26, 27, 28, 29] {
        let c = classes[slot];
        let d = ks_distance(draws.iter().map(|r| r[slot]).collect(), |x| truncated_cdf(x, c.sigma, c.bound));
        assert!(d < 0.05, "slot {slot}: KS distance {d}");
        assert!(draws.iter().all(|r| r[slot].abs() <= c.bound));
    }
    let pool = build_noise_pool(&spec, 25, 512, 3).unwrap();
    let c = classes[0];
    let d = ks_distance(pool.samples.iter().map(|r| r[0]).collect(), |x| truncated_cdf(x, c.sigma, c.bound));
    assert!(d < 0.05, "pool KS distance {d}");
}

#[test]
fn iman_conover_hits_target_rank_correlation_in_25_dimensions() {
    let d = 25;
    let n = 1000;
    let u = sobol_points(n, d).unwrap();
    let samples = DMatrix::from_fn(n, d, |i, j| u[i][j]);
    let target = DMatrix::from_fn(d, d, |i, j| 0.8f64.powi((i as i32 - j as i32).abs()));
    let out = iman_conover(&samples, &target).unwrap();
    for i in 0..d {
        for j in 0..i {
            let r = spearman(out.column(i).as_slice(), out.column(j).as_slice());
            assert!((r - target[(i, j)]).abs() < 0.1, "({i},{j}): {r} vs {}", target[(i, j)]);
        }
    }
}

/// Largest local discrepancy over anchored boxes with corners at the points (and 1).
fn star_discrepancy_2d(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len() as f64;
    let mut xs: Vec<f64> = pts.iter().map(|p| p[0]).chain([1.0]).collect();
    let mut ys: Vec<f64> = pts.iter().map(|p| p[1]).chain([1.0]).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut worst = 0.0f64;
    for &a in &xs {
        for &b in &ys {
            let open = pts.iter().filter(|p| p[0] < a && p[1] < b).count() as f64 / n;
            let closed = pts.iter().filter(|p| p[0] <= a && p[1] <= b).count() as f64 / n;
            let vol = a * b;
            worst = worst.max(vol - open).max(closed - vol);
        }
    }
    worst
}

#[test]
fn sobol_points_are_more_uniform_than_random_points() {
    let n = 256;
    let sobol: Vec<[f64; 2]> = sobol_points(n, 2).unwrap().iter().map(|r| [r[0], r[1]]).collect();
    let mut rng = rng_for(1, 0);
    let random: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
    let (ds, dr) = (star_discrepancy_2d(&sobol), star_discrepancy_2d(&random));
    assert!(ds < dr, "sobol {ds} vs random {dr}");
    assert!(ds < 0.05, "sobol star discrepancy {ds}");
}

fn synthetic_region(seed: u64) -> RegionData {
    let p = ColumnParams::default();
    let ss = steady_state(&p, &p.nominal_controls(), &p.nominal_feed()).unwrap();
    let mut rng = rng_for(seed, 0);
    let mut region = RegionData { time: vec![], temperatures: vec![], holdups: vec![], feed: vec![] };
    for k in 0..300 {
        let shift = 0.05 * (rng.gen::<f64>() - 0.5);
        let temps = ss
            .compositions()
            .iter()
            .map(|&x| {
                let x = (x + shift + 0.01 * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0);
                x * p.t_boil_light + (1.0 - x) * p.t_boil_heavy
            })
            .collect();
        let holdups = ss.holdups().iter().map(|&m| m * (1.0 + 0.1 * (rng.gen::<f64>() - 0.5))).collect();
        region.time.push(k as f64 * 0.1);
        region.temperatures.push(temps);
        region.holdups.push(holdups);
        region.feed.push(colflux_core::FeedConditions::new(1.0 + 0.001 * k as f64, 0.5, 1.0));
    }
    region
}

#[test]
fn initial_pools_are_valid_and_seeded() {
    let p = ColumnParams::default();
    let region = synthetic_region(4);
    let a = build_initial_pool(&region, 64, 9, &p, "src").unwrap();
    let b = build_initial_pool(&region, 64, 9, &p, "src").unwrap();
    let c = build_initial_pool(&region, 64, 10, &p, "src").unwrap();
    assert_eq!(a, b);
    assert_ne!(a.states, c.states);
    assert_eq!(a.len(), 64);
    for (z, f) in a.states.iter().zip(&a.feeds) {
        assert!(z[..25].iter().all(|&m| m > MIN_HOLDUP));
        assert!(z[25..].iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(region.feed.contains(f));
    }
    // temperatures of the pooled states cover the region spread of stage 1
    let lo = region.temperatures.iter().map(|r| r[0]).fold(f64::INFINITY, f64::min);
    let hi = region.temperatures.iter().map(|r| r[0]).fold(f64::NEG_INFINITY, f64::max);
    let pooled: Vec<f64> = a.states.iter().map(|z| z[25] * p.t_boil_light + (1.0 - z[25]) * p.t_boil_heavy).collect();
    let mid = pooled.iter().filter(|&&t| t > lo - 1.0 && t < hi + 1.0).count();
    assert!(mid >= 60, "{mid} of 64 pooled stage-1 temperatures near the region range");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn iman_conover_keeps_each_marginal(seed in 0u64..1000, rho in -0.9f64..0.9) {
        let mut rng = rng_for(seed, 0);
        let n = 60;
        let samples = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>());
        let target = DMatrix::from_row_slice(3, 3, &[1.0, rho, 0.0, rho, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let out = iman_conover(&samples, &target).unwrap();
        for j in 0..3 {
            let mut a: Vec<f64> = samples.column(j).iter().copied().collect();
            let mut b: Vec<f64> = out.column(j).iter().copied().collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
