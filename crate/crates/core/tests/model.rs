use colflux_core::column::{
    derivatives, internal_flows, rhs_into, stage_temperature, steady_state, vle, ColumnParams, ColumnState, Controls,
    FeedConditions,
};
use proptest::prelude::*;

fn params() -> ColumnParams<f64> {
    ColumnParams::default()
}

prop_compose! {
    fn valid_case()(
        m in prop::collection::vec(0.05f64..2.0, 25),
        x in prop::collection::vec(0.0f64..=1.0, 25),
        lt in 0.0f64..2.75,
        vb in 0.0f64..3.25,
        f in 0.8f64..1.2,
        zf in 0.4f64..0.6,
        qf in 0.8f64..1.2,
    ) -> (Vec<f64>, Vec<f64>, Controls<f64>, FeedConditions<f64>) {
        (m, x, Controls::new(lt, vb), FeedConditions::new(f, zf, qf))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    // Summed stage balances reduce to the external streams.
    #[test]
    fn total_and_component_mass_are_conserved((m, x, u, feed) in valid_case()) {
        let p = params();
        let state = ColumnState::from_parts(&m, &x).unwrap();
        let d = derivatives(&state, &u, &feed, &p).unwrap();
        let flows = internal_flows(&state, &u, &feed, &p);
        let (dm, dx) = (d.holdups(), d.compositions());
        let total: f64 = dm.iter().sum();
        let expected_total = feed.rate - flows.distillate - flows.bottoms;
        prop_assert!((total - expected_total).abs() < 1e-10, "total {total} vs {expected_total}");
        let light: f64 = (0..25).map(|k| dm[k] * x[k] + m[k] * dx[k]).sum();
        let expected_light = feed.rate * feed.composition - flows.distillate * x[24] - flows.bottoms * x[0];
        prop_assert!((light - expected_light).abs() < 1e-10, "light {light} vs {expected_light}");
    }

    #[test]
    fn equilibrium_is_monotone_and_enriching(a in 0.0f64..1.0, b in 0.0f64..1.0, alpha in 1.01f64..5.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (ylo, yhi) = (vle(lo, alpha).unwrap(), vle(hi, alpha).unwrap());
        prop_assert!(ylo <= yhi);
        prop_assert!(ylo >= lo - 1e-15 && ylo <= 1.0);
        // closed form y = αx / (1 + (α − 1)x)
        prop_assert!((ylo - alpha * lo / (1.0 + (alpha - 1.0) * lo)).abs() < 1e-14);
    }

    #[test]
    fn temperature_decreases_with_light_fraction(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let p = params();
        let (ta, tb) = (stage_temperature(a, &p).unwrap(), stage_temperature(b, &p).unwrap());
        prop_assert_eq!(a < b, ta > tb);
    }
}

#[test]
fn equilibrium_boundaries() {
    for alpha in [1.2f64, 1.75, 3.0] {
        assert_eq!(vle(0.0, alpha).unwrap(), 0.0);
        assert!((vle(1.0f64, alpha).unwrap() - 1.0).abs() < 1e-15);
    }
    assert!(vle(1.2, 1.75).is_err());
    let p = params();
    assert!((stage_temperature(0.0, &p).unwrap() - 357.4).abs() < 1e-12);
    assert!((stage_temperature(1.0, &p).unwrap() - 341.9).abs() < 1e-12);
}

#[test]
fn nominal_steady_state_is_near_the_product_specifications() {
    let p = params();
    let (u, feed) = (p.nominal_controls(), p.nominal_feed());
    let ss = steady_state(&p, &u, &feed).unwrap();
    let r = derivatives(&ss, &u, &feed, &p).unwrap();
    let res = r.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(res < 1e-10, "residual {res}");
    let x = ss.compositions();
    assert!((x[0] - 0.01).abs() < 0.01, "x_1 = {}", x[0]);
    assert!((x[24] - 0.99).abs() < 0.01, "x_25 = {}", x[24]);
    // bottoms lighter than feed lighter than distillate
    assert!(x[0] < 0.5 && x[24] > 0.5);
    assert!(x.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn f32_instantiation_tracks_f64() {
    let p = params();
    let p32: ColumnParams<f32> = p.cast();
    let z: Vec<f64> = (0..25).map(|k| 0.4 + 0.01 * k as f64).chain((0..25).map(|k| 0.02 + 0.039 * k as f64)).collect();
    let z32: Vec<f32> = z.iter().map(|&v| v as f32).collect();
    let mut d64 = vec![0.0; 50];
    let mut d32 = vec![0.0f32; 50];
    rhs_into(&z, &p.nominal_controls(), &p.nominal_feed(), &p, &mut d64).unwrap();
    rhs_into(&z32, &p32.nominal_controls(), &p32.nominal_feed(), &p32, &mut d32).unwrap();
    for (a, b) in d64.iter().zip(&d32) {
        assert!((a - *b as f64).abs() < 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
    }
}
