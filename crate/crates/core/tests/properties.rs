use std::str::FromStr;

use ghostblend::antiplane::{default_core, reduce_period, site_energy_ap, ylin, ScalarCauchyBorn};
use ghostblend::blending::SplineProfile;
use ghostblend::coupling::Method;
use ghostblend::lattice::{build_lattice, LatticeSpec, Region};
use ghostblend::potential::{CauchyBorn, EamParams};
use ghostblend::study::{error_energy, fit_slope};
use ghostblend::{Matrix2, Vector2};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn slope_of_power_law(c in 0.01f64..100.0, p in -3.0f64..0.5, d0 in 1.0f64..50.0) {
        let pts: Vec<(f64, f64)> = (0..5).map(|k| {
            let dof = d0 * 3f64.powi(k);
            (dof, c * dof.powf(p))
        }).collect();
        prop_assert!((fit_slope(&pts, None).unwrap() - p).abs() < 1e-10);
        prop_assert!((fit_slope(&pts, Some(3)).unwrap() - p).abs() < 1e-10);
    }

    #[test]
    fn energy_error_definition(e_ref in -1e3f64..1e3, e_h in -1e3f64..1e3) {
        let (abs, rel) = error_energy(e_ref, e_h).unwrap();
        prop_assert!(abs >= 0.0 && rel >= 0.0);
        prop_assert_eq!(abs, (e_ref - e_h).abs());
        prop_assert!((rel * e_ref.abs().max(1e-30) - abs).abs() <= 1e-12 * abs.max(1.0));
    }

    #[test]
    fn period_reduction(d in -50.0f64..50.0) {
        let r = reduce_period(d);
        prop_assert!(r > -0.5 && r <= 0.5);
        prop_assert!(((d - r) - (d - r).round()).abs() < 1e-9);
    }

    #[test]
    fn predictor_range(x in -20.0f64..20.0, y in -20.0f64..20.0) {
        let c = default_core();
        prop_assume!((Vector2::new(x, y) - c).norm() > 1e-6);
        let v = ylin(&Vector2::new(x, y), &c).unwrap();
        prop_assert!(v > -0.5 - 1e-15 && v <= 0.5 + 1e-15);
    }

    #[test]
    fn slip_invariant_site_energy(d in prop::array::uniform6(-0.5f64..0.5), k in prop::array::uniform6(-3i32..3)) {
        let mut shifted = d;
        for j in 0..6 {
            shifted[j] += k[j] as f64;
        }
        prop_assert!((site_energy_ap(&d) - site_energy_ap(&shifted)).abs() < 1e-10);
    }

    #[test]
    fn spline_profile_is_monotone(r_a in 1.0f64..20.0, w in 0.5f64..20.0, s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let p = SplineProfile::new(r_a, r_a + w).unwrap();
        let (lo, hi) = if s < t { (s, t) } else { (t, s) };
        let (a, b) = (r_a - 1.0 + lo * (w + 2.0), r_a - 1.0 + hi * (w + 2.0));
        prop_assert!((0.0..=1.0).contains(&p.value(a)));
        prop_assert!(p.value(a) <= p.value(b) + 1e-15);
        prop_assert!(p.derivative(a) >= -1e-12);
    }

    #[test]
    fn cauchy_born_is_frame_indifferent(theta in -3.2f64..3.2, g in prop::array::uniform4(-0.05f64..0.05)) {
        let cb = CauchyBorn::new(EamParams::default());
        let f = Matrix2::identity() + Matrix2::new(g[0], g[1], g[2], g[3]);
        let (c, s) = (theta.cos(), theta.sin());
        let q = Matrix2::new(c, -s, s, c);
        let (w, p) = cb.eval(&f).unwrap();
        let (wq, pq) = cb.eval(&(q * f)).unwrap();
        prop_assert!((w - wq).abs() < 1e-12);
        prop_assert!((q * p - pq).norm() < 1e-10);
    }

    #[test]
    fn scalar_density_is_even(gx in -0.4f64..0.4, gy in -0.4f64..0.4) {
        let lat = build_lattice(&LatticeSpec::new(Region::Hexagon { layers: 1 }, 0)).unwrap();
        let cb = ScalarCauchyBorn::new(&lat);
        let g = Vector2::new(gx, gy);
        let (w, p) = cb.eval(&g);
        let (wm, pm) = cb.eval(&-g);
        prop_assert!((w - wm).abs() < 1e-12);
        prop_assert!((p + pm).norm() < 1e-12);
    }
}

#[test]
fn method_names_round_trip() {
    for m in [Method::Atm, Method::Bqce, Method::Bqcf, Method::Bgfc] {
        assert_eq!(Method::from_str(&m.to_string()).unwrap(), m);
        assert_eq!(Method::from_str(&m.to_string().to_lowercase()).unwrap(), m);
    }
    assert!(Method::from_str("qnl").is_err());
}
