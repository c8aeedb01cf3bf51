//! Collocation bases: interpolation conditions, reproduction and quadrature.

use dircol::basis::*;
use proptest::prelude::*;

fn family(gauss: bool) -> PointFamily {
    if gauss {
        PointFamily::GaussLegendre
    } else {
        PointFamily::RadauIIA
    }
}

/// Interpolation nodes `0, τ_1..τ_d`.
fn nodes(s: &CollocationScheme) -> Vec<f64> {
    std::iter::once(0.0).chain(s.points().iter().copied()).collect()
}

proptest! {
    #[test]
    fn semi_hermite_conditions(d in 1usize..=6, gauss in any::<bool>()) {
        let s = CollocationScheme::new(family(gauss), d).unwrap();
        let b = semi_hermite_basis(&s).unwrap();
        let nodes = nodes(&s);
        for j in 0..=d {
            for (i, &t) in nodes.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((b.poly(j).eval(t) - expected).abs() < 1e-12);
            }
            prop_assert!(b.poly(j).deriv(0.0).abs() < 1e-12);
        }
        for &t in &nodes {
            prop_assert!(b.velocity().eval(t).abs() < 1e-12);
        }
        prop_assert!((b.velocity().deriv(0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn semi_hermite_reproduces_monomials(d in 1usize..=5, gauss in any::<bool>(), t in 0.0f64..=1.0) {
        let s = CollocationScheme::new(family(gauss), d).unwrap();
        let b = semi_hermite_basis(&s).unwrap();
        let nodes = nodes(&s);
        for m in 0..=(d + 1) as i32 {
            let slope0 = if m == 1 { 1.0 } else { 0.0 };
            let rebuilt: f64 = nodes.iter().enumerate().map(|(j, &x)| x.powi(m) * b.poly(j).eval(t)).sum::<f64>()
                + slope0 * b.velocity().eval(t);
            prop_assert!((rebuilt - t.powi(m)).abs() < 1e-10, "m={} t={}", m, t);
        }
    }

    #[test]
    fn lagrange_partition_of_unity(d in 1usize..=6, gauss in any::<bool>(), t in 0.0f64..=1.0) {
        let s = CollocationScheme::new(family(gauss), d).unwrap();
        let b = lagrange_basis(&s);
        let total: f64 = (0..b.len()).map(|j| b.poly(j).eval(t)).sum();
        prop_assert!((total - 1.0).abs() < 1e-11);
        let slope: f64 = (0..b.len()).map(|j| b.poly(j).deriv(t)).sum();
        prop_assert!(slope.abs() < 1e-9);
    }

    /// Gauss quadrature is exact to degree `2d − 1`, Radau IIA to `2d − 2`.
    #[test]
    fn quadrature_exactness(d in 1usize..=6, gauss in any::<bool>()) {
        let f = family(gauss);
        let s = CollocationScheme::new(f, d).unwrap();
        let w = quadrature_weights(&s);
        let top = f.expected_order(d) - 1;
        for m in 0..=top as i32 {
            let q: f64 = s.points().iter().zip(&w).map(|(t, w)| w * t.powi(m)).sum();
            prop_assert!((q - 1.0 / (m as f64 + 1.0)).abs() < 1e-12, "degree {}", m);
        }
        let m = top as i32 + 1;
        let q: f64 = s.points().iter().zip(&w).map(|(t, w)| w * t.powi(m)).sum();
        prop_assert!((q - 1.0 / (m as f64 + 1.0)).abs() > 1e-8, "unexpectedly exact at degree {}", m);
    }
}

#[test]
fn points_are_sorted_in_unit_interval() {
    for d in 1..=MAX_ORDER {
        for f in [PointFamily::GaussLegendre, PointFamily::RadauIIA] {
            let p = collocation_points(f, d).unwrap();
            assert_eq!(p.len(), d);
            assert!(p.windows(2).all(|w| w[0] < w[1]));
            assert!(p[0] > 0.0 && p[d - 1] <= 1.0);
            assert_eq!(p[d - 1] == 1.0, f == PointFamily::RadauIIA);
            for &t in &p {
                assert!(defining_residual(f, d, t).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gauss_points_are_symmetric() {
    for d in 1..=MAX_ORDER {
        let p = collocation_points(PointFamily::GaussLegendre, d).unwrap();
        for i in 0..d {
            assert!((p[i] + p[d - 1 - i] - 1.0).abs() < 1e-14);
        }
    }
}
