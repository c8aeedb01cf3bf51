//! Collocation points and the two polynomial bases used on the unit interval.
//!
//! Every basis polynomial is stored as monomial coefficients in `τ ∈ [0, 1]`.
//! The standard (state-augmented) method interpolates on the nodes
//! `{0, τ_1, ..., τ_d}` with a Lagrange basis. The position-based method uses a
//! semi-Hermite basis of degree `d + 1`: Lagrange-type conditions on the same
//! nodes plus one derivative condition at `τ = 0`.
//!
//! The node `τ_0 = 0` only anchors interpolation; dynamics are enforced at
//! `τ_1..τ_d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported collocation order.
pub const MAX_ORDER: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointFamily {
    #[serde(rename = "gauss", alias = "legendre", alias = "gauss-legendre")]
    GaussLegendre,
    #[serde(rename = "radau", alias = "radau-iia")]
    RadauIIA,
}

impl PointFamily {
    /// Global order of accuracy of the collocation method with `d` points.
    pub fn expected_order(self, d: usize) -> usize {
        match self {
            PointFamily::GaussLegendre => 2 * d,
            PointFamily::RadauIIA => 2 * d - 1,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            PointFamily::GaussLegendre => "gauss",
            PointFamily::RadauIIA => "radau",
        }
    }
}

impl std::fmt::Display for PointFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

impl std::str::FromStr for PointFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gauss" | "legendre" | "gauss-legendre" | "gausslegendre" | "gl" => {
                Ok(PointFamily::GaussLegendre)
            }
            "radau" | "radau-iia" | "radauiia" | "r" => Ok(PointFamily::RadauIIA),
            other => Err(Error::Config(format!("unknown point family `{other}`"))),
        }
    }
}

/// Order `d`, point family and the collocation points `τ_1 < ... < τ_d` in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationScheme {
    family: PointFamily,
    tau: Vec<f64>,
}

impl CollocationScheme {
    pub fn new(family: PointFamily, d: usize) -> Result<Self> {
        let tau = collocation_points(family, d)?;
        Ok(Self { family, tau })
    }

    pub fn family(&self) -> PointFamily {
        self.family
    }

    pub fn order(&self) -> usize {
        self.tau.len()
    }

    pub fn points(&self) -> &[f64] {
        &self.tau
    }

    /// Interpolation nodes `{0, τ_1, ..., τ_d}`.
    pub fn nodes(&self) -> Vec<f64> {
        std::iter::once(0.0).chain(self.tau.iter().copied()).collect()
    }
}

/// Legendre polynomial `P_n(x)` and its derivative by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, x);
    let (mut dp_prev, mut dp) = (0.0, 1.0);
    for k in 1..n {
        let kf = k as f64;
        let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        let dp_next = dp_prev + (2.0 * kf + 1.0) * p;
        p_prev = p;
        p = p_next;
        dp_prev = dp;
        dp = dp_next;
    }
    (p, dp)
}

/// Defining polynomial of the family on `x ∈ [-1, 1]`, with its derivative.
///
/// Gauss-Legendre points are the roots of `P_d`; Radau IIA points are the roots
/// of `P_d - P_{d-1}` (which vanishes at `x = 1`).
fn defining_polynomial(family: PointFamily, d: usize, x: f64) -> (f64, f64) {
    let (p, dp) = legendre(d, x);
    match family {
        PointFamily::GaussLegendre => (p, dp),
        PointFamily::RadauIIA => {
            let (q, dq) = legendre(d - 1, x);
            (p - q, dp - dq)
        }
    }
}

/// Residual of the family's defining polynomial at `τ` (shifted to `[0, 1]`).
pub fn defining_residual(family: PointFamily, d: usize, tau: f64) -> f64 {
    defining_polynomial(family, d, 2.0 * tau - 1.0).0
}

/// Collocation points `τ_1..τ_d` for the given family, strictly increasing in `(0, 1]`.
///
/// Roots are bracketed by a sign-change scan, refined by bisection and
/// polished with Newton steps on the defining Legendre combination.
pub fn collocation_points(family: PointFamily, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d > MAX_ORDER {
        return Err(Error::UnsupportedOrder(d));
    }
    let f = |x: f64| defining_polynomial(family, d, x).0;

    // Radau's root at x = 1 is fixed exactly and excluded from the scan.
    let upper = match family {
        PointFamily::GaussLegendre => 1.0,
        PointFamily::RadauIIA => 1.0 - 1e-9,
    };
    let samples = 4000 * d;
    let mut roots = Vec::with_capacity(d);
    let mut a = -1.0;
    let mut fa = f(a);
    for s in 1..=samples {
        let b = -1.0 + (upper + 1.0) * s as f64 / samples as f64;
        let fb = f(b);
        if fa == 0.0 {
            roots.push(a);
        } else if fa * fb < 0.0 {
            roots.push(refine_root(&f, family, d, a, b));
        }
        a = b;
        fa = fb;
    }
    if family == PointFamily::RadauIIA {
        roots.push(1.0);
    }
    if roots.len() != d {
        return Err(Error::InvalidPoints(format!(
            "found {} roots for {family} order {d}",
            roots.len()
        )));
    }
    let mut tau: Vec<f64> = roots.into_iter().map(|x| 0.5 * (x + 1.0)).collect();
    if family == PointFamily::GaussLegendre {
        // Gauss points are symmetric about 1/2; enforce it to the last bit.
        for i in 0..d / 2 {
            let j = d - 1 - i;
            let mid = 0.5 * (tau[i] + (1.0 - tau[j]));
            tau[i] = mid;
            tau[j] = 1.0 - mid;
        }
        if d % 2 == 1 {
            tau[d / 2] = 0.5;
        }
    }
    validate_points(family, &tau)?;
    Ok(tau)
}

fn refine_root(f: &impl Fn(f64) -> f64, family: PointFamily, d: usize, mut a: f64, mut b: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fa * fm < 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    let mut x = 0.5 * (a + b);
    for _ in 0..3 {
        let (p, dp) = defining_polynomial(family, d, x);
        if dp == 0.0 {
            break;
        }
        let next = x - p / dp;
        if !(a - 1e-12..=b + 1e-12).contains(&next) {
            break;
        }
        x = next;
    }
    x
}

fn validate_points(family: PointFamily, tau: &[f64]) -> Result<()> {
    for w in tau.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidPoints("points not strictly increasing".into()));
        }
    }
    if tau.iter().any(|&t| t <= 0.0 || t > 1.0) {
        return Err(Error::InvalidPoints("points must lie in (0, 1]".into()));
    }
    if family == PointFamily::RadauIIA && *tau.last().unwrap() != 1.0 {
        return Err(Error::InvalidPoints("Radau IIA must end at 1".into()));
    }
    Ok(())
}

/// A polynomial kept as a sum of scaled products of linear factors,
/// `Σ_k c_k Π_r (τ − r_kr)`.
///
/// The factored form keeps interpolation conditions exact to rounding where
/// monomial coefficients of bases over `[0, 1]` grow quickly with the degree.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    terms: Vec<(f64, Vec<f64>)>,
}

/// Value, first and second derivative.
type Jet = [f64; 3];

fn jet_mul(a: Jet, b: Jet) -> Jet {
    [a[0] * b[0], a[1] * b[0] + a[0] * b[1], a[2] * b[0] + 2.0 * a[1] * b[1] + a[0] * b[2]]
}

impl Poly {
    /// `scale · Π (τ − r)` over `roots`.
    pub fn product(scale: f64, roots: Vec<f64>) -> Self {
        Self {
            terms: vec![(scale, roots)],
        }
    }

    /// `a p + b q`.
    pub fn combine(a: f64, p: &Poly, b: f64, q: &Poly) -> Self {
        let mut terms: Vec<(f64, Vec<f64>)> = p.terms.iter().map(|(c, r)| (a * c, r.clone())).collect();
        terms.extend(q.terms.iter().map(|(c, r)| (b * c, r.clone())));
        Self { terms }
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(|t| t.1.len()).max().unwrap_or(0)
    }

    fn jet(&self, tau: f64) -> Jet {
        let mut out = [0.0; 3];
        for (c, roots) in &self.terms {
            let j = roots.iter().fold([*c, 0.0, 0.0], |acc, r| jet_mul(acc, [tau - r, 1.0, 0.0]));
            for k in 0..3 {
                out[k] += j[k];
            }
        }
        out
    }

    /// Value (`order` 0) or derivative of order 1 or 2 at `tau`.
    pub fn eval_order(&self, tau: f64, order: usize) -> f64 {
        assert!(order <= 2, "only derivatives up to order 2 are supported");
        self.jet(tau)[order]
    }

    pub fn eval(&self, tau: f64) -> f64 {
        self.jet(tau)[0]
    }

    pub fn deriv(&self, tau: f64) -> f64 {
        self.jet(tau)[1]
    }

    pub fn deriv2(&self, tau: f64) -> f64 {
        self.jet(tau)[2]
    }

    /// Integral over `[0, 1]`, by a Gauss-Legendre rule exact for the degree.
    pub fn integral_unit(&self) -> f64 {
        let m = self.degree() / 2 + 1;
        let nodes = collocation_points(PointFamily::GaussLegendre, m).expect("degree within supported range");
        nodes
            .iter()
            .map(|&t| {
                let dp = legendre(m, 2.0 * t - 1.0).1;
                self.eval(t) / (4.0 * t * (1.0 - t) * dp * dp)
            })
            .sum()
    }

    /// Monomial coefficients `c[0] + c[1] τ + ...`.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.degree() + 1];
        for (c, roots) in &self.terms {
            let mut poly = vec![*c];
            for &r in roots {
                poly = mul_linear(&poly, r, 1.0);
            }
            for (o, p) in out.iter_mut().zip(&poly) {
                *o += p;
            }
        }
        out
    }
}

/// Multiplies a monomial polynomial by `(τ - root) / scale`.
fn mul_linear(coeffs: &[f64], root: f64, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; coeffs.len() + 1];
    for (k, &c) in coeffs.iter().enumerate() {
        out[k + 1] += c / scale;
        out[k] -= c * root / scale;
    }
    out
}

/// Lagrange polynomials over arbitrary distinct nodes.
fn lagrange_polys(nodes: &[f64]) -> Vec<Poly> {
    (0..nodes.len())
        .map(|i| {
            let others: Vec<f64> = nodes.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &t)| t).collect();
            let scale = others.iter().map(|t| (nodes[i] - t).recip()).product();
            Poly::product(scale, others)
        })
        .collect()
}

/// Lagrange basis `p_0..p_d` over the nodes `{0, τ_1, ..., τ_d}`.
#[derive(Debug, Clone)]
pub struct LagrangeBasis {
    nodes: Vec<f64>,
    polys: Vec<Poly>,
}

impl LagrangeBasis {
    pub fn new(scheme: &CollocationScheme) -> Self {
        let nodes = scheme.nodes();
        Self {
            polys: lagrange_polys(&nodes),
            nodes,
        }
    }

    /// Collocation points `τ_1..τ_d`.
    pub fn points(&self) -> &[f64] {
        &self.nodes[1..]
    }

    /// Polynomial `p_i`, `i ∈ 0..=d`.
    pub fn poly(&self, i: usize) -> &Poly {
        &self.polys[i]
    }

    pub fn len(&self) -> usize {
        self.polys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polys.is_empty()
    }
}

pub fn lagrange_basis(scheme: &CollocationScheme) -> LagrangeBasis {
    LagrangeBasis::new(scheme)
}

/// Semi-Hermite basis `p*_0..p*_d, p*_v` of degree `d + 1`.
///
/// `p*_i(τ_{i'}) = δ_{ii'}` and `ṗ*_i(0) = 0` for `i ∈ 0..=d`;
/// `p*_v(τ_i) = 0` for all nodes and `ṗ*_v(0) = 1`.
#[derive(Debug, Clone)]
pub struct SemiHermiteBasis {
    nodes: Vec<f64>,
    polys: Vec<Poly>,
    velocity: Poly,
}

impl SemiHermiteBasis {
    pub fn new(scheme: &CollocationScheme) -> Result<Self> {
        let nodes = scheme.nodes();
        // p*_v = τ ω(τ) / ω(0) with ω = Π (τ − τ_i): zero at every node, unit slope at 0.
        let scale: f64 = nodes[1..].iter().map(|t| (-t).recip()).product();
        if !scale.is_finite() {
            return Err(Error::SingularBasis("semi-Hermite"));
        }
        let velocity = Poly::product(scale, nodes.clone());
        // p*_i = ℓ_i − ℓ̇_i(0) p*_v with ℓ_i the Lagrange polynomial over all nodes.
        let polys = lagrange_polys(&nodes)
            .into_iter()
            .map(|l| Poly::combine(1.0, &l, -l.deriv(0.0), &velocity))
            .collect();
        Ok(Self { nodes, polys, velocity })
    }

    /// Collocation points `τ_1..τ_d`.
    pub fn points(&self) -> &[f64] {
        &self.nodes[1..]
    }

    /// Polynomial `p*_i`, `i ∈ 0..=d`.
    pub fn poly(&self, i: usize) -> &Poly {
        &self.polys[i]
    }

    /// Polynomial `p*_v`.
    pub fn velocity(&self) -> &Poly {
        &self.velocity
    }

    /// Number of node polynomials (`d + 1`).
    pub fn len(&self) -> usize {
        self.polys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polys.is_empty()
    }
}

pub fn semi_hermite_basis(scheme: &CollocationScheme) -> Result<SemiHermiteBasis> {
    SemiHermiteBasis::new(scheme)
}

/// Quadrature weights `b_i = ∫₀¹ ℓ_i(τ) dτ` for the Lagrange polynomials over
/// the collocation points alone (without `τ_0`).
pub fn quadrature_weights(scheme: &CollocationScheme) -> Vec<f64> {
    lagrange_polys(scheme.points())
        .iter()
        .map(Poly::integral_unit)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    fn scheme(family: PointFamily, d: usize) -> CollocationScheme {
        CollocationScheme::new(family, d).unwrap()
    }

    #[test]
    fn radau_one_is_right_endpoint() {
        assert_eq!(collocation_points(PointFamily::RadauIIA, 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn radau_two_matches_figure_roots() {
        let t = collocation_points(PointFamily::RadauIIA, 2).unwrap();
        assert_abs_diff_eq!(t[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_eq!(t[1], 1.0);
    }

    #[test]
    fn gauss_two_against_bisection_oracle() {
        // shifted Legendre of degree 2: 6τ² - 6τ + 1
        let p = |t: f64| 6.0 * t * t - 6.0 * t + 1.0;
        let bisect = |mut a: f64, mut b: f64| {
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if p(a) * p(m) <= 0.0 {
                    b = m
                } else {
                    a = m
                }
            }
            0.5 * (a + b)
        };
        let oracle = [bisect(0.0, 0.5), bisect(0.5, 1.0)];
        let t = collocation_points(PointFamily::GaussLegendre, 2).unwrap();
        assert_abs_diff_eq!(t[0], oracle[0], epsilon = 1e-14);
        assert_abs_diff_eq!(t[1], oracle[1], epsilon = 1e-14);
        assert_abs_diff_eq!(t[0], (3.0 - 3f64.sqrt()) / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn tabulated_points_up_to_five() {
        // Frozen from a 40-digit polynomial root finder.
        let gauss: [&[f64]; 5] = [
            &[0.5],
            &[0.211_324_865_405_187_1, 0.788_675_134_594_812_9],
            &[0.112_701_665_379_258_31, 0.5, 0.887_298_334_620_741_7],
            &[0.069_431_844_202_973_71, 0.330_009_478_207_571_87, 0.669_990_521_792_428_1, 0.930_568_155_797_026_3],
            &[0.046_910_077_030_668_004, 0.230_765_344_947_158_45, 0.5, 0.769_234_655_052_841_5, 0.953_089_922_969_332],
        ];
        let radau: [&[f64]; 5] = [
            &[1.0],
            &[0.333_333_333_333_333_3, 1.0],
            &[0.155_051_025_721_682_2, 0.644_948_974_278_317_8, 1.0],
            &[0.088_587_959_512_703_94, 0.409_466_864_440_734_7, 0.787_659_461_760_847, 1.0],
            &[0.057_104_196_114_517_68, 0.276_843_013_638_123_8, 0.583_590_432_368_916_8, 0.860_240_135_656_219_5, 1.0],
        ];
        for d in 1..=5 {
            let g = collocation_points(PointFamily::GaussLegendre, d).unwrap();
            let r = collocation_points(PointFamily::RadauIIA, d).unwrap();
            for i in 0..d {
                assert_abs_diff_eq!(g[i], gauss[d - 1][i], epsilon = 1e-14);
                assert_abs_diff_eq!(r[i], radau[d - 1][i], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn defining_residuals_vanish_for_all_supported_orders() {
        for family in [PointFamily::GaussLegendre, PointFamily::RadauIIA] {
            for d in 1..=MAX_ORDER {
                let t = collocation_points(family, d).unwrap();
                assert_eq!(t.len(), d);
                for &ti in &t {
                    assert!(defining_residual(family, d, ti).abs() < 1e-12, "{family} d={d} τ={ti}");
                }
                if family == PointFamily::GaussLegendre {
                    for i in 0..d {
                        assert_abs_diff_eq!(t[i] + t[d - 1 - i], 1.0, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn order_out_of_range_is_rejected() {
        assert_eq!(collocation_points(PointFamily::GaussLegendre, 0), Err(Error::UnsupportedOrder(0)));
        assert!(collocation_points(PointFamily::RadauIIA, 11).is_err());
    }

    #[test]
    fn lagrange_linear_hat() {
        let b = lagrange_basis(&scheme(PointFamily::RadauIIA, 1));
        assert_abs_diff_eq!(b.poly(0).coefficients()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.poly(0).coefficients()[1], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.poly(1).coefficients()[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.poly(0).eval(0.5), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn lagrange_radau_two_against_vandermonde_oracle() {
        let b = lagrange_basis(&scheme(PointFamily::RadauIIA, 2));
        let nodes: [f64; 3] = [0.0, 1.0 / 3.0, 1.0];
        let v = DMatrix::from_fn(3, 3, |r, c| nodes[r].powi(c as i32));
        let oracle = v.lu().solve(&DVector::from_vec(vec![0.0, 0.0, 1.0])).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(b.poly(2).coefficients()[k], oracle[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn semi_hermite_order_one_closed_form() {
        let b = semi_hermite_basis(&scheme(PointFamily::RadauIIA, 1)).unwrap();
        let expect = [
            (b.poly(0), [1.0, 0.0, -1.0]),
            (b.poly(1), [0.0, 0.0, 1.0]),
            (b.velocity(), [0.0, 1.0, -1.0]),
        ];
        for (p, c) in expect {
            for k in 0..3 {
                assert_abs_diff_eq!(p.coefficients()[k], c[k], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn semi_hermite_conditions_radau_two() {
        let s = scheme(PointFamily::RadauIIA, 2);
        let b = semi_hermite_basis(&s).unwrap();
        let nodes = s.nodes();
        for i in 0..=2 {
            for (ip, &t) in nodes.iter().enumerate() {
                let want = if i == ip { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(b.poly(i).eval(t), want, epsilon = 1e-12);
            }
            assert_abs_diff_eq!(b.poly(i).deriv(0.0), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(b.velocity().eval(nodes[i]), 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(b.velocity().deriv(0.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn quadrature_weights_match_gauss_two() {
        let w = quadrature_weights(&scheme(PointFamily::GaussLegendre, 2));
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-14);
    }
}
