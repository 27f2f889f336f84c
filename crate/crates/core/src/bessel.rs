//! Bessel functions of integer and half-integer order for positive arguments.
//!
//! `J_ν` uses Miller's downward recurrence with a closed-form normalization,
//! `I_ν` its power series, and `K_ν` trapezoidal quadrature of
//! `∫₀^∞ exp(−x cosh t) cosh(νt) dt`, which converges exponentially because
//! the integrand is analytic in a strip.

use std::f64::consts::PI;

fn twice_order(nu: f64) -> usize {
    let two = 2.0 * nu;
    assert!(
        nu >= 0.0 && (two - two.round()).abs() < 1e-12,
        "order {nu} is not a nonnegative integer or half-integer"
    );
    two.round() as usize
}

/// Bessel function of the first kind `J_ν(x)`, `x ≥ 0`, for integer or
/// half-integer `ν ≥ 0`.
pub fn bessel_j(nu: f64, x: f64) -> f64 {
    let two = twice_order(nu);
    if x == 0.0 {
        return if two == 0 { 1.0 } else { 0.0 };
    }
    if two.is_multiple_of(2) {
        bessel_j_int(two / 2, x)
    } else {
        let l = (two - 1) / 2;
        (2.0 * x / PI).sqrt() * spherical_j(l, x)
    }
}

/// `dJ_ν/dx = (ν/x) J_ν − J_{ν+1}`.
pub fn bessel_j_deriv(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return match twice_order(nu) {
            2 => 0.5,
            1 => f64::INFINITY,
            _ => 0.0,
        };
    }
    nu / x * bessel_j(nu, x) - bessel_j(nu + 1.0, x)
}

fn bessel_j_int(n: usize, x: f64) -> f64 {
    // Miller: recur downward from a start well beyond max(n, x)
    let big = (n as f64).max(x);
    let mut start = (big + 30.0 + (50.0 * big).sqrt()) as usize;
    start += start % 2;
    let (mut next, mut cur) = (0.0f64, 1e-300f64);
    let mut norm = 0.0;
    let mut result = 0.0;
    for k in (1..=start).rev() {
        let prev = 2.0 * k as f64 / x * cur - next;
        next = cur;
        cur = prev;
        // cur now holds the unnormalized J_{k-1}
        if k - 1 == n {
            result = cur;
        }
        if (k - 1) % 2 == 0 && k - 1 > 0 {
            norm += 2.0 * cur;
        }
        if cur.abs() > 1e250 {
            cur *= 1e-250;
            next *= 1e-250;
            result *= 1e-250;
            norm *= 1e-250;
        }
    }
    norm += cur;
    result / norm
}

/// Spherical Bessel function `j_l(x)`.
pub fn spherical_j(l: usize, x: f64) -> f64 {
    if x < 1.0 {
        return spherical_j_series(l, x);
    }
    let j0 = x.sin() / x;
    let j1 = x.sin() / (x * x) - x.cos() / x;
    match l {
        0 => return j0,
        1 => return j1,
        _ => {}
    }
    if x > l as f64 {
        let (mut a, mut b) = (j0, j1);
        for k in 1..l {
            let c = (2 * k + 1) as f64 / x * b - a;
            a = b;
            b = c;
        }
        return b;
    }
    let start = l + 30 + (50.0 * l as f64).sqrt() as usize;
    let (mut next, mut cur) = (0.0f64, 1e-300f64);
    let mut at_l = 0.0;
    let mut at_1 = 0.0;
    for k in (1..=start).rev() {
        // j_{k-1} = (2k+1)/x j_k − j_{k+1}
        let prev = (2 * k + 1) as f64 / x * cur - next;
        next = cur;
        cur = prev;
        if k - 1 == l {
            at_l = cur;
        }
        if k - 1 == 1 {
            at_1 = cur;
        }
        if cur.abs() > 1e250 {
            cur *= 1e-250;
            next *= 1e-250;
            at_l *= 1e-250;
            at_1 *= 1e-250;
        }
    }
    // normalize against whichever closed form is better conditioned
    if j0.abs() >= j1.abs() {
        at_l * j0 / cur
    } else {
        at_l * j1 / at_1
    }
}

fn spherical_j_series(l: usize, x: f64) -> f64 {
    let mut lead = 1.0;
    for k in 0..l {
        lead *= x / (2 * k + 3) as f64;
    }
    let q = -0.5 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..40 {
        term *= q / (k as f64 * (2 * l + 2 * k + 1) as f64);
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    lead * sum
}

/// Γ(ν + 1) for integer or half-integer ν ≥ 0.
fn gamma_order_plus_one(nu: f64) -> f64 {
    let two = twice_order(nu);
    let (mut g, mut a) = if two.is_multiple_of(2) {
        (1.0, 1.0)
    } else {
        (PI.sqrt() / 2.0, 1.5)
    };
    while a < nu + 1.0 - 1e-12 {
        g *= a;
        a += 1.0;
    }
    g
}

/// Modified Bessel function of the first kind `I_ν(x)` by its power series,
/// all of whose terms are positive. Intended for `0 ≤ x ≤ 100`.
pub fn bessel_i(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return if nu == 0.0 { 1.0 } else { 0.0 };
    }
    let half = 0.5 * x;
    let mut term = half.powf(nu) / gamma_order_plus_one(nu);
    let mut sum = term;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= half * half / (k * (k + nu));
        sum += term;
        if term < 1e-17 * sum && k > half {
            break;
        }
    }
    sum
}

/// Exponentially scaled modified Bessel function of the second kind,
/// `eˣ K_ν(x)`, for `x > 0`.
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "K_nu requires a positive argument");
    twice_order(nu);
    let h = 0.1 * (2.5 / x.sqrt()).min(1.0);
    // integrand e^{−x(cosh t − 1)} cosh(νt); trapezoid rule on [0, ∞)
    let f = |t: f64| (-x * (t.cosh() - 1.0)).exp() * (nu * t).cosh();
    let mut sum = 0.5 * f(0.0);
    let mut k = 1.0;
    loop {
        let t = k * h;
        let v = f(t);
        sum += v;
        let decreasing = x * t.sinh() > nu;
        if decreasing && v < 1e-18 * sum {
            break;
        }
        k += 1.0;
    }
    h * sum
}

/// Modified Bessel function of the second kind `K_ν(x)`.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    bessel_k_scaled(nu, x) * (-x).exp()
}

/// `eˣ dK_ν/dx = eˣ((ν/x) K_ν − K_{ν+1})`.
pub fn bessel_k_deriv_scaled(nu: f64, x: f64) -> f64 {
    nu / x * bessel_k_scaled(nu, x) - bessel_k_scaled(nu + 1.0, x)
}

/// First `count` positive zeros of `J_ν` (integer ν), by bracketing on a
/// fine grid followed by bisection to machine precision.
pub fn bessel_j_zeros(nu: f64, count: usize) -> Vec<f64> {
    let mut zeros = Vec::with_capacity(count);
    let step = 0.1;
    let mut a = 1e-3 + nu;
    let mut fa = bessel_j(nu, a);
    while zeros.len() < count {
        let b = a + step;
        let fb = bessel_j(nu, b);
        if fa == 0.0 {
            zeros.push(a);
        } else if fa * fb < 0.0 {
            zeros.push(bisect(|x| bessel_j(nu, x), a, b, fa));
        }
        a = b;
        fa = fb;
    }
    zeros
}

/// Bisection for a sign change of `f` on [a, b] with `f(a) = fa`.
pub(crate) fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal double-double arithmetic for the brute-force series oracle.
    #[derive(Clone, Copy, Debug)]
    struct Dd(f64, f64);

    impl Dd {
        fn from(x: f64) -> Self {
            Dd(x, 0.0)
        }
        fn two_sum(a: f64, b: f64) -> (f64, f64) {
            let s = a + b;
            let bb = s - a;
            (s, (a - (s - bb)) + (b - bb))
        }
        fn add(self, o: Dd) -> Dd {
            let (s, e) = Dd::two_sum(self.0, o.0);
            let e = e + self.1 + o.1;
            let (s, e) = Dd::two_sum(s, e);
            Dd(s, e)
        }
        fn mul(self, o: Dd) -> Dd {
            let p = self.0 * o.0;
            let e = self.0.mul_add(o.0, -p);
            let e = e + self.0 * o.1 + self.1 * o.0;
            let (s, e) = Dd::two_sum(p, e);
            Dd(s, e)
        }
        fn div(self, o: Dd) -> Dd {
            let q1 = self.0 / o.0;
            let r = self.add(o.mul(Dd::from(-q1)));
            let q2 = r.0 / o.0;
            let r = r.add(o.mul(Dd::from(-q2)));
            let q3 = r.0 / o.0;
            Dd::from(q1).add(Dd::from(q2)).add(Dd::from(q3))
        }
    }

    /// Σ (∓1)^k (x/2)^{2k+ν} / (k! Γ(k+ν+1)) in double-double precision;
    /// `sign = -1` gives J_ν, `+1` gives I_ν. Half-integer orders use
    /// Γ(ν+1) = √π (2l+1)!!/2^{l+1}, whose √π is supplied in double-double.
    fn series_oracle(nu: f64, x: f64, sign: f64) -> f64 {
        let two = (2.0 * nu).round() as usize;
        let half = Dd::from(x).div(Dd::from(2.0));
        let mut lead = Dd::from(1.0);
        let mut g = if two.is_multiple_of(2) {
            Dd::from(1.0)
        } else {
            // √π in double-double
            Dd(1.772_453_850_905_516, 2.788_612_982_238_232_7e-17).div(Dd::from(2.0))
        };
        let mut a = if two.is_multiple_of(2) { 1.0 } else { 1.5 };
        while a < nu + 1.0 - 1e-12 {
            g = g.mul(Dd::from(a));
            a += 1.0;
        }
        if two.is_multiple_of(2) {
            for _ in 0..two / 2 {
                lead = lead.mul(half);
            }
        } else {
            for _ in 0..two / 2 {
                lead = lead.mul(half);
            }
            let s = (x / 2.0).sqrt();
            // refine √(x/2) by one Newton step in double-double
            let sd = Dd::from(s);
            let corr = half.add(sd.mul(sd).mul(Dd::from(-1.0))).div(Dd::from(2.0 * s));
            lead = lead.mul(sd.add(corr));
        }
        let mut term = lead.div(g);
        let mut sum = term;
        let q = half.mul(half).mul(Dd::from(sign));
        for k in 1..200 {
            term = term.mul(q).div(Dd::from(k as f64 * (k as f64 + nu)));
            sum = sum.add(term);
            if term.0.abs() < 1e-34 * sum.0.abs().max(1e-300) {
                break;
            }
        }
        sum.0 + sum.1
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn j_matches_double_double_series() {
        for &nu in &[0.0, 1.0, 2.0, 5.0, 0.5, 1.5, 2.5, 4.5] {
            for &x in &[0.05, 0.7, 1.3, 3.3, 6.1, 9.7, 14.2, 19.9] {
                let oracle = series_oracle(nu, x, -1.0);
                let got = bessel_j(nu, x);
                // relative to the local envelope √(2/(πx)) so zeros do not inflate the error
                let scale = oracle.abs().max((2.0 / (PI * x)).sqrt().min(1.0) * 1e-2);
                assert!((got - oracle).abs() / scale < 1e-12, "J_{nu}({x}): {got} vs {oracle}");
            }
        }
    }

    #[test]
    fn i_matches_double_double_series() {
        for &nu in &[0.0, 1.0, 3.0, 0.5, 2.5] {
            for &x in &[0.1, 1.0, 5.0, 12.0] {
                let oracle = series_oracle(nu, x, 1.0);
                assert!(rel(bessel_i(nu, x), oracle) < 1e-13, "I_{nu}({x})");
            }
        }
    }

    #[test]
    fn half_integer_closed_forms() {
        for &x in &[0.01, 0.3, 2.0, 7.5, 40.0] {
            let j = (2.0 / (PI * x)).sqrt() * x.sin();
            assert!((bessel_j(0.5, x) - j).abs() < 1e-14 * (1.0 + j.abs()));
            let k = (PI / (2.0 * x)).sqrt();
            assert!(rel(bessel_k_scaled(0.5, x), k) < 1e-13, "K_1/2({x})");
            let k32 = k * (1.0 + 1.0 / x);
            assert!(rel(bessel_k_scaled(1.5, x), k32) < 1e-13, "K_3/2({x})");
        }
    }

    #[test]
    fn wronskian_identity() {
        for &nu in &[0.0, 1.0, 2.0, 0.5, 3.5] {
            for &x in &[0.2, 1.0, 4.0, 11.0, 25.0] {
                let w = bessel_i(nu, x) * bessel_k(nu + 1.0, x) + bessel_i(nu + 1.0, x) * bessel_k(nu, x);
                assert!(rel(w, 1.0 / x) < 1e-12, "nu {nu} x {x}: {w}");
            }
        }
    }

    #[test]
    fn reference_values() {
        // reference values from 30-digit evaluation
        let cases = [
            (bessel_j(0.0, 2.5), -4.838_377_646_819_8e-2),
            (bessel_j(1.0, 10.0), 4.347_274_616_886_144e-2),
            (bessel_k(0.0, 1.0), 4.210_244_382_407_083_3e-1),
            (bessel_k(1.0, 2.0), 1.398_658_818_165_224_2e-1),
            (bessel_k_scaled(0.0, 300.0), 7.233_003_173_960_731e-2),
        ];
        for (got, want) in cases {
            assert!(rel(got, want) < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn j0_zeros() {
        let z = bessel_j_zeros(0.0, 5);
        let reference = [
            2.404_825_557_695_773,
            5.520_078_110_286_311,
            8.653_727_912_911_013,
            11.791_534_439_014_281,
            14.930_917_708_487_786,
        ];
        for (a, b) in z.iter().zip(reference) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn derivatives_by_finite_difference() {
        for &nu in &[0.0, 1.0, 0.5, 1.5] {
            for &x in &[0.8, 3.0, 9.0] {
                let d = 1e-5;
                let fd = (bessel_j(nu, x + d) - bessel_j(nu, x - d)) / (2.0 * d);
                assert!((bessel_j_deriv(nu, x) - fd).abs() < 1e-9);
                let fdk = (bessel_k(nu, x + d) - bessel_k(nu, x - d)) / (2.0 * d);
                assert!((bessel_k_deriv_scaled(nu, x) * (-x).exp() - fdk).abs() < 1e-9);
            }
        }
    }
}
