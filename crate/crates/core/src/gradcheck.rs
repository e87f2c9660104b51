//! Gradient oracles independent of the analytic gradients: central finite
//! differences and forward-mode dual numbers.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every `i`.
pub fn central_difference<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut theta = point.to_vec();
    (0..point.len())
        .map(|i| {
            theta[i] = point[i] + h;
            let up = f(&theta);
            theta[i] = point[i] - h;
            let down = f(&theta);
            theta[i] = point[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`; falls back to the absolute difference when
/// both vectors are below `1e-8` in max-norm.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// First-order dual number `v + d ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Self { v, d: 0.0 }
    }

    pub fn variable(v: f64) -> Self {
        Self { v, d: 1.0 }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        Self { v: e, d: self.d * e }
    }

    pub fn ln(self) -> Self {
        Self {
            v: self.v.ln(),
            d: self.d / self.v,
        }
    }

    pub fn scale(self, s: f64) -> Self {
        Self {
            v: self.v * s,
            d: self.d * s,
        }
    }

    /// Log-sum-exp with max shift.
    pub fn logsumexp(xs: &[Dual]) -> Dual {
        let m = xs.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.v));
        let shift = Dual::constant(m);
        let s = xs
            .iter()
            .fold(Dual::constant(0.0), |acc, &x| acc + (x - shift).exp());
        s.ln() + shift
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: -self.d,
        }
    }
}

/// Full gradient of `f` by one forward-mode pass per coordinate.
pub fn dual_gradient<F>(f: F, point: &[f64]) -> Vec<f64>
where
    F: Fn(&[Dual]) -> Dual,
{
    (0..point.len())
        .map(|i| {
            let args: Vec<Dual> = point
                .iter()
                .enumerate()
                .map(|(j, &v)| if i == j { Dual::variable(v) } else { Dual::constant(v) })
                .collect();
            f(&args).d
        })
        .collect()
}
