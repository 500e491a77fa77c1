//! Semi-analytic Heston call price by Fourier inversion of the
//! characteristic function. Test oracle only: it shares no code with the
//! finite-difference engine.

use num_complex::Complex64;

pub struct HestonCf {
    pub r: f64,
    pub kappa: f64,
    pub theta: f64,
    pub eta: f64,
    pub rho: f64,
}

impl HestonCf {
    /// `E[exp(i u ln S_T)]` in the "little trap" form, stable for long maturities.
    fn cf(&self, u: Complex64, s: f64, v: f64, t: f64) -> Complex64 {
        let i = Complex64::i();
        let (k, th, eta, rho) = (self.kappa, self.theta, self.eta, self.rho);
        let beta = k - rho * eta * i * u;
        let d = (beta * beta + eta * eta * (i * u + u * u)).sqrt();
        let g = (beta - d) / (beta + d);
        let e = (-d * t).exp();
        let c = i * u * (s.ln() + self.r * t)
            + k * th / (eta * eta) * ((beta - d) * t - 2.0 * ((1.0 - g * e) / (1.0 - g)).ln());
        let dd = (beta - d) / (eta * eta) * (1.0 - e) / (1.0 - g * e);
        (c + dd * v).exp()
    }

    pub fn call(&self, s: f64, v: f64, t: f64, strike: f64) -> f64 {
        let i = Complex64::i();
        let lk = strike.ln();
        let norm = self.cf(-i, s, v, t);
        let p1 = 0.5
            + integrate(|u| {
                let z = Complex64::new(u, 0.0);
                ((-i * z * lk).exp() * self.cf(z - i, s, v, t) / (i * z * norm)).re
            }) / std::f64::consts::PI;
        let p2 = 0.5
            + integrate(|u| {
                let z = Complex64::new(u, 0.0);
                ((-i * z * lk).exp() * self.cf(z, s, v, t) / (i * z)).re
            }) / std::f64::consts::PI;
        s * p1 - strike * (-self.r * t).exp() * p2
    }
}

/// Composite 5-point Gauss-Legendre on `(0, 250]`.
fn integrate(f: impl Fn(f64) -> f64) -> f64 {
    const X: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let (upper, panels) = (250.0, 1000);
    let h = upper / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * h;
        for (x, w) in X.iter().zip(W) {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    0.5 * h * total
}
