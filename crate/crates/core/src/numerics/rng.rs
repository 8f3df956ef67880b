//! Seeded, platform-stable random streams.
//!
//! The generator is xoshiro256++ with its state filled by SplitMix64 from a
//! (seed, stream id) pair, so two streams with the same seed are independent
//! and any (seed, stream) pair replays the same integer sequence on every
//! platform. Floating draws fill the 53-bit mantissa from the top bits of one
//! 64-bit output.

use crate::error::{Error, Result};

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic random stream identified by (seed, stream id).
#[derive(Clone, Debug)]
pub struct RngStream {
    state: [u64; 4],
    seed: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut sm = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut state = [0u64; 4];
        for s in &mut state {
            *s = splitmix64(&mut sm);
        }
        if state.iter().all(|&s| s == 0) {
            state[0] = 0x1234_5678_9ABC_DEF0;
        }
        RngStream { state, seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// xoshiro256++ output function.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Gamma(shape, 1) via Marsaglia–Tsang, with the shape boost for
    /// shape < 1 (required for Beta(0.2, 0.2) where naive rejection stalls).
    pub fn sample_gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0) {
            return Err(Error::InvalidParam(format!("gamma shape {shape}")));
        }
        if shape < 1.0 {
            let g = self.sample_gamma(shape + 1.0)?;
            let u = loop {
                let u = self.next_f64();
                if u > 0.0 {
                    break u;
                }
            };
            return Ok(g * u.powf(1.0 / shape));
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_f64();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return Ok(d * v);
            }
            if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return Ok(d * v);
            }
        }
    }

    /// Beta(a, b) as Ga/(Ga+Gb); result clamped into the open unit interval.
    pub fn sample_beta(&mut self, a: f64, b: f64) -> Result<f64> {
        if !(a > 0.0) || !(b > 0.0) {
            return Err(Error::InvalidParam(format!("beta params ({a}, {b})")));
        }
        let ga = self.sample_gamma(a)?;
        let gb = self.sample_gamma(b)?;
        let denom = ga + gb;
        if denom <= 0.0 {
            return Ok(0.5);
        }
        Ok((ga / denom).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_is_identical() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 1);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn beta_symmetric_mean() {
        let mut rng = RngStream::new(1, 0);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| rng.sample_beta(0.2, 0.2).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn beta_1_1_is_uniform_ks() {
        // Kolmogorov–Smirnov against U(0,1) at alpha = 0.01.
        let mut rng = RngStream::new(3, 0);
        let n = 10_000;
        let mut draws: Vec<f64> = (0..n).map(|_| rng.sample_beta(1.0, 1.0).unwrap()).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d: f64 = 0.0;
        for (i, x) in draws.iter().enumerate() {
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((x - lo).abs()).max((hi - x).abs());
        }
        // Critical value c(alpha)/sqrt(n), c(0.01) = 1.628.
        let crit = 1.628 / (n as f64).sqrt();
        assert!(d < crit, "KS statistic {d} >= {crit}");
    }

    #[test]
    fn beta_02_02_is_bimodal() {
        // Oracle: numerically integrate the Beta(0.2,0.2) density over
        // [0.1, 0.9] to get the interior mass; the tails must carry the rest.
        let a: f64 = 0.2;
        let simpson = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize| {
            let h = (hi - lo) / n as f64;
            let mut s = f(lo) + f(hi);
            for i in 1..n {
                let x = lo + i as f64 * h;
                s += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
            }
            s * h / 3.0
        };
        let interior = {
            // Unnormalized density is smooth on [0.1, 0.9].
            let f = |x: f64| x.powf(a - 1.0) * (1.0 - x).powf(a - 1.0);
            let raw = simpson(&f, 0.1, 0.9, 4000);
            // Normalizer B(a,a) = 2 ∫₀^½ x^(a-1)(1-x)^(a-1) dx; substituting
            // x = t^(1/a) removes the x→0 singularity:
            // B(a,a) = (2/a) ∫₀^(½^a) (1 - t^(1/a))^(a-1) dt, smooth integrand.
            let g = |t: f64| (1.0 - t.powf(1.0 / a)).powf(a - 1.0);
            let beta_fn = (2.0 / a) * simpson(&g, 0.0, 0.5f64.powf(a), 4000);
            raw / beta_fn
        };
        let expected_outside = 1.0 - interior;
        assert!(
            expected_outside > 0.5,
            "oracle says interior mass {interior} leaves tails {expected_outside}"
        );

        let mut rng = RngStream::new(9, 0);
        let n = 100_000;
        let outside = (0..n)
            .filter(|_| {
                let x = rng.sample_beta(0.2, 0.2).unwrap();
                !(0.1..=0.9).contains(&x)
            })
            .count() as f64
            / n as f64;
        assert!(outside > 0.5, "fraction outside [0.1,0.9] = {outside}");
        assert!(
            (outside - expected_outside).abs() < 0.02,
            "empirical {outside} vs oracle {expected_outside}"
        );
    }

    #[test]
    fn rejects_bad_params() {
        let mut rng = RngStream::new(0, 0);
        assert!(rng.sample_beta(0.0, 1.0).is_err());
        assert!(rng.sample_beta(1.0, -2.0).is_err());
        assert!(rng.sample_gamma(f64::NAN).is_err());
    }
}
