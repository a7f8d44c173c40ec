//! Self-contained deterministic random number generation.
//!
//! Every stochastic step in the pipeline draws from an [`Rng`] seeded through
//! [`derive_seed`], so a run is fully reproducible from the root seed alone
//! and independent subsystems (phantom subjects, patch models, classifier
//! repetitions) get decorrelated streams.

/// xoshiro256++ generator, seeded via splitmix64 expansion.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut st = seed;
        let s = [
            splitmix64(&mut st),
            splitmix64(&mut st),
            splitmix64(&mut st),
            splitmix64(&mut st),
        ];
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n), unbiased by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Uniform draw from {-1, 0, 1}.
    pub fn jitter_step(&mut self) -> i64 {
        self.below(3) as i64 - 1
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Beta(a, b) sample by Johnk's method; requires a, b in (0, 1].
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        debug_assert!(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0);
        loop {
            let u = self.next_f64_open().powf(1.0 / a);
            let v = self.next_f64_open().powf(1.0 / b);
            let s = u + v;
            if s > 0.0 && s <= 1.0 {
                return u / s;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// FNV-1a over a byte slice; also used for output-stability hashing in tests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a child seed from a root seed, a domain label and an index.
///
/// Distinct (domain, index) pairs give decorrelated streams; the mapping is
/// fixed so that run outputs are stable across versions of this crate.
pub fn derive_seed(root: u64, domain: &str, index: u64) -> u64 {
    let mut st = root ^ fnv1a64(domain.as_bytes()).rotate_left(17) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let a = splitmix64(&mut st);
    splitmix64(&mut st) ^ a.rotate_left(29)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_stream() {
        let mut a = Rng::seed_from_u64(7);
        let mut b = Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_seeds_distinct_streams() {
        let mut a = Rng::seed_from_u64(1);
        let mut b = Rng::seed_from_u64(2);
        let same = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
        assert!(same < 4);
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut rng = Rng::seed_from_u64(3);
        let mut seen = [false; 5];
        for _ in 0..200 {
            let v = rng.below(5);
            assert!(v < 5);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn beta_in_unit_interval() {
        let mut rng = Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = rng.beta(0.3, 0.3);
            assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn beta_mean_near_half_for_symmetric_params() {
        let mut rng = Rng::seed_from_u64(12);
        let n = 20000;
        let mean: f64 = (0..n).map(|_| rng.beta(0.3, 0.3)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::seed_from_u64(13);
        let n = 40000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.05, "var = {var}");
    }

    #[test]
    fn derived_seeds_differ_by_domain_and_index() {
        let a = derive_seed(42, "grader", 0);
        let b = derive_seed(42, "grader", 1);
        let c = derive_seed(42, "phantom", 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
        // stable across calls
        assert_eq!(a, derive_seed(42, "grader", 0));
    }
}
