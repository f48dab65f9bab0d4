//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use djscc_core::channel::{loo_pdf, LooParameters, MarkovChain};

/// Parameter fixtures for distribution checks: (alpha, psi, mp) in dB.
pub const LOO_FIXTURES: [(f64, f64, f64); 3] = [(-2.0, 1.0, -10.0), (-0.5, 0.5, -15.0), (-10.0, 3.0, -18.0)];

pub fn example_chain() -> MarkovChain {
    MarkovChain::new([[0.9, 0.1, 0.0], [0.2, 0.6, 0.2], [0.0, 0.3, 0.7]]).unwrap()
}

/// Envelope CDF tabulated on `[0, r_max]` by composite Simpson integration
/// of the density, linearly interpolated between nodes.
pub struct CdfTable {
    step: f64,
    values: Vec<f64>,
}

impl CdfTable {
    pub fn new(params: &LooParameters, r_max: f64, intervals: usize) -> Self {
        let step = r_max / intervals as f64;
        let pdf = |r: f64| loo_pdf(params, r).unwrap();
        let mut values = Vec::with_capacity(intervals + 1);
        values.push(0.0);
        let mut left = pdf(0.0);
        let mut acc = 0.0;
        for i in 0..intervals {
            let a = i as f64 * step;
            let mid = pdf(a + 0.5 * step);
            let right = pdf(a + step);
            acc += step / 6.0 * (left + 4.0 * mid + right);
            values.push(acc);
            left = right;
        }
        Self { step, values }
    }

    pub fn total(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn eval(&self, r: f64) -> f64 {
        let pos = r / self.step;
        let i = pos.floor() as usize;
        if i + 1 >= self.values.len() {
            return self.total();
        }
        let f = pos - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// Two-sided Kolmogorov-Smirnov distance between a sample and a CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// KS distance of `count` sampled envelopes against the density oracle.
pub fn loo_ks(params: &LooParameters, count: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let samples = djscc_core::channel::sample_loo(params, count, &mut rng).unwrap();
    let mut r: Vec<f64> = samples.iter().map(|h| h.norm()).collect();
    let r_max = r.iter().copied().fold(0.0, f64::max) * 1.05;
    let table = CdfTable::new(params, r_max, 4000);
    ks_statistic(&mut r, |x| table.eval(x))
}

/// Fraction of time spent in each state.
pub fn occupancy(states: &[djscc_core::channel::ShadowState]) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for s in states {
        counts[s.index()] += 1;
    }
    counts.map(|c| c as f64 / states.len() as f64)
}

pub fn l1(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Slant range from the triangle earth centre / ground station / satellite:
/// solve for the Earth-central angle, then apply the law of cosines.
pub fn slant_range_by_cosines(orbit_height_m: f64, elevation_deg: f64) -> f64 {
    let r = djscc_core::link::EARTH_RADIUS_M;
    let orbit = r + orbit_height_m;
    let eps = elevation_deg.to_radians();
    let nadir = (r * eps.cos() / orbit).asin();
    let central = std::f64::consts::FRAC_PI_2 - eps - nadir;
    (r * r + orbit * orbit - 2.0 * r * orbit * central.cos()).sqrt()
}

/// Empirical SNR in dB of `count` AWGN samples against `signal_power`.
pub fn empirical_snr_db(snr_db: f64, signal_power: f64, count: usize, seed: u64) -> f64 {
    use djscc_core::link::{noise_sigma, sample_awgn};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = noise_sigma(snr_db, signal_power).unwrap();
    let noise = sample_awgn(&spec, count, &mut rng).unwrap();
    let power = noise.iter().map(|z| z.norm_sqr()).sum::<f64>() / count as f64;
    10.0 * (signal_power / power).log10()
}

pub fn condition(
    state: djscc_core::channel::ShadowState,
    (alpha_db, psi_db, mp_db): (f64, f64, f64),
    snr_db: f64,
) -> djscc_core::model::ConditionSpec {
    djscc_core::model::ConditionSpec {
        environment: djscc_core::channel::Environment::Suburban,
        state,
        elevation_deg: 40.0,
        alpha_db,
        psi_db,
        mp_db,
        snr_db,
    }
}

/// Fading parameters used as line-of-sight and deep-shadow conditions.
pub const LOS: (f64, f64, f64) = (-0.5, 0.5, -15.0);
pub const DEEP_SHADOW: (f64, f64, f64) = (-14.0, 4.0, -20.0);
