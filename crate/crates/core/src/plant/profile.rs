//! Piecewise-constant actuation schedules for data generation and benchmarks.

use rand::Rng;

use crate::rng;

/// Air-side boundary for one group of exchangers. The inlet temperature may
/// drift over time; humidity, air flow and ambient pressure are held fixed.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AirSeries {
    pub t_in: Vec<f64>,
    pub phi: f64,
    pub mdot: f64,
    pub p_amb: f64,
}

impl AirSeries {
    pub fn constant(t_in: f64, phi: f64, mdot: f64, p_amb: f64, steps: usize) -> Self {
        AirSeries { t_in: vec![t_in; steps], phi, mdot, p_amb }
    }

    pub fn t_at(&self, step: usize) -> f64 {
        self.t_in[step.min(self.t_in.len() - 1)]
    }
}

/// Step-indexed actuation for every device. One entry per base time step;
/// values hold for the whole step (zero-order hold).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ActuationProfile {
    pub dt: f64,
    pub speeds: Vec<Vec<f64>>,
    pub openings: Vec<Vec<f64>>,
    pub air_cond: AirSeries,
    pub air_evap: AirSeries,
}

impl ActuationProfile {
    pub fn steps(&self) -> usize {
        self.speeds.first().map_or(0, Vec::len)
    }

    pub fn speed(&self, comp: usize, step: usize) -> f64 {
        let s = &self.speeds[comp];
        s[step.min(s.len() - 1)]
    }

    pub fn opening(&self, valve: usize, step: usize) -> f64 {
        let s = &self.openings[valve];
        s[step.min(s.len() - 1)]
    }

    /// Steps at which any compressor speed or valve opening moves by more
    /// than `threshold` relative to the previous step (strictly greater).
    pub fn jump_indices(&self, threshold: f64) -> Vec<usize> {
        let mut out = Vec::new();
        for step in 1..self.steps() {
            let jump = self
                .speeds
                .iter()
                .chain(self.openings.iter())
                .any(|s| (s[step] - s[step - 1]).abs() > threshold);
            if jump {
                out.push(step);
            }
        }
        out
    }
}

/// Knobs for the random schedule generator.
#[derive(Debug, Clone)]
pub struct ProfileSpec {
    pub steps: usize,
    pub n_comp: usize,
    pub n_valve: usize,
    pub dt: f64,
    /// Mean dwell length of one constant segment, in steps.
    pub dwell: usize,
    /// Probability that a segment boundary is a large step change.
    pub jump_prob: f64,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec { steps: 4000, n_comp: 2, n_valve: 1, dt: 1.0, dwell: 80, jump_prob: 0.35 }
    }
}

// Bounds chosen so that every equilibrium reachable inside the box keeps
// the cycle pressures well inside the property envelope.
const SPEED_LO: f64 = 32.0;
const SPEED_HI: f64 = 55.0;
const OPEN_LO: f64 = 0.45;
const OPEN_HI: f64 = 0.85;

fn piecewise<R: Rng>(
    r: &mut R,
    spec: &ProfileSpec,
    lo: f64,
    hi: f64,
    small: f64,
    big: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.steps);
    let mut level = r.gen_range(lo + 0.2 * (hi - lo)..hi - 0.2 * (hi - lo));
    while out.len() < spec.steps {
        let dwell = r.gen_range(spec.dwell / 2..spec.dwell * 2).max(4);
        for _ in 0..dwell {
            if out.len() == spec.steps {
                break;
            }
            out.push(level);
        }
        let magnitude = if r.gen_bool(spec.jump_prob) {
            r.gen_range(big..2.0 * big)
        } else {
            r.gen_range(0.2 * small..small)
        };
        let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        level = (level + sign * magnitude).clamp(lo, hi);
    }
    out
}

/// Seeded random schedule. Segment boundaries mix gentle moves with large
/// steps so that both smooth and transient-heavy stretches appear.
pub fn generate_profile(spec: &ProfileSpec, seed: u64) -> ActuationProfile {
    let mut r = rng::seeded(seed);
    let speeds = (0..spec.n_comp)
        .map(|_| piecewise(&mut r, spec, SPEED_LO, SPEED_HI, 3.0, 7.0))
        .collect();
    let openings = (0..spec.n_valve)
        .map(|_| piecewise(&mut r, spec, OPEN_LO, OPEN_HI, 0.05, 0.12))
        .collect();

    let drift = |r: &mut rand_chacha::ChaCha20Rng, base: f64, amp: f64, steps: usize| {
        let mut t = Vec::with_capacity(steps);
        let mut level: f64 = base;
        for step in 0..steps {
            if step % 200 == 0 && step > 0 {
                level = (level + r.gen_range(-amp..amp)).clamp(base - 3.0 * amp, base + 3.0 * amp);
            }
            t.push(level);
        }
        t
    };
    let air_cond = AirSeries {
        t_in: drift(&mut r, 305.0, 1.5, spec.steps),
        phi: 0.4,
        mdot: 0.5,
        p_amb: 101_325.0,
    };
    let air_evap = AirSeries {
        t_in: drift(&mut r, 297.0, 1.5, spec.steps),
        phi: 0.55,
        mdot: 0.5,
        p_amb: 101_325.0,
    };

    ActuationProfile { dt: spec.dt, speeds, openings, air_cond, air_evap }
}

/// Constant schedule, handy for equilibrium and steady-state checks.
pub fn constant_profile(
    spec: &ProfileSpec,
    speed: f64,
    opening: f64,
    t_air_cond: f64,
    t_air_evap: f64,
) -> ActuationProfile {
    ActuationProfile {
        dt: spec.dt,
        speeds: vec![vec![speed; spec.steps]; spec.n_comp],
        openings: vec![vec![opening; spec.steps]; spec.n_valve],
        air_cond: AirSeries::constant(t_air_cond, 0.4, 0.5, 101_325.0, spec.steps),
        air_evap: AirSeries::constant(t_air_evap, 0.55, 0.5, 101_325.0, spec.steps),
    }
}
