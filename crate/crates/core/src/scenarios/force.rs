//! Forcing of the forced-turbulence scenario: a sum of 20 travelling sine
//! waves over the domain mapped to `[0, 2π]²`.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{CenteredGrid, Domain};

pub const FORCE_TERMS: usize = 20;
pub const WAVE_NUMBERS: [f64; 4] = [6.0, 8.0, 10.0, 12.0];

/// One sine term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceTerm {
    pub amplitude: f64,
    pub wave_number: f64,
    /// Direction angle of the wave vector.
    pub alpha: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// Sampling ranges; the defaults are the reference ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForceRanges {
    pub amplitude: f64,
    pub frequency: f64,
    pub wave_numbers: Vec<f64>,
    pub terms: usize,
}

impl Default for ForceRanges {
    fn default() -> Self {
        Self { amplitude: 0.1, frequency: 0.2, wave_numbers: WAVE_NUMBERS.to_vec(), terms: FORCE_TERMS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceParams {
    pub terms: Vec<ForceTerm>,
}

impl ForceParams {
    /// Draws `a ∈ [−A, A]`, `k` from the wave-number set, `α ∈ [0, 2π]`,
    /// `w ∈ [−W, W]`, `φ ∈ [0, π]`.
    pub fn sample(ranges: &ForceRanges, rng: &mut impl Rng) -> Self {
        let terms = (0..ranges.terms)
            .map(|_| ForceTerm {
                amplitude: rng.random_range(-ranges.amplitude..=ranges.amplitude),
                wave_number: ranges.wave_numbers[rng.random_range(0..ranges.wave_numbers.len())],
                alpha: rng.random_range(0.0..=TAU),
                frequency: rng.random_range(-ranges.frequency..=ranges.frequency),
                phase: rng.random_range(0.0..=PI),
            })
            .collect();
        Self { terms }
    }

    /// Value of one component at mapped coordinates `(xh, yh)` and time `t`.
    /// Both components share the same expression.
    pub fn value(&self, xh: f64, yh: f64, t: f64) -> f64 {
        self.terms
            .iter()
            .map(|s| {
                let arg = s.wave_number * (s.alpha.cos() * xh + s.alpha.sin() * yh) + s.frequency * t + s.phase;
                s.amplitude * arg.sin()
            })
            .sum()
    }
}

/// Two-channel force field at cell centers for physical time `t`.
pub fn synthesize_force(params: &ForceParams, domain: &Domain, t: f64) -> CenteredGrid {
    let [lx, ly] = domain.extent();
    CenteredGrid::from_fn(domain, 2, |x, y| {
        let g = params.value(TAU * x / lx, TAU * y / ly, t);
        vec![g, g]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoundarySpec;

    #[test]
    fn zero_amplitudes_give_zero_force() {
        let d = Domain::new(8, 8, 1.0, BoundarySpec::periodic()).unwrap();
        let mut p = ForceParams::sample(&ForceRanges::default(), &mut crate::rng::stream(1, &[]));
        p.terms.iter_mut().for_each(|t| t.amplitude = 0.0);
        assert!(synthesize_force(&p, &d, 3.0).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_term_matches_pointwise_formula() {
        let d = Domain::new(16, 12, 1.0, BoundarySpec::periodic()).unwrap();
        let p = ForceParams {
            terms: vec![ForceTerm { amplitude: 0.1, wave_number: 6.0, alpha: 0.0, frequency: 0.0, phase: PI / 2.0 }],
        };
        let g = synthesize_force(&p, &d, 5.0);
        for j in 0..12 {
            for i in 0..16 {
                let xh = TAU * (i as f64 + 0.5) / 16.0;
                let expected = 0.1 * (6.0 * xh).cos();
                assert!((g.get(0, i, j) - expected).abs() < 1e-12);
                assert!((g.get(1, i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let mut rng = crate::rng::stream(3, &[]);
        let r = ForceRanges::default();
        for _ in 0..500 {
            for t in ForceParams::sample(&r, &mut rng).terms {
                assert!(t.amplitude.abs() <= 0.1);
                assert!(WAVE_NUMBERS.contains(&t.wave_number));
                assert!((0.0..=TAU).contains(&t.alpha));
                assert!(t.frequency.abs() <= 0.2);
                assert!((0.0..=PI).contains(&t.phase));
            }
        }
    }
}
