//! Fixed composite Gauss–Legendre rules for integrals against a Gaussian in
//! `u = ln b`.
//!
//! Every one-dimensional integral in the crate has the shape
//! `∫ g(u) N(u; m, s²) du` where `g` is a mixture of a sigmoid in `b = eᵘ`
//! and a constant. The Gaussian factor is smooth on the scale of `s`; the
//! sigmoid can be far sharper. The rule therefore lays uniform panels over
//! `[m − 8s, m + 8s]` and adds a second, finer set of panels around the
//! sigmoid transition when one falls inside the range. Panel layout depends
//! only on its inputs, so results are bit-reproducible.

/// Half width of the integration range in standard deviations.
pub(crate) const RANGE_SIGMAS: f64 = 8.0;
const BASE_PANELS: usize = 48;
const TRANSITION_PANELS: usize = 40;
/// Half width of the refined window in sigmoid widths.
const TRANSITION_HALF_WIDTH: f64 = 24.0;

// 8-point Gauss–Legendre on [-1, 1].
const GL_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Location and width (in `u`) of a sigmoid transition inside the integrand.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Transition {
    pub center: f64,
    pub width: f64,
}

impl Transition {
    /// Transition of `σ(κ(y − ρ eᵘ))`, located at `eᵘ = y/ρ` with slope `κy`.
    /// `None` when the sigmoid has no crossing (`y ≤ 0`) or is flat.
    pub(crate) fn of_sigmoid(kappa: f64, rho: f64, y: f64) -> Option<Self> {
        if y <= 0.0 || kappa <= 0.0 || !y.is_finite() {
            return None;
        }
        let center = (y / rho).ln();
        let width = 1.0 / (kappa * y);
        (center.is_finite() && width.is_finite() && width > 0.0)
            .then_some(Transition { center, width })
    }
}

/// Quadrature nodes with weights that already include the normalised
/// Gaussian density, so `Σ wᵢ g(uᵢ) ≈ E[g(u)]`.
#[derive(Debug, Clone)]
pub(crate) struct GaussianRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussianRule {
    pub(crate) fn new(log_mean: f64, log_var: f64, transition: Option<Transition>) -> Self {
        let sd = log_var.sqrt();
        let lo = log_mean - RANGE_SIGMAS * sd;
        let hi = log_mean + RANGE_SIGMAS * sd;

        let mut breaks: Vec<f64> = (0..=BASE_PANELS)
            .map(|i| lo + (hi - lo) * i as f64 / BASE_PANELS as f64)
            .collect();
        if let Some(t) = transition {
            let a = (t.center - TRANSITION_HALF_WIDTH * t.width).max(lo);
            let b = (t.center + TRANSITION_HALF_WIDTH * t.width).min(hi);
            if b > a {
                breaks.extend((0..=TRANSITION_PANELS).map(|i| a + (b - a) * i as f64 / TRANSITION_PANELS as f64));
            }
        }
        breaks.sort_by(f64::total_cmp);
        let tiny = (hi - lo) * 1e-12;
        breaks.dedup_by(|a, b| (*a - *b).abs() <= tiny);

        let norm = 1.0 / (2.0 * std::f64::consts::PI * log_var).sqrt();
        let mut nodes = Vec::with_capacity(breaks.len() * 8);
        let mut weights = Vec::with_capacity(breaks.len() * 8);
        for pair in breaks.windows(2) {
            let half = 0.5 * (pair[1] - pair[0]);
            let mid = 0.5 * (pair[1] + pair[0]);
            for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
                for u in [mid - half * x, mid + half * x] {
                    let d = u - log_mean;
                    nodes.push(u);
                    weights.push(w * half * norm * (-0.5 * d * d / log_var).exp());
                }
            }
        }
        GaussianRule { nodes, weights }
    }

    #[cfg(test)]
    pub(crate) fn len(&self) -> usize {
        self.nodes.len()
    }
}

/// Logistic sigmoid evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_integrates_gaussian_moments() {
        let rule = GaussianRule::new(1.3, 0.2, None);
        let z: f64 = rule.weights.iter().sum();
        let m1: f64 = rule.nodes.iter().zip(&rule.weights).map(|(u, w)| u * w).sum();
        let m2: f64 = rule.nodes.iter().zip(&rule.weights).map(|(u, w)| (u - 1.3).powi(2) * w).sum();
        assert!((z - 1.0).abs() < 1e-13);
        assert!((m1 - 1.3).abs() < 1e-12);
        assert!((m2 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rule_has_at_least_201_nodes() {
        assert!(GaussianRule::new(0.0, 1.0, None).len() >= 201);
    }

    #[test]
    fn transition_window_adds_nodes() {
        let t = Transition::of_sigmoid(1.0, 0.95, 95.0);
        let plain = GaussianRule::new(100f64.ln(), 0.25, None);
        let refined = GaussianRule::new(100f64.ln(), 0.25, t);
        assert!(refined.len() > plain.len());
    }

    #[test]
    fn sigmoid_is_safe_in_the_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-95.0) < 1e-40);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(5.0) - 0.993_307_149_075_715_2).abs() < 1e-15);
    }
}
