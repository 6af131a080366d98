//! Numerical checks of the structural properties of the retention function.
//!
//! Each check runs over a uniform 101 x 101 grid of `(f, d)` in `[0, 1]^2`
//! plus 10^4 pseudo-random points and pairs, and reports the worst point.
//! Derivative checks compare the analytic partials against central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{retention_closed_form, retention_probability, RetentionConfig};

pub const GRID_SIZE: usize = 101;
pub const RANDOM_POINTS: usize = 10_000;
/// Step for first-derivative central differences.
pub const FD_STEP: f64 = 1e-5;
/// Steps in `f` and `d` for the mixed partial. `g` is affine in `f`, so the
/// larger `f` step costs no truncation error and keeps roundoff small.
pub const FD_STEP_MIXED: (f64, f64) = (1e-3, 1e-5);
pub const DERIVATIVE_TOLERANCE: f64 = 1e-6;
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-12;
/// Forward step in `f` for the synergy check.
pub const SYNERGY_DELTA: f64 = 0.01;
const RANDOM_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    /// Holds, strictly wherever strictness is claimed.
    Strict,
    /// Holds, but only weakly because of boundary parameters such as
    /// `lambda = 0`.
    NonStrict,
    Violated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub f: f64,
    pub d: f64,
    /// Smallest margin seen; negative means the property failed here.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub status: CheckStatus,
    pub witness: Option<Witness>,
    /// Largest gap between analytic and finite-difference derivatives.
    pub max_derivative_error: Option<f64>,
    pub detail: String,
}

impl PropertyCheck {
    pub fn passed(&self) -> bool {
        self.status != CheckStatus::Violated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertySummary {
    pub config: RetentionConfig,
    pub checks: Vec<PropertyCheck>,
    pub grid_points: usize,
    pub random_points: usize,
}

impl PropertySummary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(PropertyCheck::passed)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Tracks the minimum margin, whether strictness held where claimed, and
/// the worst derivative error.
struct Tracker {
    worst: Option<Witness>,
    strict: bool,
    max_err: f64,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            worst: None,
            strict: true,
            max_err: 0.0,
        }
    }

    /// `margin >= 0` is required; `margin > 0` is required for strictness
    /// when `strict_claimed`.
    fn margin(&mut self, f: f64, d: f64, margin: f64, strict_claimed: bool) {
        if strict_claimed && margin <= 0.0 {
            self.strict = false;
        }
        if self.worst.is_none_or(|w| margin < w.margin) {
            self.worst = Some(Witness { f, d, margin });
        }
    }

    fn derivative(&mut self, f: f64, d: f64, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs();
        if err > self.max_err {
            self.max_err = err;
        }
        if err > DERIVATIVE_TOLERANCE {
            self.margin(f, d, DERIVATIVE_TOLERANCE - err, false);
        }
    }

    fn finish(self, name: &str, strict_possible: bool, fd: bool, detail: String) -> PropertyCheck {
        let violated = self.worst.is_some_and(|w| w.margin < 0.0);
        let status = if violated {
            CheckStatus::Violated
        } else if self.strict && strict_possible {
            CheckStatus::Strict
        } else {
            CheckStatus::NonStrict
        };
        PropertyCheck {
            name: name.to_string(),
            status,
            witness: self.worst,
            max_derivative_error: fd.then_some(self.max_err),
            detail,
        }
    }
}

fn grid() -> Vec<f64> {
    (0..GRID_SIZE)
        .map(|i| i as f64 / (GRID_SIZE - 1) as f64)
        .collect()
}

fn random_pairs() -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(RANDOM_SEED);
    (0..RANDOM_POINTS)
        .map(|_| [rng.random(), rng.random(), rng.random(), rng.random()])
        .collect()
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Runs the five property checks for one configuration.
pub fn verify_properties(config: &RetentionConfig) -> PropertySummary {
    let g = |f: f64, d: f64| retention_probability(f, d, config);
    let (a, l) = (config.alpha, config.lambda);
    let axis = grid();
    let pairs = random_pairs();
    let h = FD_STEP;

    // Causal monotonicity: g non-decreasing in f, strictly when lambda > 0, d > 0.
    let mut t = Tracker::new();
    for &d in &axis {
        for w in axis.windows(2) {
            t.margin(w[1], d, g(w[1], d) - g(w[0], d), l > 0.0 && d > 0.0);
        }
        for &f in &axis {
            let numeric = (g(f + h, d) - g(f - h, d)) / (2.0 * h);
            t.derivative(f, d, l * a * d / (1.0 + a * d), numeric);
        }
    }
    for &[x, y, d, _] in &pairs {
        let (f1, f2) = ordered(x, y);
        t.margin(f2, d, g(f2, d) - g(f1, d), l > 0.0 && d > 0.0 && f1 < f2);
        let numeric = (g(x + h, d) - g(x - h, d)) / (2.0 * h);
        t.derivative(x, d, l * a * d / (1.0 + a * d), numeric);
    }
    let causal = t.finish(
        "causal_monotonicity",
        l > 0.0,
        true,
        if l > 0.0 {
            "dg/df > 0 for d > 0".into()
        } else {
            "lambda = 0: g does not depend on f".into()
        },
    );

    // Density penalty: g non-increasing in d, strictly when lambda f < 1.
    let mut t = Tracker::new();
    for &f in &axis {
        for w in axis.windows(2) {
            t.margin(f, w[1], g(f, w[0]) - g(f, w[1]), l * f < 1.0);
        }
        for &d in &axis {
            let numeric = (g(f, d + h) - g(f, d - h)) / (2.0 * h);
            t.derivative(
                f,
                d,
                -a * (1.0 - l * f) / ((1.0 + a * d) * (1.0 + a * d)),
                numeric,
            );
        }
    }
    for &[f, _, x, y] in &pairs {
        let (d1, d2) = ordered(x, y);
        t.margin(f, d2, g(f, d1) - g(f, d2), l * f < 1.0 && d1 < d2);
        let numeric = (g(f, x + h) - g(f, x - h)) / (2.0 * h);
        t.derivative(
            f,
            x,
            -a * (1.0 - l * f) / ((1.0 + a * x) * (1.0 + a * x)),
            numeric,
        );
    }
    let penalty = t.finish(
        "density_penalty",
        true,
        true,
        "dg/dd < 0 wherever lambda f < 1".into(),
    );

    // Order preservation: d g(f, d) strictly increasing in d.
    let dg = |f: f64, d: f64| d * g(f, d);
    let mut t = Tracker::new();
    for &f in &axis {
        for w in axis.windows(2) {
            t.margin(f, w[1], dg(f, w[1]) - dg(f, w[0]), true);
        }
        for &d in &axis {
            let numeric = (dg(f, d + h) - dg(f, d - h)) / (2.0 * h);
            let analytic = (1.0 + 2.0 * a * l * f * d + a * a * l * f * d * d)
                / ((1.0 + a * d) * (1.0 + a * d));
            t.derivative(f, d, analytic, numeric);
        }
    }
    for &[f, _, x, y] in &pairs {
        let (d1, d2) = ordered(x, y);
        if d1 < d2 {
            t.margin(f, d2, dg(f, d2) - dg(f, d1), true);
        }
    }
    let order = t.finish(
        "order_preservation",
        true,
        true,
        "d g(f, d) increasing in d".into(),
    );

    // Synergy: the forward f-difference of g grows with d when lambda > 0.
    let delta = SYNERGY_DELTA;
    let lift = |f: f64, d: f64| g(f + delta, d) - g(f, d);
    let (hf, hd) = FD_STEP_MIXED;
    let mut t = Tracker::new();
    let f_axis: Vec<f64> = axis
        .iter()
        .copied()
        .filter(|f| *f + delta <= 1.0 + 1e-12)
        .collect();
    for &f in &f_axis {
        for w in axis.windows(2) {
            t.margin(f, w[1], lift(f, w[1]) - lift(f, w[0]), l > 0.0);
        }
        for &d in &axis {
            let numeric = (g(f + hf, d + hd) - g(f + hf, d - hd) - g(f - hf, d + hd)
                + g(f - hf, d - hd))
                / (4.0 * hf * hd);
            t.derivative(f, d, l * a / ((1.0 + a * d) * (1.0 + a * d)), numeric);
        }
    }
    for &[x, _, p, q] in &pairs {
        let f = x * (1.0 - delta);
        let (d1, d2) = ordered(p, q);
        t.margin(f, d2, lift(f, d2) - lift(f, d1), l > 0.0 && d1 < d2);
    }
    let synergy = t.finish(
        "synergy",
        l > 0.0,
        true,
        if l > 0.0 {
            format!(
                "cross partial lambda alpha / (1 + alpha d)^2 in [{:.6}, {:.6}]",
                l * a / ((1.0 + a) * (1.0 + a)),
                l * a
            )
        } else {
            "lambda = 0: cross partial is 0".into()
        },
    );

    // Bounds 1/(1 + alpha d) <= g <= 1 and lambda f <= g, the boundary
    // identities, and agreement with the closed form.
    let mut t = Tracker::new();
    let mut closed_err = 0.0f64;
    let unit = RetentionConfig {
        lambda: 1.0,
        ..*config
    };
    let mut bounds = |f: f64, d: f64, t: &mut Tracker| {
        let v = g(f, d);
        let base = 1.0 / (1.0 + a * d);
        t.margin(f, d, (v - base).min(1.0 - v).min(v - l * f), false);
        let err = (v - retention_closed_form(f, d, config)).abs();
        closed_err = closed_err.max(err);
        if err > CLOSED_FORM_TOLERANCE {
            t.margin(f, d, CLOSED_FORM_TOLERANCE - err, false);
        }
    };
    for &f in &axis {
        for &d in &axis {
            bounds(f, d, &mut t);
        }
    }
    for &[f, _, d, _] in &pairs {
        bounds(f, d, &mut t);
    }
    let mut identity_failures = 0usize;
    for &v in &axis {
        let checks = [
            (v, 0.0, g(v, 0.0), 1.0),
            (0.0, v, g(0.0, v), 1.0 / (1.0 + a * v)),
            (1.0, v, retention_probability(1.0, v, &unit), 1.0),
        ];
        for (f, d, got, want) in checks {
            if got != want {
                identity_failures += 1;
                t.margin(f, d, -(got - want).abs(), false);
            }
        }
    }
    let bounds_check = t.finish(
        "bounds",
        true,
        false,
        format!("closed-form max |diff| {closed_err:.3e}; {identity_failures} boundary identity failures"),
    );

    PropertySummary {
        config: *config,
        checks: vec![causal, penalty, order, synergy, bounds_check],
        grid_points: GRID_SIZE * GRID_SIZE,
        random_points: RANDOM_POINTS,
    }
}
