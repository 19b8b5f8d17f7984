//! Surrogate losses over score margins, their gradient kernels, and the
//! concave rank weighting applied to per-item loss mass.
//!
//! Every loss satisfies dL/dx = -c * h(x) where `h` is the kernel returned
//! by [`LossSpec::h`] and `c` is [`LossSpec::kernel_scale`] (1 for the
//! squared losses, beta for sigmoid/logistic). The finite-difference tests
//! below pin this convention down.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SquareHinge,
    Square,
    Sigmoid,
    Logistic,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SquareHinge => "square_hinge",
            LossKind::Square => "square",
            LossKind::Sigmoid => "sigmoid",
            LossKind::Logistic => "logistic",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "square_hinge" | "hinge" => Ok(LossKind::SquareHinge),
            "square" => Ok(LossKind::Square),
            "sigmoid" => Ok(LossKind::Sigmoid),
            "logistic" => Ok(LossKind::Logistic),
            other => Err(Error::invalid(
                "loss",
                format!("unknown loss `{other}` (square_hinge|square|sigmoid|logistic)"),
            )),
        }
    }
}

/// A surrogate loss with its sharpness parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    kind: LossKind,
    beta: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, beta: f64) -> Result<Self> {
        if matches!(kind, LossKind::Sigmoid | LossKind::Logistic) && !(beta > 0.0) {
            return Err(Error::invalid(
                "beta",
                format!("{} loss requires beta > 0, got {beta}", kind.name()),
            ));
        }
        Ok(LossSpec { kind, beta })
    }

    pub fn square_hinge() -> Self {
        LossSpec {
            kind: LossKind::SquareHinge,
            beta: 1.0,
        }
    }

    pub fn square() -> Self {
        LossSpec {
            kind: LossKind::Square,
            beta: 1.0,
        }
    }

    pub fn sigmoid(beta: f64) -> Result<Self> {
        LossSpec::new(LossKind::Sigmoid, beta)
    }

    pub fn logistic(beta: f64) -> Result<Self> {
        LossSpec::new(LossKind::Logistic, beta)
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Replaces beta, keeping the kind (used by annealing schedules).
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        LossSpec::new(self.kind, beta)
    }

    /// L(x), the loss at margin x.
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self.kind {
            LossKind::SquareHinge => {
                let t = (1.0 - x).max(0.0);
                0.5 * t * t
            }
            LossKind::Square => {
                let t = 1.0 - x;
                0.5 * t * t
            }
            LossKind::Sigmoid => -sigma(self.beta * x),
            LossKind::Logistic => softplus(-self.beta * x),
        }
    }

    /// Gradient kernel h(x), with dL/dx = -kernel_scale() * h(x).
    #[inline]
    pub fn h(&self, x: f64) -> f64 {
        match self.kind {
            LossKind::SquareHinge => (1.0 - x).max(0.0),
            LossKind::Square => 1.0 - x,
            LossKind::Sigmoid => {
                let s = sigma(self.beta * x);
                s * (1.0 - s)
            }
            LossKind::Logistic => sigma(-self.beta * x),
        }
    }

    /// The constant factored out of the derivative: 1 for the squared
    /// losses, beta for sigmoid/logistic.
    #[inline]
    pub fn kernel_scale(&self) -> f64 {
        match self.kind {
            LossKind::SquareHinge | LossKind::Square => 1.0,
            LossKind::Sigmoid | LossKind::Logistic => self.beta,
        }
    }

    /// Whether L(x) = h(x)^2 / 2, which the tanh weighting relies on.
    pub fn is_squared(&self) -> bool {
        matches!(self.kind, LossKind::SquareHinge | LossKind::Square)
    }
}

#[inline]
fn sigma(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(t: f64) -> f64 {
    // ln(1 + e^t), stable across the range
    if t > 35.0 {
        t
    } else if t < -35.0 {
        t.exp()
    } else {
        t.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Identity,
    Tanh,
}

/// Rank weighting phi applied to the per-item loss mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSpec {
    kind: WeightKind,
    rho: f64,
}

impl WeightSpec {
    pub fn identity() -> Self {
        WeightSpec {
            kind: WeightKind::Identity,
            rho: 1.0,
        }
    }

    pub fn tanh(rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::invalid("rho", format!("requires rho > 0, got {rho}")));
        }
        Ok(WeightSpec {
            kind: WeightKind::Tanh,
            rho,
        })
    }

    pub fn parse(name: &str, rho: f64) -> Result<Self> {
        match name {
            "identity" => Ok(WeightSpec::identity()),
            "tanh" => WeightSpec::tanh(rho),
            other => Err(Error::invalid(
                "weight",
                format!("unknown weighting `{other}` (identity|tanh)"),
            )),
        }
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            WeightKind::Identity => "identity",
            WeightKind::Tanh => "tanh",
        }
    }

    /// phi(x): x for identity, tanh(rho x) otherwise. Defined for x >= 0.
    #[inline]
    pub fn phi(&self, x: f64) -> f64 {
        match self.kind {
            WeightKind::Identity => x,
            WeightKind::Tanh => (self.rho * x).tanh(),
        }
    }

    /// The damping factor appearing in the gradients: 1 for identity,
    /// 1 - tanh^2(rho x) otherwise. phi'(x) = grad_scale() * phi_factor(x).
    #[inline]
    pub fn phi_factor(&self, x: f64) -> f64 {
        match self.kind {
            WeightKind::Identity => 1.0,
            WeightKind::Tanh => {
                let t = (self.rho * x).tanh();
                1.0 - t * t
            }
        }
    }

    /// The constant part of phi': 1 for identity, rho for tanh.
    #[inline]
    pub fn grad_scale(&self) -> f64 {
        match self.kind {
            WeightKind::Identity => 1.0,
            WeightKind::Tanh => self.rho,
        }
    }
}

/// The tanh weighting is derived for the squared losses only; other
/// combinations are rejected at configuration time.
pub fn check_compatible(loss: &LossSpec, weight: &WeightSpec) -> Result<()> {
    if weight.kind() == WeightKind::Tanh && !loss.is_squared() {
        return Err(Error::invalid(
            "weight",
            format!(
                "tanh weighting is only defined for square/square_hinge losses, not {}",
                loss.kind().name()
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: std::ops::RangeInclusive<i32> = -50..=50;

    fn grid_points() -> impl Iterator<Item = f64> {
        GRID.map(|i| i as f64 * 0.1)
    }

    fn all_losses() -> Vec<LossSpec> {
        vec![
            LossSpec::square_hinge(),
            LossSpec::square(),
            LossSpec::sigmoid(0.5).unwrap(),
            LossSpec::sigmoid(1.0).unwrap(),
            LossSpec::sigmoid(2.0).unwrap(),
            LossSpec::logistic(0.5).unwrap(),
            LossSpec::logistic(1.0).unwrap(),
            LossSpec::logistic(2.0).unwrap(),
        ]
    }

    #[test]
    fn closed_form_values() {
        let sh = LossSpec::square_hinge();
        assert_eq!(sh.value(0.0), 0.5);
        assert_eq!(sh.value(1.0), 0.0);
        let sg = LossSpec::sigmoid(1.0).unwrap();
        assert!((sg.value(0.0) - (-0.5)).abs() < 1e-15);
        let lg = LossSpec::logistic(1.0).unwrap();
        assert!((lg.value(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn closed_form_kernels() {
        let sh = LossSpec::square_hinge();
        assert_eq!(sh.h(0.0), 1.0);
        assert_eq!(sh.h(2.0), 0.0);
        let lg = LossSpec::logistic(1.0).unwrap();
        assert!((lg.h(0.0) - 0.5).abs() < 1e-15);
        let sg = LossSpec::sigmoid(1.0).unwrap();
        assert!((sg.h(0.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn losses_are_non_increasing_on_grid() {
        // the square loss is excluded: (1-x)^2/2 provably increases past
        // x = 1, so the monotonicity premise cannot hold for it
        for loss in all_losses() {
            if loss.kind() == LossKind::Square {
                continue;
            }
            let values: Vec<f64> = grid_points().map(|x| loss.value(x)).collect();
            for w in values.windows(2) {
                assert!(
                    w[0] >= w[1] - 1e-12,
                    "{} not non-increasing",
                    loss.kind().name()
                );
            }
        }
    }

    #[test]
    fn square_loss_decreases_only_up_to_the_margin() {
        let sq = LossSpec::square();
        let mut prev = f64::INFINITY;
        for i in -50..=10 {
            let v = sq.value(i as f64 * 0.1);
            assert!(v <= prev);
            prev = v;
        }
        // and increases afterwards, unlike the other three losses
        assert!(sq.value(2.0) > sq.value(1.0));
        assert!(sq.value(5.0) > sq.value(2.0));
    }

    #[test]
    fn convexity_of_square_square_hinge_logistic() {
        for loss in all_losses() {
            if loss.kind() == LossKind::Sigmoid {
                continue;
            }
            let step = 0.1;
            let values: Vec<f64> = grid_points().map(|x| loss.value(x)).collect();
            for w in values.windows(3) {
                let second = (w[2] - 2.0 * w[1] + w[0]) / (step * step);
                assert!(
                    second >= -1e-9,
                    "{}: second difference {second}",
                    loss.kind().name()
                );
            }
        }
    }

    #[test]
    fn derivative_matches_scaled_kernel() {
        let step = 1e-6;
        for loss in all_losses() {
            for x in grid_points() {
                let num = (loss.value(x + step) - loss.value(x - step)) / (2.0 * step);
                let analytic = -loss.kernel_scale() * loss.h(x);
                assert!(
                    (num - analytic).abs() < 1e-6,
                    "{} at {x}: {num} vs {analytic}",
                    loss.kind().name()
                );
            }
        }
    }

    #[test]
    fn beta_validation() {
        assert!(LossSpec::sigmoid(0.0).is_err());
        assert!(LossSpec::logistic(-1.0).is_err());
        assert!(LossSpec::new(LossKind::Square, 0.0).is_ok());
    }

    #[test]
    fn phi_closed_forms() {
        let id = WeightSpec::identity();
        assert_eq!(id.phi(0.3), 0.3);
        assert_eq!(id.phi_factor(0.3), 1.0);
        let t1 = WeightSpec::tanh(1.0).unwrap();
        assert_eq!(t1.phi(0.0), 0.0);
        assert_eq!(t1.phi_factor(0.0), 1.0);
        let t2 = WeightSpec::tanh(2.0).unwrap();
        assert!((t2.phi(0.5) - 1.0_f64.tanh()).abs() < 1e-15);
        let expect = 1.0 - 1.0_f64.tanh().powi(2);
        assert!((t2.phi_factor(0.5) - expect).abs() < 1e-15);
        assert!((expect - 0.419974).abs() < 1e-6);
    }

    #[test]
    fn phi_tanh_is_concave_with_slope_rho_at_zero() {
        for rho in [0.5, 1.0, 2.0] {
            let w = WeightSpec::tanh(rho).unwrap();
            assert_eq!(w.phi(0.0), 0.0);
            let step = 1e-7;
            let slope0 = (w.phi(step) - w.phi(0.0)) / step;
            assert!((slope0 - rho).abs() < 1e-5);
            let mut prev_slope = f64::INFINITY;
            for i in 0..100 {
                let x = i as f64 * 0.05;
                let slope = (w.phi(x + step) - w.phi(x)) / step;
                assert!(slope <= prev_slope + 1e-9);
                prev_slope = slope;
            }
            for i in 0..200 {
                let x = i as f64 * 0.05;
                let f = w.phi_factor(x);
                assert!((0.0..=1.0).contains(&f));
                // tanh saturates to exactly 1.0 in f64 around 19; strict
                // positivity only holds while the argument is representable
                if rho * x < 18.0 {
                    assert!(f > 0.0, "rho {rho} x {x}");
                }
            }
        }
    }

    #[test]
    fn tanh_weighting_rejected_for_smooth_losses() {
        let w = WeightSpec::tanh(1.0).unwrap();
        assert!(check_compatible(&LossSpec::square(), &w).is_ok());
        assert!(check_compatible(&LossSpec::square_hinge(), &w).is_ok());
        assert!(check_compatible(&LossSpec::sigmoid(1.0).unwrap(), &w).is_err());
        assert!(check_compatible(&LossSpec::logistic(1.0).unwrap(), &w).is_err());
        let id = WeightSpec::identity();
        assert!(check_compatible(&LossSpec::logistic(1.0).unwrap(), &id).is_ok());
    }
}
