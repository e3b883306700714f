//! Generation cost functions.

use std::fmt::Debug;

/// A strictly convex, continuously differentiable generation cost.
pub trait CostFunction: Debug + Send + Sync {
    fn value(&self, p: f64) -> f64;

    /// Marginal cost Q'(p). Must be strictly increasing.
    fn gradient(&self, p: f64) -> f64;

    /// Solves Q'(p) = beta for p.
    ///
    /// The default grows a bracket geometrically and bisects; strictly increasing
    /// gradients make the root unique.
    fn gradient_inverse(&self, beta: f64) -> f64 {
        let (mut lo, mut hi) = (-1.0_f64, 1.0_f64);
        while self.gradient(lo) > beta {
            lo *= 2.0;
        }
        while self.gradient(hi) < beta {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.gradient(mid) < beta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Closed-form parameters when the cost is quadratic.
    fn as_quadratic(&self) -> Option<QuadraticCost> {
        None
    }
}

/// Q(p) = q/2 (p - c)^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticCost {
    pub q: f64,
    pub c: f64,
}

impl QuadraticCost {
    pub fn new(q: f64, c: f64) -> Self {
        Self { q, c }
    }
}

impl CostFunction for QuadraticCost {
    fn value(&self, p: f64) -> f64 {
        0.5 * self.q * (p - self.c) * (p - self.c)
    }

    fn gradient(&self, p: f64) -> f64 {
        self.q * (p - self.c)
    }

    fn gradient_inverse(&self, beta: f64) -> f64 {
        self.c + beta / self.q
    }

    fn as_quadratic(&self) -> Option<QuadraticCost> {
        Some(*self)
    }
}
