//! Overflow-safe accumulation of quantities of the form `v * exp(ln_scale)`.
//!
//! Weighted norms carry factors e^{2s*phi} whose exponents easily exceed
//! the f64 range once s is large. All Carleman-side integrals are therefore
//! accumulated with the maximum exponent factored out, and combined in
//! log scale.

/// A non-negative number represented as `value = mantissa * exp(ln_scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogScaled {
    pub ln_scale: f64,
    pub mantissa: f64,
}

impl LogScaled {
    pub fn zero() -> Self {
        LogScaled { ln_scale: 0.0, mantissa: 0.0 }
    }

    pub fn new(ln_scale: f64, mantissa: f64) -> Self {
        LogScaled { ln_scale, mantissa }
    }

    /// Construct from a plain f64 (must be non-negative).
    pub fn from_f64(v: f64) -> Self {
        debug_assert!(v >= 0.0);
        LogScaled { ln_scale: 0.0, mantissa: v }
    }

    /// Collapse to f64; may overflow to inf for huge exponents.
    pub fn to_f64(self) -> f64 {
        self.mantissa * self.ln_scale.exp()
    }

    pub fn is_zero(self) -> bool {
        self.mantissa == 0.0
    }

    /// Natural log of the value; -inf for zero.
    pub fn ln(self) -> f64 {
        self.ln_scale + self.mantissa.ln()
    }

    pub fn add(self, other: LogScaled) -> LogScaled {
        if self.is_zero() {
            return other;
        }
        if other.is_zero() {
            return self;
        }
        // rebase onto the larger scale
        let (hi, lo) = if self.ln_scale >= other.ln_scale {
            (self, other)
        } else {
            (other, self)
        };
        let shifted = lo.mantissa * (lo.ln_scale - hi.ln_scale).exp();
        LogScaled::new(hi.ln_scale, hi.mantissa + shifted)
    }

    pub fn scale(self, c: f64) -> LogScaled {
        debug_assert!(c >= 0.0);
        LogScaled::new(self.ln_scale, self.mantissa * c)
    }

    /// Ratio self / other as a plain f64 (finite whenever the exponent
    /// difference is moderate).
    pub fn ratio(self, other: LogScaled) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        if other.is_zero() {
            return f64::INFINITY;
        }
        (self.mantissa / other.mantissa) * (self.ln_scale - other.ln_scale).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn add_rebases_to_larger_exponent() {
        let a = LogScaled::new(1000.0, 2.0);
        let b = LogScaled::new(999.0, 1.0);
        let s = a.add(b);
        assert_eq!(s.ln_scale, 1000.0);
        assert_relative_eq!(s.mantissa, 2.0 + (-1.0f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn ratio_cancels_shared_scale() {
        let a = LogScaled::new(5000.0, 3.0);
        let b = LogScaled::new(5000.0, 1.5);
        assert_relative_eq!(a.ratio(b), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn agrees_with_naive_when_in_range() {
        let a = LogScaled::new(2.0, 0.7);
        let b = LogScaled::new(-1.0, 0.3);
        let naive = 0.7 * 2.0f64.exp() + 0.3 * (-1.0f64).exp();
        assert_relative_eq!(a.add(b).to_f64(), naive, max_relative = 1e-12);
    }
}
