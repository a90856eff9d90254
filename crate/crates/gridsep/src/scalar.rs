use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors and the tape.
///
/// Everything numeric is generic over this so the same code path runs in
/// f64 (gradient checks, determinism tests) and f32 (training throughput).
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Logistic sigmoid, written in a branch-free form that stays finite
    /// for large |x| in both precisions.
    #[inline]
    fn sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }

    /// Exponential for throughput-critical inner loops. Exact (libm) in f64;
    /// f32 substitutes a polynomial approximation within ~2 ulp, which is
    /// below the noise floor of single-precision training.
    #[inline]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    /// Sigmoid via [`Scalar::fast_exp`]; same saturation behavior.
    #[inline]
    fn fast_sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).fast_exp())
        } else {
            let e = self.fast_exp();
            e / (one + e)
        }
    }

    /// Hyperbolic tangent via [`Scalar::fast_exp`] in f32, libm in f64.
    #[inline]
    fn fast_tanh(self) -> Self {
        self.tanh()
    }

    /// In-place sigmoid over a slice. The default loop monomorphizes to the
    /// branch-free scalar bodies, which the compiler turns into SIMD code;
    /// keeping the entry point slice-shaped is what makes that possible.
    #[inline]
    fn fast_sigmoid_slice(xs: &mut [Self]) {
        for x in xs {
            *x = x.fast_sigmoid();
        }
    }

    /// In-place tanh over a slice; see [`Scalar::fast_sigmoid_slice`].
    #[inline]
    fn fast_tanh_slice(xs: &mut [Self]) {
        for x in xs {
            *x = x.fast_tanh();
        }
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn fast_exp(self) -> f32 {
        // 2^r · eᶠ. Adding 1.5·2²³ rounds r = x·log2 e to the nearest integer
        // in the low mantissa bits of z (ulp(z) = 1 there), so both r and the
        // exponent bit pattern fall out of float adds and a shift — no round()
        // call, no float→int cast, nothing that blocks vectorization.
        // f = x − r·ln2 uses a Cody–Waite split (the hi product is exact for
        // integer |r| ≤ 127), then a degree-6 Taylor of eᶠ on |f| ≤ ln2/2
        // (truncation ≤ 1.3e-8 relative). The clamp keeps the biased exponent
        // inside [1, 254]: no Inf, no denormals.
        const MAGIC: f32 = 12_582_912.0; // 1.5 · 2²³
        const LN2_HI: f32 = 6.931_457_5e-1;
        const LN2_LO: f32 = 1.428_606_8e-6;
        let x = self.clamp(-87.0, 88.0);
        let z = x.mul_add(std::f32::consts::LOG2_E, MAGIC);
        let r = z - MAGIC;
        let f = r.mul_add(-LN2_LO, r.mul_add(-LN2_HI, x));
        let p = 1.0
            + f * (1.0
                + f * (0.5
                    + f * (1.0 / 6.0
                        + f * (1.0 / 24.0 + f * (1.0 / 120.0 + f * (1.0 / 720.0))))));
        f32::from_bits((z.to_bits() << 23).wrapping_add(0x3f80_0000)) * p
    }

    #[inline]
    fn fast_sigmoid(self) -> f32 {
        // Branch-free: e = e^−|x| never overflows, and the two half-line
        // formulas meet at x = 0. Written with a select, not a branch, so the
        // slice loops stay vectorizable.
        let e = (-self.abs()).fast_exp();
        let s = e / (1.0 + e);
        if self >= 0.0 {
            1.0 - s
        } else {
            s
        }
    }

    #[inline]
    fn fast_tanh(self) -> f32 {
        // tanh(x) = (e²ˣ − 1)/(e²ˣ + 1); fast_exp saturates cleanly at ±1
        let e = (2.0 * self).fast_exp();
        (e - 1.0) / (e + 1.0)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_definition() {
        for &x in &[-30.0f64, -2.0, -0.5, 0.0, 0.5, 2.0, 30.0] {
            let want = 1.0 / (1.0 + (-x).exp());
            assert!((x.sigmoid() - want).abs() < 1e-15, "x={x}");
        }
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(f32::sigmoid(200.0), 1.0);
        assert_eq!(f32::sigmoid(-200.0), 0.0);
        assert!(f64::sigmoid(-745.0).is_finite());
    }

    #[test]
    fn f64_fast_paths_are_the_precise_ones() {
        for &x in &[-20.0f64, -1.5, 0.0, 1e-6, 0.7, 30.0] {
            assert_eq!(x.fast_exp(), x.exp());
            assert_eq!(x.fast_tanh(), x.tanh());
            assert_eq!(x.fast_sigmoid(), x.sigmoid());
        }
    }

    #[test]
    fn f32_fast_exp_accuracy_and_saturation() {
        let mut worst = 0.0f32;
        let mut x = -86.0f32;
        while x < 86.0 {
            let rel = (x.fast_exp() - x.exp()).abs() / x.exp();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 3e-7, "worst rel err {worst}");
        assert!(f32::fast_exp(1000.0).is_finite());
        assert!(f32::fast_exp(-1000.0) > 0.0);
        assert_eq!(f32::fast_exp(0.0), 1.0);
    }

    #[test]
    fn f32_fast_tanh_and_sigmoid_accuracy() {
        let mut worst_t = 0.0f32;
        let mut worst_s = 0.0f32;
        let mut x = -12.0f32;
        while x < 12.0 {
            worst_t = worst_t.max((x.fast_tanh() - x.tanh()).abs());
            let want = 1.0 / (1.0 + (-x).exp());
            worst_s = worst_s.max((x.fast_sigmoid() - want).abs());
            x += 0.00113;
        }
        assert!(worst_t < 5e-7, "tanh abs err {worst_t}");
        assert!(worst_s < 5e-7, "sigmoid abs err {worst_s}");
        assert_eq!(f32::fast_tanh(50.0), 1.0);
        assert_eq!(f32::fast_tanh(-50.0), -1.0);
        assert_eq!(f32::fast_sigmoid(100.0), 1.0);
        // The exp clamp at -87 floors the output near 1.6e-38 instead of 0.
        assert!(f32::fast_sigmoid(-100.0) < 1e-30);
    }
}
