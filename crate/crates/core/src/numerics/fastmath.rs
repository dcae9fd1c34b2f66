//! Branch-free `exp` and `tanh` that the compiler can vectorize.
//!
//! libm's scalar `exp` was the single largest cost in training (every
//! hidden unit needs a `tanh`, every output a scale factor).

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_16e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// `1.5·2⁵²`: adding it rounds to an integer held in the low mantissa bits.
const SHIFT: f64 = 6_755_399_441_055_744.0;

/// `eˣ` within 2 ulp for `x ∈ [−708, 709]`; inputs outside are clamped, so
/// the result never overflows to infinity or flushes to zero.
#[inline]
pub fn exp(x: f64) -> f64 {
    let x = if x > 709.0 { 709.0 } else if x < -708.0 { -708.0 } else { x };
    let t = x * LOG2E + SHIFT;
    let k = t - SHIFT;
    let r = x - k * LN2_HI - k * LN2_LO;
    // Taylor series to r¹³; |r| ≤ ln2/2 keeps the truncation below 1e-17
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // low bits of `t` hold k; move k + bias into the exponent field
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    p * scale
}

/// `tanh` via one [`exp`]; absolute error within a few ulps of 1.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = exp(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}
