//! Scalar numeric kernels for the solver hot path.

/// Natural logarithm specialized to strictly positive *normal* doubles.
///
/// This is the classic Sun/fdlibm reduction: split `x = 2^k · m` with
/// `m ∈ [√2/2, √2)`, then evaluate a rational polynomial in
/// `s = (m−1)/(m+1)`. Accuracy is ~1 ulp on the supported range (asserted
/// against `f64::ln` in tests). Zero, negatives, infinities, NaN, and
/// subnormals are *not* handled — callers floor their inputs first — which
/// keeps the function branch-free and lets the compiler unroll loops of it.
#[inline]
pub(crate) fn ln_normal(x: f64) -> f64 {
    debug_assert!(x.is_normal() && x > 0.0, "ln_normal expects positive normal input, got {x}");
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const LG1: f64 = 6.666_666_666_666_735_13e-1;
    const LG2: f64 = 3.999_999_999_940_941_908e-1;
    const LG3: f64 = 2.857_142_874_366_239_149e-1;
    const LG4: f64 = 2.222_219_843_214_978_396e-1;
    const LG5: f64 = 1.818_357_216_161_805_012e-1;
    const LG6: f64 = 1.531_383_769_920_937_332e-1;
    const LG7: f64 = 1.479_819_860_511_658_591e-1;

    let bits = x.to_bits();
    let mut hx = (bits >> 32) as u32;
    let lx = bits as u32;
    // shift the mantissa window so the reduced value lands in [√2/2, √2)
    hx = hx.wrapping_add(0x3ff0_0000 - 0x3fe6_a09e);
    let k = (hx >> 20) as i32 - 0x3ff;
    hx = (hx & 0x000f_ffff) + 0x3fe6_a09e;
    let m = f64::from_bits(((hx as u64) << 32) | lx as u64);

    let f = m - 1.0;
    let s = f / (2.0 + f);
    let z = s * s;
    let w = z * z;
    let t1 = w * (LG2 + w * (LG4 + w * LG6));
    let t2 = z * (LG1 + w * (LG3 + w * (LG5 + w * LG7)));
    let r = t2 + t1;
    let hfsq = 0.5 * f * f;
    let dk = k as f64;
    dk * LN2_HI - ((hfsq - (s * (hfsq + r) + dk * LN2_LO)) - f)
}
