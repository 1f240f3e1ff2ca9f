//! Branch-free `exp` and `ln` for `f64`, written so that loops calling them
//! auto-vectorize. Reduction and polynomials follow the classic fdlibm
//! routines; both stay within about one ulp of `std`.

const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-01;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const INV_LN2: f64 = 1.442_695_040_888_963_387_00e+00;
// 1.5 * 2^52: adding it rounds to an integer kept in the low mantissa bits.
const ROUND_SHIFT: f64 = 6_755_399_441_055_744.0;

const EXP_P1: f64 = 1.666_666_666_666_660_190_37e-01;
const EXP_P2: f64 = -2.777_777_777_701_559_338_42e-03;
const EXP_P3: f64 = 6.613_756_321_437_934_361_17e-05;
const EXP_P4: f64 = -1.653_390_220_546_525_153_90e-06;
const EXP_P5: f64 = 4.138_136_797_057_238_460_39e-08;

// Below this exp is close to the subnormal range; the result is flushed to zero.
const EXP_MIN: f64 = -708.0;
const EXP_MAX: f64 = 709.78;

const LG1: f64 = 6.666_666_666_666_735_130e-01;
const LG2: f64 = 3.999_999_999_940_941_908e-01;
const LG3: f64 = 2.857_142_874_366_239_149e-01;
const LG4: f64 = 2.222_219_843_214_978_396e-01;
const LG5: f64 = 1.818_357_216_161_805_012e-01;
const LG6: f64 = 1.531_383_769_920_937_332e-01;
const LG7: f64 = 1.479_819_860_511_658_591e-01;

const MANTISSA: u64 = (1 << 52) - 1;
const ONE_BITS: u64 = 0x3ff0_0000_0000_0000;
const TWO52: f64 = 4_503_599_627_370_496.0;
const TWO52_BITS: u64 = 0x4330_0000_0000_0000;

/// `e^x`. Inputs below `-708` give `0`, above `709.78` give `inf`.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let xc = x.clamp(EXP_MIN, EXP_MAX);
    let shifted = xc * INV_LN2 + ROUND_SHIFT;
    let k = shifted - ROUND_SHIFT;
    let hi = xc - k * LN2_HI;
    let lo = k * LN2_LO;
    let r = hi - lo;
    let t = r * r;
    let c = r - t * (EXP_P1 + t * (EXP_P2 + t * (EXP_P3 + t * (EXP_P4 + t * EXP_P5))));
    let y = 1.0 - ((lo - (r * c) / (2.0 - c)) - hi);
    // 2^(k-1) stays normal for k in [-1021, 1024].
    let ki = shifted.to_bits().wrapping_add(1022) << 52;
    let v = y * f64::from_bits(ki) * 2.0;
    let v = if x < EXP_MIN { 0.0 } else { v };
    if x > EXP_MAX {
        f64::INFINITY
    } else {
        v
    }
}

/// Natural log of a positive normal `x`; other inputs give unspecified
/// values and must be screened by the caller.
#[inline(always)]
pub fn ln(x: f64) -> f64 {
    let bits = x.to_bits();
    // biased exponent as a float, without an int-to-float conversion
    let e = f64::from_bits(TWO52_BITS | (bits >> 52)) - (TWO52 + 1023.0);
    let m = f64::from_bits((bits & MANTISSA) | ONE_BITS);
    let big = m > std::f64::consts::SQRT_2;
    let m = if big { m * 0.5 } else { m };
    let k = if big { e + 1.0 } else { e };
    let f = m - 1.0;
    let s = f / (2.0 + f);
    let z = s * s;
    let w = z * z;
    let t1 = w * (LG2 + w * (LG4 + w * LG6));
    let t2 = z * (LG1 + w * (LG3 + w * (LG5 + w * LG7)));
    let r = t2 + t1;
    let hfsq = 0.5 * f * f;
    k * LN2_HI - ((hfsq - (s * (hfsq + r) + k * LN2_LO)) - f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ulps(a: f64, b: f64) -> u64 {
        (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
    }

    #[test]
    fn exp_matches_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0;
        for _ in 0..200_000 {
            let x = rng.gen_range(-708.0..709.0);
            worst = worst.max(ulps(exp(x), x.exp()));
        }
        for _ in 0..200_000 {
            let x: f64 = rng.gen_range(-2.0..2.0);
            worst = worst.max(ulps(exp(x), x.exp()));
        }
        assert!(worst <= 2, "worst {worst} ulps");
    }

    #[test]
    fn exp_special_points() {
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(-800.0), 0.0);
        assert_eq!(exp(f64::NEG_INFINITY), 0.0);
        assert_eq!(exp(800.0), f64::INFINITY);
        assert!(ulps(exp(1.0), std::f64::consts::E) <= 1);
        assert!(exp(709.7).is_finite());
    }

    #[test]
    fn ln_matches_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0;
        for _ in 0..200_000 {
            let x = 10f64.powf(rng.gen_range(-300.0..300.0));
            worst = worst.max(ulps(ln(x), x.ln()));
        }
        for _ in 0..200_000 {
            let x: f64 = rng.gen_range(0.5..2.0);
            let (a, b) = (ln(x), x.ln());
            assert!((a - b).abs() <= 2.0 * f64::EPSILON * b.abs().max(f64::MIN_POSITIVE), "{x}");
        }
        assert!(worst <= 2, "worst {worst} ulps");
    }

    #[test]
    fn ln_special_points() {
        assert_eq!(ln(1.0), 0.0);
        assert!(ulps(ln(2.0), std::f64::consts::LN_2) <= 1);
        assert!(ulps(ln(f64::MIN_POSITIVE), f64::MIN_POSITIVE.ln()) <= 1);
        assert!(ulps(ln(f64::MAX), f64::MAX.ln()) <= 1);
    }
}
