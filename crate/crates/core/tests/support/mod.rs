//! Oracles and random draws shared by the integration tests.

#![allow(dead_code)]

use lattice_trend::model::{CoefficientVector, ExponentVector};
use lattice_trend::rng::CounterRng;
use nalgebra::DMatrix;

/// Sequential uniform draws from the crate's counter-based generator.
pub struct Draws {
    rng: CounterRng,
    counter: u64,
}

impl Draws {
    pub fn new(seed: u64) -> Self {
        Self { rng: CounterRng::new(seed), counter: 0 }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.counter += 1;
        lo + (hi - lo) * self.rng.uniform(self.counter, 0)
    }

    /// Integer in `lo..=hi`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        let span = (hi - lo + 1) as f64;
        lo + ((self.uniform(0.0, 1.0) * span) as usize).min(hi - lo)
    }

    /// `r` sorted values in `[lo, hi]` with consecutive gaps of at least
    /// `gap`, by rejection.
    pub fn separated(&mut self, r: usize, lo: f64, hi: f64, gap: f64) -> Vec<f64> {
        loop {
            let mut v: Vec<f64> = (0..r).map(|_| self.uniform(lo, hi)).collect();
            v.sort_by(f64::total_cmp);
            if v.windows(2).all(|w| w[1] - w[0] >= gap) {
                return v;
            }
        }
    }

    /// Nonzero coefficient with magnitude in `[0.5, 2]`.
    pub fn coefficient(&mut self) -> f64 {
        let m = self.uniform(0.5, 2.0);
        if self.uniform(0.0, 1.0) < 0.5 {
            -m
        } else {
            m
        }
    }

    pub fn coefficients(&mut self, theta: &ExponentVector) -> CoefficientVector {
        CoefficientVector::new(theta.blocks().iter().map(|b| b.iter().map(|_| self.coefficient()).collect()).collect())
    }
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GAUSS_WEIGHTS: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// 15-point Kronrod estimate and its difference from the embedded 7-point
/// Gauss rule.
fn gauss_kronrod(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let center = f(mid);
    let mut kronrod = KRONROD_WEIGHTS[7] * center;
    let mut gauss = GAUSS_WEIGHTS[3] * center;
    for k in 0..7 {
        let x = half * GK_NODES[k];
        let pair = f(mid - x) + f(mid + x);
        kronrod += KRONROD_WEIGHTS[k] * pair;
        if k % 2 == 1 {
            gauss += GAUSS_WEIGHTS[k / 2] * pair;
        }
    }
    (kronrod * half, (kronrod - gauss).abs() * half)
}

/// Adaptive Gauss-Kronrod on `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let mut stack = vec![(a, b, tol, 0u32)];
    let mut total = 0.0;
    while let Some((lo, hi, t, depth)) = stack.pop() {
        let (value, err) = gauss_kronrod(f, lo, hi);
        if err <= t || depth > 60 {
            total += value;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, 0.5 * t, depth + 1));
            stack.push((mid, hi, 0.5 * t, depth + 1));
        }
    }
    total
}

/// `int_0^1 x^e (-ln x)^k dx`, computed as `int_0^inf exp(-(e+1) t) t^k dt`
/// over doubling panels until the tail is negligible.
pub fn log_moment(e: f64, k: i32) -> f64 {
    let f = move |t: f64| (-(e + 1.0) * t).exp() * t.powi(k);
    let mut total = integrate(&f, 0.0, 1.0, 1e-15);
    let mut lo = 1.0;
    loop {
        let piece = integrate(&f, lo, 2.0 * lo, 1e-15);
        total += piece;
        if piece.abs() < 1e-18 && lo > 1.0 {
            return total;
        }
        lo *= 2.0;
    }
}

/// Largest absolute entry of `a - b` over the largest absolute entry of `b`.
pub fn relative_max_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax()
}
