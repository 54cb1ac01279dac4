#![allow(clippy::excessive_precision)]

//! Globally adaptive 7/15-point Gauss–Kronrod quadrature.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

/// Gauss weights for the odd-indexed Kronrod nodes (and the centre).
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, Copy)]
pub struct Integral {
    pub value: f64,
    /// Sum of the per-interval |Kronrod − Gauss| differences.
    pub error: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GaussKronrod {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for GaussKronrod {
    fn default() -> Self {
        Self {
            abs_tol: 1e-14,
            rel_tol: 1e-14,
            max_intervals: 4000,
        }
    }
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let s = f(centre - dx) + f(centre + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

impl GaussKronrod {
    pub fn with_tolerance(abs_tol: f64, rel_tol: f64) -> Self {
        Self {
            abs_tol,
            rel_tol,
            ..Self::default()
        }
    }

    /// Integrates `f` over the finite interval `[a, b]`, bisecting the
    /// interval with the largest error estimate until the total estimate
    /// falls below `max(abs_tol, rel_tol·|value|)` or the interval budget is
    /// exhausted.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> Integral {
        if a == b {
            return Integral { value: 0.0, error: 0.0 };
        }
        let (value, error) = kronrod15(&f, a, b);
        let mut heap = BinaryHeap::new();
        heap.push(Piece { a, b, value, error });
        let mut total = value;
        let mut total_err = error;
        while total_err > self.abs_tol.max(self.rel_tol * total.abs()) && heap.len() < self.max_intervals {
            let worst = heap.pop().expect("heap is never empty");
            let mid = 0.5 * (worst.a + worst.b);
            if mid <= worst.a || mid >= worst.b {
                heap.push(worst);
                break;
            }
            let (v1, e1) = kronrod15(&f, worst.a, mid);
            let (v2, e2) = kronrod15(&f, mid, worst.b);
            total += v1 + v2 - worst.value;
            total_err += e1 + e2 - worst.error;
            heap.push(Piece {
                a: worst.a,
                b: mid,
                value: v1,
                error: e1,
            });
            heap.push(Piece {
                a: mid,
                b: worst.b,
                value: v2,
                error: e2,
            });
        }
        // re-sum to shed the drift of the running updates
        let mut pieces: Vec<Piece> = heap.into_vec();
        pieces.sort_by(|p, q| p.a.total_cmp(&q.a));
        Integral {
            value: pieces.iter().map(|p| p.value).sum(),
            error: pieces.iter().map(|p| p.error).sum(),
        }
    }
}
