//! Adaptive Gauss–Kronrod (7, 15) quadrature.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_8,
];
// Gauss weights at XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// One G7K15 panel: `(kronrod, |kronrod − gauss|)`.
pub fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Panel budget per call.
pub const MAX_PANELS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub panels: usize,
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol` by recursive bisection.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Quadrature {
    let mut out = Quadrature { value: 0.0, error: 0.0, panels: 0 };
    if a == b {
        return out;
    }
    let mut stack = vec![(a, b, tol, 0u32)];
    while let Some((lo, hi, t, depth)) = stack.pop() {
        let (v, e) = gk15(f, lo, hi);
        out.panels += 1;
        // Stop at the tolerance, at the roundoff floor of the panel, or when out of budget.
        let floor = 50.0 * f64::EPSILON * v.abs();
        let exhausted = out.panels + stack.len() >= MAX_PANELS;
        if e <= t.max(floor) || exhausted || depth >= 60 || hi - lo <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs()) {
            out.value += v;
            out.error += e;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((mid, hi, 0.5 * t, depth + 1));
            stack.push((lo, mid, 0.5 * t, depth + 1));
        }
    }
    out
}
