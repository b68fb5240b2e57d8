//! Fully-connected two-label CRF refined by synchronous mean-field updates.
//!
//! Unaries come from the saliency map (`−log s` for salient, `−log(1 − s)` for
//! background, both clamped away from zero). Pairwise terms are Potts
//! potentials over two Gaussian kernels:
//!
//! * bilateral: `exp(−|Δpos|²/2θα² − |Δrgb|²/2θβ²)`, weight `w_bilateral`
//! * smoothness: `exp(−|Δpos|²/2θγ²)`, weight `w_gaussian`
//!
//! Each kernel is row-normalized by default so that a pixel's pairwise energy
//! is a weighted average over its neighbours and does not depend on how many
//! neighbours it has.
//!
//! Two message-passing paths exist. [`CrfMethod::Exact`] builds the dense
//! `N × N` operator. [`CrfMethod::Windowed`] truncates both kernels at
//! `truncation` standard deviations, evaluates the smoothness kernel as a
//! separable filter and the bilateral kernel over the window offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, MapSource, SaliencyMap};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelNormalization {
    /// Raw Gaussian sums.
    None,
    /// Each kernel's row sums to one (pixels without neighbours get no pairwise term).
    Row,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrfMethod {
    Exact,
    Windowed,
    /// Exact up to `exact_max_pixels`, windowed above.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfParams {
    pub iterations: usize,
    pub w_bilateral: f64,
    pub w_gaussian: f64,
    /// Bilateral spatial stddev in pixels at `reference_size`; scaled linearly
    /// with the image's larger side.
    pub theta_alpha: f64,
    pub reference_size: f64,
    /// Bilateral colour stddev in RGB units (`[0, 1]` scale).
    pub theta_beta: f64,
    /// Smoothness-kernel stddev in pixels (not scaled).
    pub theta_gamma: f64,
    pub unary_clamp: f64,
    pub normalization: KernelNormalization,
    pub method: CrfMethod,
    /// Window half-width in standard deviations for the windowed path.
    pub truncation: f64,
    pub exact_max_pixels: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            iterations: 5,
            w_bilateral: 4.0,
            w_gaussian: 3.0,
            theta_alpha: 30.0,
            reference_size: 432.0,
            theta_beta: 0.1,
            theta_gamma: 3.0,
            unary_clamp: 1e-6,
            normalization: KernelNormalization::Row,
            method: CrfMethod::Auto,
            truncation: 4.0,
            exact_max_pixels: 1024,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("theta_alpha", self.theta_alpha),
            ("reference_size", self.reference_size),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
            ("unary_clamp", self.unary_clamp),
            ("truncation", self.truncation),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("CRF parameter {name} must be positive")));
            }
        }
        if self.w_bilateral < 0.0 || self.w_gaussian < 0.0 {
            return Err(Error::invalid("CRF kernel weights must be non-negative"));
        }
        if self.unary_clamp >= 0.5 {
            return Err(Error::invalid("CRF unary clamp must be below 0.5"));
        }
        Ok(())
    }

    /// Bilateral spatial stddev for an image of the given size.
    pub fn effective_theta_alpha(&self, width: usize, height: usize) -> f64 {
        self.theta_alpha * width.max(height) as f64 / self.reference_size
    }

    fn resolved_method(&self, pixels: usize) -> CrfMethod {
        match self.method {
            CrfMethod::Auto if pixels <= self.exact_max_pixels => CrfMethod::Exact,
            CrfMethod::Auto => CrfMethod::Windowed,
            m => m,
        }
    }
}

enum Operator<T: Scalar> {
    /// Row-major `N × N` combined weights (diagonal zero).
    Dense(Vec<T>),
    Windowed(WindowedOperator<T>),
}

struct WindowedOperator<T: Scalar> {
    width: usize,
    height: usize,
    /// Bilateral weights per half-plane offset, `w_bilateral` and any row
    /// normalization folded in separately via `bilateral_scale`.
    offsets: Vec<(isize, usize, Vec<T>)>,
    bilateral_scale: Vec<T>,
    gauss_taps: Vec<T>,
    gauss_scale: Vec<T>,
}

impl<T: Scalar> WindowedOperator<T> {
    fn bilateral_sum(&self, q: &[T], out: &mut [T]) {
        let w = self.width;
        let h = self.height;
        out.iter_mut().for_each(|v| *v = T::zero());
        for (dx, dy, plane) in &self.offsets {
            let (dx, dy) = (*dx, *dy);
            let xs = if dx < 0 { (-dx) as usize } else { 0 };
            let xe = if dx > 0 { w - dx as usize } else { w };
            if xs >= xe {
                continue;
            }
            for y in 0..h - dy {
                let i0 = y * w + xs;
                let i1 = y * w + xe;
                let j0 = ((y + dy) * w + xs) as isize + dx;
                let j0 = j0 as usize;
                let j1 = j0 + (i1 - i0);
                let k = &plane[i0..i1];
                {
                    let (acc, src) = (&mut out[i0..i1], &q[j0..j1]);
                    for ((a, &kk), &s) in acc.iter_mut().zip(k).zip(src) {
                        *a = *a + kk * s;
                    }
                }
                {
                    let (acc, src) = (&mut out[j0..j1], &q[i0..i1]);
                    for ((a, &kk), &s) in acc.iter_mut().zip(k).zip(src) {
                        *a = *a + kk * s;
                    }
                }
            }
        }
    }

    fn gauss_sum(&self, q: &[T], out: &mut [T]) {
        separable_gauss(q, self.width, self.height, &self.gauss_taps, out);
        // drop the self term (centre tap is 1 in both passes)
        for (o, &v) in out.iter_mut().zip(q) {
            *o = *o - v;
        }
    }

    fn apply(&self, q: &[T], out: &mut [T], scratch: &mut [T]) {
        self.bilateral_sum(q, scratch);
        self.gauss_sum(q, out);
        for i in 0..out.len() {
            out[i] = out[i] * self.gauss_scale[i] + scratch[i] * self.bilateral_scale[i];
        }
    }
}

fn separable_gauss<T: Scalar>(q: &[T], w: usize, h: usize, taps: &[T], out: &mut [T]) {
    let r = (taps.len() - 1) as isize;
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        let row = &q[y * w..(y + 1) * w];
        for x in 0..w as isize {
            let mut acc = T::zero();
            let lo = (x - r).max(0);
            let hi = (x + r).min(w as isize - 1);
            for xx in lo..=hi {
                acc = acc + taps[(xx - x).unsigned_abs()] * row[xx as usize];
            }
            tmp[y * w + x as usize] = acc;
        }
    }
    for y in 0..h as isize {
        let lo = (y - r).max(0);
        let hi = (y + r).min(h as isize - 1);
        let o = &mut out[y as usize * w..(y as usize + 1) * w];
        o.iter_mut().for_each(|v| *v = T::zero());
        for yy in lo..=hi {
            let t = taps[(yy - y).unsigned_abs()];
            let src = &tmp[yy as usize * w..(yy as usize + 1) * w];
            for (a, &s) in o.iter_mut().zip(src) {
                *a = *a + t * s;
            }
        }
    }
}

/// `exp(-x)` for `x >= 0` by linear interpolation in a table; relative error
/// below 3e-7, zero past `exp(-24)`.
struct ExpTable<T: Scalar> {
    per_unit: T,
    limit: T,
    values: Vec<T>,
}

impl<T: Scalar> ExpTable<T> {
    const PER_UNIT: usize = 1024;
    const RANGE: usize = 24;

    fn new() -> Self {
        let n = Self::PER_UNIT * Self::RANGE;
        let values = (0..=n + 1)
            .map(|i| T::of((-(i as f64) / Self::PER_UNIT as f64).exp()))
            .collect();
        Self {
            per_unit: T::of_usize(Self::PER_UNIT),
            limit: T::of_usize(n),
            values,
        }
    }

    #[inline]
    fn eval(&self, x: T) -> T {
        let u = x * self.per_unit;
        if !(u < self.limit) {
            return T::zero();
        }
        let i = u.to_usize().unwrap_or(0);
        let frac = u - T::of_usize(i);
        let (a, b) = (self.values[i], self.values[i + 1]);
        a + frac * (b - a)
    }
}

/// Precomputed pairwise operator for one image; reusable across maps.
pub struct CrfKernel<T: Scalar = f32> {
    width: usize,
    height: usize,
    params: CrfParams,
    op: Operator<T>,
    /// `Σ_m w_m Σ_j k̃_m(i, j)` per pixel.
    row_mass: Vec<T>,
}

impl<T: Scalar> CrfKernel<T> {
    pub fn new(image: &Image<T>, params: &CrfParams) -> Result<Self> {
        params.validate()?;
        let (w, h) = image.dims();
        let n = w * h;
        let theta_a = params.effective_theta_alpha(w, h);
        let inv_a = 1.0 / (2.0 * theta_a * theta_a);
        let inv_b = 1.0 / (2.0 * params.theta_beta * params.theta_beta);
        let inv_g = 1.0 / (2.0 * params.theta_gamma * params.theta_gamma);
        let colors: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let c = image.rgb_at(i);
                [c[0].f64(), c[1].f64(), c[2].f64()]
            })
            .collect();
        let color_d2 = |i: usize, j: usize| {
            let (a, b) = (colors[i], colors[j]);
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
        };
        let normalize = params.normalization == KernelNormalization::Row;

        match params.resolved_method(n) {
            CrfMethod::Exact => {
                let mut bil = vec![0.0f64; n * n];
                let mut gau = vec![0.0f64; n * n];
                for i in 0..n {
                    let (xi, yi) = ((i % w) as f64, (i / w) as f64);
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let (xj, yj) = ((j % w) as f64, (j / w) as f64);
                        let d2 = (xi - xj).powi(2) + (yi - yj).powi(2);
                        bil[i * n + j] = (-d2 * inv_a - color_d2(i, j) * inv_b).exp();
                        gau[i * n + j] = (-d2 * inv_g).exp();
                    }
                }
                let mut dense = vec![T::zero(); n * n];
                let mut row_mass = vec![T::zero(); n];
                for i in 0..n {
                    let (sb, sg) = if normalize {
                        let sb: f64 = bil[i * n..(i + 1) * n].iter().sum();
                        let sg: f64 = gau[i * n..(i + 1) * n].iter().sum();
                        (
                            if sb > 0.0 { params.w_bilateral / sb } else { 0.0 },
                            if sg > 0.0 { params.w_gaussian / sg } else { 0.0 },
                        )
                    } else {
                        (params.w_bilateral, params.w_gaussian)
                    };
                    let mut mass = 0.0;
                    for j in 0..n {
                        let v = sb * bil[i * n + j] + sg * gau[i * n + j];
                        mass += v;
                        dense[i * n + j] = T::of(v);
                    }
                    row_mass[i] = T::of(mass);
                }
                Ok(Self {
                    width: w,
                    height: h,
                    params: params.clone(),
                    op: Operator::Dense(dense),
                    row_mass,
                })
            }
            _ => {
                let rb = (params.truncation * theta_a).ceil() as isize;
                let rg = (params.truncation * params.theta_gamma).ceil() as usize;
                let gauss_taps: Vec<T> = (0..=rg).map(|d| T::of((-((d * d) as f64) * inv_g).exp())).collect();
                let planes: [Vec<T>; 3] = [0, 1, 2].map(|c| image.channel(c).to_vec());
                let inv_b_t = T::of(inv_b);
                let table = ExpTable::<T>::new();
                let mut offsets = Vec::new();
                for dy in 0..=rb {
                    for dx in -rb..=rb {
                        if dy == 0 && dx <= 0 {
                            continue;
                        }
                        if dy as usize >= h || dx.unsigned_abs() >= w {
                            continue;
                        }
                        let d2 = (dx * dx + dy * dy) as f64;
                        if d2 > (rb * rb) as f64 {
                            continue;
                        }
                        let spatial = T::of((-d2 * inv_a).exp());
                        let dyu = dy as usize;
                        let xs = if dx < 0 { dx.unsigned_abs() } else { 0 };
                        let xe = if dx > 0 { w - dx as usize } else { w };
                        let mut plane = vec![T::zero(); n];
                        for y in 0..h - dyu {
                            let i0 = y * w + xs;
                            let i1 = y * w + xe;
                            let j0 = ((y + dyu) * w + xs) as isize + dx;
                            let j0 = j0 as usize;
                            let len = i1 - i0;
                            let out = &mut plane[i0..i1];
                            let (ri, rj) = (&planes[0][i0..i1], &planes[0][j0..j0 + len]);
                            let (gi, gj) = (&planes[1][i0..i1], &planes[1][j0..j0 + len]);
                            let (bi, bj) = (&planes[2][i0..i1], &planes[2][j0..j0 + len]);
                            let pairs = ri.iter().zip(rj).zip(gi.iter().zip(gj)).zip(bi.iter().zip(bj));
                            for (o, ((r, g), b)) in out.iter_mut().zip(pairs) {
                                let dr = *r.0 - *r.1;
                                let dg = *g.0 - *g.1;
                                let db = *b.0 - *b.1;
                                *o = spatial * table.eval((dr * dr + dg * dg + db * db) * inv_b_t);
                            }
                        }
                        offsets.push((dx, dyu, plane));
                    }
                }
                let mut op = WindowedOperator {
                    width: w,
                    height: h,
                    offsets,
                    bilateral_scale: vec![T::one(); n],
                    gauss_taps,
                    gauss_scale: vec![T::one(); n],
                };
                let ones = vec![T::one(); n];
                let mut sb = vec![T::zero(); n];
                let mut sg = vec![T::zero(); n];
                op.bilateral_sum(&ones, &mut sb);
                op.gauss_sum(&ones, &mut sg);
                let wb = T::of(params.w_bilateral);
                let wg = T::of(params.w_gaussian);
                let mut row_mass = vec![T::zero(); n];
                for i in 0..n {
                    if normalize {
                        op.bilateral_scale[i] = if sb[i] > T::zero() { wb / sb[i] } else { T::zero() };
                        op.gauss_scale[i] = if sg[i] > T::zero() { wg / sg[i] } else { T::zero() };
                    } else {
                        op.bilateral_scale[i] = wb;
                        op.gauss_scale[i] = wg;
                    }
                    row_mass[i] = op.bilateral_scale[i] * sb[i] + op.gauss_scale[i] * sg[i];
                }
                Ok(Self {
                    width: w,
                    height: h,
                    params: params.clone(),
                    op: Operator::Windowed(op),
                    row_mass,
                })
            }
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.op, Operator::Dense(_))
    }

    /// `Σ_m w_m Σ_j k̃_m(i, j)·q_j` for every pixel `i`.
    fn message(&self, q: &[T], out: &mut [T], scratch: &mut [T]) {
        match &self.op {
            Operator::Dense(m) => {
                let n = q.len();
                for i in 0..n {
                    let row = &m[i * n..(i + 1) * n];
                    out[i] = row.iter().zip(q).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                }
            }
            Operator::Windowed(op) => op.apply(q, out, scratch),
        }
    }

    /// Starts mean-field inference for `map` on this kernel's image.
    pub fn start(&self, map: &SaliencyMap<T>) -> Result<MeanField<'_, T>> {
        if map.dims() != (self.width, self.height) {
            return Err(Error::invalid(format!(
                "CRF image is {}x{} but map is {}x{}",
                self.width,
                self.height,
                map.width(),
                map.height()
            )));
        }
        let c = T::of(self.params.unary_clamp);
        let hi = T::one() - c;
        let q_fg: Vec<T> = map.values().iter().map(|&v| v.max(c).min(hi)).collect();
        let unary_fg = q_fg.iter().map(|&s| -s.ln()).collect();
        let unary_bg = q_fg.iter().map(|&s| -(T::one() - s).ln()).collect();
        let q_bg = q_fg.iter().map(|&s| T::one() - s).collect();
        let n = q_fg.len();
        Ok(MeanField {
            kernel: self,
            unary_fg,
            unary_bg,
            q_fg,
            q_bg,
            msg: vec![T::zero(); n],
            scratch: vec![T::zero(); n],
        })
    }

    /// Runs the configured number of iterations and returns the salient marginal.
    pub fn refine(&self, map: &SaliencyMap<T>) -> Result<SaliencyMap<T>> {
        let mut mf = self.start(map)?;
        for _ in 0..self.params.iterations {
            mf.step();
        }
        mf.into_map()
    }
}

/// In-progress mean-field state.
pub struct MeanField<'k, T: Scalar> {
    kernel: &'k CrfKernel<T>,
    unary_fg: Vec<T>,
    unary_bg: Vec<T>,
    q_fg: Vec<T>,
    q_bg: Vec<T>,
    msg: Vec<T>,
    scratch: Vec<T>,
}

impl<'k, T: Scalar> MeanField<'k, T> {
    /// One synchronous update of every pixel's marginals.
    pub fn step(&mut self) {
        self.kernel.message(&self.q_fg, &mut self.msg, &mut self.scratch);
        for i in 0..self.q_fg.len() {
            // without pairwise mass the unary marginal (the clamped input) is already the fixed point
            if self.kernel.row_mass[i] == T::zero() {
                continue;
            }
            // Potts: E(l) = u(l) + Σ w k̃ (1 − Q_j(l)), and Q_j(bg) = 1 − Q_j(fg)
            let e_fg = self.unary_fg[i] + (self.kernel.row_mass[i] - self.msg[i]);
            let e_bg = self.unary_bg[i] + self.msg[i];
            let m = e_fg.min(e_bg);
            let a = (m - e_fg).exp();
            let b = (m - e_bg).exp();
            let z = a + b;
            self.q_fg[i] = a / z;
            self.q_bg[i] = b / z;
        }
    }

    pub fn q_salient(&self) -> &[T] {
        &self.q_fg
    }

    pub fn q_background(&self) -> &[T] {
        &self.q_bg
    }

    pub fn into_map(self) -> Result<SaliencyMap<T>> {
        let (w, h) = self.kernel.dims();
        SaliencyMap::new(w, h, self.q_fg, MapSource::Crf)
    }
}

/// Refines a saliency map with dense-CRF mean field on its image.
pub fn dense_crf_refine<T: Scalar>(image: &Image<T>, map: &SaliencyMap<T>, params: &CrfParams) -> Result<SaliencyMap<T>> {
    if image.dims() != map.dims() {
        return Err(Error::invalid(format!(
            "image is {}x{} but map is {}x{}",
            image.width(),
            image.height(),
            map.width(),
            map.height()
        )));
    }
    CrfKernel::new(image, params)?.refine(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(method: CrfMethod) -> CrfParams {
        CrfParams {
            method,
            ..CrfParams::default()
        }
    }

    #[test]
    fn zero_weights_return_clamped_input() {
        let img = Image::<f64>::from_fn(6, 5, |x, y| [x as f64 / 6.0, y as f64 / 5.0, 0.5]).unwrap();
        let vals: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let map = SaliencyMap::new(6, 5, vals, MapSource::Network).unwrap();
        for method in [CrfMethod::Exact, CrfMethod::Windowed] {
            let p = CrfParams {
                w_bilateral: 0.0,
                w_gaussian: 0.0,
                ..params(method)
            };
            let out = dense_crf_refine(&img, &map, &p).unwrap();
            for (o, i) in out.values().iter().zip(map.values()) {
                assert_eq!(*o, i.clamp(1e-6, 1.0 - 1e-6));
            }
        }
    }

    #[test]
    fn zero_iterations_is_unary() {
        let img = Image::<f64>::filled(4, 4, [0.2, 0.4, 0.6]).unwrap();
        let map = SaliencyMap::new(4, 4, vec![0.0; 16], MapSource::Network).unwrap();
        let p = CrfParams {
            iterations: 0,
            ..CrfParams::default()
        };
        let out = dense_crf_refine(&img, &map, &p).unwrap();
        assert!(out.values().iter().all(|&v| v == 1e-6));
    }

    #[test]
    fn dimension_mismatch() {
        let img = Image::<f64>::filled(4, 4, [0.2, 0.4, 0.6]).unwrap();
        let map = SaliencyMap::new(4, 3, vec![0.5; 12], MapSource::Network).unwrap();
        assert!(dense_crf_refine(&img, &map, &CrfParams::default()).is_err());
    }

    #[test]
    fn windowed_matches_exact_on_small_image() {
        let img = Image::<f64>::from_fn(12, 10, |x, y| {
            let on = (x as f64 - 6.0).powi(2) + (y as f64 - 5.0).powi(2) < 12.0;
            if on {
                [0.9, 0.2, 0.1]
            } else {
                [0.1, 0.3 + 0.02 * (x % 3) as f64, 0.6]
            }
        })
        .unwrap();
        let vals: Vec<f64> = (0..120).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let map = SaliencyMap::new(12, 10, vals, MapSource::Network).unwrap();
        let p = CrfParams {
            reference_size: 12.0 * 432.0 / 30.0 / 2.0,
            truncation: 6.0,
            ..CrfParams::default()
        };
        let exact = dense_crf_refine(&img, &map, &CrfParams { method: CrfMethod::Exact, ..p.clone() }).unwrap();
        let win = dense_crf_refine(&img, &map, &CrfParams { method: CrfMethod::Windowed, ..p }).unwrap();
        for (a, b) in exact.values().iter().zip(win.values()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
