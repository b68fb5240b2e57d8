//! Images, saliency maps and binary masks, plus the basic transforms every
//! stage depends on: bilinear resizing, min-max normalization and the
//! pseudo-label discretization rule.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Discretization factor: a pixel is salient when it exceeds this multiple
/// of the map's mean saliency.
pub const PSEUDO_LABEL_MEAN_FACTOR: f64 = 1.5;

/// RGB image with planar storage and channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T: Scalar = f32> {
    width: usize,
    height: usize,
    /// Planar: all R, then all G, then all B.
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "expected {} channel values for a {width}x{height} RGB image, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Solid-colour image.
    pub fn filled(width: usize, height: usize, rgb: [T; 3]) -> Result<Self> {
        let n = width * height;
        let mut data = Vec::with_capacity(n * 3);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(n));
        }
        Self::new(width, height, data)
    }

    /// Builds an image by evaluating `f(x, y)` per pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Result<Self> {
        let n = width * height;
        let mut data = vec![T::zero(); n * 3];
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                let i = y * width + x;
                data[i] = px[0];
                data[n + i] = px[1];
                data[2 * n + i] = px[2];
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn planar(&self) -> &[T] {
        &self.data
    }

    pub fn rgb(&self, x: usize, y: usize) -> [T; 3] {
        let n = self.pixel_count();
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn rgb_at(&self, i: usize) -> [T; 3] {
        let n = self.pixel_count();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Where a saliency map came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    Handcrafted(String),
    Network,
    Mva,
    Crf,
    Unknown,
}

impl fmt::Display for MapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapSource::Handcrafted(name) => write!(f, "handcrafted:{name}"),
            MapSource::Network => f.write_str("network"),
            MapSource::Mva => f.write_str("mva"),
            MapSource::Crf => f.write_str("crf"),
            MapSource::Unknown => f.write_str("unknown"),
        }
    }
}

/// Continuous per-pixel saliency in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T: Scalar = f32> {
    width: usize,
    height: usize,
    values: Vec<T>,
    pub source: MapSource,
    /// Set when the map came out of a degenerate normalization (constant input).
    pub degenerate: bool,
}

impl<T: Scalar> SaliencyMap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>, source: MapSource) -> Result<Self> {
        let map = Self::unchecked_range(width, height, values, source)?;
        if let Some(v) = map.values.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::invalid(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(map)
    }

    /// Like [`SaliencyMap::new`] but accepts values outside `[0, 1]`; used for
    /// raw detector scores before [`normalize_minmax`].
    pub fn unchecked_range(width: usize, height: usize, values: Vec<T>, source: MapSource) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("map dimensions must be positive"));
        }
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "expected {} values for a {width}x{height} map, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            source,
            degenerate: false,
        })
    }

    pub fn constant(width: usize, height: usize, value: T, source: MapSource) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], source)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::of_usize(self.values.len())
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn with_source(mut self, source: MapSource) -> Self {
        self.source = source;
        self
    }

    pub fn cast<U: Scalar>(&self) -> SaliencyMap<U> {
        SaliencyMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
            source: self.source.clone(),
            degenerate: self.degenerate,
        }
    }

    /// Interprets a binary mask as a 0/1 map.
    pub fn from_mask(mask: &BinaryMask, source: MapSource) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            values: mask
                .values
                .iter()
                .map(|&v| if v == 1 { T::one() } else { T::zero() })
                .collect(),
            source,
            degenerate: false,
        }
    }
}

/// Per-pixel labels in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "expected {} labels for a {width}x{height} mask, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask labels must be 0 or 1"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(u8::from(f(x, y)));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.values.len() as f64
    }
}

/// Dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub id: String,
    pub image: Image<f32>,
    pub gt: Option<BinaryMask>,
    /// Pseudo-labels attached to this sample, keyed by method name.
    pub pseudo: BTreeMap<String, BinaryMask>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image: Image<f32>, gt: Option<BinaryMask>) -> Result<Self> {
        let id = id.into();
        if let Some(gt) = &gt {
            if gt.dims() != image.dims() {
                return Err(Error::Validation {
                    id,
                    reason: format!(
                        "mask is {}x{} but image is {}x{}",
                        gt.width(),
                        gt.height(),
                        image.width(),
                        image.height()
                    ),
                });
            }
        }
        Ok(Self {
            id,
            image,
            gt,
            pseudo: BTreeMap::new(),
        })
    }
}

/// Ordered collection of samples from one split; ids are pairwise distinct.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<SampleRecord>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<SampleRecord>, split: Split) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation {
                    id: s.id.clone(),
                    reason: "duplicate sample id".into(),
                });
            }
        }
        Ok(Self { samples, split })
    }

    pub fn empty(split: Split) -> Self {
        Self {
            samples: Vec::new(),
            split,
        }
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [SampleRecord] {
        &mut self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    /// Keeps only the samples whose id satisfies `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&str) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(&s.id)).cloned().collect(),
            split: self.split,
        }
    }

    /// Ground-truth masks keyed by id; errors if any sample lacks one.
    pub fn ground_truth(&self) -> Result<BTreeMap<String, BinaryMask>> {
        self.samples
            .iter()
            .map(|s| {
                s.gt.clone().map(|m| (s.id.clone(), m)).ok_or_else(|| {
                    Error::invalid(format!("sample `{}` has no ground-truth mask", s.id))
                })
            })
            .collect()
    }
}

/// Bilinear resampling of one plane with half-pixel-centre alignment.
fn resample_plane<T: Scalar>(src: &[T], sw: usize, sh: usize, tw: usize, th: usize) -> Vec<T> {
    let sx_scale = sw as f64 / tw as f64;
    let sy_scale = sh as f64 / th as f64;
    let taps = |t: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let pos = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..tw).map(|x| taps(x, sx_scale, sw)).collect();
    let mut out = Vec::with_capacity(tw * th);
    for y in 0..th {
        let (y0, y1, fy) = taps(y, sy_scale, sh);
        for &(x0, x1, fx) in &cols {
            let a = src[y0 * sw + x0].f64();
            let b = src[y0 * sw + x1].f64();
            let c = src[y1 * sw + x0].f64();
            let d = src[y1 * sw + x1].f64();
            let top = a + (b - a) * fx;
            let bot = c + (d - c) * fx;
            out.push(T::of(top + (bot - top) * fy));
        }
    }
    out
}

/// Resizes an image with bilinear interpolation (half-pixel centres).
pub fn resize_bilinear<T: Scalar>(image: &Image<T>, target_w: usize, target_h: usize) -> Result<Image<T>> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    if image.dims() == (target_w, target_h) {
        return Ok(image.clone());
    }
    let mut data = Vec::with_capacity(target_w * target_h * 3);
    for c in 0..3 {
        data.extend(resample_plane(image.channel(c), image.width, image.height, target_w, target_h));
    }
    Ok(Image {
        width: target_w,
        height: target_h,
        data,
    })
}

/// Resizes a saliency map with the same bilinear kernel as [`resize_bilinear`].
pub fn resize_map<T: Scalar>(map: &SaliencyMap<T>, target_w: usize, target_h: usize) -> Result<SaliencyMap<T>> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let values = resample_plane(&map.values, map.width, map.height, target_w, target_h);
    Ok(SaliencyMap {
        width: target_w,
        height: target_h,
        values,
        source: map.source.clone(),
        degenerate: map.degenerate,
    })
}

/// Resizes a mask: bilinear on the 0/1 indicator, then thresholded at 0.5.
pub fn resize_mask(mask: &BinaryMask, target_w: usize, target_h: usize) -> Result<BinaryMask> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    if mask.dims() == (target_w, target_h) {
        return Ok(mask.clone());
    }
    let src: Vec<f64> = mask.values.iter().map(|&v| f64::from(v)).collect();
    let values = resample_plane(&src, mask.width, mask.height, target_w, target_h)
        .into_iter()
        .map(|v| u8::from(v > 0.5))
        .collect();
    BinaryMask::new(target_w, target_h, values)
}

/// Rescales a map to span `[0, 1]`. A constant map becomes all zeros and is
/// flagged `degenerate`.
pub fn normalize_minmax<T: Scalar>(map: &SaliencyMap<T>) -> SaliencyMap<T> {
    let (lo, hi) = map
        .values
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = map.clone();
    if !(hi > lo) {
        out.values.iter_mut().for_each(|v| *v = T::zero());
        out.degenerate = true;
        return out;
    }
    let range = hi - lo;
    out.values
        .iter_mut()
        .for_each(|v| *v = ((*v - lo) / range).max(T::zero()).min(T::one()));
    out.degenerate = false;
    out
}

/// Thresholds a map at `gamma` with a strict inequality (ties are background).
pub fn binarize_at<T: Scalar>(map: &SaliencyMap<T>, gamma: T) -> BinaryMask {
    BinaryMask {
        width: map.width,
        height: map.height,
        values: map.values.iter().map(|&v| u8::from(v > gamma)).collect(),
    }
}

/// The pseudo-label threshold for a map with the given mean saliency.
pub fn pseudo_label_threshold<T: Scalar>(mean: T) -> T {
    T::of(PSEUDO_LABEL_MEAN_FACTOR) * mean
}

/// Discretizes a handcrafted map into a pseudo-label: pixel is salient iff its
/// value exceeds 1.5x the map's own mean.
pub fn binarize_pseudo_label<T: Scalar>(map: &SaliencyMap<T>) -> BinaryMask {
    let mask = binarize_at(map, pseudo_label_threshold(map.mean()));
    if mask.count_ones() == 0 {
        log::debug!("pseudo-label from {} map is empty", map.source);
    }
    mask
}
