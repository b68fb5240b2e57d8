//! Classical saliency detectors that supply the noisy pseudo-labels.
//!
//! All four share one SLIC segmentation per image and return min-max
//! normalized maps. They are stand-ins for the published detectors: each keeps
//! its method's prior (boundary connectivity, absorbing chain, reconstruction
//! error, contrast with a centre bias) rather than every implementation detail.

mod methods;
mod superpixel;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use methods::{
    absorption_times, background_weights, contrast_center_regions, dsr_regions, geodesic_distances, mc_regions,
    rbd_regions, reconstruction_residuals, ContrastCenterParams, DsrParams, McParams, RbdParams,
};
pub use superpixel::{default_superpixel_count, segment_superpixels, Region, SuperpixelSegmentation};

use crate::dataio::{list_pngs, load_map, load_mask, save_map, save_mask};
use crate::error::{Error, Result};
use crate::image::{
    binarize_at, normalize_minmax, pseudo_label_threshold, BinaryMask, Dataset, Image, MapSource, SaliencyMap,
};
use crate::scalar::Scalar;

pub const MIN_IMAGE_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum MethodDescriptor {
    Rbd(RbdParams),
    Mc(McParams),
    DsrLike(DsrParams),
    ContrastCenter(ContrastCenterParams),
}

impl MethodDescriptor {
    pub const NAMES: [&'static str; 4] = ["rbd", "mc", "dsr_like", "contrast_center"];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Rbd(_) => "rbd",
            Self::Mc(_) => "mc",
            Self::DsrLike(_) => "dsr_like",
            Self::ContrastCenter(_) => "contrast_center",
        }
    }

    /// Descriptor with default parameters.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "rbd" => Self::Rbd(RbdParams::default()),
            "mc" => Self::Mc(McParams::default()),
            "dsr_like" => Self::DsrLike(DsrParams::default()),
            "contrast_center" => Self::ContrastCenter(ContrastCenterParams::default()),
            other => return Err(Error::invalid(format!("unknown handcrafted method '{other}'"))),
        })
    }

    pub fn all_default() -> Vec<Self> {
        Self::NAMES.iter().map(|n| Self::by_name(n).expect("known name")).collect()
    }
}

/// How the pseudo-label threshold's mean is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    #[default]
    PerImage,
    DatasetMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationParams {
    /// Requested superpixel count; `None` scales with image area.
    pub superpixels: Option<usize>,
    pub compactness: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            superpixels: None,
            compactness: 10.0,
        }
    }
}

fn check_size<T: Scalar>(image: &Image<T>) -> Result<()> {
    let (w, h) = image.dims();
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
        return Err(Error::invalid(format!(
            "handcrafted methods need at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {w}x{h}"
        )));
    }
    Ok(())
}

pub fn segment_for_methods<T: Scalar>(image: &Image<T>, params: &SegmentationParams) -> Result<SuperpixelSegmentation> {
    check_size(image)?;
    let (w, h) = image.dims();
    let k = params.superpixels.unwrap_or_else(|| default_superpixel_count(w, h));
    segment_superpixels(image, k, params.compactness)
}

fn region_map<T: Scalar>(seg: &SuperpixelSegmentation, per_region: &[f64], name: &str) -> Result<SaliencyMap<T>> {
    let values = seg.rasterize(per_region).into_iter().map(T::of).collect();
    let raw = SaliencyMap::unchecked_range(seg.width, seg.height, values, MapSource::Handcrafted(name.into()))?;
    Ok(normalize_minmax(&raw))
}

/// No colour variation at all: every prior is then about position alone, which
/// is not saliency.
fn is_flat(seg: &SuperpixelSegmentation) -> bool {
    let first = seg.regions[0].mean_lab;
    seg.regions
        .iter()
        .all(|r| crate::color::lab_distance(&r.mean_lab, &first) < 1e-9)
}

/// Runs one detector on an existing segmentation.
pub fn method_on_segmentation<T: Scalar>(
    seg: &SuperpixelSegmentation,
    method: &MethodDescriptor,
) -> Result<SaliencyMap<T>> {
    let name = method.name();
    if is_flat(seg) {
        let mut m = SaliencyMap::constant(seg.width, seg.height, T::zero(), MapSource::Handcrafted(name.into()))?;
        m.degenerate = true;
        return Ok(m);
    }
    match method {
        MethodDescriptor::Rbd(p) => region_map(seg, &rbd_regions(seg, p), name),
        MethodDescriptor::Mc(p) => region_map(seg, &mc_regions(seg, p)?, name),
        MethodDescriptor::DsrLike(p) => match dsr_regions(seg, p)? {
            Some(r) => region_map(seg, &r, name),
            None => {
                let mut m = SaliencyMap::constant(seg.width, seg.height, T::zero(), MapSource::Handcrafted(name.into()))?;
                m.degenerate = true;
                Ok(m)
            }
        },
        MethodDescriptor::ContrastCenter(p) => region_map(seg, &contrast_center_regions(seg, p), name),
    }
}

pub fn compute_method<T: Scalar>(
    image: &Image<T>,
    method: &MethodDescriptor,
    seg: &SegmentationParams,
) -> Result<SaliencyMap<T>> {
    method_on_segmentation(&segment_for_methods(image, seg)?, method)
}

pub fn rbd_saliency<T: Scalar>(image: &Image<T>) -> Result<SaliencyMap<T>> {
    compute_method(image, &MethodDescriptor::Rbd(RbdParams::default()), &SegmentationParams::default())
}

pub fn mc_saliency<T: Scalar>(image: &Image<T>) -> Result<SaliencyMap<T>> {
    compute_method(image, &MethodDescriptor::Mc(McParams::default()), &SegmentationParams::default())
}

pub fn dsr_like_saliency<T: Scalar>(image: &Image<T>) -> Result<SaliencyMap<T>> {
    compute_method(image, &MethodDescriptor::DsrLike(DsrParams::default()), &SegmentationParams::default())
}

pub fn contrast_center_saliency<T: Scalar>(image: &Image<T>) -> Result<SaliencyMap<T>> {
    compute_method(
        image,
        &MethodDescriptor::ContrastCenter(ContrastCenterParams::default()),
        &SegmentationParams::default(),
    )
}

#[derive(Clone, Debug, Default)]
pub struct MethodStore {
    pub maps: BTreeMap<String, SaliencyMap<f32>>,
    pub labels: BTreeMap<String, BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodFailure {
    pub method: String,
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct HandcraftedStore {
    pub methods: BTreeMap<String, MethodStore>,
    pub failures: Vec<MethodFailure>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMethodsOptions {
    pub segmentation: SegmentationParams,
    pub gamma: GammaMode,
}

/// Runs every method on every sample. A sample failing for one method is
/// recorded and left out of that method's store only.
pub fn run_methods(dataset: &Dataset, methods: &[MethodDescriptor], opts: &RunMethodsOptions) -> Result<HandcraftedStore> {
    if methods.is_empty() {
        return Err(Error::invalid("no handcrafted methods selected"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for m in methods {
        if !seen.insert(m.name()) {
            return Err(Error::invalid(format!("method '{}' listed twice", m.name())));
        }
    }
    let mut store = HandcraftedStore::default();
    for m in methods {
        store.methods.insert(m.name().to_string(), MethodStore::default());
    }
    for sample in dataset.samples() {
        let seg = match segment_for_methods(&sample.image, &opts.segmentation) {
            Ok(s) => Some(s),
            Err(e) => {
                for m in methods {
                    store.failures.push(MethodFailure {
                        method: m.name().into(),
                        id: sample.id.clone(),
                        reason: e.to_string(),
                    });
                }
                None
            }
        };
        let Some(seg) = seg else { continue };
        for m in methods {
            match method_on_segmentation::<f32>(&seg, m) {
                Ok(map) => {
                    store.methods.get_mut(m.name()).expect("inserted").maps.insert(sample.id.clone(), map);
                }
                Err(e) => {
                    log::warn!("{} failed on {}: {e}", m.name(), sample.id);
                    store.failures.push(MethodFailure {
                        method: m.name().into(),
                        id: sample.id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    for ms in store.methods.values_mut() {
        let dataset_mean = if ms.maps.is_empty() {
            0.0
        } else {
            ms.maps.values().map(|m| f64::from(m.mean())).sum::<f64>() / ms.maps.len() as f64
        };
        ms.labels = ms
            .maps
            .iter()
            .map(|(id, map)| {
                let mean = match opts.gamma {
                    GammaMode::PerImage => map.mean(),
                    GammaMode::DatasetMean => dataset_mean as f32,
                };
                (id.clone(), binarize_at(map, pseudo_label_threshold(mean)))
            })
            .collect();
    }
    Ok(store)
}

pub fn raw_dir(artifacts: &Path, method: &str) -> PathBuf {
    artifacts.join(method).join("raw")
}

impl HandcraftedStore {
    /// Writes `<method>/raw/{maps,labels}/<id>.png` and the failure list.
    pub fn persist(&self, artifacts: &Path) -> Result<()> {
        for (name, ms) in &self.methods {
            let dir = raw_dir(artifacts, name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (id, map) in &ms.maps {
                save_map(map, &dir.join("maps").join(format!("{id}.png")))?;
            }
            for (id, mask) in &ms.labels {
                save_mask(mask, &dir.join("labels").join(format!("{id}.png")))?;
            }
            let failures: Vec<&MethodFailure> = self.failures.iter().filter(|f| &f.method == name).collect();
            let path = dir.join("failures.json");
            fs::write(&path, serde_json::to_vec_pretty(&failures)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Loads a method's persisted raw maps and labels.
pub fn load_method_store(artifacts: &Path, method: &str) -> Result<MethodStore> {
    let dir = raw_dir(artifacts, method);
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir));
    }
    let mut store = MethodStore::default();
    for (id, path) in list_pngs(&dir.join("maps"))? {
        let map = load_map(&path)?.with_source(MapSource::Handcrafted(method.into()));
        store.maps.insert(id, map);
    }
    for (id, path) in list_pngs(&dir.join("labels"))? {
        store.labels.insert(id, load_mask(&path)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_image(cx: f32, cy: f32, r: f32) -> Image<f32> {
        Image::from_fn(48, 48, |x, y| {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            let tex = 0.03 * (((x * 7 + y * 13) % 5) as f32 / 5.0);
            if d < r {
                [0.85, 0.2 + tex, 0.15]
            } else {
                [0.25 + tex, 0.45, 0.6]
            }
        })
        .unwrap()
    }

    #[test]
    fn uniform_image_is_degenerate_for_every_method() {
        let img = Image::<f32>::filled(40, 40, [0.3, 0.3, 0.3]).unwrap();
        for m in [
            rbd_saliency(&img).unwrap(),
            mc_saliency(&img).unwrap(),
            dsr_like_saliency(&img).unwrap(),
            contrast_center_saliency(&img).unwrap(),
        ] {
            assert!(m.degenerate);
            assert!(m.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn small_images_rejected() {
        let img = Image::<f32>::filled(16, 16, [0.3, 0.3, 0.3]).unwrap();
        assert!(rbd_saliency(&img).is_err());
    }

    #[test]
    fn centred_disk_is_salient() {
        let img = disk_image(24.0, 24.0, 10.0);
        for map in [rbd_saliency(&img).unwrap(), mc_saliency(&img).unwrap(), contrast_center_saliency(&img).unwrap()] {
            let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
            for y in 0..48 {
                for x in 0..48 {
                    let v = map.get(x, y);
                    if (x as f32 - 24.0).powi(2) + (y as f32 - 24.0).powi(2) < 64.0 {
                        inside += v;
                        ni += 1;
                    } else if (x as f32 - 24.0).powi(2) + (y as f32 - 24.0).powi(2) > 196.0 {
                        outside += v;
                        no += 1;
                    }
                }
            }
            assert!(inside / ni as f32 > 2.0 * outside / no as f32, "{}", map.source);
        }
    }

    #[test]
    fn duplicate_methods_rejected() {
        let ds = Dataset::empty(crate::image::Split::Train);
        let m = MethodDescriptor::all_default();
        assert!(run_methods(&ds, &[m[0].clone(), m[0].clone()], &RunMethodsOptions::default()).is_err());
        assert!(run_methods(&ds, &[], &RunMethodsOptions::default()).is_err());
        let store = run_methods(&ds, &m, &RunMethodsOptions::default()).unwrap();
        assert!(store.methods.values().all(|s| s.maps.is_empty()));
    }
}
