//! SLIC-style superpixels: k-means over (Lab, xy) with a local search window,
//! followed by a connectivity pass that folds stray fragments into neighbours.

use std::collections::{BTreeMap, VecDeque};

use crate::color::image_to_lab;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

const SLIC_ITERATIONS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub mean_lab: [f64; 3],
    /// Centroid in normalized `[0, 1]` coordinates.
    pub mean_pos: [f64; 2],
    pub pixel_count: usize,
    pub touches_border: bool,
}

#[derive(Clone, Debug)]
pub struct SuperpixelSegmentation {
    pub width: usize,
    pub height: usize,
    /// Region index per pixel, row-major.
    pub label_map: Vec<usize>,
    pub regions: Vec<Region>,
    /// Sorted 4-neighbourhood adjacency lists.
    pub adjacency: Vec<Vec<usize>>,
}

impl SuperpixelSegmentation {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn border_regions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.regions[r].touches_border).collect()
    }

    pub fn color_distance(&self, a: usize, b: usize) -> f64 {
        crate::color::lab_distance(&self.regions[a].mean_lab, &self.regions[b].mean_lab)
    }

    pub fn position_sq_distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.regions[a].mean_pos, self.regions[b].mean_pos);
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
    }

    /// Spreads per-region values back to pixels.
    pub fn rasterize(&self, per_region: &[f64]) -> Vec<f64> {
        self.label_map.iter().map(|&r| per_region[r]).collect()
    }
}

/// Superpixel count used by the detectors for an image of this size.
pub fn default_superpixel_count(width: usize, height: usize) -> usize {
    ((width * height) as f64 / 1000.0).round().clamp(16.0, 400.0) as usize
}

/// Segments `image` into at most `k` connected superpixels.
pub fn segment_superpixels<T: Scalar>(image: &Image<T>, k: usize, compactness: f64) -> Result<SuperpixelSegmentation> {
    let (w, h) = image.dims();
    let n = w * h;
    if k < 4 || k > n / 16 {
        return Err(Error::invalid(format!(
            "superpixel count {k} outside [4, {}] for a {w}x{h} image",
            n / 16
        )));
    }
    if !(compactness > 0.0) {
        return Err(Error::invalid("compactness must be positive"));
    }
    let lab = image_to_lab(image);

    let nx = ((k as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, k);
    let ny = (k / nx).max(1);
    let step = ((n as f64) / (nx * ny) as f64).sqrt();
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (i as f64 + 0.5) * w as f64 / nx as f64 - 0.5;
            let cy = (j as f64 + 0.5) * h as f64 / ny as f64 - 0.5;
            let px = (cx.round() as usize).min(w - 1);
            let py = (cy.round() as usize).min(h - 1);
            let c = lab[py * w + px];
            centers.push([c[0], c[1], c[2], cx, cy]);
        }
    }

    let spatial_weight = (compactness / step).powi(2);
    let mut labels = vec![usize::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    let reach = (2.0 * step).ceil() as isize;
    for _ in 0..SLIC_ITERATIONS {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = (c[3].round() as isize - reach).max(0) as usize;
            let x1 = ((c[3].round() as isize + reach) as usize).min(w - 1);
            let y0 = (c[4].round() as isize - reach).max(0) as usize;
            let y1 = ((c[4].round() as isize + reach) as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = y * w + x;
                    let p = lab[i];
                    let dc = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    let ds = (x as f64 - c[3]).powi(2) + (y as f64 - c[4]).powi(2);
                    let d = dc + ds * spatial_weight;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = ci;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == usize::MAX {
                continue;
            }
            let p = lab[i];
            let s = &mut sums[l];
            s[0] += p[0];
            s[1] += p[1];
            s[2] += p[2];
            s[3] += (i % w) as f64;
            s[4] += (i / w) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                for d in 0..5 {
                    c[d] = s[d] / s[5];
                }
            }
        }
    }
    // pixels outside every window (cannot happen with a 2S reach, kept total)
    for i in 0..n {
        if labels[i] == usize::MAX {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            labels[i] = centers
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = (a.1[3] - x).powi(2) + (a.1[4] - y).powi(2);
                    let db = (b.1[3] - x).powi(2) + (b.1[4] - y).powi(2);
                    da.total_cmp(&db)
                })
                .map(|(ci, _)| ci)
                .unwrap_or(0);
        }
    }

    enforce_connectivity(&mut labels, w, h);
    Ok(build_segmentation(&labels, &lab, w, h))
}

/// Connected components (4-neighbourhood) of a label map: component id per
/// pixel and the size of each component.
fn components(labels: &[usize], w: usize, h: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n = w * h;
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut owner = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let label = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == label {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
        owner.push(label);
    }
    (comp, sizes, owner)
}

/// Leaves exactly one connected component per label by merging every
/// non-largest fragment into the neighbouring label it shares most border with.
fn enforce_connectivity(labels: &mut [usize], w: usize, h: usize) {
    loop {
        let (comp, sizes, owner) = components(labels, w, h);
        let mut largest: BTreeMap<usize, usize> = BTreeMap::new();
        for (c, &l) in owner.iter().enumerate() {
            let e = largest.entry(l).or_insert(c);
            if sizes[c] > sizes[*e] {
                *e = c;
            }
        }
        let fragments: Vec<usize> = (0..sizes.len()).filter(|c| largest[&owner[*c]] != *c).collect();
        if fragments.is_empty() {
            return;
        }
        // border counts from each fragment to neighbouring labels
        let mut contacts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        let is_fragment: Vec<bool> = (0..sizes.len()).map(|c| largest[&owner[c]] != c).collect();
        for i in 0..w * h {
            let c = comp[i];
            if !is_fragment[c] {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let mut touch = |j: usize| {
                if labels[j] != labels[i] {
                    *contacts.entry(c).or_default().entry(labels[j]).or_default() += 1;
                }
            };
            if x > 0 {
                touch(i - 1);
            }
            if x + 1 < w {
                touch(i + 1);
            }
            if y > 0 {
                touch(i - w);
            }
            if y + 1 < h {
                touch(i + w);
            }
        }
        let mut target = vec![usize::MAX; sizes.len()];
        for &c in &fragments {
            if let Some(m) = contacts.get(&c) {
                let best = m.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(l, _)| *l);
                if let Some(l) = best {
                    target[c] = l;
                }
            }
        }
        let mut changed = false;
        for i in 0..w * h {
            let t = target[comp[i]];
            if t != usize::MAX {
                labels[i] = t;
                changed = true;
            }
        }
        if !changed {
            return;
        }
    }
}

fn build_segmentation(labels: &[usize], lab: &[[f64; 3]], w: usize, h: usize) -> SuperpixelSegmentation {
    // compact relabelling in scan order
    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    let mut label_map = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = remap.len();
        label_map.push(*remap.entry(l).or_insert(next));
    }
    let k = remap.len();
    let mut acc = vec![[0.0f64; 5]; k];
    let mut counts = vec![0usize; k];
    let mut border = vec![false; k];
    let mut adjacency = vec![std::collections::BTreeSet::new(); k];
    for (i, &r) in label_map.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        let p = lab[i];
        let a = &mut acc[r];
        a[0] += p[0];
        a[1] += p[1];
        a[2] += p[2];
        a[3] += (x as f64 + 0.5) / w as f64;
        a[4] += (y as f64 + 0.5) / h as f64;
        counts[r] += 1;
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            border[r] = true;
        }
    }
    for (i, &r) in label_map.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
            let q = label_map[j];
            if q != r {
                adjacency[r].insert(q);
                adjacency[q].insert(r);
            }
        }
    }
    let regions = (0..k)
        .map(|r| {
            let c = counts[r] as f64;
            Region {
                mean_lab: [acc[r][0] / c, acc[r][1] / c, acc[r][2] / c],
                mean_pos: [acc[r][3] / c, acc[r][4] / c],
                pixel_count: counts[r],
                touches_border: border[r],
            }
        })
        .collect();
    SuperpixelSegmentation {
        width: w,
        height: h,
        label_map,
        regions,
        adjacency: adjacency.into_iter().map(|s| s.into_iter().collect()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_image_tiles_into_quadrants() {
        let img = Image::<f32>::filled(16, 16, [0.4, 0.5, 0.6]).unwrap();
        let seg = segment_superpixels(&img, 4, 10.0).unwrap();
        assert_eq!(seg.len(), 4);
        for r in &seg.regions {
            assert_eq!(r.pixel_count, 64);
        }
        assert_eq!(seg.label_map[0], seg.label_map[7 + 7 * 16]);
        assert_ne!(seg.label_map[0], seg.label_map[8]);
    }

    #[test]
    fn too_many_superpixels_rejected() {
        let img = Image::<f32>::filled(16, 16, [0.4, 0.5, 0.6]).unwrap();
        assert!(matches!(segment_superpixels(&img, 32, 10.0), Err(Error::InvalidArgument(_))));
        assert!(segment_superpixels(&img, 3, 10.0).is_err());
    }

    #[test]
    fn default_count_scales_with_area() {
        assert_eq!(default_superpixel_count(64, 64), 16);
        assert_eq!(default_superpixel_count(432, 432), 187);
        assert_eq!(default_superpixel_count(1000, 1000), 400);
    }
}
