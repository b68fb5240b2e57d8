//! The four classical detectors. Each works per superpixel and differs only in
//! the prior it encodes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::superpixel::SuperpixelSegmentation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RbdParams {
    pub sigma_clr: f64,
    pub sigma_bndcon: f64,
    pub sigma_spa: f64,
}

impl Default for RbdParams {
    fn default() -> Self {
        Self {
            sigma_clr: 10.0,
            sigma_bndcon: 1.0,
            sigma_spa: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McParams {
    pub sigma: f64,
}

impl Default for McParams {
    fn default() -> Self {
        Self { sigma: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsrParams {
    /// Ridge strength relative to the mean squared atom norm.
    pub lambda: f64,
    /// Lab channels are divided by this before entering the feature vector.
    pub color_scale: f64,
    pub position_weight: f64,
}

impl Default for DsrParams {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            color_scale: 100.0,
            position_weight: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastCenterParams {
    pub sigma_center: f64,
}

impl Default for ContrastCenterParams {
    fn default() -> Self {
        Self { sigma_center: 0.33 }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path colour distances from `source` over the adjacency graph.
pub fn geodesic_distances(seg: &SuperpixelSegmentation, source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; seg.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapItem(0.0, source));
    while let Some(HeapItem(d, r)) = heap.pop() {
        if d > dist[r] {
            continue;
        }
        for &q in &seg.adjacency[r] {
            let nd = d + seg.color_distance(r, q);
            if nd < dist[q] {
                dist[q] = nd;
                heap.push(HeapItem(nd, q));
            }
        }
    }
    dist
}

/// Background probability per region from boundary connectivity.
pub fn background_weights(seg: &SuperpixelSegmentation, params: &RbdParams) -> Vec<f64> {
    let two_clr = 2.0 * params.sigma_clr * params.sigma_clr;
    (0..seg.len())
        .map(|r| {
            let geo = geodesic_distances(seg, r);
            let mut area = 0.0;
            let mut boundary = 0.0;
            for (q, d) in geo.iter().enumerate() {
                let s = (-d * d / two_clr).exp();
                area += s;
                if seg.regions[q].touches_border {
                    boundary += s;
                }
            }
            let bndcon = boundary / area.sqrt();
            1.0 - (-bndcon * bndcon / (2.0 * params.sigma_bndcon * params.sigma_bndcon)).exp()
        })
        .collect()
}

/// Background-weighted contrast per region.
pub fn rbd_regions(seg: &SuperpixelSegmentation, params: &RbdParams) -> Vec<f64> {
    let w_bg = background_weights(seg, params);
    let two_spa = 2.0 * params.sigma_spa * params.sigma_spa;
    (0..seg.len())
        .map(|r| {
            (0..seg.len())
                .map(|q| seg.color_distance(r, q) * (-seg.position_sq_distance(r, q) / two_spa).exp() * w_bg[q])
                .sum()
        })
        .collect()
}

/// Expected number of steps to absorption from each transient state, given the
/// transient-to-transient block `q` of a row-stochastic chain.
pub fn absorption_times(q: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(Error::invalid("transition block must be square"));
    }
    let system = DMatrix::identity(n, n) - q;
    let t = system
        .lu()
        .solve(&DVector::from_element(n, 1.0))
        .ok_or_else(|| Error::Solver("I - Q is singular; chain has no path to an absorbing state".into()))?;
    Ok(t.iter().copied().collect())
}

/// Absorption time per region, border regions absorbing. Border entries get
/// the minimum over interior regions.
pub fn mc_regions(seg: &SuperpixelSegmentation, params: &McParams) -> Result<Vec<f64>> {
    let n = seg.len();
    let transient: Vec<usize> = (0..n).filter(|&r| !seg.regions[r].touches_border).collect();
    if transient.is_empty() || transient.len() == n {
        return Err(Error::invalid(
            "absorbing chain needs at least one border and one interior region",
        ));
    }
    let mut index = vec![usize::MAX; n];
    for (i, &r) in transient.iter().enumerate() {
        index[r] = i;
    }
    let mut q = DMatrix::zeros(transient.len(), transient.len());
    for (i, &r) in transient.iter().enumerate() {
        let mut neighbours: Vec<usize> = seg.adjacency[r].clone();
        for &a in &seg.adjacency[r] {
            neighbours.extend_from_slice(&seg.adjacency[a]);
        }
        neighbours.sort_unstable();
        neighbours.dedup();
        neighbours.retain(|&s| s != r);
        let weights: Vec<f64> = neighbours
            .iter()
            .map(|&s| (-seg.color_distance(r, s) / params.sigma).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        for (&s, w) in neighbours.iter().zip(&weights) {
            if index[s] != usize::MAX {
                q[(i, index[s])] = w / total;
            }
        }
    }
    let times = absorption_times(&q)?;
    let floor = times.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((0..n)
        .map(|r| if index[r] == usize::MAX { floor } else { times[index[r]] })
        .collect())
}

/// Residual norm of reconstructing each feature from the dictionary atoms by
/// ridge regression with `λ = lambda · trace(DᵀD) / atoms`.
pub fn reconstruction_residuals(atoms: &[Vec<f64>], features: &[Vec<f64>], lambda: f64) -> Result<Vec<f64>> {
    let m = atoms.len();
    if m == 0 {
        return Err(Error::invalid("empty dictionary"));
    }
    let d = atoms[0].len();
    if atoms.iter().chain(features).any(|a| a.len() != d) {
        return Err(Error::invalid("feature dimensions disagree"));
    }
    let dict = DMatrix::from_fn(d, m, |i, j| atoms[j][i]);
    let gram = dict.transpose() * &dict;
    let ridge = lambda * gram.trace() / m as f64;
    let system = gram + DMatrix::identity(m, m) * ridge;
    let chol = system
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("dictionary Gram matrix is not positive definite".into()))?;
    Ok(features
        .iter()
        .map(|f| {
            let f = DVector::from_column_slice(f);
            let coef = chol.solve(&(dict.transpose() * &f));
            (f - &dict * coef).norm()
        })
        .collect())
}

fn dsr_feature(seg: &SuperpixelSegmentation, r: usize, params: &DsrParams) -> Vec<f64> {
    let reg = &seg.regions[r];
    vec![
        reg.mean_lab[0] / params.color_scale,
        reg.mean_lab[1] / params.color_scale,
        reg.mean_lab[2] / params.color_scale,
        reg.mean_pos[0] * params.position_weight,
        reg.mean_pos[1] * params.position_weight,
    ]
}

/// Dense reconstruction error against the border dictionary. `None` when the
/// dictionary carries no energy.
pub fn dsr_regions(seg: &SuperpixelSegmentation, params: &DsrParams) -> Result<Option<Vec<f64>>> {
    let border = seg.border_regions();
    if border.len() < 4 {
        return Err(Error::invalid(format!(
            "reconstruction dictionary needs at least 4 border regions, got {}",
            border.len()
        )));
    }
    let atoms: Vec<Vec<f64>> = border.iter().map(|&r| dsr_feature(seg, r, params)).collect();
    if atoms.iter().all(|a| a.iter().all(|v| *v == 0.0)) {
        return Ok(None);
    }
    let features: Vec<Vec<f64>> = (0..seg.len()).map(|r| dsr_feature(seg, r, params)).collect();
    reconstruction_residuals(&atoms, &features, params.lambda).map(Some)
}

/// Size-weighted global contrast times a centre Gaussian.
pub fn contrast_center_regions(seg: &SuperpixelSegmentation, params: &ContrastCenterParams) -> Vec<f64> {
    let two_c = 2.0 * params.sigma_center * params.sigma_center;
    (0..seg.len())
        .map(|r| {
            let contrast: f64 = (0..seg.len())
                .map(|q| seg.regions[q].pixel_count as f64 * seg.color_distance(r, q))
                .sum();
            let p = seg.regions[r].mean_pos;
            let d2 = (p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2);
            contrast * (-d2 / two_c).exp()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_chain_absorption_times() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]);
        let t = absorption_times(&q).unwrap();
        assert!((t[0] - 2.0).abs() < 1e-12 && (t[1] - 2.0).abs() < 1e-12);

        let t = absorption_times(&DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(t, vec![1.0]);
    }

    #[test]
    fn closed_chain_is_solver_error() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(absorption_times(&q), Err(Error::Solver(_))));
    }

    #[test]
    fn one_atom_residual() {
        let r = reconstruction_residuals(&[vec![1.0, 0.0]], &[vec![0.0, 1.0], vec![2.0, 0.0]], 1e-12).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-9);
        assert!(r[1] < 1e-9);
    }
}
