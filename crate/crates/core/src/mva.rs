//! Per-sample exponential moving averages of CRF-smoothed predictions.
//!
//! Each training forward pass contributes `(1 − α)·crf + α·previous`; the
//! first contribution for a sample seeds its average directly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{binarize_at, binarize_pseudo_label, BinaryMask, MapSource, SaliencyMap};
use crate::scalar::Scalar;

pub const DEFAULT_ALPHA: f64 = 0.7;

/// How an MVA map is turned into a training target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotRule {
    /// Strictly above 0.5.
    Half,
    /// The handcrafted discretization rule (1.5x the map mean).
    MeanFactor,
}

/// How a sample's average is seeded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MvaInit {
    /// The first CRF output becomes the average.
    FirstOutput,
    /// The stage's input pseudo-label seeds the average; the first CRF output
    /// is then blended in like any later one.
    InputLabel,
}

#[derive(Clone, Debug)]
pub struct MvaEntry<T: Scalar> {
    pub map: SaliencyMap<T>,
    pub updates: usize,
}

#[derive(Clone, Debug)]
pub struct MvaState<T: Scalar = f32> {
    alpha: T,
    entries: BTreeMap<String, MvaEntry<T>>,
}

impl<T: Scalar> MvaState<T> {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::invalid(format!("MVA alpha {alpha} outside [0, 1)")));
        }
        Ok(Self {
            alpha: T::of(alpha),
            entries: BTreeMap::new(),
        })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&MvaEntry<T>> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &MvaEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Seeds an entry explicitly (counts as the first update).
    pub fn seed(&mut self, id: &str, map: SaliencyMap<T>) {
        self.entries.insert(
            id.to_string(),
            MvaEntry {
                map: map.with_source(MapSource::Mva),
                updates: 1,
            },
        );
    }

    /// Folds one CRF output into the sample's running average.
    pub fn update(&mut self, id: &str, crf_out: &SaliencyMap<T>) -> Result<()> {
        match self.entries.get_mut(id) {
            None => {
                self.seed(id, crf_out.clone());
                Ok(())
            }
            Some(entry) => {
                if entry.map.dims() != crf_out.dims() {
                    return Err(Error::invalid(format!(
                        "MVA entry `{id}` is {}x{}, update is {}x{}",
                        entry.map.width(),
                        entry.map.height(),
                        crf_out.width(),
                        crf_out.height()
                    )));
                }
                let a = self.alpha;
                let b = T::one() - a;
                let blended: Vec<T> = entry
                    .map
                    .values()
                    .iter()
                    .zip(crf_out.values())
                    .map(|(&m, &c)| (b * c + a * m).max(T::zero()).min(T::one()))
                    .collect();
                entry.map = SaliencyMap::new(crf_out.width(), crf_out.height(), blended, MapSource::Mva)?;
                entry.updates += 1;
                Ok(())
            }
        }
    }

    /// Discretizes every average into a training target.
    pub fn snapshot_labels(&self, rule: SnapshotRule) -> Result<BTreeMap<String, BinaryMask>> {
        if self.entries.is_empty() {
            return Err(Error::invalid("cannot snapshot an empty MVA state"));
        }
        Ok(self
            .entries
            .iter()
            .map(|(id, e)| {
                let mask = match rule {
                    SnapshotRule::Half => binarize_at(&e.map, T::of(0.5)),
                    SnapshotRule::MeanFactor => binarize_pseudo_label(&e.map),
                };
                (id.clone(), mask)
            })
            .collect())
    }

    pub fn maps(&self) -> BTreeMap<String, SaliencyMap<T>> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.map.clone())).collect()
    }
}

/// Free-function form of [`MvaState::update`].
pub fn update_mva<T: Scalar>(state: &mut MvaState<T>, id: &str, crf_out: &SaliencyMap<T>) -> Result<()> {
    state.update(id, crf_out)
}

/// Thresholds every average strictly above 0.5.
pub fn snapshot_labels<T: Scalar>(state: &MvaState<T>) -> Result<BTreeMap<String, BinaryMask>> {
    state.snapshot_labels(SnapshotRule::Half)
}

/// Mean over samples of the mean absolute per-pixel change between two states.
pub fn stability_delta<T: Scalar>(prev: &MvaState<T>, curr: &MvaState<T>) -> Result<f64> {
    if prev.entries.len() != curr.entries.len() || prev.entries.keys().ne(curr.entries.keys()) {
        return Err(Error::invalid("MVA states cover different sample ids"));
    }
    if prev.entries.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (id, a) in &prev.entries {
        let b = &curr.entries[id];
        if a.map.dims() != b.map.dims() {
            return Err(Error::invalid(format!("MVA maps for `{id}` differ in size")));
        }
        let sum: f64 = a
            .map
            .values()
            .iter()
            .zip(b.map.values())
            .map(|(x, y)| (x.f64() - y.f64()).abs())
            .sum();
        total += sum / a.map.len() as f64;
    }
    Ok(total / prev.entries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64, n: usize) -> SaliencyMap<f64> {
        SaliencyMap::constant(n, 1, v, MapSource::Crf).unwrap()
    }

    #[test]
    fn first_update_copies_input() {
        let mut s = MvaState::new(0.7).unwrap();
        let m = SaliencyMap::new(2, 1, vec![0.2, 0.9], MapSource::Crf).unwrap();
        s.update("a", &m).unwrap();
        assert_eq!(s.get("a").unwrap().map.values(), m.values());
        assert_eq!(s.get("a").unwrap().updates, 1);
    }

    #[test]
    fn blend_example() {
        let mut s = MvaState::new(0.7).unwrap();
        s.update("a", &flat(0.5, 1)).unwrap();
        s.update("a", &flat(1.0, 1)).unwrap();
        assert!((s.get("a").unwrap().map.values()[0] - 0.65).abs() < 1e-12);
        assert_eq!(s.get("a").unwrap().updates, 2);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut s = MvaState::new(0.7).unwrap();
        s.update("a", &flat(0.5, 2)).unwrap();
        assert!(s.update("a", &flat(0.5, 3)).is_err());
    }

    #[test]
    fn alpha_range() {
        assert!(MvaState::<f64>::new(1.0).is_err());
        assert!(MvaState::<f64>::new(-0.1).is_err());
    }

    #[test]
    fn snapshot_rules() {
        let mut s = MvaState::new(0.7).unwrap();
        s.update("hi", &flat(0.9, 3)).unwrap();
        s.update("tie", &flat(0.5, 3)).unwrap();
        s.update("mix", &SaliencyMap::new(2, 1, vec![0.2, 0.7], MapSource::Crf).unwrap())
            .unwrap();
        let labels = snapshot_labels(&s).unwrap();
        assert_eq!(labels["hi"].values(), &[1, 1, 1]);
        assert_eq!(labels["tie"].values(), &[0, 0, 0]);
        assert_eq!(labels["mix"].values(), &[0, 1]);
        assert!(snapshot_labels(&MvaState::<f64>::new(0.7).unwrap()).is_err());
    }

    #[test]
    fn stability_examples() {
        let mut a = MvaState::new(0.7).unwrap();
        let mut b = MvaState::new(0.7).unwrap();
        a.update("x", &SaliencyMap::new(2, 1, vec![0.0, 0.0], MapSource::Crf).unwrap())
            .unwrap();
        b.update("x", &SaliencyMap::new(2, 1, vec![0.1, 0.3], MapSource::Crf).unwrap())
            .unwrap();
        assert_eq!(stability_delta(&a, &a).unwrap(), 0.0);
        assert!((stability_delta(&a, &b).unwrap() - 0.2).abs() < 1e-12);

        let mut c = MvaState::new(0.7).unwrap();
        c.update("y", &flat(0.0, 2)).unwrap();
        assert!(stability_delta(&a, &c).is_err());
    }
}
