//! Metrics, label-quality curves, oracle baselines, the ablation matrix and
//! report emission.
//!
//! F and MAE are reported in percent. Continuous predictions are binarized at
//! the adaptive threshold `τ = min(2·mean, 0.98)` before scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Dataset, Image, MapSource, SaliencyMap};
use crate::model::Checkpoint;
use crate::objective::{f_beta, soft_contingency, ContingencyTotals, LossConfig};
use crate::pipeline::{fuse_on_common_ids, predict_dataset, refine_method, write_json, StagePlan, TrainContext};

pub const TAU_CAP: f64 = 0.98;
/// Thresholds scanned for the max-F column.
const MAX_F_STEPS: usize = 255;

/// Full-scale published reference, not reproducible on the desk fixture.
pub const REFERENCE_F: f64 = 90.31;
pub const REFERENCE_MAE: f64 = 3.96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStd {
    pub f: f64,
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub dataset: String,
    pub f: f64,
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
    /// Best dataset-mean F over fixed thresholds.
    pub max_f: f64,
    /// F of the contingency totals pooled over all images.
    pub pooled_f: f64,
    pub n_runs: usize,
    pub std: Option<MetricStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub f: f64,
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub row: MetricsRow,
    pub per_image: Vec<ImageMetrics>,
}

pub fn adaptive_threshold(map: &SaliencyMap<f32>) -> f64 {
    (2.0 * map.values().iter().map(|&v| f64::from(v)).sum::<f64>() / map.len() as f64).min(TAU_CAP)
}

fn binarize_above(map: &SaliencyMap<f32>, tau: f64) -> SaliencyMap<f64> {
    let v = map.values().iter().map(|&p| if f64::from(p) > tau { 1.0 } else { 0.0 }).collect();
    SaliencyMap::new(map.width(), map.height(), v, MapSource::Unknown).expect("binary values are in range")
}

/// Contingency totals at every threshold `k / MAX_F_STEPS`, from one pass
/// over the pixels.
fn threshold_sweep(pred: &SaliencyMap<f32>, gt: &BinaryMask) -> Vec<ContingencyTotals<f64>> {
    let steps = MAX_F_STEPS;
    // count[c]: pixels exceeding exactly the thresholds 0..c
    let mut pos = vec![0usize; steps + 2];
    let mut neg = vec![0usize; steps + 2];
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let p = f64::from(p);
        let mut c = ((p * steps as f64).ceil().max(0.0) as usize).min(steps + 1);
        while c > 0 && !(p > (c - 1) as f64 / steps as f64) {
            c -= 1;
        }
        while c <= steps && p > c as f64 / steps as f64 {
            c += 1;
        }
        if g == 1 {
            pos[c] += 1;
        } else {
            neg[c] += 1;
        }
    }
    let total_pos: usize = pos.iter().sum();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = vec![ContingencyTotals::new(0.0, 0.0, 0.0); steps + 1];
    // above threshold k: every pixel with c > k
    for k in (0..=steps).rev() {
        tp += pos[k + 1];
        fp += neg[k + 1];
        out[k] = ContingencyTotals::new(tp as f64, fp as f64, (total_pos - tp) as f64);
    }
    out
}

fn check_ids<A, B>(preds: &BTreeMap<String, A>, gts: &BTreeMap<String, B>) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    if preds.len() != gts.len() || preds.keys().ne(gts.keys()) {
        return Err(Error::invalid(format!(
            "prediction ids ({}) and ground-truth ids ({}) differ",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Scores predictions against ground truth, averaging per image.
pub fn evaluate(
    name: &str,
    dataset: &str,
    preds: &BTreeMap<String, SaliencyMap<f32>>,
    gts: &BTreeMap<String, BinaryMask>,
    loss: &LossConfig,
) -> Result<Evaluation> {
    check_ids(preds, gts)?;
    let eps = loss.epsilon;
    let mut per_image = Vec::with_capacity(preds.len());
    let mut pooled = ContingencyTotals::new(0.0, 0.0, 0.0);
    let mut curve = vec![0.0; MAX_F_STEPS + 1];
    for (id, pred) in preds {
        let gt = &gts[id];
        let bin = binarize_above(pred, adaptive_threshold(pred));
        let totals = soft_contingency(&bin, gt)?;
        pooled = pooled + totals;
        let mae = pred
            .values()
            .iter()
            .zip(gt.values())
            .map(|(&p, &g)| (f64::from(p) - f64::from(g)).abs())
            .sum::<f64>()
            / pred.len() as f64;
        for (acc, t) in curve.iter_mut().zip(threshold_sweep(pred, gt)) {
            *acc += f_beta(&t, loss);
        }
        per_image.push(ImageMetrics {
            id: id.clone(),
            f: 100.0 * f_beta(&totals, loss),
            mae: 100.0 * mae,
            precision: 100.0 * totals.precision(eps),
            recall: 100.0 * totals.recall(eps),
        });
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let row = MetricsRow {
        name: name.to_string(),
        dataset: dataset.to_string(),
        f: mean(|m| m.f),
        mae: mean(|m| m.mae),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        max_f: 100.0 * curve.iter().fold(0.0f64, |a, &b| a.max(b)) / n,
        pooled_f: 100.0 * f_beta(&pooled, loss),
        n_runs: 1,
        std: None,
    };
    Ok(Evaluation { row, per_image })
}

/// Masks scored as maps; a binary map is its own thresholding.
pub fn evaluate_masks(
    name: &str,
    dataset: &str,
    labels: &BTreeMap<String, BinaryMask>,
    gts: &BTreeMap<String, BinaryMask>,
    loss: &LossConfig,
) -> Result<Evaluation> {
    let maps = labels
        .iter()
        .map(|(id, m)| (id.clone(), SaliencyMap::from_mask(m, MapSource::Unknown)))
        .collect();
    evaluate(name, dataset, &maps, gts, loss)
}

/// Combines rows of repeated runs into one row with standard deviations.
pub fn aggregate_runs(rows: &[MetricsRow]) -> Result<MetricsRow> {
    let first = rows.first().ok_or_else(|| Error::invalid("no runs to aggregate"))?;
    if rows.len() == 1 {
        return Ok(first.clone());
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let sd = |f: fn(&MetricsRow) -> f64| {
        let m = mean(f);
        (rows.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MetricsRow {
        name: first.name.clone(),
        dataset: first.dataset.clone(),
        f: mean(|r| r.f),
        mae: mean(|r| r.mae),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        max_f: mean(|r| r.max_f),
        pooled_f: mean(|r| r.pooled_f),
        n_runs: rows.len(),
        std: Some(MetricStd {
            f: sd(|r| r.f),
            mae: sd(|r| r.mae),
            precision: sd(|r| r.precision),
            recall: sd(|r| r.recall),
        }),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: usize,
    pub name: String,
    pub f: f64,
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCurve {
    pub method: String,
    pub points: Vec<CurvePoint>,
}

/// Label quality per pipeline stage (0 = handcrafted, 1 = first refinement, ...).
pub fn label_quality_curve(
    method: &str,
    stages: &[(String, &BTreeMap<String, BinaryMask>)],
    gts: &BTreeMap<String, BinaryMask>,
    loss: &LossConfig,
) -> Result<LabelCurve> {
    let points = stages
        .iter()
        .enumerate()
        .map(|(k, (name, labels))| {
            let sub: BTreeMap<String, BinaryMask> =
                gts.iter().filter(|(id, _)| labels.contains_key(*id)).map(|(a, b)| (a.clone(), b.clone())).collect();
            let row = evaluate_masks(name, "train", labels, &sub, loss)?.row;
            Ok(CurvePoint {
                stage: k,
                name: name.clone(),
                f: row.f,
                mae: row.mae,
                precision: row.precision,
                recall: row.recall,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LabelCurve {
        method: method.to_string(),
        points,
    })
}

/// GT-informed per-pixel choice: the ground-truth value wherever some set
/// agrees with it, otherwise the majority (ties to background).
pub fn oracle_label_fusion(
    sets: &[&BTreeMap<String, BinaryMask>],
    gts: &BTreeMap<String, BinaryMask>,
) -> Result<BTreeMap<String, BinaryMask>> {
    let first = sets.first().ok_or_else(|| Error::invalid("oracle fusion needs at least one label set"))?;
    for s in sets {
        check_ids(s, gts)?;
    }
    first
        .keys()
        .map(|id| {
            let gt = &gts[id];
            let masks: Vec<&BinaryMask> = sets.iter().map(|s| &s[id]).collect();
            if masks.iter().any(|m| m.dims() != gt.dims()) {
                return Err(Error::invalid(format!("label sizes differ for `{id}`")));
            }
            let values = (0..gt.len())
                .map(|i| {
                    let g = gt.values()[i];
                    if masks.iter().any(|m| m.values()[i] == g) {
                        g
                    } else {
                        let ones = masks.iter().filter(|m| m.values()[i] == 1).count();
                        u8::from(2 * ones > masks.len())
                    }
                })
                .collect();
            Ok((id.clone(), BinaryMask::new(gt.width(), gt.height(), values)?))
        })
        .collect()
}

/// Rank correlation with average ranks for ties. `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut end = k + 1;
            while end < idx.len() && v[idx[end]] == v[idx[k]] {
                end += 1;
            }
            let avg = (k + end - 1) as f64 / 2.0 + 1.0;
            for &i in &idx[k..end] {
                r[i] = avg;
            }
            k = end;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    DirectFusion,
    SingleMethod(String),
    NoSelfSupervision,
    NoCrf,
    OracleGtTraining,
    OracleLabelFusion,
}

impl Ablation {
    pub fn name(&self) -> String {
        match self {
            Ablation::DirectFusion => "direct_fusion".into(),
            Ablation::SingleMethod(m) => format!("single_method:{m}"),
            Ablation::NoSelfSupervision => "no_self_supervision".into(),
            Ablation::NoCrf => "no_crf".into(),
            Ablation::OracleGtTraining => "oracle_gt_training".into(),
            Ablation::OracleLabelFusion => "oracle_label_fusion".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "direct_fusion" => Ablation::DirectFusion,
            "no_self_supervision" => Ablation::NoSelfSupervision,
            "no_crf" => Ablation::NoCrf,
            "oracle_gt_training" => Ablation::OracleGtTraining,
            "oracle_label_fusion" => Ablation::OracleLabelFusion,
            _ => match s.strip_prefix("single_method:") {
                Some(m) if !m.is_empty() => Ablation::SingleMethod(m.to_string()),
                _ => return Err(Error::invalid(format!("unknown ablation `{s}`"))),
            },
        })
    }

    pub fn needs_ground_truth(&self) -> bool {
        matches!(self, Ablation::OracleGtTraining | Ablation::OracleLabelFusion)
    }

    /// Directory-safe form of the name.
    pub fn slug(&self) -> String {
        self.name().replace(':', "_")
    }
}

impl Serialize for Ablation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Ablation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ablation::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub flags: BTreeSet<Ablation>,
}

impl AblationPlan {
    pub fn new(flags: impl IntoIterator<Item = Ablation>) -> Result<Self> {
        let plan = Self {
            flags: flags.into_iter().collect(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.flags.is_empty() {
            return Err(Error::invalid("ablation plan has no flags set"));
        }
        Ok(())
    }

    /// Every row comparable on the synthetic fixture; `no_crf` is left out
    /// because it repeats the whole refinement.
    pub fn standard(methods: &[String]) -> Self {
        let mut flags: BTreeSet<Ablation> = [
            Ablation::DirectFusion,
            Ablation::NoSelfSupervision,
            Ablation::OracleGtTraining,
            Ablation::OracleLabelFusion,
        ]
        .into_iter()
        .collect();
        flags.extend(methods.iter().map(|m| Ablation::SingleMethod(m.clone())));
        Self { flags }
    }
}

/// Label sets the ablations are built from, keyed by method.
pub struct AblationInputs<'a> {
    pub raw: &'a BTreeMap<String, BTreeMap<String, BinaryMask>>,
    /// Snapshot labels of every refinement iteration, stage A first.
    pub refined: &'a BTreeMap<String, Vec<BTreeMap<String, BinaryMask>>>,
}

pub struct AblationOutcome {
    pub ablation: Ablation,
    pub checkpoint: Checkpoint,
    pub evaluation: Evaluation,
}

/// Trains and scores each flagged configuration with the shared seeds of `ctx`.
pub fn run_ablations(
    plan: &AblationPlan,
    inputs: &AblationInputs<'_>,
    ctx: &TrainContext<'_>,
    test: &Dataset,
) -> Result<Vec<AblationOutcome>> {
    plan.validate()?;
    let test_gt = test.ground_truth()?;
    let mut out = Vec::new();
    for ab in &plan.flags {
        log::info!("ablation {}", ab.name());
        let final_sets = || -> Result<Vec<&BTreeMap<String, BinaryMask>>> {
            if inputs.refined.is_empty() {
                return Err(Error::invalid("no refined label sets available"));
            }
            inputs
                .refined
                .iter()
                .map(|(m, iters)| iters.last().ok_or_else(|| Error::invalid(format!("`{m}` has no refined labels"))))
                .collect()
        };
        let tag = format!("ablation:{}", ab.name());
        let checkpoint = match ab {
            Ablation::DirectFusion => {
                if inputs.raw.is_empty() {
                    return Err(Error::invalid("no handcrafted label sets available"));
                }
                let sets: Vec<_> = inputs.raw.values().collect();
                fuse_on_common_ids(&sets, ctx, &tag)?
            }
            Ablation::SingleMethod(m) => {
                let set = inputs
                    .refined
                    .get(m)
                    .and_then(|it| it.last())
                    .ok_or_else(|| Error::invalid(format!("no refined labels for method `{m}`")))?;
                fuse_on_common_ids(&[set], ctx, &tag)?
            }
            Ablation::NoSelfSupervision => {
                let sets: Vec<_> = inputs
                    .refined
                    .iter()
                    .map(|(m, it)| it.first().ok_or_else(|| Error::invalid(format!("`{m}` has no stage-A labels"))))
                    .collect::<Result<_>>()?;
                if sets.is_empty() {
                    return Err(Error::invalid("no refined label sets available"));
                }
                fuse_on_common_ids(&sets, ctx, &tag)?
            }
            Ablation::NoCrf => {
                let plan = StagePlan {
                    crf_enabled: false,
                    ..ctx.plan.clone()
                };
                let mut refined = Vec::new();
                for (m, labels) in inputs.raw {
                    let covered = ctx.dataset.filtered(|id| labels.contains_key(id));
                    let sub = TrainContext {
                        dataset: &covered,
                        plan: &plan,
                        ..*ctx
                    };
                    refined.push(refine_method(m, labels, &sub, None)?.final_labels().clone());
                }
                if refined.is_empty() {
                    return Err(Error::invalid("no handcrafted label sets available"));
                }
                let sets: Vec<_> = refined.iter().collect();
                fuse_on_common_ids(&sets, &TrainContext { plan: &plan, ..*ctx }, &tag)?
            }
            Ablation::OracleGtTraining => {
                let gt = ctx.dataset.ground_truth()?;
                fuse_on_common_ids(&[&gt], ctx, &tag)?
            }
            Ablation::OracleLabelFusion => {
                let sets = final_sets()?;
                let ids = crate::pipeline::common_ids(&sets);
                let gt_all = ctx.dataset.ground_truth()?;
                let gt: BTreeMap<String, BinaryMask> =
                    ids.iter().filter_map(|id| gt_all.get(id).map(|m| (id.clone(), m.clone()))).collect();
                let restricted: Vec<BTreeMap<String, BinaryMask>> = sets
                    .iter()
                    .map(|s| ids.iter().map(|id| (id.clone(), s[id].clone())).collect())
                    .collect();
                let refs: Vec<_> = restricted.iter().collect();
                let fused = oracle_label_fusion(&refs, &gt)?;
                fuse_on_common_ids(&[&fused], ctx, &tag)?
            }
        };
        let preds = predict_dataset(&checkpoint.params, test)?;
        let evaluation = evaluate(&ab.name(), "test", &preds, &test_gt, &ctx.optim.loss)?;
        out.push(AblationOutcome {
            ablation: ab.clone(),
            checkpoint,
            evaluation,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<ScatterPoint>,
}

impl Scatter {
    /// Per-image MAE of two evaluations over their common ids.
    pub fn mae_pairs(x: &Evaluation, y: &Evaluation) -> Self {
        let ym: BTreeMap<&str, f64> = y.per_image.iter().map(|m| (m.id.as_str(), m.mae)).collect();
        Self {
            x_label: format!("{} MAE (%)", x.row.name),
            y_label: format!("{} MAE (%)", y.row.name),
            points: x
                .per_image
                .iter()
                .filter_map(|m| {
                    ym.get(m.id.as_str()).map(|&yv| ScatterPoint {
                        id: m.id.clone(),
                        x: m.mae,
                        y: yv,
                    })
                })
                .collect(),
        }
    }

    pub fn spearman(&self) -> Option<f64> {
        let xs: Vec<f64> = self.points.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = self.points.iter().map(|p| p.y).collect();
        spearman(&xs, &ys)
    }
}

pub struct FailureCase<'a> {
    pub id: String,
    pub mae: f64,
    pub image: &'a Image<f32>,
    pub gt: &'a BinaryMask,
    pub pred: SaliencyMap<f32>,
}

/// The `k` worst images by MAE, worst first; ties broken by id.
pub fn worst_by_mae(eval: &Evaluation, k: usize) -> Vec<&ImageMetrics> {
    let mut v: Vec<&ImageMetrics> = eval.per_image.iter().collect();
    v.sort_by(|a, b| b.mae.total_cmp(&a.mae).then_with(|| a.id.cmp(&b.id)));
    v.truncate(k);
    v
}

pub struct ReportInputs<'a> {
    pub rows: &'a [MetricsRow],
    pub curves: &'a [LabelCurve],
    pub scatter: Option<&'a Scatter>,
    pub failures: &'a [FailureCase<'a>],
}

/// Machine-readable counterpart of `report.md`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub rows: Vec<MetricsRow>,
    pub curves: Vec<LabelCurve>,
    pub scatter: Option<Scatter>,
    pub spearman_mae: Option<f64>,
}

impl MetricsFile {
    pub fn row(&self, name: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub struct ReportPaths {
    pub report: PathBuf,
    pub metrics: PathBuf,
    pub curves: Option<PathBuf>,
    pub scatter: Option<PathBuf>,
    pub failures: Vec<PathBuf>,
}

/// Writes `report.md`, `metrics.json`, `curves.svg`, `scatter.svg` and
/// `failures/<rank>_<id>.png` into `out_dir`.
pub fn emit_report(inputs: &ReportInputs<'_>, out_dir: &Path) -> Result<ReportPaths> {
    if inputs.rows.is_empty() {
        return Err(Error::invalid("report has no metric rows"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let spearman_mae = inputs.scatter.and_then(Scatter::spearman);

    let mut md = String::new();
    md.push_str("# Saliency pseudo-label refinement report\n\n");
    md.push_str("## Models\n\n");
    md.push_str("| Model | Dataset | F (%) | MAE (%) | Precision (%) | Recall (%) | max F (%) | pooled F (%) | runs |\n");
    md.push_str("|---|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in inputs.rows {
        let sd = |v: f64, s: Option<f64>| match s {
            Some(s) => format!("{v:.2} ± {s:.2}"),
            None => format!("{v:.2}"),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {:.2} | {:.2} | {} |",
            r.name,
            r.dataset,
            sd(r.f, r.std.map(|s| s.f)),
            sd(r.mae, r.std.map(|s| s.mae)),
            sd(r.precision, r.std.map(|s| s.precision)),
            sd(r.recall, r.std.map(|s| s.recall)),
            r.max_f,
            r.pooled_f,
            r.n_runs
        );
    }

    let curves_path = out_dir.join("curves.svg");
    let curves = if inputs.curves.is_empty() {
        md.push_str("\n## Label quality\n\nNo label-quality curves were supplied; plot skipped.\n");
        None
    } else {
        md.push_str("\n## Label quality (training split, vs ground truth)\n\n");
        md.push_str("| Method | Stage | Labels | F (%) | MAE (%) | Precision (%) | Recall (%) |\n");
        md.push_str("|---|---:|---|---:|---:|---:|---:|\n");
        for c in inputs.curves {
            for p in &c.points {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |",
                    c.method, p.stage, p.name, p.f, p.mae, p.precision, p.recall
                );
            }
        }
        md.push_str("\n![label quality](curves.svg)\n");
        write_text(&curves_path, &curves_svg(inputs.curves))?;
        Some(curves_path)
    };

    let scatter_path = out_dir.join("scatter.svg");
    let scatter = match inputs.scatter {
        Some(s) if !s.points.is_empty() => {
            md.push_str("\n## Per-image MAE agreement\n\n");
            let _ = writeln!(
                md,
                "{} test images; Spearman rank correlation {}.\n\n![scatter](scatter.svg)",
                s.points.len(),
                spearman_mae.map_or("undefined".to_string(), |r| format!("{r:.3}"))
            );
            write_text(&scatter_path, &scatter_svg(s))?;
            Some(scatter_path)
        }
        _ => {
            md.push_str("\n## Per-image MAE agreement\n\nNo paired evaluations were supplied; plot skipped.\n");
            None
        }
    };

    let mut failure_paths = Vec::new();
    if !inputs.failures.is_empty() {
        let dir = out_dir.join("failures");
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        md.push_str("\n## Failure cases (image | ground truth | prediction)\n\n");
        for (rank, case) in inputs.failures.iter().enumerate() {
            let path = dir.join(format!("{}_{}.png", rank + 1, case.id));
            failure_strip(case)?.save(&path).map_err(|e| Error::Load {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let _ = writeln!(
                md,
                "{}. `{}`: MAE {:.2}%  \n   ![{}](failures/{}_{}.png)",
                rank + 1,
                case.id,
                case.mae,
                case.id,
                rank + 1,
                case.id
            );
            failure_paths.push(path);
        }
    }

    let _ = write!(
        md,
        "\n---\nReference, full-scale training on MSRA-B with a pretrained backbone (not reproducible at desk scale): F {REFERENCE_F:.2}%, MAE {REFERENCE_MAE:.2}%.\n"
    );
    let report = out_dir.join("report.md");
    write_text(&report, &md)?;

    let metrics = out_dir.join("metrics.json");
    write_json(
        &metrics,
        &MetricsFile {
            rows: inputs.rows.to_vec(),
            curves: inputs.curves.to_vec(),
            scatter: inputs.scatter.cloned(),
            spearman_mae,
        },
    )?;
    Ok(ReportPaths {
        report,
        metrics,
        curves,
        scatter,
        failures: failure_paths,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn curves_svg(curves: &[LabelCurve]) -> String {
    let (w, h, left, right, top, bottom) = (560.0, 360.0, 60.0, 150.0, 20.0, 50.0);
    let stages = curves.iter().map(|c| c.points.len()).max().unwrap_or(1).max(2);
    let all: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.f)).collect();
    let lo = (all.iter().copied().fold(f64::INFINITY, f64::min) - 2.0).floor().max(0.0);
    let hi = (all.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 2.0).ceil().min(100.0);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (0.0, 100.0) };
    let px = |k: usize| left + (w - left - right) * k as f64 / (stages - 1) as f64;
    let py = |v: f64| top + (h - top - bottom) * (1.0 - (v - lo) / (hi - lo));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    axes(&mut s, left, top, w - right, h - bottom);
    for k in 0..stages {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#, px(k), h - bottom + 18.0);
    }
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">stage</text>"#, (left + w - right) / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">label F (%)</text>"#, (top + h - bottom) / 2.0, (top + h - bottom) / 2.0);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c.points.iter().map(|p| format!("{:.1},{:.1}", px(p.stage), py(p.f))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for p in &c.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(p.stage), py(p.f));
        }
        let ly = top + 16.0 * i as f64 + 8.0;
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, w - right + 12.0, w - right + 32.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, w - right + 38.0, ly + 4.0, xml_escape(&c.method));
    }
    s.push_str("</svg>\n");
    s
}

fn scatter_svg(sc: &Scatter) -> String {
    let (w, h, left, right, top, bottom) = (420.0, 420.0, 60.0, 20.0, 20.0, 50.0);
    let max = sc.points.iter().flat_map(|p| [p.x, p.y]).fold(0.0f64, f64::max).max(1e-9) * 1.05;
    let px = |v: f64| left + (w - left - right) * v / max;
    let py = |v: f64| top + (h - top - bottom) * (1.0 - v / max);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    axes(&mut s, left, top, w - right, h - bottom);
    let _ = writeln!(s, r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#bbb" stroke-dasharray="4 3"/>"##, px(0.0), py(0.0), px(max), py(max));
    for t in 0..=4 {
        let v = max * t as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#, px(v), h - bottom + 18.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, py(v) + 4.0);
    }
    for p in &sc.points {
        let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4" fill-opacity="0.7"><title>{}</title></circle>"##, px(p.x), py(p.y), xml_escape(&p.id));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (left + w - right) / 2.0, h - 12.0, xml_escape(&sc.x_label));
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#, (top + h - bottom) / 2.0, (top + h - bottom) / 2.0, xml_escape(&sc.y_label));
    s.push_str("</svg>\n");
    s
}

fn axes(s: &mut String, x0: f64, y0: f64, x1: f64, y1: f64) {
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Image, ground truth and prediction side by side.
fn failure_strip(case: &FailureCase<'_>) -> Result<RgbImage> {
    let (w, h) = case.image.dims();
    if case.gt.dims() != (w, h) || case.pred.dims() != (w, h) {
        return Err(Error::invalid(format!("failure case `{}` has mismatched sizes", case.id)));
    }
    let gap = 2;
    let byte = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    Ok(RgbImage::from_fn((3 * w + 2 * gap) as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let panel = x / (w + gap);
        let px = x % (w + gap);
        if px >= w {
            return Rgb([255, 255, 255]);
        }
        match panel {
            0 => Rgb(case.image.rgb(px, y).map(byte)),
            1 => Rgb([case.gt.get(px, y) * 255; 3]),
            _ => Rgb([byte(case.pred.get(px, y)); 3]),
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(vals: &[u8], w: usize) -> BinaryMask {
        BinaryMask::new(w, vals.len() / w, vals.to_vec()).unwrap()
    }

    fn one(id: &str, m: BinaryMask) -> BTreeMap<String, BinaryMask> {
        [(id.to_string(), m)].into_iter().collect()
    }

    #[test]
    fn perfect_prediction_scores_full() {
        let gt = mask(&[1, 0, 0, 1, 1, 0], 3);
        let e = evaluate_masks("m", "d", &one("a", gt.clone()), &one("a", gt), &LossConfig::default()).unwrap();
        assert!((e.row.f - 100.0).abs() < 1e-9);
        assert_eq!(e.row.mae, 0.0);
    }

    #[test]
    fn constant_half_has_mae_fifty() {
        let gt = mask(&[1, 1, 0, 0], 2);
        let pred: BTreeMap<String, SaliencyMap<f32>> =
            [("a".to_string(), SaliencyMap::constant(2, 2, 0.5, MapSource::Unknown).unwrap())].into();
        let e = evaluate("m", "d", &pred, &one("a", gt), &LossConfig::default()).unwrap();
        assert!((e.row.mae - 50.0).abs() < 1e-9);
    }

    #[test]
    fn id_mismatch_rejected() {
        let gt = mask(&[1, 0], 2);
        assert!(evaluate_masks("m", "d", &one("a", gt.clone()), &one("b", gt), &LossConfig::default()).is_err());
    }

    #[test]
    fn sweep_matches_direct_thresholding() {
        let vals: Vec<f32> = (0..64).map(|i| ((i * 37) % 64) as f32 / 63.0).chain([0.0, 1.0, 128.0 / 255.0]).collect();
        let n = vals.len();
        let pred = SaliencyMap::new(n, 1, vals, MapSource::Unknown).unwrap();
        let gt = BinaryMask::from_fn(n, 1, |x, _| x % 3 == 0);
        let sweep = threshold_sweep(&pred, &gt);
        for k in [0, 1, 64, 127, 128, 200, 254, 255] {
            let direct = soft_contingency(&binarize_above(&pred, k as f64 / 255.0), &gt).unwrap();
            assert_eq!(sweep[k], direct, "threshold {k}");
        }
    }

    #[test]
    fn oracle_rule_examples() {
        let gt = one("a", mask(&[1, 1, 0], 3));
        let sets = [
            one("a", mask(&[0, 0, 1], 3)),
            one("a", mask(&[1, 0, 1], 3)),
            one("a", mask(&[1, 0, 0], 3)),
            one("a", mask(&[0, 0, 1], 3)),
        ];
        let refs: Vec<_> = sets.iter().collect();
        let fused = oracle_label_fusion(&refs, &gt).unwrap();
        // pixel 0: a set matches GT; pixel 1: none does, all say 0; pixel 2: a set matches
        assert_eq!(fused["a"].values(), &[1, 0, 0]);
    }

    #[test]
    fn oracle_ties_go_to_background() {
        let gt = one("a", mask(&[1], 1));
        let sets = [one("a", mask(&[0], 1)), one("a", mask(&[0], 1))];
        let refs: Vec<_> = sets.iter().collect();
        assert_eq!(oracle_label_fusion(&refs, &gt).unwrap()["a"].values(), &[0]);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        // ties get average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3)
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in [
            Ablation::DirectFusion,
            Ablation::SingleMethod("rbd".into()),
            Ablation::NoSelfSupervision,
            Ablation::NoCrf,
            Ablation::OracleGtTraining,
            Ablation::OracleLabelFusion,
        ] {
            assert_eq!(Ablation::parse(&a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("single_method:").is_err());
        assert!(AblationPlan::new([]).is_err());
    }

    #[test]
    fn curve_orders_stages() {
        let gt = one("a", mask(&[1, 1, 0, 0], 2));
        let noisy = one("a", mask(&[1, 0, 1, 0], 2));
        let stages = vec![("raw".to_string(), &noisy), ("refined".to_string(), &gt)];
        let c = label_quality_curve("m", &stages, &gt, &LossConfig::default()).unwrap();
        assert!(c.points[1].f > c.points[0].f);
        assert_eq!(c.points[1].stage, 1);
        assert!((c.points[1].f - 100.0).abs() < 1e-9 && c.points[1].mae == 0.0);
    }

    #[test]
    fn report_without_curves_skips_plots() {
        let dir = tempfile::tempdir().unwrap();
        let gt = mask(&[1, 0, 0, 1], 2);
        let e = evaluate_masks("m", "d", &one("a", gt.clone()), &one("a", gt), &LossConfig::default()).unwrap();
        let rows = vec![e.row];
        let paths = emit_report(
            &ReportInputs {
                rows: &rows,
                curves: &[],
                scatter: None,
                failures: &[],
            },
            dir.path(),
        )
        .unwrap();
        assert!(paths.curves.is_none() && paths.scatter.is_none());
        let md = fs::read_to_string(paths.report).unwrap();
        assert!(md.contains("plot skipped"));
        assert!(dir.path().join("metrics.json").is_file());
    }
}
