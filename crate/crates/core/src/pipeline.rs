//! The three-stage curriculum.
//!
//! Each handcrafted method's labels are refined in isolation: a fresh network
//! is trained on them while every training-pass prediction is CRF-smoothed and
//! folded into a per-sample moving average, whose snapshot becomes the next
//! label set. Self-supervision repeats this from a reinitialized network with
//! a doubled learning rate. A last network is trained on all refined sets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crf::{CrfKernel, CrfParams};
use crate::dataio::{load_mask_set, save_map, save_mask_set};
use crate::error::{Error, Result};
use crate::handcrafted::{run_methods, HandcraftedStore, MethodDescriptor, RunMethodsOptions};
use crate::image::{BinaryMask, Dataset, Image, MapSource, SaliencyMap};
use crate::model::{forward, init_network, Checkpoint, NetConfig, NetParams, OptimConfig, TrainSample, Trainer};
use crate::mva::{stability_delta, MvaInit, MvaState, SnapshotRule, DEFAULT_ALPHA};

pub const FUSION_STAGE: &str = "fusion";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub stage_a_epochs: usize,
    pub self_sup_max_iters: usize,
    /// Self-supervision stops once consecutive MVA states differ by less.
    pub stability_threshold: f64,
    pub fusion_epochs: usize,
    /// Multiplies the base learning rate for the fusion stage.
    pub fusion_lr_multiplier: f64,
    pub crf_enabled: bool,
    pub mva_alpha: f64,
    pub snapshot: SnapshotRule,
    pub mva_init: MvaInit,
    pub network: NetConfig,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::desk()
    }
}

impl StagePlan {
    /// Sized for a 200-image 64×64 fixture on one CPU core.
    pub fn desk() -> Self {
        Self {
            stage_a_epochs: 12,
            self_sup_max_iters: 2,
            stability_threshold: 0.01,
            fusion_epochs: 30,
            fusion_lr_multiplier: 1.0,
            crf_enabled: true,
            mva_alpha: DEFAULT_ALPHA,
            // thresholding at 0.5 erodes the small-network labels a little more each round
            snapshot: SnapshotRule::MeanFactor,
            mva_init: MvaInit::FirstOutput,
            network: NetConfig {
                base_width: 8,
                dilated_blocks: 1,
                ..NetConfig::default()
            },
        }
    }

    /// Epoch counts of the original large-scale schedule.
    pub fn full() -> Self {
        Self {
            stage_a_epochs: 25,
            fusion_epochs: 200,
            snapshot: SnapshotRule::Half,
            network: NetConfig::default(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stability_threshold >= 0.0) {
            return Err(Error::invalid("stability_threshold must be non-negative"));
        }
        if !(self.fusion_lr_multiplier > 0.0) {
            return Err(Error::invalid("fusion_lr_multiplier must be positive"));
        }
        if !(0.0..1.0).contains(&self.mva_alpha) {
            return Err(Error::invalid("mva_alpha must lie in [0, 1)"));
        }
        self.network.validate()
    }
}

/// Learning rate of self-supervision iteration `iteration` (0 is stage A).
pub fn lr_for_iteration(base_lr: f64, iteration: usize) -> f64 {
    base_lr * 2f64.powi(iteration as i32)
}

/// Independent, reproducible seed for one named training run.
pub fn derive_seed(base: u64, tag: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Per-image CRF kernels. They depend only on the image, so one cache serves
/// every method and iteration.
pub struct KernelCache {
    params: CrfParams,
    kernels: BTreeMap<String, CrfKernel<f32>>,
}

impl KernelCache {
    pub fn build(dataset: &Dataset, params: &CrfParams) -> Result<Self> {
        params.validate()?;
        let kernels = dataset
            .samples()
            .iter()
            .map(|s| Ok((s.id.clone(), CrfKernel::new(&s.image, params)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            params: params.clone(),
            kernels,
        })
    }

    pub fn params(&self) -> &CrfParams {
        &self.params
    }

    pub fn refine(&self, id: &str, map: &SaliencyMap<f32>) -> Result<SaliencyMap<f32>> {
        self.kernels
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no CRF kernel for sample `{id}`")))?
            .refine(map)
    }
}

/// Everything a training run needs besides its targets.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    pub plan: &'a StagePlan,
    pub optim: &'a OptimConfig,
    pub seed: u64,
}

impl TrainContext<'_> {
    fn net_config(&self) -> NetConfig {
        NetConfig {
            seed: self.seed,
            ..self.plan.network.clone()
        }
    }

    fn optim_with(&self, lr_multiplier: f64) -> OptimConfig {
        OptimConfig {
            lr_multiplier: self.optim.lr_multiplier * lr_multiplier,
            batch_size: self.optim.batch_size.min(self.dataset.len()).max(1),
            ..self.optim.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RefineIteration {
    pub index: usize,
    pub lr: f64,
    pub labels: BTreeMap<String, BinaryMask>,
    pub mva_maps: BTreeMap<String, SaliencyMap<f32>>,
    /// Mean absolute change against the previous iteration's averages.
    pub stability_delta: Option<f64>,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Debug)]
pub struct Refinement {
    pub method: String,
    pub iterations: Vec<RefineIteration>,
    pub stopped_early: bool,
}

impl Refinement {
    pub fn stage_a_labels(&self) -> &BTreeMap<String, BinaryMask> {
        &self.iterations[0].labels
    }

    pub fn final_labels(&self) -> &BTreeMap<String, BinaryMask> {
        &self.iterations.last().expect("refinement has a stage-A iteration").labels
    }
}

fn samples_for<'a>(dataset: &'a Dataset, targets: &[&'a BTreeMap<String, BinaryMask>]) -> Result<Vec<TrainSample<'a>>> {
    dataset
        .samples()
        .iter()
        .map(|s| {
            let targets = targets
                .iter()
                .map(|set| {
                    let m = set
                        .get(&s.id)
                        .ok_or_else(|| Error::invalid(format!("no target for sample `{}`", s.id)))?;
                    if m.dims() != s.image.dims() {
                        return Err(Error::invalid(format!("target for `{}` does not match its image size", s.id)));
                    }
                    Ok(m)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainSample {
                id: &s.id,
                image: &s.image,
                targets,
            })
        })
        .collect()
}

/// One training run on `labels` with the CRF + moving-average hook.
fn mva_stage(
    ctx: &TrainContext<'_>,
    labels: &BTreeMap<String, BinaryMask>,
    kernels: Option<&KernelCache>,
    shuffle_seed: u64,
    lr_multiplier: f64,
) -> Result<(MvaState<f32>, Checkpoint)> {
    let samples = samples_for(ctx.dataset, &[labels])?;
    let mut mva = MvaState::<f32>::new(ctx.plan.mva_alpha)?;
    if ctx.plan.mva_init == MvaInit::InputLabel {
        for (id, m) in labels {
            mva.seed(id, SaliencyMap::from_mask(m, MapSource::Mva));
        }
    }
    let optim = ctx.optim_with(lr_multiplier);
    let mut trainer = Trainer::new(init_network(&ctx.net_config())?, optim, shuffle_seed)?;
    let mut hook = |id: &str, pred: &SaliencyMap<f32>| -> Result<()> {
        match kernels {
            Some(k) => mva.update(id, &k.refine(id, pred)?),
            None => mva.update(id, pred),
        }
    };
    trainer.run(&samples, ctx.plan.stage_a_epochs, Some(&mut hook))?;
    if mva.is_empty() {
        // zero epochs: the averages are the input labels
        for (id, m) in labels {
            mva.seed(id, SaliencyMap::from_mask(m, MapSource::Mva));
        }
    }
    Ok((mva, trainer.checkpoint()))
}

/// Stage A followed by up to `self_sup_max_iters` self-supervision rounds.
/// `kernels` is required when the plan enables the CRF; `ctx.dataset` must be
/// exactly the samples `labels` covers.
pub fn refine_method(
    method: &str,
    labels: &BTreeMap<String, BinaryMask>,
    ctx: &TrainContext<'_>,
    kernels: Option<&KernelCache>,
) -> Result<Refinement> {
    ctx.plan.validate()?;
    if labels.is_empty() || ctx.dataset.is_empty() {
        return Err(Error::invalid(format!("no labels to refine for `{method}`")));
    }
    if labels.len() != ctx.dataset.len() || ctx.dataset.ids().any(|id| !labels.contains_key(id)) {
        return Err(Error::invalid(format!(
            "labels for `{method}` cover {} samples, the dataset has {}",
            labels.len(),
            ctx.dataset.len()
        )));
    }
    let kernels = match (ctx.plan.crf_enabled, kernels) {
        (false, _) => None,
        (true, Some(k)) => Some(k),
        (true, None) => return Err(Error::invalid("CRF enabled but no kernel cache supplied")),
    };
    let mut iterations: Vec<RefineIteration> = Vec::new();
    let mut prev_state: Option<MvaState<f32>> = None;
    let mut stopped_early = false;
    for t in 0..=ctx.plan.self_sup_max_iters {
        let input = iterations.last().map_or(labels, |it| &it.labels);
        let started = Instant::now();
        let (state, checkpoint) =
            mva_stage(ctx, input, kernels, derive_seed(ctx.seed, method, t), 2f64.powi(t as i32))?;
        let delta = prev_state.as_ref().map(|p| stability_delta(p, &state)).transpose()?;
        let labels = state.snapshot_labels(ctx.plan.snapshot)?;
        log::info!(
            "{method}: iteration {t} done in {:.1}s{}",
            started.elapsed().as_secs_f64(),
            delta.map(|d| format!(", stability delta {d:.4}")).unwrap_or_default()
        );
        iterations.push(RefineIteration {
            index: t,
            lr: lr_for_iteration(ctx.optim.lr(), t),
            labels,
            mva_maps: state.maps(),
            stability_delta: delta,
            checkpoint,
        });
        if delta.is_some_and(|d| d < ctx.plan.stability_threshold) {
            stopped_early = t < ctx.plan.self_sup_max_iters;
            break;
        }
        prev_state = Some(state);
    }
    Ok(Refinement {
        method: method.to_string(),
        iterations,
        stopped_early,
    })
}

/// Trains a fresh network against every label set at once. `tag` names the
/// run for seeding.
pub fn fuse_and_train(
    sets: &[&BTreeMap<String, BinaryMask>],
    ctx: &TrainContext<'_>,
    tag: &str,
) -> Result<Checkpoint> {
    ctx.plan.validate()?;
    if sets.is_empty() {
        return Err(Error::invalid("fusion needs at least one label set"));
    }
    for (k, set) in sets.iter().enumerate() {
        if set.len() != ctx.dataset.len() || ctx.dataset.ids().any(|id| !set.contains_key(id)) {
            return Err(Error::invalid(format!(
                "label set {k} covers {} samples, the dataset has {}",
                set.len(),
                ctx.dataset.len()
            )));
        }
    }
    let samples = samples_for(ctx.dataset, sets)?;
    let optim = ctx.optim_with(ctx.plan.fusion_lr_multiplier);
    let mut trainer = Trainer::new(init_network(&ctx.net_config())?, optim, derive_seed(ctx.seed, tag, 0))?;
    trainer.run(&samples, ctx.plan.fusion_epochs, None)?;
    Ok(trainer.checkpoint())
}

/// [`fuse_and_train`] on the samples every set covers. Methods that failed on
/// some images would otherwise block fusion.
pub fn fuse_on_common_ids(
    sets: &[&BTreeMap<String, BinaryMask>],
    ctx: &TrainContext<'_>,
    tag: &str,
) -> Result<Checkpoint> {
    let ids = common_ids(sets);
    let keep = |id: &str| ids.binary_search_by(|x| x.as_str().cmp(id)).is_ok();
    let dataset = ctx.dataset.filtered(keep);
    if dataset.len() < ctx.dataset.len() {
        log::warn!("{tag}: fusing on {} of {} samples covered by every label set", dataset.len(), ctx.dataset.len());
    }
    let restricted: Vec<BTreeMap<String, BinaryMask>> = sets
        .iter()
        .map(|s| s.iter().filter(|(id, _)| keep(id)).map(|(k, v)| (k.clone(), v.clone())).collect())
        .collect();
    let refs: Vec<&BTreeMap<String, BinaryMask>> = restricted.iter().collect();
    fuse_and_train(&refs, &TrainContext { dataset: &dataset, ..*ctx }, tag)
}

/// Ids every set covers, in order.
pub fn common_ids(sets: &[&BTreeMap<String, BinaryMask>]) -> Vec<String> {
    let Some((first, rest)) = sets.split_first() else {
        return Vec::new();
    };
    first
        .keys()
        .filter(|id| rest.iter().all(|s| s.contains_key(*id)))
        .cloned()
        .collect()
}

pub fn predict(params: &NetParams, image: &Image<f32>) -> Result<SaliencyMap<f32>> {
    Ok(forward(params, image)?.with_source(MapSource::Network))
}

pub fn predict_dataset(params: &NetParams, dataset: &Dataset) -> Result<BTreeMap<String, SaliencyMap<f32>>> {
    dataset
        .samples()
        .iter()
        .map(|s| Ok((s.id.clone(), predict(params, &s.image)?)))
        .collect()
}

/// Inference with CRF post-processing, off by default in evaluation.
pub fn predict_dataset_with_crf(
    params: &NetParams,
    dataset: &Dataset,
    crf: &CrfParams,
) -> Result<BTreeMap<String, SaliencyMap<f32>>> {
    let cache = KernelCache::build(dataset, crf)?;
    predict_dataset(params, dataset)?
        .into_iter()
        .map(|(id, p)| {
            let refined = cache.refine(&id, &p)?;
            Ok((id, refined))
        })
        .collect()
}

pub fn mva_iter_dir(artifacts: &Path, method: &str, iteration: usize) -> PathBuf {
    artifacts.join(method).join("mva").join(format!("iter{iteration}"))
}

pub fn checkpoint_dir(artifacts: &Path, stage: &str) -> PathBuf {
    artifacts.join(stage).join("checkpoints")
}

pub fn refine_summary_path(artifacts: &Path, method: &str) -> PathBuf {
    artifacts.join(method).join("mva").join("summary.json")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub index: usize,
    pub lr: f64,
    pub stability_delta: Option<f64>,
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub method: String,
    pub iterations: Vec<IterationSummary>,
    pub final_iteration: usize,
    pub stopped_early: bool,
}

impl Refinement {
    pub fn summary(&self) -> RefineSummary {
        RefineSummary {
            method: self.method.clone(),
            iterations: self
                .iterations
                .iter()
                .map(|it| IterationSummary {
                    index: it.index,
                    lr: it.lr,
                    stability_delta: it.stability_delta,
                    loss_trace: it.checkpoint.loss_trace.clone(),
                })
                .collect(),
            final_iteration: self.iterations.len() - 1,
            stopped_early: self.stopped_early,
        }
    }

    /// Writes `mva/iter<k>/{maps,labels}/`, `checkpoints/iter<k>.json` and the summary.
    pub fn persist(&self, artifacts: &Path) -> Result<()> {
        let mva_root = artifacts.join(&self.method).join("mva");
        if mva_root.exists() {
            fs::remove_dir_all(&mva_root).map_err(|e| Error::io(&mva_root, e))?;
        }
        for it in &self.iterations {
            let dir = mva_iter_dir(artifacts, &self.method, it.index);
            for (id, map) in &it.mva_maps {
                save_map(map, &dir.join("maps").join(format!("{id}.png")))?;
            }
            save_mask_set(&it.labels, &dir.join("labels"))?;
            it.checkpoint
                .save(&checkpoint_dir(artifacts, &self.method).join(format!("iter{}.json", it.index)))?;
        }
        write_json(&refine_summary_path(artifacts, &self.method), &self.summary())
    }
}

pub fn load_refine_summary(artifacts: &Path, method: &str) -> Result<RefineSummary> {
    read_json(&refine_summary_path(artifacts, method))
}

/// Persisted snapshot labels of one iteration.
pub fn load_iteration_labels(artifacts: &Path, method: &str, iteration: usize) -> Result<BTreeMap<String, BinaryMask>> {
    load_mask_set(&mva_iter_dir(artifacts, method, iteration).join("labels"))
}

/// Labels of every persisted iteration, stage A first.
pub fn load_refined_iterations(artifacts: &Path, method: &str) -> Result<Vec<BTreeMap<String, BinaryMask>>> {
    let summary = load_refine_summary(artifacts, method)?;
    (0..=summary.final_iteration)
        .map(|k| load_iteration_labels(artifacts, method, k))
        .collect()
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads JSON; a missing file is a missing artifact.
pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of every file below `root`, keyed by `/`-separated relative path.
pub fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays below root");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.insert(key, sha256_hex(&bytes));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    if root.is_dir() {
        walk(root, root, &mut out)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Seeds, configuration echo and content hashes of one run. Timings are kept
/// apart from the hashed content.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: BTreeMap<String, String>,
    pub timings: Vec<StageTiming>,
    pub status: String,
}

impl RunManifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(RUN_MANIFEST_FILE)
    }

    /// Loads the manifest in `out_dir`, or starts an empty one.
    pub fn load_or_new(out_dir: &Path, seed: u64, config: serde_json::Value) -> Result<Self> {
        let path = Self::path(out_dir);
        if path.is_file() {
            let mut m: Self = read_json(&path)?;
            m.seed = seed;
            m.config = config;
            Ok(m)
        } else {
            Ok(Self {
                seed,
                config,
                ..Self::default()
            })
        }
    }

    pub fn record_timing(&mut self, stage: &str, seconds: f64) {
        self.timings.retain(|t| t.stage != stage);
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds,
        });
    }

    /// Rehashes `artifacts_root` and writes the manifest next to it.
    pub fn finish(&mut self, out_dir: &Path, artifacts_root: &Path, status: &str) -> Result<()> {
        self.artifacts = hash_tree(artifacts_root)?;
        self.status = status.to_string();
        write_json(&Self::path(out_dir), self)
    }
}

/// Records which stage failed so partial artifacts are recognisable.
pub fn write_failure_marker(out_dir: &Path, stage: &str, err: &Error) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(FAILURE_MARKER);
    fs::write(&path, format!("stage: {stage}\nerror: {err}\n")).map_err(|e| Error::io(&path, e))
}

pub struct PipelineState {
    pub handcrafted: HandcraftedStore,
    pub refinements: Vec<Refinement>,
    pub fused: Checkpoint,
    pub manifest: RunManifest,
}

/// `run_methods`, then `refine_method` per method, then fusion, with every
/// intermediate persisted under `out_dir/artifacts`.
pub fn run_full_pipeline(
    dataset: &Dataset,
    methods: &[MethodDescriptor],
    method_opts: &RunMethodsOptions,
    crf: &CrfParams,
    ctx: &TrainContext<'_>,
    out_dir: &Path,
) -> Result<PipelineState> {
    if dataset.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let artifacts = out_dir.join("artifacts");
    let mut manifest = RunManifest::load_or_new(out_dir, ctx.seed, serde_json::json!({ "plan": ctx.plan, "optim": ctx.optim, "crf": crf }))?;
    let mut stage = "handcrafted";
    let result = (|| -> Result<(HandcraftedStore, Vec<Refinement>, Checkpoint)> {
        let t = Instant::now();
        let store = run_methods(dataset, methods, method_opts)?;
        store.persist(&artifacts)?;
        manifest.record_timing(stage, t.elapsed().as_secs_f64());

        stage = "refine";
        let t = Instant::now();
        let kernels = if ctx.plan.crf_enabled {
            Some(KernelCache::build(dataset, crf)?)
        } else {
            None
        };
        let mut refinements = Vec::new();
        for (name, ms) in &store.methods {
            let covered = dataset.filtered(|id| ms.labels.contains_key(id));
            let sub = TrainContext { dataset: &covered, ..*ctx };
            let r = refine_method(name, &ms.labels, &sub, kernels.as_ref())?;
            r.persist(&artifacts)?;
            refinements.push(r);
        }
        drop(kernels);
        manifest.record_timing(stage, t.elapsed().as_secs_f64());

        stage = FUSION_STAGE;
        let t = Instant::now();
        let sets: Vec<&BTreeMap<String, BinaryMask>> = refinements.iter().map(|r| r.final_labels()).collect();
        let fused = fuse_on_common_ids(&sets, ctx, FUSION_STAGE)?;
        fused.save(&checkpoint_dir(&artifacts, FUSION_STAGE).join("final.json"))?;
        manifest.record_timing(stage, t.elapsed().as_secs_f64());
        Ok((store, refinements, fused))
    })();
    match result {
        Ok((handcrafted, refinements, fused)) => {
            manifest.finish(out_dir, &artifacts, "complete")?;
            Ok(PipelineState {
                handcrafted,
                refinements,
                fused,
                manifest,
            })
        }
        Err(e) => {
            write_failure_marker(out_dir, stage, &e)?;
            manifest.finish(out_dir, &artifacts, &format!("failed at {stage}"))?;
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{SampleRecord, Split};

    fn tiny_dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|k| {
                let img = Image::from_fn(16, 16, |x, y| {
                    let inside = (x as isize - 8).abs() < 4 && (y as isize - 8 + k as isize % 3).abs() < 4;
                    if inside { [0.9, 0.2, 0.2] } else { [0.2, 0.3, 0.6] }
                })
                .unwrap();
                SampleRecord::new(format!("s{k}"), img, None).unwrap()
            })
            .collect();
        Dataset::new(samples, Split::Train).unwrap()
    }

    fn box_labels(ds: &Dataset) -> BTreeMap<String, BinaryMask> {
        ds.ids()
            .map(|id| (id.to_string(), BinaryMask::from_fn(16, 16, |x, y| (4..12).contains(&x) && (4..12).contains(&y))))
            .collect()
    }

    fn tiny_plan(epochs: usize, iters: usize) -> StagePlan {
        StagePlan {
            stage_a_epochs: epochs,
            self_sup_max_iters: iters,
            stability_threshold: 0.0,
            fusion_epochs: epochs,
            crf_enabled: false,
            network: NetConfig {
                base_width: 4,
                encoder_depth: 2,
                dilated_blocks: 1,
                seed: 0,
                input_size: 16,
            },
            ..StagePlan::desk()
        }
    }

    #[test]
    fn learning_rate_doubles_per_iteration() {
        assert_eq!(lr_for_iteration(1e-6, 0), 1e-6);
        assert_eq!(lr_for_iteration(1e-6, 1), 2e-6);
        assert_eq!(lr_for_iteration(1e-6, 2), 4e-6);
        assert!((lr_for_iteration(3e-6, 3) - 2.4e-5).abs() < 1e-18);
    }

    #[test]
    fn iteration_count_follows_plan() {
        let ds = tiny_dataset(4);
        let labels = box_labels(&ds);
        let optim = OptimConfig {
            batch_size: 2,
            ..OptimConfig::default()
        };
        for iters in [0, 2] {
            let plan = tiny_plan(1, iters);
            let ctx = TrainContext { dataset: &ds, plan: &plan, optim: &optim, seed: 1 };
            let r = refine_method("m", &labels, &ctx, None).unwrap();
            assert_eq!(r.iterations.len(), iters + 1);
            assert_eq!(r.final_labels().len(), 4);
        }
    }

    #[test]
    fn zero_epochs_return_input_labels() {
        let ds = tiny_dataset(3);
        let labels = box_labels(&ds);
        let plan = tiny_plan(0, 0);
        let optim = OptimConfig::default();
        let ctx = TrainContext { dataset: &ds, plan: &plan, optim: &optim, seed: 1 };
        let r = refine_method("m", &labels, &ctx, None).unwrap();
        assert_eq!(r.final_labels(), &labels);
    }

    #[test]
    fn coverage_mismatch_rejected() {
        let ds = tiny_dataset(3);
        let mut labels = box_labels(&ds);
        labels.remove("s1");
        let plan = tiny_plan(1, 0);
        let optim = OptimConfig::default();
        let ctx = TrainContext { dataset: &ds, plan: &plan, optim: &optim, seed: 1 };
        assert!(refine_method("m", &labels, &ctx, None).is_err());
        assert!(fuse_and_train(&[&labels], &ctx, "f").is_err());
        assert!(fuse_and_train(&[], &ctx, "f").is_err());
        assert!(refine_method("m", &BTreeMap::new(), &ctx, None).is_err());
    }

    #[test]
    fn crf_plan_needs_kernels() {
        let ds = tiny_dataset(2);
        let plan = StagePlan {
            crf_enabled: true,
            ..tiny_plan(1, 0)
        };
        let optim = OptimConfig::default();
        let ctx = TrainContext { dataset: &ds, plan: &plan, optim: &optim, seed: 1 };
        assert!(refine_method("m", &box_labels(&ds), &ctx, None).is_err());
        let kernels = KernelCache::build(&ds, &CrfParams::default()).unwrap();
        assert!(refine_method("m", &box_labels(&ds), &ctx, Some(&kernels)).is_ok());
    }

    #[test]
    fn single_set_fusion_matches_plain_training() {
        let ds = tiny_dataset(4);
        let labels = box_labels(&ds);
        let plan = tiny_plan(2, 0);
        let optim = OptimConfig {
            batch_size: 2,
            base_lr: 1e-3,
            ..OptimConfig::default()
        };
        let ctx = TrainContext { dataset: &ds, plan: &plan, optim: &optim, seed: 5 };
        let fused = fuse_and_train(&[&labels], &ctx, "tag").unwrap();

        let samples = samples_for(&ds, &[&labels]).unwrap();
        let net = NetConfig { seed: 5, ..plan.network.clone() };
        let mut t = Trainer::new(init_network(&net).unwrap(), optim.clone(), derive_seed(5, "tag", 0)).unwrap();
        t.run(&samples, 2, None).unwrap();
        assert_eq!(fused.params, t.params);
    }

    #[test]
    fn derived_seeds_differ_by_tag_and_index() {
        assert_ne!(derive_seed(1, "rbd", 0), derive_seed(1, "mc", 0));
        assert_ne!(derive_seed(1, "rbd", 0), derive_seed(1, "rbd", 1));
        assert_eq!(derive_seed(1, "rbd", 2), derive_seed(1, "rbd", 2));
    }
}
