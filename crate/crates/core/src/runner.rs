//! Config-driven pipeline stages over one output directory.
//!
//! Layout below `out_dir`:
//!
//! ```text
//! artifacts/<method>/raw/{maps,labels}/        handcrafted maps and pseudo-labels
//! artifacts/<method>/mva/iter<k>/{maps,labels}/ moving averages and their snapshots
//! artifacts/<stage>/checkpoints/               network checkpoints
//! eval/<row>.json                              test-split evaluations
//! report/                                      report.md, plots, metrics.json
//! run_manifest.json                            seeds, config echo, content hashes
//! ```
//!
//! Each stage reads only persisted outputs of earlier stages, so stages can be
//! rerun individually.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::dataio::{generate_synthetic, load_dataset, manifest_path, resize_dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::evalsuite::{
    emit_report, evaluate, label_quality_curve, run_ablations, worst_by_mae, Ablation, AblationInputs, AblationPlan,
    Evaluation, FailureCase, LabelCurve, MetricsFile, ReportInputs, ReportPaths, Scatter,
};
use crate::handcrafted::{load_method_store, raw_dir, run_methods, HandcraftedStore};
use crate::image::{BinaryMask, Dataset, SaliencyMap, Split};
use crate::model::Checkpoint;
use crate::pipeline::{
    checkpoint_dir, fuse_on_common_ids, load_refined_iterations, predict_dataset, predict_dataset_with_crf, read_json,
    refine_method, write_json, KernelCache, Refinement, RunManifest, StagePlan, TrainContext, FUSION_STAGE,
};

pub const PIPELINE_ROW: &str = "pipeline";

pub struct Workspace {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

/// Which methods a refine call covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MethodSelection {
    All,
    One(String),
}

impl Workspace {
    pub fn new(config: RunConfig, out_dir: PathBuf) -> Self {
        Self { config, out_dir }
    }

    pub fn artifacts(&self) -> PathBuf {
        self.out_dir.join("artifacts")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }

    fn fusion_checkpoint_path(&self) -> PathBuf {
        checkpoint_dir(&self.artifacts(), FUSION_STAGE).join("final.json")
    }

    fn ablation_checkpoint_path(&self, ab: &Ablation) -> PathBuf {
        checkpoint_dir(&self.artifacts().join("ablations"), &ab.slug()).join("final.json")
    }

    fn eval_path(&self, row: &str) -> PathBuf {
        self.eval_dir().join(format!("{}.json", row.replace(':', "_")))
    }

    /// Runs `f` as stage `name`: timed, recorded in the run manifest, and
    /// errors wrapped with the stage name.
    fn stage<R>(&self, name: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let t = Instant::now();
        log::info!("stage {name}: start");
        let out = f().map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        });
        let mut manifest = RunManifest::load_or_new(&self.out_dir, self.config.seed, self.config.to_json())?;
        manifest.record_timing(name, t.elapsed().as_secs_f64());
        let status = match &out {
            Ok(_) => format!("{name}: complete"),
            Err(_) => format!("{name}: failed"),
        };
        manifest.finish(&self.out_dir, &self.artifacts(), &status)?;
        match &out {
            Ok(_) => log::info!("stage {name}: done in {:.1}s", t.elapsed().as_secs_f64()),
            Err(e) => log::error!("{e}"),
        }
        out
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        let path = manifest_path(&self.config.data.root);
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        DatasetManifest::read(&path)
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let manifest = self.manifest()?;
        let ds = load_dataset(&self.config.data.root, &manifest, split)?;
        match self.config.data.resize {
            Some(side) => resize_dataset(&ds, side),
            None => Ok(ds),
        }
    }

    /// Ground truth of a split; absent masks are a missing artifact.
    fn ground_truth(&self, ds: &Dataset) -> Result<BTreeMap<String, BinaryMask>> {
        if ds.samples().iter().any(|s| s.gt.is_none()) {
            return Err(Error::MissingArtifact(self.config.data.root.join("masks")));
        }
        ds.ground_truth()
    }

    fn train_context<'a>(&'a self, dataset: &'a Dataset, plan: &'a StagePlan) -> TrainContext<'a> {
        TrainContext {
            dataset,
            plan,
            optim: &self.config.optim,
            seed: self.config.seed,
        }
    }

    pub fn generate(&self) -> Result<DatasetManifest> {
        self.stage("generate", || {
            let synth = self
                .config
                .data
                .synthetic
                .as_ref()
                .ok_or_else(|| Error::Config("data.synthetic is not set; nothing to generate".into()))?;
            generate_synthetic(synth, &self.config.data.root)
        })
    }

    pub fn handcrafted(&self) -> Result<HandcraftedStore> {
        self.stage("handcrafted", || {
            let train = self.load_split(Split::Train)?;
            let store = run_methods(&train, &self.config.methods.descriptors()?, &self.config.methods.options())?;
            for name in store.methods.keys() {
                let dir = raw_dir(&self.artifacts(), name);
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
            }
            store.persist(&self.artifacts())?;
            Ok(store)
        })
    }

    fn selected(&self, sel: &MethodSelection) -> Result<Vec<String>> {
        match sel {
            MethodSelection::All => Ok(self.config.methods.enabled.clone()),
            MethodSelection::One(m) if self.config.methods.enabled.contains(m) => Ok(vec![m.clone()]),
            MethodSelection::One(m) => Err(Error::Config(format!("method `{m}` is not in methods.enabled"))),
        }
    }

    /// Refines each selected method from its persisted raw labels.
    pub fn refine(&self, sel: &MethodSelection, iters: Option<usize>, no_crf: bool) -> Result<Vec<Refinement>> {
        let methods = self.selected(sel)?;
        self.stage("refine", || {
            let mut plan = self.config.stage_plan();
            if let Some(k) = iters {
                plan.self_sup_max_iters = k;
            }
            if no_crf {
                plan.crf_enabled = false;
            }
            let stores = methods
                .iter()
                .map(|m| Ok((m.clone(), load_method_store(&self.artifacts(), m)?)))
                .collect::<Result<Vec<_>>>()?;
            let train = self.load_split(Split::Train)?;
            let kernels = if plan.crf_enabled {
                let covered = train.filtered(|id| stores.iter().any(|(_, s)| s.labels.contains_key(id)));
                Some(KernelCache::build(&covered, &self.config.crf)?)
            } else {
                None
            };
            let mut out = Vec::new();
            for (m, store) in &stores {
                let covered = train.filtered(|id| store.labels.contains_key(id));
                let ctx = self.train_context(&covered, &plan);
                let r = refine_method(m, &store.labels, &ctx, kernels.as_ref())?;
                r.persist(&self.artifacts())?;
                out.push(r);
            }
            Ok(out)
        })
    }

    fn refined_sets(&self) -> Result<BTreeMap<String, Vec<BTreeMap<String, BinaryMask>>>> {
        self.config
            .methods
            .enabled
            .iter()
            .map(|m| Ok((m.clone(), load_refined_iterations(&self.artifacts(), m)?)))
            .collect()
    }

    pub fn fuse(&self) -> Result<Checkpoint> {
        self.stage("fuse", || {
            let refined = self.refined_sets()?;
            let train = self.load_split(Split::Train)?;
            let plan = self.config.stage_plan();
            let sets: Vec<&BTreeMap<String, BinaryMask>> =
                refined.values().map(|it| it.last().expect("at least stage A")).collect();
            let ck = fuse_on_common_ids(&sets, &self.train_context(&train, &plan), FUSION_STAGE)?;
            ck.save(&self.fusion_checkpoint_path())?;
            Ok(ck)
        })
    }

    fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Checkpoint::load(path)
    }

    fn predict(&self, ck: &Checkpoint, ds: &Dataset) -> Result<BTreeMap<String, SaliencyMap<f32>>> {
        if self.config.eval.crf_at_inference {
            predict_dataset_with_crf(&ck.params, ds, &self.config.crf)
        } else {
            predict_dataset(&ck.params, ds)
        }
    }

    /// Scores the fused model on the test split.
    pub fn evaluate(&self) -> Result<Evaluation> {
        self.stage("evaluate", || {
            let ck = Self::load_checkpoint(&self.fusion_checkpoint_path())?;
            let test = self.load_split(Split::Test)?;
            let gt = self.ground_truth(&test)?;
            let preds = self.predict(&ck, &test)?;
            let e = evaluate(PIPELINE_ROW, "test", &preds, &gt, &self.config.optim.loss)?;
            write_json(&self.eval_path(PIPELINE_ROW), &e)?;
            Ok(e)
        })
    }

    pub fn ablate(&self, plan: &AblationPlan) -> Result<Vec<Evaluation>> {
        self.stage("ablate", || {
            plan.validate()?;
            let train = self.load_split(Split::Train)?;
            let test = self.load_split(Split::Test)?;
            self.ground_truth(&test)?;
            if plan.flags.iter().any(Ablation::needs_ground_truth) {
                self.ground_truth(&train)?;
            }
            let raw = self
                .config
                .methods
                .enabled
                .iter()
                .map(|m| Ok((m.clone(), load_method_store(&self.artifacts(), m)?.labels)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let refined = self.refined_sets()?;
            let stage_plan = self.config.stage_plan();
            let outcomes = run_ablations(
                plan,
                &AblationInputs {
                    raw: &raw,
                    refined: &refined,
                },
                &self.train_context(&train, &stage_plan),
                &test,
            )?;
            let mut evals = Vec::new();
            for o in outcomes {
                o.checkpoint.save(&self.ablation_checkpoint_path(&o.ablation))?;
                let e = if self.config.eval.crf_at_inference {
                    let preds = self.predict(&o.checkpoint, &test)?;
                    evaluate(&o.ablation.name(), "test", &preds, &test.ground_truth()?, &self.config.optim.loss)?
                } else {
                    o.evaluation
                };
                write_json(&self.eval_path(&o.ablation.name()), &e)?;
                evals.push(e);
            }
            Ok(evals)
        })
    }

    /// Label-quality curve of every method whose refinement is persisted.
    pub fn label_curves(&self) -> Result<Vec<LabelCurve>> {
        let train = self.load_split(Split::Train)?;
        let gt = self.ground_truth(&train)?;
        let mut curves = Vec::new();
        for m in &self.config.methods.enabled {
            let raw = load_method_store(&self.artifacts(), m)?.labels;
            let iters = load_refined_iterations(&self.artifacts(), m)?;
            let mut stages: Vec<(String, &BTreeMap<String, BinaryMask>)> = vec![("handcrafted".into(), &raw)];
            for (k, labels) in iters.iter().enumerate() {
                let name = if k == 0 { "stage_a".to_string() } else { format!("iter{k}") };
                stages.push((name, labels));
            }
            curves.push(label_quality_curve(m, &stages, &gt, &self.config.optim.loss)?);
        }
        Ok(curves)
    }

    pub fn report(&self) -> Result<ReportPaths> {
        self.stage("report", || {
            let pipeline: Evaluation = read_json(&self.eval_path(PIPELINE_ROW))?;
            let mut rows = vec![pipeline.row.clone()];
            let mut oracle_gt: Option<Evaluation> = None;
            if let Ok(plan) = self.config.ablation_plan() {
                for ab in &plan.flags {
                    let path = self.eval_path(&ab.name());
                    if !path.is_file() {
                        continue;
                    }
                    let e: Evaluation = read_json(&path)?;
                    rows.push(e.row.clone());
                    if *ab == Ablation::OracleGtTraining {
                        oracle_gt = Some(e);
                    }
                }
            }
            let curves = self.label_curves()?;
            let scatter = oracle_gt.as_ref().map(|o| Scatter::mae_pairs(&pipeline, o));

            let ck = Self::load_checkpoint(&self.fusion_checkpoint_path())?;
            let test = self.load_split(Split::Test)?;
            let worst: Vec<String> = worst_by_mae(&pipeline, self.config.eval.failure_cases)
                .iter()
                .map(|m| m.id.clone())
                .collect();
            let subset = test.filtered(|id| worst.iter().any(|w| w == id));
            let preds = self.predict(&ck, &subset)?;
            let failures = worst
                .iter()
                .filter_map(|id| {
                    let s = test.get(id)?;
                    Some(FailureCase {
                        id: id.clone(),
                        mae: pipeline.per_image.iter().find(|m| &m.id == id)?.mae,
                        image: &s.image,
                        gt: s.gt.as_ref()?,
                        pred: preds.get(id)?.clone(),
                    })
                })
                .collect::<Vec<_>>();
            emit_report(
                &ReportInputs {
                    rows: &rows,
                    curves: &curves,
                    scatter: scatter.as_ref(),
                    failures: &failures,
                },
                &self.report_dir(),
            )
        })
    }

    /// generate (when synthetic) → handcrafted → refine → fuse → evaluate →
    /// ablate → report, stopping at the first failure.
    pub fn run_all(&self) -> Result<MetricsFile> {
        if self.config.data.synthetic.is_some() {
            self.generate()?;
        }
        self.handcrafted()?;
        self.refine(&MethodSelection::All, None, false)?;
        self.fuse()?;
        self.evaluate()?;
        self.ablate(&self.config.ablation_plan()?)?;
        let paths = self.report()?;
        read_json(&paths.metrics)
    }
}
