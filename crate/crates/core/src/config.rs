//! Run configuration: one TOML file, profile defaults underneath.
//!
//! The selected profile's defaults are serialized to a TOML table, the user's
//! file is merged over it key by key, and the result is deserialized with
//! unknown keys rejected. Only `data.root` has no default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crf::CrfParams;
use crate::dataio::SyntheticConfig;
use crate::error::{Error, Result};
use crate::evalsuite::{Ablation, AblationPlan};
use crate::handcrafted::{
    ContrastCenterParams, DsrParams, GammaMode, McParams, MethodDescriptor, RbdParams, RunMethodsOptions,
    SegmentationParams,
};
use crate::model::{NetConfig, OptimConfig};
use crate::mva::{MvaInit, SnapshotRule};
use crate::pipeline::StagePlan;

pub const ARTIFACTS_ENV: &str = "USPS_ARTIFACTS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding `manifest.json`.
    pub root: PathBuf,
    /// Present when the dataset is generated rather than supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Resize every image to this square side before use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resize: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodsConfig {
    pub enabled: Vec<String>,
    pub segmentation: SegmentationParams,
    pub gamma: GammaMode,
    pub rbd: RbdParams,
    pub mc: McParams,
    pub dsr_like: DsrParams,
    pub contrast_center: ContrastCenterParams,
}

impl Default for MethodsConfig {
    fn default() -> Self {
        Self {
            enabled: MethodDescriptor::NAMES.iter().map(|s| s.to_string()).collect(),
            segmentation: SegmentationParams::default(),
            gamma: GammaMode::default(),
            rbd: RbdParams::default(),
            mc: McParams::default(),
            dsr_like: DsrParams::default(),
            contrast_center: ContrastCenterParams::default(),
        }
    }
}

impl MethodsConfig {
    pub fn descriptors(&self) -> Result<Vec<MethodDescriptor>> {
        if self.enabled.is_empty() {
            return Err(Error::Config("methods.enabled is empty".into()));
        }
        self.enabled
            .iter()
            .map(|name| {
                Ok(match name.as_str() {
                    "rbd" => MethodDescriptor::Rbd(self.rbd),
                    "mc" => MethodDescriptor::Mc(self.mc),
                    "dsr_like" => MethodDescriptor::DsrLike(self.dsr_like),
                    "contrast_center" => MethodDescriptor::ContrastCenter(self.contrast_center),
                    other => return Err(Error::Config(format!("unknown method `{other}` in methods.enabled"))),
                })
            })
            .collect()
    }

    pub fn options(&self) -> RunMethodsOptions {
        RunMethodsOptions {
            segmentation: self.segmentation.clone(),
            gamma: self.gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MvaConfig {
    pub alpha: f64,
    pub snapshot: SnapshotRule,
    pub init: MvaInit,
}

impl Default for MvaConfig {
    fn default() -> Self {
        let plan = StagePlan::desk();
        Self {
            alpha: plan.mva_alpha,
            snapshot: plan.snapshot,
            init: plan.mva_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub stage_a_epochs: usize,
    pub self_sup_max_iters: usize,
    pub stability_threshold: f64,
    pub fusion_epochs: usize,
    pub fusion_lr_multiplier: f64,
    pub crf_enabled: bool,
    pub network: NetConfig,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self::from_plan(&StagePlan::desk())
    }
}

impl PlanConfig {
    fn from_plan(p: &StagePlan) -> Self {
        Self {
            stage_a_epochs: p.stage_a_epochs,
            self_sup_max_iters: p.self_sup_max_iters,
            stability_threshold: p.stability_threshold,
            fusion_epochs: p.fusion_epochs,
            fusion_lr_multiplier: p.fusion_lr_multiplier,
            crf_enabled: p.crf_enabled,
            network: p.network.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Worst-k test images rendered in the report.
    pub failure_cases: usize,
    /// Ablation rows; unset means every single-method row plus direct fusion,
    /// no self-supervision and both oracles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablations: Option<Vec<Ablation>>,
    /// Apply the CRF to network predictions before scoring.
    pub crf_at_inference: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            failure_cases: 6,
            ablations: None,
            crf_at_inference: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub methods: MethodsConfig,
    pub crf: CrfParams,
    pub mva: MvaConfig,
    pub optim: OptimConfig,
    pub plan: PlanConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Every default of `profile`; `data.root` is left empty.
    pub fn defaults(profile: Profile) -> Self {
        let (plan, base_lr) = match profile {
            Profile::Desk => (StagePlan::desk(), 1.5e-3),
            Profile::Full => (StagePlan::full(), 1e-6),
        };
        Self {
            profile,
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig {
                root: PathBuf::new(),
                synthetic: None,
                resize: None,
            },
            methods: MethodsConfig::default(),
            crf: CrfParams::default(),
            mva: MvaConfig {
                alpha: plan.mva_alpha,
                snapshot: plan.snapshot,
                init: plan.mva_init,
            },
            optim: OptimConfig {
                base_lr,
                ..OptimConfig::default()
            },
            plan: PlanConfig::from_plan(&plan),
            eval: EvalConfig::default(),
        }
    }

    /// Parses `text`; `profile` overrides the file's own `profile` key.
    pub fn from_toml_str(text: &str, profile: Option<Profile>) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let from_file = match user.get("profile") {
            None => Profile::default(),
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("`profile` must be a string".into())),
        };
        let profile = profile.unwrap_or(from_file);
        let mut base = toml::Table::try_from(Self::defaults(profile)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(toml::Value::Table(data)) = base.get_mut("data") {
            data.remove("root");
        }
        let has_root = matches!(user.get("data"), Some(toml::Value::Table(d)) if d.contains_key("root"));
        if !has_root {
            return Err(Error::Config("data.root is required".into()));
        }
        merge(&mut base, user);
        base.insert("profile".into(), toml::Value::String(profile_name(profile).into()));
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, profile).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        if self.data.root.as_os_str().is_empty() {
            return Err(Error::Config("data.root must be set".into()));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate().map_err(cfg)?;
        }
        if self.data.resize.is_some_and(|r| r == 0) {
            return Err(Error::Config("data.resize must be positive".into()));
        }
        self.methods.descriptors()?;
        self.crf.validate().map_err(cfg)?;
        self.optim.validate().map_err(cfg)?;
        self.stage_plan().validate().map_err(cfg)?;
        if let Some(list) = &self.eval.ablations {
            AblationPlan::new(list.iter().cloned()).map_err(cfg)?;
        }
        Ok(())
    }

    pub fn stage_plan(&self) -> StagePlan {
        StagePlan {
            stage_a_epochs: self.plan.stage_a_epochs,
            self_sup_max_iters: self.plan.self_sup_max_iters,
            stability_threshold: self.plan.stability_threshold,
            fusion_epochs: self.plan.fusion_epochs,
            fusion_lr_multiplier: self.plan.fusion_lr_multiplier,
            crf_enabled: self.plan.crf_enabled,
            mva_alpha: self.mva.alpha,
            snapshot: self.mva.snapshot,
            mva_init: self.mva.init,
            network: self.plan.network.clone(),
        }
    }

    pub fn ablation_plan(&self) -> Result<AblationPlan> {
        match &self.eval.ablations {
            Some(list) => AblationPlan::new(list.iter().cloned()),
            None => Ok(AblationPlan::standard(&self.methods.enabled)),
        }
    }

    /// Output directory after overrides: an explicit path wins, then
    /// `USPS_ARTIFACTS`, then the configured `out_dir`.
    pub fn resolve_out_dir(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        match std::env::var_os(ARTIFACTS_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn profile_name(p: Profile) -> &'static str {
    match p {
        Profile::Desk => "desk",
        Profile::Full => "full",
    }
}

/// Overlays `over` onto `base`, descending into tables present in both.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_desk_defaults() {
        let cfg = RunConfig::from_toml_str("[data]\nroot = \"d\"\n", None).unwrap();
        assert_eq!(cfg.profile, Profile::Desk);
        assert_eq!(cfg.plan.stage_a_epochs, StagePlan::desk().stage_a_epochs);
        assert_eq!(cfg.methods.enabled.len(), 4);
    }

    #[test]
    fn full_profile_uses_large_schedule() {
        let cfg = RunConfig::from_toml_str("profile = \"full\"\n[data]\nroot = \"d\"\n", None).unwrap();
        assert_eq!(cfg.plan.stage_a_epochs, 25);
        assert_eq!(cfg.plan.fusion_epochs, 200);
        assert_eq!(cfg.optim.base_lr, 1e-6);
        let over = RunConfig::from_toml_str("[data]\nroot = \"d\"\n", Some(Profile::Full)).unwrap();
        assert_eq!(over.profile, Profile::Full);
    }

    #[test]
    fn user_values_override_nested_defaults() {
        let text = "[data]\nroot = \"d\"\n[plan]\nfusion_epochs = 3\n[plan.network]\nbase_width = 4\n[crf]\niterations = 2\n";
        let cfg = RunConfig::from_toml_str(text, None).unwrap();
        assert_eq!(cfg.plan.fusion_epochs, 3);
        assert_eq!(cfg.plan.network.base_width, 4);
        assert_eq!(cfg.plan.network.encoder_depth, 3);
        assert_eq!(cfg.crf.iterations, 2);
        assert_eq!(cfg.crf.w_bilateral, CrfParams::default().w_bilateral);
    }

    #[test]
    fn unknown_keys_and_missing_root_are_config_errors() {
        for text in [
            "[data]\nroot = \"d\"\nbogus = 1\n",
            "[data]\nroot = \"d\"\n[plan]\nepochs = 3\n",
            "[data]\nroot = \"d\"\n[extra]\n",
            "[plan]\nfusion_epochs = 3\n",
            "[data\nroot = 1",
            "[data]\nroot = \"d\"\n[methods]\nenabled = [\"nope\"]\n",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text, None), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn malformed_toml_names_the_line() {
        let err = RunConfig::from_toml_str("seed = 1\n[data]\nroot = \n", None).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn ablation_list_parses() {
        let text = "[data]\nroot = \"d\"\n[eval]\nablations = [\"direct_fusion\", \"single_method:rbd\"]\n";
        let cfg = RunConfig::from_toml_str(text, None).unwrap();
        let plan = cfg.ablation_plan().unwrap();
        assert!(plan.flags.contains(&Ablation::SingleMethod("rbd".into())));
        assert_eq!(plan.flags.len(), 2);
    }
}
