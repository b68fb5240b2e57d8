use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn usps(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_usps"));
    cmd.args(args).env_remove("USPS_ARTIFACTS");
    if let Some(p) = env_out {
        cmd.env("USPS_ARTIFACTS", p);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn small_config(dir: &Path) -> String {
    write_config(
        dir,
        &format!(
            r#"
seed = 7
out_dir = "{out}"

[data]
root = "{root}"

[data.synthetic]
n_images = 6
n_test = 2
image_size = 32
seed = 7
"#,
            out = dir.join("out").display(),
            root = dir.join("data").display()
        ),
    )
}

#[test]
fn generate_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = usps(&["generate", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("data/manifest.json").is_file());
    assert!(dir.path().join("out/events.jsonl").is_file());
}

#[test]
fn malformed_toml_exits_2_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 7\n[data\nroot = \"x\"\n");
    let o = usps(&["generate", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nroot = \"x\"\n[crf]\nwidth = 3\n");
    let o = usps(&["handcrafted", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));
}

#[test]
fn full_profile_without_data_root_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n");
    let o = usps(&["run-all", "--config", &cfg, "--profile", "full"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.root"), "{}", stderr(&o));
    let o = usps(&["run-all", "--profile", "full"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn refine_without_handcrafted_exits_3_naming_raw_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = usps(&["refine", "--config", &cfg, "--method", "rbd"], None);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("artifacts/rbd/raw"), "{}", stderr(&o));
}

#[test]
fn ablate_oracle_without_masks_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(usps(&["generate", "--config", &cfg], None).status.code(), Some(0));
    let manifest = dir.path().join("data/manifest.json");
    let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    for e in m["entries"].as_array_mut().unwrap() {
        e.as_object_mut().unwrap().remove("mask");
    }
    fs::write(&manifest, serde_json::to_vec(&m).unwrap()).unwrap();
    fs::remove_dir_all(dir.path().join("data/masks")).unwrap();

    let o = usps(&["ablate", "--config", &cfg, "--oracle"], None);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("ground-truth masks"), "{}", stderr(&o));
}

#[test]
fn env_var_overrides_configured_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let alt = dir.path().join("elsewhere");
    let o = usps(&["generate", "--config", &cfg], Some(&alt));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(alt.join("run_manifest.json").is_file());
    assert!(!dir.path().join("out").exists());

    // an explicit --out still wins
    let explicit = dir.path().join("explicit");
    let o = usps(&["generate", "--config", &cfg, "--out", explicit.to_str().unwrap()], Some(&alt));
    assert_eq!(o.status.code(), Some(0));
    assert!(explicit.join("run_manifest.json").is_file());
}

#[test]
fn events_are_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    usps(&["generate", "--config", &cfg], None);
    let text = fs::read_to_string(dir.path().join("out/events.jsonl")).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["msg"].is_string() && v["level"].is_string());
    }
}

#[test]
fn stage_commands_chain_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
seed = 3
out_dir = "{out}"

[data]
root = "{root}"

[data.synthetic]
n_images = 4
n_test = 2
image_size = 32
seed = 3

[methods]
enabled = ["rbd", "contrast_center"]

[optim]
batch_size = 2

[plan]
stage_a_epochs = 1
self_sup_max_iters = 1
fusion_epochs = 1

[plan.network]
base_width = 4

[eval]
failure_cases = 1
ablations = ["direct_fusion", "oracle_gt_training"]
"#,
            out = dir.path().join("out").display(),
            root = dir.path().join("data").display()
        ),
    );
    for stage in ["generate", "handcrafted", "refine", "fuse", "evaluate", "ablate", "report"] {
        let o = usps(&[stage, "--config", &cfg, "--quiet"], None);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    let out = dir.path().join("out");
    for p in [
        "artifacts/rbd/raw/maps",
        "artifacts/rbd/mva/iter1/labels",
        "artifacts/fusion/checkpoints/final.json",
        "report/report.md",
        "report/metrics.json",
        "run_manifest.json",
    ] {
        assert!(out.join(p).exists(), "{p} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    let bytes = fs::read(out.join("artifacts/fusion/checkpoints/final.json")).unwrap();
    let digest = hex::encode(Sha256::digest(&bytes));
    assert_eq!(manifest["artifacts"]["fusion/checkpoints/final.json"], digest);
}

#[test]
fn fixture_manifest_matches_golden_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            "[data]\nroot = \"{}\"\n[data.synthetic]\nn_images = 200\nn_test = 50\nimage_size = 64\nseed = 7\n",
            dir.path().join("data").display()
        ),
    );
    let o = usps(&["generate", "--config", &cfg, "--out", dir.path().join("out").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(dataset_digest(&dir.path().join("data")), GOLDEN_FIXTURE_DIGEST);
}

/// sha256 over manifest.json followed by every image and mask in manifest order.
fn dataset_digest(root: &Path) -> String {
    let manifest = fs::read(root.join("manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
    let mut h = Sha256::new();
    h.update(&manifest);
    for e in parsed["entries"].as_array().unwrap() {
        for key in ["image", "mask"] {
            if let Some(rel) = e[key].as_str() {
                h.update(fs::read(root.join(rel)).unwrap());
            }
        }
    }
    hex::encode(h.finalize())
}

const GOLDEN_FIXTURE_DIGEST: &str = "01624317178e55f869f9eb4f53b500658f2d2b0d0cd80475c2181f5dbdf5baf9";
