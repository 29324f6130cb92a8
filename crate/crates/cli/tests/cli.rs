use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use handprobe::{World, WorldConfig};

const SMALL_WORLD: &[&str] = &[
    "--override",
    "world.n_videos=4",
    "--override",
    "world.n_participants=2",
    "--override",
    "world.interactions_per_video=3",
];

fn handprobe(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handprobe"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_world_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let args = [SMALL_WORLD, &["--seed", "7", "gen-world"]].concat();
        assert!(handprobe(out, &args).status.success());
    }
    let digest = |out: &Path| manifest(out)["stages"]["gen-world"]["outputs"]["artifacts/world"].clone();
    assert!(digest(&a).is_string());
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(manifest(&a)["stages"]["gen-world"]["seed"], 7);
}

#[test]
fn noise_free_world_gives_one_track_per_interaction() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let noise = [
        "--override",
        "world.noise.box_sigma=0",
        "--override",
        "world.noise.miss_rate=0",
        "--override",
        "world.noise.false_positive_rate=0",
    ];
    assert!(handprobe(out, &[SMALL_WORLD, &noise, &["gen-world"]].concat()).status.success());
    assert!(handprobe(out, &["build-tracks"]).status.success());
    let text = fs::read_to_string(out.join("artifacts/world/world.json")).unwrap();
    let cfg: WorldConfig = serde_json::from_str(&text).unwrap();
    let world = World::generate(&cfg).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("artifacts/tracks/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["object_tracks"], world.interaction_count());
}

#[test]
fn missing_artifact_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = handprobe(dir.path(), &["build-tracks"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("handprobe gen-world"), "{err}");
}

#[test]
fn bad_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = handprobe(dir.path(), &["--override", "world.no_such_key=1", "gen-world"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = handprobe(dir.path(), &["--override", "novalue", "gen-world"]);
    assert_eq!(o.status.code(), Some(1));
    let o = handprobe(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn saved_config_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(handprobe(out, &[SMALL_WORLD, &["gen-world"]].concat()).status.success());
    let saved = fs::read_to_string(out.join("config")).unwrap();
    assert!(saved.contains("world.n_videos = 4\n"));
    assert!(handprobe(out, &["build-tracks"]).status.success());
    assert_eq!(fs::read_to_string(out.join("config")).unwrap(), saved);
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let tiny = [
        "pretrain.steps=3",
        "pretrain.batch_size=4",
        "pretrain.encoder.input_size=16",
        "pretrain.encoder.channels=[4,8]",
        "pretrain.encoder.hidden_dim=16",
        "pretrain.encoder.embed_dim=16",
        "pretrain.head.dims=[16,8]",
        "acp.steps=2",
        "acp.batch_size=2",
        "acp.model.input_size=32",
        "acp.model.encoder_channels=[4,4,4]",
        "acp.model.bottleneck_dim=8",
        "acp.model.decoder_channels=[4,4,4,4]",
        "acp.model.grasp_hidden=8",
        "acp.acp.reference_width=640",
        "acp.acp.infer_patches_per_side=10",
    ];
    let mut first: Vec<&str> = SMALL_WORLD.to_vec();
    for o in &tiny {
        first.extend(["--override", o]);
    }
    first.push("gen-world");
    assert!(handprobe(out, &first).status.success());
    for stage in [
        &["build-tracks"][..],
        &["pretrain"],
        &["probe"],
        &["probe", "--random-init"],
        &["acp-train"],
        &["acp-infer"],
        &["eval-roi"],
        &["eval-gao"],
        &["report"],
    ] {
        let o = handprobe(out, stage);
        assert!(o.status.success(), "{stage:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let a = out.join("artifacts");
    for f in ["report/report.json", "report/report.md", "eval_roi/pr_curve.json", "probe_random/eval.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let stages = manifest(out)["stages"].as_object().unwrap().len();
    assert_eq!(stages, 10);
}
