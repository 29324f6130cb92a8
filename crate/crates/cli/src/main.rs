use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use handprobe::acp::infer_heatmaps;
use handprobe::array_file::{read_array, write_array};
use handprobe::config::parse_override;
use handprobe::detections::{parse_detections_jsonl, ParseOptions};
use handprobe::eval::{gao_map, pr_curve, EvalRecord, SlackSide};
use handprobe::frames::FrameDir;
use handprobe::image_ops::Image;
use handprobe::models::{load_checkpoint, save_checkpoint, AcpModel, ObjectModel};
use handprobe::pipeline::{
    evaluate_roi, held_out_participants, probe_dataset, probe_model, scene_grasp_scores,
};
use handprobe::synthworld::{Scene, World, WorldConfig};
use handprobe::tensor::Tensor;
use handprobe::tracker::{build_tracks, read_tracks_jsonl, write_tracks_jsonl, TrackKind, TrackingMode};
use handprobe::training::{pretrain, train_acp, write_metrics_csv, PretrainMode, StepMetrics};
use handprobe::{Error, RunConfig};

mod plot;
mod run;

use run::{MissingArtifact, RunDir};

#[derive(Parser, Debug)]
#[command(name = "handprobe", version, about = "Hand-probed object state and affordance pipeline")]
struct Cli {
    /// Flat `section.key = value` config file; defaults to the run's saved config.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/default")]
    out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic world: frames, detections and ground truth.
    GenWorld,
    /// Link detections into object tracks.
    BuildTracks,
    /// Contrastive pretraining of the object encoder.
    Pretrain,
    /// Linear state probe on frozen encoder features.
    Probe {
        /// Probe a randomly initialised encoder instead of the pretrained one.
        #[arg(long)]
        random_init: bool,
    },
    /// Train the context-prediction model.
    AcpTrain,
    /// Interaction and grasp heatmaps for the held-out scenes.
    AcpInfer,
    /// Region-of-interaction AP at 0% and 1% slack.
    EvalRoi,
    /// Grasps-afforded-by-objects mAP.
    EvalGao,
    /// Collect evaluations and render plots.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenWorld => "gen-world",
            Command::BuildTracks => "build-tracks",
            Command::Pretrain => "pretrain",
            Command::Probe { .. } => "probe",
            Command::AcpTrain => "acp-train",
            Command::AcpInfer => "acp-infer",
            Command::EvalRoi => "eval-roi",
            Command::EvalGao => "eval-gao",
            Command::Report => "report",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<MissingArtifact>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Numeric(_)) => 3,
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

struct Ctx {
    run: RunDir,
    cfg: RunConfig,
    seed: u64,
}

fn resolve_config(cli: &Cli, run: &RunDir) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if run.config_path().exists() => RunConfig::load(&run.config_path())?,
        None => RunConfig::default(),
    };
    let pairs = cli
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<handprobe::Result<Vec<_>>>()?;
    cfg.apply(&pairs)?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let run = RunDir::new(&cli.out);
    let cfg = resolve_config(cli, &run)?;
    let ctx = Ctx { run, cfg, seed: cli.seed };
    ctx.run.write_config(&ctx.cfg)?;
    info!("{} -> {}", cli.command.name(), ctx.run.root.display());
    match &cli.command {
        Command::GenWorld => gen_world(&ctx),
        Command::BuildTracks => build_tracks_cmd(&ctx),
        Command::Pretrain => pretrain_cmd(&ctx),
        Command::Probe { random_init } => probe_cmd(&ctx, *random_init),
        Command::AcpTrain => acp_train_cmd(&ctx),
        Command::AcpInfer => acp_infer_cmd(&ctx),
        Command::EvalRoi => eval_roi_cmd(&ctx),
        Command::EvalGao => eval_gao_cmd(&ctx),
        Command::Report => report_cmd(&ctx),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_world(ctx: &Ctx) -> Result<World> {
    let path = ctx.run.require("world/world.json", "gen-world")?;
    let text = fs::read_to_string(&path)?;
    let cfg: WorldConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(World::generate(&cfg)?)
}

fn frames(ctx: &Ctx) -> Result<FrameDir> {
    Ok(FrameDir::new(ctx.run.require("world/frames", "gen-world")?))
}

fn held_out(ctx: &Ctx, world: &World) -> Vec<usize> {
    held_out_participants(world.cfg.n_participants, ctx.cfg.probe.held_out_fraction)
}

fn gen_world(ctx: &Ctx) -> Result<()> {
    let mut wcfg = ctx.cfg.world.clone();
    wcfg.seed = ctx.seed;
    let world = World::generate(&wcfg)?;
    let dir = ctx.run.fresh_dir("world")?;
    world.write_to_dir(&dir)?;
    info!("{} videos, {} interactions", world.videos.len(), world.interaction_count());
    ctx.run.record("gen-world", ctx.seed, &ctx.cfg, &[], &["world"])
}

fn build_tracks_cmd(ctx: &Ctx) -> Result<()> {
    let det_path = ctx.run.require("world/detections.jsonl", "gen-world")?;
    let file = File::open(&det_path).with_context(|| format!("opening {}", det_path.display()))?;
    let parsed = parse_detections_jsonl(BufReader::new(file), ParseOptions::default())?;
    let mode: TrackingMode = ctx.cfg.tracking.mode.parse()?;
    let tracks = build_tracks(&parsed.frames, &ctx.cfg.tracking.params, &mode, ctx.seed)?;
    let dir = ctx.run.fresh_dir("tracks")?;
    let out = File::create(dir.join("tracks.jsonl"))?;
    write_tracks_jsonl(BufWriter::new(out), &tracks)?;
    let objects = tracks.iter().filter(|t| t.kind == TrackKind::Object).count();
    let linked: usize = tracks.iter().map(|t| t.hand_linked_count()).sum();
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "tracks": tracks.len(),
            "object_tracks": objects,
            "hand_linked_entries": linked,
            "parse_warnings": parsed.warnings,
        }),
    )?;
    info!("{} tracks ({} object)", tracks.len(), objects);
    ctx.run.record("build-tracks", ctx.seed, &ctx.cfg, &["world/detections.jsonl"], &["tracks"])
}

fn loss_plot(metrics: &[StepMetrics], path: &Path) -> Result<()> {
    let mut series = vec![metrics.iter().map(|m| (m.step as f64, m.loss)).collect::<Vec<_>>()];
    for part in [|m: &StepMetrics| m.loss_a, |m: &StepMetrics| m.loss_b] {
        let s: Vec<(f64, f64)> = metrics.iter().filter_map(|m| part(m).map(|v| (m.step as f64, v))).collect();
        if !s.is_empty() {
            series.push(s);
        }
    }
    save_png(&plot::line_chart(&series, None, 480, 320), path)
}

fn load_tracks(ctx: &Ctx) -> Result<Vec<handprobe::Track>> {
    let path = ctx.run.require("tracks/tracks.jsonl", "build-tracks")?;
    let file = File::open(&path)?;
    Ok(read_tracks_jsonl(BufReader::new(file))?)
}

fn pretrain_cmd(ctx: &Ctx) -> Result<()> {
    let tracks = load_tracks(ctx)?;
    let frames = frames(ctx)?;
    let out = pretrain(&tracks, &frames, &ctx.cfg.pretrain, ctx.seed)?;
    let dir = ctx.run.fresh_dir("pretrain")?;
    save_checkpoint(&out.object, ctx.seed, &dir.join("object.hpa"))?;
    if let Some(hand) = &out.hand {
        save_checkpoint(hand, ctx.seed, &dir.join("hand.hpa"))?;
    }
    let names = match ctx.cfg.pretrain.mode {
        PretrainMode::Tsc | PretrainMode::TscOhc | PretrainMode::Simclr => ["loss_temporal", "loss_hand"],
        PretrainMode::Tcn | PretrainMode::SimclrTcn => ["loss_a", "loss_b"],
    };
    write_metrics_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), &out.metrics, names)?;
    loss_plot(&out.metrics, &dir.join("loss.png"))?;
    ctx.run.record("pretrain", ctx.seed, &ctx.cfg, &["tracks/tracks.jsonl", "world/frames"], &["pretrain"])
}

fn record(ctx: &Ctx, task: &str, metric: &str, value: f64, chance: Option<f64>) -> EvalRecord {
    EvalRecord {
        task: task.into(),
        metric: metric.into(),
        value,
        chance,
        seed: ctx.seed,
        config_hash: ctx.cfg.hash(),
    }
}

fn probe_cmd(ctx: &Ctx, random_init: bool) -> Result<()> {
    let world = load_world(ctx)?;
    let tracks = load_tracks(ctx)?;
    let frames = frames(ctx)?;
    let pcfg = &ctx.cfg.pretrain;
    let mut model = ObjectModel::new(&pcfg.encoder, &pcfg.head, pcfg.mode == PretrainMode::TscOhc, ctx.seed);
    let stage = if random_init { "probe_random" } else { "probe" };
    let mut inputs = vec!["tracks/tracks.jsonl", "world/world.json"];
    if !random_init {
        let ckpt = ctx.run.require("pretrain/object.hpa", "pretrain")?;
        load_checkpoint(&mut model, &ckpt)?;
        inputs.push("pretrain/object.hpa");
    }
    let data = probe_dataset(&world, &tracks, ctx.cfg.probe.stride)?;
    let held = held_out(ctx, &world);
    let report = probe_model(&mut model, &frames, &data, &held, &pcfg.normalization, &ctx.cfg.probe.solver)?;
    let dir = ctx.run.fresh_dir(stage)?;
    let mut records = vec![record(ctx, stage, "state_map", report.map, Some(report.chance))];
    for t in &report.tasks {
        records.push(record(ctx, &format!("{stage}/{}", t.name), "ap", t.ap, Some(t.prevalence)));
    }
    write_json(&dir.join("eval.json"), &records)?;
    write_json(&dir.join("excluded.json"), &report.excluded)?;
    info!("state mAP {:.3} (chance {:.3}) over {} crops", report.map, report.chance, data.len());
    ctx.run.record(stage, ctx.seed, &ctx.cfg, &inputs, &[stage])
}

fn acp_train_cmd(ctx: &Ctx) -> Result<()> {
    let world = load_world(ctx)?;
    let det_path = ctx.run.require("world/detections.jsonl", "gen-world")?;
    let parsed = parse_detections_jsonl(BufReader::new(File::open(&det_path)?), ParseOptions::default())?;
    let held = held_out(ctx, &world);
    let train_ids: Vec<String> = world
        .videos
        .iter()
        .filter(|v| !held.contains(&v.participant))
        .map(|v| v.video_id.clone())
        .collect();
    let dets: Vec<_> = parsed.frames.into_iter().filter(|f| train_ids.contains(&f.video_id)).collect();
    let frames = frames(ctx)?;
    let out = train_acp(&frames, &dets, &ctx.cfg.acp, ctx.seed)?;
    let dir = ctx.run.fresh_dir("acp")?;
    save_checkpoint(&out.model, ctx.seed, &dir.join("model.hpa"))?;
    write_metrics_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), &out.metrics, ["loss_seg", "loss_grasp"])?;
    loss_plot(&out.metrics, &dir.join("loss.png"))?;
    info!("trained on {} patches", out.patches);
    ctx.run.record("acp-train", ctx.seed, &ctx.cfg, &["world/detections.jsonl", "world/frames"], &["acp"])
}

fn held_out_ids(ctx: &Ctx, world: &World) -> Vec<String> {
    let held = held_out(ctx, world);
    world
        .videos
        .iter()
        .filter(|v| held.contains(&v.participant))
        .map(|v| v.video_id.clone())
        .collect()
}

fn acp_infer_cmd(ctx: &Ctx) -> Result<()> {
    let world = load_world(ctx)?;
    let ckpt = ctx.run.require("acp/model.hpa", "acp-train")?;
    let mut model = AcpModel::new(&ctx.cfg.acp.model, ctx.seed)?;
    load_checkpoint(&mut model, &ckpt)?;
    let scenes = ctx.run.require("world/scenes", "gen-world")?;
    let dir = ctx.run.fresh_dir("heatmaps")?;
    for id in held_out_ids(ctx, &world) {
        let image = Image::load(&scenes.join(format!("{id}.png")))?;
        let set = infer_heatmaps(&image, &mut model, &ctx.cfg.acp.normalization, &ctx.cfg.acp.acp)?;
        set.roi.save(&dir.join(format!("{id}_roi")))?;
        let (w, h) = (image.width, image.height);
        let data: Vec<f32> = set.grasps.iter().flat_map(|g| g.data.iter().copied()).collect();
        write_array(dir.join(format!("{id}_grasps.hpa")), &Tensor::from_vec(&[set.grasps.len(), h, w], data)?)?;
        info!("heatmaps for {id}");
    }
    ctx.run.record("acp-infer", ctx.seed, &ctx.cfg, &["acp/model.hpa", "world/scenes"], &["heatmaps"])
}

fn read_heatmap(path: &Path, w: usize, h: usize) -> Result<Vec<f32>> {
    let t = read_array(path)?;
    if t.shape() != [h, w] {
        bail!("{}: expected a {h}x{w} heatmap, got {:?}", path.display(), t.shape());
    }
    Ok(t.data().to_vec())
}

fn eval_scenes(ctx: &Ctx, world: &World) -> Result<Vec<Scene>> {
    let ids = held_out_ids(ctx, world);
    Ok(world
        .videos
        .iter()
        .filter(|v| ids.contains(&v.video_id))
        .map(|v| world.scene(v))
        .filter(|s| s.roi_mask.iter().any(|&m| m))
        .collect())
}

fn eval_roi_cmd(ctx: &Ctx) -> Result<()> {
    let world = load_world(ctx)?;
    let hdir = ctx.run.require("heatmaps", "acp-infer")?;
    let (w, h) = (world.cfg.width, world.cfg.height);
    let scenes = eval_scenes(ctx, &world)?;
    let heats = scenes
        .iter()
        .map(|s| {
            let p = hdir.join(format!("{}_roi.hpa", s.video_id));
            if !p.exists() {
                return Err(MissingArtifact { path: p, stage: "acp-infer" }.into());
            }
            read_heatmap(&p, w, h)
        })
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<(&str, &[f32], &[bool])> = scenes
        .iter()
        .zip(&heats)
        .map(|(s, hm)| (s.video_id.as_str(), hm.as_slice(), s.roi_mask.as_slice()))
        .collect();
    let report = evaluate_roi(&items, w, h, SlackSide::Both)?;
    let dir = ctx.run.fresh_dir("eval_roi")?;
    let records = vec![
        record(ctx, "roi", "ap_slack0", report.ap_slack0, Some(report.chance)),
        record(ctx, "roi", "ap_slack1", report.ap_slack1, Some(report.chance)),
    ];
    write_json(&dir.join("eval.json"), &records)?;
    write_json(&dir.join("scenes.json"), &report.scenes)?;
    let scores: Vec<f64> = heats.iter().flatten().map(|&v| v as f64).collect();
    let labels: Vec<bool> = scenes.iter().flat_map(|s| s.roi_mask.iter().copied()).collect();
    let curve = pr_curve(&scores, &labels)?;
    write_json(&dir.join("pr_curve.json"), &curve)?;
    info!("ROI AP {:.3} (1% slack {:.3}, chance {:.3})", report.ap_slack0, report.ap_slack1, report.chance);
    ctx.run.record("eval-roi", ctx.seed, &ctx.cfg, &["heatmaps"], &["eval_roi"])
}

fn eval_gao_cmd(ctx: &Ctx) -> Result<()> {
    let world = load_world(ctx)?;
    let hdir = ctx.run.require("heatmaps", "acp-infer")?;
    let (w, h) = (world.cfg.width, world.cfg.height);
    let g = world.cfg.grasp_classes;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for scene in eval_scenes(ctx, &world)? {
        let p = hdir.join(format!("{}_grasps.hpa", scene.video_id));
        if !p.exists() {
            return Err(MissingArtifact { path: p, stage: "acp-infer" }.into());
        }
        let t = read_array(&p)?;
        if t.shape() != [g, h, w] {
            bail!("{}: expected {g}x{h}x{w} grasp heatmaps, got {:?}", p.display(), t.shape());
        }
        let (s, l) = scene_grasp_scores(&scene, t.data(), g)?;
        scores.extend(s);
        labels.extend(l);
    }
    let report = gao_map(&scores, &labels)?;
    let dir = ctx.run.fresh_dir("eval_gao")?;
    let mut records = vec![record(ctx, "gao", "map", report.map, Some(report.chance))];
    for gs in &report.grasps {
        records.push(record(ctx, &format!("gao/grasp{}", gs.grasp), "ap", gs.ap, Some(gs.chance)));
    }
    write_json(&dir.join("eval.json"), &records)?;
    info!("GAO mAP {:.3} (chance {:.3})", report.map, report.chance);
    ctx.run.record("eval-gao", ctx.seed, &ctx.cfg, &["heatmaps"], &["eval_gao"])
}

fn read_metrics(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            let step: f64 = it.next().unwrap_or_default().parse()?;
            let loss: f64 = it.next().unwrap_or_default().parse()?;
            Ok((step, loss))
        })
        .collect()
}

fn report_cmd(ctx: &Ctx) -> Result<()> {
    let sources = ["probe", "probe_random", "eval_roi", "eval_gao"];
    let present: Vec<&str> = sources
        .iter()
        .copied()
        .filter(|s| ctx.run.artifact(&format!("{s}/eval.json")).exists())
        .collect();
    if present.is_empty() {
        return Err(MissingArtifact {
            path: ctx.run.artifact("eval_roi/eval.json"),
            stage: "probe, eval-roi or eval-gao",
        }
        .into());
    }
    let dir = ctx.run.fresh_dir("report")?;
    let mut all: Vec<EvalRecord> = Vec::new();
    for s in &present {
        let text = fs::read_to_string(ctx.run.artifact(&format!("{s}/eval.json")))?;
        all.extend(serde_json::from_str::<Vec<EvalRecord>>(&text)?);
    }
    write_json(&dir.join("report.json"), &all)?;
    let mut md = String::from("| task | metric | value | chance |\n|---|---|---|---|\n");
    for r in &all {
        let chance = r.chance.map(|c| format!("{c:.4}")).unwrap_or_default();
        md.push_str(&format!("| {} | {} | {:.4} | {} |\n", r.task, r.metric, r.value, chance));
    }
    fs::write(dir.join("report.md"), md)?;

    let curve_path = ctx.run.artifact("eval_roi/pr_curve.json");
    if curve_path.exists() {
        let curve: Vec<(f64, f64)> = serde_json::from_str(&fs::read_to_string(&curve_path)?)?;
        save_png(&plot::line_chart(&[curve], Some([0.0, 1.0, 0.0, 1.0]), 400, 400), &dir.join("pr_roi.png"))?;
    }
    for stage in ["pretrain", "acp"] {
        let p = ctx.run.artifact(&format!("{stage}/metrics.csv"));
        if p.exists() {
            save_png(&plot::line_chart(&[read_metrics(&p)?], None, 480, 320), &dir.join(format!("loss_{stage}.png")))?;
        }
    }
    let hdir = ctx.run.artifact("heatmaps");
    if hdir.exists() {
        let world = load_world(ctx)?;
        let (w, h) = (world.cfg.width, world.cfg.height);
        for id in held_out_ids(ctx, &world) {
            let hp = hdir.join(format!("{id}_roi.hpa"));
            if !hp.exists() {
                continue;
            }
            let scene = Image::load(&ctx.run.artifact(&format!("world/scenes/{id}.png")))?;
            let heat = read_heatmap(&hp, w, h)?;
            save_png(&plot::overlay(&scene, &heat), &dir.join(format!("{id}_overlay.png")))?;
        }
    }
    let mut inputs: Vec<String> = present.iter().map(|s| format!("{s}/eval.json")).collect();
    if hdir.exists() {
        inputs.push("heatmaps".into());
    }
    let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    ctx.run.record("report", ctx.seed, &ctx.cfg, &inputs, &["report"])
}
