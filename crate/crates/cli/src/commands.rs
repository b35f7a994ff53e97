use std::path::{Path, PathBuf};

use bubblesplat::camera::{read_cameras, write_cameras, CameraModel};
use bubblesplat::config::ReconstructionConfig;
use bubblesplat::dataset::Dataset;
use bubblesplat::evaluate::{compare_datasets, evaluate_sequence, GroundTruth};
use bubblesplat::io::{read_series_csv, write_bytes, write_series_csv, FrameSeries};
use bubblesplat::mesh::{default_bounds, marching_cubes, orient_outward, sdf_field};
use bubblesplat::metrics::write_metrics_csv;
use bubblesplat::optim::loss_trace_csv;
use bubblesplat::pipeline::{reconstruct as run_stage1, Reconstruction};
use bubblesplat::refine::{default_orbit, optimize_stage2, refine_videos, render_rough_videos, NovelVideos, RefinerHook};
use bubblesplat::sequence::SceneSequence;
use bubblesplat::surface::opacity_transform;
use bubblesplat::surfel::BubbleId;
use bubblesplat::synth::{SceneSpec, SyntheticScene};
use bubblesplat::{Error, Result};

use crate::plot::velocity_svg;
use crate::{EvaluateArgs, GenArgs, MeshArgs, PlotArgs, ReconstructArgs, RefineArgs, RenderOrbitArgs, Stage2Args, VelocityArgs, OUT_ENV};

pub const CHECKPOINT: &str = "checkpoint.sfph";

/// `--out` if given, else `$BUBBLESPLAT_OUT/<name>`, else `out/<name>`.
fn output(out: &Option<PathBuf>, name: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")).join(name)
    })
}

fn beside(checkpoint: &Path, file: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(file)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ReconstructionConfig> {
    let mut cfg = match path {
        Some(p) => ReconstructionConfig::load(p)?,
        None => ReconstructionConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Config given explicitly or stored beside the checkpoint.
fn checkpoint_config(explicit: &Option<PathBuf>, checkpoint: &Path, seed: Option<u64>) -> Result<ReconstructionConfig> {
    let stored = beside(checkpoint, "config.toml");
    match explicit {
        Some(p) => load_config(Some(p), seed),
        None if stored.exists() => load_config(Some(&stored), seed),
        None => load_config(None, seed),
    }
}

fn checkpoint_cameras(explicit: &Option<PathBuf>, checkpoint: &Path) -> Result<Vec<CameraModel>> {
    read_cameras(&explicit.clone().unwrap_or_else(|| beside(checkpoint, "cameras.json")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

fn write_reconstruction(out: &Path, r: &Reconstruction, cfg: &ReconstructionConfig, cameras: &[CameraModel]) -> Result<()> {
    r.sequence.save(&out.join(CHECKPOINT))?;
    write_text(&out.join("loss.csv"), &loss_trace_csv(&r.trace))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    write_cameras(&out.join("cameras.json"), cameras)
}

pub fn gen_synthetic(a: &GenArgs, seed: Option<u64>) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => SceneSpec::load(p)?,
        None => SceneSpec::default(),
    };
    let scene = SyntheticScene::generate(seed.unwrap_or(0), &spec)?;
    let out = output(&a.out, "synthetic");
    scene.write(&out)?;
    log::info!("wrote {} frames to {}", spec.frames, out.display());
    Ok(())
}

pub fn reconstruct(a: &ReconstructArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), seed)?;
    let ds = Dataset::load(&a.data, a.cameras.as_deref())?;
    let r = run_stage1(&ds, &cfg)?;
    write_reconstruction(&output(&a.out, "stage1"), &r, &cfg, &ds.cameras)
}

pub fn render_orbit(a: &RenderOrbitArgs) -> Result<()> {
    let seq = SceneSequence::load(&a.checkpoint)?;
    let cfg = checkpoint_config(&a.config, &a.checkpoint, None)?;
    let inputs = checkpoint_cameras(&a.cameras, &a.checkpoint)?;
    let orbit = default_orbit(&seq, &inputs, &cfg.refine)?;
    render_rough_videos(&seq, &orbit, &cfg.refine).save(&output(&a.out, "rough"))
}

pub fn refine(a: &RefineArgs) -> Result<()> {
    let mut rough = NovelVideos::load(&a.rough)?;
    if let Some(s) = a.strength {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidConfig(format!("strength must lie in [0, 1], got {s}")));
        }
        rough.strengths.iter_mut().for_each(|v| *v = s);
    }
    let kind = if a.hook == "denoise" { "gaussian_denoise" } else { a.hook.as_str() };
    let hook = RefinerHook::parse(kind, a.external_dir.as_deref())?;
    refine_videos(&rough, &hook)?.save(&output(&a.out, "refined"))
}

pub fn reconstruct_stage2(a: &Stage2Args, seed: Option<u64>) -> Result<()> {
    let stage1 = SceneSequence::load(&a.checkpoint)?;
    let cfg = checkpoint_config(&a.config, &a.checkpoint, seed)?;
    let ds = Dataset::load(&a.data, a.cameras.as_deref())?;
    let mut refined = NovelVideos::load(&a.refined)?;
    let count = refined.cameras.len();
    refined.weights = (1..=count).map(|s| cfg.refine.weight(s, count)).collect();
    let r = optimize_stage2(&ds, &stage1, &refined, &cfg)?;
    write_reconstruction(&output(&a.out, "stage2"), &r, &cfg, &ds.cameras)
}

pub fn extract_mesh(a: &MeshArgs) -> Result<()> {
    let seq = SceneSequence::load(&a.checkpoint)?;
    let surfels = seq.frames.get(a.frame).ok_or_else(|| {
        Error::InvalidConfig(format!("frame {} out of range (checkpoint has {})", a.frame, seq.frames.len()))
    })?;
    let cameras = match &a.cameras {
        Some(p) => read_cameras(p)?,
        None if beside(&a.checkpoint, "cameras.json").exists() => read_cameras(&beside(&a.checkpoint, "cameras.json"))?,
        None => Vec::new(),
    };
    let oriented = orient_outward(surfels, seq.gamma, &cameras);
    let kept: Vec<_> = oriented.iter().filter(|s| opacity_transform(s.sdf, seq.gamma) >= a.min_opacity).cloned().collect();
    let bounds = default_bounds(&kept)?;
    let grid = sdf_field(&kept, seq.gamma, &bounds, a.resolution, a.min_opacity)?;
    let mesh = marching_cubes(&grid, 0.0)?;
    let out = output(&a.out, &format!("mesh_{:05}.obj", a.frame));
    match out.extension().and_then(|e| e.to_str()) {
        Some("obj") => mesh.write_obj(&out),
        Some("ply") => mesh.write_ply(&out),
        _ => Err(Error::InvalidConfig(format!("mesh output must end in .obj or .ply: {}", out.display()))),
    }
}

pub fn estimate_velocity(a: &VelocityArgs) -> Result<()> {
    let seq = SceneSequence::load(&a.checkpoint)?;
    let est = seq.velocities()?;
    let out = output(&a.out, "velocity");
    let bubbles: FrameSeries = est.bubble.clone();
    write_series_csv(&out.join("bubble_velocity.csv"), ["vx", "vy", "vz"], &bubbles)?;
    let mut centroids = FrameSeries::new();
    for (t, f) in seq.frames.iter().enumerate() {
        let bindings: Vec<BubbleId> = f.iter().map(|s| s.bubble).collect();
        centroids.insert(t, bubblesplat::bubbles::bubble_centroids_with(f, &bindings, seq.gamma));
    }
    write_series_csv(&out.join("bubble_centroids.csv"), ["x", "y", "z"], &centroids)?;
    let mut text = String::from("t,surfel,bubble_id,vx,vy,vz\n");
    for (t, row) in est.surfel.iter().enumerate().skip(1) {
        for (i, v) in row.iter().enumerate() {
            let id = seq.frames[t][i].bubble.to_i32();
            text.push_str(&format!("{t},{i},{id},{:.9},{:.9},{:.9}\n", v.x, v.y, v.z));
        }
    }
    write_text(&out.join("surfel_velocity.csv"), &text)?;
    write_series_csv(&out.join("guidance_velocity.csv"), ["vx", "vy", "vz"], &seq.guidance.iter().cloned().enumerate().filter(|(_, g)| !g.is_empty()).collect())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let rows = if a.pred.is_dir() {
        compare_datasets(&Dataset::load(&a.pred, None)?, &Dataset::load(&a.gt, None)?)?
    } else {
        let seq = SceneSequence::load(&a.pred)?;
        evaluate_sequence(&seq, &GroundTruth::load(&a.gt, seq.frames.len())?)?
    };
    let out = output(&a.out, "metrics.csv");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::InvalidConfig(format!("cannot create {}: {e}", dir.display())))?;
    }
    write_metrics_csv(&out, &rows)
}

pub fn plot(a: &PlotArgs) -> Result<()> {
    let series = read_series_csv(&a.velocity_csv)?;
    let gt = a.gt_csv.as_deref().map(read_series_csv).transpose()?;
    if let Some(dt) = a.dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
    }
    let svg = velocity_svg(&series, gt.as_ref(), a.dt);
    write_text(&output(&a.out, "velocity.svg"), &svg)
}
