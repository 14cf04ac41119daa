//! Command-line surface. Every command writes its outputs plus `config.txt`
//! and `manifest.json` into `--out`.

use crate::anchors::{choose_anchors, RenderedFeatures, NOISE};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::guidance::{invert_single_code, GuidanceOracle, Prompt, RemoteClipOracle, TargetImageOracle};
use crate::image::Image;
use crate::pac::{tv_value, AnchorSet};
use crate::render::{render_view, Camera, ViewCache};
use crate::scene::{interpolate_codes, SceneManipulator};
use crate::synth::{self, AnalyticScene, PartState, SceneDataset};
use crate::tensor::Graph;
use crate::trainer::{eval_scene, pose_stability, render_frame, train_edit, write_csv, EditStepLog, SceneTrainer};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pacnerf", version, about = "Deformable neural fields with anchor composition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// flat key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// key=value, applied after --config; repeatable
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct PromptArgs {
    /// target image (PPM), one per prompt camera
    #[arg(long = "prompt-image")]
    images: Vec<PathBuf>,
    /// ring camera of each prompt image; defaults to the edit cameras
    #[arg(long = "prompt-camera")]
    cameras: Vec<usize>,
    /// text instruction; repeat for paraphrases. Needs GUIDANCE_URL
    #[arg(long = "prompt-text")]
    text: Vec<String>,
    /// synthetic target "eye,mouth" rendered from the analytic scene at the edit cameras
    #[arg(long = "prompt-state")]
    state: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a scripted synthetic dataset
    Synth {
        #[command(flatten)]
        common: Common,
        /// linked or full
        #[arg(long)]
        script: Option<String>,
    },
    /// Fit the deformable scene to a dataset
    TrainScene {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Cluster learned codes and store the anchor frames
    Anchors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the anchor composition network against a prompt
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Optimise a single global code against a prompt
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Render a learned frame, or the edited scene
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// frame whose code is rendered (default: the rigid frame)
        #[arg(long)]
        frame: Option<usize>,
        /// ring camera (default: every camera)
        #[arg(long)]
        camera: Option<usize>,
        /// render through the composition network
        #[arg(long)]
        edited: bool,
    },
    /// Render along a straight line between two learned codes
    Interp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        camera: usize,
    },
    /// Export per-anchor composition ratio maps of an edited checkpoint
    AcrMaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// ring camera (default: the edit cameras)
        #[arg(long)]
        camera: Option<usize>,
    },
    /// Finite-difference check of every gradient
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Held-out PSNR and pose stability of a scene checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::TrainScene { .. } => "train-scene",
            Command::Anchors { .. } => "anchors",
            Command::Edit { .. } => "edit",
            Command::Invert { .. } => "invert",
            Command::Render { .. } => "render",
            Command::Interp { .. } => "interp",
            Command::AcrMaps { .. } => "acr-maps",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Eval { .. } => "eval",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::TrainScene { common, .. }
            | Command::Anchors { common, .. }
            | Command::Edit { common, .. }
            | Command::Invert { common, .. }
            | Command::Render { common, .. }
            | Command::Interp { common, .. }
            | Command::AcrMaps { common, .. }
            | Command::Gradcheck { common }
            | Command::Eval { common, .. } => common,
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    config_hash: String,
    seed: u64,
    version: &'a str,
    outputs: Vec<String>,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        return EXIT_NUMERIC;
    }
    match e {
        Error::Config(_) | Error::Invalid(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Messages go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli.command, args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Output directory bookkeeping.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }
}

fn resolve_config(common: &Common, base: Option<Config>) -> Result<Config> {
    let mut c = base.unwrap_or_default();
    if let Some(p) = &common.config {
        c.apply_text(&std::fs::read_to_string(p)?)?;
    }
    for kv in &common.overrides {
        c.apply_override(kv)?;
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn execute(cmd: &Command, argv: Vec<String>) -> Result<()> {
    let common = cmd.common();
    std::fs::create_dir_all(&common.out)?;
    let mut out = Outputs {
        dir: common.out.clone(),
        written: Vec::new(),
    };
    let config = match cmd {
        Command::Synth { script, .. } => {
            let mut c = resolve_config(common, None)?;
            if let Some(s) = script {
                c.set("script", s)?;
            }
            c
        }
        Command::Anchors { checkpoint, .. }
        | Command::Edit { checkpoint, .. }
        | Command::Invert { checkpoint, .. }
        | Command::Render { checkpoint, .. }
        | Command::Interp { checkpoint, .. }
        | Command::AcrMaps { checkpoint, .. }
        | Command::Eval { checkpoint, .. } => {
            let ck = Checkpoint::load(checkpoint)?;
            resolve_config(common, Some(ck.config))?
        }
        _ => resolve_config(common, None)?,
    };
    match cmd {
        Command::Synth { .. } => cmd_synth(&config, &mut out)?,
        Command::TrainScene { data, .. } => cmd_train(&config, data, &mut out)?,
        Command::Anchors { checkpoint, data, .. } => cmd_anchors(&config, checkpoint, data, &mut out)?,
        Command::Edit { checkpoint, prompt, .. } => cmd_edit(&config, checkpoint, prompt, &mut out)?,
        Command::Invert { checkpoint, prompt, .. } => cmd_invert(&config, checkpoint, prompt, &mut out)?,
        Command::Render {
            checkpoint,
            frame,
            camera,
            edited,
            ..
        } => cmd_render(&config, checkpoint, *frame, *camera, *edited, &mut out)?,
        Command::Interp {
            checkpoint,
            from,
            to,
            steps,
            camera,
            ..
        } => cmd_interp(&config, checkpoint, *from, *to, *steps, *camera, &mut out)?,
        Command::AcrMaps { checkpoint, camera, .. } => cmd_acr_maps(&config, checkpoint, *camera, &mut out)?,
        Command::Gradcheck { .. } => cmd_gradcheck(&config, &mut out)?,
        Command::Eval { checkpoint, data, .. } => cmd_eval(&config, checkpoint, data, &mut out)?,
    }
    std::fs::write(out.path("config.txt"), config.to_text())?;
    let manifest = Manifest {
        command: cmd.name(),
        argv,
        config_hash: config.hash(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION"),
        outputs: out.written.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out.dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

fn cmd_synth(config: &Config, out: &mut Outputs) -> Result<()> {
    let (ds, gt) = synth::generate(&config.synth, &AnalyticScene::default())?;
    synth::save(&out.path("dataset.dnfs"), &ds, Some(&gt))?;
    let mut rows = Vec::with_capacity(ds.len());
    for (n, s) in gt.states.iter().enumerate() {
        rows.push(vec![
            n as f64,
            synth::frame_camera(n, config.synth.cameras) as f64,
            s.eye,
            s.mouth,
            s.yaw,
            if synth::is_held_out(n) { 1.0 } else { 0.0 },
        ]);
    }
    write_csv(&out.path("states.csv"), &["frame", "camera", "eye", "mouth", "yaw", "held_out"], &rows)?;
    for n in 0..ds.len().min(config.synth.cameras) {
        ds.frames[n].write_ppm(&out.path(&format!("preview_{n:03}.ppm")))?;
    }
    Ok(())
}

fn load_dataset(path: &Path, config: &Config) -> Result<SceneDataset> {
    let ds = synth::load(path)?;
    if (ds.width, ds.height) != (config.synth.width, config.synth.height) {
        return Err(Error::Config(format!(
            "dataset is {}x{} but the config says {}x{}",
            ds.width, ds.height, config.synth.width, config.synth.height
        )));
    }
    if config.rigid_frame >= ds.len() {
        return Err(Error::Config(format!("rigid_frame {} outside {} frames", config.rigid_frame, ds.len())));
    }
    Ok(ds)
}

fn cmd_train(config: &Config, data: &Path, out: &mut Outputs) -> Result<()> {
    let ds = load_dataset(data, config)?;
    let scene_cfg = config.scene_config();
    let mut trainer = SceneTrainer::new(&ds, scene_cfg.clone())?;
    let mut rows = Vec::with_capacity(scene_cfg.iterations);
    for _ in 0..scene_cfg.iterations {
        let log = trainer.step()?;
        if log.step % 100 == 0 {
            eprintln!("step {} loss {:.6} mse {:.6}", log.step, log.loss, log.mse);
        }
        rows.push(vec![log.step as f64, log.loss, log.mse, log.lipschitz]);
    }
    write_csv(&out.path("train_log.csv"), &["step", "loss", "mse", "lipschitz"], &rows)?;
    let report = eval_scene(&trainer.model, &ds, &scene_cfg)?;
    let rows: Vec<Vec<f64>> = report.held_out.iter().map(|&(n, p)| vec![n as f64, p]).collect();
    write_csv(&out.path("heldout.csv"), &["frame", "psnr"], &rows)?;
    eprintln!("held-out psnr {:.2} dB", report.mean_psnr);
    let ck = Checkpoint {
        stage: Stage::Scene,
        config: config.clone(),
        model: trainer.model,
        rigid_frame: config.rigid_frame,
        anchors: Vec::new(),
        acr: None,
    };
    ck.save(&out.path("scene.ckpt"))
}

fn manipulator(config: &Config, ck: &Checkpoint) -> Result<SceneManipulator> {
    SceneManipulator::new(ck.model.clone(), config.rigid_frame)
}

fn ring_camera(config: &Config, k: usize) -> Result<Camera> {
    config
        .synth
        .ring()
        .get(k)
        .cloned()
        .ok_or_else(|| Error::Config(format!("camera {k} outside the {}-camera ring", config.synth.cameras)))
}

fn cmd_anchors(config: &Config, checkpoint: &Path, data: &Path, out: &mut Outputs) -> Result<()> {
    let mut ck = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(data, config)?;
    let g = manipulator(config, &ck)?;
    let a = &config.anchors;
    let extractor = RenderedFeatures {
        camera: ring_camera(config, a.camera)?,
        samples: a.samples,
        bounds: config.synth.bounds(),
        grid: a.grid,
    };
    let sel = choose_anchors(&g, &extractor, &ds.training_frames(), a.eps_scale, a.min_pts)?;
    let rows: Vec<Vec<f64>> = sel
        .features
        .iter()
        .zip(&sel.labels)
        .map(|(f, &l)| vec![f.frame as f64, l as f64, if sel.anchors.contains(&f.frame) { 1.0 } else { 0.0 }])
        .collect();
    write_csv(&out.path("anchors.csv"), &["frame", "label", "anchor"], &rows)?;
    let noise = sel.labels.iter().filter(|&&l| l == NOISE).count();
    eprintln!("anchors {:?} (eps {:.4}, {} noise frames)", sel.anchors, sel.eps, noise);
    ck.config = config.clone();
    ck.rigid_frame = config.rigid_frame;
    ck.anchors = sel.anchors;
    ck.save(&out.path("anchors.ckpt"))
}

/// Prompt plus the ring cameras it refers to.
fn build_prompt(config: &Config, args: &PromptArgs) -> Result<(Prompt, Box<dyn GuidanceOracle>, Vec<usize>)> {
    let kinds = [!args.images.is_empty(), !args.text.is_empty(), args.state.is_some()];
    if kinds.iter().filter(|&&k| k).count() != 1 {
        return Err(Error::Config(
            "give exactly one of --prompt-image, --prompt-text or --prompt-state".into(),
        ));
    }
    let cameras = if args.cameras.is_empty() {
        config.edit.cameras.clone()
    } else {
        args.cameras.clone()
    };
    if let Some(&c) = cameras.iter().find(|&&c| c >= config.synth.cameras) {
        return Err(Error::Config(format!("prompt camera {c} outside the ring")));
    }
    if !args.text.is_empty() {
        let oracle = RemoteClipOracle::from_env()?
            .ok_or_else(|| Error::Config("text prompts need GUIDANCE_URL pointing at a similarity service".into()))?;
        return Ok((Prompt::text(args.text.clone())?, Box::new(oracle), cameras));
    }
    let images = if let Some(s) = &args.state {
        let parts: Vec<f64> = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("--prompt-state expects 'eye,mouth', got '{s}'")))?;
        let [eye, mouth] = parts[..] else {
            return Err(Error::Config(format!("--prompt-state expects 'eye,mouth', got '{s}'")));
        };
        let state = PartState::new(eye, mouth, 0.0).map_err(|e| Error::Config(e.to_string()))?;
        let scene = AnalyticScene::default();
        cameras
            .iter()
            .map(|&c| scene.render(&state, &ring_camera(config, c)?, config.synth.gt_samples, config.synth.bounds()))
            .collect::<Result<Vec<Image>>>()?
    } else {
        if args.images.len() != cameras.len() {
            return Err(Error::Config(format!(
                "{} prompt images for {} prompt cameras",
                args.images.len(),
                cameras.len()
            )));
        }
        args.images.iter().map(|p| Image::read_ppm(p)).collect::<Result<Vec<Image>>>()?
    };
    Ok((Prompt::target(images)?, Box::new(TargetImageOracle), cameras))
}

fn build_views(config: &Config, g: &SceneManipulator, cameras: &[usize], samples: usize) -> Result<Vec<ViewCache>> {
    cameras
        .iter()
        .map(|&c| ViewCache::build(g, &ring_camera(config, c)?, samples, config.synth.bounds()))
        .collect()
}

fn write_maps(out: &mut Outputs, prefix: &str, maps: &[Vec<f64>], width: usize, height: usize) -> Result<()> {
    for (k, m) in maps.iter().enumerate() {
        Image::from_gray(width, height, m)?.write_ppm(&out.path(&format!("{prefix}_anchor{k}.ppm")))?;
    }
    Ok(())
}

fn cmd_edit(config: &Config, checkpoint: &Path, prompt: &PromptArgs, out: &mut Outputs) -> Result<()> {
    let mut ck = Checkpoint::load(checkpoint)?;
    if ck.anchors.is_empty() {
        return Err(Error::NoAnchors);
    }
    let g = manipulator(config, &ck)?;
    let anchors = AnchorSet::from_frames(&g.model.latents, &ck.anchors)?;
    let (prompt, oracle, cameras) = build_prompt(config, prompt)?;
    let edit = config.edit_config();
    let views = build_views(config, &g, &cameras, edit.samples)?;
    let mut progress = |l: &EditStepLog| {
        if l.step % edit.eval_every.max(1) == 0 {
            eprintln!("step {} loss {:.6} guidance {:.6} tv {:.3}", l.step, l.loss, l.guidance, l.tv);
        }
    };
    let res = train_edit(&g, &anchors, oracle.as_ref(), &prompt, &views, &edit, &mut progress)?;
    let rows: Vec<Vec<f64>> = res
        .trace
        .iter()
        .map(|l| vec![l.step as f64, l.view as f64, l.loss, l.guidance, l.tv])
        .collect();
    write_csv(&out.path("edit_log.csv"), &["step", "view", "loss", "guidance", "tv"], &rows)?;
    write_csv(&out.path("edit_eval.csv"), &["guidance", "tv"], &[vec![res.eval.guidance, res.eval.tv]])?;
    for (i, &c) in cameras.iter().enumerate() {
        res.eval.images[i].write_ppm(&out.path(&format!("edit_cam{c}.ppm")))?;
        let cam = &views[i].camera;
        write_maps(out, &format!("acr_cam{c}"), &res.eval.acr_maps[i], cam.width, cam.height)?;
    }
    ck.stage = Stage::Edit;
    ck.config = config.clone();
    ck.rigid_frame = config.rigid_frame;
    ck.acr = Some(res.net);
    ck.save(&out.path("edit.ckpt"))
}

fn cmd_invert(config: &Config, checkpoint: &Path, prompt: &PromptArgs, out: &mut Outputs) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let g = manipulator(config, &ck)?;
    let (prompt, oracle, cameras) = build_prompt(config, prompt)?;
    let views = build_views(config, &g, &cameras, config.edit.samples)?;
    let inv = invert_single_code(&g, oracle.as_ref(), &prompt, &views, &config.invert)?;
    let rows: Vec<Vec<f64>> = inv.trace.iter().enumerate().map(|(i, &l)| vec![(i + 1) as f64, l]).collect();
    write_csv(&out.path("invert_log.csv"), &["step", "loss"], &rows)?;
    let rows: Vec<Vec<f64>> = inv.code.iter().enumerate().map(|(i, &v)| vec![i as f64, v]).collect();
    write_csv(&out.path("invert_code.csv"), &["index", "value"], &rows)?;
    write_csv(&out.path("invert_eval.csv"), &["loss"], &[vec![inv.loss]])?;
    for (i, &c) in cameras.iter().enumerate() {
        let (img, _) = crate::render::render_cached_code(&g, &inv.code, &views[i])?;
        img.write_ppm(&out.path(&format!("invert_cam{c}.ppm")))?;
    }
    Ok(())
}

fn cmd_render(
    config: &Config,
    checkpoint: &Path,
    frame: Option<usize>,
    camera: Option<usize>,
    edited: bool,
    out: &mut Outputs,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cams: Vec<usize> = match camera {
        Some(c) => vec![c],
        None => (0..config.synth.cameras).collect(),
    };
    let bounds = config.synth.bounds();
    let m = config.scene.eval_samples;
    if edited {
        let net = ck.acr.as_ref().ok_or_else(|| Error::Config("--edited needs an edited checkpoint".into()))?;
        let g = manipulator(config, &ck)?;
        let anchors = AnchorSet::from_frames(&g.model.latents, &ck.anchors)?;
        for c in cams {
            let view = ViewCache::build(&g, &ring_camera(config, c)?, m, bounds)?;
            let mut graph = Graph::new();
            let scene = g.model.bind(&mut graph, false)?;
            let pac = net.bind(&mut graph, &anchors)?;
            let r = render_view(&mut graph, &scene, &view, &pac)?;
            r.image_value(&graph).write_ppm(&out.path(&format!("render_edited_cam{c}.ppm")))?;
        }
        return Ok(());
    }
    let n = frame.unwrap_or(config.rigid_frame);
    if n >= ck.model.latents.len() {
        return Err(Error::Config(format!("frame {n} outside {} learned codes", ck.model.latents.len())));
    }
    for c in cams {
        let (img, _) = render_frame(&ck.model, ck.model.latents.code(n), &ring_camera(config, c)?, m, bounds)?;
        img.write_ppm(&out.path(&format!("render_f{n:03}_cam{c}.ppm")))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_interp(
    config: &Config,
    checkpoint: &Path,
    from: usize,
    to: usize,
    steps: usize,
    camera: usize,
    out: &mut Outputs,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let n = ck.model.latents.len();
    if from >= n || to >= n {
        return Err(Error::Config(format!("interpolation endpoints must be below {n}")));
    }
    if steps < 2 {
        return Err(Error::Config("--steps must be at least 2".into()));
    }
    let cam = ring_camera(config, camera)?;
    let (a, b) = (ck.model.latents.code(from), ck.model.latents.code(to));
    let mut rows = Vec::with_capacity(steps);
    let mut prev: Option<Image> = None;
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        // t runs from the `from` code to the `to` code
        let code = interpolate_codes(b, a, t)?;
        let (img, _) = render_frame(&ck.model, &code, &cam, config.scene.eval_samples, config.synth.bounds())?;
        let step = prev.as_ref().map_or(0.0, |p| p.l2_distance(&img));
        rows.push(vec![t, step]);
        img.write_ppm(&out.path(&format!("interp_{i:03}.ppm")))?;
        prev = Some(img);
    }
    let max_step = rows.iter().map(|r| r[1]).fold(0.0, f64::max);
    eprintln!("max per-step image L2 {max_step:.6}");
    write_csv(&out.path("interp.csv"), &["gamma", "step_l2"], &rows)
}

fn cmd_acr_maps(config: &Config, checkpoint: &Path, camera: Option<usize>, out: &mut Outputs) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.acr.as_ref().ok_or_else(|| Error::Config("acr-maps needs an edited checkpoint".into()))?;
    let g = manipulator(config, &ck)?;
    let anchors = AnchorSet::from_frames(&g.model.latents, &ck.anchors)?;
    let cams = camera.map_or_else(|| config.edit.cameras.clone(), |c| vec![c]);
    let mut rows = Vec::new();
    for c in cams {
        let view = ViewCache::build(&g, &ring_camera(config, c)?, config.edit.samples, config.synth.bounds())?;
        let mut graph = Graph::new();
        let scene = g.model.bind(&mut graph, false)?;
        let pac = net.bind(&mut graph, &anchors)?;
        let r = render_view(&mut graph, &scene, &view, &pac)?;
        let maps = r.acr_values(&graph).expect("composition renders ratio maps");
        let opacity = r.opacity_value(&graph);
        let mass: f64 = opacity.iter().sum();
        for (k, m) in maps.iter().enumerate() {
            // share of rendered opacity assigned to anchor k
            let share = if mass > 0.0 { m.iter().sum::<f64>() / mass } else { 0.0 };
            rows.push(vec![c as f64, k as f64, share, tv_value(std::slice::from_ref(m), r.width, r.height)]);
        }
        write_maps(out, &format!("acr_cam{c}"), &maps, r.width, r.height)?;
    }
    write_csv(&out.path("acr.csv"), &["camera", "anchor", "share", "tv"], &rows)
}

fn cmd_gradcheck(config: &Config, out: &mut Outputs) -> Result<()> {
    let checks = gradsuite::run(config.seed)?;
    let mut text = String::from("name,error,tolerance,passed\n");
    for c in &checks {
        text.push_str(&format!("{},{:?},{:?},{}\n", c.name, c.error, c.tolerance, c.passed()));
        eprintln!("{:<20} {:.3e} (< {:.0e}) {}", c.name, c.error, c.tolerance, if c.passed() { "ok" } else { "FAIL" });
    }
    std::fs::write(out.path("gradcheck.csv"), text)?;
    if let Some(c) = checks.iter().find(|c| !c.passed()) {
        return Err(Error::GradientCheck(c.name.to_string()));
    }
    Ok(())
}

fn cmd_eval(config: &Config, checkpoint: &Path, data: &Path, out: &mut Outputs) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(data, config)?;
    if ds.len() != ck.model.latents.len() {
        return Err(Error::Format(format!(
            "dataset has {} frames, checkpoint {} codes",
            ds.len(),
            ck.model.latents.len()
        )));
    }
    let report = eval_scene(&ck.model, &ds, &config.scene_config())?;
    let rows: Vec<Vec<f64>> = report.held_out.iter().map(|&(n, p)| vec![n as f64, p]).collect();
    write_csv(&out.path("eval.csv"), &["frame", "psnr"], &rows)?;
    let g = manipulator(config, &ck)?;
    let cam = ring_camera(config, config.pose_camera)?;
    let pose = pose_stability(&g, &cam, &ds.training_frames(), config.scene.eval_samples, config.synth.bounds())?;
    write_csv(
        &out.path("pose.csv"),
        &["mean_psnr", "drift_codes", "drift_rigid"],
        &[vec![report.mean_psnr, pose.drift_codes, pose.drift_rigid]],
    )?;
    eprintln!(
        "held-out psnr {:.2} dB, centroid drift {:.4} px (codes) vs {:.4} px (rigid)",
        report.mean_psnr, pose.drift_codes, pose.drift_rigid
    );
    Ok(())
}
