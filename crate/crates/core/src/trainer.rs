//! Scene training (photometric loss plus Lipschitz penalty), evaluation
//! renders, and the metrics written by the command line.

use crate::error::{Error, Result};
use crate::guidance::{score_batch, GuidanceOracle, Prompt};
use crate::image::{psnr, Image};
use crate::nn::collect_grads;
use crate::optim::Adam;
use crate::pac::{tv_acr_loss, tv_value, AcrNet, AnchorSet};
use crate::render::{composite_graph, midpoint_sample, opacity_centroid, render_view, stratified_sample, Bounds, Camera, ViewCache};
use crate::scene::{BoundScene, ModelConfig, SceneManipulator, SceneModel};
use crate::synth::{held_out_partner, SceneDataset};
use crate::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stage-one hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub iterations: usize,
    pub lr: f64,
    pub batch_rays: usize,
    pub samples: usize,
    pub eval_samples: usize,
    pub lambda_c: f64,
    pub lambda_lip: f64,
    pub bound_radius: f64,
}

impl Default for SceneTrainConfig {
    fn default() -> Self {
        SceneTrainConfig {
            model: ModelConfig::default(),
            seed: 0,
            iterations: 2000,
            lr: 5e-4,
            batch_rays: 512,
            samples: 32,
            eval_samples: 64,
            lambda_c: 1.0,
            lambda_lip: 1e-4,
            bound_radius: 0.75,
        }
    }
}

impl SceneTrainConfig {
    pub fn bounds(&self) -> Bounds {
        Bounds {
            radius: self.bound_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_c < 0.0 || self.lambda_lip < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_rays == 0 || self.samples < 2 || self.eval_samples < 2 {
            return Err(Error::Config("need at least one ray and two samples per ray".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.lambda_lip > 0.0 && !self.model.lipschitz {
            return Err(Error::Config("lambda_lip > 0 needs lipschitz = true".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct TrainRay {
    frame: usize,
    origin: [f64; 3],
    dir: [f64; 3],
    t0: f64,
    t1: f64,
    rgb: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub lipschitz: f64,
}

/// Stepwise stage-one optimiser. A step that produces a non-finite loss
/// returns [`Error::Diverged`] and leaves the model at its last good state.
/// Stratified samples of a ray batch with per-ray targets.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub rays: usize,
    pub samples: usize,
    /// `rays * samples` entries, ray-major
    pub positions: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    pub frames: Vec<usize>,
    pub deltas: Vec<f64>,
    /// `rays * 3`
    pub target: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub mse: Var,
    pub lipschitz: Option<Var>,
}

/// `lambda_c * mse + lambda_lip * lipschitz` for a ray batch; the penalty is
/// only present when the model has Lipschitz layers.
pub fn photometric_loss(g: &mut Graph, scene: &BoundScene, batch: &RaySamples, lambda_c: f64, lambda_lip: f64) -> Result<LossParts> {
    let codes = g.gather_rows(scene.latents, &batch.frames)?;
    let (sigma, rgb) = scene.radiance(g, &batch.positions, &batch.dirs, codes)?;
    let deltas = g.constant(Tensor::new(vec![batch.rays, batch.samples], batch.deltas.clone())?);
    let (color, _) = composite_graph(g, sigma, rgb, deltas)?;
    let target = g.constant(Tensor::new(vec![batch.rays, 3], batch.target.clone())?);
    let diff = g.sub(color, target)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    let mut loss = g.scale(mse, lambda_c)?;
    let mut lipschitz = None;
    if scene.is_lipschitz() {
        let l = scene.lipschitz_loss(g)?;
        lipschitz = Some(l);
        if lambda_lip > 0.0 {
            let wl = g.scale(l, lambda_lip)?;
            loss = g.add(loss, wl)?;
        }
    }
    Ok(LossParts { loss, mse, lipschitz })
}

pub struct SceneTrainer {
    pub model: SceneModel,
    pub config: SceneTrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    rays: Vec<TrainRay>,
    step: usize,
}

impl SceneTrainer {
    pub fn new(ds: &SceneDataset, config: SceneTrainConfig) -> Result<Self> {
        config.validate()?;
        if ds.is_empty() {
            return Err(Error::Invalid("dataset has no frames".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SceneModel::new(config.model.clone(), ds.len(), &mut rng);
        let bounds = config.bounds();
        let mut rays = Vec::new();
        for n in ds.training_frames() {
            let cam = ds.camera(n);
            cam.validate()?;
            for ray in cam.rays().rays {
                if let Some((t0, t1)) = bounds.segment(&ray, cam.near, cam.far) {
                    rays.push(TrainRay {
                        frame: n,
                        origin: ray.origin,
                        dir: ray.dir,
                        t0,
                        t1,
                        rgb: ds.frames[n].pixel(ray.pixel.0, ray.pixel.1),
                    });
                }
            }
        }
        if rays.is_empty() {
            return Err(Error::Invalid("no training ray intersects the scene bounds".into()));
        }
        let opt = Adam::new(config.lr);
        Ok(SceneTrainer {
            model,
            config,
            opt,
            rng,
            rays,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = &self.config;
        let m = cfg.samples;
        let batch: Vec<TrainRay> = (0..cfg.batch_rays)
            .map(|_| self.rays[self.rng.gen_range(0..self.rays.len())])
            .collect();
        let mut positions = Vec::with_capacity(batch.len() * m);
        let mut dirs = Vec::with_capacity(batch.len() * m);
        let mut frames = Vec::with_capacity(batch.len() * m);
        let mut deltas = Vec::with_capacity(batch.len() * m);
        let mut target = Vec::with_capacity(batch.len() * 3);
        for r in &batch {
            let s = stratified_sample(r.t0, r.t1, m, &mut self.rng)?;
            for &t in &s.t {
                positions.push([r.origin[0] + t * r.dir[0], r.origin[1] + t * r.dir[1], r.origin[2] + t * r.dir[2]]);
                dirs.push(r.dir);
                frames.push(r.frame);
            }
            deltas.extend(s.deltas);
            target.extend(r.rgb);
        }
        let samples = RaySamples {
            rays: batch.len(),
            samples: m,
            positions,
            dirs,
            frames,
            deltas,
            target,
        };
        let mut g = Graph::new();
        let scene = self.model.bind(&mut g, true)?;
        let parts = photometric_loss(&mut g, &scene, &samples, cfg.lambda_c, cfg.lambda_lip)?;
        let (loss, mse) = (parts.loss, parts.mse);
        let lip = parts.lipschitz.map_or(0.0, |l| g.value(l).item());
        let loss_v = g.value(loss).item();
        let mse_v = g.value(mse).item();
        if !loss_v.is_finite() {
            return Err(Error::Diverged { step: self.step });
        }
        g.backward(loss)?;
        let grads = collect_grads(&g, scene.leaves());
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged { step: self.step });
        }
        self.opt.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            loss: loss_v,
            mse: mse_v,
            lipschitz: lip,
        })
    }
}

/// Renders `model` with `code` driving both deformation and slicing, as during
/// training, using deterministic midpoint samples. Returns image and opacity.
pub fn render_frame(model: &SceneModel, code: &[f64], camera: &Camera, m: usize, bounds: Bounds) -> Result<(Image, Vec<f64>)> {
    camera.validate()?;
    if code.len() != model.config.d_w {
        return Err(Error::Dim(format!("code has {} entries, expected {}", code.len(), model.config.d_w)));
    }
    let mut img = Image::new(camera.width, camera.height);
    let mut opacity = vec![0.0; camera.width * camera.height];
    let rays: Vec<_> = camera
        .rays()
        .rays
        .into_iter()
        .filter_map(|r| bounds.segment(&r, camera.near, camera.far).map(|s| (r, s)))
        .collect();
    for chunk in rays.chunks(256) {
        let mut positions = Vec::with_capacity(chunk.len() * m);
        let mut dirs = Vec::with_capacity(chunk.len() * m);
        let mut deltas = Vec::with_capacity(chunk.len() * m);
        for (ray, (t0, t1)) in chunk {
            let s = midpoint_sample(*t0, *t1, m)?;
            for &t in &s.t {
                positions.push(ray.at(t));
                dirs.push(ray.dir);
            }
            deltas.extend(s.deltas);
        }
        let mut g = Graph::new();
        let scene = model.bind(&mut g, false)?;
        let c = g.constant(Tensor::new(vec![1, code.len()], code.to_vec())?);
        let codes = g.gather_rows(c, &vec![0; positions.len()])?;
        let (sigma, rgb) = scene.radiance(&mut g, &positions, &dirs, codes)?;
        let deltas = g.constant(Tensor::new(vec![chunk.len(), m], deltas)?);
        let (color, weights) = composite_graph(&mut g, sigma, rgb, deltas)?;
        let color = g.value(color).data();
        let w = g.value(weights);
        for (i, (ray, _)) in chunk.iter().enumerate() {
            let (u, v) = ray.pixel;
            img.set_pixel(u, v, [color[i * 3], color[i * 3 + 1], color[i * 3 + 2]]);
            opacity[v * camera.width + u] = w.row(i).iter().sum();
        }
    }
    Ok((img, opacity))
}

/// PSNR of every held-out frame, rendered with the code of its same-state
/// training partner from the held-out frame's own camera.
pub fn held_out_psnr(model: &SceneModel, ds: &SceneDataset, m: usize, bounds: Bounds) -> Result<Vec<(usize, f64)>> {
    ds.held_out_frames()
        .into_iter()
        .map(|n| {
            let code = model.latents.code(held_out_partner(n));
            let (img, _) = render_frame(model, code, &ds.camera(n), m, bounds)?;
            Ok((n, psnr(&img, &ds.frames[n])?))
        })
        .collect()
}

pub fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Stage-two hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EditConfig {
    pub seed: u64,
    pub iterations: usize,
    pub lr: f64,
    pub lambda_clip: f64,
    pub lambda_acr: f64,
    pub samples: usize,
    /// ring indices of the cameras used for edit renders, cycled one per step
    pub cameras: Vec<usize>,
    pub eval_every: usize,
    pub pac_width: usize,
    pub pac_depth: usize,
    pub pe_pac: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            seed: 0,
            iterations: 300,
            lr: 1e-3,
            lambda_clip: 1.0,
            lambda_acr: 1e-5,
            samples: 32,
            cameras: vec![1, 3, 4, 6],
            eval_every: 50,
            pac_width: 32,
            pac_depth: 2,
            pe_pac: 4,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_clip < 0.0 || self.lambda_acr < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.lr > 0.0) || self.samples < 2 || self.cameras.is_empty() || self.pac_width == 0 {
            return Err(Error::Config("edit needs lr > 0, samples >= 2, a camera and a network width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditStepLog {
    pub step: usize,
    pub view: usize,
    pub loss: f64,
    pub guidance: f64,
    pub tv: f64,
}

/// Per-view outputs of an edit network evaluated on every edit view.
#[derive(Clone, Debug, PartialEq)]
pub struct EditEval {
    /// `1 - mean similarity` over all views
    pub guidance: f64,
    /// total variation of the maps summed over views
    pub tv: f64,
    pub images: Vec<Image>,
    /// per view, one map per anchor
    pub acr_maps: Vec<Vec<Vec<f64>>>,
    pub opacity: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub net: AcrNet,
    pub trace: Vec<EditStepLog>,
    pub eval: EditEval,
}

fn frozen_check(g: &Graph, leaves: &[crate::tensor::Var]) -> Result<()> {
    for (i, &v) in leaves.iter().enumerate() {
        if let Some(t) = g.grad(v) {
            if t.data().iter().any(|&x| x != 0.0) {
                return Err(Error::FrozenGradient(format!("scene parameter #{i}")));
            }
        }
    }
    Ok(())
}

/// Renders every edit view through the composition network and scores it.
pub fn evaluate_edit(
    g: &SceneManipulator,
    anchors: &AnchorSet,
    net: &AcrNet,
    oracle: &dyn GuidanceOracle,
    prompt: &Prompt,
    views: &[ViewCache],
) -> Result<EditEval> {
    let mut renders = Vec::with_capacity(views.len());
    let mut acr_maps = Vec::with_capacity(views.len());
    let mut opacity = Vec::with_capacity(views.len());
    let mut tv = 0.0;
    for (i, view) in views.iter().enumerate() {
        let mut graph = Graph::new();
        let scene = g.model.bind(&mut graph, false)?;
        let pac = net.bind(&mut graph, anchors)?;
        let out = render_view(&mut graph, &scene, view, &pac)?;
        let maps = out.acr_values(&graph).expect("composition renders ratio maps");
        tv += tv_value(&maps, out.width, out.height);
        renders.push((i, out.image_value(&graph)));
        opacity.push(out.opacity_value(&graph));
        acr_maps.push(maps);
    }
    let (guidance, _) = score_batch(oracle, &renders, prompt)?;
    Ok(EditEval {
        guidance,
        tv,
        images: renders.into_iter().map(|r| r.1).collect(),
        acr_maps,
        opacity,
    })
}

/// Trains the composition network against `prompt`, one view per step in
/// turn. Scene parameters are frozen; any gradient reaching them is an error.
pub fn train_edit(
    g: &SceneManipulator,
    anchors: &AnchorSet,
    oracle: &dyn GuidanceOracle,
    prompt: &Prompt,
    views: &[ViewCache],
    config: &EditConfig,
    progress: &mut dyn FnMut(&EditStepLog),
) -> Result<EditResult> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::Invalid("edit needs at least one view".into()));
    }
    if !g.frozen {
        return Err(Error::Invalid("scene manipulator must be frozen before editing".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut net = AcrNet::new(g.code_dim(), config.pac_width, config.pac_depth, config.pe_pac, &mut rng);
    let mut opt = Adam::new(config.lr);
    let mut trace = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let vi = step % views.len();
        let view = &views[vi];
        let mut graph = Graph::new();
        let scene = g.model.bind(&mut graph, false)?;
        let pac = net.bind(&mut graph, anchors)?;
        let out = render_view(&mut graph, &scene, view, &pac)?;
        let img = out.image_value(&graph);
        let (guidance, res) = score_batch(oracle, &[(vi, img)], prompt)?;
        let gimg = graph.constant(Tensor::new(vec![out.width * out.height, 3], res[0].grad.data.clone())?);
        let prod = graph.mul(out.image, gimg)?;
        let surrogate = graph.sum(prod)?;
        let mut loss = graph.scale(surrogate, config.lambda_clip)?;
        let maps = out.acr_maps.expect("composition renders ratio maps");
        let tv = tv_acr_loss(&mut graph, maps, out.width, out.height)?;
        let tv_v = graph.value(tv).item();
        if config.lambda_acr > 0.0 {
            let wtv = graph.scale(tv, config.lambda_acr)?;
            loss = graph.add(loss, wtv)?;
        }
        let total = config.lambda_clip * guidance + config.lambda_acr * tv_v;
        if !total.is_finite() {
            return Err(Error::Diverged { step });
        }
        graph.backward(loss)?;
        frozen_check(&graph, scene.leaves())?;
        let grads = collect_grads(&graph, pac.leaves());
        opt.step(net.params_mut(), &grads)?;
        let log = EditStepLog {
            step: step + 1,
            view: vi,
            loss: total,
            guidance,
            tv: tv_v,
        };
        progress(&log);
        trace.push(log);
    }
    let eval = evaluate_edit(g, anchors, &net, oracle, prompt, views)?;
    Ok(EditResult { net, trace, eval })
}

/// Training-style render of held-out frames plus pose statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub held_out: Vec<(usize, f64)>,
    pub mean_psnr: f64,
}

pub fn eval_scene(model: &SceneModel, ds: &SceneDataset, config: &SceneTrainConfig) -> Result<EvalReport> {
    let held_out = held_out_psnr(model, ds, config.eval_samples, config.bounds())?;
    let mean_psnr = mean(held_out.iter().map(|p| p.1));
    Ok(EvalReport { held_out, mean_psnr })
}

/// Opacity-centroid spread (max distance to the mean centroid, in pixels) of a
/// set of opacity maps.
pub fn centroid_drift(maps: &[Vec<f64>], width: usize) -> f64 {
    let cs: Vec<(f64, f64)> = maps.iter().filter_map(|m| opacity_centroid(m, width)).collect();
    if cs.len() < 2 {
        return 0.0;
    }
    let mu = (mean(cs.iter().map(|c| c.0)), mean(cs.iter().map(|c| c.1)));
    cs.iter()
        .map(|c| ((c.0 - mu.0).powi(2) + (c.1 - mu.1).powi(2)).sqrt())
        .fold(0.0, f64::max)
}

/// Centroid drift of manipulator renders at one camera: varying the slicing
/// code with the rigid code fixed, and varying the rigid code with the slicing
/// code fixed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseStability {
    pub drift_codes: f64,
    pub drift_rigid: f64,
}

pub fn pose_stability(g: &SceneManipulator, camera: &Camera, frames: &[usize], m: usize, bounds: Bounds) -> Result<PoseStability> {
    if let Some(&n) = frames.iter().find(|&&n| n >= g.model.latents.len()) {
        return Err(Error::Invalid(format!("frame {n} has no learned code")));
    }
    let width = camera.width;
    let view = ViewCache::build(g, camera, m, bounds)?;
    let mut by_code = Vec::with_capacity(frames.len());
    for &n in frames {
        by_code.push(crate::render::render_cached_code(g, g.model.latents.code(n), &view)?.1);
    }
    let fixed = g.rigid_code().to_vec();
    let mut by_rigid = Vec::with_capacity(frames.len());
    let mut moved = g.clone();
    for &n in frames {
        moved.rigid_frame = n;
        by_rigid.push(crate::render::render_code_image(&moved, &fixed, camera, m, bounds)?.1);
    }
    Ok(PoseStability {
        drift_codes: centroid_drift(&by_code, width),
        drift_rigid: centroid_drift(&by_rigid, width),
    })
}

/// Writes rows under a header; values use shortest round-trip formatting.
pub fn write_csv(path: &std::path::Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_csv(path: &std::path::Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty csv".into()))?
        .split(',')
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for l in lines {
        let r = l
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad csv value '{v}'"))))
            .collect::<Result<Vec<_>>>()?;
        if r.len() != header.len() {
            return Err(Error::Format("csv row width differs from header".into()));
        }
        rows.push(r);
    }
    Ok((header, rows))
}
