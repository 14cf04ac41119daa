//! Flat `key = value` configuration covering every stage, with `#` comments.
//! Unknown keys are errors. The canonical text form (all keys, fixed order)
//! is what checkpoints echo and manifests hash.

use crate::error::{Error, Result};
use crate::guidance::InversionConfig;
use crate::nn::RowNorm;
use crate::synth::{Script, SynthConfig};
use crate::trainer::{EditConfig, SceneTrainConfig};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    /// index into the dataset's distinct cameras
    pub camera: usize,
    pub samples: usize,
    pub grid: usize,
    pub eps_scale: f64,
    pub min_pts: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            camera: 0,
            samples: 32,
            grid: 8,
            eps_scale: 0.5,
            min_pts: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub synth: SynthConfig,
    pub scene: SceneTrainConfig,
    pub rigid_frame: usize,
    /// ring camera for the pose-stability statistic
    pub pose_camera: usize,
    pub anchors: AnchorConfig,
    pub edit: EditConfig,
    pub invert: InversionConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            synth: SynthConfig::default(),
            scene: SceneTrainConfig::default(),
            rigid_frame: 1,
            pose_camera: 4,
            anchors: AnchorConfig::default(),
            edit: EditConfig::default(),
            invert: InversionConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{v}' for {key}"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s.trim()))
        .collect()
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.scene.model;
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "script" => self.synth.script = v.parse::<Script>()?,
            "frames" => self.synth.frames = num(key, v)?,
            "width" => self.synth.width = num(key, v)?,
            "height" => self.synth.height = num(key, v)?,
            "cameras" => self.synth.cameras = num(key, v)?,
            "ring_radius" => self.synth.ring_radius = num(key, v)?,
            "arc" => self.synth.arc = num(key, v)?,
            "elevation" => self.synth.elevation = num(key, v)?,
            "yaw" => self.synth.yaw = num(key, v)?,
            "focal" => self.synth.focal = num(key, v)?,
            "near" => self.synth.near = num(key, v)?,
            "far" => self.synth.far = num(key, v)?,
            "gt_samples" => self.synth.gt_samples = num(key, v)?,
            "bound_radius" => {
                self.synth.bound_radius = num(key, v)?;
                self.scene.bound_radius = self.synth.bound_radius;
            }
            "d_w" => m.d_w = num(key, v)?,
            "d_amb" => m.d_amb = num(key, v)?,
            "deform_depth" => m.deform_depth = num(key, v)?,
            "deform_width" => m.deform_width = num(key, v)?,
            "slice_depth" => m.slice_depth = num(key, v)?,
            "slice_width" => m.slice_width = num(key, v)?,
            "template_depth" => m.template_depth = num(key, v)?,
            "template_width" => m.template_width = num(key, v)?,
            "color_width" => m.color_width = num(key, v)?,
            "pe_deform" => m.pe_deform = num(key, v)?,
            "pe_slice" => m.pe_slice = num(key, v)?,
            "pe_template" => m.pe_template = num(key, v)?,
            "pe_ambient" => m.pe_ambient = num(key, v)?,
            "pe_dir" => m.pe_dir = num(key, v)?,
            "lipschitz" => m.lipschitz = flag(key, v)?,
            "row_norm" => m.row_norm = v.parse::<RowNorm>().map_err(|e| Error::Config(e.to_string()))?,
            "iterations" => self.scene.iterations = num(key, v)?,
            "lr" => self.scene.lr = num(key, v)?,
            "batch_rays" => self.scene.batch_rays = num(key, v)?,
            "samples" => self.scene.samples = num(key, v)?,
            "eval_samples" => self.scene.eval_samples = num(key, v)?,
            "lambda_c" => self.scene.lambda_c = num(key, v)?,
            "lambda_lip" => self.scene.lambda_lip = num(key, v)?,
            "rigid_frame" => self.rigid_frame = num(key, v)?,
            "pose_camera" => self.pose_camera = num(key, v)?,
            "anchor_camera" => self.anchors.camera = num(key, v)?,
            "anchor_samples" => self.anchors.samples = num(key, v)?,
            "anchor_grid" => self.anchors.grid = num(key, v)?,
            "dbscan_eps_scale" => self.anchors.eps_scale = num(key, v)?,
            "dbscan_min_pts" => self.anchors.min_pts = num(key, v)?,
            "edit_iterations" => self.edit.iterations = num(key, v)?,
            "edit_lr" => self.edit.lr = num(key, v)?,
            "lambda_clip" => self.edit.lambda_clip = num(key, v)?,
            "lambda_acr" => self.edit.lambda_acr = num(key, v)?,
            "edit_samples" => self.edit.samples = num(key, v)?,
            "edit_cameras" => self.edit.cameras = list(key, v)?,
            "edit_eval_every" => self.edit.eval_every = num(key, v)?,
            "pac_width" => self.edit.pac_width = num(key, v)?,
            "pac_depth" => self.edit.pac_depth = num(key, v)?,
            "pe_pac" => self.edit.pe_pac = num(key, v)?,
            "invert_steps" => self.invert.steps = num(key, v)?,
            "invert_lr" => self.invert.lr = num(key, v)?,
            "invert_eval_every" => self.invert.eval_every = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    /// `k=v` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        self.set(k, v)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.edit.validate()?;
        let s = &self.synth;
        if s.frames == 0 || s.width == 0 || s.height == 0 || s.cameras == 0 {
            return Err(Error::Config("frames, image size and camera count must be positive".into()));
        }
        if !(s.near < s.far) || !(s.focal > 0.0) || s.gt_samples < 2 {
            return Err(Error::Config("need near < far, focal > 0 and at least 2 ground-truth samples".into()));
        }
        if !(s.yaw.abs() <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config(format!("yaw {} outside [-pi/2, pi/2]", s.yaw)));
        }
        if self.rigid_frame >= s.frames {
            return Err(Error::Config(format!("rigid_frame {} outside {} frames", self.rigid_frame, s.frames)));
        }
        if self.anchors.min_pts == 0 || !(self.anchors.eps_scale > 0.0) || self.anchors.grid == 0 {
            return Err(Error::Config("anchor clustering needs min_pts >= 1, eps_scale > 0, grid >= 1".into()));
        }
        if self.edit.cameras.iter().any(|&c| c >= s.cameras) || self.anchors.camera >= s.cameras || self.pose_camera >= s.cameras {
            return Err(Error::Config("camera index outside the camera ring".into()));
        }
        if !(self.invert.lr > 0.0) {
            return Err(Error::Config("invert_lr must be positive".into()));
        }
        Ok(())
    }

    /// Synthesis and training settings with the shared seed applied.
    pub fn scene_config(&self) -> SceneTrainConfig {
        SceneTrainConfig {
            seed: self.seed,
            ..self.scene.clone()
        }
    }

    pub fn edit_config(&self) -> EditConfig {
        EditConfig {
            seed: self.seed,
            ..self.edit.clone()
        }
    }

    /// Every key with its value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.scene.model;
        let s = &self.synth;
        let cams: Vec<String> = self.edit.cameras.iter().map(|c| c.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("script", s.script.to_string()),
            ("frames", s.frames.to_string()),
            ("width", s.width.to_string()),
            ("height", s.height.to_string()),
            ("cameras", s.cameras.to_string()),
            ("ring_radius", format!("{:?}", s.ring_radius)),
            ("arc", format!("{:?}", s.arc)),
            ("elevation", format!("{:?}", s.elevation)),
            ("yaw", format!("{:?}", s.yaw)),
            ("focal", format!("{:?}", s.focal)),
            ("near", format!("{:?}", s.near)),
            ("far", format!("{:?}", s.far)),
            ("gt_samples", s.gt_samples.to_string()),
            ("bound_radius", format!("{:?}", s.bound_radius)),
            ("d_w", m.d_w.to_string()),
            ("d_amb", m.d_amb.to_string()),
            ("deform_depth", m.deform_depth.to_string()),
            ("deform_width", m.deform_width.to_string()),
            ("slice_depth", m.slice_depth.to_string()),
            ("slice_width", m.slice_width.to_string()),
            ("template_depth", m.template_depth.to_string()),
            ("template_width", m.template_width.to_string()),
            ("color_width", m.color_width.to_string()),
            ("pe_deform", m.pe_deform.to_string()),
            ("pe_slice", m.pe_slice.to_string()),
            ("pe_template", m.pe_template.to_string()),
            ("pe_ambient", m.pe_ambient.to_string()),
            ("pe_dir", m.pe_dir.to_string()),
            ("lipschitz", m.lipschitz.to_string()),
            ("row_norm", m.row_norm.to_string()),
            ("iterations", self.scene.iterations.to_string()),
            ("lr", format!("{:?}", self.scene.lr)),
            ("batch_rays", self.scene.batch_rays.to_string()),
            ("samples", self.scene.samples.to_string()),
            ("eval_samples", self.scene.eval_samples.to_string()),
            ("lambda_c", format!("{:?}", self.scene.lambda_c)),
            ("lambda_lip", format!("{:?}", self.scene.lambda_lip)),
            ("rigid_frame", self.rigid_frame.to_string()),
            ("pose_camera", self.pose_camera.to_string()),
            ("anchor_camera", self.anchors.camera.to_string()),
            ("anchor_samples", self.anchors.samples.to_string()),
            ("anchor_grid", self.anchors.grid.to_string()),
            ("dbscan_eps_scale", format!("{:?}", self.anchors.eps_scale)),
            ("dbscan_min_pts", self.anchors.min_pts.to_string()),
            ("edit_iterations", self.edit.iterations.to_string()),
            ("edit_lr", format!("{:?}", self.edit.lr)),
            ("lambda_clip", format!("{:?}", self.edit.lambda_clip)),
            ("lambda_acr", format!("{:?}", self.edit.lambda_acr)),
            ("edit_samples", self.edit.samples.to_string()),
            ("edit_cameras", cams.join(",")),
            ("edit_eval_every", self.edit.eval_every.to_string()),
            ("pac_width", self.edit.pac_width.to_string()),
            ("pac_depth", self.edit.pac_depth.to_string()),
            ("pe_pac", self.edit.pe_pac.to_string()),
            ("invert_steps", self.invert.steps.to_string()),
            ("invert_lr", format!("{:?}", self.invert.lr)),
            ("invert_eval_every", self.invert.eval_every.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_text().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}
