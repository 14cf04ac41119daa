//! Analytic talking-head stand-in: a soft grey sphere with eye bumps and a
//! mouth slab whose densities follow scripted part states, rendered from a
//! ring of cameras. Also the `DNFS` dataset container.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{composite, midpoint_sample, Bounds, Camera, Intrinsics, Mat4};
use std::io::{Read, Write};
use std::path::Path;

/// Ground-truth deformation of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartState {
    pub eye: f64,
    pub mouth: f64,
    pub yaw: f64,
}

impl PartState {
    pub fn new(eye: f64, mouth: f64, yaw: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eye) || !(0.0..=1.0).contains(&mouth) {
            return Err(Error::Invalid(format!("part openness ({eye}, {mouth}) outside [0, 1]")));
        }
        if !yaw.is_finite() || yaw.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::Invalid(format!("yaw {yaw} outside [-pi/2, pi/2]")));
        }
        Ok(PartState { eye, mouth, yaw })
    }
}

/// Which expression combinations a sequence visits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Script {
    /// eyes and mouth only ever change together: (0,0) and (1,1)
    Linked,
    /// all four combinations
    Full,
}

impl std::str::FromStr for Script {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linked" | "a" | "A" => Ok(Script::Linked),
            "full" | "b" | "B" => Ok(Script::Full),
            _ => Err(Error::Config(format!("unknown script '{s}' (expected linked or full)"))),
        }
    }
}

impl std::fmt::Display for Script {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Script::Linked => "linked",
            Script::Full => "full",
        })
    }
}

impl Script {
    pub fn expressions(&self) -> &'static [(f64, f64)] {
        match self {
            Script::Linked => &[(0.0, 0.0), (1.0, 1.0)],
            Script::Full => &[(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)],
        }
    }

    /// States hold for consecutive frame pairs so every frame has a partner
    /// with the same state seen from another camera. The expression cycle
    /// shifts by one every eight frames so held-out frames visit every
    /// expression. Yaw cycles through `0, -yaw, +yaw` every eight frames.
    pub fn state(&self, n: usize, yaw: f64) -> PartState {
        let q = n / 2;
        let ex = self.expressions();
        let (eye, mouth) = ex[(q + q / 4) % ex.len()];
        let yaw = [0.0, -yaw, yaw][(q / 4) % 3];
        PartState { eye, mouth, yaw }
    }

    pub fn states(&self, frames: usize, yaw: f64) -> Vec<PartState> {
        (0..frames).map(|n| self.state(n, yaw)).collect()
    }
}

/// Camera index used for frame `n`; shifts by one every full cycle so
/// held-out frames do not all share a camera.
pub fn frame_camera(n: usize, cameras: usize) -> usize {
    (n + n / cameras) % cameras
}

/// Frames held out of scene training.
pub fn is_held_out(n: usize) -> bool {
    n % 8 == 0
}

/// Training frame with the same scripted state as held-out frame `n`.
pub fn held_out_partner(n: usize) -> usize {
    n + 1
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticScene {
    pub head_radius: f64,
    pub eye_radius: f64,
    pub eye_centers: [[f64; 3]; 2],
    pub mouth_center: [f64; 3],
    /// half extents at full openness
    pub mouth_half: [f64; 3],
    /// yaw rotates about the vertical axis through this point
    pub pivot: [f64; 3],
    /// width of the soft occupancy falloff
    pub falloff: f64,
    pub head_density: f64,
    pub part_density: f64,
    pub eye_color: [f64; 3],
    pub mouth_color: [f64; 3],
}

impl Default for AnalyticScene {
    fn default() -> Self {
        AnalyticScene {
            head_radius: 0.5,
            eye_radius: 0.08,
            eye_centers: [[-0.17, 0.12, 0.45], [0.17, 0.12, 0.45]],
            mouth_center: [0.0, -0.2, 0.44],
            mouth_half: [0.16, 0.06, 0.1],
            pivot: [0.0, 0.0, -0.3],
            falloff: 0.02,
            head_density: 30.0,
            part_density: 60.0,
            eye_color: [0.08, 0.08, 0.12],
            mouth_color: [0.85, 0.12, 0.1],
        }
    }
}

fn box_sdf(p: [f64; 3], half: [f64; 3]) -> f64 {
    let q: Vec<f64> = (0..3).map(|i| p[i].abs() - half[i]).collect();
    let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
    outside + q[0].max(q[1]).max(q[2]).min(0.0)
}

fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

impl AnalyticScene {
    /// World point to head-local coordinates for a given yaw.
    pub fn to_local(&self, p: [f64; 3], yaw: f64) -> [f64; 3] {
        let (s, c) = (-yaw).sin_cos();
        let d = [p[0] - self.pivot[0], p[1] - self.pivot[1], p[2] - self.pivot[2]];
        [
            c * d[0] + s * d[2] + self.pivot[0],
            d[1] + self.pivot[1],
            -s * d[0] + c * d[2] + self.pivot[2],
        ]
    }

    fn occupancy(&self, sd: f64) -> f64 {
        sigmoid(-sd / self.falloff)
    }

    /// Density and colour at a world point.
    pub fn query(&self, p: [f64; 3], state: &PartState) -> (f64, [f64; 3]) {
        let q = self.to_local(p, state.yaw);
        let head = self.head_density * self.occupancy(norm(q) - self.head_radius);
        let eyes: f64 = self
            .eye_centers
            .iter()
            .map(|c| self.occupancy(norm([q[0] - c[0], q[1] - c[1], q[2] - c[2]]) - self.eye_radius))
            .sum::<f64>()
            * self.part_density
            * state.eye;
        let mouth = if state.mouth > 0.0 {
            let c = self.mouth_center;
            let half = [self.mouth_half[0], self.mouth_half[1] * state.mouth, self.mouth_half[2]];
            self.occupancy(box_sdf([q[0] - c[0], q[1] - c[1], q[2] - c[2]], half)) * self.part_density * state.mouth
        } else {
            0.0
        };
        let sigma = head + eyes + mouth;
        if sigma <= 0.0 {
            return (0.0, [0.0; 3]);
        }
        let shade = (0.55 + 0.4 * q[1] + 0.2 * q[0]).clamp(0.05, 0.95);
        let mut rgb = [0.0; 3];
        for (i, v) in rgb.iter_mut().enumerate() {
            *v = (head * shade + eyes * self.eye_color[i] + mouth * self.mouth_color[i]) / sigma;
        }
        (sigma, rgb)
    }

    /// Midpoint-quadrature render with `m` samples per ray inside `bounds`.
    pub fn render(&self, state: &PartState, camera: &Camera, m: usize, bounds: Bounds) -> Result<Image> {
        let mut img = Image::new(camera.width, camera.height);
        for ray in camera.rays().rays {
            let Some((t0, t1)) = bounds.segment(&ray, camera.near, camera.far) else { continue };
            let s = midpoint_sample(t0, t1, m)?;
            let (mut sig, mut col) = (Vec::with_capacity(m), Vec::with_capacity(m));
            for &t in &s.t {
                let (a, c) = self.query(ray.at(t), state);
                sig.push(a);
                col.push(c);
            }
            let (rgb, _) = composite(&sig, &s.deltas, &col)?;
            img.set_pixel(ray.pixel.0, ray.pixel.1, rgb);
        }
        Ok(img)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub script: Script,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub cameras: usize,
    pub ring_radius: f64,
    /// half-angle of the camera arc around +z, radians
    pub arc: f64,
    pub elevation: f64,
    /// amplitude of the scripted head yaw, radians
    pub yaw: f64,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
    pub gt_samples: usize,
    pub bound_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            script: Script::Full,
            frames: 40,
            width: 32,
            height: 32,
            cameras: 8,
            ring_radius: 2.0,
            arc: std::f64::consts::FRAC_PI_3,
            elevation: 0.15,
            yaw: 0.15,
            focal: 46.0,
            near: 1.0,
            far: 3.0,
            gt_samples: 256,
            bound_radius: 0.75,
        }
    }
}

impl SynthConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }

    /// Cameras evenly spread over an arc in front of the face, all looking at
    /// the origin.
    pub fn ring(&self) -> Vec<Camera> {
        (0..self.cameras)
            .map(|k| {
                let a = if self.cameras > 1 {
                    -self.arc + 2.0 * self.arc * k as f64 / (self.cameras - 1) as f64
                } else {
                    0.0
                };
                let r = self.ring_radius;
                let eye = [
                    r * self.elevation.cos() * a.sin(),
                    r * self.elevation.sin(),
                    r * self.elevation.cos() * a.cos(),
                ];
                Camera::look_at(
                    eye,
                    [0.0; 3],
                    [0.0, 1.0, 0.0],
                    self.intrinsics(),
                    self.width,
                    self.height,
                    self.near,
                    self.far,
                )
            })
            .collect()
    }

    pub fn bounds(&self) -> Bounds {
        Bounds {
            radius: self.bound_radius,
        }
    }
}

/// Posed frames sharing one set of intrinsics. Carries no ground-truth
/// states; those live in [`GroundTruth`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub intrinsics: Intrinsics,
    pub poses: Vec<Mat4>,
    pub frames: Vec<Image>,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn camera(&self, n: usize) -> Camera {
        Camera {
            intrinsics: self.intrinsics,
            cam_to_world: self.poses[n],
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }

    /// Distinct poses in first-seen order.
    pub fn unique_cameras(&self) -> Vec<Camera> {
        let mut out: Vec<Camera> = Vec::new();
        for n in 0..self.len() {
            let c = self.camera(n);
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    pub fn training_frames(&self) -> Vec<usize> {
        (0..self.len()).filter(|&n| !is_held_out(n)).collect()
    }

    pub fn held_out_frames(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&n| is_held_out(n) && held_out_partner(n) < self.len())
            .collect()
    }
}

/// Per-frame scripted states; test and evaluation use only.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub script: Script,
    pub states: Vec<PartState>,
}

/// Renders every frame of a script.
pub fn generate(config: &SynthConfig, scene: &AnalyticScene) -> Result<(SceneDataset, GroundTruth)> {
    let ring = config.ring();
    let states = config.script.states(config.frames, config.yaw);
    let mut poses = Vec::with_capacity(config.frames);
    let mut frames = Vec::with_capacity(config.frames);
    for (n, st) in states.iter().enumerate() {
        let cam = &ring[frame_camera(n, config.cameras)];
        let mut img = scene.render(st, cam, config.gt_samples, config.bounds())?;
        // frames are stored as f32
        img.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        poses.push(cam.cam_to_world);
        frames.push(img);
    }
    let ds = SceneDataset {
        width: config.width,
        height: config.height,
        near: config.near,
        far: config.far,
        intrinsics: config.intrinsics(),
        poses,
        frames,
    };
    Ok((
        ds,
        GroundTruth {
            script: config.script,
            states,
        },
    ))
}

pub const DNFS_MAGIC: &[u8; 4] = b"DNFS";
pub const DNFS_VERSION: u32 = 1;

/// Writes the dataset; ground truth, when given, goes into a trailer that
/// [`load`] skips.
pub fn save(path: &Path, ds: &SceneDataset, gt: Option<&GroundTruth>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DNFS_MAGIC);
    out.extend_from_slice(&DNFS_VERSION.to_le_bytes());
    for v in [ds.len(), ds.height, ds.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let k = ds.intrinsics;
    for v in [ds.near, ds.far, k.fx, k.fy, k.cx, k.cy] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (pose, img) in ds.poses.iter().zip(&ds.frames) {
        for row in pose {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &v in &img.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    match gt {
        Some(gt) => {
            out.push(match gt.script {
                Script::Linked => 1,
                Script::Full => 2,
            });
            for s in &gt.states {
                for v in [s.eye, s.mouth, s.yaw] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        None => out.push(0),
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn parse(buf: &[u8]) -> Result<(SceneDataset, Option<GroundTruth>)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != DNFS_MAGIC {
        return Err(Error::Format("not a DNFS dataset (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != DNFS_VERSION {
        return Err(Error::Version {
            found: version,
            supported: DNFS_VERSION,
        });
    }
    let n = c.u32("header")? as usize;
    let height = c.u32("header")? as usize;
    let width = c.u32("header")? as usize;
    let near = c.f64("header")?;
    let far = c.f64("header")?;
    let intrinsics = Intrinsics {
        fx: c.f64("header")?,
        fy: c.f64("header")?,
        cx: c.f64("header")?,
        cy: c.f64("header")?,
    };
    let mut poses = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pose = [[0.0; 4]; 4];
        for row in pose.iter_mut() {
            for v in row.iter_mut() {
                *v = c.f64("pose")?;
            }
        }
        let raw = c.take(width * height * 3 * 4, "pixels")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        poses.push(pose);
        frames.push(Image::from_data(width, height, data)?);
    }
    let ds = SceneDataset {
        width,
        height,
        near,
        far,
        intrinsics,
        poses,
        frames,
    };
    let gt = match c.take(1, "trailer")?[0] {
        0 => None,
        tag @ (1 | 2) => {
            let script = if tag == 1 { Script::Linked } else { Script::Full };
            let mut states = Vec::with_capacity(n);
            for _ in 0..n {
                states.push(PartState {
                    eye: c.f64("states")?,
                    mouth: c.f64("states")?,
                    yaw: c.f64("states")?,
                });
            }
            Some(GroundTruth { script, states })
        }
        t => return Err(Error::Format(format!("unknown trailer tag {t}"))),
    };
    Ok((ds, gt))
}

pub fn load(path: &Path) -> Result<SceneDataset> {
    Ok(parse(&read_all(path)?)?.0)
}

pub fn load_ground_truth(path: &Path) -> Result<Option<GroundTruth>> {
    Ok(parse(&read_all(path)?)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            frames: 4,
            width: 8,
            height: 8,
            focal: 11.5,
            gt_samples: 64,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn scripts_visit_expected_states() {
        let a: Vec<_> = Script::Linked.states(40, 0.3).iter().map(|s| (s.eye, s.mouth)).collect();
        assert!(a.iter().all(|&(e, m)| e == m));
        let b = Script::Full.states(40, 0.3);
        for want in [(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)] {
            assert!(b.iter().any(|s| (s.eye, s.mouth) == want));
        }
        for n in (0..40).filter(|&n| is_held_out(n)) {
            assert_eq!(b[n], b[held_out_partner(n)]);
            assert_ne!(frame_camera(n, 8), frame_camera(held_out_partner(n), 8));
        }
        let held: Vec<_> = (0..40).filter(|&n| is_held_out(n)).map(|n| (b[n].eye, b[n].mouth)).collect();
        for want in [(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)] {
            assert!(held.contains(&want), "no held-out frame with state {want:?}");
        }
    }

    #[test]
    fn density_is_nonnegative_and_parts_follow_state() {
        let s = AnalyticScene::default();
        let closed = PartState::new(0.0, 0.0, 0.0).unwrap();
        let open = PartState::new(1.0, 1.0, 0.0).unwrap();
        let eye = s.eye_centers[0];
        let probe = [eye[0], eye[1], eye[2] + 0.06];
        assert!(s.query(probe, &open).0 > s.query(probe, &closed).0 + 10.0);
        assert!(s.query(probe, &open).1[0] < 0.3);
        for p in [[0.0, 0.0, 0.0], [2.0, 2.0, 2.0], [0.3, -0.4, 0.1]] {
            assert!(s.query(p, &open).0 >= 0.0);
        }
        assert!(PartState::new(1.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn yaw_about_pivot_keeps_pivot_fixed() {
        let s = AnalyticScene::default();
        let q = s.to_local(s.pivot, 0.3);
        for i in 0..3 {
            assert!((q[i] - s.pivot[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn round_trip_and_format_errors() {
        let (ds, gt) = generate(&tiny(), &AnalyticScene::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.dnfs");
        save(&p, &ds, Some(&gt)).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back, ds);
        assert_eq!(load_ground_truth(&p).unwrap().unwrap(), gt);

        let bytes = std::fs::read(&p).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load(&p), Err(Error::Format(_))));

        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&p, &newer).unwrap();
        assert!(matches!(load(&p), Err(Error::Version { found: 2, .. })));

        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&p), Err(Error::Truncated(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _) = generate(&tiny(), &AnalyticScene::default()).unwrap();
        let (b, _) = generate(&tiny(), &AnalyticScene::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.frames.iter().flat_map(|f| &f.data).all(|v| (0.0..=1.0).contains(v)));
    }
}
