//! Pinhole cameras, stratified ray sampling and alpha compositing.
//!
//! Compositing follows the usual quadrature along a ray with depths `t_i`:
//!
//! ```text
//! C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i,   T_i = exp(-sum_{j<i} sigma_j delta_j)
//! ```
//!
//! with `delta_i = t_{i+1} - t_i` and the last interval running to the far bound.
//! The same weights render anchor composition ratios into per-anchor maps.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::PosEnc;
use crate::scene::{BoundScene, SceneManipulator};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

pub type Mat4 = [[f64; 4]; 4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole camera. Camera space is x right, y down, z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub cam_to_world: Mat4,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    /// Camera at `eye` looking at `target`, with world `up` mapping to image-up.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Self {
        let fwd = normalize(sub3(target, eye));
        let right = normalize(cross(fwd, up));
        let down = cross(fwd, right);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][0] = right[r];
            m[r][1] = down[r];
            m[r][2] = fwd[r];
            m[r][3] = eye[r];
        }
        m[3][3] = 1.0;
        Camera {
            intrinsics,
            cam_to_world: m,
            width,
            height,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        if !(self.near < self.far) {
            return Err(Error::Invalid("near must be below far".into()));
        }
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..3).map(|r| self.cam_to_world[r][a] * self.cam_to_world[r][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::Invalid("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.cam_to_world[0][3], self.cam_to_world[1][3], self.cam_to_world[2][3]]
    }

    /// Ray through the centre of pixel `(u, v)`.
    pub fn ray(&self, u: usize, v: usize) -> Ray {
        let k = &self.intrinsics;
        let dc = [(u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0];
        let m = &self.cam_to_world;
        let dw = [
            m[0][0] * dc[0] + m[0][1] * dc[1] + m[0][2] * dc[2],
            m[1][0] * dc[0] + m[1][1] * dc[1] + m[1][2] * dc[2],
            m[2][0] * dc[0] + m[2][1] * dc[1] + m[2][2] * dc[2],
        ];
        Ray {
            origin: self.origin(),
            dir: normalize(dw),
            pixel: (u, v),
        }
    }

    pub fn rays(&self) -> RayBatch {
        let mut rays = Vec::with_capacity(self.width * self.height);
        for v in 0..self.height {
            for u in 0..self.width {
                rays.push(self.ray(u, v));
            }
        }
        RayBatch { rays }
    }

    /// Projects a world point to continuous pixel coordinates.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let m = &self.cam_to_world;
        let d = sub3(p, self.origin());
        let c = [
            m[0][0] * d[0] + m[1][0] * d[1] + m[2][0] * d[2],
            m[0][1] * d[0] + m[1][1] * d[1] + m[2][1] * d[2],
            m[0][2] * d[0] + m[1][2] * d[1] + m[2][2] * d[2],
        ];
        if c[2] <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    /// unit length
    pub dir: [f64; 3],
    pub pixel: (usize, usize),
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

#[derive(Clone, Debug, Default)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
}

/// Bounding sphere at the origin enclosing all scene content; rays that miss it
/// render as empty (black, zero opacity).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub radius: f64,
}

impl Bounds {
    /// Depth interval of `ray` inside the sphere, clipped to `[near, far]`.
    pub fn segment(&self, ray: &Ray, near: f64, far: f64) -> Option<(f64, f64)> {
        let b = dot(ray.origin, ray.dir);
        let c = dot(ray.origin, ray.origin) - self.radius * self.radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let (t0, t1) = ((-b - s).max(near), (-b + s).min(far));
        (t1 - t0 > 1e-9).then_some((t0, t1))
    }
}

/// Depths along one ray and their interval lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePoints {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
}

fn finish_samples(t: Vec<f64>, far: f64) -> SamplePoints {
    let m = t.len();
    let deltas = (0..m)
        .map(|i| if i + 1 < m { t[i + 1] - t[i] } else { far - t[i] })
        .collect();
    SamplePoints { t, deltas }
}

fn check_bins(near: f64, far: f64, m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples per ray, got {m}")));
    }
    if !(near < far) {
        return Err(Error::Invalid("sample interval is empty".into()));
    }
    Ok((far - near) / m as f64)
}

/// One uniform draw inside each of `m` equal bins spanning `[near, far]`.
pub fn stratified_sample<R: Rng>(near: f64, far: f64, m: usize, rng: &mut R) -> Result<SamplePoints> {
    let w = check_bins(near, far, m)?;
    let t = (0..m).map(|i| near + (i as f64 + rng.gen::<f64>()) * w).collect();
    Ok(finish_samples(t, far))
}

/// Bin centres; the deterministic variant used for evaluation renders.
pub fn midpoint_sample(near: f64, far: f64, m: usize) -> Result<SamplePoints> {
    let w = check_bins(near, far, m)?;
    let t = (0..m).map(|i| near + (i as f64 + 0.5) * w).collect();
    Ok(finish_samples(t, far))
}

/// Per-sample compositing weights `T_i (1 - exp(-sigma_i delta_i))`.
pub fn composite_weights(sigma: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != deltas.len() {
        return Err(Error::Dim("sigma and delta lengths differ".into()));
    }
    let mut acc: f64 = 0.0;
    let mut w = Vec::with_capacity(sigma.len());
    for (&s, &d) in sigma.iter().zip(deltas) {
        if s < 0.0 || s.is_nan() {
            return Err(Error::Invalid(format!("negative density {s}")));
        }
        let sd = s * d;
        w.push((-acc).exp() * -(-sd).exp_m1());
        acc += sd;
    }
    Ok(w)
}

/// Composited colour and opacity of one ray.
pub fn composite(sigma: &[f64], deltas: &[f64], colors: &[[f64; 3]]) -> Result<([f64; 3], f64)> {
    if colors.len() != sigma.len() {
        return Err(Error::Dim("colour and density lengths differ".into()));
    }
    let w = composite_weights(sigma, deltas)?;
    let mut c = [0.0; 3];
    for (wi, ci) in w.iter().zip(colors) {
        for k in 0..3 {
            c[k] += wi * ci[k];
        }
    }
    Ok((c, w.iter().sum()))
}

/// Graph version of [`composite`] for `R` rays of `M` samples.
///
/// `sigma: [R*M, 1]`, `values: [R*M, C]`, `deltas: [R, M]` (constant).
/// Returns `(values composited [R, C], weights [R, M])`.
pub fn composite_graph(g: &mut Graph, sigma: Var, values: Var, deltas: Var) -> Result<(Var, Var)> {
    let shape = g.value(deltas).shape().to_vec();
    let s = g.reshape(sigma, &shape)?;
    let sd = g.mul(s, deltas)?;
    let cum = g.cumsum_exclusive(sd)?;
    let neg = g.neg(cum)?;
    let trans = g.exp(neg)?;
    let alpha = g.one_minus_exp_neg(sd)?;
    let weights = g.mul(trans, alpha)?;
    let out = g.row_weighted_sum(weights, values)?;
    Ok((out, weights))
}

/// Fixed samples of one camera view under a frozen manipulator.
///
/// Everything that does not depend on the manipulated code is precomputed:
/// sample positions, the deformed positions under the rigid code, and all
/// positional encodings.
#[derive(Clone, Debug)]
pub struct ViewCache {
    pub camera: Camera,
    /// linear pixel index `v * width + u` of every ray that hits the bounds
    pub pixels: Vec<usize>,
    pub samples_per_ray: usize,
    pub positions: Vec<[f64; 3]>,
    /// `[R, M]`
    pub deltas: Tensor,
    /// encoding of `x` for the slicing field `[P, *]`
    pub enc_slice: Tensor,
    /// encoding of the deformed position `x'` for the template `[P, *]`
    pub enc_canonical: Tensor,
    /// encoding of the view direction `[P, *]`
    pub enc_dir: Tensor,
}

impl ViewCache {
    pub fn num_points(&self) -> usize {
        self.positions.len()
    }

    pub fn build(g_model: &SceneManipulator, camera: &Camera, m: usize, bounds: Bounds) -> Result<Self> {
        camera.validate()?;
        let cfg = &g_model.model.config;
        let mut pixels = Vec::new();
        let mut positions = Vec::new();
        let mut deltas = Vec::new();
        let mut dirs = Vec::new();
        for ray in camera.rays().rays {
            let Some((t0, t1)) = bounds.segment(&ray, camera.near, camera.far) else { continue };
            let s = midpoint_sample(t0, t1, m)?;
            pixels.push(ray.pixel.1 * camera.width + ray.pixel.0);
            for &t in &s.t {
                positions.push(ray.at(t));
                dirs.push(ray.dir);
            }
            deltas.extend(s.deltas);
        }
        let r = pixels.len();
        let enc_slice = PosEnc::new(cfg.pe_slice).encode_rows(&positions);
        let enc_dir = PosEnc::new(cfg.pe_dir).encode_rows(&dirs);
        let canonical = g_model.rigid_positions(&positions)?;
        let enc_canonical = PosEnc::new(cfg.pe_template).encode_rows(&canonical);
        Ok(ViewCache {
            camera: camera.clone(),
            pixels,
            samples_per_ray: m,
            positions,
            deltas: Tensor::new(vec![r, m], deltas)?,
            enc_slice,
            enc_canonical,
            enc_dir,
        })
    }
}

/// Supplies the latent code fed to the slicing field at every sample point.
pub trait CodeProvider {
    /// Returns `[P, d_w]` codes and, for compositing providers, `[P, K]`
    /// anchor composition ratios.
    fn codes(&self, g: &mut Graph, view: &ViewCache) -> Result<(Var, Option<Var>)>;
}

/// The same code everywhere; `code` must be a `[1, d_w]` node.
#[derive(Clone, Copy, Debug)]
pub struct ConstantCode(pub Var);

impl CodeProvider for ConstantCode {
    fn codes(&self, g: &mut Graph, view: &ViewCache) -> Result<(Var, Option<Var>)> {
        let idx = vec![0; view.num_points()];
        Ok((g.gather_rows(self.0, &idx)?, None))
    }
}

/// Graph handles of one rendered view; images are `[H*W, C]` in pixel order.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub image: Var,
    pub opacity: Var,
    pub weights: Var,
    pub acr_maps: Option<Var>,
    pub width: usize,
    pub height: usize,
}

impl RenderedView {
    pub fn image_value(&self, g: &Graph) -> Image {
        Image::from_data(self.width, self.height, g.value(self.image).data().to_vec()).expect("render size")
    }

    pub fn opacity_value(&self, g: &Graph) -> Vec<f64> {
        g.value(self.opacity).data().to_vec()
    }

    /// One `H*W` map per anchor.
    pub fn acr_values(&self, g: &Graph) -> Option<Vec<Vec<f64>>> {
        let maps = self.acr_maps?;
        let t = g.value(maps);
        let k = t.cols();
        Some((0..k).map(|j| t.data().iter().skip(j).step_by(k).copied().collect()).collect())
    }
}

/// Renders a cached view through the manipulator with per-point codes.
pub fn render_view(g: &mut Graph, scene: &BoundScene, view: &ViewCache, provider: &dyn CodeProvider) -> Result<RenderedView> {
    let (w, h) = (view.camera.width, view.camera.height);
    let total = w * h;
    let (codes, acr) = provider.codes(g, view)?;
    let enc_slice = g.constant(view.enc_slice.clone());
    let enc_can = g.constant(view.enc_canonical.clone());
    let enc_dir = g.constant(view.enc_dir.clone());
    let deltas = g.constant(view.deltas.clone());
    let amb = scene.slice(g, enc_slice, codes)?;
    let (sigma, rgb) = scene.template(g, enc_can, amb, enc_dir)?;
    let (color, weights) = composite_graph(g, sigma, rgb, deltas)?;
    let opacity = g.sum_cols(weights)?;
    let image = g.scatter_rows(color, &view.pixels, total)?;
    let opacity = g.scatter_rows(opacity, &view.pixels, total)?;
    let acr_maps = match acr {
        Some(a) => {
            let per_ray = g.row_weighted_sum(weights, a)?;
            Some(g.scatter_rows(per_ray, &view.pixels, total)?)
        }
        None => None,
    };
    Ok(RenderedView {
        image,
        opacity,
        weights,
        acr_maps,
        width: w,
        height: h,
    })
}

/// Renders an image for a single fixed code without tracking gradients.
pub fn render_code_image(g_model: &SceneManipulator, code: &[f64], camera: &Camera, m: usize, bounds: Bounds) -> Result<(Image, Vec<f64>)> {
    let view = ViewCache::build(g_model, camera, m, bounds)?;
    render_cached_code(g_model, code, &view)
}

pub fn render_cached_code(g_model: &SceneManipulator, code: &[f64], view: &ViewCache) -> Result<(Image, Vec<f64>)> {
    let mut g = Graph::new();
    let scene = g_model.model.bind(&mut g, false)?;
    let c = g.constant(Tensor::new(vec![1, code.len()], code.to_vec())?);
    let out = render_view(&mut g, &scene, view, &ConstantCode(c))?;
    Ok((out.image_value(&g), out.opacity_value(&g)))
}

/// Opacity-weighted mean pixel position `(u, v)` of an opacity map.
pub fn opacity_centroid(opacity: &[f64], width: usize) -> Option<(f64, f64)> {
    let mut s = 0.0;
    let (mut cu, mut cv) = (0.0, 0.0);
    for (i, &o) in opacity.iter().enumerate() {
        let (u, v) = ((i % width) as f64 + 0.5, (i / width) as f64 + 0.5);
        s += o;
        cu += o * u;
        cv += o * v;
    }
    (s > 0.0).then(|| (cu / s, cv / s))
}

/// Opacity-weighted depth per ray from compositing weights `[R, M]` and depths.
pub fn expected_depth(weights: &[f64], t: &[f64]) -> f64 {
    weights.iter().zip(t).map(|(w, t)| w * t).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> Camera {
        Camera::look_at(
            [0.0, 0.0, 2.0],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            Intrinsics {
                fx: 20.0,
                fy: 20.0,
                cx: 8.0,
                cy: 8.0,
            },
            16,
            16,
            1.0,
            3.0,
        )
    }

    #[test]
    fn stratified_bins_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = stratified_sample(0.0, 1.0, 4, &mut rng).unwrap();
        for (i, &t) in s.t.iter().enumerate() {
            assert!(t >= i as f64 / 4.0 && t < (i + 1) as f64 / 4.0);
        }
        assert!(s.deltas.iter().all(|&d| d > 0.0));
        assert!((s.deltas[3] - (1.0 - s.t[3])).abs() < 1e-15);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            stratified_sample(1.0, 3.0, 8, &mut a).unwrap(),
            stratified_sample(1.0, 3.0, 8, &mut b).unwrap()
        );
        assert!(stratified_sample(0.0, 1.0, 1, &mut a).is_err());
    }

    #[test]
    fn stratified_mean_hits_bin_centres() {
        // Monte Carlo: each t_i is uniform in its bin, std of the mean = w / sqrt(12 n)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let m = 4;
        let mut sums = vec![0.0; m];
        for _ in 0..n {
            let s = stratified_sample(0.0, 1.0, m, &mut rng).unwrap();
            for i in 0..m {
                sums[i] += s.t[i];
            }
        }
        let sd = 0.25 / (12.0 * n as f64).sqrt();
        for i in 0..m {
            let centre = (i as f64 + 0.5) / 4.0;
            assert!((sums[i] / n as f64 - centre).abs() < 3.0 * sd);
        }
    }

    #[test]
    fn composite_examples() {
        let (c, o) = composite(&[0.0, 0.0], &[1.0, 1.0], &[[1.0; 3], [1.0; 3]]).unwrap();
        assert_eq!((c, o), ([0.0; 3], 0.0));

        // direct scalar evaluation: w1 = 1 - e^-1, w2 = e^-1 (1 - e^-1)
        let e = (-1.0f64).exp();
        let (w1, w2) = (1.0 - e, e * (1.0 - e));
        assert!((w1 - 0.632121).abs() < 1e-6 && (w2 - 0.232544).abs() < 1e-6);
        let (c, o) = composite(&[1.0, 1.0], &[1.0, 1.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert!((c[0] - w1).abs() < 1e-15 && (c[1] - w2).abs() < 1e-15 && c[2] == 0.0);
        assert!((o - w1 - w2).abs() < 1e-15);

        let (c, _) = composite(&[1e6, 1.0], &[1.0, 1.0], &[[0.2, 0.4, 0.6], [1.0; 3]]).unwrap();
        assert!((c[0] - 0.2).abs() < 1e-12);

        assert!(composite(&[-1.0], &[1.0], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn composite_graph_matches_scalar_and_finite_differences() {
        let sigma = [0.3, 2.0, 0.0, 1.2, 0.7, 0.1];
        let deltas = [0.2, 0.1, 0.3, 0.5, 0.2, 0.25];
        let colors: Vec<[f64; 3]> = (0..6).map(|i| [0.1 * i as f64, 0.5, 1.0 - 0.1 * i as f64]).collect();
        let mut g = Graph::new();
        let s = g.constant(Tensor::matrix(6, 1, sigma.to_vec()).unwrap());
        let c = g.constant(Tensor::matrix(6, 3, colors.iter().flatten().copied().collect()).unwrap());
        let d = g.constant(Tensor::matrix(2, 3, deltas.to_vec()).unwrap());
        let (out, _) = composite_graph(&mut g, s, c, d).unwrap();
        for r in 0..2 {
            let (ref_c, _) = composite(&sigma[r * 3..r * 3 + 3], &deltas[r * 3..r * 3 + 3], &colors[r * 3..r * 3 + 3]).unwrap();
            for k in 0..3 {
                assert!((g.value(out).data()[r * 3 + k] - ref_c[k]).abs() < 1e-14);
            }
        }
        let dt = Tensor::matrix(2, 3, deltas.to_vec()).unwrap();
        let ct = Tensor::matrix(6, 3, colors.iter().flatten().copied().collect()).unwrap();
        let err = grad_check(
            |g, s| -> crate::Result<_> {
                let c = g.constant(ct.clone());
                let d = g.constant(dt.clone());
                let (o, _) = composite_graph(g, s, c, d)?;
                let q = g.square(o)?;
                Ok(g.sum(q)?)
            },
            &Tensor::matrix(6, 1, sigma.to_vec()).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rays_are_unit_and_centre_ray_points_forward() {
        let cam = test_camera();
        cam.validate().unwrap();
        for r in cam.rays().rays {
            assert!((dot(r.dir, r.dir) - 1.0).abs() < 1e-9);
        }
        let r = cam.ray(8, 8);
        assert!(r.dir[2] < -0.99);
        let (u, v) = cam.project([0.0, 0.3, 0.0]).unwrap();
        assert!((u - 8.0).abs() < 1e-9 && v < 8.0, "world up maps to image up");
    }

    #[test]
    fn bounds_segment() {
        let cam = test_camera();
        let b = Bounds { radius: 0.5 };
        let (t0, t1) = b.segment(&cam.ray(8, 8), cam.near, cam.far).unwrap();
        assert!((t0 - 1.5).abs() < 0.01 && (t1 - 2.5).abs() < 0.01);
        assert!(b.segment(&cam.ray(0, 0), cam.near, cam.far).is_none());
    }

    #[test]
    fn centroid_of_symmetric_map() {
        let mut o = vec![0.0; 16];
        o[5] = 1.0;
        o[6] = 1.0;
        let (u, v) = opacity_centroid(&o, 4).unwrap();
        assert!((u - 2.0).abs() < 1e-12 && (v - 1.5).abs() < 1e-12);
        assert!(opacity_centroid(&[0.0; 4], 2).is_none());
    }
}
