//! Latent-conditioned deformable scene model and the frozen manipulator built from it.
//!
//! A sample point `x` under code `w` is evaluated as
//!
//! ```text
//! x' = x + T(enc(x) ++ w)          deformation (offset form)
//! a  = H(enc(x) ++ w)              ambient slicing coordinate
//! (c, sigma) = F(enc(x') ++ enc(a), enc(d))
//! ```
//!
//! During training both networks see the frame's own code. The manipulator
//! pins the deformation network to a chosen rigid code and only lets the code
//! fed to the slicing network vary.

use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, Mlp, PosEnc, RowNorm};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_w: usize,
    pub d_amb: usize,
    pub deform_depth: usize,
    pub deform_width: usize,
    pub slice_depth: usize,
    pub slice_width: usize,
    pub template_depth: usize,
    pub template_width: usize,
    pub color_width: usize,
    pub pe_deform: usize,
    pub pe_slice: usize,
    pub pe_template: usize,
    pub pe_ambient: usize,
    pub pe_dir: usize,
    pub lipschitz: bool,
    pub row_norm: RowNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_w: 4,
            d_amb: 2,
            deform_depth: 4,
            deform_width: 32,
            slice_depth: 4,
            slice_width: 32,
            template_depth: 6,
            template_width: 64,
            color_width: 32,
            pe_deform: 1,
            pe_slice: 4,
            pe_template: 5,
            pe_ambient: 2,
            pe_dir: 1,
            lipschitz: true,
            row_norm: RowNorm::AbsSum,
        }
    }
}

/// Per-frame trainable deformation codes, stored as one `[N, d_w]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub codes: Tensor,
}

impl LatentTable {
    pub fn new<R: Rng>(n: usize, d_w: usize, rng: &mut R) -> Self {
        let data = (0..n * d_w).map(|_| rng.gen_range(-1e-3..1e-3)).collect();
        LatentTable {
            codes: Tensor::new(vec![n, d_w], data).expect("latent shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn code(&self, n: usize) -> &[f64] {
        self.codes.row(n)
    }

    pub fn mean_code(&self, frames: &[usize]) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for &f in frames {
            for (a, b) in m.iter_mut().zip(self.code(f)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= frames.len().max(1) as f64);
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub mlp: Mlp,
    pub enc: PosEnc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlicingField {
    pub mlp: Mlp,
    pub enc: PosEnc,
}

/// Template radiance field: a shared trunk, a density head, and a colour head
/// that alone receives the view direction.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateField {
    pub trunk: Mlp,
    pub density: Mlp,
    pub color: Mlp,
    pub enc_pos: PosEnc,
    pub enc_amb: PosEnc,
    pub enc_dir: PosEnc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub config: ModelConfig,
    pub deform: DeformationField,
    pub slicing: SlicingField,
    pub template: TemplateField,
    pub latents: LatentTable,
}

fn chain(input: usize, width: usize, depth: usize, out: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend(std::iter::repeat(width).take(depth));
    d.push(out);
    d
}

impl SceneModel {
    pub fn new<R: Rng>(config: ModelConfig, n_frames: usize, rng: &mut R) -> Self {
        let lip = config.lipschitz.then_some(config.row_norm);
        let enc_d = PosEnc::new(config.pe_deform);
        let enc_s = PosEnc::new(config.pe_slice);
        let enc_pos = PosEnc::new(config.pe_template);
        let enc_amb = PosEnc::new(config.pe_ambient);
        let enc_dir = PosEnc::new(config.pe_dir);

        let mut t = Mlp::new(&chain(enc_d.out_dim(3) + config.d_w, config.deform_width, config.deform_depth, 3), lip, rng);
        t.scale_output(1e-2);
        let h = Mlp::new(
            &chain(enc_s.out_dim(3) + config.d_w, config.slice_width, config.slice_depth, config.d_amb),
            lip,
            rng,
        );
        let trunk_in = enc_pos.out_dim(3) + enc_amb.out_dim(config.d_amb);
        let mut trunk_dims = vec![trunk_in];
        trunk_dims.extend(std::iter::repeat(config.template_width).take(config.template_depth));
        let mut trunk = Mlp::new(&trunk_dims, lip, rng);
        if let Some(l) = trunk.layers.last_mut() {
            l.activation = Activation::Relu;
        }
        let density = Mlp::new(&[config.template_width, 1], lip, rng);
        let color = Mlp::new(
            &[config.template_width + enc_dir.out_dim(3), config.color_width, 3],
            lip,
            rng,
        );
        let latents = LatentTable::new(n_frames, config.d_w, rng);
        SceneModel {
            deform: DeformationField { mlp: t, enc: enc_d },
            slicing: SlicingField { mlp: h, enc: enc_s },
            template: TemplateField {
                trunk,
                density,
                color,
                enc_pos,
                enc_amb,
                enc_dir,
            },
            latents,
            config,
        }
    }

    /// Networks whose layers are Lipschitz-normalised, in parameter order.
    pub fn networks(&self) -> [(&'static str, &Mlp); 5] {
        [
            ("deform", &self.deform.mlp),
            ("slice", &self.slicing.mlp),
            ("trunk", &self.template.trunk),
            ("density", &self.template.density),
            ("color", &self.template.color),
        ]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.networks().iter().flat_map(|(_, m)| m.params()).collect();
        p.push(&self.latents.codes);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.deform.mlp.params_mut();
        p.extend(self.slicing.mlp.params_mut());
        p.extend(self.template.trunk.params_mut());
        p.extend(self.template.density.params_mut());
        p.extend(self.template.color.params_mut());
        p.push(&mut self.latents.codes);
        p
    }

    /// Product of per-layer constants for each of the deformation, slicing and
    /// template networks (template heads count as part of the template).
    pub fn lipschitz_products(&self) -> Option<[f64; 3]> {
        let t = self.deform.mlp.lipschitz_bound()?;
        let h = self.slicing.mlp.lipschitz_bound()?;
        let f = self.template.trunk.lipschitz_bound()?
            * self.template.density.lipschitz_bound()?
            * self.template.color.lipschitz_bound()?;
        Some([t, h, f])
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundScene> {
        let deform = self.deform.mlp.bind(g, trainable)?;
        let slicing = self.slicing.mlp.bind(g, trainable)?;
        let trunk = self.template.trunk.bind(g, trainable)?;
        let density = self.template.density.bind(g, trainable)?;
        let color = self.template.color.bind(g, trainable)?;
        let latents = g.param(&self.latents.codes, trainable);
        let mut leaves: Vec<Var> = Vec::new();
        for m in [&deform, &slicing, &trunk, &density, &color] {
            leaves.extend_from_slice(m.leaves());
        }
        leaves.push(latents);
        Ok(BoundScene {
            deform,
            slicing,
            trunk,
            density,
            color,
            latents,
            leaves,
            enc_deform: self.deform.enc,
            enc_slice: self.slicing.enc,
            enc_pos: self.template.enc_pos,
            enc_amb: self.template.enc_amb,
            enc_dir: self.template.enc_dir,
        })
    }
}

/// Scene parameters registered on one graph.
#[derive(Clone, Debug)]
pub struct BoundScene {
    deform: BoundMlp,
    slicing: BoundMlp,
    trunk: BoundMlp,
    density: BoundMlp,
    color: BoundMlp,
    pub latents: Var,
    leaves: Vec<Var>,
    enc_deform: PosEnc,
    enc_slice: PosEnc,
    enc_pos: PosEnc,
    enc_amb: PosEnc,
    enc_dir: PosEnc,
}

impl BoundScene {
    /// Leaf handles in [`SceneModel::params`] order.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn is_lipschitz(&self) -> bool {
        [&self.deform, &self.slicing, &self.trunk, &self.density, &self.color]
            .iter()
            .all(|m| m.is_lipschitz())
    }

    /// `x + T(enc(x) ++ w)`.
    pub fn deform(&self, g: &mut Graph, points: Var, enc: Var, code: Var) -> Result<Var> {
        let input = g.concat(&[enc, code])?;
        let offset = self.deform.forward(g, input)?;
        Ok(g.add(points, offset)?)
    }

    pub fn slice(&self, g: &mut Graph, enc: Var, code: Var) -> Result<Var> {
        let input = g.concat(&[enc, code])?;
        self.slicing.forward(g, input)
    }

    /// Returns `(sigma [P, 1], rgb [P, 3])`.
    pub fn template(&self, g: &mut Graph, enc_canonical: Var, ambient: Var, enc_dir: Var) -> Result<(Var, Var)> {
        let amb = self.enc_amb.apply(g, ambient)?;
        let input = g.concat(&[enc_canonical, amb])?;
        let h = self.trunk.forward(g, input)?;
        let raw_sigma = self.density.forward(g, h)?;
        let sigma = g.relu(raw_sigma)?;
        let ch = g.concat(&[h, enc_dir])?;
        let raw_rgb = self.color.forward(g, ch)?;
        let rgb = g.sigmoid(raw_rgb)?;
        Ok((sigma, rgb))
    }

    /// Full training-time field: both `T` and `H` see `codes` (`[P, d_w]`).
    /// Returns `(sigma [P, 1], rgb [P, 3])`.
    pub fn radiance(&self, g: &mut Graph, positions: &[[f64; 3]], dirs: &[[f64; 3]], codes: Var) -> Result<(Var, Var)> {
        let n = positions.len();
        let pts = g.constant(Tensor::new(vec![n, 3], positions.iter().flatten().copied().collect())?);
        let enc_d = g.constant(self.enc_deform.encode_rows(positions));
        let warped = self.deform(g, pts, enc_d, codes)?;
        let enc_w = self.enc_pos.apply(g, warped)?;
        let enc_s = g.constant(self.enc_slice.encode_rows(positions));
        let amb = self.slice(g, enc_s, codes)?;
        let enc_dir = g.constant(self.enc_dir.encode_rows(dirs));
        self.template(g, enc_w, amb, enc_dir)
    }

    /// Sum over the deformation, slicing and template networks of each
    /// network's product of `softplus(c)`.
    pub fn lipschitz_loss(&self, g: &mut Graph) -> Result<Var> {
        let t = self.deform.lipschitz_loss(g)?;
        let h = self.slicing.lipschitz_loss(g)?;
        let f1 = self.trunk.lipschitz_loss(g)?;
        let f2 = self.density.lipschitz_loss(g)?;
        let f3 = self.color.lipschitz_loss(g)?;
        let f12 = g.mul(f1, f2)?;
        let f = g.mul(f12, f3)?;
        let th = g.add(t, h)?;
        Ok(g.add(th, f)?)
    }
}

/// Trained scene with the deformation network pinned to a rigid code.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneManipulator {
    pub model: SceneModel,
    pub rigid_frame: usize,
    pub frozen: bool,
}

impl SceneManipulator {
    pub fn new(model: SceneModel, rigid_frame: usize) -> Result<Self> {
        if rigid_frame >= model.latents.len() {
            return Err(Error::Invalid(format!(
                "rigid frame {} outside {} learned codes",
                rigid_frame,
                model.latents.len()
            )));
        }
        Ok(SceneManipulator {
            model,
            rigid_frame,
            frozen: true,
        })
    }

    pub fn rigid_code(&self) -> &[f64] {
        self.model.latents.code(self.rigid_frame)
    }

    pub fn code_dim(&self) -> usize {
        self.model.config.d_w
    }

    /// Deformed positions `T(x, w_R)` of a point set.
    pub fn rigid_positions(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        let mut g = Graph::new();
        let scene = self.model.bind(&mut g, false)?;
        let n = points.len();
        let pts = g.constant(Tensor::new(vec![n, 3], points.iter().flatten().copied().collect())?);
        let enc = g.constant(self.model.deform.enc.encode_rows(points));
        let code = g.constant(Tensor::new(vec![1, self.code_dim()], self.rigid_code().to_vec())?);
        let codes = g.gather_rows(code, &vec![0; n])?;
        let out = scene.deform(&mut g, pts, enc, codes)?;
        Ok(g.value(out).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Graph form of a point query with `code` a `[1, d_w]` node.
    pub fn query_graph(&self, g: &mut Graph, scene: &BoundScene, x: [f64; 3], d: [f64; 3], code: Var) -> Result<(Var, Var)> {
        if g.value(code).len() != self.code_dim() {
            return Err(Error::Dim(format!(
                "code has {} entries, expected {}",
                g.value(code).len(),
                self.code_dim()
            )));
        }
        let cfg = &self.model.config;
        let xt = g.constant(Tensor::matrix(1, 3, x.to_vec())?);
        let enc_t = g.constant(self.model.deform.enc.encode_rows(&[x]));
        let rigid = g.constant(Tensor::new(vec![1, cfg.d_w], self.rigid_code().to_vec())?);
        let xp = scene.deform(g, xt, enc_t, rigid)?;
        let enc_xp = PosEnc::new(cfg.pe_template).apply(g, xp)?;
        let enc_s = g.constant(self.model.slicing.enc.encode_rows(&[x]));
        let amb = scene.slice(g, enc_s, code)?;
        let enc_d = g.constant(self.model.template.enc_dir.encode_rows(&[d]));
        let (sigma, rgb) = scene.template(g, enc_xp, amb, enc_d)?;
        Ok((rgb, sigma))
    }

    /// `F(T(x, w_R), H(x, w), d)` for a single point; returns `(rgb, sigma)`.
    pub fn query(&self, x: [f64; 3], d: [f64; 3], code: &[f64]) -> Result<([f64; 3], f64)> {
        let mut g = Graph::new();
        let scene = self.model.bind(&mut g, !self.frozen)?;
        let c = g.constant(Tensor::new(vec![1, code.len()], code.to_vec())?);
        let (rgb, sigma) = self.query_graph(&mut g, &scene, x, d, c)?;
        let r = g.value(rgb).data();
        Ok(([r[0], r[1], r[2]], g.value(sigma).item()))
    }
}

/// `gamma * w_i + (1 - gamma) * w_j` for `gamma` in `[0, 1]`.
pub fn interpolate_codes(wi: &[f64], wj: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Invalid(format!("interpolation weight {gamma} outside [0, 1]")));
    }
    if wi.len() != wj.len() {
        return Err(Error::Dim("codes differ in length".into()));
    }
    Ok(wi.iter().zip(wj).map(|(a, b)| gamma * a + (1.0 - gamma) * b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            deform_width: 8,
            deform_depth: 2,
            slice_width: 8,
            slice_depth: 2,
            template_width: 12,
            template_depth: 2,
            color_width: 6,
            ..ModelConfig::default()
        }
    }

    fn manipulator() -> SceneManipulator {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = SceneModel::new(small_config(), 4, &mut rng);
        SceneManipulator::new(model, 1).unwrap()
    }

    #[test]
    fn interpolation() {
        assert_eq!(interpolate_codes(&[1.0, 2.0], &[3.0, 4.0], 1.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(interpolate_codes(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
        assert!(interpolate_codes(&[1.0], &[0.0], 1.5).is_err());
        assert!(interpolate_codes(&[1.0], &[0.0], -0.1).is_err());
    }

    #[test]
    fn query_is_deterministic_and_checks_dims() {
        let g = manipulator();
        let w = g.model.latents.code(2).to_vec();
        let a = g.query([0.1, 0.2, 0.3], [0.0, 0.0, -1.0], &w).unwrap();
        let b = g.query([0.1, 0.2, 0.3], [0.0, 0.0, -1.0], &w).unwrap();
        assert_eq!(a, b);
        assert!(a.1 >= 0.0);
        assert!(a.0.iter().all(|c| (0.0..=1.0).contains(c)));
        assert!(matches!(g.query([0.0; 3], [0.0, 0.0, 1.0], &[0.0; 3]), Err(Error::Dim(_))));
        assert!(SceneManipulator::new(g.model.clone(), 9).is_err());
    }

    #[test]
    fn density_gradient_wrt_code_matches_differences() {
        let mut m = manipulator();
        // push the density bias up so the relu is active at the probe point
        m.model.template.density.layers[0].bias = Tensor::vector(vec![2.0]);
        let code = Tensor::matrix(1, m.code_dim(), m.model.latents.code(0).to_vec()).unwrap();
        let err = grad_check(
            |g, c| -> Result<_> {
                let scene = m.model.bind(g, false)?;
                let (_, sigma) = m.query_graph(g, &scene, [0.1, -0.2, 0.3], [0.0, 0.0, -1.0], c)?;
                Ok(g.sum(sigma)?)
            },
            &code,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn param_order_matches_leaves() {
        let m = manipulator();
        let mut g = Graph::new();
        let b = m.model.bind(&mut g, true).unwrap();
        let params = m.model.params();
        assert_eq!(params.len(), b.leaves().len());
        for (p, &v) in params.iter().zip(b.leaves()) {
            assert_eq!(*p, g.value(v));
        }
    }
}
