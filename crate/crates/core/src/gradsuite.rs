//! Finite-difference checks of every differentiable loss and kernel, on tiny
//! randomly initialised networks.

use crate::error::Result;
use crate::guidance::{score_batch, Prompt, TargetImageOracle};
use crate::image::Image;
use crate::nn::{collect_grads, Mlp, RowNorm};
use crate::pac::{tv_acr_loss, AcrNet, AnchorSet};
use crate::render::{composite_graph, render_view, Bounds, Camera, Intrinsics, ViewCache};
use crate::scene::{ModelConfig, SceneManipulator, SceneModel};
use crate::tensor::{grad_check, Graph, Tensor, Var};
use crate::trainer::{photometric_loss, RaySamples};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tolerance for single elementwise kernels.
pub const ELEMENTWISE_TOL: f64 = 1e-6;
/// Tolerance for composite losses.
pub const LOSS_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

/// Central-difference check over a sample of parameter coordinates.
/// `analytic` holds one gradient per tensor of `params`; `eval` returns the
/// loss for a full parameter set. Error is `|a - n| / max(|n|, 1e-2)`.
pub fn param_check<R: Rng>(
    params: &[Tensor],
    analytic: &[Tensor],
    eval: &dyn Fn(&[Tensor]) -> Result<f64>,
    per_tensor: usize,
    h: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (ti, p) in params.iter().enumerate() {
        let picks: Vec<usize> = if p.len() <= per_tensor {
            (0..p.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..p.len())).collect()
        };
        for k in picks {
            let x0 = p.data()[k];
            work[ti].data_mut()[k] = x0 + h;
            let lp = eval(&work)?;
            work[ti].data_mut()[k] = x0 - h;
            let lm = eval(&work)?;
            work[ti].data_mut()[k] = x0;
            let num = (lp - lm) / (2.0 * h);
            let err = (analytic[ti].data()[k] - num).abs() / num.abs().max(1e-2);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_w: 4,
        d_amb: 2,
        deform_depth: 2,
        deform_width: 8,
        slice_depth: 2,
        slice_width: 8,
        template_depth: 2,
        template_width: 12,
        color_width: 6,
        pe_deform: 2,
        pe_slice: 2,
        pe_template: 2,
        pe_ambient: 1,
        pe_dir: 1,
        ..ModelConfig::default()
    }
}

fn tiny_model(rng: &mut ChaCha8Rng) -> SceneModel {
    let mut m = SceneModel::new(tiny_model_config(), 3, rng);
    // larger codes and a positive density bias keep relus active and the
    // deformation non-trivial
    for v in m.latents.codes.data_mut() {
        *v *= 10.0;
    }
    for v in m.deform.mlp.layers.last_mut().unwrap().weight.data_mut() {
        *v *= 50.0;
    }
    m.template.density.layers[0].bias = Tensor::vector(vec![1.0]);
    // initialisation puts the largest row exactly on the clip boundary, where
    // the derivative is one-sided
    for p in m.params_mut() {
        if p.len() == 1 {
            p.data_mut()[0] -= 0.3;
        }
    }
    m
}

fn tiny_camera() -> Camera {
    let intr = Intrinsics {
        fx: 7.0,
        fy: 7.0,
        cx: 3.0,
        cy: 3.0,
    };
    Camera::look_at([0.3, 0.2, 2.0], [0.0; 3], [0.0, 1.0, 0.0], intr, 6, 6, 1.0, 3.0)
}

fn elementwise(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = random(&[5, 3], -2.0, 2.0, rng);
    // keep relu and abs away from their kinks
    let x = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|&v| if v.abs() < 0.1 { v + 0.3 } else { v }).collect(),
    )?;
    let ops: [fn(&mut Graph, Var) -> crate::tensor::Result<Var>; 9] = [
        |g, x| g.sin(x),
        |g, x| g.cos(x),
        |g, x| g.exp(x),
        |g, x| g.softplus(x),
        |g, x| g.sigmoid(x),
        |g, x| g.relu(x),
        |g, x| g.abs(x),
        |g, x| g.square(x),
        |g, x| g.one_minus_exp_neg(x),
    ];
    let r = random(&[5, 3], -1.0, 1.0, rng);
    let mut worst: f64 = 0.0;
    for op in ops {
        let e = grad_check(
            |g, x| -> crate::tensor::Result<Var> {
                let y = op(g, x)?;
                let w = g.constant(r.clone());
                let p = g.mul(y, w)?;
                g.sum(p)
            },
            &x,
            1e-6,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn composite(rng: &mut ChaCha8Rng) -> Result<f64> {
    let sigma = random(&[12, 1], 0.0, 3.0, rng);
    let colors = random(&[12, 3], 0.0, 1.0, rng);
    let deltas = random(&[3, 4], 0.05, 0.4, rng);
    let r = random(&[3, 3], -1.0, 1.0, rng);
    let eval = |p: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let s = g.constant(p[0].clone());
        let c = g.constant(p[1].clone());
        let d = g.constant(deltas.clone());
        let (o, _) = composite_graph(&mut g, s, c, d)?;
        let w = g.constant(r.clone());
        let prod = g.mul(o, w)?;
        let l = g.sum(prod)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let s = g.leaf(sigma.clone());
    let c = g.leaf(colors.clone());
    let d = g.constant(deltas.clone());
    let (o, _) = composite_graph(&mut g, s, c, d)?;
    let w = g.constant(r.clone());
    let prod = g.mul(o, w)?;
    let loss = g.sum(prod)?;
    g.backward(loss)?;
    let grads = collect_grads(&g, &[s, c]);
    param_check(&[sigma, colors], &grads, &eval, 64, 1e-6, rng)
}

fn mlp_loss(m: &Mlp, x: &Tensor, r: &Tensor, trainable: bool) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let b = m.bind(&mut g, trainable)?;
    let xv = g.constant(x.clone());
    let y = b.forward(&mut g, xv)?;
    let w = g.constant(r.clone());
    let p = g.mul(y, w)?;
    let loss = g.sum(p)?;
    Ok((g, loss, b.leaves().to_vec()))
}

fn lipschitz_layers(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut m = Mlp::new(&[4, 7, 5, 2], Some(RowNorm::AbsSum), rng);
    // make some rows clip and some not
    for l in &mut m.layers {
        if let Some(c) = &mut l.lip_c {
            for (i, v) in c.data_mut().iter_mut().enumerate() {
                *v = if i % 2 == 0 { -1.0 } else { 2.0 };
            }
        }
    }
    let x = random(&[6, 4], -1.0, 1.0, rng);
    let r = random(&[6, 2], -1.0, 1.0, rng);
    let (mut g, loss, leaves) = mlp_loss(&m, &x, &r, true)?;
    g.backward(loss)?;
    let grads = collect_grads(&g, &leaves);
    let params: Vec<Tensor> = m.params().into_iter().cloned().collect();
    let eval = |p: &[Tensor]| -> Result<f64> {
        let mut m2 = m.clone();
        for (d, s) in m2.params_mut().into_iter().zip(p) {
            *d = s.clone();
        }
        let (g, loss, _) = mlp_loss(&m2, &x, &r, false)?;
        Ok(g.value(loss).item())
    };
    param_check(&params, &grads, &eval, 24, 1e-6, rng)
}

fn set_params(model: &SceneModel, p: &[Tensor]) -> SceneModel {
    let mut m = model.clone();
    for (d, s) in m.params_mut().into_iter().zip(p) {
        *d = s.clone();
    }
    m
}

fn tiny_batch(rng: &mut ChaCha8Rng) -> RaySamples {
    let (rays, samples) = (4, 5);
    let mut b = RaySamples {
        rays,
        samples,
        positions: Vec::new(),
        dirs: Vec::new(),
        frames: Vec::new(),
        deltas: Vec::new(),
        target: Vec::new(),
    };
    for _ in 0..rays {
        let f = rng.gen_range(0..3);
        let d = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), -1.0];
        for _ in 0..samples {
            b.positions.push([rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
            b.dirs.push(d);
            b.frames.push(f);
            b.deltas.push(rng.gen_range(0.05..0.3));
        }
        b.target.extend((0..3).map(|_| rng.gen_range(0.0..1.0)));
    }
    b
}

/// Gradient of a scene loss with respect to every scene parameter.
fn scene_check(
    rng: &mut ChaCha8Rng,
    loss: &dyn Fn(&mut Graph, &crate::scene::BoundScene) -> Result<Var>,
) -> Result<f64> {
    let model = tiny_model(rng);
    let mut g = Graph::new();
    let scene = model.bind(&mut g, true)?;
    let l = loss(&mut g, &scene)?;
    g.backward(l)?;
    let grads = collect_grads(&g, scene.leaves());
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let eval = |p: &[Tensor]| -> Result<f64> {
        let m = set_params(&model, p);
        let mut g = Graph::new();
        let scene = m.bind(&mut g, false)?;
        let l = loss(&mut g, &scene)?;
        Ok(g.value(l).item())
    };
    param_check(&params, &grads, &eval, 6, 1e-6, rng)
}

fn photometric(rng: &mut ChaCha8Rng) -> Result<f64> {
    let batch = tiny_batch(rng);
    scene_check(rng, &|g, s| Ok(photometric_loss(g, s, &batch, 1.0, 0.0)?.loss))
}

fn lipschitz_penalty(rng: &mut ChaCha8Rng) -> Result<f64> {
    // scaled so the product is of order one
    scene_check(rng, &|g, s| {
        let l = s.lipschitz_loss(g)?;
        Ok(g.scale(l, 1e-6)?)
    })
}

fn tv_penalty(rng: &mut ChaCha8Rng) -> Result<f64> {
    let maps = random(&[20, 3], 0.0, 1.0, rng);
    let eval = |p: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let m = g.constant(p[0].clone());
        let l = tv_acr_loss(&mut g, m, 5, 4)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let m = g.leaf(maps.clone());
    let l = tv_acr_loss(&mut g, m, 5, 4)?;
    g.backward(l)?;
    let grads = collect_grads(&g, &[m]);
    param_check(&[maps], &grads, &eval, 60, 1e-7, rng)
}

fn tiny_edit(rng: &mut ChaCha8Rng) -> Result<(SceneManipulator, AnchorSet, AcrNet, ViewCache)> {
    let mut model = tiny_model(rng);
    model.latents.codes = random(&[3, 4], -1.0, 1.0, rng);
    let g = SceneManipulator::new(model, 0)?;
    let anchors = AnchorSet::from_frames(&g.model.latents, &[1, 2])?;
    let mut net = AcrNet::new(4, 6, 1, 2, rng);
    for v in net.mlp.layers[0].weight.data_mut() {
        *v *= 3.0;
    }
    let view = ViewCache::build(&g, &tiny_camera(), 4, Bounds { radius: 0.75 })?;
    Ok((g, anchors, net, view))
}

fn set_net(net: &AcrNet, p: &[Tensor]) -> AcrNet {
    let mut n = net.clone();
    for (d, s) in n.params_mut().into_iter().zip(p) {
        *d = s.clone();
    }
    n
}

fn pac_compose(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (g, anchors, net, _) = tiny_edit(rng)?;
    let pts: Vec<[f64; 3]> = (0..7)
        .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
        .collect();
    let rw = random(&[7, g.code_dim()], -1.0, 1.0, rng);
    let ra = random(&[7, anchors.len()], -1.0, 1.0, rng);
    let loss = |graph: &mut Graph, net: &AcrNet| -> Result<(Var, Vec<Var>)> {
        let pac = net.bind(graph, &anchors)?;
        let (w, a) = pac.compose_points(graph, &pts)?;
        let c1 = graph.constant(rw.clone());
        let c2 = graph.constant(ra.clone());
        let p1 = graph.mul(w, c1)?;
        let p2 = graph.mul(a, c2)?;
        let s1 = graph.sum(p1)?;
        let s2 = graph.sum(p2)?;
        Ok((graph.add(s1, s2)?, pac.leaves().to_vec()))
    };
    let mut graph = Graph::new();
    let (l, leaves) = loss(&mut graph, &net)?;
    graph.backward(l)?;
    let grads = collect_grads(&graph, &leaves);
    let params: Vec<Tensor> = net.params().into_iter().cloned().collect();
    let eval = |p: &[Tensor]| -> Result<f64> {
        let mut graph = Graph::new();
        let (l, _) = loss(&mut graph, &set_net(&net, p))?;
        Ok(graph.value(l).item())
    };
    param_check(&params, &grads, &eval, 12, 1e-6, rng)
}

/// Edit loss with the local oracle: the surrogate `sum(image * G)` plus the
/// ratio-map penalty must differentiate like the true loss
/// `1 - similarity + lambda * tv` with respect to the composition network.
fn edit_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (g, anchors, net, view) = tiny_edit(rng)?;
    let target = Image::from_data(6, 6, (0..108).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let prompt = Prompt::target(vec![target])?;
    let lambda = 0.05;
    let true_loss = |net: &AcrNet| -> Result<f64> {
        let mut graph = Graph::new();
        let scene = g.model.bind(&mut graph, false)?;
        let pac = net.bind(&mut graph, &anchors)?;
        let out = render_view(&mut graph, &scene, &view, &pac)?;
        let (l, _) = score_batch(&TargetImageOracle, &[(0, out.image_value(&graph))], &prompt)?;
        let tv = tv_acr_loss(&mut graph, out.acr_maps.expect("maps"), 6, 6)?;
        Ok(l + lambda * graph.value(tv).item())
    };
    let mut graph = Graph::new();
    let scene = g.model.bind(&mut graph, false)?;
    let pac = net.bind(&mut graph, &anchors)?;
    let out = render_view(&mut graph, &scene, &view, &pac)?;
    let (_, res) = score_batch(&TargetImageOracle, &[(0, out.image_value(&graph))], &prompt)?;
    let gimg = graph.constant(Tensor::new(vec![36, 3], res[0].grad.data.clone())?);
    let prod = graph.mul(out.image, gimg)?;
    let sur = graph.sum(prod)?;
    let tv = tv_acr_loss(&mut graph, out.acr_maps.expect("maps"), 6, 6)?;
    let wtv = graph.scale(tv, lambda)?;
    let loss = graph.add(sur, wtv)?;
    graph.backward(loss)?;
    let grads = collect_grads(&graph, pac.leaves());
    let params: Vec<Tensor> = net.params().into_iter().cloned().collect();
    let eval = |p: &[Tensor]| true_loss(&set_net(&net, p));
    param_check(&params, &grads, &eval, 10, 1e-6, rng)
}

/// Runs every check; deterministic for a given seed.
pub fn run(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name, error, tolerance| out.push(GradCheck { name, error, tolerance });
    push("elementwise", elementwise(&mut rng)?, ELEMENTWISE_TOL);
    push("composite", composite(&mut rng)?, LOSS_TOL);
    push("lipschitz_layers", lipschitz_layers(&mut rng)?, LOSS_TOL);
    push("photometric", photometric(&mut rng)?, LOSS_TOL);
    push("lipschitz_penalty", lipschitz_penalty(&mut rng)?, LOSS_TOL);
    push("tv_acr", tv_penalty(&mut rng)?, LOSS_TOL);
    push("pac_compose", pac_compose(&mut rng)?, LOSS_TOL);
    push("edit_local_oracle", edit_loss(&mut rng)?, LOSS_TOL);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_check_catches_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::vector(vec![1.0, 2.0]);
        let eval = |p: &[Tensor]| -> Result<f64> { Ok(p[0].data().iter().map(|v| v * v).sum()) };
        let good = Tensor::vector(vec![2.0, 4.0]);
        let bad = Tensor::vector(vec![2.0, 5.0]);
        assert!(param_check(&[x.clone()], &[good], &eval, 4, 1e-5, &mut rng).unwrap() < 1e-8);
        assert!(param_check(&[x], &[bad], &eval, 4, 1e-5, &mut rng).unwrap() > 0.1);
    }

    #[test]
    fn full_suite_passes() {
        let checks = run(1).unwrap();
        for c in &checks {
            println!("{} {:.3e} < {:.0e}", c.name, c.error, c.tolerance);
        }
        assert!(checks.iter().all(GradCheck::passed), "{checks:?}");
    }
}
