//! Position-conditional anchor composition.
//!
//! A small network scores every (point, anchor) pair; a softmax over anchors
//! turns the scores into composition ratios and the point's code is the
//! matching convex combination of anchor codes:
//!
//! ```text
//! alpha[x, k] = softmax_k P(enc(x) ++ a_k)
//! w*(x)       = sum_k alpha[x, k] a_k
//! ```
//!
//! Rendering the ratios with the volume weights gives one map per anchor; a
//! total-variation penalty on those maps keeps the regions coherent.

use crate::error::{Error, Result};
use crate::nn::{BoundMlp, Mlp, PosEnc};
use crate::render::{CodeProvider, ViewCache};
use crate::scene::LatentTable;
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

/// Frozen anchor codes picked from the learned latent table.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub frames: Vec<usize>,
    /// `[K, d_w]`
    pub codes: Tensor,
}

impl AnchorSet {
    pub fn from_frames(latents: &LatentTable, frames: &[usize]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::NoAnchors);
        }
        let mut data = Vec::with_capacity(frames.len() * latents.dim());
        for &f in frames {
            if f >= latents.len() {
                return Err(Error::Invalid(format!("anchor frame {f} outside {} codes", latents.len())));
            }
            data.extend_from_slice(latents.code(f));
        }
        Ok(AnchorSet {
            frames: frames.to_vec(),
            codes: Tensor::new(vec![frames.len(), latents.dim()], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcrNet {
    pub mlp: Mlp,
    pub enc: PosEnc,
}

impl AcrNet {
    pub fn new<R: Rng>(d_w: usize, width: usize, depth: usize, bands: usize, rng: &mut R) -> Self {
        let enc = PosEnc::new(bands);
        let mut dims = vec![enc.out_dim(3) + d_w];
        dims.extend(std::iter::repeat(width).take(depth));
        dims.push(1);
        AcrNet {
            mlp: Mlp::new(&dims, None, rng),
            enc,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }

    pub fn bind(&self, g: &mut Graph, anchors: &AnchorSet) -> Result<BoundPac> {
        if anchors.is_empty() {
            return Err(Error::NoAnchors);
        }
        if self.mlp.in_dim() != self.enc.out_dim(3) + anchors.dim() {
            return Err(Error::Dim("anchor codes do not match the composition network input".into()));
        }
        let net = self.mlp.bind(g, true)?;
        let anchors_v = g.constant(anchors.codes.clone());
        Ok(BoundPac {
            net,
            anchors: anchors_v,
            k: anchors.len(),
            enc: self.enc,
        })
    }

    /// Ratios and composed code at a single point, without a graph.
    pub fn compose_point(&self, anchors: &AnchorSet, x: [f64; 3]) -> (Vec<f64>, Vec<f64>) {
        let e = self.enc.encode(&x);
        let logits: Vec<f64> = (0..anchors.len())
            .map(|k| {
                let mut input = e.clone();
                input.extend_from_slice(anchors.codes.row(k));
                self.mlp.forward_plain(&input)[0]
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = ex.iter().sum();
        let alpha: Vec<f64> = ex.iter().map(|v| v / s).collect();
        let mut w = vec![0.0; anchors.dim()];
        for (k, a) in alpha.iter().enumerate() {
            for (wi, ai) in w.iter_mut().zip(anchors.codes.row(k)) {
                *wi += a * ai;
            }
        }
        (alpha, w)
    }
}

/// Composition network and anchors registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundPac {
    net: BoundMlp,
    anchors: Var,
    k: usize,
    enc: PosEnc,
}

impl BoundPac {
    pub fn leaves(&self) -> &[Var] {
        self.net.leaves()
    }

    /// `(w* [P, d_w], alpha [P, K])` for encoded positions `enc_x` (`[P, e]`).
    pub fn compose(&self, g: &mut Graph, enc_x: Var) -> Result<(Var, Var)> {
        let p = g.value(enc_x).rows();
        let mut logits = Vec::with_capacity(self.k);
        for k in 0..self.k {
            let a = g.gather_rows(self.anchors, &vec![k; p])?;
            let input = g.concat(&[enc_x, a])?;
            logits.push(self.net.forward(g, input)?);
        }
        let logits = g.concat(&logits)?;
        let alpha = g.softmax(logits, 1)?;
        let w = g.matmul(alpha, self.anchors)?;
        Ok((w, alpha))
    }

    pub fn compose_points(&self, g: &mut Graph, points: &[[f64; 3]]) -> Result<(Var, Var)> {
        let e = g.constant(self.enc.encode_rows(points));
        self.compose(g, e)
    }
}

impl CodeProvider for BoundPac {
    fn codes(&self, g: &mut Graph, view: &ViewCache) -> Result<(Var, Option<Var>)> {
        let (w, alpha) = self.compose_points(g, &view.positions)?;
        Ok((w, Some(alpha)))
    }
}

fn neighbour_pairs(width: usize, height: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            if u + 1 < width {
                a.push(i);
                b.push(i + 1);
            }
            if v + 1 < height {
                a.push(i);
                b.push(i + width);
            }
        }
    }
    (a, b)
}

/// Anisotropic total variation of `[H*W, K]` maps, summed over anchors;
/// borders do not wrap.
pub fn tv_acr_loss(g: &mut Graph, maps: Var, width: usize, height: usize) -> Result<Var> {
    let t = g.value(maps);
    if t.rows() != width * height {
        return Err(Error::Dim(format!("maps have {} rows for a {}x{} image", t.rows(), width, height)));
    }
    if t.cols() == 0 {
        return Err(Error::NoAnchors);
    }
    let (a, b) = neighbour_pairs(width, height);
    let ma = g.gather_rows(maps, &a)?;
    let mb = g.gather_rows(maps, &b)?;
    let d = g.sub(mb, ma)?;
    let d = g.abs(d)?;
    Ok(g.sum(d)?)
}

/// Plain evaluation of the same penalty on per-anchor maps.
pub fn tv_value(maps: &[Vec<f64>], width: usize, height: usize) -> f64 {
    let (a, b) = neighbour_pairs(width, height);
    maps.iter()
        .map(|m| a.iter().zip(&b).map(|(&i, &j)| (m[j] - m[i]).abs()).sum::<f64>())
        .sum()
}
