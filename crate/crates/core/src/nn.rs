//! Positional encoding and (optionally Lipschitz-normalised) multilayer perceptrons.
//!
//! A Lipschitz layer rescales every weight row so that its absolute row sum never
//! exceeds `softplus(c)`, with `c` a trainable scalar per layer:
//!
//! ```text
//! W_hat[j] = W[j] * min(1, softplus(c) / |W[j]|_1)
//! ```
//!
//! The absolute row sum bounds the induced infinity-norm of the layer, so a chain
//! of such layers with 1-Lipschitz activations is Lipschitz (in the max-norm) with
//! constant `prod_l softplus(c_l)`.

use crate::error::{Error, Result};
use crate::tensor::{softplus, Graph, Tensor, Var};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosEnc {
    pub bands: usize,
    pub include_input: bool,
}

impl PosEnc {
    pub fn new(bands: usize) -> Self {
        PosEnc {
            bands,
            include_input: true,
        }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        in_dim * (2 * self.bands + self.include_input as usize)
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.out_dim(x.len()));
        for &v in x {
            if self.include_input {
                out.push(v);
            }
            let mut f = std::f64::consts::PI;
            for _ in 0..self.bands {
                let (s, c) = (f * v).sin_cos();
                out.push(s);
                out.push(c);
                f *= 2.0;
            }
        }
        out
    }

    /// Encodes every row of an `[n, d]` tensor held in the graph.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(g.posenc(x, self.bands, self.include_input)?)
    }

    /// Encodes rows of a plain matrix into a constant-ready tensor.
    pub fn encode_rows(&self, rows: &[[f64; 3]]) -> Tensor {
        let w = self.out_dim(3);
        let mut data = Vec::with_capacity(rows.len() * w);
        for r in rows {
            data.extend(self.encode(r));
        }
        Tensor::new(vec![rows.len(), w], data).expect("encoded size")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Which per-row norm the Lipschitz normalisation compares against `softplus(c)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RowNorm {
    /// Absolute row sum; gives the infinity-norm operator bound.
    #[default]
    AbsSum,
    /// Largest absolute entry of the row.
    MaxAbs,
}

impl std::str::FromStr for RowNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs_sum" | "rowsum" => Ok(RowNorm::AbsSum),
            "max_abs" | "maxabs" => Ok(RowNorm::MaxAbs),
            _ => Err(Error::Config(format!("unknown row norm '{s}'"))),
        }
    }
}

impl std::fmt::Display for RowNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RowNorm::AbsSum => "abs_sum",
            RowNorm::MaxAbs => "max_abs",
        })
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1), stable for large y
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Dense layer `act(W_hat x + b)`; `lip_c` is present for Lipschitz layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub lip_c: Option<Tensor>,
    pub activation: Activation,
    pub norm: RowNorm,
}

fn row_norm(row: &[f64], norm: RowNorm) -> f64 {
    match norm {
        RowNorm::AbsSum => row.iter().map(|v| v.abs()).sum(),
        RowNorm::MaxAbs => row.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

impl Layer {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, activation: Activation, lipschitz: Option<RowNorm>, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.gen_range(-a..a)).collect();
        let weight = Tensor::new(vec![out_dim, in_dim], w).expect("layer shape");
        let mut layer = Layer {
            weight,
            bias: Tensor::zeros(&[out_dim]),
            lip_c: None,
            activation,
            norm: lipschitz.unwrap_or_default(),
        };
        if lipschitz.is_some() {
            layer.reset_lipschitz();
        }
        layer
    }

    /// Sets `c` so that `softplus(c)` equals the largest row norm; the
    /// normalisation then leaves the current weights untouched.
    pub fn reset_lipschitz(&mut self) {
        let cols = self.in_dim();
        let max = self
            .weight
            .data()
            .chunks(cols)
            .map(|r| row_norm(r, self.norm))
            .fold(0.0, f64::max)
            .max(1e-6);
        self.lip_c = Some(Tensor::scalar(softplus_inv(max)));
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn is_lipschitz(&self) -> bool {
        self.lip_c.is_some()
    }

    /// `softplus(c)` for Lipschitz layers.
    pub fn lipschitz_const(&self) -> Option<f64> {
        self.lip_c.as_ref().map(|c| softplus(c.item()))
    }

    /// Weight matrix after row normalisation, as plain values.
    pub fn effective_weight(&self) -> Vec<f64> {
        let cols = self.in_dim();
        let Some(s) = self.lipschitz_const() else {
            return self.weight.data().to_vec();
        };
        let mut out = Vec::with_capacity(self.weight.len());
        for row in self.weight.data().chunks(cols) {
            let n = row_norm(row, self.norm);
            let k = if n > 0.0 && s < n { s / n } else { 1.0 };
            out.extend(row.iter().map(|v| v * k));
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.weight, &self.bias];
        if let Some(c) = &self.lip_c {
            p.push(c);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.weight, &mut self.bias];
        if let Some(c) = &mut self.lip_c {
            p.push(c);
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Layer parameters registered on a graph, with the effective weight precomputed.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    weight: Var,
    bias: Var,
    lip_c: Option<Var>,
    activation: Activation,
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<BoundLayer>,
    leaves: Vec<Var>,
}

impl Mlp {
    /// Chain of layers through `dims` (`[in, hidden.., out]`): ReLU on hidden
    /// layers, identity on the output.
    pub fn new<R: Rng>(dims: &[usize], lipschitz: Option<RowNorm>, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
                Layer::new(dims[i], dims[i + 1], act, lipschitz, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn is_lipschitz(&self) -> bool {
        !self.layers.is_empty() && self.layers.iter().all(Layer::is_lipschitz)
    }

    /// `prod_l softplus(c_l)`.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        if !self.is_lipschitz() {
            return None;
        }
        Some(self.layers.iter().filter_map(Layer::lipschitz_const).product())
    }

    /// Shrinks the output layer, e.g. so an offset field starts near zero.
    pub fn scale_output(&mut self, k: f64) {
        if let Some(last) = self.layers.last_mut() {
            for v in last.weight.data_mut() {
                *v *= k;
            }
            if last.is_lipschitz() {
                last.reset_lipschitz();
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Forward pass on one input vector without building a graph.
    pub fn forward_plain(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &self.layers {
            let w = l.effective_weight();
            let cols = l.in_dim();
            let mut y: Vec<f64> = l.bias.data().to_vec();
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += w[j * cols..(j + 1) * cols].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
                if l.activation == Activation::Relu {
                    *yj = yj.max(0.0);
                }
            }
            h = y;
        }
        h
    }

    /// Registers the parameters on `g`; `trainable = false` freezes them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundMlp> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut leaves = Vec::new();
        for l in &self.layers {
            let w = g.param(&l.weight, trainable);
            let b = g.param(&l.bias, trainable);
            leaves.push(w);
            leaves.push(b);
            let (weight, lip_c) = match &l.lip_c {
                Some(c) => {
                    let c = g.param(c, trainable);
                    leaves.push(c);
                    let a = g.abs(w)?;
                    let n = match l.norm {
                        RowNorm::AbsSum => g.sum_cols(a)?,
                        RowNorm::MaxAbs => g.max_cols(a)?,
                    };
                    let s = g.softplus(c)?;
                    let k = g.clip_scale(n, s)?;
                    (g.mul(w, k)?, Some(c))
                }
                None => (w, None),
            };
            layers.push(BoundLayer {
                weight,
                bias: b,
                lip_c,
                activation: l.activation,
            });
        }
        Ok(BoundMlp { layers, leaves })
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = g.linear(h, l.weight, l.bias)?;
            if l.activation == Activation::Relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// `prod_l softplus(c_l)` as a graph scalar.
    pub fn lipschitz_loss(&self, g: &mut Graph) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for l in &self.layers {
            let c = l.lip_c.ok_or(Error::NotLipschitz)?;
            let s = g.softplus(c)?;
            acc = Some(match acc {
                None => s,
                Some(a) => g.mul(a, s)?,
            });
        }
        acc.ok_or(Error::NotLipschitz)
    }

    pub fn is_lipschitz(&self) -> bool {
        self.layers.iter().all(|l| l.lip_c.is_some())
    }

    /// Leaf handles in the same order as [`Mlp::params`].
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }
}

/// Gradients of `leaves`, zero where none arrived.
pub fn collect_grads(g: &Graph, leaves: &[Var]) -> Vec<Tensor> {
    leaves
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoding_of_zero_and_parity() {
        let pe = PosEnc::new(2);
        assert_eq!(pe.encode(&[0.0]), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(pe.out_dim(3), 15);
        let a = pe.encode(&[0.3, -1.2]);
        let b = pe.encode(&[-0.3, 1.2]);
        for c in 0..2 {
            let base = c * 5;
            assert_eq!(a[base], -b[base]);
            for l in 0..2 {
                assert!((a[base + 1 + 2 * l] + b[base + 1 + 2 * l]).abs() < 1e-15);
                assert!((a[base + 2 + 2 * l] - b[base + 2 + 2 * l]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn graph_encoding_matches_plain() {
        let pe = PosEnc::new(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.3, 0.0, -0.7]).unwrap());
        let y = pe.apply(&mut g, x).unwrap();
        let mut expect = pe.encode(&[0.1, -0.4, 0.9]);
        expect.extend(pe.encode(&[1.3, 0.0, -0.7]));
        assert_eq!(g.value(y).data(), expect.as_slice());
    }

    fn layer_with(row: &[f64], c_softplus: f64) -> Layer {
        Layer {
            weight: Tensor::matrix(1, row.len(), row.to_vec()).unwrap(),
            bias: Tensor::zeros(&[1]),
            lip_c: Some(Tensor::scalar(softplus_inv(c_softplus))),
            activation: Activation::Identity,
            norm: RowNorm::AbsSum,
        }
    }

    #[test]
    fn row_normalisation_hand_example() {
        let l = layer_with(&[3.0, -1.0], 2.0);
        let w = l.effective_weight();
        assert!((w[0] - 1.5).abs() < 1e-12 && (w[1] + 0.5).abs() < 1e-12);
        let l = layer_with(&[3.0, -1.0], 5.0);
        assert_eq!(l.effective_weight(), vec![3.0, -1.0]);

        let mut g = Graph::new();
        let b = Mlp { layers: vec![l] }.bind(&mut g, false).unwrap();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn lipschitz_loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new(&[3, 4, 2], Some(RowNorm::AbsSum), &mut rng);
        for l in &mut mlp.layers {
            l.lip_c = Some(Tensor::scalar(0.0));
        }
        let mut g = Graph::new();
        let b = mlp.bind(&mut g, true).unwrap();
        let loss = b.lipschitz_loss(&mut g).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(loss).item() - ln2 * ln2).abs() < 1e-12);
        assert!((ln2 * ln2 - 0.480453).abs() < 1e-6);

        let plain = Mlp::new(&[3, 2], None, &mut rng);
        let mut g = Graph::new();
        let b = plain.bind(&mut g, true).unwrap();
        assert!(matches!(b.lipschitz_loss(&mut g), Err(Error::NotLipschitz)));
    }

    #[test]
    fn lipschitz_loss_gradient_matches_differences() {
        let cs = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let err = grad_check(
            |g, c| {
                let s = g.softplus(c)?;
                let a = g.slice_cols(s, 0, 1)?;
                let b = g.slice_cols(s, 1, 2)?;
                let d = g.slice_cols(s, 2, 3)?;
                let ab = g.mul(a, b)?;
                let p = g.mul(ab, d)?;
                g.sum(p)
            },
            &cs.reshaped(vec![1, 3]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn initial_normalisation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = Mlp::new(&[5, 7, 3], Some(RowNorm::AbsSum), &mut rng);
        for l in &mlp.layers {
            let w = l.effective_weight();
            for (a, b) in w.iter().zip(l.weight.data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn bound_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::new(&[4, 6, 6, 2], Some(RowNorm::AbsSum), &mut rng);
        for l in &mut mlp.layers {
            l.lip_c = Some(Tensor::scalar(0.2));
        }
        let x = [0.2, -0.5, 0.9, 0.1];
        let mut g = Graph::new();
        let b = mlp.bind(&mut g, false).unwrap();
        let xv = g.constant(Tensor::matrix(1, 4, x.to_vec()).unwrap());
        let y = b.forward(&mut g, xv).unwrap();
        let p = mlp.forward_plain(&x);
        for (a, b) in g.value(y).data().iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
