//! Guidance oracles: anything that scores a rendered image against a prompt
//! and returns the gradient of its loss with respect to the pixels.
//!
//! Two oracles ship here: a local target-image oracle (similarity is one minus
//! the mean squared error) and an HTTP client for a remote CLIP similarity
//! service. Both report per-image losses `1 - similarity`; a batch loss is
//! `1 - mean similarity`.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::Adam;
use crate::render::{render_view, ConstantCode, ViewCache};
use crate::scene::SceneManipulator;
use crate::tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("guidance service unreachable after {attempts} attempts: {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("guidance service answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed guidance response: {0}")]
    Malformed(String),
    #[error("image is {found:?}, prompt expects {expected:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("prompt not usable here: {0}")]
    Prompt(String),
}

impl GuidanceError {
    /// Whether trying the same request again could succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, GuidanceError::Unreachable { .. })
            || matches!(self, GuidanceError::Status { status, .. } if *status == 503 || *status == 502 || *status == 504)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prompt {
    /// paraphrases of one instruction; the service averages their embeddings
    Text(Vec<String>),
    /// one target image per edit view, in view order
    Target(Vec<Image>),
}

impl Prompt {
    pub fn text<S: Into<String>>(variants: impl IntoIterator<Item = S>) -> std::result::Result<Self, GuidanceError> {
        let v: Vec<String> = variants.into_iter().map(Into::into).collect();
        if v.is_empty() || v.iter().all(|s| s.trim().is_empty()) {
            return Err(GuidanceError::Prompt("text prompt needs at least one variant".into()));
        }
        Ok(Prompt::Text(v))
    }

    pub fn target(images: Vec<Image>) -> std::result::Result<Self, GuidanceError> {
        if images.is_empty() {
            return Err(GuidanceError::Prompt("target prompt needs at least one image".into()));
        }
        Ok(Prompt::Target(images))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Local,
    Remote,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceResult {
    pub similarity: f64,
    /// gradient of `1 - similarity` with respect to the image
    pub grad: Image,
    pub provenance: Provenance,
}

pub trait GuidanceOracle {
    /// Scores the render of edit view `view`.
    fn score(&self, view: usize, image: &Image, prompt: &Prompt) -> std::result::Result<GuidanceResult, GuidanceError>;
}

/// Batch loss `1 - mean similarity` and the per-image gradients of that loss.
pub fn score_batch(
    oracle: &dyn GuidanceOracle,
    renders: &[(usize, Image)],
    prompt: &Prompt,
) -> std::result::Result<(f64, Vec<GuidanceResult>), GuidanceError> {
    if renders.is_empty() {
        return Err(GuidanceError::Prompt("no images to score".into()));
    }
    let b = renders.len() as f64;
    let mut out = Vec::with_capacity(renders.len());
    let mut sim = 0.0;
    for (view, img) in renders {
        let mut r = oracle.score(*view, img, prompt)?;
        sim += r.similarity;
        r.grad.data.iter_mut().for_each(|g| *g /= b);
        out.push(r);
    }
    Ok((1.0 - sim / b, out))
}

/// Similarity `1 - MSE` against the target for the view, MSE averaged over all
/// `H * W * 3` values.
#[derive(Clone, Copy, Debug, Default)]
pub struct TargetImageOracle;

impl GuidanceOracle for TargetImageOracle {
    fn score(&self, view: usize, image: &Image, prompt: &Prompt) -> std::result::Result<GuidanceResult, GuidanceError> {
        let Prompt::Target(targets) = prompt else {
            return Err(GuidanceError::Prompt("the local oracle needs a target image".into()));
        };
        let target = targets
            .get(view)
            .ok_or_else(|| GuidanceError::Prompt(format!("no target image for view {view}")))?;
        if (target.width, target.height) != (image.width, image.height) {
            return Err(GuidanceError::Shape {
                expected: (target.width, target.height),
                found: (image.width, image.height),
            });
        }
        let p = image.data.len() as f64;
        let mut mse = 0.0;
        let mut grad = Image::new(image.width, image.height);
        for ((g, &a), &t) in grad.data.iter_mut().zip(&image.data).zip(&target.data) {
            mse += (a - t) * (a - t);
            *g = 2.0 * (a - t) / p;
        }
        Ok(GuidanceResult {
            similarity: 1.0 - mse / p,
            grad,
            provenance: Provenance::Local,
        })
    }
}

#[derive(Serialize)]
struct SimilarityRequest<'a> {
    image: Vec<Vec<[f32; 3]>>,
    text_variants: &'a [String],
    want_grad: bool,
}

#[derive(Deserialize)]
struct SimilarityResponse {
    similarity: f64,
    grad: Option<Vec<Vec<Vec<f64>>>>,
    #[allow(dead_code)]
    model_id: Option<String>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub model_id: Option<String>,
}

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// Client for a CLIP similarity service (`POST /similarity`, `GET /health`).
pub struct RemoteClipOracle {
    base: String,
    agent: ureq::Agent,
    pub retries: u32,
    pub backoff: Duration,
}

impl RemoteClipOracle {
    pub fn new(base_url: &str, timeout: Duration, retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteClipOracle {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
            retries,
            backoff: Duration::from_millis(200),
        }
    }

    /// Reads `GUIDANCE_URL` and `GUIDANCE_TIMEOUT_MS`; `None` when no URL is set.
    pub fn from_env() -> std::result::Result<Option<Self>, GuidanceError> {
        let Ok(url) = std::env::var("GUIDANCE_URL") else { return Ok(None) };
        if url.trim().is_empty() {
            return Ok(None);
        }
        let timeout = match std::env::var("GUIDANCE_TIMEOUT_MS") {
            Ok(v) => v
                .trim()
                .parse::<u64>()
                .map_err(|_| GuidanceError::Prompt(format!("GUIDANCE_TIMEOUT_MS is not an integer: '{v}'")))?,
            Err(_) => DEFAULT_TIMEOUT_MS,
        };
        Ok(Some(RemoteClipOracle::new(&url, Duration::from_millis(timeout), 3)))
    }

    fn with_retries<T>(
        &self,
        mut attempt: impl FnMut() -> std::result::Result<T, GuidanceError>,
    ) -> std::result::Result<T, GuidanceError> {
        let mut tries = 0;
        loop {
            tries += 1;
            match attempt() {
                Err(e) if e.is_retryable() && tries <= self.retries => {
                    std::thread::sleep(self.backoff * tries);
                }
                Err(GuidanceError::Unreachable { message, .. }) => {
                    return Err(GuidanceError::Unreachable {
                        attempts: tries,
                        message,
                    })
                }
                other => return other,
            }
        }
    }

    pub fn health(&self) -> std::result::Result<Health, GuidanceError> {
        self.with_retries(|| {
            let mut resp = self
                .agent
                .get(&format!("{}/health", self.base))
                .call()
                .map_err(unreachable)?;
            let status = resp.status().as_u16();
            let body = resp.body_mut().read_to_string().map_err(unreachable)?;
            if status != 200 {
                return Err(GuidanceError::Status { status, body });
            }
            serde_json::from_str(&body).map_err(|e| GuidanceError::Malformed(e.to_string()))
        })
    }
}

fn unreachable(e: ureq::Error) -> GuidanceError {
    GuidanceError::Unreachable {
        attempts: 1,
        message: e.to_string(),
    }
}

impl GuidanceOracle for RemoteClipOracle {
    fn score(&self, _view: usize, image: &Image, prompt: &Prompt) -> std::result::Result<GuidanceResult, GuidanceError> {
        let Prompt::Text(variants) = prompt else {
            return Err(GuidanceError::Prompt("the remote oracle needs a text prompt".into()));
        };
        let (w, h) = (image.width, image.height);
        let req = SimilarityRequest {
            image: (0..h)
                .map(|v| {
                    (0..w)
                        .map(|u| {
                            let p = image.pixel(u, v);
                            [p[0] as f32, p[1] as f32, p[2] as f32]
                        })
                        .collect()
                })
                .collect(),
            text_variants: variants,
            want_grad: true,
        };
        let body = serde_json::to_string(&req).map_err(|e| GuidanceError::Malformed(e.to_string()))?;
        let text = self.with_retries(|| {
            let mut resp = self
                .agent
                .post(&format!("{}/similarity", self.base))
                .header("content-type", "application/json")
                .send(body.as_bytes())
                .map_err(unreachable)?;
            let status = resp.status().as_u16();
            let text = resp.body_mut().read_to_string().map_err(unreachable)?;
            if status != 200 {
                return Err(GuidanceError::Status { status, body: text });
            }
            Ok(text)
        })?;
        let parsed: SimilarityResponse =
            serde_json::from_str(&text).map_err(|e| GuidanceError::Malformed(e.to_string()))?;
        if !parsed.similarity.is_finite() || parsed.similarity.abs() > 1.0 + 1e-6 {
            return Err(GuidanceError::Malformed(format!("similarity {} outside [-1, 1]", parsed.similarity)));
        }
        let rows = parsed
            .grad
            .ok_or_else(|| GuidanceError::Malformed("response has no gradient".into()))?;
        let mut grad = Image::new(w, h);
        if rows.len() != h || rows.iter().any(|r| r.len() != w || r.iter().any(|p| p.len() != 3)) {
            return Err(GuidanceError::Malformed(format!("gradient is not {h}x{w}x3")));
        }
        for (v, row) in rows.iter().enumerate() {
            for (u, p) in row.iter().enumerate() {
                if p.iter().any(|x| !x.is_finite()) {
                    return Err(GuidanceError::Malformed("non-finite gradient".into()));
                }
                // the service returns d(similarity)/dI; the loss is 1 - similarity
                grad.set_pixel(u, v, [-p[0], -p[1], -p[2]]);
            }
        }
        Ok(GuidanceResult {
            similarity: parsed.similarity,
            grad,
            provenance: Provenance::Remote,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    /// full-batch evaluation period for best-code tracking
    pub eval_every: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 200,
            lr: 1e-2,
            eval_every: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub code: Vec<f64>,
    /// batch loss over all views of the returned code
    pub loss: f64,
    /// per-step loss on the view(s) optimised that step
    pub trace: Vec<f64>,
}

/// Loss over every view of a single code, without gradients.
pub fn code_loss(g: &SceneManipulator, oracle: &dyn GuidanceOracle, prompt: &Prompt, views: &[ViewCache], code: &[f64]) -> Result<f64> {
    let mut renders = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        renders.push((i, crate::render::render_cached_code(g, code, v)?.0));
    }
    Ok(score_batch(oracle, &renders, prompt)?.0)
}

/// Plain latent inversion: gradient descent on one global code, started at the
/// mean learned code, one view per step in turn.
pub fn invert_single_code(
    g: &SceneManipulator,
    oracle: &dyn GuidanceOracle,
    prompt: &Prompt,
    views: &[ViewCache],
    config: &InversionConfig,
) -> Result<Inversion> {
    if views.is_empty() {
        return Err(Error::Invalid("inversion needs at least one view".into()));
    }
    let all: Vec<usize> = (0..g.model.latents.len()).collect();
    let mut code = Tensor::matrix(1, g.code_dim(), g.model.latents.mean_code(&all))?;
    let mut opt = Adam::new(config.lr);
    let mut trace = Vec::with_capacity(config.steps);
    let mut best = (code_loss(g, oracle, prompt, views, code.data())?, code.data().to_vec());
    for step in 0..config.steps {
        let vi = step % views.len();
        let mut graph = Graph::new();
        let scene = g.model.bind(&mut graph, false)?;
        let c = graph.leaf(code.clone());
        let out = render_view(&mut graph, &scene, &views[vi], &ConstantCode(c))?;
        let img = out.image_value(&graph);
        let (loss, res) = score_batch(oracle, &[(vi, img)], prompt)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.push(loss);
        let gimg = graph.constant(Tensor::new(vec![out.width * out.height, 3], res[0].grad.data.clone())?);
        let prod = graph.mul(out.image, gimg)?;
        let surrogate = graph.sum(prod)?;
        graph.backward(surrogate)?;
        let grad = graph.grad(c).cloned().unwrap_or_else(|| Tensor::zeros(code.shape()));
        opt.step(vec![&mut code], &[grad])?;
        if (step + 1) % config.eval_every.max(1) == 0 || step + 1 == config.steps {
            let l = code_loss(g, oracle, prompt, views, code.data())?;
            if !l.is_finite() {
                return Err(Error::Diverged { step });
            }
            if l < best.0 {
                best = (l, code.data().to_vec());
            }
        }
    }
    Ok(Inversion {
        code: best.1,
        loss: best.0,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: &[f64]) -> Image {
        Image::from_data(2, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn target_oracle_identity_and_gradient() {
        let t = img(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let p = Prompt::target(vec![t.clone()]).unwrap();
        let r = TargetImageOracle.score(0, &t, &p).unwrap();
        assert_eq!(r.similarity, 1.0);
        assert!(r.grad.data.iter().all(|&g| g == 0.0));

        let x = img(&[0.3, 0.2, 0.1, 0.9, 0.5, 0.0]);
        let r = TargetImageOracle.score(0, &x, &p).unwrap();
        // central differences of 1 - similarity
        let h = 1e-5;
        for i in 0..6 {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data[i] += h;
            b.data[i] -= h;
            let la = 1.0 - TargetImageOracle.score(0, &a, &p).unwrap().similarity;
            let lb = 1.0 - TargetImageOracle.score(0, &b, &p).unwrap().similarity;
            let num = (la - lb) / (2.0 * h);
            assert!((num - r.grad.data[i]).abs() / num.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn target_oracle_rejects_bad_prompts() {
        let x = img(&[0.0; 6]);
        let text = Prompt::text(["a face with open eyes"]).unwrap();
        assert!(matches!(TargetImageOracle.score(0, &x, &text), Err(GuidanceError::Prompt(_))));
        let p = Prompt::target(vec![Image::new(3, 3)]).unwrap();
        assert!(matches!(TargetImageOracle.score(0, &x, &p), Err(GuidanceError::Shape { .. })));
        assert!(matches!(TargetImageOracle.score(1, &x, &p), Err(GuidanceError::Prompt(_))));
        assert!(Prompt::text(Vec::<String>::new()).is_err());
    }

    #[test]
    fn batch_loss_is_one_minus_mean_similarity() {
        let a = img(&[0.0; 6]);
        let b = img(&[1.0; 6]);
        let p = Prompt::target(vec![a.clone(), a.clone()]).unwrap();
        let (loss, res) = score_batch(&TargetImageOracle, &[(0, a.clone()), (1, b)], &p).unwrap();
        assert!((loss - 0.5).abs() < 1e-15);
        assert!(res[1].grad.data.iter().all(|&g| (g - 2.0 / 6.0 / 2.0).abs() < 1e-15));
    }

    #[test]
    fn retryable_classification() {
        assert!(GuidanceError::Status { status: 503, body: String::new() }.is_retryable());
        assert!(!GuidanceError::Status { status: 400, body: String::new() }.is_retryable());
        assert!(!GuidanceError::Status { status: 413, body: String::new() }.is_retryable());
        assert!(!GuidanceError::Malformed(String::new()).is_retryable());
    }
}
