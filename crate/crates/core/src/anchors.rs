//! Anchor selection: describe every learned code by a small grey thumbnail
//! rendered through the manipulator, cluster the thumbnails with DBSCAN, and
//! keep the code nearest each cluster mean.

use crate::error::{Error, Result};
use crate::render::{render_code_image, Bounds, Camera};
use crate::scene::SceneManipulator;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeature {
    pub frame: usize,
    pub values: Vec<f64>,
}

pub trait FeatureExtractor {
    fn extract(&self, g: &SceneManipulator, frames: &[usize]) -> Result<Vec<FrameFeature>>;
}

/// Renders each code at one camera and block-averages the grey image down to
/// `grid x grid`.
#[derive(Clone, Debug)]
pub struct RenderedFeatures {
    pub camera: Camera,
    pub samples: usize,
    pub bounds: Bounds,
    pub grid: usize,
}

/// Block average of a grey `width x height` image onto a `grid x grid` raster.
pub fn downsample(gray: &[f64], width: usize, height: usize, grid: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid * grid];
    let mut count = vec![0usize; grid * grid];
    for v in 0..height {
        for u in 0..width {
            let cell = (v * grid / height) * grid + u * grid / width;
            out[cell] += gray[v * width + u];
            count[cell] += 1;
        }
    }
    out.iter_mut().zip(&count).for_each(|(o, &c)| *o /= c.max(1) as f64);
    out
}

impl FeatureExtractor for RenderedFeatures {
    fn extract(&self, g: &SceneManipulator, frames: &[usize]) -> Result<Vec<FrameFeature>> {
        if self.grid == 0 || self.grid > self.camera.width || self.grid > self.camera.height {
            return Err(Error::Invalid(format!("feature grid {} does not fit the camera", self.grid)));
        }
        frames
            .iter()
            .map(|&n| {
                if n >= g.model.latents.len() {
                    return Err(Error::Invalid(format!("frame {n} has no learned code")));
                }
                let (img, _) = render_code_image(g, g.model.latents.code(n), &self.camera, self.samples, self.bounds)?;
                Ok(FrameFeature {
                    frame: n,
                    values: downsample(&img.to_gray(), img.width, img.height, self.grid),
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || self.min_pts == 0 {
            return Err(Error::Invalid(format!("dbscan needs eps > 0 and min_pts >= 1, got {self:?}")));
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Median of all pairwise L2 distances (0 for fewer than two points).
pub fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(dist(&points[i], &points[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

pub const NOISE: i32 = -1;

/// Density clustering. A point is core when at least `min_pts` points
/// (itself included) lie within `eps`; clusters are grown from cores in index
/// order. Returns one label per point, [`NOISE`] for unclustered points.
pub fn dbscan(points: &[Vec<f64>], params: DbscanParams) -> Result<Vec<i32>> {
    params.validate()?;
    let n = points.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist(&points[i], &points[j]) <= params.eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= params.min_pts).collect();
    let mut labels = vec![NOISE; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i] != NOISE || !core[i] {
            continue;
        }
        labels[i] = next;
        let mut stack = vec![i];
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                if labels[q] == NOISE {
                    labels[q] = next;
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
        next += 1;
    }
    Ok(labels)
}

/// Per cluster (in label order), the frame whose feature is nearest the
/// cluster mean; ties go to the lowest frame index.
pub fn select_anchors(features: &[FrameFeature], labels: &[i32]) -> Result<Vec<usize>> {
    if features.len() != labels.len() {
        return Err(Error::Dim("one label per feature required".into()));
    }
    let k = labels.iter().copied().max().unwrap_or(NOISE);
    if k < 0 {
        return Err(Error::NoAnchors);
    }
    let mut anchors = Vec::with_capacity(k as usize + 1);
    for c in 0..=k {
        let members: Vec<&FrameFeature> = features.iter().zip(labels).filter(|(_, &l)| l == c).map(|(f, _)| f).collect();
        let dim = members[0].values.len();
        let mut mean = vec![0.0; dim];
        for m in &members {
            mean.iter_mut().zip(&m.values).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|a| *a /= members.len() as f64);
        let best = members
            .iter()
            .map(|m| (dist(&m.values, &mean), m.frame))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("cluster has members");
        anchors.push(best.1);
    }
    Ok(anchors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSelection {
    pub features: Vec<FrameFeature>,
    pub labels: Vec<i32>,
    pub eps: f64,
    pub anchors: Vec<usize>,
}

/// Full pipeline with `eps = eps_scale * median pairwise feature distance`.
pub fn choose_anchors(
    g: &SceneManipulator,
    extractor: &dyn FeatureExtractor,
    frames: &[usize],
    eps_scale: f64,
    min_pts: usize,
) -> Result<AnchorSelection> {
    let features = extractor.extract(g, frames)?;
    let pts: Vec<Vec<f64>> = features.iter().map(|f| f.values.clone()).collect();
    let eps = eps_scale * median_pairwise_distance(&pts);
    // identical features: everything is one cluster
    let eps = if eps > 0.0 { eps } else { f64::MIN_POSITIVE };
    let labels = dbscan(&pts, DbscanParams { eps, min_pts })?;
    let anchors = select_anchors(&features, &labels)?;
    Ok(AnchorSelection {
        features,
        labels,
        eps,
        anchors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn dbscan_examples() {
        let l = dbscan(&pts(&[0.0, 0.1, 0.2, 5.0, 5.1]), DbscanParams { eps: 0.5, min_pts: 2 }).unwrap();
        assert_eq!(l, vec![0, 0, 0, 1, 1]);
        let l = dbscan(&pts(&[1.0; 4]), DbscanParams { eps: 0.1, min_pts: 3 }).unwrap();
        assert_eq!(l, vec![0; 4]);
        let l = dbscan(&pts(&[0.0, 0.1, 9.0]), DbscanParams { eps: 0.5, min_pts: 2 }).unwrap();
        assert_eq!(l[2], NOISE);
        assert!(dbscan(&pts(&[0.0]), DbscanParams { eps: 0.0, min_pts: 2 }).is_err());
    }

    #[test]
    fn anchors_pick_nearest_to_mean_with_tie_break() {
        let f: Vec<FrameFeature> = [0.0, 1.0, 2.0, 10.0, 11.0]
            .iter()
            .enumerate()
            .map(|(i, &x)| FrameFeature {
                frame: i + 10,
                values: vec![x],
            })
            .collect();
        let a = select_anchors(&f, &[0, 0, 0, 1, 1]).unwrap();
        // cluster 1 mean 10.5 is equidistant from both members
        assert_eq!(a, vec![11, 13]);
        assert!(matches!(select_anchors(&f, &[NOISE; 5]), Err(Error::NoAnchors)));
    }

    #[test]
    fn downsample_averages_blocks() {
        let gray: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let d = downsample(&gray, 4, 4, 2);
        assert_eq!(d, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn median_distance() {
        assert_eq!(median_pairwise_distance(&pts(&[0.0, 1.0, 3.0])), 2.0);
        assert_eq!(median_pairwise_distance(&pts(&[0.0])), 0.0);
    }
}
