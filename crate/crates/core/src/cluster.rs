//! Catheter extraction from a frame given an aorta segmentation: keep the
//! bright pixels inside the vessel, split them with 2-means, and pick the
//! most compact cluster.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LEVEL: f64 = 0.70;
pub const DEFAULT_K: usize = 2;
pub const MAX_ITERATIONS: usize = 100;
/// Independent k-means++ restarts; the lowest objective wins.
pub const RESTARTS: usize = 10;

/// Pixel coordinates `(x, y)` inside a `width x height` image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSet {
    pub width: usize,
    pub height: usize,
    pub points: Vec<(usize, usize)>,
}

impl PointSet {
    pub fn new(width: usize, height: usize, points: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.0 >= width || p.1 >= height) {
            return Err(Error::contract(format!("point {p:?} outside {width}x{height}")));
        }
        Ok(PointSet { width, height, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|&(x, y)| [x as f64, y as f64]).collect()
    }
}

fn image_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        ref s => Err(Error::dim(format!("{what} must be [H, W], got {s:?}"))),
    }
}

/// Masked pixels whose intensity is at least `level` times the brightest
/// masked pixel.
pub fn threshold_in_mask(image: &Tensor, aorta_mask: &Tensor, level: f64) -> Result<PointSet> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::contract(format!("threshold level {level} not in (0, 1)")));
    }
    let (h, w) = image_dims(image, "image")?;
    if image_dims(aorta_mask, "aorta mask")? != (h, w) {
        return Err(Error::dim(format!(
            "image {:?} vs aorta mask {:?}",
            image.shape(),
            aorta_mask.shape()
        )));
    }
    let inside: Vec<usize> = (0..h * w).filter(|&i| aorta_mask.data()[i] > 0.5).collect();
    if inside.is_empty() {
        return Err(Error::BaselineInapplicable("aorta mask is empty".into()));
    }
    let px = image.data();
    let max = inside.iter().map(|&i| px[i] as f64).fold(f64::NEG_INFINITY, f64::max);
    let cut = level * max;
    let points = inside
        .into_iter()
        .filter(|&i| px[i] as f64 >= cut)
        .map(|i| (i % w, i / w))
        .collect();
    PointSet::new(w, h, points)
}

/// Outcome of a K-means run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    /// Population `(var_x, var_y)` per cluster.
    pub variances: Vec<[f64; 2]>,
    pub var_rms: Vec<f64>,
    pub sizes: Vec<usize>,
    pub iterations: usize,
    /// Within-cluster sum of squares after seeding and after each Lloyd
    /// update.
    pub objective_trace: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&0.0)
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a == cluster)
            .map(|(i, _)| i)
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> usize {
    let mut best = 0;
    for (j, &c) in centroids.iter().enumerate().skip(1) {
        if dist2(p, c) < dist2(p, centroids[best]) {
            best = j;
        }
    }
    best
}

fn wcss(points: &[[f64; 2]], assign: &[usize], centroids: &[[f64; 2]]) -> f64 {
    points.iter().zip(assign).map(|(&p, &a)| dist2(p, centroids[a])).sum()
}

fn seed_plus_plus(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|&p| centroids.iter().map(|&c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if r < di {
                    idx = i;
                    break;
                }
                r -= di;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick]);
    }
    centroids
}

/// Population variance along x and y.
pub fn axis_variances(points: &[[f64; 2]]) -> [f64; 2] {
    if points.is_empty() {
        return [0.0, 0.0];
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    [
        points.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / n,
        points.iter().map(|p| (p[1] - my).powi(2)).sum::<f64>() / n,
    ]
}

/// `sqrt(var_x^2 + var_y^2)`.
pub fn var_rms(points: &[[f64; 2]]) -> f64 {
    let [vx, vy] = axis_variances(points);
    (vx * vx + vy * vy).sqrt()
}

/// K-means++ seeding followed by Lloyd iterations until the assignment
/// stops changing or [`MAX_ITERATIONS`] is reached, repeated [`RESTARTS`]
/// times from one seeded stream.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64) -> Result<ClusterResult> {
    if k == 0 || points.len() < k {
        return Err(Error::BaselineInapplicable(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = lloyd(points, k, &mut rng);
    for _ in 1..RESTARTS {
        let r = lloyd(points, k, &mut rng);
        if r.objective() < best.objective() {
            best = r;
        }
    }
    Ok(best)
}

fn lloyd(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> ClusterResult {
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assign: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
    let mut trace = vec![wcss(points, &assign, &centroids)];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sum = vec![[0.0f64; 2]; k];
        let mut count = vec![0usize; k];
        for (&p, &a) in points.iter().zip(&assign) {
            sum[a][0] += p[0];
            sum[a][1] += p[1];
            count[a] += 1;
        }
        for j in 0..k {
            // an emptied cluster keeps its previous centroid
            if count[j] > 0 {
                centroids[j] = [sum[j][0] / count[j] as f64, sum[j][1] / count[j] as f64];
            }
        }
        trace.push(wcss(points, &assign, &centroids));
        let next: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    let mut variances = Vec::with_capacity(k);
    let mut sizes = Vec::with_capacity(k);
    for j in 0..k {
        let members: Vec<[f64; 2]> = points
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == j)
            .map(|(&p, _)| p)
            .collect();
        sizes.push(members.len());
        variances.push(axis_variances(&members));
    }
    let var_rms = variances.iter().map(|[x, y]| (x * x + y * y).sqrt()).collect();
    ClusterResult {
        assignments: assign,
        centroids,
        variances,
        var_rms,
        sizes,
        iterations,
        objective_trace: trace,
    }
}

/// Index of the most compact non-empty cluster. Ties go to the smaller
/// cluster, then the lower index.
pub fn select_cluster(result: &ClusterResult) -> usize {
    (0..result.k())
        .filter(|&j| result.sizes[j] > 0)
        .min_by(|&a, &b| {
            result.var_rms[a]
                .total_cmp(&result.var_rms[b])
                .then(result.sizes[a].cmp(&result.sizes[b]))
                .then(a.cmp(&b))
        })
        .unwrap_or(0)
}

/// The selected cluster and its points rasterized as a binary `[H, W]` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub cluster: usize,
    pub centroid: [f64; 2],
    pub var_rms: f64,
    pub mask: Tensor,
}

pub fn select_catheter(points: &PointSet, result: &ClusterResult) -> Result<Selection> {
    if result.assignments.len() != points.len() {
        return Err(Error::contract(format!(
            "{} assignments for {} points",
            result.assignments.len(),
            points.len()
        )));
    }
    let cluster = select_cluster(result);
    let mut mask = Tensor::zeros([points.height, points.width]);
    for i in result.members(cluster) {
        let (x, y) = points.points[i];
        mask.data_mut()[y * points.width + x] = 1.0;
    }
    Ok(Selection {
        cluster,
        centroid: result.centroids[cluster],
        var_rms: result.var_rms[cluster],
        mask,
    })
}

/// Threshold, cluster, select: the whole per-frame baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutput {
    pub points: PointSet,
    pub clusters: ClusterResult,
    pub selection: Selection,
}

pub fn run_baseline(image: &Tensor, aorta_mask: &Tensor, level: f64, seed: u64) -> Result<BaselineOutput> {
    let points = threshold_in_mask(image, aorta_mask, level)?;
    let clusters = kmeans(&points.coords(), DEFAULT_K, seed)?;
    let selection = select_catheter(&points, &clusters)?;
    Ok(BaselineOutput {
        points,
        clusters,
        selection,
    })
}
