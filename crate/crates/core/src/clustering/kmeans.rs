use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

// Fixed reduction granularity: partial sums are formed per chunk and combined
// in chunk order, so results do not depend on the worker count.
const CHUNK: usize = 512;

const CENTROID_MAGIC: &[u8; 8] = b"FSEGCENT";
const ASSIGN_MAGIC: &[u8; 8] = b"FSEGASGN";
const FORMAT_VERSION: u32 = 1;
const TRANSFER_PASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
}

impl KMeansParams {
    pub const DEFAULT_MAX_ITERS: usize = 100;
    pub const DEFAULT_TOL: f64 = 1e-4;

    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: Self::DEFAULT_MAX_ITERS,
            tol: Self::DEFAULT_TOL,
        }
    }
}

/// `k` centroids of dimension `dim`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    dim: usize,
    values: Vec<f64>,
}

impl Centroids {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(
                "centroid buffer must hold k >= 1 vectors of positive dim".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroids".into()));
        }
        Ok(Self { dim, values })
    }

    pub fn k(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// Binary form: magic, version, k, dim, then `k * dim` little-endian f32.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(20 + self.values.len() * 4);
        out.extend_from_slice(CENTROID_MAGIC);
        for w in [FORMAT_VERSION, self.k() as u32, self.dim as u32] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let words = read_header(&bytes, path, CENTROID_MAGIC, "FSEGCENT", 2)?;
        let (k, dim) = (words[0] as usize, words[1] as usize);
        let payload = &bytes[20..];
        if payload.len() != k * dim * 4 {
            return Err(Error::Truncated {
                path: path.to_owned(),
                expected: k * dim * 4,
                found: payload.len(),
            });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(dim, values)
    }
}

fn read_header(
    bytes: &[u8],
    path: &Path,
    magic: &[u8; 8],
    name: &'static str,
    words: usize,
) -> Result<Vec<u32>> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected: name,
        });
    }
    let need = 12 + 4 * words;
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected: need,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    if word(0) != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_owned(),
            version: word(0),
        });
    }
    Ok((1..=words).map(word).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<u32>,
    /// Total within-cluster squared distance to the returned centroids.
    pub inertia: f64,
}

impl ClusterAssignment {
    /// Binary form: magic, version, count, inertia (f64), then u32 labels.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(24 + self.labels.len() * 4);
        out.extend_from_slice(ASSIGN_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.inertia.to_le_bytes());
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let words = read_header(&bytes, path, ASSIGN_MAGIC, "FSEGASGN", 1)?;
        let n = words[0] as usize;
        if bytes.len() != 24 + 4 * n {
            return Err(Error::Truncated {
                path: path.to_owned(),
                expected: 24 + 4 * n,
                found: bytes.len(),
            });
        }
        let inertia = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let labels = bytes[24..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { labels, inertia })
    }
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Centroids,
    pub assignment: ClusterAssignment,
    /// Inertia after every assignment step, first entry from the seeding.
    pub inertia_trace: Vec<f64>,
    /// Number of update steps performed.
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i as u32, d);
        }
    }
    best
}

/// Index of the nearest centroid, lowest index on exact ties.
pub fn assign(descriptor: &[f64], centroids: &Centroids) -> Result<usize> {
    if descriptor.len() != centroids.dim() {
        return Err(Error::DimensionMismatch(format!(
            "descriptor dim {} vs centroid dim {}",
            descriptor.len(),
            centroids.dim()
        )));
    }
    Ok(nearest(descriptor, &centroids.values, centroids.dim).0 as usize)
}

fn ordered_sum(values: &[f64]) -> f64 {
    let partial: Vec<f64> = values
        .par_chunks(CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect();
    partial.iter().sum()
}

struct Lloyd<'a> {
    data: &'a [f64],
    dim: usize,
    n: usize,
    k: usize,
}

impl Lloyd<'_> {
    fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn assign_all(&self, centroids: &[f64], labels: &mut [u32], d2: &mut [f64]) -> f64 {
        labels
            .par_chunks_mut(CHUNK)
            .zip(d2.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(ci, (lab, dist))| {
                for (j, (l, d)) in lab.iter_mut().zip(dist.iter_mut()).enumerate() {
                    let (best, bd) = nearest(self.point(ci * CHUNK + j), centroids, self.dim);
                    *l = best;
                    *d = bd;
                }
            });
        ordered_sum(d2)
    }

    /// Index drawn with probability proportional to `d2`.
    fn sample_d2(&self, d2: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
        if total <= 0.0 {
            return rng.random_range(0..self.n);
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                return i;
            }
        }
        // Rounding can leave `acc` a hair below `target`; fall back to the last positive weight.
        d2.iter().rposition(|&d| d > 0.0).unwrap()
    }

    fn plus_plus(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut centroids = Vec::with_capacity(self.k * self.dim);
        let first = rng.random_range(0..self.n);
        centroids.extend_from_slice(self.point(first));
        let mut d2: Vec<f64> = (0..self.n)
            .into_par_iter()
            .map(|i| sq_dist(self.point(i), self.point(first)))
            .collect();
        for _ in 1..self.k {
            let total = ordered_sum(&d2);
            let c = self.point(self.sample_d2(&d2, total, rng)).to_vec();
            centroids.extend_from_slice(&c);
            d2.par_iter_mut().enumerate().for_each(|(i, d)| {
                let nd = sq_dist(self.point(i), &c);
                if nd < *d {
                    *d = nd;
                }
            });
        }
        centroids
    }

    /// Single-point transfers: moves a point to another cluster whenever that
    /// lowers the total within-cluster sum of squares, updating the two means
    /// immediately. Runs up to `max_passes` sweeps in point order; returns
    /// whether anything moved. Every move strictly lowers the objective, and a
    /// transfer-stable partition is also stable under Lloyd reassignment.
    fn transfer_passes(&self, labels: &mut [u32], max_passes: usize) -> bool {
        let (k, dim) = (self.k, self.dim);
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            counts[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(self.point(i)) {
                *s += v;
            }
        }
        let mut means = vec![0.0f64; k * dim];
        let refresh = |means: &mut [f64], sums: &[f64], counts: &[usize], c: usize| {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (m, s) in means[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *m = s * inv;
                }
            }
        };
        for c in 0..k {
            refresh(&mut means, &sums, &counts, c);
        }

        let mut any = false;
        for _ in 0..max_passes {
            let mut moved = false;
            for i in 0..self.n {
                let a = labels[i] as usize;
                let na = counts[a];
                if na < 2 {
                    continue;
                }
                let x = self.point(i);
                let removal = na as f64 / (na - 1) as f64 * sq_dist(x, &means[a * dim..(a + 1) * dim]);
                let mut best: Option<(usize, f64)> = None;
                for b in (0..k).filter(|&b| b != a) {
                    let nb = counts[b] as f64;
                    let cost = nb / (nb + 1.0) * sq_dist(x, &means[b * dim..(b + 1) * dim]);
                    if best.is_none_or(|(_, bc)| cost < bc) {
                        best = Some((b, cost));
                    }
                }
                let Some((b, cost)) = best else { continue };
                // Relative margin keeps rounding noise from triggering moves.
                if cost < removal * (1.0 - 1e-12) {
                    for j in 0..dim {
                        sums[a * dim + j] -= x[j];
                        sums[b * dim + j] += x[j];
                    }
                    counts[a] -= 1;
                    counts[b] += 1;
                    refresh(&mut means, &sums, &counts, a);
                    refresh(&mut means, &sums, &counts, b);
                    labels[i] = b as u32;
                    moved = true;
                }
            }
            any |= moved;
            if !moved {
                break;
            }
        }
        any
    }

    /// Recomputes means; returns per-cluster counts.
    fn update(&self, labels: &[u32], centroids: &mut [f64]) -> Vec<usize> {
        let (k, dim) = (self.k, self.dim);
        let partials: Vec<(Vec<f64>, Vec<usize>)> = labels
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, lab)| {
                let mut sums = vec![0.0f64; k * dim];
                let mut counts = vec![0usize; k];
                for (j, &l) in lab.iter().enumerate() {
                    let l = l as usize;
                    counts[l] += 1;
                    for (s, v) in sums[l * dim..(l + 1) * dim]
                        .iter_mut()
                        .zip(self.point(ci * CHUNK + j))
                    {
                        *s += v;
                    }
                }
                (sums, counts)
            })
            .collect();
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (ps, pc) in partials {
            sums.iter_mut().zip(ps).for_each(|(s, p)| *s += p);
            counts.iter_mut().zip(pc).for_each(|(c, p)| *c += p);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }
        counts
    }

    /// Moves each empty centroid onto the point farthest from its own centroid,
    /// never taking the last member of a cluster. Returns whether any moved.
    fn reseed_empty(&self, labels: &mut [u32], counts: &mut [usize], centroids: &mut [f64]) -> bool {
        let mut moved = false;
        for empty in 0..self.k {
            if counts[empty] > 0 {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for i in 0..self.n {
                let l = labels[i] as usize;
                if counts[l] < 2 {
                    continue;
                }
                let d = sq_dist(self.point(i), &centroids[l * self.dim..(l + 1) * self.dim]);
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((i, d));
                }
            }
            let Some((i, _)) = best else { break };
            let donor = labels[i] as usize;
            counts[donor] -= 1;
            counts[empty] = 1;
            labels[i] = empty as u32;
            let p = self.point(i).to_vec();
            centroids[empty * self.dim..(empty + 1) * self.dim].copy_from_slice(&p);
            moved = true;
        }
        moved
    }
}

/// Lloyd's algorithm with k-means++ seeding, refined by single-point
/// transfers.
///
/// `k` larger than the number of points is clamped (with a warning). Empty
/// clusters are re-seeded from the farthest point. Lloyd iteration settles
/// when the largest centroid shift falls below `tol` or assignments stop
/// changing; transfer passes then try to improve the partition, and Lloyd
/// resumes if they moved anything. Every update step counts against
/// `max_iters`.
pub fn kmeans<V: AsRef<[f64]>>(points: &[V], params: &KMeansParams) -> Result<KMeansFit> {
    if points.is_empty() {
        return Err(Error::EmptyInput("k-means needs at least one point".into()));
    }
    if params.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let dim = points[0].as_ref().len();
    if dim == 0 {
        return Err(Error::InvalidArgument("points must have positive dimension".into()));
    }
    let mut data = Vec::with_capacity(points.len() * dim);
    for p in points {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "point dim {} vs {dim}",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("k-means input".into()));
        }
        data.extend_from_slice(p);
    }
    let n = points.len();
    let k = if params.k > n {
        log::warn!("k = {} exceeds {} points; clamping", params.k, n);
        n
    } else {
        params.k
    };

    let lloyd = Lloyd {
        data: &data,
        dim,
        n,
        k,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = lloyd.plus_plus(&mut rng);
    let mut labels = vec![0u32; n];
    let mut d2 = vec![0.0f64; n];
    let mut inertia = lloyd.assign_all(&centroids, &mut labels, &mut d2);
    let mut trace = vec![inertia];
    let mut iterations = 0;

    while iterations < params.max_iters {
        iterations += 1;
        let previous = centroids.clone();
        let mut counts = lloyd.update(&labels, &mut centroids);
        let reseeded = lloyd.reseed_empty(&mut labels, &mut counts, &mut centroids);
        let shift = previous
            .chunks_exact(dim)
            .zip(centroids.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b))
            .fold(0.0f64, f64::max)
            .sqrt();
        let before = labels.clone();
        inertia = lloyd.assign_all(&centroids, &mut labels, &mut d2);
        trace.push(inertia);
        if shift < params.tol || (!reseeded && labels == before) {
            // Lloyd has settled; try to escape the local optimum with transfers.
            if iterations >= params.max_iters || !lloyd.transfer_passes(&mut labels, TRANSFER_PASSES) {
                break;
            }
            iterations += 1;
            let mut counts = lloyd.update(&labels, &mut centroids);
            lloyd.reseed_empty(&mut labels, &mut counts, &mut centroids);
            inertia = lloyd.assign_all(&centroids, &mut labels, &mut d2);
            trace.push(inertia);
        }
    }

    Ok(KMeansFit {
        centroids: Centroids {
            dim,
            values: centroids,
        },
        assignment: ClusterAssignment { labels, inertia },
        inertia_trace: trace,
        iterations,
    })
}
