use crate::error::{Error, Result};
use crate::model::Proj;
use crate::tensor::{Scalar, Tensor};
use half::f16;
use rand::Rng;

/// Axis along which consecutive lines share one lookup table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupAxis {
    /// Every `group_size` consecutive rows share a LUT.
    Rows,
    /// Every `group_size` consecutive columns share a LUT.
    Cols,
}

impl GroupAxis {
    pub fn code(self) -> u8 {
        match self {
            GroupAxis::Rows => 0,
            GroupAxis::Cols => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(GroupAxis::Rows),
            1 => Ok(GroupAxis::Cols),
            _ => Err(Error::Checkpoint(format!("unknown group axis code {c}"))),
        }
    }
}

/// Default LUT-sharing axis for a projection.
pub fn default_group_axis(proj: Proj) -> GroupAxis {
    match proj {
        Proj::O | Proj::Down => GroupAxis::Rows,
        _ => GroupAxis::Cols,
    }
}

/// Storage width of LUT entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LutPrecision {
    F16,
    F32,
}

impl LutPrecision {
    pub fn bits(self) -> usize {
        match self {
            LutPrecision::F16 => 16,
            LutPrecision::F32 => 32,
        }
    }

    fn round(self, v: f64) -> f32 {
        match self {
            LutPrecision::F16 => f16::from_f64(v).to_f32(),
            LutPrecision::F32 => v as f32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PalettizeOptions {
    pub bits: u8,
    pub group_size: usize,
    pub axis: GroupAxis,
    pub kmeans_iters: usize,
    pub lut: LutPrecision,
}

impl PalettizeOptions {
    pub fn new(bits: u8, axis: GroupAxis) -> Self {
        Self {
            bits,
            group_size: 16,
            axis,
            kmeans_iters: 25,
            lut: LutPrecision::F16,
        }
    }
}

/// Grouped lookup-table quantized matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PalettizedTensor {
    pub shape: [usize; 2],
    pub bits: u8,
    pub axis: GroupAxis,
    pub group_size: usize,
    pub lut_precision: LutPrecision,
    /// One table of `2^bits` entries per group.
    pub luts: Vec<Vec<f32>>,
    /// One index per weight, row-major.
    pub indices: Vec<u8>,
    /// Squared reconstruction error per group (not serialized).
    pub group_sq_errors: Vec<f64>,
}

impl PalettizedTensor {
    pub fn n_groups(&self) -> usize {
        self.luts.len()
    }

    fn group_of(&self, r: usize, c: usize) -> usize {
        match self.axis {
            GroupAxis::Rows => r / self.group_size,
            GroupAxis::Cols => c / self.group_size,
        }
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        let [rows, cols] = self.shape;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let g = self.group_of(r, c);
                data.push(T::of(self.luts[g][self.indices[r * cols + c] as usize] as f64));
            }
        }
        Tensor::new(self.shape.to_vec(), data).expect("stored shape")
    }

    pub fn num_weights(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn index_bits(&self) -> usize {
        self.num_weights() * self.bits as usize
    }

    pub fn lut_bits(&self) -> usize {
        self.n_groups() * (1usize << self.bits) * self.lut_precision.bits()
    }

    pub fn sq_error(&self) -> f64 {
        self.group_sq_errors.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let k = 1usize << self.bits;
        if self.indices.len() != self.num_weights() || self.indices.iter().any(|&i| i as usize >= k) {
            return Err(Error::Checkpoint("palettized indices inconsistent with shape or bit width".into()));
        }
        let line = match self.axis {
            GroupAxis::Rows => self.shape[0],
            GroupAxis::Cols => self.shape[1],
        };
        if self.luts.len() != line.div_ceil(self.group_size) || self.luts.iter().any(|l| l.len() != k) {
            return Err(Error::Checkpoint("palettized LUT count or size is inconsistent".into()));
        }
        Ok(())
    }
}

/// Result of one scalar k-means problem.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Within-cluster squared error after seeding and after each iteration.
    pub objective: Vec<f64>,
}

fn nearest(sorted: &[f64], x: f64) -> usize {
    let i = sorted.partition_point(|&c| c < x);
    if i == 0 {
        0
    } else if i == sorted.len() || (x - sorted[i - 1]) <= (sorted[i] - x) {
        i - 1
    } else {
        i
    }
}

fn sse(values: &[f64], centroids: &[f64], assignment: &[usize]) -> f64 {
    values.iter().zip(assignment).map(|(v, &a)| (v - centroids[a]).powi(2)).sum()
}

/// Lloyd's algorithm on scalars with k-means++ seeding.
///
/// With at most `k` distinct values the centroids are those values, padded by
/// repeating the last one, and the fit is exact.
pub fn kmeans_1d<R: Rng + ?Sized>(values: &[f64], k: usize, iters: usize, rng: &mut R) -> Result<KMeans> {
    if values.is_empty() || k == 0 {
        return Err(Error::Invalid("k-means needs values and k >= 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("k-means input contains non-finite values".into()));
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() <= k {
        let mut centroids = distinct.clone();
        centroids.resize(k, *distinct.last().expect("non-empty"));
        let assignment = values.iter().map(|&v| nearest(&distinct, v)).collect();
        return Ok(KMeans {
            centroids,
            assignment,
            objective: vec![0.0],
        });
    }

    let mut centroids = vec![values[rng.random_range(0..values.len())]];
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = values.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            u -= d;
            if u <= 0.0 && *d > 0.0 {
                pick = i;
                break;
            }
        }
        let c = values[pick];
        centroids.push(c);
        for (di, v) in d2.iter_mut().zip(values) {
            *di = di.min((v - c).powi(2));
        }
    }
    centroids.sort_by(f64::total_cmp);
    let mut assignment: Vec<usize> = values.iter().map(|&v| nearest(&centroids, v)).collect();
    let mut objective = vec![sse(values, &centroids, &assignment)];
    for _ in 0..iters {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in values.iter().zip(&assignment) {
            sums[a] += v;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        // Means of clusters over sorted centroids stay sorted.
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]));
        let sorted: Vec<f64> = order.iter().map(|&j| centroids[j]).collect();
        centroids = sorted;
        let next: Vec<usize> = values.iter().map(|&v| nearest(&centroids, v)).collect();
        let obj = sse(values, &centroids, &next);
        let converged = next == assignment;
        assignment = next;
        objective.push(obj);
        if converged {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        objective,
    })
}

/// Palettizes a rank-2 tensor group by group. A trailing group narrower than
/// `group_size` gets its own table.
pub fn palettize<T: Scalar, R: Rng + ?Sized>(w: &Tensor<T>, opts: &PalettizeOptions, rng: &mut R) -> Result<PalettizedTensor> {
    if w.rank() != 2 {
        return Err(Error::Invalid(format!("palettize expects a matrix, got shape {:?}", w.shape())));
    }
    if !matches!(opts.bits, 2 | 4) {
        return Err(Error::Invalid(format!("palettization supports 2 or 4 bits, got {}", opts.bits)));
    }
    if opts.group_size == 0 {
        return Err(Error::Invalid("group_size must be positive".into()));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let k = 1usize << opts.bits;
    let line = match opts.axis {
        GroupAxis::Rows => rows,
        GroupAxis::Cols => cols,
    };
    let n_groups = line.div_ceil(opts.group_size);
    let data = w.data();
    let mut indices = vec![0u8; rows * cols];
    let mut luts = Vec::with_capacity(n_groups);
    let mut errs = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let lo = g * opts.group_size;
        let hi = (lo + opts.group_size).min(line);
        let positions: Vec<usize> = match opts.axis {
            GroupAxis::Rows => (lo * cols..hi * cols).collect(),
            GroupAxis::Cols => (0..rows).flat_map(|r| (lo..hi).map(move |c| r * cols + c)).collect(),
        };
        let values: Vec<f64> = positions.iter().map(|&p| data[p].as_f64()).collect();
        let km = kmeans_1d(&values, k, opts.kmeans_iters, rng)?;
        let lut: Vec<f32> = km.centroids.iter().map(|&c| opts.lut.round(c)).collect();
        let mut err = 0.0;
        for ((&p, &v), &a) in positions.iter().zip(&values).zip(&km.assignment) {
            indices[p] = a as u8;
            err += (v - lut[a] as f64).powi(2);
        }
        luts.push(lut);
        errs.push(err);
    }
    Ok(PalettizedTensor {
        shape: [rows, cols],
        bits: opts.bits,
        axis: opts.axis,
        group_size: opts.group_size,
        lut_precision: opts.lut,
        luts,
        indices,
        group_sq_errors: errs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn constant_matrix_is_exact() {
        let w = Tensor::<f32>::full([8, 32], 0.75).unwrap();
        let mut rng = SeedTree::new(1).stream("k", 0);
        let p = palettize(&w, &PalettizeOptions::new(4, GroupAxis::Cols), &mut rng).unwrap();
        assert_eq!(p.sq_error(), 0.0);
        assert!(p.luts.iter().all(|l| l.iter().all(|&v| v == 0.75)));
        assert_eq!(p.dequantize::<f32>(), w);
        p.validate().unwrap();
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let mut rng = SeedTree::new(2).stream("k", 0);
        let values: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0f64).powi(3)).collect();
        let km = kmeans_1d(&values, 4, 25, &mut rng).unwrap();
        for w in km.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", km.objective);
        }
    }

    #[test]
    fn ragged_last_group() {
        let mut rng = SeedTree::new(3).stream("k", 0);
        let w = Tensor::<f32>::from_f64([3, 20], &(0..60).map(|i| i as f64 * 0.5).collect::<Vec<_>>()).unwrap();
        let p = palettize(&w, &PalettizeOptions::new(4, GroupAxis::Cols), &mut rng).unwrap();
        assert_eq!(p.n_groups(), 2);
        p.validate().unwrap();
        assert_eq!(p.dequantize::<f32>().shape(), &[3, 20]);
    }
}
