//! Seismic volumes, cross-line slicing, position pseudo-labels and test splits.
//!
//! Axis convention: volumes are indexed `[inline, crossline, depth]`. A cross-line
//! slice is the `(inline, depth)` plane at a fixed cross-line index, presented with
//! `H = inline` and `W = depth`.

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy::{self, NpyArray};
use crate::scalar::Scalar;

/// 3D amplitude cube indexed `[inline, crossline, depth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeismicVolume<T> {
    amplitudes: Array3<T>,
    value_range: (T, T),
}

impl<T: Scalar> SeismicVolume<T> {
    pub fn new(amplitudes: Array3<T>) -> Result<Self> {
        if amplitudes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("amplitudes contain NaN or Inf".into()));
        }
        if amplitudes.shape().contains(&0) {
            return Err(Error::Data(format!(
                "volume dims must all be >= 1, got {:?}",
                amplitudes.shape()
            )));
        }
        let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
        for &v in amplitudes.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok(Self {
            amplitudes,
            value_range: (lo, hi),
        })
    }

    pub fn amplitudes(&self) -> &Array3<T> {
        &self.amplitudes
    }

    /// `(inline, crossline, depth)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.amplitudes.dim()
    }

    pub fn num_crosslines(&self) -> usize {
        self.amplitudes.dim().1
    }

    pub fn value_range(&self) -> (T, T) {
        self.value_range
    }

    /// Sub-volume holding the given cross-line range.
    pub fn crossline_range(&self, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.num_crosslines() {
            return Err(Error::Config(format!(
                "cross-line range {range:?} outside 0..{}",
                self.num_crosslines()
            )));
        }
        Self::new(self.amplitudes.slice(s![.., range, ..]).to_owned())
    }

    pub fn cast<U: Scalar>(&self) -> SeismicVolume<U> {
        SeismicVolume {
            amplitudes: self.amplitudes.mapv(|v| U::lit(v.as_f64())),
            value_range: (U::lit(self.value_range.0.as_f64()), U::lit(self.value_range.1.as_f64())),
        }
    }
}

/// Per-voxel facies classes, same shape as the paired amplitude volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    classes: Array3<u32>,
    num_classes: usize,
}

impl LabelVolume {
    /// Class count is inferred as `max + 1`, floored at 2.
    pub fn new(classes: Array3<u32>) -> Result<Self> {
        let max = classes.iter().copied().max().unwrap_or(0) as usize;
        Self::with_num_classes(classes, (max + 1).max(2))
    }

    pub fn with_num_classes(classes: Array3<u32>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
        }
        if classes.shape().iter().any(|&d| d == 0) {
            return Err(Error::Data(format!("label dims must all be >= 1, got {:?}", classes.shape())));
        }
        if let Some(bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { classes, num_classes })
    }

    pub fn classes(&self) -> &Array3<u32> {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.classes.dim()
    }

    pub fn crossline_range(&self, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.dims().1 {
            return Err(Error::Config(format!("cross-line range {range:?} outside 0..{}", self.dims().1)));
        }
        Self::with_num_classes(self.classes.slice(s![.., range, ..]).to_owned(), self.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Amplitude,
    Label,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedVolume<T> {
    Amplitude(SeismicVolume<T>),
    Label(LabelVolume),
}

/// Load a 3D NPY file as either an amplitude or a label volume.
pub fn load_volume<T: Scalar>(path: impl AsRef<Path>, kind: VolumeKind) -> Result<LoadedVolume<T>> {
    let path = path.as_ref();
    let arr = npy::read_npy(path)?;
    if arr.shape().len() != 3 {
        return Err(Error::Format(format!(
            "{}: expected a 3-dimensional array, found shape {:?}",
            path.display(),
            arr.shape()
        )));
    }
    let ctx = |e: Error| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    };
    match kind {
        VolumeKind::Amplitude => {
            let data = match arr {
                NpyArray::Real(a) => a.mapv(T::lit),
                NpyArray::Int(a) => a.mapv(|v| T::lit(v as f64)),
            };
            let data = data.into_dimensionality().expect("checked rank");
            SeismicVolume::new(data).map(LoadedVolume::Amplitude).map_err(ctx)
        }
        VolumeKind::Label => {
            let data = match arr {
                NpyArray::Int(a) => a
                    .iter()
                    .map(|&v| u32::try_from(v).map_err(|_| Error::Data(format!("label value {v} is not a class index"))))
                    .collect::<Result<Vec<_>>>()
                    .map(|v| (a.raw_dim(), v)),
                NpyArray::Real(a) => a
                    .iter()
                    .map(|&v| {
                        if v.is_finite() && v.fract() == 0.0 && v >= 0.0 && v <= u32::MAX as f64 {
                            Ok(v as u32)
                        } else {
                            Err(Error::Data(format!("label value {v} is not a non-negative integer")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(|v| (a.raw_dim(), v)),
            }
            .map_err(ctx)?;
            let classes = ndarray::ArrayD::from_shape_vec(data.0, data.1)
                .expect("same element count")
                .into_dimensionality()
                .expect("checked rank");
            LabelVolume::new(classes).map(LoadedVolume::Label).map_err(ctx)
        }
    }
}

pub fn load_amplitude<T: Scalar>(path: impl AsRef<Path>) -> Result<SeismicVolume<T>> {
    match load_volume(path, VolumeKind::Amplitude)? {
        LoadedVolume::Amplitude(v) => Ok(v),
        LoadedVolume::Label(_) => unreachable!(),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match load_volume::<f32>(path, VolumeKind::Label)? {
        LoadedVolume::Label(v) => Ok(v),
        LoadedVolume::Amplitude(_) => unreachable!(),
    }
}

/// Write amplitudes as `<f4` NPY.
pub fn save_amplitude<T: Scalar>(path: impl AsRef<Path>, vol: &SeismicVolume<T>) -> Result<()> {
    let a = vol.amplitudes();
    npy::write_f32(path, a.shape(), a.iter().map(|v| v.as_f64() as f32))
}

/// Write classes as `<u4` NPY.
pub fn save_labels(path: impl AsRef<Path>, vol: &LabelVolume) -> Result<()> {
    let a = vol.classes();
    npy::write_u32(path, a.shape(), a.iter().copied())
}

/// One cross-line section, `H = inline`, `W = depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLineSlice<T> {
    pub image: Array2<T>,
    pub crossline_index: usize,
    pub mask: Option<Array2<u32>>,
}

impl<T: Scalar> CrossLineSlice<T> {
    pub fn new(image: Array2<T>, crossline_index: usize, mask: Option<Array2<u32>>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.dim() != image.dim() {
                return Err(Error::Data(format!(
                    "mask shape {:?} differs from image shape {:?}",
                    m.dim(),
                    image.dim()
                )));
            }
        }
        Ok(Self {
            image,
            crossline_index,
            mask,
        })
    }

    pub fn image(&self) -> ArrayView2<'_, T> {
        self.image.view()
    }
}

/// Every cross-line of `vol` in ascending index order, with masks when labels are given.
pub fn extract_crosslines<T: Scalar>(
    vol: &SeismicVolume<T>,
    labels: Option<&LabelVolume>,
) -> Result<Vec<CrossLineSlice<T>>> {
    if let Some(l) = labels {
        if l.dims() != vol.dims() {
            return Err(Error::Data(format!(
                "label volume shape {:?} differs from amplitude shape {:?}",
                l.dims(),
                vol.dims()
            )));
        }
    }
    Ok((0..vol.num_crosslines())
        .map(|k| CrossLineSlice {
            image: vol.amplitudes.index_axis(Axis(1), k).to_owned(),
            crossline_index: k,
            mask: labels.map(|l| l.classes.index_axis(Axis(1), k).to_owned()),
        })
        .collect())
}

/// Re-assemble a volume from slices in cross-line order (inverse of [`extract_crosslines`]).
pub fn stack_crosslines<T: Scalar>(slices: &[CrossLineSlice<T>]) -> Result<SeismicVolume<T>> {
    let views: Vec<_> = slices.iter().map(|s| s.image.view()).collect();
    let stacked = ndarray::stack(Axis(1), &views).map_err(|e| Error::Data(format!("cannot stack slices: {e}")))?;
    SeismicVolume::new(stacked)
}

/// Position pseudo-label of every slice in a volume partitioned into `num_partitions` runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeLabelAssignment {
    pub num_slices: usize,
    pub num_partitions: usize,
    pub labels: Vec<usize>,
}

impl VolumeLabelAssignment {
    /// Sizes of each partition, in label order.
    pub fn partition_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_partitions];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn label_of(&self, slice: usize) -> usize {
        self.labels[slice]
    }
}

/// Label slice `i` with `floor(i * N / S)`: contiguous runs whose sizes differ by at most one.
pub fn assign_volume_labels(num_slices: usize, num_partitions: usize) -> Result<VolumeLabelAssignment> {
    if num_partitions < 1 || num_partitions > num_slices {
        return Err(Error::Config(format!(
            "num_partitions must satisfy 1 <= N <= {num_slices} (number of slices), got {num_partitions}"
        )));
    }
    let (s, n) = (num_slices as u128, num_partitions as u128);
    let labels = (0..s).map(|i| (i * n / s) as usize).collect();
    Ok(VolumeLabelAssignment {
        num_slices,
        num_partitions,
        labels,
    })
}

/// One evaluation split: `(volume_id, crossline_index)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub split_id: usize,
    pub crosslines: Vec<(usize, usize)>,
}

/// Concatenate volume-0 then volume-1 cross-lines and cut the sequence into equal splits.
pub fn build_test_splits(count_1: usize, count_2: usize, num_splits: usize) -> Result<Vec<SplitSpec>> {
    let total = count_1 + count_2;
    if num_splits == 0 || total == 0 || total % num_splits != 0 {
        return Err(Error::Config(format!(
            "{total} test cross-lines cannot be divided into {num_splits} equal non-empty splits"
        )));
    }
    let all: Vec<(usize, usize)> = (0..count_1)
        .map(|i| (0, i))
        .chain((0..count_2).map(|i| (1, i)))
        .collect();
    let per = total / num_splits;
    Ok(all
        .chunks(per)
        .enumerate()
        .map(|(split_id, c)| SplitSpec {
            split_id,
            crosslines: c.to_vec(),
        })
        .collect())
}

/// Write splits as a JSON array of `{"split_id", "crosslines"}` objects.
pub fn save_splits(path: impl AsRef<Path>, splits: &[SplitSpec]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(splits).expect("splits serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a split file holding either one split object or an array of them.
pub fn load_splits(path: impl AsRef<Path>) -> Result<Vec<SplitSpec>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<SplitSpec>),
        One(SplitSpec),
    }
    let splits = match serde_json::from_str::<OneOrMany>(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
    {
        OneOrMany::Many(v) => v,
        OneOrMany::One(s) => vec![s],
    };
    Ok(splits)
}

/// Mean and population standard deviation over every amplitude (single-pass Welford update).
pub fn compute_normalization_stats<T: Scalar>(vol: &SeismicVolume<T>) -> Result<(f64, f64)> {
    let mut n = 0u64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for &v in vol.amplitudes.iter() {
        let x = v.as_f64();
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    if n == 0 {
        return Err(Error::Data("empty volume".into()));
    }
    let std = (m2 / n as f64).sqrt();
    if !(std > 0.0) {
        return Err(Error::Data("volume has zero variance; cannot normalize".into()));
    }
    Ok((mean, std))
}

/// Parameters of the layered synthetic volume generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub layers: usize,
    /// `(inline, crossline, depth)`.
    pub dims: (usize, usize, usize),
    /// Depth samples of boundary shift per cross-line (half that per in-line).
    pub dip: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dims: (32, 64, 64),
            dip: 0.1,
            noise: 0.05,
            seed: 7,
        }
    }
}

/// Texture amplitude riding on each layer's base value.
const TEXTURE_AMPLITUDE: f64 = 0.25;

/// Depth-layered volume: class `k` fills the band between boundaries `k` and `k + 1`,
/// boundaries dip linearly with cross-line (and half as much with in-line).
pub fn generate_synthetic_volume<T: Scalar>(cfg: &SyntheticConfig) -> Result<(SeismicVolume<T>, LabelVolume)> {
    let (ni, nc, nd) = cfg.dims;
    if ni == 0 || nc == 0 || nd == 0 {
        return Err(Error::Config(format!("synthetic dims must be positive, got {:?}", cfg.dims)));
    }
    if cfg.layers < 2 || cfg.layers > nd {
        return Err(Error::Config(format!(
            "layer count must be in [2, depth={nd}], got {}",
            cfg.layers
        )));
    }
    if !cfg.dip.is_finite() || !cfg.noise.is_finite() || cfg.noise < 0.0 {
        return Err(Error::Config("dip must be finite and noise finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nl = cfg.layers;

    let mut base: Vec<f64> = (0..nl).map(|k| -1.0 + 2.0 * k as f64 / (nl - 1) as f64).collect();
    base.shuffle(&mut rng);
    let periods: Vec<f64> = (0..nl).map(|_| rng.random_range(4.0..10.0)).collect();

    let ci = (ni as f64 - 1.0) / 2.0;
    let cj = (nc as f64 - 1.0) / 2.0;
    let mut amps = Array3::<T>::zeros((ni, nc, nd));
    let mut classes = Array3::<u32>::zeros((ni, nc, nd));
    let mut tops = vec![0.0; nl];
    for i in 0..ni {
        for j in 0..nc {
            let shift = cfg.dip * (j as f64 - cj) + 0.5 * cfg.dip * (i as f64 - ci);
            for (k, top) in tops.iter_mut().enumerate() {
                *top = if k == 0 {
                    f64::NEG_INFINITY
                } else {
                    nd as f64 * k as f64 / nl as f64 + shift
                };
            }
            for d in 0..nd {
                let z = d as f64 + 0.5;
                let k = tops.iter().rposition(|&t| z >= t).unwrap_or(0);
                let rel = if k == 0 { z - shift } else { z - tops[k] };
                let texture = TEXTURE_AMPLITUDE * (std::f64::consts::TAU * rel / periods[k]).sin();
                let eps: f64 = if cfg.noise > 0.0 {
                    cfg.noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                classes[[i, j, d]] = k as u32;
                amps[[i, j, d]] = T::lit(base[k] + texture + eps);
            }
        }
    }
    Ok((
        SeismicVolume::new(amps)?,
        LabelVolume::with_num_classes(classes, nl)?,
    ))
}
