//! CT volumes, the RVOL container, and the standardization pipeline
//! (resample to a fixed spacing, clip/normalize HU, center crop/pad).
//!
//! Coordinates follow the voxel-center convention `coord(i) = i * spacing`,
//! with the origin shared at the first voxel center.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RVOL_MAGIC: &[u8; 4] = b"RVOL";
pub const RVOL_VERSION: u16 = 1;
const RVOL_HEADER_LEN: usize = 4 + 2 + 3 * 4 + 3 * 4;

/// HU value used for samples that fall outside the source grid.
pub const AIR_HU: i16 = -1000;

/// A voxel grid of Hounsfield units with physical spacing in millimeters.
/// Voxels are stored x-fastest, then y, then z.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<i16>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<i16>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::format("volume", format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::format("volume", format!("spacing must be > 0, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::format(
                "volume",
                format!("expected {n} voxels for dims {dims:?}, got {}", voxels.len()),
            ));
        }
        Ok(Self { dims, spacing, voxels })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: i16) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [i16] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn min_max(&self) -> (i16, i16) {
        let min = *self.voxels.iter().min().expect("non-empty volume");
        let max = *self.voxels.iter().max().expect("non-empty volume");
        (min, max)
    }
}

pub fn write_rvol(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_rvol(v, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_rvol<W: Write>(v: &Volume, w: &mut W) -> std::io::Result<()> {
    w.write_all(RVOL_MAGIC)?;
    w.write_u16::<LittleEndian>(RVOL_VERSION)?;
    for &d in &v.dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &s in &v.spacing {
        w.write_f32::<LittleEndian>(s)?;
    }
    let mut payload = Vec::with_capacity(v.voxels.len() * 2);
    for &hu in &v.voxels {
        payload.extend_from_slice(&hu.to_le_bytes());
    }
    w.write_all(&payload)
}

pub fn read_rvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_rvol(&bytes)
}

pub fn decode_rvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < RVOL_HEADER_LEN {
        return Err(Error::format(
            "rvol header",
            format!("file is {} bytes, header needs {RVOL_HEADER_LEN}", bytes.len()),
        ));
    }
    if &bytes[..4] != RVOL_MAGIC {
        return Err(Error::format("rvol magic", format!("expected \"RVOL\", found {:?}", &bytes[..4])));
    }
    let mut r = &bytes[4..RVOL_HEADER_LEN];
    let version = r.read_u16::<LittleEndian>().expect("header length checked");
    if version != RVOL_VERSION {
        return Err(Error::format("rvol version", format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for (axis, d) in dims.iter_mut().enumerate() {
        *d = r.read_u32::<LittleEndian>().expect("header length checked") as usize;
        if *d == 0 {
            return Err(Error::format("rvol dims", format!("n{} must be positive", ["x", "y", "z"][axis])));
        }
    }
    let mut spacing = [0f32; 3];
    for (axis, s) in spacing.iter_mut().enumerate() {
        *s = r.read_f32::<LittleEndian>().expect("header length checked");
        if !(*s > 0.0) || !s.is_finite() {
            return Err(Error::format(
                "rvol spacing",
                format!("s{} must be positive, got {s}", ["x", "y", "z"][axis]),
            ));
        }
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::format("rvol dims", format!("{dims:?} overflows")))?;
    let payload = &bytes[RVOL_HEADER_LEN..];
    if payload.len() < n * 2 {
        return Err(Error::format(
            "rvol payload",
            format!("truncated: expected {} bytes, found {}", n * 2, payload.len()),
        ));
    }
    if payload.len() > n * 2 {
        return Err(Error::format(
            "rvol payload",
            format!("trailing bytes: expected {} bytes, found {}", n * 2, payload.len()),
        ));
    }
    let voxels = payload
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Volume::new(dims, spacing, voxels)
}

/// Output size for resampling one axis: `round(n * s_in / s_out)`, at least 1.
pub fn resampled_len(n: usize, s_in: f32, s_out: f32) -> usize {
    ((n as f64 * s_in as f64 / s_out as f64).round() as usize).max(1)
}

/// Trilinear resampling onto a new spacing. Samples outside the physical
/// extent of the source grid take [`AIR_HU`]; outputs are rounded to the
/// nearest integer HU.
pub fn resample_trilinear(v: &Volume, target: [f32; 3]) -> Result<Volume> {
    if target.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!("target spacing must be > 0, got {target:?}")));
    }
    let din = v.dims;
    let dout: [usize; 3] = std::array::from_fn(|a| resampled_len(din[a], v.spacing[a], target[a]));

    // Per-axis lookup: (lower index, upper index, weight of upper, in-bounds).
    let axis_taps = |a: usize| -> Vec<Option<(usize, usize, f64)>> {
        (0..dout[a])
            .map(|j| {
                let pos = j as f64 * target[a] as f64 / v.spacing[a] as f64;
                let last = (din[a] - 1) as f64;
                // A voxel covers half a spacing on either side of its center;
                // samples in that margin clamp to the edge voxel.
                if pos < 0.0 || pos > last + 0.5 + 1e-9 {
                    return None;
                }
                let pos = pos.min(last);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(din[a] - 1);
                Some((lo, hi, pos - lo as f64))
            })
            .collect()
    };
    let (tx, ty, tz) = (axis_taps(0), axis_taps(1), axis_taps(2));

    let mut out = Vec::with_capacity(dout[0] * dout[1] * dout[2]);
    for zt in &tz {
        for yt in &ty {
            for xt in &tx {
                let (Some(xt), Some(yt), Some(zt)) = (xt, yt, zt) else {
                    out.push(AIR_HU);
                    continue;
                };
                let mut acc = 0.0f64;
                for (zi, wz) in [(zt.0, 1.0 - zt.2), (zt.1, zt.2)] {
                    if wz == 0.0 {
                        continue;
                    }
                    for (yi, wy) in [(yt.0, 1.0 - yt.2), (yt.1, yt.2)] {
                        if wy == 0.0 {
                            continue;
                        }
                        for (xi, wx) in [(xt.0, 1.0 - xt.2), (xt.1, xt.2)] {
                            if wx == 0.0 {
                                continue;
                            }
                            acc += wx * wy * wz * v.get(xi, yi, zi) as f64;
                        }
                    }
                }
                out.push(acc.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
            }
        }
    }
    Volume::new(dout, target, out)
}

/// Real-valued grid in [0, 1], x-fastest like [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedGrid<T = f32> {
    pub dims: [usize; 3],
    pub values: Vec<T>,
}

impl<T: Copy> NormalizedGrid<T> {
    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.values[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl NormalizedGrid<f64> {
    pub fn to_f32(&self) -> NormalizedGrid<f32> {
        NormalizedGrid {
            dims: self.dims,
            values: self.values.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// `(clamp(v, lo, hi) - lo) / (hi - lo)`.
pub fn clip_normalize_hu(v: &Volume, window: (f64, f64)) -> Result<NormalizedGrid<f64>> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::Config(format!("HU window requires lo < hi, got ({lo}, {hi})")));
    }
    let span = hi - lo;
    let values = v
        .voxels
        .iter()
        .map(|&hu| ((hu as f64).clamp(lo, hi) - lo) / span)
        .collect();
    Ok(NormalizedGrid { dims: v.dims, values })
}

/// Per-axis offset of the kept window: positive means crop start in the
/// input, negative means padding before the input.
fn crop_offset(input: usize, target: usize) -> isize {
    if input >= target {
        ((input - target) / 2) as isize
    } else {
        // Extra padding voxel goes on the high side.
        -(((target - input) / 2) as isize)
    }
}

pub fn center_crop_pad<T: Copy>(g: &NormalizedGrid<T>, target: [usize; 3], fill: T) -> Result<NormalizedGrid<T>> {
    if target.iter().any(|&t| t == 0) {
        return Err(Error::Config(format!("target dims must be >= 1, got {target:?}")));
    }
    let off: [isize; 3] = std::array::from_fn(|a| crop_offset(g.dims[a], target[a]));
    let src = |a: usize, i: usize| -> Option<usize> {
        let s = i as isize + off[a];
        (s >= 0 && (s as usize) < g.dims[a]).then_some(s as usize)
    };
    let mut values = Vec::with_capacity(target[0] * target[1] * target[2]);
    for z in 0..target[2] {
        for y in 0..target[1] {
            for x in 0..target[0] {
                values.push(match (src(0, x), src(1, y), src(2, z)) {
                    (Some(sx), Some(sy), Some(sz)) => g.get(sx, sy, sz),
                    _ => fill,
                });
            }
        }
    }
    Ok(NormalizedGrid { dims: target, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_spacing_mm: [f32; 3],
    pub hu_window: (f64, f64),
    pub target_dims: [usize; 3],
    pub pad_fill: f64,
}

impl PreprocessConfig {
    pub fn toy() -> Self {
        Self {
            target_spacing_mm: [1.5, 1.5, 3.0],
            hu_window: (-1000.0, 1000.0),
            target_dims: [64, 64, 32],
            pad_fill: 0.0,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            target_dims: [224, 224, 112],
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.hu_window;
        if !(lo < hi) {
            return Err(Error::Config(format!("preprocess.hu_window: lo < hi required, got ({lo}, {hi})")));
        }
        if self.target_spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "preprocess.target_spacing_mm must be positive, got {:?}",
                self.target_spacing_mm
            )));
        }
        if self.target_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "preprocess.target_dims must be >= 1, got {:?}",
                self.target_dims
            )));
        }
        if !(0.0..=1.0).contains(&self.pad_fill) {
            return Err(Error::Config(format!("preprocess.pad_fill must lie in [0, 1], got {}", self.pad_fill)));
        }
        Ok(())
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Resample, then clip/normalize, then center crop/pad.
pub fn preprocess(v: &Volume, cfg: &PreprocessConfig) -> Result<NormalizedGrid<f64>> {
    cfg.validate()?;
    let resampled = if v.spacing == cfg.target_spacing_mm {
        v.clone()
    } else {
        resample_trilinear(v, cfg.target_spacing_mm)?
    };
    let normalized = clip_normalize_hu(&resampled, cfg.hu_window)?;
    center_crop_pad(&normalized, cfg.target_dims, cfg.pad_fill)
}
