//! Dense feature maps and region descriptors.
//!
//! A [`FeatureMap`] is the patch-token grid emitted by a ViT backbone, plus the
//! optional CLS and register tokens. Region descriptors are pixel-weighted
//! means of the patch tokens under a region mask: pixel `(x, y)` of an
//! `W x H` mask reads the cell `(y * grid_h / H, x * grid_w / W)`.
//!
//! On-disk layout (`.fsf`, little-endian):
//!
//! ```text
//! 0   8   magic "FSEGFEAT"
//! 8   4   version (1)
//! 12  4   grid_h
//! 16  4   grid_w
//! 20  4   dim
//! 24  4   register_count
//! 28  4   flags (bit 0: CLS present)
//! 32  ..  f32 payload: CLS?, registers, patch tokens row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::RegionLabels;

pub const FEATURE_MAGIC: &[u8; 8] = b"FSEGFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 32;
const FLAG_CLS: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub grid_h: u32,
    pub grid_w: u32,
    pub dim: u32,
    pub register_count: u32,
    pub has_cls: bool,
}

impl FeatureFileHeader {
    pub fn token_count(&self) -> usize {
        self.grid_h as usize * self.grid_w as usize
            + self.register_count as usize
            + usize::from(self.has_cls)
    }

    /// Payload size in bytes implied by the header.
    pub fn payload_len(&self) -> usize {
        self.token_count() * self.dim as usize * 4
    }

    pub fn encode(&self) -> [u8; FEATURE_HEADER_LEN] {
        let mut out = [0u8; FEATURE_HEADER_LEN];
        out[..8].copy_from_slice(FEATURE_MAGIC);
        let words = [
            FEATURE_VERSION,
            self.grid_h,
            self.grid_w,
            self.dim,
            self.register_count,
            if self.has_cls { FLAG_CLS } else { 0 },
        ];
        for (i, w) in words.iter().enumerate() {
            out[8 + 4 * i..12 + 4 * i].copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < FEATURE_HEADER_LEN {
            if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
                return Err(Error::BadMagic {
                    path: path.to_owned(),
                    expected: "FSEGFEAT",
                });
            }
            return Err(Error::Truncated {
                path: path.to_owned(),
                expected: FEATURE_HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_owned(),
                expected: "FSEGFEAT",
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FEATURE_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_owned(),
                version,
            });
        }
        let header = Self {
            grid_h: word(1),
            grid_w: word(2),
            dim: word(3),
            register_count: word(4),
            has_cls: word(5) & FLAG_CLS != 0,
        };
        if header.grid_h == 0 || header.grid_w == 0 || header.dim == 0 {
            return Err(Error::format(path, "grid and dim must be positive"));
        }
        Ok(header)
    }
}

/// Patch-token grid with optional CLS and register tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    patch_tokens: Vec<f32>,
    cls: Option<Vec<f32>>,
    registers: Vec<f32>,
}

impl FeatureMap {
    /// `patch_tokens` is row-major `grid_h * grid_w * dim`; `registers` is
    /// `register_count * dim`.
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        patch_tokens: Vec<f32>,
        cls: Option<Vec<f32>>,
        registers: Vec<f32>,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "feature grid and dimension must be positive".into(),
            ));
        }
        if patch_tokens.len() != grid_h * grid_w * dim {
            return Err(Error::DimensionMismatch(format!(
                "patch tokens have {} values, expected {}",
                patch_tokens.len(),
                grid_h * grid_w * dim
            )));
        }
        if cls.as_ref().is_some_and(|c| c.len() != dim) || !registers.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(
                "cls/register tokens do not match feature dim".into(),
            ));
        }
        let all_finite = patch_tokens
            .iter()
            .chain(cls.iter().flatten())
            .chain(registers.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            patch_tokens,
            cls,
            registers,
        })
    }

    /// Constant map, convenient for tests and fixtures.
    pub fn constant(grid_h: usize, grid_w: usize, value: &[f32]) -> Result<Self> {
        let tokens = value.repeat(grid_h * grid_w);
        Self::new(grid_h, grid_w, value.len(), tokens, None, Vec::new())
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.grid_w + col) * self.dim;
        &self.patch_tokens[i..i + self.dim]
    }

    pub fn patch_tokens(&self) -> &[f32] {
        &self.patch_tokens
    }

    pub fn cls(&self) -> Option<&[f32]> {
        self.cls.as_deref()
    }

    pub fn register_count(&self) -> usize {
        self.registers.len() / self.dim
    }

    pub fn registers(&self) -> impl Iterator<Item = &[f32]> {
        self.registers.chunks_exact(self.dim)
    }

    pub fn header(&self) -> FeatureFileHeader {
        FeatureFileHeader {
            grid_h: self.grid_h as u32,
            grid_w: self.grid_w as u32,
            dim: self.dim as u32,
            register_count: self.register_count() as u32,
            has_cls: self.cls.is_some(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + header.payload_len());
        out.extend_from_slice(&header.encode());
        let values = self
            .cls
            .iter()
            .flatten()
            .chain(self.registers.iter())
            .chain(self.patch_tokens.iter());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let header = FeatureFileHeader::decode(bytes, path)?;
        let expected = header.payload_len();
        let payload = &bytes[FEATURE_HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Truncated {
                path: path.to_owned(),
                expected,
                found: payload.len(),
            });
        }
        let mut values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} (value index {i})",
                path.display()
            )));
        }
        let dim = header.dim as usize;
        let cls_len = if header.has_cls { dim } else { 0 };
        let reg_len = header.register_count as usize * dim;
        let patch_tokens = values.split_off(cls_len + reg_len);
        let registers = values.split_off(cls_len);
        let cls = header.has_cls.then_some(values);
        Self::new(
            header.grid_h as usize,
            header.grid_w as usize,
            dim,
            patch_tokens,
            cls,
            registers,
        )
    }
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes, path)
}

/// Reads only the 32-byte header.
pub fn read_feature_header(path: &Path) -> Result<FeatureFileHeader> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN);
    f.by_ref()
        .take(FEATURE_HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    FeatureFileHeader::decode(&buf, path)
}

pub fn write_feature_file(map: &FeatureMap, path: &Path) -> Result<()> {
    std::fs::write(path, map.to_bytes()).map_err(|e| Error::io(path, e))
}

/// D-dimensional summary of one region of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionDescriptor {
    pub vector: Vec<f64>,
    pub frame_index: usize,
    pub region_id: u32,
    pub pixel_count: usize,
}

impl AsRef<[f64]> for RegionDescriptor {
    fn as_ref(&self) -> &[f64] {
        &self.vector
    }
}

/// How pooled region features are turned into the final descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DescriptorMode {
    /// Plain masked average pooling.
    #[default]
    PooledOnly,
    /// Attention over register tokens with the pooled vector as query, blended
    /// with the pooled vector by `alpha` and then with the CLS token by `beta`.
    RegisterCls { alpha: f64, beta: f64 },
}

impl DescriptorMode {
    pub const DEFAULT_ALPHA: f64 = 0.25;
    pub const DEFAULT_BETA: f64 = 0.25;

    pub fn register_cls_default() -> Self {
        DescriptorMode::RegisterCls {
            alpha: Self::DEFAULT_ALPHA,
            beta: Self::DEFAULT_BETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DescriptorMode::RegisterCls { alpha, beta } = *self {
            if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
                return Err(Error::InvalidArgument(format!(
                    "alpha and beta must lie in [0, 1], got {alpha}, {beta}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-region `(cell index, pixel count)` lists in ascending cell order.
fn cell_counts<M: RegionLabels + ?Sized>(map: &FeatureMap, mask: &M) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let col_of: Vec<usize> = (0..w).map(|x| x * map.grid_w / w).collect();
    let labels = mask.labels();
    let mut counts: BTreeMap<(u32, usize), usize> = BTreeMap::new();
    for y in 0..h {
        let row = y * map.grid_h / h;
        let line = &labels[y * w..(y + 1) * w];
        // run-length along the row: consecutive pixels usually share (region, cell)
        let mut x = 0;
        while x < w {
            let (region, col) = (line[x], col_of[x]);
            let mut end = x + 1;
            while end < w && line[end] == region && col_of[end] == col {
                end += 1;
            }
            *counts.entry((region, row * map.grid_w + col)).or_default() += end - x;
            x = end;
        }
    }
    let mut out = vec![Vec::new(); mask.region_count()];
    for ((region, cell), n) in counts {
        out[region as usize].push((cell, n));
    }
    out
}

fn weighted_mean(map: &FeatureMap, cells: &[(usize, usize)]) -> (Vec<f64>, usize) {
    let mut acc = vec![0.0f64; map.dim];
    let mut total = 0usize;
    for &(cell, n) in cells {
        let token = &map.patch_tokens[cell * map.dim..(cell + 1) * map.dim];
        let wt = n as f64;
        for (a, &t) in acc.iter_mut().zip(token) {
            *a += wt * t as f64;
        }
        total += n;
    }
    let inv = 1.0 / total as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    (acc, total)
}

fn check_mask<M: RegionLabels + ?Sized>(mask: &M) -> Result<()> {
    if mask.labels().len() != mask.width() as usize * mask.height() as usize {
        return Err(Error::DimensionMismatch("mask label count".into()));
    }
    Ok(())
}

/// Masked average pooling of one region.
pub fn pool_region<M: RegionLabels + ?Sized>(
    map: &FeatureMap,
    mask: &M,
    region_id: u32,
    frame_index: usize,
) -> Result<RegionDescriptor> {
    check_mask(mask)?;
    if region_id as usize >= mask.region_count() {
        return Err(Error::UnknownRegion(region_id));
    }
    let counts = cell_counts(map, mask);
    let cells = &counts[region_id as usize];
    if cells.is_empty() {
        return Err(Error::UnknownRegion(region_id));
    }
    let (vector, pixel_count) = weighted_mean(map, cells);
    Ok(RegionDescriptor {
        vector,
        frame_index,
        region_id,
        pixel_count,
    })
}

/// Applies the descriptor composition step to a pooled descriptor.
pub fn compose_descriptor(
    pooled: RegionDescriptor,
    map: &FeatureMap,
    mode: DescriptorMode,
) -> Result<RegionDescriptor> {
    let DescriptorMode::RegisterCls { alpha, beta } = mode else {
        return Ok(pooled);
    };
    mode.validate()?;
    let cls = map.cls().ok_or_else(|| {
        Error::InvalidArgument("register_cls descriptors need a CLS token".into())
    })?;
    if map.register_count() == 0 {
        return Err(Error::InvalidArgument(
            "register_cls descriptors need register tokens".into(),
        ));
    }
    if pooled.vector.len() != map.dim {
        return Err(Error::DimensionMismatch(format!(
            "descriptor dim {} vs feature dim {}",
            pooled.vector.len(),
            map.dim
        )));
    }
    let scale = 1.0 / (map.dim as f64).sqrt();
    let scores: Vec<f64> = map
        .registers()
        .map(|r| {
            r.iter()
                .zip(&pooled.vector)
                .map(|(&a, &b)| a as f64 * b)
                .sum::<f64>()
                * scale
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let norm: f64 = weights.iter().sum();

    let mut attended = vec![0.0f64; map.dim];
    for (r, wt) in map.registers().zip(&weights) {
        let wt = wt / norm;
        for (a, &v) in attended.iter_mut().zip(r) {
            *a += wt * v as f64;
        }
    }
    let vector = pooled
        .vector
        .iter()
        .zip(&attended)
        .zip(cls)
        .map(|((&p, &r), &c)| {
            let mid = (1.0 - alpha) * p + alpha * r;
            (1.0 - beta) * mid + beta * c as f64
        })
        .collect();
    Ok(RegionDescriptor { vector, ..pooled })
}

/// Descriptors for every region of `mask`, in region-id order.
pub fn descriptors_for_frame<M: RegionLabels + ?Sized>(
    map: &FeatureMap,
    mask: &M,
    mode: DescriptorMode,
    frame_index: usize,
) -> Result<Vec<RegionDescriptor>> {
    check_mask(mask)?;
    cell_counts(map, mask)
        .iter()
        .enumerate()
        .map(|(region, cells)| {
            if cells.is_empty() {
                return Err(Error::UnknownRegion(region as u32));
            }
            let (vector, pixel_count) = weighted_mean(map, cells);
            compose_descriptor(
                RegionDescriptor {
                    vector,
                    frame_index,
                    region_id: region as u32,
                    pixel_count,
                },
                map,
                mode,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageproc::SuperpixelMask;

    fn grid_map(values: &[f32], grid_h: usize, grid_w: usize) -> FeatureMap {
        FeatureMap::new(grid_h, grid_w, 1, values.to_vec(), None, Vec::new()).unwrap()
    }

    #[test]
    fn header_payload_for_vit_base_geometry() {
        let h = FeatureFileHeader {
            grid_h: 37,
            grid_w: 37,
            dim: 768,
            register_count: 4,
            has_cls: true,
        };
        assert_eq!(h.payload_len(), 4 * 768 * (37 * 37 + 4 + 1));
        assert_eq!(h.payload_len(), 4_220_928);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fsf");
        let map = FeatureMap::new(
            2,
            3,
            2,
            (0..12).map(|i| i as f32 * 0.5 - 1.0).collect(),
            Some(vec![9.0, -9.0]),
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        write_feature_file(&map, &path).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back, map);
        assert_eq!(read_feature_header(&path).unwrap(), map.header());
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let map = FeatureMap::constant(1, 1, &[1.0]).unwrap();
        let mut bytes = map.to_bytes();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        let err = FeatureMap::from_bytes(&bytes, Path::new("x.fsf")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn truncated_and_nan_rejected() {
        let map = FeatureMap::constant(2, 2, &[1.0, 2.0]).unwrap();
        let bytes = map.to_bytes();
        let err = FeatureMap::from_bytes(&bytes[..bytes.len() - 3], Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));

        let mut bytes = bytes;
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = FeatureMap::from_bytes(&bytes, Path::new("n")).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn version_checked() {
        let map = FeatureMap::constant(1, 1, &[1.0]).unwrap();
        let mut bytes = map.to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            FeatureMap::from_bytes(&bytes, Path::new("v")),
            Err(Error::UnsupportedVersion { version: 2, .. })
        ));
    }

    #[test]
    fn pooling_hand_computed_mean() {
        // 2x2 grid over a 4x4 mask: each cell is a 2x2 pixel block.
        let map = grid_map(&[1.0, 3.0, 5.0, 7.0], 2, 2);
        let mask = SuperpixelMask::from_labels(4, 4, vec![0; 16]).unwrap();
        let d = pool_region(&map, &mask, 0, 0).unwrap();
        assert!((d.vector[0] - 4.0).abs() < 1e-12);
        assert_eq!(d.pixel_count, 16);
    }

    #[test]
    fn pooling_inside_one_cell_returns_token() {
        let map = grid_map(&[1.0, 3.0, 5.0, 7.0], 2, 2);
        let mut labels = vec![0u32; 16];
        labels[15] = 1;
        labels[14] = 1;
        let mask = SuperpixelMask::from_labels(4, 4, labels).unwrap();
        let d = pool_region(&map, &mask, 1, 3).unwrap();
        assert_eq!(d.vector, vec![7.0]);
        assert_eq!((d.frame_index, d.pixel_count), (3, 2));
        // region 0: 4 px of 1, 4 of 3, 4 of 5, 2 of 7 -> 50/14
        let d0 = pool_region(&map, &mask, 0, 3).unwrap();
        assert!((d0.vector[0] - 50.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_region_rejected() {
        let map = FeatureMap::constant(1, 1, &[1.0]).unwrap();
        let mask = SuperpixelMask::from_labels(2, 2, vec![0; 4]).unwrap();
        assert!(matches!(
            pool_region(&map, &mask, 5, 0),
            Err(Error::UnknownRegion(5))
        ));
    }

    #[test]
    fn composition_modes() {
        let map = FeatureMap::new(
            1,
            1,
            2,
            vec![1.0, 1.0],
            Some(vec![10.0, 20.0]),
            vec![3.0, -1.0],
        )
        .unwrap();
        let pooled = RegionDescriptor {
            vector: vec![1.0, 2.0],
            frame_index: 0,
            region_id: 0,
            pixel_count: 1,
        };
        let same = compose_descriptor(pooled.clone(), &map, DescriptorMode::PooledOnly).unwrap();
        assert_eq!(same, pooled);
        let degenerate = compose_descriptor(
            pooled.clone(),
            &map,
            DescriptorMode::RegisterCls { alpha: 0.0, beta: 0.0 },
        )
        .unwrap();
        assert_eq!(degenerate.vector, pooled.vector);
        let reg = compose_descriptor(
            pooled.clone(),
            &map,
            DescriptorMode::RegisterCls { alpha: 1.0, beta: 0.0 },
        )
        .unwrap();
        assert_eq!(reg.vector, vec![3.0, -1.0]);
        let cls = compose_descriptor(
            pooled,
            &map,
            DescriptorMode::RegisterCls { alpha: 0.3, beta: 1.0 },
        )
        .unwrap();
        assert_eq!(cls.vector, vec![10.0, 20.0]);
    }

    #[test]
    fn attention_weights_follow_softmax() {
        // Registers e1, e2; query (2, 0) with dim 2: scores 2/sqrt2, 0.
        let map = FeatureMap::new(
            1,
            1,
            2,
            vec![0.0, 0.0],
            Some(vec![0.0, 0.0]),
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let pooled = RegionDescriptor {
            vector: vec![2.0, 0.0],
            frame_index: 0,
            region_id: 0,
            pixel_count: 1,
        };
        let out = compose_descriptor(
            pooled,
            &map,
            DescriptorMode::RegisterCls { alpha: 1.0, beta: 0.0 },
        )
        .unwrap();
        let s = std::f64::consts::SQRT_2;
        let w1 = s.exp() / (s.exp() + 1.0);
        assert!((out.vector[0] - w1).abs() < 1e-6);
        assert!((out.vector[1] - (1.0 - w1)).abs() < 1e-6);
    }

    #[test]
    fn composition_requires_tokens() {
        let map = FeatureMap::constant(1, 1, &[1.0]).unwrap();
        let pooled = RegionDescriptor {
            vector: vec![1.0],
            frame_index: 0,
            region_id: 0,
            pixel_count: 1,
        };
        assert!(compose_descriptor(pooled.clone(), &map, DescriptorMode::register_cls_default()).is_err());
        assert!(compose_descriptor(
            pooled,
            &map,
            DescriptorMode::RegisterCls { alpha: 1.5, beta: 0.0 }
        )
        .is_err());
    }

    #[test]
    fn frame_descriptors_cover_all_regions() {
        let map = grid_map(&[1.0, 3.0, 5.0, 7.0], 2, 2);
        let labels: Vec<u32> = (0..16).map(|i| (i % 4 / 2 + 2 * (i / 8)) as u32).collect();
        let mask = SuperpixelMask::from_labels(4, 4, labels).unwrap();
        let ds = descriptors_for_frame(&map, &mask, DescriptorMode::PooledOnly, 7).unwrap();
        assert_eq!(ds.len(), 4);
        let values: Vec<f64> = ds.iter().map(|d| d.vector[0]).collect();
        assert_eq!(values, vec![1.0, 3.0, 5.0, 7.0]);
        assert!(ds.iter().enumerate().all(|(i, d)| d.region_id == i as u32 && d.frame_index == 7));
    }
}
