//! Two-phase pseudo-labelling: k-means within each temporal window, merging
//! of same-label superpixels inside each frame, descriptor recomputation over
//! the merged regions, and one k-means over the merged descriptors of the
//! whole sequence.

mod kmeans;

use std::path::Path;

pub use kmeans::{assign, kmeans, Centroids, ClusterAssignment, KMeansFit, KMeansParams};

use crate::error::{Error, Result};
use crate::features::{descriptors_for_frame, DescriptorMode, FeatureMap, RegionDescriptor};
use crate::imageproc::{check_dense, load_u16_png, save_u16_png, RegionLabels, SuperpixelMask};

/// Inclusive frame range `[start_frame, end_frame]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalWindow {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl TemporalWindow {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start_frame..=self.end_frame
    }
}

/// Union of same-pseudo-label superpixels within one frame. Merged regions
/// may be spatially disconnected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergedMask {
    width: u32,
    height: u32,
    labels: Vec<u32>,
    parents: Vec<Vec<u32>>,
    pseudo_labels: Vec<u32>,
}

impl MergedMask {
    /// Superpixel ids that make up each merged region.
    pub fn parents(&self) -> &[Vec<u32>] {
        &self.parents
    }

    /// Local pseudo-label shared by the parents of each merged region.
    pub fn pseudo_labels(&self) -> &[u32] {
        &self.pseudo_labels
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_u16_png(path, self.width, self.height, &self.labels)
    }

    /// Rebuilds a merged mask from its stored label image and the superpixel
    /// mask it was derived from. Pseudo-labels are not stored and come back
    /// as the merged ids.
    pub fn load_png(path: &Path, superpixels: &SuperpixelMask) -> Result<Self> {
        let (w, h, labels) = load_u16_png(path)?;
        if (w, h) != (superpixels.width(), superpixels.height()) {
            return Err(Error::DimensionMismatch(format!(
                "{}: merged mask {w}x{h} vs superpixels {}x{}",
                path.display(),
                superpixels.width(),
                superpixels.height()
            )));
        }
        let count = check_dense(w, h, &labels)?;
        let mut parent_of = vec![u32::MAX; superpixels.region_count()];
        for (&m, &s) in labels.iter().zip(superpixels.labels()) {
            let p = &mut parent_of[s as usize];
            if *p == u32::MAX {
                *p = m;
            } else if *p != m {
                return Err(Error::Integrity(format!(
                    "{}: superpixel {s} spans several merged regions",
                    path.display()
                )));
            }
        }
        let mut parents = vec![Vec::new(); count];
        for (s, &m) in parent_of.iter().enumerate() {
            parents[m as usize].push(s as u32);
        }
        Ok(Self {
            width: w,
            height: h,
            labels,
            parents,
            pseudo_labels: (0..count as u32).collect(),
        })
    }
}

impl RegionLabels for MergedMask {
    fn width(&self) -> u32 {
        self.width
    }
    fn height(&self) -> u32 {
        self.height
    }
    fn labels(&self) -> &[u32] {
        &self.labels
    }
    fn region_count(&self) -> usize {
        self.parents.len()
    }
}

/// K-means over every region descriptor of one window.
pub fn local_cluster_window<V: AsRef<[f64]>>(
    window_descriptors: &[V],
    params: &KMeansParams,
) -> Result<KMeansFit> {
    if window_descriptors.is_empty() {
        return Err(Error::EmptyInput("temporal window has no descriptors".into()));
    }
    kmeans(window_descriptors, params)
}

/// Gives one merged id to all superpixels of the frame that share a
/// pseudo-label. Merged ids follow first appearance in superpixel-id order.
pub fn merge_superpixels(mask: &SuperpixelMask, pseudo_labels: &[u32]) -> Result<MergedMask> {
    let m = mask.region_count();
    if pseudo_labels.len() < m {
        return Err(Error::MissingLabel(pseudo_labels.len() as u32));
    }
    if pseudo_labels.len() > m {
        return Err(Error::DimensionMismatch(format!(
            "{} pseudo-labels for {m} superpixels",
            pseudo_labels.len()
        )));
    }
    let mut merged_of_label: std::collections::HashMap<u32, u32> = Default::default();
    let mut parents: Vec<Vec<u32>> = Vec::new();
    let mut merged_pseudo = Vec::new();
    let mut remap = Vec::with_capacity(m);
    for (region, &label) in pseudo_labels.iter().enumerate() {
        let id = *merged_of_label.entry(label).or_insert_with(|| {
            parents.push(Vec::new());
            merged_pseudo.push(label);
            (parents.len() - 1) as u32
        });
        parents[id as usize].push(region as u32);
        remap.push(id);
    }
    Ok(MergedMask {
        width: mask.width(),
        height: mask.height(),
        labels: mask.labels().iter().map(|&s| remap[s as usize]).collect(),
        parents,
        pseudo_labels: merged_pseudo,
    })
}

/// Masked average pooling over every merged region (plus the same composition
/// step used for the superpixel descriptors).
pub fn recompute_descriptors(
    map: &FeatureMap,
    merged: &MergedMask,
    mode: DescriptorMode,
    frame_index: usize,
) -> Result<Vec<RegionDescriptor>> {
    descriptors_for_frame(map, merged, mode, frame_index)
}

/// K-means over the merged descriptors of the full sequence. All frames share
/// the resulting label space.
pub fn global_cluster<V: AsRef<[f64]>>(
    merged_descriptors: &[V],
    params: &KMeansParams,
) -> Result<KMeansFit> {
    if merged_descriptors.is_empty() {
        return Err(Error::EmptyInput("sequence has no merged descriptors".into()));
    }
    kmeans(merged_descriptors, params)
}
