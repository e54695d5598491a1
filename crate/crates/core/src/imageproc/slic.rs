//! SLICO: SLIC with a per-cluster adaptive colour normaliser.
//!
//! The distance from pixel `i` to centre `k` is
//! `d_lab(i,k)^2 / m_k + d_xy(i,k)^2 / S^2`, where `m_k` is the largest squared
//! colour distance observed inside cluster `k` on the previous iteration
//! (floored at 1). `S` is the grid spacing (`region_size`).

use std::collections::BTreeSet;

use super::{LabImage, SuperpixelMask};
use crate::error::{Error, Result};

const UNSET: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

/// SLICO superpixels over Lab + xy. Seeds sit on a regular grid with spacing
/// close to `region_size` and are moved to the lowest-gradient pixel of their
/// 3x3 neighbourhood. At most `max_iters` assignment/update rounds run before
/// 4-connectivity is enforced and ids are relabelled densely.
pub fn slico_segment(img: &LabImage, region_size: u32, max_iters: u32) -> Result<SuperpixelMask> {
    if region_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "region_size must be at least 2, got {region_size}"
        )));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < region_size as usize || h < region_size as usize {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} is smaller than one region of size {region_size}"
        )));
    }
    let step = region_size as f64;
    let lab = img.pixels();

    let mut centers = seed_centers(img, region_size);
    let k = centers.len();
    let mut labels = initial_labels(w, h, region_size);
    let mut max_lab = vec![100.0f64; k];
    let inv_xy = 1.0 / (step * step);
    let reach = region_size as i64;

    let mut dist = vec![f64::INFINITY; w * h];
    let mut dist_lab = vec![0.0f64; w * h];
    for iter in 0..max_iters {
        dist.fill(f64::INFINITY);
        let mut next = labels.clone();
        for (ci, c) in centers.iter().enumerate() {
            let x0 = (c.x as i64 - reach).max(0) as usize;
            let x1 = ((c.x as i64 + reach) as usize).min(w - 1);
            let y0 = (c.y as i64 - reach).max(0) as usize;
            let y1 = ((c.y as i64 + reach) as usize).min(h - 1);
            for y in y0..=y1 {
                let dy = y as f64 - c.y;
                for x in x0..=x1 {
                    let i = y * w + x;
                    let p = lab[i];
                    let dl = p[0] as f64 - c.lab[0];
                    let da = p[1] as f64 - c.lab[1];
                    let db = p[2] as f64 - c.lab[2];
                    let dlab = dl * dl + da * da + db * db;
                    let dx = x as f64 - c.x;
                    let d = dlab / max_lab[ci] + (dx * dx + dy * dy) * inv_xy;
                    if d < dist[i] {
                        dist[i] = d;
                        dist_lab[i] = dlab;
                        next[i] = ci as u32;
                    }
                }
            }
        }

        if iter == 0 {
            max_lab.fill(1.0);
        }
        for i in 0..w * h {
            if dist[i].is_finite() {
                let m = &mut max_lab[next[i] as usize];
                if *m < dist_lab[i] {
                    *m = dist_lab[i];
                }
            }
        }

        let converged = next == labels;
        labels = next;
        update_centers(&mut centers, &labels, lab, w);
        if converged {
            break;
        }
    }

    Ok(enforce_connectivity(w, h, &labels, (region_size * region_size / 4) as usize))
}

fn grid_counts(len: usize, region_size: u32) -> usize {
    ((len as f64 / region_size as f64).round() as usize).max(1)
}

fn seed_centers(img: &LabImage, region_size: u32) -> Vec<Center> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let nx = grid_counts(w, region_size);
    let ny = grid_counts(h, region_size);
    let sx = w as f64 / nx as f64;
    let sy = h as f64 / ny as f64;
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (((i as f64 + 0.5) * sx) as usize).min(w - 1);
            let cy = (((j as f64 + 0.5) * sy) as usize).min(h - 1);
            let (bx, by) = lowest_gradient(img, cx, cy);
            let p = img.get(bx as u32, by as u32);
            centers.push(Center {
                lab: p.map(f64::from),
                x: bx as f64,
                y: by as f64,
            });
        }
    }
    centers
}

fn gradient(img: &LabImage, x: usize, y: usize) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let at = |x: usize, y: usize| img.pixels()[y * w + x];
    let sq = |a: [f32; 3], b: [f32; 3]| -> f64 {
        (0..3).map(|c| ((a[c] - b[c]) as f64).powi(2)).sum()
    };
    let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
    let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
    sq(at(xr, y), at(xl, y)) + sq(at(x, yd), at(x, yu))
}

fn lowest_gradient(img: &LabImage, cx: usize, cy: usize) -> (usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut best = (cx, cy);
    let mut best_g = gradient(img, cx, cy);
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (x, y) = (cx as i64 + dx, cy as i64 + dy);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let g = gradient(img, x as usize, y as usize);
            if g < best_g {
                best_g = g;
                best = (x as usize, y as usize);
            }
        }
    }
    best
}

// Each pixel starts in the grid cell of its seed, so pixels no centre reaches
// in the first round still carry a valid label.
fn initial_labels(w: usize, h: usize, region_size: u32) -> Vec<u32> {
    let nx = grid_counts(w, region_size);
    let ny = grid_counts(h, region_size);
    let mut labels = Vec::with_capacity(w * h);
    for y in 0..h {
        let j = (y * ny / h).min(ny - 1);
        for x in 0..w {
            let i = (x * nx / w).min(nx - 1);
            labels.push((j * nx + i) as u32);
        }
    }
    labels
}

fn update_centers(centers: &mut [Center], labels: &[u32], lab: &[[f32; 3]], w: usize) {
    let mut sums = vec![[0.0f64; 6]; centers.len()];
    for (i, &l) in labels.iter().enumerate() {
        let s = &mut sums[l as usize];
        let p = lab[i];
        s[0] += p[0] as f64;
        s[1] += p[1] as f64;
        s[2] += p[2] as f64;
        s[3] += (i % w) as f64;
        s[4] += (i / w) as f64;
        s[5] += 1.0;
    }
    for (c, s) in centers.iter_mut().zip(sums.iter()) {
        if s[5] > 0.0 {
            c.lab = [s[0] / s[5], s[1] / s[5], s[2] / s[5]];
            c.x = s[3] / s[5];
            c.y = s[4] / s[5];
        }
    }
}

/// Splits every label into its 4-connected components, then absorbs each
/// component smaller than `min_size` into the neighbour sharing the longest
/// boundary (lowest component id on ties), smallest components first.
pub(crate) fn enforce_connectivity(
    w: usize,
    h: usize,
    labels: &[u32],
    min_size: usize,
) -> SuperpixelMask {
    let n = w * h;
    let mut owner = vec![UNSET; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if owner[start] != UNSET {
            continue;
        }
        let id = members.len() as u32;
        let label = labels[start];
        let mut pixels = Vec::new();
        owner[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            pixels.push(i);
            for j in neighbors4(i, w, h) {
                if owner[j] == UNSET && labels[j] == label {
                    owner[j] = id;
                    stack.push(j);
                }
            }
        }
        members.push(pixels);
    }

    let mut alive = vec![true; members.len()];
    let mut queue: BTreeSet<(usize, u32)> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| m.len() < min_size)
        .map(|(id, m)| (m.len(), id as u32))
        .collect();

    while let Some((size, id)) = queue.pop_first() {
        if !alive[id as usize] || members[id as usize].len() != size {
            continue;
        }
        let mut shared: Vec<(u32, usize)> = Vec::new();
        for &i in &members[id as usize] {
            for j in neighbors4(i, w, h) {
                let o = owner[j];
                if o == id {
                    continue;
                }
                match shared.iter_mut().find(|(n, _)| *n == o) {
                    Some(entry) => entry.1 += 1,
                    None => shared.push((o, 1)),
                }
            }
        }
        let Some(&(target, _)) = shared
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        else {
            continue;
        };
        let moved = std::mem::take(&mut members[id as usize]);
        alive[id as usize] = false;
        for &i in &moved {
            owner[i] = target;
        }
        let target_members = &mut members[target as usize];
        let old = target_members.len();
        target_members.extend(moved);
        if old < min_size {
            queue.remove(&(old, target));
            if target_members.len() < min_size {
                queue.insert((target_members.len(), target));
            }
        }
    }

    let mut remap = vec![UNSET; members.len()];
    let mut next = 0u32;
    let dense: Vec<u32> = owner
        .iter()
        .map(|&o| {
            if remap[o as usize] == UNSET {
                remap[o as usize] = next;
                next += 1;
            }
            remap[o as usize]
        })
        .collect();
    SuperpixelMask::from_dense_unchecked(w as u32, h as u32, dense, next as usize)
}

fn neighbors4(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}
