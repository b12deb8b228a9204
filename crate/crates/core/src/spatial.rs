//! Spatial region sampler: turn a cumulative attention map into a handful of
//! high-resolution crops.
//!
//! The camera analogy: the model watches a cheap downsampled view of each
//! frame, and wherever attention pools it "fixates" — connected clusters of
//! high attention are ranked by their summed mass, their centroids are
//! projected back to full-resolution pixel coordinates, and fixed-size
//! patches are cut from the ORIGINAL image around those points.

use crate::attention::AttentionMap;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("downsampling factor {d} does not divide image dims {h}x{w}")]
    NonDivisible { d: usize, h: usize, w: usize },
    #[error("downsampling factor must be >= 1")]
    ZeroFactor,
    #[error("crop {crop_h}x{crop_w} larger than image {h}x{w}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        h: usize,
        w: usize,
    },
    #[error("suppression fraction must lie in (0,1), got {0}")]
    BadSuppressFraction(f64),
    #[error("crop dims must be positive")]
    ZeroCrop,
}

/// Which set cells count as touching when clustering the suppressed mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adjacency {
    /// Manhattan distance <= 2: diagonals AND one-cell gaps along an axis
    /// join the same region.
    Manhattan2,
    /// Standard 8-neighborhood (Chebyshev distance 1).
    EightWay,
}

impl Adjacency {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Adjacency::Manhattan2 => &[
                (-2, 0),
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -2),
                (0, -1),
                (0, 1),
                (0, 2),
                (1, -1),
                (1, 0),
                (1, 1),
                (2, 0),
            ],
            Adjacency::EightWay => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialConfig {
    /// How many regions to crop.
    pub k: usize,
    /// Downsampling factor for the cheap global view.
    pub d: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    /// Cells below this fraction of the attention maximum are suppressed.
    pub tau_s: f64,
    pub adjacency: Adjacency,
}

impl SpatialConfig {
    pub fn new(
        k: usize,
        d: usize,
        crop_h: usize,
        crop_w: usize,
        tau_s: f64,
        adjacency: Adjacency,
    ) -> Result<Self, SpatialError> {
        if d == 0 {
            return Err(SpatialError::ZeroFactor);
        }
        if crop_h == 0 || crop_w == 0 {
            return Err(SpatialError::ZeroCrop);
        }
        if !(tau_s > 0.0 && tau_s < 1.0) {
            return Err(SpatialError::BadSuppressFraction(tau_s));
        }
        Ok(SpatialConfig {
            k,
            d,
            crop_h,
            crop_w,
            tau_s,
            adjacency,
        })
    }
}

/// One connected cluster of surviving attention cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    /// Member cells, sorted row-major.
    pub cells: Vec<(usize, usize)>,
}

/// A region after ranking: its attention mass and weighted centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRegion {
    pub score: f64,
    /// Attention-weighted mean of member coordinates, in grid units.
    pub centroid: (f64, f64),
    /// 1-based position in the ranking.
    pub rank: usize,
    pub cells: Vec<(usize, usize)>,
}

/// A ranked region with its projected full-resolution pixel box.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBox {
    pub score: f64,
    pub centroid: (f64, f64),
    pub rank: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// The low-res global view plus up to k full-resolution crops, the crops cut
/// from the original image rather than the downsampled one.
#[derive(Debug, Clone)]
pub struct FrameViews {
    pub x_l: Tensor,
    pub crops: Vec<Tensor>,
    pub boxes: Vec<RegionBox>,
}

/// Block-mean rescale by `d` along both spatial axes.  With the sampling
/// grid aligned to pixel blocks this is what bilinear averaging reduces to.
pub fn downsample(x: &Tensor, d: usize) -> Result<Tensor, SpatialError> {
    if d == 0 {
        return Err(SpatialError::ZeroFactor);
    }
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % d != 0 || w % d != 0 {
        return Err(SpatialError::NonDivisible { d, h, w });
    }
    if d == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / d, w / d);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let inv = 1.0 / (d * d) as f64;
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..d {
                    for dj in 0..d {
                        acc += x.at3(ch, i * d + di, j * d + dj);
                    }
                }
                out.set3(ch, i, j, acc * inv);
            }
        }
    }
    Ok(out)
}

/// Mean across channels: `[C,H,W] -> [H,W]`.
pub fn channel_mean(a: &Tensor) -> Tensor {
    let shape = a.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(&[h, w]);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out.data_mut()[i * w + j] += a.at3(ch, i, j) / c as f64;
            }
        }
    }
    out
}

/// Keep cells whose channel-mean attention reaches `tau_s` times the map
/// maximum; an all-zero map keeps nothing.
pub fn suppress(a: &AttentionMap, tau_s: f64) -> Tensor {
    let m = channel_mean(&a.data);
    let max = m.data().iter().cloned().fold(0.0f64, f64::max);
    let mut out = Tensor::zeros(m.shape());
    if max > 0.0 {
        let cut = tau_s * max;
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = if v >= cut { 1.0 } else { 0.0 };
        }
    }
    out
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        let mut root = i;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = i;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so components are rooted at their first cell.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Partition the set cells of a binary mask into maximal connected regions.
/// Regions come back with cells sorted row-major and the regions themselves
/// ordered by their first cell.
pub fn connected_regions(mask: &Tensor, adjacency: Adjacency) -> Vec<Region> {
    let shape = mask.shape();
    let (h, w) = (shape[0], shape[1]);
    let set = |i: usize, j: usize| mask.data()[i * w + j] != 0.0;
    let mut uf = UnionFind::new(h * w);
    for i in 0..h {
        for j in 0..w {
            if !set(i, j) {
                continue;
            }
            for &(di, dj) in adjacency.offsets() {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                if set(ni, nj) {
                    uf.union(i * w + j, ni * w + nj);
                }
            }
        }
    }
    let mut by_root: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !set(i, j) {
                continue;
            }
            let root = uf.find(i * w + j);
            match by_root.iter_mut().find(|(r, _)| *r == root) {
                Some((_, cells)) => cells.push((i, j)),
                None => by_root.push((root, vec![(i, j)])),
            }
        }
    }
    by_root.sort_by_key(|(r, _)| *r);
    by_root
        .into_iter()
        .map(|(_, cells)| Region { cells })
        .collect()
}

/// Rank regions by summed channel-mean attention, descending; ties go to the
/// region whose attention-weighted centroid sits higher, then further left.
/// Returns at most `k` regions with 1-based ranks.
pub fn top_k_regions(a: &AttentionMap, regions: &[Region], k: usize) -> Vec<ScoredRegion> {
    let m = channel_mean(&a.data);
    let w = m.shape()[1];
    let mut scored: Vec<ScoredRegion> = regions
        .iter()
        .map(|region| {
            let mut score = 0.0;
            let mut wr = 0.0;
            let mut wc = 0.0;
            for &(i, j) in &region.cells {
                let v = m.data()[i * w + j];
                score += v;
                wr += v * i as f64;
                wc += v * j as f64;
            }
            let centroid = if score > 0.0 {
                (wr / score, wc / score)
            } else {
                // Zero-mass region (possible only on degenerate input):
                // fall back to the unweighted mean.
                let n = region.cells.len() as f64;
                (
                    region.cells.iter().map(|c| c.0 as f64).sum::<f64>() / n,
                    region.cells.iter().map(|c| c.1 as f64).sum::<f64>() / n,
                )
            };
            ScoredRegion {
                score,
                centroid,
                rank: 0,
                cells: region.cells.clone(),
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.centroid.0.partial_cmp(&b.centroid.0).unwrap())
            .then(a.centroid.1.partial_cmp(&b.centroid.1).unwrap())
    });
    scored.truncate(k);
    for (i, s) in scored.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    scored
}

/// Map a grid centroid to a full-resolution crop corner.  The centroid cell
/// center `(r+0.5, c+0.5)` scales linearly to pixel space; the crop is then
/// centered there and slid (never shrunk) back inside the image.
pub fn project_to_pixels(
    centroid: (f64, f64),
    attn_dims: (usize, usize),
    image_dims: (usize, usize),
    crop_dims: (usize, usize),
) -> Result<(usize, usize), SpatialError> {
    let (h, w) = attn_dims;
    let (ih, iw) = image_dims;
    let (ch, cw) = crop_dims;
    if ch > ih || cw > iw {
        return Err(SpatialError::CropTooLarge {
            crop_h: ch,
            crop_w: cw,
            h: ih,
            w: iw,
        });
    }
    let center_r = (centroid.0 + 0.5) * ih as f64 / h as f64;
    let center_c = (centroid.1 + 0.5) * iw as f64 / w as f64;
    let top = (center_r - ch as f64 / 2.0).round() as isize;
    let left = (center_c - cw as f64 / 2.0).round() as isize;
    let top = top.clamp(0, (ih - ch) as isize) as usize;
    let left = left.clamp(0, (iw - cw) as isize) as usize;
    Ok((top, left))
}

/// Slice a `[C, crop_h, crop_w]` patch out of an image.
pub fn crop(x: &Tensor, top: usize, left: usize, crop_h: usize, crop_w: usize) -> Tensor {
    let shape = x.shape();
    let (c, _h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(&[c, crop_h, crop_w]);
    for ch in 0..c {
        for i in 0..crop_h {
            for j in 0..crop_w {
                out.set3(ch, i, j, x.data()[(ch * _h + top + i) * w + left + j]);
            }
        }
    }
    out
}

/// Full sampling pass for one frame: cheap global view plus up to `k`
/// attention-guided crops from the original image.
pub fn sample_frame(
    x: &Tensor,
    a: &AttentionMap,
    cfg: &SpatialConfig,
) -> Result<FrameViews, SpatialError> {
    let x_l = downsample(x, cfg.d)?;
    if cfg.k == 0 {
        return Ok(FrameViews {
            x_l,
            crops: Vec::new(),
            boxes: Vec::new(),
        });
    }
    let ashape = a.data.shape();
    let attn_dims = (ashape[1], ashape[2]);
    let xshape = x.shape();
    let image_dims = (xshape[1], xshape[2]);
    let mask = suppress(a, cfg.tau_s);
    let regions = connected_regions(&mask, cfg.adjacency);
    let ranked = top_k_regions(a, &regions, cfg.k);
    let mut crops = Vec::with_capacity(ranked.len());
    let mut boxes = Vec::with_capacity(ranked.len());
    for r in ranked {
        let (top, left) =
            project_to_pixels(r.centroid, attn_dims, image_dims, (cfg.crop_h, cfg.crop_w))?;
        crops.push(crop(x, top, left, cfg.crop_h, cfg.crop_w));
        boxes.push(RegionBox {
            score: r.score,
            centroid: r.centroid,
            rank: r.rank,
            top,
            left,
            height: cfg.crop_h,
            width: cfg.crop_w,
        });
    }
    Ok(FrameViews { x_l, crops, boxes })
}
