//! Region queries: random multi-scale boxes, ROIAlign-style pooling through
//! the shared bin chain, ground-truth depth extraction and coverage counting.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::model::{LevelVars, Model, ParamStore, PyramidFeatures};
use crate::real::Real;
use crate::tensor::{Gather, GatherRow, Tape};

/// Box sizes at the reference 640x480 resolution.
pub const REFERENCE_SIZES: [usize; 5] = [3, 7, 15, 31, 63];
pub const REFERENCE_EXTENT: (usize, usize) = (480, 640);

/// Axis-aligned box in image pixels, `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxQuery {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub size_class: usize,
}

impl BoxQuery {
    pub fn square(x0: usize, y0: usize, size: usize, size_class: usize) -> Self {
        Self {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: (x0 + size) as f64,
            y1: (y0 + size) as f64,
            size_class,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn check_inside(&self, (h, w): (usize, usize)) -> Result<()> {
        let ok = self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x0 < self.x1
            && self.y0 < self.y1
            && self.x1 <= w as f64
            && self.y1 <= h as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("box {self:?} is not inside a {h}x{w} image")))
        }
    }

    /// Pixel index rectangle `(r0, r1, c0, c1)` of pixels whose centers lie
    /// inside the box.
    pub fn pixel_rect(&self) -> (usize, usize, usize, usize) {
        let first = |lo: f64| (lo - 0.5).ceil().max(0.0) as usize;
        let end = |hi: f64| (hi - 0.5).ceil().max(0.0) as usize;
        (first(self.y0), end(self.y1), first(self.x0), end(self.x1))
    }
}

/// Boxes grouped by size class, `per_class` boxes of each size.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub sizes: Vec<usize>,
    pub per_class: usize,
    /// Class-major: all boxes of class 0, then class 1, ...
    pub boxes: Vec<BoxQuery>,
}

impl QuerySet {
    pub fn class(&self, k: usize) -> &[BoxQuery] {
        &self.boxes[k * self.per_class..(k + 1) * self.per_class]
    }

    /// The first `m` boxes of every class.
    pub fn truncated(&self, m: usize) -> QuerySet {
        let m = m.min(self.per_class);
        let boxes = (0..self.sizes.len()).flat_map(|k| self.class(k)[..m].iter().copied()).collect();
        QuerySet {
            sizes: self.sizes.clone(),
            per_class: m,
            boxes,
        }
    }
}

/// Checks that box sizes are positive, strictly increasing and fit the image.
pub fn check_sizes(sizes: &[usize], (h, w): (usize, usize)) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("no box sizes given".into()));
    }
    if sizes.windows(2).any(|p| p[0] >= p[1]) || sizes[0] == 0 {
        return Err(Error::Config(format!("box sizes must be positive and strictly increasing: {sizes:?}")));
    }
    let largest = *sizes.last().unwrap();
    if largest > h.min(w) {
        return Err(Error::Config(format!("box size {largest} exceeds the {h}x{w} image")));
    }
    Ok(())
}

/// `m` boxes per size with top-left corners uniform over all placements that
/// keep the box inside the image.
pub fn generate_queries<R: Rng>(rng: &mut R, extent: (usize, usize), sizes: &[usize], m: usize) -> Result<QuerySet> {
    check_sizes(sizes, extent)?;
    let (h, w) = extent;
    let mut boxes = Vec::with_capacity(sizes.len() * m);
    for (k, &s) in sizes.iter().enumerate() {
        for _ in 0..m {
            let x0 = rng.random_range(0..=w - s);
            let y0 = rng.random_range(0..=h - s);
            boxes.push(BoxQuery::square(x0, y0, s, k));
        }
    }
    Ok(QuerySet {
        sizes: sizes.to_vec(),
        per_class: m,
        boxes,
    })
}

/// Rescales reference box sizes to an image whose shorter side is
/// `min(h, w)`: multiply by `min(h, w) / 480`, round to the nearest odd
/// integer of at least 3, then bump sizes that collide with the previous
/// class up to the next odd value so classes stay distinct.
pub fn scale_box_sizes(sizes: &[usize], (h, w): (usize, usize)) -> Result<Vec<usize>> {
    let factor = h.min(w) as f64 / REFERENCE_EXTENT.0 as f64;
    let mut out: Vec<usize> = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let x = s as f64 * factor;
        let lower = (((x - 1.0) / 2.0).floor() * 2.0 + 1.0).max(1.0);
        let odd = if x - lower <= lower + 2.0 - x { lower } else { lower + 2.0 };
        let mut v = (odd as usize).max(3);
        if let Some(&prev) = out.last() {
            v = v.max(prev + 2);
        }
        out.push(v);
    }
    check_sizes(&out, (h, w))?;
    Ok(out)
}

/// Bilinear taps of ROIAlign with a single output cell and `samples x samples`
/// sample points, on a feature map of extent `(hf, wf)` whose stride relative
/// to the image is `stride`. Sample coordinates use the half-pixel-aligned
/// convention and are clamped to the map.
pub fn roi_taps(b: &BoxQuery, (hf, wf): (usize, usize), stride: f64, samples: usize) -> Vec<(usize, f64)> {
    let fx0 = b.x0 / stride;
    let fy0 = b.y0 / stride;
    let bw = b.width() / stride;
    let bh = b.height() / stride;
    let n = samples.max(1);
    let norm = 1.0 / (n * n) as f64;
    let mut taps = Vec::with_capacity(4 * n * n);
    for iy in 0..n {
        let y = fy0 + (iy as f64 + 0.5) * bh / n as f64 - 0.5;
        let (ya, yb, wy) = axis_taps(y, hf);
        for ix in 0..n {
            let x = fx0 + (ix as f64 + 0.5) * bw / n as f64 - 0.5;
            let (xa, xb, wx) = axis_taps(x, wf);
            taps.push((ya * wf + xa, norm * (1.0 - wy) * (1.0 - wx)));
            taps.push((ya * wf + xb, norm * (1.0 - wy) * wx));
            taps.push((yb * wf + xa, norm * wy * (1.0 - wx)));
            taps.push((yb * wf + xb, norm * wy * wx));
        }
    }
    taps.retain(|&(_, w)| w != 0.0);
    taps
}

fn axis_taps(v: f64, extent: usize) -> (usize, usize, f64) {
    let max = (extent - 1) as f64;
    let v = v.clamp(0.0, max);
    let lo = v.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, v - lo as f64)
}

/// Gather spec pooling every `(image, box)` from a map of extent `feat` on
/// images of extent `image`.
pub fn roi_gather<T: Real>(
    queries: &[(usize, BoxQuery)],
    feat: (usize, usize),
    image: (usize, usize),
    samples: usize,
) -> Result<Gather<T>> {
    if image.0 % feat.0 != 0 || image.1 % feat.1 != 0 || image.0 / feat.0 != image.1 / feat.1 {
        return Err(shape_err!("feature map {feat:?} is not a uniform downsampling of {image:?}"));
    }
    let stride = (image.0 / feat.0) as f64;
    let mut rows = Vec::with_capacity(queries.len());
    for (img, b) in queries {
        b.check_inside(image)?;
        let taps = roi_taps(b, feat, stride, samples)
            .into_iter()
            .map(|(i, w)| (i, T::lit(w)))
            .collect();
        rows.push(GatherRow { batch: *img, taps });
    }
    Ok(Gather { rows })
}

/// Pools one box from `[N, C, Hf, Wf]` features of image `n` into a `C` vector.
pub fn roi_avg_pool<T: Real>(
    feat: &crate::tensor::Tensor<T>,
    n: usize,
    b: &BoxQuery,
    image: (usize, usize),
    samples: usize,
) -> Result<Vec<T>> {
    let s = feat.shape();
    if s.len() != 4 {
        return Err(shape_err!("roi_avg_pool expects [N, C, H, W], got {s:?}"));
    }
    let spec = roi_gather::<T>(&[(n, *b)], (s[2], s[3]), image, samples)?;
    let mut tape = Tape::new();
    let x = tape.constant(feat.clone());
    let y = tape.gather(x, Arc::new(spec))?;
    Ok(tape.value(y).data().to_vec())
}

/// Runs the shared bin chain on box-pooled features. Returns one
/// `[B, 2^l N_seed]` width row-set per level `0..=n`.
pub fn query_bins<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    pyramid: &PyramidFeatures,
    queries: &[(usize, BoxQuery)],
    image: (usize, usize),
    samples: usize,
) -> Result<Vec<LevelVars>> {
    if queries.is_empty() {
        return Err(Error::Invalid("query_bins with no boxes".into()));
    }
    let mut pooled = Vec::with_capacity(pyramid.n() + 1);
    for l in 0..=pyramid.n() {
        let v = pyramid.level(l);
        let s = tape.shape(v).to_vec();
        let spec = roi_gather::<T>(queries, (s[2], s[3]), image, samples)?;
        pooled.push(tape.gather(v, Arc::new(spec))?);
    }
    model.pooled_levels(tape, store, &pooled)
}

/// Valid depths of pixels whose centers fall inside the box, uniformly
/// subsampled to `cap` when there are more. `None` means the box has no valid
/// pixel and is rejected.
pub fn extract_gt_depths<T: Copy, R: Rng>(
    depth: &[T],
    mask: &[bool],
    (h, w): (usize, usize),
    b: &BoxQuery,
    cap: usize,
    rng: &mut R,
) -> Option<Vec<T>> {
    let (r0, r1, c0, c1) = b.pixel_rect();
    let mut values = Vec::new();
    for r in r0..r1.min(h) {
        for c in c0..c1.min(w) {
            let i = r * w + c;
            if mask[i] {
                values.push(depth[i]);
            }
        }
    }
    if values.is_empty() {
        return None;
    }
    if values.len() > cap {
        let mut picked = sample(rng, values.len(), cap).into_vec();
        picked.sort_unstable();
        values = picked.into_iter().map(|i| values[i]).collect();
    }
    Some(values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverageReport {
    pub psci: usize,
    pub px_covered: usize,
    pub coverage_pct: f64,
}

/// Point-set comparison count and union pixel coverage of integer pixel
/// rectangles `(r0, r1, c0, c1)`.
pub fn coverage_of_rects(rects: &[(usize, usize, usize, usize)], (h, w): (usize, usize)) -> CoverageReport {
    let mut covered = vec![false; h * w];
    for &(r0, r1, c0, c1) in rects {
        for r in r0..r1.min(h) {
            covered[r * w + c0.min(w)..r * w + c1.min(w)].iter_mut().for_each(|v| *v = true);
        }
    }
    let px = covered.iter().filter(|v| **v).count();
    CoverageReport {
        psci: rects.len(),
        px_covered: px,
        coverage_pct: px as f64 / (h * w) as f64 * 100.0,
    }
}

pub fn coverage_report(set: &QuerySet, extent: (usize, usize)) -> CoverageReport {
    let rects: Vec<_> = set.boxes.iter().map(BoxQuery::pixel_rect).collect();
    coverage_of_rects(&rects, extent)
}

/// One naive-baseline target: a supervised pixel and the ground-truth depths
/// of the window centered on it.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveTarget<T> {
    pub row: usize,
    pub col: usize,
    pub depths: Vec<T>,
}

/// Samples `n_locations` distinct valid pixels and collects the valid depths
/// of the `window x window` neighborhood of each, clipped at the border.
pub fn naive_subsample_targets<T: Copy, R: Rng>(
    depth: &[T],
    mask: &[bool],
    (h, w): (usize, usize),
    window: usize,
    n_locations: usize,
    rng: &mut R,
) -> Result<Vec<NaiveTarget<T>>> {
    if window % 2 == 0 {
        return Err(Error::Config(format!("naive window must be odd, got {window}")));
    }
    let valid: Vec<usize> = (0..h * w).filter(|&i| mask[i]).collect();
    let picked = sample(rng, valid.len(), n_locations.min(valid.len())).into_vec();
    let r = window / 2;
    Ok(picked
        .into_iter()
        .map(|p| {
            let i = valid[p];
            let (row, col) = (i / w, i % w);
            let mut depths = Vec::with_capacity(window * window);
            for y in row.saturating_sub(r)..(row + r + 1).min(h) {
                for x in col.saturating_sub(r)..(col + r + 1).min(w) {
                    if mask[y * w + x] {
                        depths.push(depth[y * w + x]);
                    }
                }
            }
            NaiveTarget { row, col, depths }
        })
        .collect())
}

/// Coverage of the naive scheme: each sampled location supervises one pixel.
pub fn naive_coverage<T>(targets: &[NaiveTarget<T>], extent: (usize, usize)) -> CoverageReport {
    let rects: Vec<_> = targets.iter().map(|t| (t.row, t.row + 1, t.col, t.col + 1)).collect();
    coverage_of_rects(&rects, extent)
}

/// Gather spec reading, at a level of extent `(hl, wl)` below a full
/// resolution of `(h, w)`, the cell that contains each `(image, row, col)`.
pub fn pixel_gather<T: Real>(
    pixels: &[(usize, usize, usize)],
    (hl, wl): (usize, usize),
    (h, w): (usize, usize),
) -> Result<Gather<T>> {
    if h % hl != 0 || w % wl != 0 {
        return Err(shape_err!("level {hl}x{wl} does not divide {h}x{w}"));
    }
    let (sy, sx) = (h / hl, w / wl);
    let rows = pixels
        .iter()
        .map(|&(n, r, c)| GatherRow {
            batch: n,
            taps: vec![((r / sy) * wl + c / sx, T::one())],
        })
        .collect();
    Ok(Gather { rows })
}
