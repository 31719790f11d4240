//! Small image-processing toolkit: separable smoothing, box means,
//! connected components, binary morphology and the Canny detector.
//!
//! 3D routines take flat arrays in NIfTI order plus `dims`; 2D routines work
//! on [`Plane`], whose rows are indexed by `y`.

use std::collections::VecDeque;

/// FWHM to Gaussian sigma.
pub const FWHM_TO_SIGMA: f64 = 0.424_660_900_144_009_5;

#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "plane size mismatch");
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[x + self.width * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[x + self.width * y] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Columns `x0..x1` of every row.
    pub fn crop_columns(&self, x0: usize, x1: usize) -> Plane<T> {
        let mut data = Vec::with_capacity((x1 - x0) * self.height);
        for y in 0..self.height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x1]);
        }
        Plane { width: x1 - x0, height: self.height, data }
    }
}

impl Plane<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Coronal plane at row `j`: width = dims[0], height = dims[2].
pub fn coronal_plane<T: Copy>(data: &[T], dims: [usize; 3], j: usize) -> Plane<T> {
    let mut out = Vec::with_capacity(dims[0] * dims[2]);
    for k in 0..dims[2] {
        let base = dims[0] * (j + dims[1] * k);
        out.extend_from_slice(&data[base..base + dims[0]]);
    }
    Plane::from_vec(dims[0], dims[2], out)
}

/// Sagittal plane at column `i`: width = dims[1], height = dims[2].
pub fn sagittal_plane<T: Copy>(data: &[T], dims: [usize; 3], i: usize) -> Plane<T> {
    let mut out = Vec::with_capacity(dims[1] * dims[2]);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            out.push(data[i + dims[0] * (j + dims[1] * k)]);
        }
    }
    Plane::from_vec(dims[1], dims[2], out)
}

/// Axial plane at slice `k`: width = dims[0], height = dims[1].
pub fn axial_plane<T: Copy>(data: &[T], dims: [usize; 3], k: usize) -> Plane<T> {
    let n = dims[0] * dims[1];
    Plane::from_vec(dims[0], dims[1], data[k * n..(k + 1) * n].to_vec())
}

/// Normalized Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// 1D convolution along a strided line. `clamp` replicates border samples;
/// otherwise samples outside the line count as zero.
fn convolve_line(src: &[f64], dst: &mut [f64], kernel: &[f64], clamp: bool) {
    let n = src.len() as isize;
    let r = (kernel.len() / 2) as isize;
    for (x, d) in dst.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (t, &w) in kernel.iter().enumerate() {
            let mut s = x as isize + t as isize - r;
            if s < 0 || s >= n {
                if !clamp {
                    continue;
                }
                s = s.clamp(0, n - 1);
            }
            acc += w * src[s as usize];
        }
        *d = acc;
    }
}

/// Separable Gaussian along each axis of a 3D array; per-axis sigma in voxels.
pub fn gaussian_3d(data: &[f64], dims: [usize; 3], sigma: [f64; 3], clamp: bool) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        if sigma[axis] <= 0.0 || dims[axis] == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma[axis]);
        let n = dims[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut next = cur.clone();
        for start in 0..cur.len() {
            // Visit each line once, from its first element.
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for t in 0..n {
                line[t] = cur[start + t * stride];
            }
            convolve_line(&line, &mut out, &kernel, clamp);
            for t in 0..n {
                next[start + t * stride] = out[t];
            }
        }
        cur = next;
    }
    cur
}

/// Normalized convolution: smooths `data` using only samples where `weight > 0`.
/// Voxels whose smoothed weight vanishes are returned as zero.
pub fn masked_gaussian_3d(data: &[f64], weight: &[f64], dims: [usize; 3], sigma: [f64; 3]) -> Vec<f64> {
    let num: Vec<f64> = data.iter().zip(weight).map(|(v, w)| v * w).collect();
    let num = gaussian_3d(&num, dims, sigma, false);
    let den = gaussian_3d(weight, dims, sigma, false);
    num.iter().zip(&den).map(|(n, d)| if *d > 1e-12 { n / d } else { 0.0 }).collect()
}

/// Gaussian blur of a plane with clamped borders.
pub fn gaussian_blur(img: &Plane<f32>, sigma: f64) -> Plane<f32> {
    let data: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let out = gaussian_3d(&data, [img.width, img.height, 1], [sigma, sigma, 0.0], true);
    Plane::from_vec(img.width, img.height, out.into_iter().map(|v| v as f32).collect())
}

/// Normalized convolution on a plane restricted to `mask`; sigma per axis in pixels.
pub fn masked_blur(img: &Plane<f64>, mask: &Plane<bool>, sigma: [f64; 2]) -> Plane<f64> {
    let w: Vec<f64> = mask.data.iter().map(|&b| b as u8 as f64).collect();
    let out = masked_gaussian_3d(&img.data, &w, [img.width, img.height, 1], [sigma[0], sigma[1], 0.0]);
    Plane::from_vec(img.width, img.height, out)
}

/// Mean over a cubic window of side `window` (odd), truncated at the borders
/// so each voxel averages only in-grid samples.
pub fn box_mean_3d(data: &[f32], dims: [usize; 3], window: usize) -> Vec<f32> {
    let half = window / 2;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur: Vec<f32> = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let mut prefix = vec![0.0f64; n + 1];
        let mut next = vec![0.0f32; cur.len()];
        for start in 0..cur.len() {
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for t in 0..n {
                prefix[t + 1] = prefix[t] + cur[start + t * stride] as f64;
            }
            for t in 0..n {
                let lo = t.saturating_sub(half);
                let hi = (t + half + 1).min(n);
                next[start + t * stride] = ((prefix[hi] - prefix[lo]) / (hi - lo) as f64) as f32;
            }
        }
        cur = next;
    }
    cur
}

fn neighbours_3d(conn26: bool) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                if manhattan == 0 || (!conn26 && manhattan > 1) {
                    continue;
                }
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Labels 26-connected components; label 0 is background. Returns labels and
/// the voxel count of each component (index `label - 1`).
pub fn label_3d(mask: &[bool], dims: [usize; 3]) -> (Vec<u32>, Vec<usize>) {
    let offsets = neighbours_3d(true);
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..mask.len() {
        if !mask[seed] || labels[seed] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[seed] = label;
        queue.push_back(seed);
        let mut size = 0usize;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let i = (idx % dims[0]) as isize;
            let j = ((idx / dims[0]) % dims[1]) as isize;
            let k = (idx / (dims[0] * dims[1])) as isize;
            for o in &offsets {
                let (x, y, z) = (i + o[0], j + o[1], k + o[2]);
                if x < 0 || y < 0 || z < 0 || x >= dims[0] as isize || y >= dims[1] as isize || z >= dims[2] as isize {
                    continue;
                }
                let n = x as usize + dims[0] * (y as usize + dims[1] * z as usize);
                if mask[n] && labels[n] == 0 {
                    labels[n] = label;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps the largest 26-connected component; also returns the number of
/// components found before selection.
pub fn largest_component_3d(mask: &[bool], dims: [usize; 3]) -> (Vec<bool>, usize) {
    let (labels, sizes) = label_3d(mask, dims);
    let Some((best, _)) = sizes.iter().enumerate().max_by_key(|(i, &s)| (s, std::cmp::Reverse(*i))) else {
        return (vec![false; mask.len()], 0);
    };
    let keep = best as u32 + 1;
    (labels.iter().map(|&l| l == keep).collect(), sizes.len())
}

/// Labels 8-connected components of a plane; label 0 is background.
pub fn label_2d(mask: &Plane<bool>) -> (Vec<u32>, Vec<usize>) {
    label_3d(&mask.data, [mask.width, mask.height, 1])
}

fn ball_offsets(radius: usize, dims3: bool) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let rz = if dims3 { r } else { 0 };
    let mut out = Vec::new();
    for dz in -rz..=rz {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Stamps a ball of `radius` around every `value` voxel that has a 6-neighbour
/// of the opposite value, writing `value`. With `value = true` this is a
/// dilation; with `value = false` applied to foreground neighbours it is an
/// erosion that treats out-of-grid samples as foreground.
fn stamp_boundary(mask: &[bool], dims: [usize; 3], radius: usize, value: bool) -> Vec<bool> {
    let is3d = dims[2] > 1;
    let ball = ball_offsets(radius, is3d);
    let face = neighbours_3d(false);
    let mut out = mask.to_vec();
    let inside = |x: isize, y: isize, z: isize| {
        x >= 0 && y >= 0 && z >= 0 && x < dims[0] as isize && y < dims[1] as isize && z < dims[2] as isize
    };
    for idx in 0..mask.len() {
        if mask[idx] != value {
            continue;
        }
        let i = (idx % dims[0]) as isize;
        let j = ((idx / dims[0]) % dims[1]) as isize;
        let k = (idx / (dims[0] * dims[1])) as isize;
        let boundary = face.iter().any(|o| {
            let (x, y, z) = (i + o[0], j + o[1], k + o[2]);
            inside(x, y, z) && mask[x as usize + dims[0] * (y as usize + dims[1] * z as usize)] != value
        });
        if !boundary {
            continue;
        }
        for o in &ball {
            let (x, y, z) = (i + o[0], j + o[1], k + o[2]);
            if inside(x, y, z) {
                out[x as usize + dims[0] * (y as usize + dims[1] * z as usize)] = value;
            }
        }
    }
    out
}

/// Dilation by a Euclidean ball (a disk when `dims[2] == 1`).
pub fn dilate(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    stamp_boundary(mask, dims, radius, true)
}

/// Erosion by a Euclidean ball; samples outside the grid count as foreground.
pub fn erode(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    stamp_boundary(mask, dims, radius, false)
}

/// Closing; always a superset of the input.
pub fn close(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    erode(&dilate(mask, dims, radius), dims, radius)
}

/// Fills background regions not 4-connected to the plane border.
pub fn fill_holes(mask: &Plane<bool>) -> Plane<bool> {
    let (w, h) = (mask.width, mask.height);
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !mask.get(x, y) {
                outside[x + w * y] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let mut visit = |nx: usize, ny: usize| {
            let n = nx + w * ny;
            if !mask.data[n] && !outside[n] {
                outside[n] = true;
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    Plane::from_vec(w, h, outside.iter().map(|&o| !o).collect())
}

/// Canny edge detector. `low` and `high` are fractions of the maximum gradient
/// magnitude; `sigma` is the smoothing width in pixels.
pub fn canny(img: &Plane<f32>, sigma: f64, low: f64, high: f64) -> Plane<bool> {
    let (w, h) = (img.width, img.height);
    let mut edges = Plane::filled(w, h, false);
    if w < 3 || h < 3 {
        return edges;
    }
    let s = gaussian_blur(img, sigma);
    let at = |x: usize, y: usize| s.get(x, y) as f64;
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    let mut mag = vec![0.0f64; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let dx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let dy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = x + w * y;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = dx.hypot(dy);
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-9 {
        return edges;
    }
    let (lo, hi) = (low * max, high * max);

    // Non-maximum suppression with the gradient direction quantized to 4 bins.
    // Ties keep the pixel on the positive side so plateaus yield one-pixel lines.
    let mut thin = vec![0.0f64; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = x + w * y;
            let m = mag[i];
            if m < lo {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (ox, oy): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let fwd = mag[(x as isize + ox) as usize + w * (y as isize + oy) as usize];
            let back = mag[(x as isize - ox) as usize + w * (y as isize - oy) as usize];
            if m >= back && m > fwd {
                thin[i] = m;
            }
        }
    }

    // Hysteresis: grow strong seeds through 8-connected weak pixels.
    let mut queue = VecDeque::new();
    for i in 0..w * h {
        if thin[i] >= hi {
            edges.data[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let n = nx as usize + w * ny as usize;
                if !edges.data[n] && thin[n] >= lo {
                    edges.data[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    edges
}

/// Longest run of consecutive `true` pixels in each row.
pub fn longest_row_runs(img: &Plane<bool>) -> Vec<usize> {
    (0..img.height)
        .map(|y| {
            let (mut best, mut cur) = (0, 0);
            for x in 0..img.width {
                if img.get(x, y) {
                    cur += 1;
                    best = best.max(cur);
                } else {
                    cur = 0;
                }
            }
            best
        })
        .collect()
}

/// Value at quantile `q` of `values` with linear interpolation between order
/// statistics (the common "type 7" definition). `values` must be nonempty.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Approximate quantile of nonnegative data through a 4096-bin histogram.
pub fn histogram_quantile(values: &[f32], q: f64) -> f32 {
    let max = values.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return 0.0;
    }
    const BINS: usize = 4096;
    let mut hist = vec![0usize; BINS];
    let mut total = 0usize;
    for &v in values {
        if v > 0.0 {
            hist[((v / max) * (BINS - 1) as f32) as usize] += 1;
            total += 1;
        }
    }
    let target = (q * total as f64).ceil() as usize;
    let mut acc = 0;
    for (b, &c) in hist.iter().enumerate() {
        acc += c;
        if acc >= target {
            return (b as f32 + 0.5) / (BINS - 1) as f32 * max;
        }
    }
    max
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kernel_sums_to_one() {
        let k = gaussian_kernel(2.3);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k.len(), 2 * 7 + 1);
    }

    #[test]
    fn masked_smoothing_of_constant_is_constant() {
        let dims = [9, 7, 5];
        let n = 9 * 7 * 5;
        let data = vec![3.5; n];
        let weight: Vec<f64> = (0..n).map(|i| (i % 3 != 0) as u8 as f64).collect();
        let out = masked_gaussian_3d(&data, &weight, dims, [1.5, 2.0, 1.0]);
        assert!(out.iter().all(|&v| (v - 3.5).abs() < 1e-9));
    }

    #[test]
    fn box_mean_matches_brute_force() {
        let dims = [6, 5, 4];
        let data: Vec<f32> = (0..120).map(|i| ((i * 37) % 11) as f32).collect();
        let out = box_mean_3d(&data, dims, 3);
        for k in 0..4usize {
            for j in 0..5usize {
                for i in 0..6usize {
                    let mut sum = 0.0;
                    let mut cnt = 0;
                    for z in k.saturating_sub(1)..(k + 2).min(4) {
                        for y in j.saturating_sub(1)..(j + 2).min(5) {
                            for x in i.saturating_sub(1)..(i + 2).min(6) {
                                sum += data[x + 6 * (y + 5 * z)];
                                cnt += 1;
                            }
                        }
                    }
                    assert!((out[i + 6 * (j + 5 * k)] - sum / cnt as f32).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn largest_component_selected() {
        let dims = [20, 20, 20];
        let mut mask = vec![false; 8000];
        let mut set = |i: usize, j: usize, k: usize| mask[i + 20 * (j + 20 * k)] = true;
        for k in 0..10 {
            for j in 0..10 {
                for i in 0..10 {
                    set(i, j, k);
                }
            }
        }
        set(15, 15, 15);
        set(16, 16, 16); // diagonal neighbour: same 26-component
        let (keep, count) = largest_component_3d(&mask, dims);
        assert_eq!(count, 2);
        assert_eq!(keep.iter().filter(|&&b| b).count(), 1000);
    }

    #[test]
    fn closing_is_superset_and_fills_gap() {
        let dims = [12, 12, 12];
        let mut mask = vec![false; 1728];
        for k in 2..10 {
            for j in 2..10 {
                for i in 2..10 {
                    if i != 6 {
                        mask[i + 12 * (j + 12 * k)] = true;
                    }
                }
            }
        }
        let closed = close(&mask, dims, 2);
        assert!(mask.iter().zip(&closed).all(|(&a, &b)| !a || b));
        assert!(closed[6 + 12 * (6 + 12 * 6)]);
    }

    #[test]
    fn erosion_treats_outside_as_foreground() {
        let mask = vec![true; 25];
        assert!(erode(&mask, [5, 5, 1], 2).iter().all(|&b| b));
        let mut holed = mask.clone();
        holed[12] = false;
        let e = erode(&holed, [5, 5, 1], 1);
        assert!(!e[11] && !e[7] && e[6] && e[0]);
    }

    #[test]
    fn fill_holes_closes_interior_only() {
        let mut p = Plane::filled(7, 7, false);
        for y in 1..6 {
            for x in 1..6 {
                if !(x == 3 && y == 3) {
                    p.set(x, y, true);
                }
            }
        }
        let f = fill_holes(&p);
        assert!(f.get(3, 3));
        assert!(!f.get(0, 0));
        assert_eq!(f.count(), 25);
    }

    #[test]
    fn canny_constant_image_has_no_edges() {
        let img = Plane::filled(30, 30, 5.0f32);
        assert_eq!(canny(&img, 2.0, 0.1, 0.2).count(), 0);
    }

    #[test]
    fn canny_vertical_step_gives_single_line() {
        let mut img = Plane::filled(40, 30, 0.0f32);
        for y in 0..30 {
            for x in 20..40 {
                img.set(x, y, 1.0);
            }
        }
        let e = canny(&img, 2.0, 0.1, 0.2);
        for y in 1..29 {
            let xs: Vec<usize> = (0..40).filter(|&x| e.get(x, y)).collect();
            assert_eq!(xs.len(), 1, "row {y}: {xs:?}");
            assert!(xs[0] == 19 || xs[0] == 20);
        }
    }

    #[test]
    fn row_runs_counted() {
        let p = Plane::from_vec(6, 2, vec![true, true, false, true, true, true, false, false, false, false, false, true]);
        assert_eq!(longest_row_runs(&p), vec![3, 1]);
    }

    #[test]
    fn quantile_type7() {
        let mut v = vec![5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(quantile(&mut v, 0.5), 3.0);
        assert_eq!(quantile(&mut v, 0.75) - quantile(&mut v, 0.25), 2.0);
        let mut w = vec![1.0, 2.0, 3.0, 4.0];
        assert!((quantile(&mut w, 0.25) - 1.75).abs() < 1e-12);
    }
}
