//! Keypoint heatmaps: Gaussian rendering, salt-and-pepper corruption, decoding.

use nalgebra::Matrix2xX;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Keypoints2D;
use crate::error::{Error, Result};

pub const DEFAULT_WIDTH: usize = 40;
pub const DEFAULT_HEIGHT: usize = 30;
pub const DEFAULT_CELL_SIZE: f64 = 0.05;
pub const DEFAULT_SIGMA: f64 = 1.5;

/// Noise levels of the standard robustness sweep.
pub const STANDARD_NOISE_LEVELS: [f64; 5] = [0.0, 0.02, 0.05, 0.10, 0.20];

/// Maps grid cells to image-plane coordinates.
///
/// The grid covers a `width * cell_size` by `height * cell_size` window
/// centered on the principal point. Cell `(row, col)` has its center at
/// `x = (col + 0.5 - width / 2) * cell_size`, `y = (row + 0.5 - height / 2) * cell_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            cell_size: DEFAULT_CELL_SIZE,
        }
    }
}

impl GridGeometry {
    pub fn new(width: usize, height: usize, cell_size: f64) -> Result<Self> {
        let g = Self { width, height, cell_size };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::argument("heatmap grids must be at least 4x4"));
        }
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::argument("cell size must be positive"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (self.col_x(col), self.row_y(row))
    }

    fn col_x(&self, col: usize) -> f64 {
        (col as f64 + 0.5 - self.width as f64 / 2.0) * self.cell_size
    }

    fn row_y(&self, row: usize) -> f64 {
        (row as f64 + 0.5 - self.height as f64 / 2.0) * self.cell_size
    }

    pub fn half_extent(&self) -> (f64, f64) {
        (
            0.5 * self.width as f64 * self.cell_size,
            0.5 * self.height as f64 * self.cell_size,
        )
    }

    /// True if the point lies inside the (half-open) grid window.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (hx, hy) = self.half_extent();
        x >= -hx && x < hx && y >= -hy && y < hy
    }

    /// Half the diagonal of one cell, the quantization bound of argmax decoding.
    pub fn half_cell_diagonal(&self) -> f64 {
        0.5 * self.cell_size * std::f64::consts::SQRT_2
    }
}

/// `N` channels of `height x width` confidences in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    geometry: GridGeometry,
    n_channels: usize,
    data: Vec<f32>,
}

impl HeatmapStack {
    pub fn zeros(geometry: GridGeometry, n_channels: usize) -> Self {
        Self {
            geometry,
            n_channels,
            data: vec![0.0; n_channels * geometry.cells()],
        }
    }

    pub fn from_data(geometry: GridGeometry, n_channels: usize, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != n_channels * geometry.cells() {
            return Err(Error::argument(format!(
                "heatmap data has {} values, expected {}",
                data.len(),
                n_channels * geometry.cells()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::argument("heatmap values must lie in [0, 1]"));
        }
        Ok(Self { geometry, n_channels, data })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        let c = self.geometry.cells();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.geometry.cells();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.channel(channel)[row * self.geometry.width + col]
    }

    /// Flattened channel-major values, the network input layout.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}

/// Salt-and-pepper corruption settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub level: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(level: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::argument(format!("noise level {level} outside [0, 1]")));
        }
        Ok(Self { level, seed })
    }
}

/// Renders one peak-normalized Gaussian per keypoint; `sigma` is in cells.
///
/// Keypoints outside the grid window yield an all-zero channel and a false
/// visibility flag.
pub fn render_heatmaps(x: &Keypoints2D, geometry: &GridGeometry, sigma: f64) -> (HeatmapStack, Vec<bool>) {
    let mut hm = HeatmapStack::zeros(*geometry, x.n_keypoints());
    let visible = render_into(x, geometry, sigma, hm.data.as_mut_slice());
    (hm, visible)
}

/// Renders into a caller-provided buffer of `N * H * W` values.
pub fn render_into(x: &Keypoints2D, geometry: &GridGeometry, sigma: f64, out: &mut [f32]) -> Vec<bool> {
    assert!(sigma > 0.0, "sigma must be positive");
    let (w, h) = (geometry.width, geometry.height);
    let cells = geometry.cells();
    assert_eq!(out.len(), x.n_keypoints() * cells);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut gx = vec![0.0f64; w];
    let mut gy = vec![0.0f64; h];
    let mut visible = Vec::with_capacity(x.n_keypoints());
    for (i, kp) in x.coords.column_iter().enumerate() {
        let ch = &mut out[i * cells..(i + 1) * cells];
        if !geometry.contains(kp[0], kp[1]) {
            ch.fill(0.0);
            visible.push(false);
            continue;
        }
        // exp(-(dx^2 + dy^2) / 2s^2) factors into a row and a column term
        for (c, g) in gx.iter_mut().enumerate() {
            let d = (geometry.col_x(c) - kp[0]) / geometry.cell_size;
            *g = (-d * d * inv).exp();
        }
        for (r, g) in gy.iter_mut().enumerate() {
            let d = (geometry.row_y(r) - kp[1]) / geometry.cell_size;
            *g = (-d * d * inv).exp();
        }
        for r in 0..h {
            for c in 0..w {
                ch[r * w + c] = (gy[r] * gx[c]) as f32;
            }
        }
        visible.push(true);
    }
    visible
}

/// Overwrites `round(level * H * W)` uniformly chosen cells per channel;
/// `round(count / 2)` become 1.0 and the rest 0.0.
pub fn corrupt_salt_pepper(hm: &HeatmapStack, cfg: &NoiseConfig) -> HeatmapStack {
    let mut out = hm.clone();
    corrupt_in_place(&mut out, cfg);
    out
}

pub fn corrupt_in_place(hm: &mut HeatmapStack, cfg: &NoiseConfig) {
    let cells = hm.geometry.cells();
    corrupt_slice(&mut hm.data, cells, cfg);
}

/// Corruption on a raw channel-major buffer.
pub fn corrupt_slice(data: &mut [f32], cells: usize, cfg: &NoiseConfig) {
    let count = (cfg.level * cells as f64).round() as usize;
    if count == 0 {
        return;
    }
    let salt = (count as f64 / 2.0).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for ch in data.chunks_mut(cells) {
        let picked = sample(&mut rng, cells, count);
        for (j, idx) in picked.into_iter().enumerate() {
            ch[idx] = if j < salt { 1.0 } else { 0.0 };
        }
    }
}

/// Per channel, the center of the maximum cell; ties go to the lowest
/// `(row, col)`. All-zero channels decode as invisible at the origin.
pub fn decode_argmax(hm: &HeatmapStack) -> (Keypoints2D, Vec<bool>) {
    let g = hm.geometry;
    let n = hm.n_channels;
    let mut coords = Matrix2xX::zeros(n);
    let mut visible = vec![false; n];
    for i in 0..n {
        let ch = hm.channel(i);
        let mut best = 0usize;
        for (j, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = j;
            }
        }
        if ch[best] > 0.0 {
            let (x, y) = g.cell_center(best / g.width, best % g.width);
            coords[(0, i)] = x;
            coords[(1, i)] = y;
            visible[i] = true;
        }
    }
    (Keypoints2D::new(coords), visible)
}

/// Soft decoding: per channel, the mean of cell centers weighted by
/// `softmax(ln(v) / temperature)`, i.e. by `v^(1 / temperature)`.
///
/// Zero cells carry zero weight, so a point mass decodes exactly to its cell
/// and the result approaches [`decode_argmax`] as the temperature goes to zero.
pub fn decode_soft(hm: &HeatmapStack, temperature: f64) -> Result<(Keypoints2D, Vec<bool>)> {
    if !(temperature > 0.0) {
        return Err(Error::argument("temperature must be positive"));
    }
    let g = hm.geometry;
    let n = hm.n_channels;
    let mut coords = Matrix2xX::zeros(n);
    let mut visible = vec![false; n];
    for i in 0..n {
        let ch = hm.channel(i);
        let max = ch.iter().copied().fold(0.0f32, f32::max);
        if max <= 0.0 {
            continue;
        }
        let log_max = (max as f64).ln();
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for (j, &v) in ch.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            let w = (((v as f64).ln() - log_max) / temperature).exp();
            let (x, y) = g.cell_center(j / g.width, j % g.width);
            sw += w;
            sx += w * x;
            sy += w * y;
        }
        coords[(0, i)] = sx / sw;
        coords[(1, i)] = sy / sw;
        visible[i] = true;
    }
    Ok((Keypoints2D::new(coords), visible))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn single(x: f64, y: f64) -> Keypoints2D {
        Keypoints2D::new(Matrix2xX::from_column_slice(&[x, y]))
    }

    #[test]
    fn cell_center_peak() {
        let g = GridGeometry::default();
        let (x, y) = g.cell_center(7, 22);
        let (hm, vis) = render_heatmaps(&single(x, y), &g, DEFAULT_SIGMA);
        assert!(vis[0]);
        assert_eq!(hm.get(0, 7, 22), 1.0);
        let (dec, _) = decode_argmax(&hm);
        assert_eq!((dec.coords[(0, 0)], dec.coords[(1, 0)]), (x, y));
    }

    #[test]
    fn outside_window_is_invisible() {
        let g = GridGeometry::default();
        let (hm, vis) = render_heatmaps(&single(5.0, 0.0), &g, DEFAULT_SIGMA);
        assert!(!vis[0]);
        assert!(hm.channel(0).iter().all(|&v| v == 0.0));
        let (_, dvis) = decode_argmax(&hm);
        assert!(!dvis[0]);
    }

    #[test]
    fn render_matches_double_loop() {
        let g = GridGeometry::new(16, 12, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (px, py) = (rng.random_range(-0.8..0.8), rng.random_range(-0.6..0.6));
            let sigma = rng.random_range(0.5..3.0);
            let (hm, _) = render_heatmaps(&single(px, py), &g, sigma);
            for r in 0..12 {
                for c in 0..16 {
                    let cx = (c as f64 + 0.5 - 8.0) * 0.1;
                    let cy = (r as f64 + 0.5 - 6.0) * 0.1;
                    let d2 = ((cx - px).powi(2) + (cy - py).powi(2)) / 0.01;
                    let want = (-d2 / (2.0 * sigma * sigma)).exp();
                    assert!((hm.get(0, r, c) as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn argmax_quantization_bound() {
        let g = GridGeometry::default();
        let (hx, hy) = g.half_extent();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (px, py) = (rng.random_range(-hx..hx), rng.random_range(-hy..hy));
            let (hm, _) = render_heatmaps(&single(px, py), &g, DEFAULT_SIGMA);
            let (dec, vis) = decode_argmax(&hm);
            assert!(vis[0]);
            let err = ((dec.coords[(0, 0)] - px).powi(2) + (dec.coords[(1, 0)] - py).powi(2)).sqrt();
            assert!(err <= g.half_cell_diagonal() + 1e-12, "err {err} at ({px}, {py})");
        }
    }

    #[test]
    fn render_shifts_with_one_cell_translation() {
        let g = GridGeometry::default();
        let (a, _) = render_heatmaps(&single(0.013, -0.021), &g, DEFAULT_SIGMA);
        let (b, _) = render_heatmaps(&single(0.013 + g.cell_size, -0.021), &g, DEFAULT_SIGMA);
        for r in 0..g.height {
            for c in 1..g.width {
                assert!((a.get(0, r, c - 1) - b.get(0, r, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let g = GridGeometry::default();
        let (hm, _) = render_heatmaps(&single(0.1, 0.2), &g, DEFAULT_SIGMA);
        assert_eq!(corrupt_salt_pepper(&hm, &NoiseConfig::new(0.0, 9).unwrap()), hm);
    }

    #[test]
    fn full_noise_is_binary() {
        let g = GridGeometry::default();
        let (hm, _) = render_heatmaps(&single(0.1, 0.2), &g, DEFAULT_SIGMA);
        let out = corrupt_salt_pepper(&hm, &NoiseConfig::new(1.0, 9).unwrap());
        assert!(out.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        let ones = out.channel(0).iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, g.cells() / 2);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let g = GridGeometry::default();
        let (hm, _) = render_heatmaps(&single(0.1, 0.2), &g, DEFAULT_SIGMA);
        let a = corrupt_salt_pepper(&hm, &NoiseConfig::new(0.1, 1).unwrap());
        let b = corrupt_salt_pepper(&hm, &NoiseConfig::new(0.1, 1).unwrap());
        let c = corrupt_salt_pepper(&hm, &NoiseConfig::new(0.1, 2).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn corrupted_cell_count_is_within_binomial_band() {
        let g = GridGeometry::default();
        let zero = HeatmapStack::zeros(g, 1);
        let p = 0.1;
        let n = g.cells() as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        for seed in 0..100 {
            // start from a value no corruption can produce
            let mut hm = zero.clone();
            hm.channel_mut(0).fill(0.5);
            let out = corrupt_salt_pepper(&hm, &NoiseConfig::new(p, seed).unwrap());
            let changed = out.channel(0).iter().filter(|&&v| v != 0.5).count() as f64;
            assert!((changed - p * n).abs() <= 3.0 * sd);
        }
    }

    #[test]
    fn invalid_noise_level_is_rejected() {
        assert!(NoiseConfig::new(1.5, 0).is_err());
        assert!(NoiseConfig::new(-0.1, 0).is_err());
    }

    #[test]
    fn soft_decode_point_mass_and_symmetry() {
        let g = GridGeometry::default();
        let mut hm = HeatmapStack::zeros(g, 1);
        hm.channel_mut(0)[5 * g.width + 9] = 0.7;
        let (dec, vis) = decode_soft(&hm, 1.0).unwrap();
        assert!(vis[0]);
        let (x, y) = g.cell_center(5, 9);
        assert_eq!((dec.coords[(0, 0)], dec.coords[(1, 0)]), (x, y));

        hm.channel_mut(0)[5 * g.width + 13] = 0.7;
        let (dec, _) = decode_soft(&hm, 0.5).unwrap();
        let (x2, _) = g.cell_center(5, 13);
        assert!((dec.coords[(0, 0)] - 0.5 * (x + x2)).abs() < 1e-12);
        assert!((dec.coords[(1, 0)] - y).abs() < 1e-12);
    }

    #[test]
    fn soft_decode_approaches_argmax() {
        let g = GridGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = single(rng.random_range(-0.8..0.8), rng.random_range(-0.6..0.6));
            let (hm, _) = render_heatmaps(&p, &g, DEFAULT_SIGMA);
            let (arg, _) = decode_argmax(&hm);
            let dist = |t: f64| {
                let (s, _) = decode_soft(&hm, t).unwrap();
                (s.coords - &arg.coords).norm()
            };
            let (d1, d2, d3) = (dist(1.0), dist(0.1), dist(0.01));
            assert!(d2 <= d1 + 1e-12 && d3 <= d2 + 1e-12, "{d1} {d2} {d3}");
            assert!(d3 < 0.5 * g.cell_size, "{d3}");
        }
    }

    #[test]
    fn soft_decode_rejects_bad_temperature() {
        let hm = HeatmapStack::zeros(GridGeometry::default(), 1);
        assert!(decode_soft(&hm, 0.0).is_err());
    }
}
