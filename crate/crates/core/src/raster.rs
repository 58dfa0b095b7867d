//! CPU tile rasterizer.
//!
//! Splats are projected with the EWA construction, sorted globally
//! front-to-back by camera depth (ties by source index), binned into 16×16
//! tiles by exact 3σ-ellipse/tile overlap, and alpha composited per pixel.
//! Besides the image, the rasterizer reports the counters the LOD pipeline
//! optimizes against: splats binned per tile, visible splats per pixel, and
//! each splat's maximum composited weight.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::{effective_covariance, Camera, Gaussian};
use crate::{Error, Result};

pub const TILE_SIZE: usize = 16;

/// Squared Mahalanobis radius of a splat's support (3σ).
pub const SUPPORT_RADIUS2: f64 = 9.0;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    /// Upper clamp on per-splat alpha.
    pub alpha_max: f64,
    /// Alphas below this are skipped.
    pub alpha_min: f64,
    /// A pixel stops compositing once transmittance drops below this.
    pub t_min: f64,
    /// Screen-space dilation σ² (px²) with opacity compensation; 0 disables it.
    pub dilation: f64,
    pub track_max_weight: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            t_min: 1e-4,
            dilation: 0.1,
            track_max_weight: false,
        }
    }
}

/// A Gaussian projected into screen space.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity_eff: f64,
    pub color: [f64; 3],
    pub source_index: u32,
}

impl Splat2D {
    /// Squared Mahalanobis distance of pixel position `p` from the mean.
    #[inline]
    pub fn mahalanobis2(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        self.conic[(0, 0)] * dx * dx + 2.0 * self.conic[(0, 1)] * dx * dy + self.conic[(1, 1)] * dy * dy
    }

    /// Alpha at pixel position `p`, zero outside the 3σ support.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64, alpha_max: f64) -> f64 {
        let m = self.mahalanobis2(px, py);
        if m > SUPPORT_RADIUS2 {
            return 0.0;
        }
        (self.opacity_eff * (-0.5 * m).exp()).min(alpha_max)
    }

    /// Axis-aligned half extents of the 3σ ellipse.
    pub fn half_extents(&self) -> (f64, f64) {
        let r = SUPPORT_RADIUS2.sqrt();
        (r * self.cov2d[(0, 0)].sqrt(), r * self.cov2d[(1, 1)].sqrt())
    }

    /// Whether the 3σ ellipse intersects the closed rectangle `[x0,x1]×[y0,y1]`.
    pub fn overlaps_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        let (ex, ey) = self.half_extents();
        let (mx, my) = (self.mean2d.x, self.mean2d.y);
        if mx + ex < x0 || mx - ex > x1 || my + ey < y0 || my - ey > y1 {
            return false;
        }
        if (x0..=x1).contains(&mx) && (y0..=y1).contains(&my) {
            return true;
        }
        // The quadratic form is convex, so with the mean outside the box its
        // minimum over the box lies on one of the four edges.
        let a = self.conic[(0, 0)];
        let b = self.conic[(0, 1)];
        let c = self.conic[(1, 1)];
        let q = |dx: f64, dy: f64| a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        let mut best = f64::INFINITY;
        for y in [y0, y1] {
            let dy = y - my;
            let dx = (-b * dy / a).clamp(x0 - mx, x1 - mx);
            best = best.min(q(dx, dy));
        }
        for x in [x0, x1] {
            let dx = x - mx;
            let dy = (-b * dx / c).clamp(y0 - my, y1 - my);
            best = best.min(q(dx, dy));
        }
        best <= SUPPORT_RADIUS2 * (1.0 + 1e-9) + 1e-9
    }
}

/// Evaluates view-dependent color: `0.5 + Σ basis_k(dir)·coeff_k`, clamped
/// to `≥ 0`. `coeffs` is coefficient-major (`3 * k + channel`).
pub fn evaluate_sh(coeffs: &[f64], dir: &Vector3<f64>, degree: usize) -> Result<[f64; 3]> {
    if degree > 3 {
        return Err(Error::InvalidArgument(format!("sh degree {degree} > 3")));
    }
    let terms = (degree + 1) * (degree + 1);
    if coeffs.len() != 3 * terms {
        return Err(Error::InvalidArgument(format!(
            "{} sh coefficients for degree {degree}, expected {}",
            coeffs.len(),
            3 * terms
        )));
    }
    Ok(eval_sh_unchecked(coeffs, dir, degree))
}

fn eval_sh_unchecked(coeffs: &[f64], dir: &Vector3<f64>, degree: usize) -> [f64; 3] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut basis = [0.0f64; 16];
    basis[0] = SH_C0;
    if degree >= 1 {
        basis[1] = -SH_C1 * y;
        basis[2] = SH_C1 * z;
        basis[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, yz, xz) = (x * y, y * z, x * z);
        basis[4] = SH_C2[0] * xy;
        basis[5] = SH_C2[1] * yz;
        basis[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        basis[7] = SH_C2[3] * xz;
        basis[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            basis[9] = SH_C3[0] * y * (3.0 * xx - yy);
            basis[10] = SH_C3[1] * xy * z;
            basis[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            basis[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            basis[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            basis[14] = SH_C3[5] * z * (xx - yy);
            basis[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    let terms = (degree + 1) * (degree + 1);
    let mut rgb = [0.5f64; 3];
    for (k, b) in basis.iter().take(terms).enumerate() {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += b * coeffs[3 * k + c];
        }
    }
    rgb.map(|v| v.max(0.0))
}

/// EWA projection of one Gaussian. Returns `None` when it is culled (behind
/// the near plane, degenerate, or its 3σ ellipse misses the viewport).
pub fn project_gaussian(g: &Gaussian, cam: &Camera, cfg: &RasterConfig) -> Option<Splat2D> {
    project_gaussian_with_index(g, cam, cfg, 0)
}

/// Extra frustum margin for the projection Jacobian, as a fraction of the
/// image extent on each side.
pub const JACOBIAN_MARGIN: f64 = 0.15;

fn frustum_clamp(u: f64, principal: f64, extent: f64, focal: f64) -> f64 {
    let lo = -principal / focal;
    let hi = (extent - principal) / focal;
    let m = JACOBIAN_MARGIN * (hi - lo);
    u.clamp(lo - m, hi + m)
}

pub fn project_gaussian_with_index(
    g: &Gaussian,
    cam: &Camera,
    cfg: &RasterConfig,
    source_index: u32,
) -> Option<Splat2D> {
    let w = cam.world_to_camera();
    let t = w * (g.mean - cam.position);
    if !(t.z > cam.near_plane) {
        return None;
    }
    let (fx, fy) = (cam.focal.x, cam.focal.y);
    let inv_z = 1.0 / t.z;
    // Jacobian at the direction clamped to the enlarged frustum.
    let (ux, uy) = (
        frustum_clamp(t.x * inv_z, cam.principal_point.x, cam.width() as f64, fx),
        frustum_clamp(t.y * inv_z, cam.principal_point.y, cam.height() as f64, fy),
    );
    let j = Matrix2x3::new(fx * inv_z, 0.0, -fx * ux * inv_z, 0.0, fy * inv_z, -fy * uy * inv_z);
    let jw = j * w;
    let mut cov = jw * effective_covariance(g) * jw.transpose();
    cov = (cov + cov.transpose()) * 0.5;
    let det_raw = cov.determinant();
    let mut aa_factor = 1.0;
    if cfg.dilation > 0.0 {
        cov += Matrix2::identity() * cfg.dilation;
        aa_factor = (det_raw.max(0.0) / cov.determinant()).sqrt();
    }
    let det = cov.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let mean2d = Vector2::new(fx * t.x * inv_z + cam.principal_point.x, fy * t.y * inv_z + cam.principal_point.y);
    let opacity_eff = (g.opacity * g.filter_opacity_factor() * aa_factor).clamp(0.0, 1.0);
    let degree = g.sh_degree()?;
    let dir = (g.mean - cam.position).normalize();
    let color = eval_sh_unchecked(&g.sh_coeffs, &dir, degree);
    let splat = Splat2D {
        mean2d,
        cov2d: cov,
        conic,
        depth: t.z,
        opacity_eff,
        color,
        source_index,
    };
    if !splat.overlaps_rect(0.0, 0.0, cam.width() as f64, cam.height() as f64) {
        return None;
    }
    Some(splat)
}

/// Projects `(gaussian, opacity modulation)` pairs in parallel. Each splat's
/// `source_index` is its position in `items`.
pub fn project_all(items: &[(&Gaussian, f64)], cam: &Camera, cfg: &RasterConfig) -> Vec<Splat2D> {
    items
        .par_iter()
        .enumerate()
        .filter_map(|(i, (g, m))| {
            let mut s = project_gaussian_with_index(g, cam, cfg, i as u32)?;
            s.opacity_eff = (s.opacity_eff * m).clamp(0.0, 1.0);
            Some(s)
        })
        .collect()
}

/// Tile grid dimensions for a camera.
pub fn tile_grid(cam: &Camera) -> (usize, usize) {
    (cam.width().div_ceil(TILE_SIZE), cam.height().div_ceil(TILE_SIZE))
}

fn tile_rect(tx: usize, ty: usize, width: usize, height: usize) -> (f64, f64, f64, f64) {
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (
        x0 as f64,
        y0 as f64,
        (x0 + TILE_SIZE).min(width) as f64,
        (y0 + TILE_SIZE).min(height) as f64,
    )
}

fn covered_tiles(s: &Splat2D, width: usize, height: usize, mut visit: impl FnMut(usize, usize)) {
    let (tiles_x, tiles_y) = (width.div_ceil(TILE_SIZE), height.div_ceil(TILE_SIZE));
    let (ex, ey) = s.half_extents();
    let lo = |v: f64| ((v / TILE_SIZE as f64).floor().max(0.0)) as usize;
    let tx0 = lo(s.mean2d.x - ex);
    let ty0 = lo(s.mean2d.y - ey);
    let tx1 = lo(s.mean2d.x + ex).min(tiles_x - 1);
    let ty1 = lo(s.mean2d.y + ey).min(tiles_y - 1);
    for ty in ty0..=ty1 {
        for tx in tx0..=tx1 {
            let (x0, y0, x1, y1) = tile_rect(tx, ty, width, height);
            if s.overlaps_rect(x0, y0, x1, y1) {
                visit(tx, ty);
            }
        }
    }
}

/// Front-to-back order: camera depth, ties broken by source index.
pub fn depth_order(splats: &[Splat2D]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
        sa.depth.total_cmp(&sb.depth).then(sa.source_index.cmp(&sb.source_index))
    });
    order
}

/// Number of splats binned to each tile, without shading. Row-major over
/// tiles.
pub fn tile_bin_counts(splats: &[Splat2D], cam: &Camera) -> Vec<u32> {
    let (width, height) = (cam.width(), cam.height());
    let (tiles_x, tiles_y) = tile_grid(cam);
    let mut counts = vec![0u32; tiles_x * tiles_y];
    for s in splats {
        covered_tiles(s, width, height, |tx, ty| counts[ty * tiles_x + tx] += 1);
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major linear RGB.
    pub image: Vec<[f64; 3]>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Row-major over tiles.
    pub per_tile_count: Vec<u32>,
    pub per_pixel_visible: Vec<u32>,
    /// Indexed by source index.
    pub per_gaussian_max_weight: Option<Vec<f64>>,
}

impl TileRenderOutput {
    pub fn mean_tile_count(&self) -> f64 {
        if self.per_tile_count.is_empty() {
            return 0.0;
        }
        self.per_tile_count.iter().map(|&c| c as f64).sum::<f64>() / self.per_tile_count.len() as f64
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.image[y * self.width + x]
    }

    pub fn save_image(&self, path: &Path) -> Result<()> {
        save_image(&self.image, self.width, self.height, path)
    }

    /// `tile_x,tile_y,count` rows.
    pub fn write_tile_counts_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tile_x,tile_y,count")?;
        for ty in 0..self.tiles_y {
            for tx in 0..self.tiles_x {
                writeln!(w, "{},{},{}", tx, ty, self.per_tile_count[ty * self.tiles_x + tx])?;
            }
        }
        Ok(())
    }
}

struct TileResult {
    pixels: Vec<[f64; 3]>,
    visible: Vec<u32>,
    max_weight: Vec<f64>,
}

/// Composites `splats` (already projected for `cam`).
///
/// `source_count` sizes `per_gaussian_max_weight`; every `source_index` must
/// be below it.
pub fn rasterize(splats: &[Splat2D], cam: &Camera, source_count: usize, cfg: &RasterConfig) -> TileRenderOutput {
    let (width, height) = (cam.width(), cam.height());
    let (tiles_x, tiles_y) = tile_grid(cam);
    let order = depth_order(splats);

    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        covered_tiles(&splats[i as usize], width, height, |tx, ty| bins[ty * tiles_x + tx].push(i));
    }

    let results: Vec<TileResult> = bins
        .par_iter()
        .enumerate()
        .map(|(t, list)| render_tile(splats, list, t % tiles_x, t / tiles_x, width, height, cfg))
        .collect();

    let mut image = vec![[0.0; 3]; width * height];
    let mut per_pixel_visible = vec![0u32; width * height];
    let mut max_weight = cfg.track_max_weight.then(|| vec![0.0f64; source_count]);
    for (t, res) in results.into_iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
        let tw = (x0 + TILE_SIZE).min(width) - x0;
        for (k, (px, vis)) in res.pixels.iter().zip(&res.visible).enumerate() {
            let (x, y) = (x0 + k % tw, y0 + k / tw);
            image[y * width + x] = *px;
            per_pixel_visible[y * width + x] = *vis;
        }
        if let Some(mw) = max_weight.as_mut() {
            for (&i, &w) in bins[t].iter().zip(&res.max_weight) {
                let src = splats[i as usize].source_index as usize;
                if w > mw[src] {
                    mw[src] = w;
                }
            }
        }
    }

    TileRenderOutput {
        width,
        height,
        image,
        tiles_x,
        tiles_y,
        per_tile_count: bins.iter().map(|b| b.len() as u32).collect(),
        per_pixel_visible,
        per_gaussian_max_weight: max_weight,
    }
}

fn render_tile(
    splats: &[Splat2D],
    list: &[u32],
    tx: usize,
    ty: usize,
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> TileResult {
    let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
    let (x1, y1) = ((x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height));
    let n = (x1 - x0) * (y1 - y0);
    let mut pixels = Vec::with_capacity(n);
    let mut visible = Vec::with_capacity(n);
    let mut max_weight = if cfg.track_max_weight { vec![0.0; list.len()] } else { Vec::new() };
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0f64;
            let mut rgb = [0.0f64; 3];
            let mut vis = 0u32;
            for (k, &i) in list.iter().enumerate() {
                let s = &splats[i as usize];
                let alpha = s.alpha_at(px, py, cfg.alpha_max);
                if alpha < cfg.alpha_min || alpha <= 0.0 {
                    continue;
                }
                let w = t * alpha;
                for (acc, col) in rgb.iter_mut().zip(s.color) {
                    *acc += w * col;
                }
                vis += 1;
                if cfg.track_max_weight && w > max_weight[k] {
                    max_weight[k] = w;
                }
                t *= 1.0 - alpha;
                if t < cfg.t_min {
                    break;
                }
            }
            pixels.push(rgb);
            visible.push(vis);
        }
    }
    TileResult { pixels, visible, max_weight }
}

/// Projects and rasterizes `gaussians` with unit modulation.
pub fn render_gaussians(gaussians: &[Gaussian], cam: &Camera, cfg: &RasterConfig) -> TileRenderOutput {
    let items: Vec<(&Gaussian, f64)> = gaussians.iter().map(|g| (g, 1.0)).collect();
    render_items(&items, cam, cfg)
}

pub fn render_items(items: &[(&Gaussian, f64)], cam: &Camera, cfg: &RasterConfig) -> TileRenderOutput {
    let splats = project_all(items, cam, cfg);
    rasterize(&splats, cam, items.len(), cfg)
}

/// Pixel counts per bin of `per_pixel_visible`. Bin `k` holds values in
/// `[edges[k], edges[k+1])`; the last bin is open above and values below
/// `edges[0]` land in the first bin, so the total is always the pixel count.
pub fn visibility_histogram(out: &TileRenderOutput, bin_edges: &[u32]) -> Result<Vec<u64>> {
    if bin_edges.is_empty() {
        return Err(Error::InvalidArgument("histogram needs at least one bin edge".into()));
    }
    if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("histogram bin edges must be strictly increasing".into()));
    }
    let mut hist = vec![0u64; bin_edges.len()];
    for &v in &out.per_pixel_visible {
        let k = bin_edges.partition_point(|&e| e <= v).saturating_sub(1);
        hist[k] += 1;
    }
    Ok(hist)
}

/// Quantizes to 8 bits per channel, clamping to [0, 1].
pub fn to_rgb8(image: &[[f64; 3]]) -> Vec<u8> {
    image
        .iter()
        .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect()
}

/// Writes an 8-bit RGB image; PPM (binary P6) for `.ppm`, PNG otherwise.
pub fn save_image(image: &[[f64; 3]], width: usize, height: usize, path: &Path) -> Result<()> {
    let bytes = to_rgb8(image);
    let is_ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{width} {height}\n255\n")?;
        f.write_all(&bytes)?;
        f.flush()?;
    } else {
        image::save_buffer(path, &bytes, width as u32, height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::InvalidArgument(format!("failed to write {}: {e}", path.display())))?;
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images in [0,1]. Identical images
/// give `+∞`.
pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a
        .iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).powi(2)))
        .sum::<f64>()
        / (3 * a.len()) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Max per-channel absolute difference.
pub fn linf(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .fold(0.0, f64::max)
}
