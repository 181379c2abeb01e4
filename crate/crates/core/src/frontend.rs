//! Adaptive visual frontend.
//!
//! High-resolution images are split into a grid of slices whose aspect ratio
//! tracks the original image, each slice is resized to the encoder region and
//! turned into patch tokens by a deterministic seeded linear map, and the
//! token grids are compressed by pixel shuffle. Everything here is a pure
//! function of (image bytes, seed, config).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim("image", format!("empty image {width}×{height}")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::dim(
                "image",
                format!(
                    "{width}×{height} RGB needs {} bytes, got {}",
                    3 * width * height,
                    pixels.len()
                ),
            ));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Image::new(width, height, pixels)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Slicing plan: `rows_m × cols_n` slices in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SliceGrid {
    pub rows_m: usize,
    pub cols_n: usize,
}

impl SliceGrid {
    pub fn slice_count(&self) -> usize {
        self.rows_m * self.cols_n
    }
}

/// An `grid_h × grid_w` grid of `dim_d`-dimensional visual tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim_d: usize,
    pub values: Tensor,
}

impl PatchTokens {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            [h, w, d] => Ok(PatchTokens {
                grid_h: *h,
                grid_w: *w,
                dim_d: *d,
                values,
            }),
            s => Err(Error::dim(
                "patch_tokens",
                format!("expected h×w×d grid, got {s:?}"),
            )),
        }
    }

    pub fn token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    /// Images with `width·height <= threshold_px²` stay unsliced.
    pub threshold_px: usize,
    /// Encoder region each slice is resized to.
    pub vit_region_w: usize,
    pub vit_region_h: usize,
    pub patch_size: usize,
    pub shuffle_rate_r: usize,
    pub n_max: usize,
    /// Output dimension of the stub patch encoder.
    pub token_dim: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            threshold_px: 448,
            vit_region_w: 448,
            vit_region_h: 448,
            patch_size: 32,
            shuffle_rate_r: 2,
            n_max: 12,
            token_dim: 16,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vit_region_w == 0 || self.vit_region_h == 0 || self.patch_size == 0 {
            return Err(Error::config("vit region and patch size must be positive"));
        }
        if self.vit_region_w % self.patch_size != 0 || self.vit_region_h % self.patch_size != 0 {
            return Err(Error::config(format!(
                "vit region {}×{} not divisible by patch size {}",
                self.vit_region_w, self.vit_region_h, self.patch_size
            )));
        }
        if self.shuffle_rate_r == 0
            || (self.vit_region_w / self.patch_size) % self.shuffle_rate_r != 0
            || (self.vit_region_h / self.patch_size) % self.shuffle_rate_r != 0
        {
            return Err(Error::config(format!(
                "token grid {}×{} not divisible by shuffle rate {}",
                self.vit_region_h / self.patch_size,
                self.vit_region_w / self.patch_size,
                self.shuffle_rate_r
            )));
        }
        if self.n_max < 2 {
            return Err(Error::config("n_max must be at least 2"));
        }
        if self.token_dim == 0 {
            return Err(Error::config("token_dim must be positive"));
        }
        Ok(())
    }

    pub fn tokens_per_side_h(&self) -> usize {
        self.vit_region_h / self.patch_size
    }

    pub fn tokens_per_side_w(&self) -> usize {
        self.vit_region_w / self.patch_size
    }
}

/// Chooses the slice grid whose per-slice aspect ratio is closest (in log
/// space) to the encoder region's.
///
/// Images within the threshold stay 1×1. Otherwise the target slice count
/// `N* = round(area / region area)` is clamped into `[2, n_max]` and the
/// candidates `{N*−1, N*, N*+1} ∩ [2, n_max]` are searched over every factor
/// pair, scoring `|log((width/cols)/(height/rows)) − log(Wv/Hv)|`; ties break
/// to smaller N, then smaller |rows−cols|, then smaller rows.
pub fn select_slice_grid(width: usize, height: usize, config: &FrontendConfig) -> SliceGrid {
    if width * height <= config.threshold_px * config.threshold_px {
        return SliceGrid { rows_m: 1, cols_n: 1 };
    }
    let region = (config.vit_region_w * config.vit_region_h) as f64;
    let target = ((width * height) as f64 / region).round() as i64;
    let target = target.clamp(2, config.n_max as i64);
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for n in [target - 1, target, target + 1] {
        if n < 2 || n > config.n_max as i64 {
            continue;
        }
        let n = n as usize;
        for rows in 1..=n {
            if n % rows != 0 {
                continue;
            }
            let cols = n / rows;
            let score = grid_score(width, height, rows, cols, config);
            let key = (
                score,
                n,
                rows.abs_diff(cols),
                rows,
            );
            let better = match &best {
                None => true,
                Some((bs, bn, bd, br)) => {
                    (key.0, key.1, key.2, key.3) < (*bs, *bn, *bd, *br)
                }
            };
            if better {
                best = Some(key);
            }
        }
    }
    let (_, n, _, rows) = best.expect("candidate set is never empty");
    SliceGrid { rows_m: rows, cols_n: n / rows }
}

/// `|log((width/cols)/(height/rows)) − log(Wv/Hv)|`
pub fn grid_score(
    width: usize,
    height: usize,
    rows: usize,
    cols: usize,
    config: &FrontendConfig,
) -> f64 {
    let slice_ratio = (width as f64 / cols as f64) / (height as f64 / rows as f64);
    let region_ratio = config.vit_region_w as f64 / config.vit_region_h as f64;
    (slice_ratio.ln() - region_ratio.ln()).abs()
}

/// Cuts the image into `rows_m × cols_n` slices (row-major), balancing
/// remainders: slice j spans pixels `[floor(j·W/n), floor((j+1)·W/n))`.
pub fn slice_image(image: &Image, grid: &SliceGrid) -> Vec<Image> {
    let mut slices = Vec::with_capacity(grid.slice_count());
    for row in 0..grid.rows_m {
        let y0 = row * image.height / grid.rows_m;
        let y1 = (row + 1) * image.height / grid.rows_m;
        for col in 0..grid.cols_n {
            let x0 = col * image.width / grid.cols_n;
            let x1 = (col + 1) * image.width / grid.cols_n;
            let mut pixels = Vec::with_capacity(3 * (x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                let start = 3 * (y * image.width + x0);
                pixels.extend_from_slice(&image.pixels[start..start + 3 * (x1 - x0)]);
            }
            slices.push(Image::new(x1 - x0, y1 - y0, pixels).expect("non-empty slice"));
        }
    }
    slices
}

/// Rescales a slice to the encoder region, each axis independently
/// (`Wv/ori_width` horizontally, `Hv/ori_height` vertically). Bilinear with
/// half-pixel centers; results round half up.
pub fn resize_slice(slice: &Image, config: &FrontendConfig) -> Result<Image> {
    let (ow, oh) = (config.vit_region_w, config.vit_region_h);
    if slice.width == ow && slice.height == oh {
        return Ok(slice.clone());
    }
    let sx = slice.width as f64 / ow as f64;
    let sy = slice.height as f64 / oh as f64;
    let mut pixels = vec![0u8; 3 * ow * oh];
    for dy in 0..oh {
        let src_y = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (slice.height - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(slice.height - 1);
        let fy = src_y - y0 as f64;
        for dx in 0..ow {
            let src_x = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (slice.width - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(slice.width - 1);
            let fx = src_x - x0 as f64;
            for c in 0..3 {
                let p00 = slice.pixel(x0, y0)[c] as f64;
                let p10 = slice.pixel(x1, y0)[c] as f64;
                let p01 = slice.pixel(x0, y1)[c] as f64;
                let p11 = slice.pixel(x1, y1)[c] as f64;
                let top = p00 + (p10 - p00) * fx;
                let bottom = p01 + (p11 - p01) * fx;
                let v = top + (bottom - top) * fy;
                pixels[3 * (dy * ow + dx) + c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::new(ow, oh, pixels)
}

/// The frozen patch-projection weights standing in for a pretrained encoder
/// backbone: one fixed seeded linear map applied to every normalized patch.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    /// `[patch²·3 × token_dim]`
    pub weight: Tensor,
    /// `[token_dim]`
    pub bias: Tensor,
    pub patch_size: usize,
}

impl StubEncoder {
    pub fn seeded(config: &FrontendConfig, seed: u64) -> Self {
        let fan_in = config.patch_size * config.patch_size * 3;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = SplitMix64::new(seed ^ 0x5f75_6253_7475_6265);
        let weight = Tensor::rand_uniform(vec![fan_in, config.token_dim], -bound, bound, &mut rng);
        let bias = Tensor::rand_uniform(vec![config.token_dim], -bound, bound, &mut rng);
        StubEncoder {
            weight,
            bias,
            patch_size: config.patch_size,
        }
    }

    /// Token for one flattened patch (pixels normalized to [0,1]).
    fn encode_patch(&self, patch: &[f64]) -> Vec<f64> {
        let d = self.bias.numel();
        let mut out = self.bias.data().to_vec();
        for (k, &p) in patch.iter().enumerate() {
            let row = &self.weight.data()[k * d..(k + 1) * d];
            for j in 0..d {
                out[j] += p * row[j];
            }
        }
        out
    }
}

/// Encodes a resized slice into an `(Hv/patch) × (Wv/patch)` token grid with
/// the seeded stub encoder. Deterministic given (pixels, seed, config).
pub fn stub_patch_encoder(slice: &Image, config: &FrontendConfig, seed: u64) -> Result<PatchTokens> {
    if slice.width % config.patch_size != 0 || slice.height % config.patch_size != 0 {
        return Err(Error::config(format!(
            "slice {}×{} not divisible by patch size {}",
            slice.width, slice.height, config.patch_size
        )));
    }
    let encoder = StubEncoder::seeded(config, seed);
    encode_with(slice, config, &encoder)
}

pub fn encode_with(slice: &Image, config: &FrontendConfig, encoder: &StubEncoder) -> Result<PatchTokens> {
    let p = config.patch_size;
    let (gw, gh) = (slice.width / p, slice.height / p);
    let d = config.token_dim;
    let mut values = vec![0.0; gh * gw * d];
    let mut patch = vec![0.0; p * p * 3];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    let rgb = slice.pixel(gx * p + px, gy * p + py);
                    for c in 0..3 {
                        patch[k] = rgb[c] as f64 / 255.0;
                        k += 1;
                    }
                }
            }
            let token = encoder.encode_patch(&patch);
            values[(gy * gw + gx) * d..(gy * gw + gx) * d + d].copy_from_slice(&token);
        }
    }
    PatchTokens::new(Tensor::new(vec![gh, gw, d], values)?)
}

/// Pixel-shuffle compression: token count drops by `r²`, channels grow by
/// `r²`.
pub fn compress_tokens(tokens: &PatchTokens, r: usize) -> Result<PatchTokens> {
    PatchTokens::new(ops::pixel_shuffle_s2d(&tokens.values, r)?)
}

/// Full frontend: slice selection, per-slice resize + encode + compress.
/// Slices are processed independently and returned in row-major slice order;
/// no global thumbnail is prepended.
pub fn encode_image(
    image: &Image,
    config: &FrontendConfig,
    seed: u64,
) -> Result<(SliceGrid, Vec<PatchTokens>)> {
    config.validate()?;
    let grid = select_slice_grid(image.width, image.height, config);
    let encoder = StubEncoder::seeded(config, seed);
    let mut tokens = Vec::with_capacity(grid.slice_count());
    for slice in slice_image(image, &grid) {
        let resized = resize_slice(&slice, config)?;
        let raw = encode_with(&resized, config, &encoder)?;
        tokens.push(compress_tokens(&raw, config.shuffle_rate_r)?);
    }
    Ok((grid, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_within_threshold_is_1x1() {
        let cfg = FrontendConfig::default();
        let g = select_slice_grid(448, 448, &cfg);
        assert_eq!(g, SliceGrid { rows_m: 1, cols_n: 1 });
    }

    #[test]
    fn grid_for_1080p_and_transpose() {
        let cfg = FrontendConfig::default();
        let g = select_slice_grid(1920, 1080, &cfg);
        assert_eq!(g, SliceGrid { rows_m: 2, cols_n: 5 });
        let g = select_slice_grid(1080, 1920, &cfg);
        assert_eq!(g, SliceGrid { rows_m: 5, cols_n: 2 });
    }

    #[test]
    fn grid_is_total_and_bounded() {
        let cfg = FrontendConfig::default();
        for (w, h) in [(449, 448), (10_000, 300), (300, 10_000), (8000, 8000), (1, 1)] {
            let g = select_slice_grid(w, h, &cfg);
            assert!(g.slice_count() <= cfg.n_max);
            if w * h > cfg.threshold_px * cfg.threshold_px {
                assert!(g.slice_count() >= 2, "{w}×{h} gave {g:?}");
            }
        }
    }

    #[test]
    fn resize_identity_and_forced_shape() {
        let cfg = FrontendConfig::default();
        let img = Image::filled(448, 448, [9, 90, 200]).unwrap();
        let out = resize_slice(&img, &cfg).unwrap();
        assert_eq!(out.pixels, img.pixels);

        let wide = Image::filled(896, 448, [1, 2, 3]).unwrap();
        let out = resize_slice(&wide, &cfg).unwrap();
        assert_eq!((out.width, out.height), (448, 448));
    }

    #[test]
    fn resize_two_pixel_average() {
        // 2×1 gray values (0, 255) to 1×1: both samples sit at distance 0.5
        // from the output center, so the bilinear value is 127.5, which
        // rounds half up to 128.
        let cfg = FrontendConfig {
            vit_region_w: 1,
            vit_region_h: 1,
            patch_size: 1,
            shuffle_rate_r: 1,
            ..FrontendConfig::default()
        };
        let mut img = Image::filled(2, 1, [0, 0, 0]).unwrap();
        img.set_pixel(1, 0, [255, 255, 255]);
        let out = resize_slice(&img, &cfg).unwrap();
        assert_eq!(out.pixels, vec![128, 128, 128]);
    }

    #[test]
    fn stub_encoder_shape_determinism_and_zero_input() {
        let cfg = FrontendConfig::default();
        let img = Image::filled(448, 448, [0, 0, 0]).unwrap();
        let t1 = stub_patch_encoder(&img, &cfg, 7).unwrap();
        assert_eq!((t1.grid_h, t1.grid_w, t1.dim_d), (14, 14, cfg.token_dim));

        let t2 = stub_patch_encoder(&img, &cfg, 7).unwrap();
        assert_eq!(t1.values.data(), t2.values.data());

        // All-black input: every token is the bias vector.
        let enc = StubEncoder::seeded(&cfg, 7);
        for tok in t1.values.data().chunks(cfg.token_dim) {
            assert_eq!(tok, enc.bias.data());
        }
    }

    #[test]
    fn compress_tokens_counts() {
        let grid = Tensor::zeros(vec![14, 14, 64]);
        let t = PatchTokens::new(grid).unwrap();
        let c = compress_tokens(&t, 2).unwrap();
        assert_eq!((c.grid_h, c.grid_w, c.dim_d), (7, 7, 256));
        assert_eq!(t.token_count(), 196);
        assert_eq!(c.token_count(), 49);
        // r = 1 is the identity.
        let id = compress_tokens(&t, 1).unwrap();
        assert_eq!(id.values.data(), t.values.data());
        // Scalar count is preserved.
        assert_eq!(
            t.grid_h * t.grid_w * t.dim_d,
            c.grid_h * c.grid_w * c.dim_d
        );
    }

    #[test]
    fn slice_image_partitions_exactly() {
        let img = Image::filled(10, 7, [5, 5, 5]).unwrap();
        let grid = SliceGrid { rows_m: 2, cols_n: 3 };
        let slices = slice_image(&img, &grid);
        assert_eq!(slices.len(), 6);
        let total: usize = slices.iter().map(|s| s.width * s.height).sum();
        assert_eq!(total, 70);
        // Column widths 3/3/4 and row heights 3/4 from the balanced split.
        assert_eq!(slices[0].width, 3);
        assert_eq!(slices[2].width, 4);
        assert_eq!(slices[0].height, 3);
        assert_eq!(slices[3].height, 4);
    }
}
