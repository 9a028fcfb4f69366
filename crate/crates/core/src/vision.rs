//! Image frontend: budgeted resize, patch extraction, and the stub vision
//! encoder that stands in for a pretrained model at desk scale.

use crate::block::{block_forward, AttnMask, BlockParams, BlockVars};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamGroup};
use crate::sequence::TokenSequence;
use crate::tensor::{Tape, Tensor, ValId};
use rand::Rng;
use std::io::Read;
use std::path::Path;

pub const CHANNELS: usize = 3;

/// An RGB image with pixel values in [0, 1], row-major, channels interleaved
/// per pixel (R, G, B).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub height: usize,
    pub width: usize,
    pixels: Vec<f64>,
}

impl ImageInput {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::Image(format!(
                "pixel buffer has {} values, expected {}x{}x{}",
                pixels.len(),
                height,
                width,
                CHANNELS
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Image("pixel values must lie in [0, 1]".into()));
        }
        Ok(ImageInput {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        ImageInput {
            height,
            width,
            pixels,
        }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[(row * self.width + col) * CHANNELS + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let base = (row * self.width + col) * CHANNELS;
        self.pixels[base..base + 3].copy_from_slice(&rgb);
    }
}

// ── Budgeted resize ─────────────────────────────────────────────────────

/// Output pixel dimensions for an image resized to fit the patch budget.
///
/// Under-budget images are rounded to the nearest patch multiple (at least
/// one patch); they are never scaled up to fill the budget. Over-budget
/// images are shrunk by a single scale factor chosen so the patch area hits
/// the budget, then each dimension drops to a whole patch count, which keeps
/// the aspect ratio within one patch per dimension.
pub fn budget_dims(height: usize, width: usize, patch: usize, budget: usize) -> (usize, usize) {
    assert!(patch > 0 && budget > 0 && height > 0 && width > 0);
    let ceil_h = height.div_ceil(patch);
    let ceil_w = width.div_ceil(patch);
    if ceil_h * ceil_w <= budget {
        let round = |px: usize| -> usize {
            let down = px / patch;
            let rem = px % patch;
            let n = if rem * 2 >= patch { down + 1 } else { down };
            n.max(1)
        };
        return (round(height) * patch, round(width) * patch);
    }
    let a = height as f64 / patch as f64;
    let b = width as f64 / patch as f64;
    let s = (budget as f64 / (a * b)).sqrt();
    let mut ph = ((a * s).floor() as usize).max(1);
    let mut pw = ((b * s).floor() as usize).max(1);
    // Flooring cannot overshoot unless a dimension was clamped up to 1.
    while ph * pw > budget {
        if ph >= pw {
            ph -= 1;
        } else {
            pw -= 1;
        }
    }
    (ph * patch, pw * patch)
}

/// Resizes to the largest patch-aligned size within the patch budget,
/// preserving aspect ratio to within one patch per dimension.
pub fn fit_to_budget(image: &ImageInput, patch: usize, budget: usize) -> ImageInput {
    let (h, w) = budget_dims(image.height, image.width, patch, budget);
    if h == image.height && w == image.width {
        return image.clone();
    }
    bilinear_resize(image, h, w)
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn bilinear_resize(image: &ImageInput, out_h: usize, out_w: usize) -> ImageInput {
    assert!(out_h > 0 && out_w > 0);
    let sy = image.height as f64 / out_h as f64;
    let sx = image.width as f64 / out_w as f64;
    let mut pixels = vec![0.0; out_h * out_w * CHANNELS];
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (image.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (image.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let wx = fx - x0 as f64;
            for ch in 0..CHANNELS {
                let top = image.at(y0, x0, ch) * (1.0 - wx) + image.at(y0, x1, ch) * wx;
                let bot = image.at(y1, x0, ch) * (1.0 - wx) + image.at(y1, x1, ch) * wx;
                pixels[(oy * out_w + ox) * CHANNELS + ch] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    ImageInput {
        height: out_h,
        width: out_w,
        pixels,
    }
}

// ── Patch extraction ────────────────────────────────────────────────────

/// Non-overlapping square patches in row-major grid order. Each patch vector
/// lists its pixels row-major with channels interleaved (same layout as the
/// image, restricted to the patch), length `patch * patch * 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    /// `[rows * cols, patch * patch * 3]` flattened row-major.
    pub vectors: Vec<f64>,
}

impl PatchGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn vector_len(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

/// Splits an image whose dimensions are exact patch multiples.
pub fn patchify(image: &ImageInput, patch: usize) -> Result<PatchGrid> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::Contract(format!(
            "patchify needs dimensions divisible by {patch}, got {}x{}",
            image.height, image.width
        )));
    }
    let rows = image.height / patch;
    let cols = image.width / patch;
    let plen = patch * patch * CHANNELS;
    let mut vectors = vec![0.0; rows * cols * plen];
    for pr in 0..rows {
        for pc in 0..cols {
            let base = (pr * cols + pc) * plen;
            let mut at = base;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..CHANNELS {
                        vectors[at] = image.at(pr * patch + py, pc * patch + px, ch);
                        at += 1;
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch,
        vectors,
    })
}

/// Reassembles the image; exact inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> ImageInput {
    let h = grid.rows * grid.patch;
    let w = grid.cols * grid.patch;
    let plen = grid.vector_len();
    let mut pixels = vec![0.0; h * w * CHANNELS];
    for pr in 0..grid.rows {
        for pc in 0..grid.cols {
            let base = (pr * grid.cols + pc) * plen;
            let mut at = base;
            for py in 0..grid.patch {
                for px in 0..grid.patch {
                    for ch in 0..CHANNELS {
                        let row = pr * grid.patch + py;
                        let col = pc * grid.patch + px;
                        pixels[(row * w + col) * CHANNELS + ch] = grid.vectors[at];
                        at += 1;
                    }
                }
            }
        }
    }
    ImageInput {
        height: h,
        width: w,
        pixels,
    }
}

/// Zero-pads the patch vectors to `budget` rows. Returns the padded matrix
/// (as plain data, ready to register on a tape) and the valid count.
pub fn padded_patch_matrix(grid: &PatchGrid, budget: usize) -> Result<(Tensor, usize)> {
    let valid = grid.count();
    if valid > budget {
        return Err(Error::Contract(format!(
            "{valid} patches exceed the budget of {budget}"
        )));
    }
    let plen = grid.vector_len();
    let mut data = vec![0.0; budget * plen];
    data[..valid * plen].copy_from_slice(&grid.vectors);
    Ok((Tensor::new(vec![budget, plen], data)?, valid))
}

// ── Stub vision encoder ─────────────────────────────────────────────────

/// A small masked-attention encoder standing in for a pretrained vision
/// tower: linear patch embedding (no bias) followed by transformer blocks.
/// No positional embeddings; locality is not the point of the stub.
#[derive(Debug, Clone, PartialEq)]
pub struct StubEncoderParams {
    pub patch_embed: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl StubEncoderParams {
    pub fn init<R: Rng>(
        patch_len: usize,
        d_v: usize,
        depth: usize,
        ff_width: usize,
        rng: &mut R,
    ) -> Self {
        let sigma = 1.0 / (patch_len as f64).sqrt();
        StubEncoderParams {
            patch_embed: Tensor::randn(&[patch_len, d_v], sigma, rng),
            blocks: (0..depth).map(|_| BlockParams::init(d_v, ff_width, rng)).collect(),
        }
    }

    pub fn d_v(&self) -> usize {
        self.patch_embed.shape()[1]
    }
}

impl ParamGroup for StubEncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}patch_embed"), &self.patch_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}block{i}."), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}patch_embed"), &mut self.patch_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}block{i}."), f);
        }
    }
}

pub struct EncoderVars {
    pub patch_embed: ValId,
    pub blocks: Vec<BlockVars>,
}

impl EncoderVars {
    pub fn bind(params: &StubEncoderParams, prefix: &str, binder: &mut Binder) -> EncoderVars {
        EncoderVars {
            patch_embed: binder.bind(format!("{prefix}patch_embed"), &params.patch_embed),
            blocks: params
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| BlockVars::bind(b, &format!("{prefix}block{i}."), binder))
                .collect(),
        }
    }
}

/// Encodes a padded `[budget, patch_len]` patch matrix already on the tape.
///
/// Padded rows are excluded from attention via the key mask and re-zeroed at
/// the end, so valid outputs are bitwise independent of padded-row contents
/// and padded output rows are exactly zero.
pub fn encode_padded(
    tape: &mut Tape,
    vars: &EncoderVars,
    patch_matrix: ValId,
    valid_count: usize,
    heads: usize,
) -> Result<TokenSequence> {
    let mut h = tape.matmul(patch_matrix, vars.patch_embed)?;
    let budget = tape.shape(h)[0];
    if valid_count > budget {
        return Err(Error::Contract(format!(
            "valid_count {valid_count} exceeds budget {budget}"
        )));
    }
    let mut mask = vec![0.0; budget];
    mask[..valid_count].fill(1.0);
    for block in &vars.blocks {
        h = block_forward(tape, h, block, heads, &AttnMask::KeyPadding(&mask))?;
    }
    let mask_id = tape.constant(&[budget], mask)?;
    let zeroed = tape.scale_rows(h, mask_id)?;
    TokenSequence::new(tape, zeroed, valid_count)
}

// ── Image file formats ──────────────────────────────────────────────────

/// Reads a binary PPM (P6, 8-bit) image.
pub fn read_ppm(bytes: &[u8]) -> Result<ImageInput> {
    let mut pos = 0usize;
    let mut next_token = || -> Result<String> {
        // Skip whitespace and '#' comment lines between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated ppm header".into()));
        }
        Ok(std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Image("non-ascii ppm header".into()))?
            .to_string())
    };

    if next_token()? != "P6" {
        return Err(Error::Image("not a P6 ppm file".into()));
    }
    let width: usize = next_token()?
        .parse()
        .map_err(|_| Error::Image("bad ppm width".into()))?;
    let height: usize = next_token()?
        .parse()
        .map_err(|_| Error::Image("bad ppm height".into()))?;
    let maxval: usize = next_token()?
        .parse()
        .map_err(|_| Error::Image("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported ppm maxval {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    let need = width * height * CHANNELS;
    if bytes.len() < pos + need {
        return Err(Error::Image(format!(
            "ppm payload truncated: need {need} bytes, found {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let pixels = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    ImageInput::new(height, width, pixels)
}

pub fn write_ppm(image: &ImageInput) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(
        image
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

const RAW_MAGIC: &[u8; 4] = b"RV64";

/// Reads the raw-tensor image format: magic "RV64", height and width as
/// little-endian u32, then `h * w * 3` little-endian f64 values in [0, 1].
pub fn read_raw_image(bytes: &[u8]) -> Result<ImageInput> {
    if bytes.len() < 12 || &bytes[0..4] != RAW_MAGIC {
        return Err(Error::Image("not a raw image file (RV64)".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = h * w * CHANNELS * 8;
    if bytes.len() != 12 + need {
        return Err(Error::Image(format!(
            "raw image payload is {} bytes, expected {need}",
            bytes.len() - 12
        )));
    }
    let pixels = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageInput::new(h, w, pixels)
}

pub fn write_raw_image(image: &ImageInput) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + image.pixels.len() * 8);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    for v in &image.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Loads either format, sniffing the magic bytes.
pub fn load_image(path: &Path) -> Result<ImageInput> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(b"P6") {
        read_ppm(&bytes)
    } else if bytes.starts_with(RAW_MAGIC) {
        read_raw_image(&bytes)
    } else {
        Err(Error::Image(format!(
            "unrecognized image format in {}",
            path.display()
        )))
    }
}
