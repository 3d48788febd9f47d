use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vlamd_tensor::Tensor;

use super::font::{glyph, GLYPH_H, GLYPH_W};
use crate::config::DataConfig;
use crate::error::{Error, Result};

/// Glyph placement and intensity ranges for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    pub height: usize,
    pub width: usize,
    /// Pixels per font cell before jitter.
    pub glyph_scale: f64,
    /// Relative per-character scale jitter, `scale * (1 +- j)`.
    pub scale_jitter: f64,
    /// Per-character shift jitter in pixels, both axes.
    pub shift_jitter: f64,
    pub spacing: usize,
    pub noise_std: f64,
    pub bg: (f64, f64),
    pub fg: (f64, f64),
}

impl RenderSpec {
    pub fn from_config(cfg: &DataConfig) -> RenderSpec {
        RenderSpec {
            height: cfg.height,
            width: cfg.width,
            glyph_scale: cfg.glyph_scale,
            scale_jitter: cfg.scale_jitter,
            shift_jitter: cfg.shift_jitter,
            spacing: cfg.spacing,
            noise_std: cfg.noise_std,
            bg: (cfg.bg_min, cfg.bg_max),
            fg: (cfg.fg_min, cfg.fg_max),
        }
    }

    fn max_cell(&self) -> (usize, usize) {
        let s = self.glyph_scale * (1.0 + self.scale_jitter);
        ((GLYPH_W as f64 * s).round() as usize, (GLYPH_H as f64 * s).round() as usize)
    }

    /// Width a word of `n` characters needs at the largest jittered scale.
    pub fn required_width(&self, n: usize) -> usize {
        let (w, _) = self.max_cell();
        n * w + self.spacing * n.saturating_sub(1)
    }

    /// Longest word that always fits.
    pub fn max_chars(&self) -> usize {
        let mut n = 0;
        while self.required_width(n + 1) <= self.width {
            n += 1;
        }
        n
    }

    pub fn check_layout(&self, word: &str) -> Result<()> {
        let n = word.chars().count();
        let needed = self.required_width(n);
        let (_, h) = self.max_cell();
        if needed > self.width || h > self.height {
            return Err(Error::Layout {
                word: word.to_string(),
                needed,
                width: self.width,
            });
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Renders `word` as a `[3, H, W]` image in `[0, 1]`.
///
/// Draw order from `rng`: background, foreground, then per character
/// (scale, dx, dy), then per-pixel noise.
pub fn render_word(word: &str, spec: &RenderSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    spec.check_layout(word)?;
    let masks = word
        .chars()
        .map(|c| glyph(c).ok_or_else(|| Error::Input(format!("no glyph for {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (spec.height, spec.width);
    let bg = draw(rng, spec.bg);
    let fg = draw(rng, spec.fg);

    struct Cell {
        cw: usize,
        ch: usize,
        dx: f64,
        dy: f64,
    }
    let j = spec.scale_jitter;
    let s = spec.shift_jitter;
    let cells: Vec<Cell> = masks
        .iter()
        .map(|_| {
            let scale = spec.glyph_scale * (1.0 + draw(rng, (-j, j)));
            let dx = draw(rng, (-s, s));
            let dy = draw(rng, (-s, s));
            Cell {
                cw: ((GLYPH_W as f64 * scale).round() as usize).max(1),
                ch: ((GLYPH_H as f64 * scale).round() as usize).max(1),
                dx,
                dy,
            }
        })
        .collect();

    let total: usize = cells.iter().map(|c| c.cw).sum::<usize>() + spec.spacing * cells.len().saturating_sub(1);
    let mut plane = vec![bg; h * w];
    let mut x0 = (w - total.min(w)) / 2;
    for (mask, cell) in masks.iter().zip(&cells) {
        let left = x0 as f64 + cell.dx.round();
        let top = ((h - cell.ch.min(h)) / 2) as f64 + cell.dy.round();
        for py in 0..cell.ch {
            let y = top + py as f64;
            if y < 0.0 || y >= h as f64 {
                continue;
            }
            let gy = py * GLYPH_H / cell.ch;
            for px in 0..cell.cw {
                let x = left + px as f64;
                if x < 0.0 || x >= w as f64 {
                    continue;
                }
                if mask[gy][px * GLYPH_W / cell.cw] {
                    plane[y as usize * w + x as usize] = fg;
                }
            }
        }
        x0 += cell.cw + spec.spacing;
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config("data.noise_std", e.to_string()))?;
        for v in plane.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in plane.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Ok(Tensor::new(data, &[3, h, w])?)
}
