use crate::error::{ensure, Result};
use crate::synthdata::VideoClip;

/// Per-frame patch tokens, `[T, N, D]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    /// `(rows, cols)` of the patch grid; `rows * cols == tokens`.
    pub grid: (usize, usize),
    pub data: Vec<f64>,
}

impl TokenGrid {
    pub fn token(&self, t: usize, n: usize) -> &[f64] {
        let o = (t * self.tokens + n) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.frames == other.frames && self.tokens == other.tokens && self.dim == other.dim
    }
}

/// Splits every frame into non-overlapping `patch × patch` tiles. Token `n`
/// of a frame is grid cell `(n / cols, n % cols)` flattened in
/// `(row, col, channel)` order.
pub fn patchify(clip: &VideoClip, patch: usize) -> Result<TokenGrid> {
    ensure!(
        patch >= 1 && clip.height % patch == 0 && clip.width % patch == 0,
        Shape,
        "{}x{} frame is not divisible by patch size {patch}",
        clip.height,
        clip.width
    );
    let (gh, gw) = (clip.height / patch, clip.width / patch);
    let c = clip.channels;
    let dim = patch * patch * c;
    let tokens = gh * gw;
    let mut data = Vec::with_capacity(clip.frames * tokens * dim);
    for t in 0..clip.frames {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let start = clip.index(t, gy * patch + py, gx * patch, 0);
                    data.extend(clip.data[start..start + patch * c].iter().map(|&v| v as f64));
                }
            }
        }
    }
    Ok(TokenGrid {
        frames: clip.frames,
        tokens,
        dim,
        grid: (gh, gw),
        data,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &TokenGrid, patch: usize, channels: usize) -> Result<VideoClip> {
    ensure!(
        grid.dim == patch * patch * channels,
        Shape,
        "token length {} is not {patch}x{patch}x{channels}",
        grid.dim
    );
    let (gh, gw) = grid.grid;
    let (h, w) = (gh * patch, gw * patch);
    let mut clip = VideoClip::filled(grid.frames, h, w, channels, 0.0);
    for t in 0..grid.frames {
        for n in 0..grid.tokens {
            let (gy, gx) = (n / gw, n % gw);
            let tok = grid.token(t, n);
            for py in 0..patch {
                let start = clip.index(t, gy * patch + py, gx * patch, 0);
                for (i, &v) in tok[py * patch * channels..(py + 1) * patch * channels].iter().enumerate() {
                    clip.data[start + i] = v as f32;
                }
            }
        }
    }
    Ok(clip)
}
