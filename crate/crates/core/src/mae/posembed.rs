use super::PatchGrid;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Fixed 3D sin-cos positional table `[N, C]`.
///
/// Each grid axis gets `2·⌊C/6⌋` channels of interleaved
/// `[sin(p·ω₀), cos(p·ω₀), sin(p·ω₁), …]` with `ωᵢ = 10000^(−i/F)` and
/// `F = ⌊C/6⌋` frequencies; axes are concatenated h, w, d. Any leftover
/// `C mod 6` channels are zero.
pub fn sincos_pos_embed_3d<T: Real>(grid: &PatchGrid, dim: usize) -> Result<Tensor<T>> {
    let freqs = dim / 6;
    if freqs == 0 {
        return Err(Error::Config(format!(
            "positional embedding width {dim} is too small: need at least 6 channels"
        )));
    }
    let per_axis = 2 * freqs;
    let n = grid.n_tokens();
    let mut table = vec![T::zero(); n * dim];
    for t in 0..n {
        let cell = grid.cell(t);
        for (axis, &pos) in cell.iter().enumerate() {
            let base = t * dim + axis * per_axis;
            for i in 0..freqs {
                let omega = 10000f64.powf(-(i as f64) / freqs as f64);
                let angle = pos as f64 * omega;
                table[base + 2 * i] = T::lit(angle.sin());
                table[base + 2 * i + 1] = T::lit(angle.cos());
            }
        }
    }
    Tensor::new(vec![n, dim], table)
}
