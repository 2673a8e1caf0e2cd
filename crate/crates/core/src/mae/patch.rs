use super::{PatchGrid, TokenBatch};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::volume::NormalizedGrid;

/// Cuts each grid into non-overlapping patches. Token `n` is the patch at
/// grid cell `(h, w, d)` with `n = h·W·D + w·D + d`; voxels inside a patch
/// are ordered x-fastest. Output `[B, N, px·py·pz]`.
pub fn patchify<T: Real>(grids: &[NormalizedGrid<T>], patch: [usize; 3]) -> Result<TokenBatch<T>> {
    let first = grids.first().ok_or_else(|| Error::shape("patchify", "empty batch"))?;
    let dims = first.dims;
    if grids.iter().any(|g| g.dims != dims) {
        return Err(Error::shape("patchify", "grids in a batch must share dims"));
    }
    let grid = PatchGrid::new(dims, patch)?;
    let p = patch.iter().product::<usize>();
    let n = grid.n_tokens();
    let mut out = Vec::with_capacity(grids.len() * n * p);
    for g in grids {
        for t in 0..n {
            let [h, w, d] = grid.cell(t);
            for iz in 0..patch[2] {
                for iy in 0..patch[1] {
                    for ix in 0..patch[0] {
                        out.push(g.get(h * patch[0] + ix, w * patch[1] + iy, d * patch[2] + iz));
                    }
                }
            }
        }
    }
    TokenBatch::new(Tensor::new(vec![grids.len(), n, p], out)?, grid)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &TokenBatch<T>, patch: [usize; 3]) -> Result<Vec<NormalizedGrid<T>>> {
    let p = patch.iter().product::<usize>();
    if tokens.channels() != p {
        return Err(Error::shape(
            "unpatchify",
            format!("token length {} does not match patch {patch:?} ({p} voxels)", tokens.channels()),
        ));
    }
    let grid = tokens.grid;
    let dims: [usize; 3] = std::array::from_fn(|a| grid.dims[a] * patch[a]);
    let n = grid.n_tokens();
    let data = tokens.values.data();
    let mut grids = Vec::with_capacity(tokens.batch());
    for b in 0..tokens.batch() {
        let mut values = vec![T::zero(); dims.iter().product()];
        for t in 0..n {
            let [h, w, d] = grid.cell(t);
            let src = &data[(b * n + t) * p..(b * n + t + 1) * p];
            let mut i = 0;
            for iz in 0..patch[2] {
                for iy in 0..patch[1] {
                    for ix in 0..patch[0] {
                        let (x, y, z) = (h * patch[0] + ix, w * patch[1] + iy, d * patch[2] + iz);
                        values[x + dims[0] * (y + dims[1] * z)] = src[i];
                        i += 1;
                    }
                }
            }
        }
        grids.push(NormalizedGrid { dims, values });
    }
    Ok(grids)
}
