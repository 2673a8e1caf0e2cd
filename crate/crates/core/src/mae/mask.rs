use crate::rng::RngHandle;

/// A random split of `N` tokens into kept and masked positions.
///
/// The shuffled order is `keep ++ masked`; `restore[n]` is the position of
/// token `n` in that order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub keep: Vec<usize>,
    pub masked: Vec<usize>,
    pub restore: Vec<usize>,
}

impl MaskPlan {
    /// Keep count `round(N · (1 − ratio))`, clamped so at least one token
    /// is kept and one is masked. Halves round away from zero.
    pub fn keep_count(n: usize, ratio: f64) -> usize {
        ((n as f64 * (1.0 - ratio)).round() as usize).clamp(1, n - 1)
    }

    /// A plan from an explicit set of kept indices.
    pub fn from_keep(n: usize, keep: &[usize]) -> Self {
        let mut is_kept = vec![false; n];
        for &k in keep {
            is_kept[k] = true;
        }
        let keep: Vec<usize> = (0..n).filter(|&i| is_kept[i]).collect();
        let masked: Vec<usize> = (0..n).filter(|&i| !is_kept[i]).collect();
        let mut restore = vec![0; n];
        for (pos, &i) in keep.iter().chain(&masked).enumerate() {
            restore[i] = pos;
        }
        Self { keep, masked, restore }
    }

    pub fn n_tokens(&self) -> usize {
        self.restore.len()
    }
}

/// Uniformly random subset of kept tokens; requires `N >= 2` and
/// `0 < ratio < 1`.
pub fn random_mask(n: usize, ratio: f64, rng: &mut RngHandle) -> MaskPlan {
    assert!(n >= 2, "masking needs at least 2 tokens");
    assert!(ratio > 0.0 && ratio < 1.0, "mask ratio {ratio} outside (0, 1)");
    let n_keep = MaskPlan::keep_count(n, ratio);
    let perm = rng.permutation(n);
    MaskPlan::from_keep(n, &perm[..n_keep])
}
