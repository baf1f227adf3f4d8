//! Grouping of token-grid rows into square patches.
//!
//! Tokens are laid out row-major over an `H x W` grid. A patch of side `p`
//! covers `K = p*p` tokens; patches are ordered row-major over the
//! `(H/p) x (W/p)` patch grid and tokens inside a patch are ordered row-major
//! too, i.e. `(h ph) (w pw) -> (h w) (ph pw)`.

use crate::error::{NppError, Result};
use crate::tensor::{Float, Var};
use crate::transformer::Position2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    grid_h: usize,
    grid_w: usize,
    side: usize,
}

impl PatchSpec {
    pub fn new(grid_h: usize, grid_w: usize, side: usize) -> Result<Self> {
        if side == 0 || grid_h == 0 || grid_w == 0 {
            return Err(NppError::PatchSpec(format!(
                "grid {grid_h}x{grid_w} and side {side} must be positive"
            )));
        }
        if !grid_h.is_multiple_of(side) || !grid_w.is_multiple_of(side) {
            return Err(NppError::PatchSpec(format!(
                "patch side {side} does not divide grid {grid_h}x{grid_w}"
            )));
        }
        Ok(PatchSpec { grid_h, grid_w, side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// `K`, tokens per patch.
    pub fn tokens_per_patch(&self) -> usize {
        self.side * self.side
    }

    /// Patch grid extent `(H/p, W/p)`.
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.grid_h / self.side, self.grid_w / self.side)
    }

    /// `M`, the number of patches.
    pub fn num_patches(&self) -> usize {
        let (h, w) = self.patch_grid();
        h * w
    }

    /// `N`, the number of tokens.
    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Raster token indices in patch order: entry `i*K + k` is the token
    /// index of the `k`-th member of patch `i`.
    pub fn token_order(&self) -> Vec<usize> {
        let p = self.side;
        let (ph_count, pw_count) = self.patch_grid();
        let mut order = Vec::with_capacity(self.num_tokens());
        for hp in 0..ph_count {
            for wp in 0..pw_count {
                for dh in 0..p {
                    for dw in 0..p {
                        order.push((hp * p + dh) * self.grid_w + wp * p + dw);
                    }
                }
            }
        }
        order
    }
}

/// Intra-patch mean of token embeddings: `[N, d] -> [M, d]`.
pub fn patchify_embeddings<'g, T: Float>(tok_emb: Var<'g, T>, spec: &PatchSpec) -> Result<Var<'g, T>> {
    let shape = tok_emb.shape();
    if shape.len() != 2 || shape[0] != spec.num_tokens() {
        return Err(NppError::PatchSpec(format!(
            "embeddings {shape:?} do not match a {:?} grid",
            spec.grid()
        )));
    }
    let grouped = tok_emb.gather_rows(&spec.token_order())?;
    grouped
        .reshape(&[spec.num_patches(), spec.tokens_per_patch(), shape[1]])?
        .mean_over_axis(1)
}

/// Regroups raster labels into `M` groups of `K` in patch order.
pub fn patchify_labels<L: Copy>(labels: &[L], spec: &PatchSpec) -> Result<Vec<Vec<L>>> {
    Ok(patchify_labels_flat(labels, spec)?
        .chunks(spec.tokens_per_patch())
        .map(<[L]>::to_vec)
        .collect())
}

/// [`patchify_labels`] without the nesting: `M*K` labels, group by group.
pub fn patchify_labels_flat<L: Copy>(labels: &[L], spec: &PatchSpec) -> Result<Vec<L>> {
    if labels.len() != spec.num_tokens() {
        return Err(NppError::PatchSpec(format!(
            "{} labels for a {:?} grid",
            labels.len(),
            spec.grid()
        )));
    }
    Ok(spec.token_order().into_iter().map(|i| labels[i]).collect())
}

/// Inverse of [`patchify_labels`]: back to raster order.
pub fn unpatchify_labels<L: Copy + Default>(groups: &[Vec<L>], spec: &PatchSpec) -> Result<Vec<L>> {
    let k = spec.tokens_per_patch();
    if groups.len() != spec.num_patches() || groups.iter().any(|g| g.len() != k) {
        return Err(NppError::PatchSpec(format!(
            "expected {} groups of {k}",
            spec.num_patches()
        )));
    }
    let mut out = vec![L::default(); spec.num_tokens()];
    for (slot, label) in spec.token_order().into_iter().zip(groups.iter().flatten()) {
        out[slot] = *label;
    }
    Ok(out)
}

/// Patch-grid coordinates in patch order.
pub fn patch_positions(spec: &PatchSpec) -> Vec<Position2D> {
    let (hp, wp) = spec.patch_grid();
    (0..hp)
        .flat_map(|h| (0..wp).map(move |w| Position2D::new(h, w)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Array, Graph};
    use proptest::prelude::*;

    fn spec(h: usize, w: usize, p: usize) -> PatchSpec {
        PatchSpec::new(h, w, p).unwrap()
    }

    /// Brute force: membership by integer division of coordinates.
    fn members_oracle(h: usize, w: usize, p: usize, patch: usize) -> Vec<usize> {
        let pw = w / p;
        (0..h * w)
            .filter(|&t| (t / w) / p * pw + (t % w) / p == patch)
            .collect()
    }

    #[test]
    fn rejects_non_dividing_side() {
        assert!(matches!(PatchSpec::new(4, 4, 3), Err(NppError::PatchSpec(_))));
        assert!(PatchSpec::new(4, 6, 2).is_ok());
    }

    #[test]
    fn side_one_is_bit_identical() {
        let g = Graph::<f32>::new();
        let x = Array::from_fn(&[4, 3], |i| (i as f32).sin() * -1.7);
        let v = g.constant(x.clone());
        let out = patchify_embeddings(v, &spec(2, 2, 1)).unwrap();
        assert_eq!(*out.value(), x);
    }

    #[test]
    fn identical_members_give_member_embedding() {
        let g = Graph::<f64>::new();
        let x = Array::from_fn(&[16, 3], |i| [0.3, -1.1, 2.5][i % 3]);
        let out = patchify_embeddings(g.constant(x), &spec(4, 4, 2)).unwrap();
        for r in 0..4 {
            assert_eq!(out.value().row(r), &[0.3, -1.1, 2.5]);
        }
    }

    #[test]
    fn one_hot_grouping_matches_oracle() {
        let g = Graph::<f64>::new();
        let x = Array::from_fn(&[16, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
        let out = patchify_embeddings(g.constant(x), &spec(4, 4, 2)).unwrap();
        for patch in 0..4 {
            let members = members_oracle(4, 4, 2, patch);
            for (col, &v) in out.value().row(patch).iter().enumerate() {
                let expected = if members.contains(&col) { 0.25 } else { 0.0 };
                assert_eq!(v, expected, "patch {patch} col {col}");
            }
        }
        assert_eq!(members_oracle(4, 4, 2, 0), vec![0, 1, 4, 5]);
    }

    #[test]
    fn label_grouping() {
        let labels: Vec<usize> = (0..16).collect();
        let groups = patchify_labels(&labels, &spec(4, 4, 2)).unwrap();
        assert_eq!(groups[0], vec![0, 1, 4, 5]);
        for (i, grp) in groups.iter().enumerate() {
            assert_eq!(*grp, members_oracle(4, 4, 2, i));
        }
        let singles = patchify_labels(&labels, &spec(4, 4, 1)).unwrap();
        assert_eq!(singles, labels.iter().map(|&l| vec![l]).collect::<Vec<_>>());
        let whole = patchify_labels(&labels, &spec(4, 4, 4)).unwrap();
        assert_eq!(whole, vec![labels.clone()]);
    }

    #[test]
    fn positions() {
        let p1 = patch_positions(&spec(2, 2, 1));
        let p2 = patch_positions(&spec(4, 4, 2));
        let expected: Vec<_> = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|&(h, w)| Position2D::new(h, w))
            .collect();
        assert_eq!(p1, expected);
        assert_eq!(p2, expected);
        assert_eq!(patch_positions(&spec(4, 4, 4)), vec![Position2D::new(0, 0)]);
    }

    #[test]
    fn gradient_spreads_one_over_k() {
        let g = Graph::<f64>::new();
        let x = g.param(Array::from_fn(&[16, 2], |i| i as f64 * 0.1));
        let w = g.constant(Array::from_fn(&[4, 2], |i| (i as f64 + 1.0) * 0.5));
        let loss = patchify_embeddings(x, &spec(4, 4, 2)).unwrap().mul(w).unwrap().sum();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        let s = spec(4, 4, 2);
        for patch in 0..4 {
            for tok in members_oracle(4, 4, 2, patch) {
                for c in 0..2 {
                    let expected = w.value().row(patch)[c] / s.tokens_per_patch() as f64;
                    assert!((grad.row(tok)[c] - expected).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn side_two_twice_equals_side_four() {
        let g = Graph::<f64>::new();
        let x = g.constant(Array::from_fn(&[64, 3], |i| ((i * 37) % 11) as f64 - 5.0));
        let once = patchify_embeddings(x, &spec(8, 8, 4)).unwrap();
        let half = patchify_embeddings(x, &spec(8, 8, 2)).unwrap();
        let twice = patchify_embeddings(half, &spec(4, 4, 2)).unwrap();
        for (a, b) in once.value().data().iter().zip(twice.value().data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn patchify_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000) {
            let g = Graph::<f64>::new();
            let a = Array::from_fn(&[16, 4], |i| ((i as u64 * 31 + seed) % 17) as f64 / 7.0);
            let b = Array::from_fn(&[16, 4], |i| ((i as u64 * 13 + seed * 3) % 19) as f64 / 5.0);
            let s = spec(4, 4, 2);
            let mix = Array::from_fn(&[16, 4], |i| alpha * a.data()[i] + beta * b.data()[i]);
            let lhs = patchify_embeddings(g.constant(mix), &s).unwrap().value();
            let pa = patchify_embeddings(g.constant(a), &s).unwrap().value();
            let pb = patchify_embeddings(g.constant(b), &s).unwrap().value();
            for i in 0..lhs.len() {
                prop_assert!((lhs.data()[i] - (alpha * pa.data()[i] + beta * pb.data()[i])).abs() < 1e-6);
            }
        }

        #[test]
        fn label_regrouping_is_a_bijection(
            (h, w, p) in prop_oneof![Just((4usize, 4usize, 2usize)), Just((8, 4, 4)), Just((6, 4, 2)), Just((3, 3, 1))],
            salt in 0usize..100,
        ) {
            let s = spec(h, w, p);
            let labels: Vec<usize> = (0..h * w).map(|i| (i * 7 + salt) % 23).collect();
            let groups = patchify_labels(&labels, &s).unwrap();
            prop_assert_eq!(unpatchify_labels(&groups, &s).unwrap(), labels.clone());
            let mut a = labels.clone();
            let mut b: Vec<usize> = groups.into_iter().flatten().collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
