use ndarray::{s, Array3, Axis};

use super::cube::{HsiCube, ImagePair, PatchSpec};
use crate::error::{Error, Result};

/// Number of tiles along one axis of length `len`.
pub fn tiles_along(len: usize, patch: usize, stride: usize) -> usize {
    if patch > len {
        0
    } else {
        (len - patch) / stride + 1
    }
}

/// The eight symmetries of the square: `k` quarter turns, then an optional
/// horizontal flip.
pub fn dihedral(data: &Array3<f32>, index: usize) -> Array3<f32> {
    let mut out = data.clone();
    for _ in 0..index % 4 {
        // rotate 90° counter-clockwise: (y, x) <- (x, W-1-y)
        out = out.permuted_axes([1, 0, 2]);
        out.invert_axis(Axis(0));
        out = out.as_standard_layout().to_owned();
    }
    if index >= 4 {
        out.invert_axis(Axis(1));
        out = out.as_standard_layout().to_owned();
    }
    out
}

/// Co-registered HR/LR tiles in raster order. With `augment`, each tile is
/// followed by its seven other dihedral variants.
pub fn extract_patches(pair: &ImagePair, spec: &PatchSpec) -> Result<Vec<ImagePair>> {
    spec.validate(pair.scale)?;
    let (h, w) = pair.hr.spatial();
    let p = spec.patch_size;
    if p > h.min(w) {
        return Err(Error::Patch(format!("patch size {p} exceeds image {h}x{w}")));
    }
    let s = pair.scale;
    let lp = p / s;
    let mut out = Vec::new();
    for y in (0..=h - p).step_by(spec.stride) {
        for x in (0..=w - p).step_by(spec.stride) {
            let hr = pair.hr.data().slice(s![y..y + p, x..x + p, ..]).to_owned();
            let lr = pair.lr.data().slice(s![y / s..y / s + lp, x / s..x / s + lp, ..]).to_owned();
            let variants = if spec.augment { 8 } else { 1 };
            for k in 0..variants {
                out.push(ImagePair::new(HsiCube::new(dihedral(&hr, k))?, HsiCube::new(dihedral(&lr, k))?, s)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::resample::degrade;
    use proptest::prelude::*;

    fn pair(h: usize, w: usize) -> ImagePair {
        let hr = HsiCube::from_fn(h, w, 3, |(y, x, b)| ((y * 7 + x * 3 + b) % 11) as f32 / 10.0).unwrap();
        degrade(&hr, 2).unwrap()
    }

    fn spec(p: usize, stride: usize, augment: bool) -> PatchSpec {
        PatchSpec { patch_size: p, stride, augment }
    }

    #[test]
    fn tiling_counts() {
        let pr = pair(16, 16);
        assert_eq!(extract_patches(&pr, &spec(8, 8, false)).unwrap().len(), 4);
        assert_eq!(extract_patches(&pr, &spec(8, 4, false)).unwrap().len(), 9);
        assert_eq!(extract_patches(&pr, &spec(8, 4, true)).unwrap().len(), 72);
        assert!(extract_patches(&pr, &spec(32, 8, false)).is_err());
    }

    #[test]
    fn patches_are_co_registered() {
        let pr = pair(16, 24);
        let patches = extract_patches(&pr, &spec(8, 8, false)).unwrap();
        let second = &patches[1];
        assert_eq!(second.hr.dims(), (8, 8, 3));
        assert_eq!(second.lr.dims(), (4, 4, 3));
        assert_eq!(second.hr.get(0, 0, 1), pr.hr.get(0, 8, 1));
        assert_eq!(second.lr.get(1, 2, 2), pr.lr.get(1, 6, 2));
    }

    #[test]
    fn dihedral_group_is_closed() {
        let a = Array3::from_shape_fn((3, 3, 1), |(y, x, _)| (y * 3 + x) as f32);
        let variants: Vec<_> = (0..8).map(|k| dihedral(&a, k)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(variants[i], variants[j], "variants {i} and {j} coincide");
            }
        }
        assert_eq!(dihedral(&dihedral(&a, 1), 3), a);
        assert_eq!(variants[1][[0, 0, 0]], 2.0);
    }

    proptest! {
        #[test]
        fn count_matches_closed_form(h in 4usize..12, w in 4usize..12, p in 1usize..6, stride in 1usize..5) {
            let (h, w, p, stride) = (2 * h, 2 * w, 2 * p, 2 * stride);
            prop_assume!(p <= h.min(w));
            let hr = HsiCube::filled(h, w, 2, 0.5).unwrap();
            let pr = degrade(&hr, 2).unwrap();
            let n = extract_patches(&pr, &spec(p, stride, false)).unwrap().len();
            let by_enumeration = (0..=h - p).step_by(stride).count() * (0..=w - p).step_by(stride).count();
            prop_assert_eq!(n, tiles_along(h, p, stride) * tiles_along(w, p, stride));
            prop_assert_eq!(n, by_enumeration);
        }
    }
}
