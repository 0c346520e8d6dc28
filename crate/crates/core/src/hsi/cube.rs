//! Hyperspectral cube value type and the HR/LR pairing.

use std::collections::BTreeMap;

use hsisr_nn::Tensor;
use ndarray::{Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Smallest spatial side accepted by the processing operations.
pub const MIN_SPATIAL: usize = 8;
/// Smallest band count accepted by the processing operations.
pub const MIN_BANDS: usize = 2;

pub const META_NORM_MIN: &str = "norm_min";
pub const META_NORM_MAX: &str = "norm_max";

/// A hyperspectral image stored as `[height, width, bands]`.
///
/// Values are always finite. Construction only requires non-empty axes so
/// that small files can be read; [`HsiCube::check_processable`] enforces the
/// minimum geometry the numerical operations rely on.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    data: Array3<f32>,
    pub meta: BTreeMap<String, String>,
}

impl HsiCube {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidCube(format!("empty axis in {h}x{w}x{c}")));
        }
        if let Some(((row, col, band), &value)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col, band, value });
        }
        Ok(Self { data, meta: BTreeMap::new() })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl FnMut((usize, usize, usize)) -> f32) -> Result<Self> {
        Self::new(Array3::from_shape_fn((h, w, c), f))
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, c), value))
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn bands(&self) -> usize {
        self.data.dim().2
    }

    /// `(height, width)`.
    pub fn spatial(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn band(&self, b: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(2), b)
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[[row, col, band]]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Applies `f` to every value, keeping the metadata.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let mut out = Self::new(self.data.mapv(f))?;
        out.meta = self.meta.clone();
        Ok(out)
    }

    pub fn check_processable(&self) -> Result<()> {
        let (h, w, c) = self.dims();
        if h < MIN_SPATIAL || w < MIN_SPATIAL || c < MIN_BANDS {
            return Err(Error::InvalidCube(format!(
                "{h}x{w}x{c} is below the minimum {MIN_SPATIAL}x{MIN_SPATIAL}x{MIN_BANDS}"
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &HsiCube) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    /// `[1, C, H, W]` tensor view of the cube.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = self.dims();
        let mut out = Vec::with_capacity(h * w * c);
        for b in 0..c {
            out.extend(self.data.index_axis(Axis(2), b).iter().copied());
        }
        Tensor::from_vec([1, c, h, w], out)
    }

    /// Batch item `n` of an NCHW tensor as a cube.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        Self::from_fn(h, w, c, |(y, x, b)| t.get(n, b, y, x))
    }

    /// Stacks cubes of identical shape into one `[N, C, H, W]` tensor.
    pub fn batch_tensor(cubes: &[&HsiCube]) -> Result<Tensor> {
        if let Some(first) = cubes.first() {
            for c in cubes {
                first.same_shape(c)?;
            }
        }
        Ok(Tensor::stack(&cubes.iter().map(|c| c.to_tensor()).collect::<Vec<_>>()))
    }
}

/// Global min-max scaling of the whole cube to `[0, 1]`.
///
/// The original range is recorded under [`META_NORM_MIN`]/[`META_NORM_MAX`]
/// (the first recorded range is kept when normalizing again).
pub fn normalize(cube: &HsiCube) -> Result<HsiCube> {
    let (lo, hi) = cube.min_max();
    if hi <= lo {
        return Err(Error::DegenerateRange(lo));
    }
    let span = (hi - lo) as f64;
    let mut out = cube.map(|v| (((v - lo) as f64) / span) as f32)?;
    out.meta.entry(META_NORM_MIN.into()).or_insert_with(|| lo.to_string());
    out.meta.entry(META_NORM_MAX.into()).or_insert_with(|| hi.to_string());
    Ok(out)
}

/// Undoes [`normalize`] using the recorded range.
pub fn denormalize(cube: &HsiCube) -> Result<HsiCube> {
    let read = |k: &str| -> Result<f64> {
        cube.meta
            .get(k)
            .ok_or_else(|| Error::InvalidCube(format!("missing `{k}` metadata")))?
            .parse::<f64>()
            .map_err(|e| Error::InvalidCube(format!("bad `{k}`: {e}")))
    };
    let (lo, hi) = (read(META_NORM_MIN)?, read(META_NORM_MAX)?);
    cube.map(|v| (lo + v as f64 * (hi - lo)) as f32)
}

/// Co-registered high/low resolution views of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub hr: HsiCube,
    pub lr: HsiCube,
    pub scale: usize,
}

pub fn check_scale(scale: usize) -> Result<()> {
    if (2..=4).contains(&scale) {
        Ok(())
    } else {
        Err(Error::Scale(scale))
    }
}

impl ImagePair {
    pub fn new(hr: HsiCube, lr: HsiCube, scale: usize) -> Result<Self> {
        check_scale(scale)?;
        if hr.height() != lr.height() * scale || hr.width() != lr.width() * scale {
            return Err(Error::Shape(format!(
                "HR {:?} is not LR {:?} times {scale}",
                hr.spatial(),
                lr.spatial()
            )));
        }
        if hr.bands() != lr.bands() {
            return Err(Error::Shape(format!("HR has {} bands, LR has {}", hr.bands(), lr.bands())));
        }
        Ok(Self { hr, lr, scale })
    }
}

/// Patch sampling parameters, all in HR pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
    /// Adds the eight flips/rotations of every patch.
    pub augment: bool,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { patch_size: 32, stride: 16, augment: false }
    }
}

impl PatchSpec {
    pub fn validate(&self, scale: usize) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % scale != 0 {
            return Err(Error::Patch(format!("patch size {} is not a multiple of scale {scale}", self.patch_size)));
        }
        if self.stride == 0 || self.stride % scale != 0 {
            return Err(Error::Patch(format!("stride {} must be a positive multiple of scale {scale}", self.stride)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_values_with_location() {
        let mut a = Array3::zeros((2, 3, 4));
        a[[1, 2, 3]] = f32::NAN;
        match HsiCube::new(a) {
            Err(Error::NonFinite { row: 1, col: 2, band: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let cube = HsiCube::from_fn(3, 4, 2, |(y, x, b)| (y * 100 + x * 10 + b) as f32).unwrap();
        let t = cube.to_tensor();
        assert_eq!(t.shape(), [1, 2, 3, 4]);
        assert_eq!(t.get(0, 1, 2, 3), 231.0);
        assert_eq!(HsiCube::from_tensor(&t, 0).unwrap(), cube);
    }

    #[test]
    fn normalize_maps_range_and_records_it() {
        let cube = HsiCube::from_fn(4, 4, 2, |(y, x, b)| 10.0 + (y * 8 + x * 2 + b) as f32 * (10.0 / 31.0)).unwrap();
        let n = normalize(&cube).unwrap();
        assert_eq!(n.min_max(), (0.0, 1.0));
        assert_eq!(n.meta[META_NORM_MIN], "10");
        assert_eq!(n.meta[META_NORM_MAX], "20");
        let back = denormalize(&n).unwrap();
        assert!(back.data().iter().zip(cube.data()).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn normalize_is_identity_on_unit_range() {
        let cube = HsiCube::from_fn(4, 4, 2, |(y, x, b)| ((y * 8 + x * 2 + b) as f32) / 31.0).unwrap();
        let n = normalize(&cube).unwrap();
        assert_eq!(n.data(), cube.data());
        assert_eq!(normalize(&n).unwrap().data(), n.data());
    }

    #[test]
    fn constant_cube_has_degenerate_range() {
        let cube = HsiCube::filled(8, 8, 2, 5.0).unwrap();
        assert!(matches!(normalize(&cube), Err(Error::DegenerateRange(v)) if v == 5.0));
    }

    #[test]
    fn pair_shape_contract() {
        let hr = HsiCube::filled(16, 16, 4, 0.5).unwrap();
        let lr = HsiCube::filled(8, 8, 4, 0.5).unwrap();
        assert!(ImagePair::new(hr.clone(), lr.clone(), 2).is_ok());
        assert!(ImagePair::new(hr.clone(), lr.clone(), 3).is_err());
        assert!(ImagePair::new(hr, HsiCube::filled(8, 8, 3, 0.5).unwrap(), 2).is_err());
    }
}
