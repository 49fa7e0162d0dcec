//! Single-band images and the patch algebra built on them.
//!
//! Patches are square, extracted at unit stride with periodic (wrap-around)
//! boundaries, one patch anchored at every pixel in row-major order. With
//! that convention each pixel is covered by exactly `patch_side²` patches,
//! which is what makes the averaged patch-filter operator well behaved.

use crate::error::{Error, Result};
use crate::scalar::{count, Scalar};
use nalgebra::{DMatrix, DVector};

/// One band of image data, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BandImage<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> BandImage<T> {
    /// Wrap row-major values; rejects empty dimensions, size mismatch and
    /// non-finite entries.
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if values.len() != width * height {
            return Err(Error::dims(format!(
                "expected {} values for a {width}x{height} image, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image values"));
        }
        Ok(BandImage { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BandImage { width, height, values: vec![T::zero(); width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        BandImage { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixel count.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }
}

/// Square patch lattice over a fixed image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    patch_side: usize,
    width: usize,
    height: usize,
}

impl PatchGeometry {
    pub fn new(patch_side: usize, width: usize, height: usize) -> Result<Self> {
        if patch_side == 0 {
            return Err(Error::invalid("patch side must be at least 1"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if patch_side > width || patch_side > height {
            return Err(Error::invalid(format!(
                "patch side {patch_side} exceeds image dimensions {width}x{height}"
            )));
        }
        Ok(PatchGeometry { patch_side, width, height })
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    /// Number of patches; equals the pixel count (one anchor per pixel).
    pub fn patch_count(&self) -> usize {
        self.width * self.height
    }

    /// Anchor pixel of patch `i` as `(row, col)`.
    pub fn anchor(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    /// Flat pixel index covered by slot `s` of patch `i` (periodic wrap).
    pub fn pixel_index(&self, i: usize, s: usize) -> usize {
        let (r, c) = self.anchor(i);
        let dr = s / self.patch_side;
        let dc = s % self.patch_side;
        ((r + dr) % self.height) * self.width + (c + dc) % self.width
    }

    pub fn matches<T: Scalar>(&self, img: &BandImage<T>) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::dims(format!(
                "image is {}x{}, geometry expects {}x{}",
                img.width(),
                img.height(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }
}

/// Patches of one image, one column per patch (column `i` is the patch
/// anchored at pixel `i`).
#[derive(Debug, Clone)]
pub struct PatchSet<T> {
    geometry: PatchGeometry,
    data: DMatrix<T>,
    means: Option<DVector<T>>,
}

impl<T: Scalar> PatchSet<T> {
    /// Assemble a patch set from raw parts, validating shapes. Useful when
    /// patches have been transformed externally and need re-aggregation.
    pub fn new(
        geometry: PatchGeometry,
        data: DMatrix<T>,
        means: Option<DVector<T>>,
    ) -> Result<Self> {
        if data.nrows() != geometry.patch_dim() || data.ncols() != geometry.patch_count() {
            return Err(Error::dims(format!(
                "patch matrix is {}x{}, geometry expects {}x{}",
                data.nrows(),
                data.ncols(),
                geometry.patch_dim(),
                geometry.patch_count()
            )));
        }
        if let Some(m) = &means {
            if m.len() != geometry.patch_count() {
                return Err(Error::dims("one mean per patch required".to_string()));
            }
        }
        Ok(PatchSet { geometry, data, means })
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    /// `patch_dim x patch_count` matrix of patch columns.
    pub fn data(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn patch_count(&self) -> usize {
        self.data.ncols()
    }

    pub fn patch_dim(&self) -> usize {
        self.data.nrows()
    }

    /// Per-patch means when extraction removed them.
    pub fn means(&self) -> Option<&DVector<T>> {
        self.means.as_ref()
    }
}

/// Extract every patch of `img`. With `remove_means` each column is centered
/// and the means are kept alongside for later re-injection.
pub fn extract_patches<T: Scalar>(
    img: &BandImage<T>,
    geometry: &PatchGeometry,
    remove_means: bool,
) -> Result<PatchSet<T>> {
    geometry.matches(img)?;
    let np = geometry.patch_dim();
    let n = geometry.patch_count();
    let vals = img.values();
    let mut data = DMatrix::<T>::zeros(np, n);
    for i in 0..n {
        for s in 0..np {
            data[(s, i)] = vals[geometry.pixel_index(i, s)];
        }
    }
    let means = if remove_means {
        let inv = T::one() / count::<T>(np);
        let mut m = DVector::<T>::zeros(n);
        for i in 0..n {
            let mut acc = T::zero();
            for s in 0..np {
                acc += data[(s, i)];
            }
            let mean = acc * inv;
            for s in 0..np {
                data[(s, i)] -= mean;
            }
            m[i] = mean;
        }
        Some(m)
    } else {
        None
    };
    Ok(PatchSet { geometry: *geometry, data, means })
}

/// Re-assemble an image by averaging all patches covering each pixel,
/// re-injecting stored patch means first. This is the exact left inverse of
/// [`extract_patches`] and, for modified patches, the `1/patch_dim`-scaled
/// adjoint of extraction.
pub fn aggregate_patches<T: Scalar>(patches: &PatchSet<T>) -> Result<BandImage<T>> {
    let geometry = patches.geometry;
    let np = geometry.patch_dim();
    if patches.patch_dim() != np || patches.patch_count() != geometry.patch_count() {
        return Err(Error::dims("patch matrix does not match its geometry".to_string()));
    }
    let mut acc = accumulate(patches, true);
    let inv = T::one() / count::<T>(np);
    for v in acc.iter_mut() {
        *v *= inv;
    }
    BandImage::new(geometry.width, geometry.height, acc)
}

/// Plain adjoint of extraction: `Σᵢ Pᵢᵀ qᵢ` with no mean re-injection and no
/// `1/patch_dim` normalization. Exposed for adjoint and coverage diagnostics.
pub fn aggregate_patches_unnormalized<T: Scalar>(patches: &PatchSet<T>) -> Result<BandImage<T>> {
    let geometry = patches.geometry;
    BandImage::new(geometry.width, geometry.height, accumulate(patches, false))
}

fn accumulate<T: Scalar>(patches: &PatchSet<T>, add_means: bool) -> Vec<T> {
    let geometry = patches.geometry;
    let np = geometry.patch_dim();
    let n = geometry.patch_count();
    let mut acc = vec![T::zero(); n];
    for i in 0..n {
        let mean = match (&patches.means, add_means) {
            (Some(m), true) => m[i],
            _ => T::zero(),
        };
        for s in 0..np {
            acc[geometry.pixel_index(i, s)] += patches.data[(s, i)] + mean;
        }
    }
    acc
}

/// Partition of the patch index set into `patch_dim` classes by anchor
/// offset modulo the patch side. Each class tiles the image exactly once,
/// which is what makes the per-class filter operators block-diagonal.
#[derive(Debug, Clone)]
pub struct PatchPartition {
    geometry: PatchGeometry,
    subsets: Vec<Vec<usize>>,
}

impl PatchPartition {
    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn subset_count(&self) -> usize {
        self.subsets.len()
    }
}

/// Build the anchor-offset partition. Requires the patch side to divide both
/// image dimensions so that every class tiles the image without overlap.
pub fn build_partition(geometry: &PatchGeometry) -> Result<PatchPartition> {
    let side = geometry.patch_side();
    if geometry.width() % side != 0 || geometry.height() % side != 0 {
        return Err(Error::invalid(format!(
            "patch side {side} must divide image dimensions {}x{}",
            geometry.width(),
            geometry.height()
        )));
    }
    let mut subsets = vec![Vec::new(); side * side];
    for i in 0..geometry.patch_count() {
        let (r, c) = geometry.anchor(i);
        subsets[(r % side) * side + (c % side)].push(i);
    }
    Ok(PatchPartition { geometry: *geometry, subsets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize, vals: &[f64]) -> BandImage<f64> {
        BandImage::new(w, h, vals.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_patches_wrap_periodically() {
        let im = img(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let g = PatchGeometry::new(2, 2, 2).unwrap();
        let ps = extract_patches(&im, &g, false).unwrap();
        assert_eq!(ps.patch_count(), 4);
        let col = |i: usize| -> Vec<f64> { ps.data().column(i).iter().copied().collect() };
        assert_eq!(col(0), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(col(1), vec![2.0, 1.0, 4.0, 3.0]);
        assert_eq!(col(2), vec![3.0, 4.0, 1.0, 2.0]);
        assert_eq!(col(3), vec![4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn wraparound_indices_match_modular_arithmetic() {
        // Independent index check on a 4x4 ramp: value at (r,c) is 4r+c.
        let im = BandImage::from_fn(4, 4, |r, c| (4 * r + c) as f64);
        let g = PatchGeometry::new(3, 4, 4).unwrap();
        let ps = extract_patches(&im, &g, false).unwrap();
        for i in 0..16 {
            let (ar, ac) = (i / 4, i % 4);
            for dr in 0..3 {
                for dc in 0..3 {
                    let expect = (4 * ((ar + dr) % 4) + (ac + dc) % 4) as f64;
                    assert_eq!(ps.data()[(dr * 3 + dc, i)], expect, "patch {i} slot ({dr},{dc})");
                }
            }
        }
    }

    #[test]
    fn constant_image_centers_to_zero() {
        let im = BandImage::from_fn(5, 4, |_, _| 3.25f64);
        let g = PatchGeometry::new(2, 5, 4).unwrap();
        let ps = extract_patches(&im, &g, true).unwrap();
        assert!(ps.data().iter().all(|&v| v.abs() < 1e-15));
        assert!(ps.means().unwrap().iter().all(|&m| (m - 3.25).abs() < 1e-15));
    }

    #[test]
    fn coverage_count_is_patch_dim() {
        // Aggregating all-ones patches without normalization counts coverage.
        let g = PatchGeometry::new(3, 6, 5).unwrap();
        let data = DMatrix::from_element(9, 30, 1.0f64);
        let ps = PatchSet { geometry: g, data, means: None };
        let cov = aggregate_patches_unnormalized(&ps).unwrap();
        assert!(cov.values().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn unit_impulse_patches_average_to_quarter() {
        // Every 2x2 patch set to e1: each pixel is the first slot of exactly
        // one patch, so averaging yields 1/4 everywhere.
        let g = PatchGeometry::new(2, 4, 4).unwrap();
        let mut data = DMatrix::<f64>::zeros(4, 16);
        for i in 0..16 {
            data[(0, i)] = 1.0;
        }
        let ps = PatchSet { geometry: g, data, means: None };
        let out = aggregate_patches(&ps).unwrap();
        assert!(out.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn partition_tiles_exactly() {
        let g = PatchGeometry::new(2, 4, 4).unwrap();
        let part = build_partition(&g).unwrap();
        assert_eq!(part.subset_count(), 4);
        for subset in part.subsets() {
            assert_eq!(subset.len(), 4);
            // Each class covers every pixel exactly once.
            let mut cover = vec![0usize; 16];
            for &i in subset {
                for s in 0..4 {
                    cover[g.pixel_index(i, s)] += 1;
                }
            }
            assert!(cover.iter().all(|&c| c == 1));
        }
        // Classes are disjoint and exhaustive.
        let mut seen = vec![false; 16];
        for subset in part.subsets() {
            for &i in subset {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn partition_rejects_nondivisible_dims() {
        let g = PatchGeometry::new(3, 8, 8).unwrap();
        assert!(build_partition(&g).is_err());
    }

    #[test]
    fn single_pixel_patches_are_identity() {
        let im = img(3, 2, &[1.0, -2.0, 3.0, -4.0, 5.0, -6.0]);
        let g = PatchGeometry::new(1, 3, 2).unwrap();
        let ps = extract_patches(&im, &g, false).unwrap();
        let back = aggregate_patches(&ps).unwrap();
        assert_eq!(back.values(), im.values());
    }

    #[test]
    fn rejects_oversized_patch_and_bad_data() {
        assert!(PatchGeometry::new(5, 4, 4).is_err());
        assert!(BandImage::new(2, 2, vec![1.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(BandImage::new(2, 2, vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn extract_aggregate_roundtrip(
            w in 2usize..12,
            h in 2usize..12,
            side in 1usize..5,
            seed in 0u64..1000,
            remove in proptest::bool::ANY,
        ) {
            prop_assume!(side <= w && side <= h);
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let im = BandImage::from_fn(w, h, |_, _| rng.gen_range(-5.0f64..5.0));
            let g = PatchGeometry::new(side, w, h).unwrap();
            let ps = extract_patches(&im, &g, remove).unwrap();
            let back = aggregate_patches(&ps).unwrap();
            for (a, b) in im.values().iter().zip(back.values()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn extraction_adjoint_identity(
            w in 2usize..10,
            h in 2usize..10,
            side in 1usize..4,
            seed in 0u64..1000,
        ) {
            prop_assume!(side <= w && side <= h);
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let im = BandImage::from_fn(w, h, |_, _| rng.gen_range(-1.0f64..1.0));
            let g = PatchGeometry::new(side, w, h).unwrap();
            let ps = extract_patches(&im, &g, false).unwrap();
            let q = DMatrix::from_fn(g.patch_dim(), g.patch_count(), |_, _| rng.gen_range(-1.0f64..1.0));
            // <Pz, q> accumulated patch-wise.
            let lhs: f64 = ps.data().iter().zip(q.iter()).map(|(a, b)| a * b).sum();
            let qs = PatchSet { geometry: g, data: q, means: None };
            let adj = aggregate_patches_unnormalized(&qs).unwrap();
            let rhs: f64 = im.values().iter().zip(adj.values()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
