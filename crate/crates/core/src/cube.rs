//! Multi-band cubes and their on-disk format.
//!
//! A cube is stored as two files: a raw little-endian `f32` payload in
//! band-sequential order, and a text header at `<payload>.hdr` whose first
//! line is the magic `HSCUBE1` followed by `key: value` lines. The format is
//! deliberately trivial so outputs stay byte-reproducible across platforms.

use crate::error::{Error, Result};
use crate::image::BandImage;
use crate::scalar::{real, Scalar};
use nalgebra::DMatrix;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// A stack of bands over one pixel grid: `bands x pixels` matrix, pixels
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HSCube<T> {
    width: usize,
    height: usize,
    data: DMatrix<T>,
}

impl<T: Scalar> HSCube<T> {
    pub fn new(width: usize, height: usize, data: DMatrix<T>) -> Result<Self> {
        if width == 0 || height == 0 || data.nrows() == 0 {
            return Err(Error::invalid("cube dimensions must be positive"));
        }
        if data.ncols() != width * height {
            return Err(Error::dims(format!(
                "cube data has {} columns, grid {width}x{height} needs {}",
                data.ncols(),
                width * height
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cube values"));
        }
        Ok(HSCube { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.data.nrows()
    }

    /// Pixels per band.
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<T> {
        self.data
    }

    /// Copy one band out as an image.
    pub fn band(&self, l: usize) -> BandImage<T> {
        let values: Vec<T> = self.data.row(l).iter().copied().collect();
        BandImage::new(self.width, self.height, values).expect("cube row is a valid image")
    }

    /// Mean of all bands as one image.
    pub fn band_mean(&self) -> BandImage<T> {
        let inv = T::one() / crate::scalar::count::<T>(self.bands());
        let values: Vec<T> = (0..self.pixels())
            .map(|p| self.data.column(p).iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        BandImage::new(self.width, self.height, values).expect("mean of finite values")
    }
}

fn header_path(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.hdr", path.display()))
}

/// Write the payload at `path` and the text header at `path.hdr`.
pub fn write_cube<T: Scalar>(cube: &HSCube<T>, path: &Path) -> Result<()> {
    let header = format!(
        "HSCUBE1\nwidth: {}\nheight: {}\nbands: {}\ndtype: f32\norder: band-sequential\nendian: little\n",
        cube.width(),
        cube.height(),
        cube.bands()
    );
    fs::write(header_path(path), header)?;
    let mut payload = Vec::with_capacity(4 * cube.bands() * cube.pixels());
    for l in 0..cube.bands() {
        for p in 0..cube.pixels() {
            let v = cube.data()[(l, p)].to_f64_lossy() as f32;
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&payload)?;
    Ok(())
}

/// Read a cube written by [`write_cube`], validating the header against the
/// payload length.
pub fn read_cube<T: Scalar>(path: &Path) -> Result<HSCube<T>> {
    let hpath = header_path(path);
    let text = fs::read_to_string(&hpath)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("HSCUBE1") {
        return Err(Error::format(&hpath, "missing HSCUBE1 magic"));
    }
    let mut width = None;
    let mut height = None;
    let mut bands = None;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::format(&hpath, format!("malformed header line {line:?}")))?;
        let value = value.trim();
        match key.trim() {
            "width" => width = value.parse::<usize>().ok(),
            "height" => height = value.parse::<usize>().ok(),
            "bands" => bands = value.parse::<usize>().ok(),
            "dtype" => {
                if value != "f32" {
                    return Err(Error::format(&hpath, format!("unsupported dtype {value}")));
                }
            }
            "order" => {
                if value != "band-sequential" {
                    return Err(Error::format(&hpath, format!("unsupported order {value}")));
                }
            }
            "endian" => {
                if value != "little" {
                    return Err(Error::format(&hpath, format!("unsupported endianness {value}")));
                }
            }
            other => {
                return Err(Error::format(&hpath, format!("unknown header key {other}")));
            }
        }
    }
    let (width, height, bands) = match (width, height, bands) {
        (Some(w), Some(h), Some(l)) if w > 0 && h > 0 && l > 0 => (w, h, l),
        _ => return Err(Error::format(&hpath, "header must give positive width, height, bands")),
    };
    let payload = fs::read(path)?;
    let expect = 4 * bands * width * height;
    if payload.len() != expect {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {expect}", payload.len()),
        ));
    }
    let n = width * height;
    let mut data = DMatrix::<T>::zeros(bands, n);
    for l in 0..bands {
        for p in 0..n {
            let off = 4 * (l * n + p);
            let bytes: [u8; 4] = payload[off..off + 4].try_into().expect("length checked");
            data[(l, p)] = real::<T>(f32::from_le_bytes(bytes) as f64);
        }
    }
    HSCube::new(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cube() -> HSCube<f64> {
        let data = DMatrix::from_fn(3, 8, |l, p| (l as f64 + 1.0) * 0.125 * (p as f64 - 3.5));
        HSCube::new(4, 2, data).unwrap()
    }

    #[test]
    fn roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.cube");
        let cube = sample_cube();
        write_cube(&cube, &path).unwrap();
        let back: HSCube<f64> = read_cube(&path).unwrap();
        assert_eq!(back.width(), 4);
        assert_eq!(back.height(), 2);
        assert_eq!(back.bands(), 3);
        for (a, b) in cube.data().iter().zip(back.data().iter()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, (*a as f32) as f64);
        }
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.cube"), dir.path().join("b.cube"));
        let cube = sample_cube();
        write_cube(&cube, &p1).unwrap();
        write_cube(&cube, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(
            fs::read_to_string(format!("{}.hdr", p1.display())).unwrap(),
            fs::read_to_string(format!("{}.hdr", p2.display())).unwrap()
        );
    }

    #[test]
    fn header_payload_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.cube");
        write_cube(&sample_cube(), &path).unwrap();
        // Truncate the payload by one value.
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_cube::<f64>(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.cube");
        write_cube(&sample_cube(), &path).unwrap();
        fs::write(format!("{}.hdr", path.display()), "NOTCUBE\nwidth: 4\n").unwrap();
        assert!(matches!(read_cube::<f64>(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn band_mean_averages_bands() {
        let cube = sample_cube();
        let mean = cube.band_mean();
        for p in 0..8 {
            let want = (1.0 + 2.0 + 3.0) / 3.0 * 0.125 * (p as f64 - 3.5);
            assert!((mean.values()[p] - want).abs() < 1e-12);
        }
    }
}
