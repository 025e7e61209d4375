//! Calibration inputs: seeded standard-normal vectors, or a raw `f32` file.
//!
//! File layout (little-endian): magic `MQCB`, `u32` sample count, `u32`
//! dimension, then `n · d` `f32` values row by row.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CALIB_MAGIC: [u8; 4] = *b"MQCB";
pub const DEFAULT_CALIB: usize = 2048;
pub const DEFAULT_HELDOUT: usize = 512;

/// Calibration and held-out samples; the two never share a row.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    calib: Matrix<f32>,
    heldout: Matrix<f32>,
}

impl CalibSet {
    pub fn new(calib: Matrix<f32>, heldout: Matrix<f32>) -> Result<Self> {
        if calib.rows() == 0 {
            return Err(Error::InvalidArgument("calibration set is empty".into()));
        }
        if heldout.rows() > 0 && heldout.cols() != calib.cols() {
            return Err(Error::DimensionMismatch("calibration and held-out dimensions differ".into()));
        }
        Ok(Self { calib, heldout })
    }

    /// `n_calib + n_heldout` draws from one seeded stream, split in order.
    pub fn synthetic(seed: u64, dim: usize, n_calib: usize, n_heldout: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all = Matrix::from_fn(n_calib + n_heldout, dim, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        });
        Self::new(all.row_range(0, n_calib), all.row_range(n_calib, n_calib + n_heldout))
    }

    pub fn default_synthetic(seed: u64, dim: usize) -> Self {
        Self::synthetic(seed, dim, DEFAULT_CALIB, DEFAULT_HELDOUT).expect("default sizes are valid")
    }

    /// Read a raw sample file; the last fifth of the rows is held out.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let all = read_samples(path)?;
        let n = all.rows();
        let held = n / 5;
        Self::new(all.row_range(0, n - held), all.row_range(n - held, n))
    }

    pub fn calib(&self) -> &Matrix<f32> {
        &self.calib
    }

    pub fn heldout(&self) -> &Matrix<f32> {
        &self.heldout
    }

    pub fn dim(&self) -> usize {
        self.calib.cols()
    }

    /// The first `n` calibration rows (all of them if fewer).
    pub fn calib_prefix(&self, n: usize) -> Matrix<f32> {
        self.calib.row_range(0, n.min(self.calib.rows()))
    }
}

pub fn write_samples(samples: &Matrix<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + samples.as_slice().len() * 4);
    buf.extend_from_slice(&CALIB_MAGIC);
    buf.extend_from_slice(&(samples.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(samples.cols() as u32).to_le_bytes());
    for v in samples.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Matrix<f32>> {
    let buf = fs::read(path)?;
    if buf.len() < 12 || buf[..4] != CALIB_MAGIC {
        return Err(Error::InvalidArgument("not a calibration sample file".into()));
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let body = &buf[12..];
    if n == 0 || d == 0 || body.len() != n * d * 4 {
        return Err(Error::InvalidArgument(format!(
            "sample file declares {n}x{d} values but holds {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Matrix::from_vec(n, d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_split_is_disjoint_and_seeded() {
        let c = CalibSet::synthetic(5, 8, 30, 10).unwrap();
        assert_eq!(c.calib().shape(), (30, 8));
        assert_eq!(c.heldout().shape(), (10, 8));
        assert_eq!(c, CalibSet::synthetic(5, 8, 30, 10).unwrap());
        for i in 0..30 {
            for j in 0..10 {
                assert_ne!(c.calib().row(i), c.heldout().row(j));
            }
        }
        let mean = c.calib().as_slice().iter().map(|&v| f64::from(v)).sum::<f64>() / 240.0;
        assert!(mean.abs() < 0.3);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let m = Matrix::from_fn(10, 4, |r, c| (r * 4 + c) as f32 * 0.5);
        write_samples(&m, &p).unwrap();
        assert_eq!(read_samples(&p).unwrap(), m);
        let set = CalibSet::from_file(&p).unwrap();
        assert_eq!(set.calib().rows(), 8);
        assert_eq!(set.heldout().row(1), m.row(9));

        std::fs::write(&p, b"MQCB\x02\x00\x00\x00\x02\x00\x00\x00abc").unwrap();
        assert!(read_samples(&p).is_err());
        assert!(CalibSet::synthetic(0, 4, 0, 3).is_err());
    }
}
