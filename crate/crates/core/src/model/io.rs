//! Versioned binary weight files.
//!
//! ```text
//! magic          b"MLPW"
//! version        u32
//! n_layers       u32
//! shapes         n_layers × (u32 out, u32 in)
//! activation     u8   (0 relu, 1 gelu, 2 sigmoid, 3 identity)
//! latent_layer   u32
//! linear_latent  u8
//! mode           u8   (0 absolute, 1 relative_vanilla, 2 relative_robust)
//! weights        per layer: out·in f64 (row-major W), then out f64 (b)
//! has_stats      u8
//! stats          if has_stats: u32 m, m f64 mean, m f64 std
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BatchStats;
use crate::io::write_atomic;
use crate::linalg::Matrix;
use crate::symmetry::Activation;

use super::{DenseLayer, MLPWeights, Mode};

pub const MAGIC: &[u8; 4] = b"MLPW";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse("weights", format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl MLPWeights {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_layers() as u32).to_le_bytes());
        for (o, i) in self.layer_shapes() {
            out.extend_from_slice(&(o as u32).to_le_bytes());
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
        out.push(self.activation().tag());
        out.extend_from_slice(&(self.latent_layer() as u32).to_le_bytes());
        out.push(self.linear_latent() as u8);
        out.push(self.mode().tag());
        for layer in self.layers() {
            for v in layer.weight.as_slice().iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match self.running_stats() {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&(s.dim() as u32).to_le_bytes());
                for v in s.mean.iter().chain(&s.std) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::parse("weights", "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::parse("weights", format!("unsupported version {version}")));
        }
        let n_layers = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            shapes.push((r.u32()? as usize, r.u32()? as usize));
        }
        let activation = Activation::from_tag(r.u8()?)
            .ok_or_else(|| Error::parse("weights", "unknown activation tag"))?;
        let latent_layer = r.u32()? as usize;
        let linear_latent = match r.u8()? {
            0 => false,
            1 => true,
            t => return Err(Error::parse("weights", format!("bad linear_latent flag {t}"))),
        };
        let mode =
            Mode::from_tag(r.u8()?).ok_or_else(|| Error::parse("weights", "unknown mode tag"))?;
        let mut layers = Vec::with_capacity(n_layers);
        for &(o, i) in &shapes {
            let weight = Matrix::from_vec(o, i, r.f64s(o * i)?)?;
            let bias = r.f64s(o)?;
            layers.push(DenseLayer { weight, bias });
        }
        let mut weights = MLPWeights::new(layers, activation, latent_layer, linear_latent, mode)?;
        if r.u8()? == 1 {
            let m = r.u32()? as usize;
            let mean = r.f64s(m)?;
            let std = r.f64s(m)?;
            weights.set_running_stats(Some(BatchStats::new(mean, std)?))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::parse("weights", "trailing bytes"));
        }
        Ok(weights)
    }
}

pub fn save_weights(weights: &MLPWeights, path: &Path) -> Result<()> {
    write_atomic(path, &weights.to_bytes())
}

pub fn load_weights(path: &Path) -> Result<MLPWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MLPWeights::from_bytes(&bytes).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpBuilder;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let w = MlpBuilder::new(&[2, 3, 2], Activation::Gelu).seed(1).build().unwrap();
        let b = w.to_bytes();
        assert_eq!(&b[..4], b"MLPW");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        // 2 shapes, tags, 6+3 + 6+2 floats, stats flag
        assert_eq!(b.len(), 12 + 16 + 1 + 4 + 1 + 1 + 17 * 8 + 1);
    }

    #[test]
    fn rejects_corruption() {
        let w = MlpBuilder::new(&[2, 3, 2], Activation::Relu).build().unwrap();
        let mut b = w.to_bytes();
        assert!(MLPWeights::from_bytes(&b[..b.len() - 3]).is_err());
        b[0] = b'X';
        assert!(MLPWeights::from_bytes(&b).is_err());
        let mut v = w.to_bytes();
        v[4] = 9;
        assert!(MLPWeights::from_bytes(&v).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mlpw");
        let mut w = MlpBuilder::new(&[3, 4, 4, 2], Activation::Sigmoid)
            .mode(Mode::RelativeRobust, Some(3))
            .linear_latent(true)
            .seed(3)
            .build()
            .unwrap();
        w.set_running_stats(Some(BatchStats::new(vec![0.1, -2.0, 3.0, 0.0], vec![1.0, 2.0, 0.5, 7.0]).unwrap()))
            .unwrap();
        save_weights(&w, &path).unwrap();
        assert_eq!(load_weights(&path).unwrap(), w);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn bytes_round_trip(seed in any::<u64>(), act in 0u8..4, mode in 0u8..3, hidden in 1usize..6, latent in 1usize..6) {
            let mode = Mode::from_tag(mode).unwrap();
            let w = MlpBuilder::new(&[3, hidden, latent, 2], Activation::from_tag(act).unwrap())
                .mode(mode, Some(4))
                .seed(seed)
                .build()
                .unwrap();
            prop_assert_eq!(MLPWeights::from_bytes(&w.to_bytes()).unwrap(), w);
        }
    }
}
