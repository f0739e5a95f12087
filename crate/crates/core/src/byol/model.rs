//! Trained encoder persistence and batch embedding.
//!
//! Checkpoint layout (little-endian throughout):
//! magic `BREN`, format version u32, architecture descriptor string,
//! patch_size u32, seed u64, epochs_trained u32, training-set id string,
//! tensor count u32, then per tensor: name string, rank u32, dims u64 each,
//! f32 values. Strings are u32-length-prefixed UTF-8. The encoder checksum
//! is the SHA-256 of these bytes and binds cluster models and reports to
//! the exact weights that produced them.

use super::net::{Encoder, ARCH_DESCRIPTOR, EMBED_DIM};
use crate::peak_extract::PeakPatch;
use crate::tensor::Tensor;
use crate::util;
use crate::{Error, Result};
use rayon::prelude::*;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BREN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The trained representation model plus its training provenance.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub encoder: Encoder<f32>,
    pub patch_size: usize,
    pub seed: u64,
    pub epochs_trained: usize,
    pub training_set_id: String,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_str(out, name);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: std::path::PathBuf,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Malformed {
                path: self.path.clone(),
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Malformed {
            path: self.path.clone(),
            reason: "non-utf8 string".into(),
        })
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        match Tensor::new(&shape, data) {
            Ok(t) => Ok((name, t)),
            Err(_) => Err(Error::Malformed {
                path: self.path.clone(),
                reason: format!("bad tensor `{name}`"),
            }),
        }
    }
}

impl EncoderModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, ARCH_DESCRIPTOR);
        out.extend_from_slice(&(self.patch_size as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.epochs_trained as u32).to_le_bytes());
        put_str(&mut out, &self.training_set_id);
        let tensors = [
            ("conv1.weight", &self.encoder.conv1.weight),
            ("conv1.bias", &self.encoder.conv1.bias),
            ("conv2.weight", &self.encoder.conv2.weight),
            ("conv2.bias", &self.encoder.conv2.bias),
            ("conv3.weight", &self.encoder.conv3.weight),
            ("conv3.bias", &self.encoder.conv3.bias),
        ];
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_tensor(&mut out, name, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: impl AsRef<Path>) -> Result<Self> {
        let mut cur = Cursor {
            bytes,
            pos: 0,
            path: origin.as_ref().to_path_buf(),
        };
        let malformed = |reason: &str, path: &Path| Error::Malformed {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(malformed("bad magic", origin.as_ref()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(malformed(
                &format!("unsupported checkpoint version {version}"),
                origin.as_ref(),
            ));
        }
        let arch = cur.str()?;
        if arch != ARCH_DESCRIPTOR {
            return Err(malformed(
                &format!("unknown architecture `{arch}`"),
                origin.as_ref(),
            ));
        }
        let patch_size = cur.u32()? as usize;
        let seed = cur.u64()?;
        let epochs_trained = cur.u32()? as usize;
        let training_set_id = cur.str()?;
        let n_tensors = cur.u32()? as usize;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..n_tensors {
            let (name, t) = cur.tensor()?;
            tensors.insert(name, t);
        }
        let mut grab = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| malformed(&format!("missing tensor `{name}`"), origin.as_ref()))
        };
        let encoder = Encoder {
            conv1: super::net::Conv {
                weight: grab("conv1.weight")?,
                bias: grab("conv1.bias")?,
            },
            conv2: super::net::Conv {
                weight: grab("conv2.weight")?,
                bias: grab("conv2.bias")?,
            },
            conv3: super::net::Conv {
                weight: grab("conv3.weight")?,
                bias: grab("conv3.bias")?,
            },
        };
        Ok(Self {
            encoder,
            patch_size,
            seed,
            epochs_trained,
            training_set_id,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.to_path_buf(), e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.to_path_buf(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 over the serialized checkpoint; binds downstream artifacts
    /// to these exact weights.
    pub fn checksum(&self) -> String {
        util::sha256_hex(&self.to_bytes())
    }

    pub fn all_weights_finite(&self) -> bool {
        self.encoder.params().iter().all(|t| t.is_finite())
    }

    /// Embed one patch into the 32-dim representation space.
    pub fn embed_one(&self, patch: &PeakPatch) -> Vec<f32> {
        let x = Tensor::new(
            &[1, 1, patch.size, patch.size],
            patch.pixels.clone(),
        )
        .expect("patch is square");
        self.encoder
            .forward(&x)
            .expect("encoder accepts any square patch")
            .into_data()
    }

    /// Embed a whole dataset. Chunks run in parallel; each embedding is an
    /// independent computation, so output is identical for any worker count.
    pub fn embed(&self, patches: &[PeakPatch]) -> Vec<Vec<f32>> {
        util::init_workers();
        const CHUNK: usize = 128;
        patches
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let p = chunk[0].size;
                let mut data = Vec::with_capacity(chunk.len() * p * p);
                for patch in chunk {
                    data.extend_from_slice(&patch.pixels);
                }
                let x = Tensor::new(&[chunk.len(), 1, p, p], data).expect("square patches");
                let y = self.encoder.forward(&x).expect("valid batch");
                let rows: Vec<Vec<f32>> = y
                    .data()
                    .chunks_exact(EMBED_DIM)
                    .map(|r| r.to_vec())
                    .collect();
                rows
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> EncoderModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderModel {
            encoder: Encoder::init(&mut rng),
            patch_size: 15,
            seed,
            epochs_trained: 7,
            training_set_id: "baseline-a".into(),
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let m = model(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        m.save(&path).unwrap();
        let loaded = EncoderModel::load(&path).unwrap();
        assert_eq!(loaded.encoder, m.encoder);
        assert_eq!(loaded.patch_size, 15);
        assert_eq!(loaded.seed, 5);
        assert_eq!(loaded.epochs_trained, 7);
        assert_eq!(loaded.training_set_id, "baseline-a");
        assert_eq!(loaded.checksum(), m.checksum());
    }

    #[test]
    fn checksum_changes_with_weights() {
        assert_ne!(model(1).checksum(), model(2).checksum());
    }

    #[test]
    fn corrupt_magic_is_malformed() {
        let mut bytes = model(3).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            EncoderModel::from_bytes(&bytes, "x.ckpt"),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn batch_embed_matches_single_embeds() {
        let m = model(9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patches: Vec<PeakPatch> = (0..300)
            .map(|i| {
                let pixels: Vec<f32> = (0..225)
                    .map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
                    .collect();
                PeakPatch {
                    pixels,
                    size: 15,
                    frame_index: i,
                    omega: 0.0,
                    centroid_row: 0.0,
                    centroid_col: 0.0,
                    raw_max: 1,
                    component_area: 1,
                }
            })
            .collect();
        let batch = m.embed(&patches);
        assert_eq!(batch.len(), 300);
        for (i, row) in batch.iter().enumerate().step_by(37) {
            assert_eq!(row, &m.embed_one(&patches[i]));
        }
    }
}
