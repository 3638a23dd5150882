//! Frozen feature extractor: a randomly initialized small CNN applied to
//! patch pixels. Weights are drawn once (or loaded) and never trained; the
//! network only shapes the feature space in which distributions are matched.
//! Filters enter the tape as constants, so gradients structurally cannot
//! accumulate into them.
//!
//! Weights persist in a small binary format: magic `IDCW`, u32 version (1),
//! u32 tensor count, then per tensor u32 rank, u32 dims, and raw
//! little-endian f32 data. All integers little-endian. Random weights are
//! drawn at f32 and widened, so a save/load round trip is exact in both
//! engine precisions.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{num, Element, GradTape, Tensor, Value};

const MAGIC: &[u8; 4] = b"IDCW";
const VERSION: u32 = 1;

/// Negative slope of the leaky-ReLU between layers.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Layer plan for [`Extractor::random_init`]: output widths and kernel sizes
/// of the conv stack, applied to `in_channels` input planes with leaky-ReLU
/// between layers (not after the last).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub in_channels: usize,
    /// `(out_channels, kernel)` per conv layer.
    pub layers: Vec<(usize, usize)>,
}

impl Default for ArchSpec {
    /// 3 -> 32 -> 32 -> 32 with 3x3 kernels.
    fn default() -> Self {
        ArchSpec {
            in_channels: 3,
            layers: vec![(32, 3), (32, 3), (32, 3)],
        }
    }
}

impl ArchSpec {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.layers.is_empty() {
            return Err(Error::Config("extractor needs at least one layer and one input channel".into()));
        }
        for &(width, k) in &self.layers {
            if width == 0 {
                return Err(Error::Config("extractor layer width must be positive".into()));
            }
            if k % 2 == 0 || k == 0 {
                return Err(Error::Config(format!("extractor kernel must be odd, got {k}")));
            }
        }
        Ok(())
    }
}

/// The frozen CNN. `layers` pairs each filter `[O, C, k, k]` with its
/// activation flag (leaky-ReLU applied after that layer).
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor<S: Element> {
    layers: Vec<(Tensor<S>, bool)>,
}

impl<S: Element> Extractor<S> {
    /// Draw weights uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, seeded.
    /// The same seed yields bitwise-identical weights on every run.
    pub fn random_init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut c_in = arch.in_channels;
        for (i, &(width, k)) in arch.layers.iter().enumerate() {
            let fan_in = c_in * k * k;
            let bound = 1.0f32 / (fan_in as f32).sqrt();
            let data: Vec<S> = (0..width * c_in * k * k)
                .map(|_| num::<S>(rng.gen_range(-bound..=bound) as f64))
                .collect();
            let filter = Tensor::new(vec![width, c_in, k, k], data)?;
            let activate = i + 1 < arch.layers.len();
            layers.push((filter, activate));
            c_in = width;
        }
        Ok(Extractor { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].0.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty").0.dim(0)
    }

    pub fn layers(&self) -> &[(Tensor<S>, bool)] {
        &self.layers
    }

    /// Run the conv stack on a `[N, C_in, H, W]` pixel value already on the
    /// tape. Pixels must lie in `[0, 1]`. Weights are constants: gradients
    /// flow to the input only.
    pub fn extract(&self, tape: &mut GradTape<S>, pixels: Value) -> Result<Value> {
        let x = tape.value(pixels);
        if x.rank() != 4 || x.dim(1) != self.in_channels() {
            return Err(Error::Contract(format!(
                "extract wants [N,{},H,W], got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        if x.data().iter().any(|&v| v < S::zero() || v > S::one()) {
            return Err(Error::Contract("extract input pixels outside [0,1]".into()));
        }
        let mut cur = pixels;
        for (filter, activate) in &self.layers {
            cur = tape.conv2d(cur, filter)?;
            if *activate {
                cur = tape.leaky_relu(cur, LEAKY_SLOPE)?;
            }
        }
        Ok(cur)
    }

    /// Convenience wrapper for constant inputs (no gradients wanted).
    pub fn extract_plain(&self, pixels: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = GradTape::new();
        let v = tape.constant(pixels.clone());
        let out = self.extract(&mut tape, v)?;
        Ok(tape.value(out).clone())
    }

    /// Serialize to the `IDCW` format. Values are narrowed to f32.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for (filter, _) in &self.layers {
            buf.extend_from_slice(&(filter.rank() as u32).to_le_bytes());
            for &d in filter.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in filter.data() {
                let f = v.to_f64().expect("widen") as f32;
                buf.extend_from_slice(&f.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Load from the `IDCW` format, validating magic, version, and that the
    /// tensors chain into a conv stack. Activation flags follow the default
    /// scheme (every layer but the last).
    pub fn load_weights(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::Format(format!(
                    "weight file truncated at byte {} of {}",
                    *off,
                    bytes.len()
                )));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let read_u32 = |off: &mut usize| -> Result<u32> {
            let s = take(off, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        if take(&mut off, 4)? != MAGIC {
            return Err(Error::Format("bad magic, not an IDCW weight file".into()));
        }
        let version = read_u32(&mut off)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight version {version}")));
        }
        let count = read_u32(&mut off)? as usize;
        if count == 0 {
            return Err(Error::Format("weight file holds no tensors".into()));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = read_u32(&mut off)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut off)? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = take(&mut off, numel * 4)?;
            let data: Vec<S> = raw
                .chunks_exact(4)
                .map(|b| num::<S>(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            tensors.push(Tensor::new(dims, data)?);
        }
        if off != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after last tensor", bytes.len() - off)));
        }
        // validate the conv chain
        let mut c_in = None;
        for t in &tensors {
            if t.rank() != 4 || t.dim(2) != t.dim(3) || t.dim(2) % 2 == 0 {
                return Err(Error::Format(format!("tensor shape {:?} is not an odd square conv filter", t.shape())));
            }
            if let Some(c) = c_in {
                if t.dim(1) != c {
                    return Err(Error::Format(format!(
                        "layer expects {} input channels but previous layer emits {c}",
                        t.dim(1)
                    )));
                }
            }
            c_in = Some(t.dim(0));
        }
        let n = tensors.len();
        Ok(Extractor {
            layers: tensors
                .into_iter()
                .enumerate()
                .map(|(i, t)| (t, i + 1 < n))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = Extractor::<f32>::random_init(&ArchSpec::default(), 9).unwrap();
        let b = Extractor::<f32>::random_init(&ArchSpec::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = Extractor::<f32>::random_init(&ArchSpec::default(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let e = Extractor::<f64>::random_init(&ArchSpec::default(), 3).unwrap();
        let bounds = [1.0 / 27.0f64.sqrt(), 1.0 / 288.0f64.sqrt(), 1.0 / 288.0f64.sqrt()];
        for ((filter, _), bound) in e.layers().iter().zip(bounds) {
            assert!(filter.data().iter().all(|v| v.abs() <= bound + 1e-7));
            // and the draw actually uses the range, not a constant
            assert!(filter.data().iter().any(|v| v.abs() > bound * 0.5));
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.idcw");
        let e32 = Extractor::<f32>::random_init(&ArchSpec::default(), 4).unwrap();
        e32.save_weights(&path).unwrap();
        let back32 = Extractor::<f32>::load_weights(&path).unwrap();
        assert_eq!(e32, back32);

        // f64 engine: weights originate from f32 draws, so narrowing is lossless
        let e64 = Extractor::<f64>::random_init(&ArchSpec::default(), 4).unwrap();
        e64.save_weights(&path).unwrap();
        let back64 = Extractor::<f64>::load_weights(&path).unwrap();
        assert_eq!(e64, back64);
    }

    #[test]
    fn load_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.idcw");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(Extractor::<f32>::load_weights(&path), Err(Error::Format(_))));

        let e = Extractor::<f32>::random_init(&ArchSpec::default(), 4).unwrap();
        e.save_weights(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(Extractor::<f32>::load_weights(&path), Err(Error::Format(_))));
    }

    #[test]
    fn extract_is_per_sample_pure() {
        let e = Extractor::<f64>::random_init(&ArchSpec::default(), 11).unwrap();
        let a = Tensor::from_fn(&[1, 3, 6, 6], |i| ((i * 37 % 101) as f64) / 101.0);
        let b = Tensor::from_fn(&[1, 3, 6, 6], |i| ((i * 53 % 97) as f64) / 97.0);
        let mut both_data = a.data().to_vec();
        both_data.extend_from_slice(b.data());
        let both = Tensor::new(vec![2, 3, 6, 6], both_data).unwrap();
        let fa = e.extract_plain(&a).unwrap();
        let fb = e.extract_plain(&b).unwrap();
        let fboth = e.extract_plain(&both).unwrap();
        let half = fboth.numel() / 2;
        assert_eq!(&fboth.data()[..half], fa.data());
        assert_eq!(&fboth.data()[half..], fb.data());
    }

    #[test]
    fn extract_rejects_out_of_range_pixels() {
        let e = Extractor::<f64>::random_init(&ArchSpec::default(), 11).unwrap();
        let bad = Tensor::filled(&[1, 3, 4, 4], 1.25);
        assert!(matches!(e.extract_plain(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn weights_unchanged_by_extract_with_gradients() {
        let e = Extractor::<f64>::random_init(&ArchSpec::default(), 5).unwrap();
        let before = e.clone();
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::filled(&[1, 3, 5, 5], 0.5));
        let feat = e.extract(&mut tape, x).unwrap();
        let loss = e_loss(&mut tape, feat);
        tape.backward(loss).unwrap();
        assert_eq!(e, before);
    }

    fn e_loss(tape: &mut GradTape<f64>, v: Value) -> Value {
        tape.mean(v).unwrap()
    }
}
