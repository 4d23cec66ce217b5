//! Synthetic tumour phantoms with a known lesion, for end-to-end checks
//! without clinical data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::volume::{normalize_all, BinaryMask, Dims, MultiSequenceVolume, ScalarVolume, SequenceKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Ellipsoid semi-axes as fractions of `(depth, height, width)`.
    pub radii: [f64; 3],
    /// Only this sequence shows the lesion; the others are uniform noise.
    pub informative: SequenceKind,
    pub background: f64,
    pub lesion: f64,
    /// Half-width of the uniform noise added to the informative sequence.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: Dims::cube(64),
            radii: [0.15, 0.17, 0.19],
            informative: SequenceKind::T2w,
            background: 0.3,
            lesion: 0.85,
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom<T> {
    /// Normalized to `[0, 1]` per sequence.
    pub volume: MultiSequenceVolume<T>,
    pub lesion: BinaryMask,
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        PhantomSpec {
            seed,
            ..Default::default()
        }
    }

    pub fn generate<T: Scalar>(&self) -> Result<Phantom<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let d = self.dims.as_array();
        let center: [f64; 3] = std::array::from_fn(|a| {
            let jitter = rng.random_range(-0.08..0.08);
            (0.5 + jitter) * d[a] as f64 - 0.5
        });
        let radii: [f64; 3] = std::array::from_fn(|a| self.radii[a] * d[a] as f64);
        let lesion = BinaryMask::from_fn(self.dims, |z, y, x| {
            let p = [z as f64, y as f64, x as f64];
            (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0
        });

        let mut sequences = Vec::with_capacity(4);
        for kind in SequenceKind::ALL {
            let data: Vec<T> = if kind == self.informative {
                lesion
                    .data()
                    .iter()
                    .map(|&inside| {
                        let base = if inside { self.lesion } else { self.background };
                        let n = rng.random_range(-self.noise..=self.noise);
                        T::from_f64_lossy((base + n).clamp(0.0, 1.0))
                    })
                    .collect()
            } else {
                (0..self.dims.len())
                    .map(|_| T::from_f64_lossy(rng.random::<f64>()))
                    .collect()
            };
            sequences.push((kind, ScalarVolume::new(self.dims, data)?));
        }
        let volume = normalize_all(&MultiSequenceVolume::new(sequences)?)?;
        Ok(Phantom { volume, lesion })
    }
}
