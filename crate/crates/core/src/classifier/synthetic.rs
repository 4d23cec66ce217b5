use serde::{Deserialize, Serialize};

use super::{ClassifierScore, Oracle, OracleError};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{BinaryMask, MultiSequenceVolume, SequenceKind};

/// Parameters of the analytic stand-in classifier.
///
/// `p = 1 / (1 + exp(-gain * (w - offset)))` where `w` is the weighted mean
/// intensity of the sequences restricted to `target_region`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub target_region: BinaryMask,
    pub gain: f64,
    pub offset: f64,
    /// Indexed by [`SequenceKind::index`].
    pub sequence_weights: [f64; 4],
}

/// Serializable view of the scalar parameters (the region travels separately).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSettings {
    pub gain: f64,
    pub offset: f64,
    pub weights: [f64; 4],
}

impl Default for SyntheticSettings {
    /// Logistic gain 10 at offset 0.5, all weight on T2w.
    fn default() -> Self {
        let mut weights = [0.0; 4];
        weights[SequenceKind::T2w.index()] = 1.0;
        SyntheticSettings {
            gain: 10.0,
            offset: 0.5,
            weights,
        }
    }
}

impl SyntheticSettings {
    pub fn params(&self, target_region: BinaryMask) -> SyntheticParams {
        SyntheticParams {
            target_region,
            gain: self.gain,
            offset: self.offset,
            sequence_weights: self.weights,
        }
    }
}

impl SyntheticParams {
    /// All weight on one sequence.
    pub fn focused(target_region: BinaryMask, sequence: SequenceKind, gain: f64, offset: f64) -> Self {
        let mut sequence_weights = [0.0; 4];
        sequence_weights[sequence.index()] = 1.0;
        SyntheticParams {
            target_region,
            gain,
            offset,
            sequence_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_region.is_empty() {
            return Err(Error::validation("synthetic target region is empty"));
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::validation(format!("gain must be positive, got {}", self.gain)));
        }
        if !(0.0..=1.0).contains(&self.offset) {
            return Err(Error::validation(format!("offset must lie in [0, 1], got {}", self.offset)));
        }
        if self.sequence_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation("sequence weights must be finite and nonnegative"));
        }
        let sum: f64 = self.sequence_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("sequence weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// In-process oracle whose decision depends only on `target_region`.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    params: SyntheticParams,
    region: Vec<usize>,
    max_in_flight: usize,
}

impl SyntheticOracle {
    pub fn new(params: SyntheticParams) -> Result<Self> {
        params.validate()?;
        let region = params.target_region.indices();
        let max_in_flight = std::thread::available_parallelism()
            .map(|n| n.get().min(8))
            .unwrap_or(1);
        Ok(SyntheticOracle {
            params,
            region,
            max_in_flight,
        })
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    /// Weighted mean intensity inside the target region.
    pub fn weighted_mean<T: Scalar>(&self, volume: &MultiSequenceVolume<T>) -> Result<f64, OracleError> {
        if volume.dims() != self.params.target_region.dims() {
            return Err(OracleError::InvalidInput(format!(
                "volume dims {} do not match model dims {}",
                volume.dims(),
                self.params.target_region.dims()
            )));
        }
        if let Err(e) = volume.ensure_complete() {
            return Err(OracleError::InvalidInput(e.to_string()));
        }
        let n = self.region.len() as f64;
        let mut total = 0.0;
        for kind in SequenceKind::ALL {
            let w = self.params.sequence_weights[kind.index()];
            if w == 0.0 {
                continue;
            }
            let data = volume.get(kind).expect("complete volume").data();
            let sum: f64 = self.region.iter().map(|&i| data[i].as_f64()).sum();
            total += w * (sum / n);
        }
        Ok(total)
    }

    pub fn probability_for_mean(&self, weighted_mean: f64) -> f64 {
        1.0 / (1.0 + (-self.params.gain * (weighted_mean - self.params.offset)).exp())
    }
}

impl<T: Scalar> Oracle<T> for SyntheticOracle {
    fn score(&self, volume: &MultiSequenceVolume<T>) -> Result<ClassifierScore, OracleError> {
        let w = self.weighted_mean(volume)?;
        ClassifierScore::new(self.probability_for_mean(w))
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn identity(&self) -> String {
        let p = &self.params;
        format!(
            "synthetic(gain={}, offset={}, weights={:?}, region={} voxels)",
            p.gain,
            p.offset,
            p.sequence_weights,
            self.region.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, ScalarVolume};

    fn volume(dims: Dims, t2: f64) -> MultiSequenceVolume<f64> {
        MultiSequenceVolume::new(SequenceKind::ALL.map(|k| {
            let v = if k == SequenceKind::T2w { t2 } else { 0.3 };
            (k, ScalarVolume::filled(dims, v))
        }))
        .unwrap()
    }

    fn oracle(dims: Dims) -> SyntheticOracle {
        let region = BinaryMask::from_fn(dims, |z, _, _| z == 0);
        SyntheticOracle::new(SyntheticParams::focused(region, SequenceKind::T2w, 10.0, 0.5)).unwrap()
    }

    #[test]
    fn logistic_closed_forms() {
        let dims = Dims::cube(3);
        let o = oracle(dims);
        let mid = o.score(&volume(dims, 0.5)).unwrap().probability();
        assert_eq!(mid, 0.5);
        let high = o.score(&volume(dims, 1.0)).unwrap().probability();
        assert!((high - 1.0 / (1.0 + (-5.0f64).exp())).abs() < 1e-15);
        assert!((high - 0.9933).abs() < 5e-5);
        let low = o.score(&volume(dims, 0.0)).unwrap().probability();
        assert!((low - 0.0067).abs() < 5e-5);
        assert!(((high - low) - 0.9866).abs() < 1e-4);
    }

    #[test]
    fn locality_and_dims() {
        let dims = Dims::cube(3);
        let o = oracle(dims);
        let base = volume(dims, 0.7);
        let p0 = o.score(&base).unwrap();
        let mut changed = base.clone();
        let t2 = changed.get_mut(SequenceKind::T2w).unwrap();
        for i in 9..27 {
            t2.data_mut()[i] = 0.0;
        }
        assert_eq!(o.score(&changed).unwrap(), p0);
        assert!(matches!(
            o.score(&volume(Dims::cube(2), 0.7)),
            Err(OracleError::InvalidInput(_))
        ));
    }

    #[test]
    fn params_validated() {
        let dims = Dims::cube(2);
        let empty = SyntheticParams::focused(BinaryMask::empty(dims), SequenceKind::T2w, 10.0, 0.5);
        assert!(SyntheticOracle::new(empty).is_err());
        let mut p = SyntheticParams::focused(BinaryMask::full(dims), SequenceKind::T2w, 10.0, 0.5);
        p.sequence_weights = [0.5, 0.5, 0.5, 0.0];
        assert!(SyntheticOracle::new(p.clone()).is_err());
        p.sequence_weights = [0.25; 4];
        assert!(SyntheticOracle::new(p.clone()).is_ok());
        p.gain = 0.0;
        assert!(SyntheticOracle::new(p).is_err());
    }
}
