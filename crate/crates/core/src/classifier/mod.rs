//! Black-box access to a binary tumour-grade classifier.
//!
//! Everything downstream only sees the [`Oracle`] trait: hand it a complete
//! four-sequence volume, get back the probability of the positive (HGG)
//! class. Two bindings exist, an analytic [`SyntheticOracle`] with a known
//! hidden region and a [`RemoteOracle`] speaking the JSON scoring protocol.

mod remote;
mod synthetic;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;

use crate::scalar::Scalar;
use crate::volume::MultiSequenceVolume;

pub use remote::{encode_score_request, RemoteConfig, RemoteOracle, ScoreRequest};
pub use synthetic::{SyntheticOracle, SyntheticParams, SyntheticSettings};

/// Positive-class probability, finite and within `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct ClassifierScore(f64);

impl ClassifierScore {
    pub fn new(probability: f64) -> Result<Self, OracleError> {
        if probability.is_finite() && (0.0..=1.0).contains(&probability) {
            Ok(ClassifierScore(probability))
        } else {
            Err(OracleError::OutOfRange(probability))
        }
    }

    pub fn probability(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("server answered {code}: {message}")]
    Status { code: u16, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl OracleError {
    /// Transport failures worth another attempt; contract violations are not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, OracleError::Connection(_) | OracleError::Timeout(_))
    }
}

/// A classifier that can be queried but not inspected.
pub trait Oracle<T: Scalar>: Send + Sync {
    fn score(&self, volume: &MultiSequenceVolume<T>) -> Result<ClassifierScore, OracleError>;

    /// Scores each volume; element `i` corresponds to `volumes[i]` and a
    /// failure only affects its own slot.
    fn score_batch(
        &self,
        volumes: &[MultiSequenceVolume<T>],
    ) -> Vec<Result<ClassifierScore, OracleError>> {
        volumes.iter().map(|v| self.score(v)).collect()
    }

    /// Upper bound on concurrent `score` calls callers should issue.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// Short description recorded in output metadata.
    fn identity(&self) -> String;
}

impl<T: Scalar, O: Oracle<T> + ?Sized> Oracle<T> for &O {
    fn score(&self, volume: &MultiSequenceVolume<T>) -> Result<ClassifierScore, OracleError> {
        (**self).score(volume)
    }

    fn score_batch(
        &self,
        volumes: &[MultiSequenceVolume<T>],
    ) -> Vec<Result<ClassifierScore, OracleError>> {
        (**self).score_batch(volumes)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

/// Either of the two supported oracle kinds.
#[derive(Debug)]
pub enum OracleBinding {
    Synthetic(SyntheticOracle),
    Remote(RemoteOracle),
}

impl<T: Scalar> Oracle<T> for OracleBinding {
    fn score(&self, volume: &MultiSequenceVolume<T>) -> Result<ClassifierScore, OracleError> {
        match self {
            OracleBinding::Synthetic(o) => o.score(volume),
            OracleBinding::Remote(o) => o.score(volume),
        }
    }

    fn score_batch(
        &self,
        volumes: &[MultiSequenceVolume<T>],
    ) -> Vec<Result<ClassifierScore, OracleError>> {
        match self {
            OracleBinding::Synthetic(o) => o.score_batch(volumes),
            OracleBinding::Remote(o) => o.score_batch(volumes),
        }
    }

    fn max_in_flight(&self) -> usize {
        match self {
            OracleBinding::Synthetic(o) => Oracle::<T>::max_in_flight(o),
            OracleBinding::Remote(o) => Oracle::<T>::max_in_flight(o),
        }
    }

    fn identity(&self) -> String {
        match self {
            OracleBinding::Synthetic(o) => Oracle::<T>::identity(o),
            OracleBinding::Remote(o) => Oracle::<T>::identity(o),
        }
    }
}

/// Wraps an oracle and counts `score` calls.
#[derive(Debug)]
pub struct CountingOracle<O> {
    inner: O,
    calls: AtomicUsize,
}

impl<O> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        CountingOracle {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<T: Scalar, O: Oracle<T>> Oracle<T> for CountingOracle<O> {
    fn score(&self, volume: &MultiSequenceVolume<T>) -> Result<ClassifierScore, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(volume)
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_range_enforced() {
        assert!(ClassifierScore::new(0.0).is_ok());
        assert!(ClassifierScore::new(1.0).is_ok());
        assert_eq!(ClassifierScore::new(1.5), Err(OracleError::OutOfRange(1.5)));
        assert!(ClassifierScore::new(f64::NAN).is_err());
    }

    #[test]
    fn only_transport_errors_retry() {
        assert!(OracleError::Connection("x".into()).is_retryable());
        assert!(OracleError::Timeout("x".into()).is_retryable());
        assert!(!OracleError::OutOfRange(2.0).is_retryable());
        assert!(!OracleError::Status {
            code: 503,
            message: String::new()
        }
        .is_retryable());
    }
}
