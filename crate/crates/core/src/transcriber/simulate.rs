//! Correlated noisy-channel simulator.
//!
//! Error indicators follow a Gaussian copula: for character position k of a
//! field, a latent `Z_common` is shared by every sample index and mixed with
//! a per-sample `Z_n` as `X = sqrt(rho) * Z_common + sqrt(1 - rho) * Z_n`.
//! The character is corrupted when `Phi(X) < epsilon`. Each latent comes from
//! its own ChaCha8 stream addressed by (seed, field, sample, position), so
//! output never depends on call order or thread count.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use thiserror::Error;

use super::{Job, TranscribeError, Transcriber};
use crate::model::{FieldName, FieldSet};
use crate::rng;

const TAG_COMMON: u64 = 0xC0_4404;
const TAG_SAMPLE: u64 = 0x5A_4E1E;
const TAG_EDIT: u64 = 0xED_17;
const TAG_DROP: u64 = 0xD2_0F;
const TAG_RECORD: u64 = 0x2E_C02D;

/// Thresholded Gaussian copula for correlated Bernoulli errors.
#[derive(Debug, Clone, Copy)]
pub struct Copula {
    common_weight: f64,
    own_weight: f64,
    /// `Phi^{-1}(epsilon)`; `Phi(x) < epsilon` iff `x < threshold`.
    threshold: f64,
}

impl Copula {
    pub fn new(epsilon: f64, rho: f64) -> Self {
        let threshold = if epsilon <= 0.0 {
            f64::NEG_INFINITY
        } else if epsilon >= 1.0 {
            f64::INFINITY
        } else {
            -std::f64::consts::SQRT_2 * erfc_inv(2.0 * epsilon)
        };
        Self {
            common_weight: rho.sqrt(),
            own_weight: (1.0 - rho).sqrt(),
            threshold,
        }
    }

    #[inline]
    pub fn is_error(&self, z_common: f64, z_own: f64) -> bool {
        self.common_weight * z_common + self.own_weight * z_own < self.threshold
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NoiseModelError {
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("operation mix {0:?} must be non-negative and sum to 1")]
    OpMix([f64; 3]),
}

fn default_op_mix() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

/// Parameters of the simulated transcriber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Per-character error probability.
    pub char_error_rate: f64,
    /// Copula mixing weight between shared and per-sample latents.
    pub correlation: f64,
    /// Probabilities of (substitute, insert, delete) given an error.
    #[serde(default = "default_op_mix")]
    pub op_mix: [f64; 3],
    #[serde(default)]
    pub drop_field_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(char_error_rate: f64, correlation: f64, seed: u64) -> Self {
        Self {
            char_error_rate,
            correlation,
            op_mix: default_op_mix(),
            drop_field_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NoiseModelError> {
        for (name, value) in [
            ("char_error_rate", self.char_error_rate),
            ("correlation", self.correlation),
            ("drop_field_rate", self.drop_field_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(NoiseModelError::OutOfRange { name, value });
            }
        }
        let sum: f64 = self.op_mix.iter().sum();
        if self.op_mix.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(NoiseModelError::OpMix(self.op_mix));
        }
        Ok(())
    }

    /// The same model with its seed bound to one record, so different
    /// records see independent latents.
    pub fn for_record(&self, record_id: &str) -> Self {
        Self {
            seed: rng::key(&[self.seed, TAG_RECORD, rng::str_key(record_id)]),
            ..self.clone()
        }
    }
}

fn random_letter(rng: &mut impl Rng, uppercase: bool, avoid: Option<char>) -> char {
    let base = if uppercase { b'A' } else { b'a' };
    loop {
        let c = (base + rng.random_range(0..26u8)) as char;
        if Some(c) != avoid {
            return c;
        }
    }
}

fn simulate_field(text: &str, field: FieldName, model: &NoiseModel, sample_index: u64, copula: &Copula) -> String {
    let field_key = field.index() as u64;
    let mut out = String::with_capacity(text.len() + 4);
    for (k, ch) in text.chars().enumerate() {
        let k = k as u64;
        let z_common: f64 = StandardNormal.sample(&mut rng::stream(&[model.seed, field_key, TAG_COMMON, k]));
        let z_own: f64 = StandardNormal.sample(&mut rng::stream(&[model.seed, field_key, TAG_SAMPLE, sample_index, k]));
        if !copula.is_error(z_common, z_own) {
            out.push(ch);
            continue;
        }
        let mut edit = rng::stream(&[model.seed, field_key, TAG_EDIT, sample_index, k]);
        let u: f64 = edit.random();
        let upper = ch.is_uppercase();
        if u < model.op_mix[0] {
            out.push(random_letter(&mut edit, upper, Some(ch)));
        } else if u < model.op_mix[0] + model.op_mix[1] {
            out.push(ch);
            out.push(random_letter(&mut edit, false, None));
        }
        // else: deletion
    }
    out
}

/// Corrupts `truth` through the copula channel. Blank truth fields stay absent.
pub fn simulate_transcribe(truth: &FieldSet, model: &NoiseModel, sample_index: u64) -> FieldSet {
    let copula = Copula::new(model.char_error_rate, model.correlation);
    let mut out = FieldSet::new();
    for (field, value) in truth.iter() {
        let Some(text) = value else { continue };
        let dropped = model.drop_field_rate > 0.0 && {
            let u: f64 = rng::stream(&[model.seed, field.index() as u64, TAG_DROP, sample_index]).random();
            u < model.drop_field_rate
        };
        if !dropped {
            out.set(field, Some(simulate_field(text, field, model, sample_index, &copula)));
        }
    }
    out
}

/// A [`Transcriber`] that corrupts ground truth instead of reading pixels.
///
/// The sample index is derived from the spec hash and generation parameters,
/// so every distinct query gets its own per-sample latents.
#[derive(Debug, Clone)]
pub struct SimulatedTranscriber {
    pub model: NoiseModel,
}

impl SimulatedTranscriber {
    pub fn new(model: NoiseModel) -> Result<Self, NoiseModelError> {
        model.validate()?;
        Ok(Self { model })
    }

    pub fn sample_index(job: &Job<'_>) -> u64 {
        rng::key(&[
            rng::str_key(&job.spec.hash()),
            rng::str_key(&job.params.canonical_json()),
        ])
    }
}

impl Transcriber for SimulatedTranscriber {
    fn transcribe(&self, job: &Job<'_>) -> Result<FieldSet, TranscribeError> {
        let model = self.model.for_record(job.record_id);
        Ok(simulate_transcribe(job.truth, &model, Self::sample_index(job)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{pearson, spearman};

    fn truth(len: usize) -> FieldSet {
        let word: String = "abcdefghijklmnopqrstuvwxyz".chars().cycle().take(len).collect();
        let mut fs = FieldSet::new();
        for f in FieldName::ALL {
            fs.set(f, Some(word.clone()));
        }
        fs
    }

    /// Per-character error indicators for one field (substitution-only model).
    fn indicators(model: &NoiseModel, sample: u64, len: usize) -> Vec<bool> {
        let fs = FieldSet::new().with(FieldName::SelfGivenName, "a".repeat(len));
        let out = simulate_transcribe(&fs, model, sample);
        out.get(FieldName::SelfGivenName)
            .unwrap()
            .chars()
            .map(|c| c != 'a')
            .collect()
    }

    #[test]
    fn zero_error_rate_is_identity() {
        let t = truth(9);
        let model = NoiseModel::new(0.0, 0.4, 3);
        for s in 0..5 {
            assert_eq!(simulate_transcribe(&t, &model, s), t);
        }
    }

    #[test]
    fn full_error_rate_substitutes_everything() {
        let t = truth(12);
        let model = NoiseModel::new(1.0, 0.0, 3);
        let out = simulate_transcribe(&t, &model, 7);
        for (f, v) in t.iter() {
            let got = out.get(f).unwrap();
            assert_eq!(got.chars().count(), v.unwrap().chars().count());
            assert!(got.chars().zip(v.unwrap().chars()).all(|(a, b)| a != b));
        }
    }

    #[test]
    fn blank_truth_stays_absent_and_drops_happen() {
        let t = FieldSet::new().with(FieldName::SelfSurname, "smith");
        let model = NoiseModel {
            drop_field_rate: 1.0,
            ..NoiseModel::new(0.0, 0.0, 1)
        };
        assert_eq!(simulate_transcribe(&t, &model, 0), FieldSet::new());
        let keep = NoiseModel::new(0.0, 0.0, 1);
        let out = simulate_transcribe(&t, &keep, 0);
        assert_eq!(out.get(FieldName::SelfGivenName), None);
        assert_eq!(out.get(FieldName::SelfSurname), Some("smith"));
    }

    #[test]
    fn insertions_and_deletions() {
        let t = truth(10);
        let ins = NoiseModel {
            op_mix: [0.0, 1.0, 0.0],
            ..NoiseModel::new(1.0, 0.0, 2)
        };
        let out = simulate_transcribe(&t, &ins, 0);
        assert_eq!(out.get(FieldName::SelfGivenName).unwrap().len(), 20);
        let del = NoiseModel {
            op_mix: [0.0, 0.0, 1.0],
            ..NoiseModel::new(1.0, 0.0, 2)
        };
        assert_eq!(simulate_transcribe(&t, &del, 0).get(FieldName::SelfGivenName), Some(""));
    }

    #[test]
    fn empirical_error_rate() {
        // 10,000 fields of length 10 at epsilon 0.2, independent samples.
        let model = NoiseModel::new(0.2, 0.0, 11);
        let mut errors = 0usize;
        for rec in 0..10_000u64 {
            let m = NoiseModel {
                seed: rec,
                ..model.clone()
            };
            errors += indicators(&m, 0, 10).iter().filter(|&&e| e).count();
        }
        let rate = errors as f64 / 100_000.0;
        assert!((rate - 0.2).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn full_correlation_repeats_error_positions() {
        let model = NoiseModel::new(0.3, 1.0, 5);
        let first = indicators(&model, 0, 40);
        assert!(first.iter().any(|&e| e));
        for s in 1..6 {
            assert_eq!(indicators(&model, s, 40), first);
        }
    }

    /// Pairwise Pearson correlation of error indicators between samples 0
    /// and 1 over `trials` independent positions.
    fn pair_correlation(rho: f64, trials: usize) -> f64 {
        let model = NoiseModel::new(0.2, rho, 99);
        let a: Vec<f64> = indicators(&model, 0, trials).iter().map(|&e| e as u8 as f64).collect();
        let b: Vec<f64> = indicators(&model, 1, trials).iter().map(|&e| e as u8 as f64).collect();
        pearson(&a, &b).unwrap()
    }

    #[test]
    fn independence_at_zero_correlation() {
        let r = pair_correlation(0.0, 100_000);
        assert!(r.abs() < 0.02, "r = {r}");
    }

    #[test]
    fn correlation_is_monotone_in_rho() {
        let rhos = [0.0, 0.3, 0.7, 1.0];
        let measured: Vec<f64> = rhos.iter().map(|&r| pair_correlation(r, 100_000)).collect();
        assert!(spearman(&rhos, &measured).unwrap() > 0.0, "{measured:?}");
        assert!(measured.windows(2).all(|w| w[0] <= w[1]), "{measured:?}");
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::new(1.2, 0.0, 0).validate().is_err());
        let bad_mix = NoiseModel {
            op_mix: [0.5, 0.2, 0.2],
            ..NoiseModel::new(0.1, 0.0, 0)
        };
        assert_eq!(bad_mix.validate(), Err(NoiseModelError::OpMix([0.5, 0.2, 0.2])));
        NoiseModel::new(0.1, 0.5, 0).validate().unwrap();
    }

    #[test]
    fn per_record_seeds_differ() {
        let m = NoiseModel::new(0.5, 0.0, 1);
        assert_ne!(m.for_record("a").seed, m.for_record("b").seed);
        assert_eq!(m.for_record("a"), m.for_record("a"));
    }
}
