//! Synthetic two-factor corpus.
//!
//! A keyword is an ordered pair of distinct tones `(a, b)`: tone `a` fills
//! the first half of the utterance and tone `b` the second. Tones live at
//! 2 kHz and above. A speaker is a harmonic series on a speaker-specific
//! fundamental with a speaker-specific spectral envelope, confined below
//! [`SPEAKER_BAND_HZ`]. Both components use fixed phases, so the only
//! per-utterance variation is additive Gaussian noise.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::DataError;
use crate::rng;

/// Lowest keyword tone.
pub const FIRST_TONE_HZ: f64 = 2000.0;
/// Spacing between keyword tones.
pub const TONE_STEP_HZ: f64 = 800.0;
/// Upper edge of the speaker band.
pub const SPEAKER_BAND_HZ: f64 = 1800.0;
/// Fundamental of speaker 0.
pub const BASE_F0_HZ: f64 = 100.0;
/// Fundamental increment between consecutive speakers.
pub const F0_STEP_HZ: f64 = 12.5;

const TONE_AMPLITUDE: f64 = 0.7;
const SPEAKER_RMS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_keywords: usize,
    pub num_speakers: usize,
    pub train_per_pair: usize,
    pub test_per_pair: usize,
    pub sample_length: usize,
    pub rate: u32,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_keywords: 12,
            num_speakers: 8,
            train_per_pair: 4,
            test_per_pair: 2,
            sample_length: 320,
            rate: 16_000,
            noise: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub keyword: usize,
    pub speaker: usize,
    pub split: Split,
    pub samples: Vec<f32>,
}

/// Number of tones needed so that ordered pairs cover `num_keywords`.
pub fn tone_count(num_keywords: usize) -> usize {
    (2..).find(|m| m * (m - 1) >= num_keywords).unwrap()
}

/// Keyword tone frequencies in Hz.
pub fn tone_table(num_keywords: usize) -> Vec<f64> {
    (0..tone_count(num_keywords))
        .map(|j| FIRST_TONE_HZ + TONE_STEP_HZ * j as f64)
        .collect()
}

/// Tone indices `(first half, second half)` of keyword `k`, enumerating
/// ordered pairs of distinct tones lexicographically.
pub fn keyword_tones(k: usize, num_keywords: usize) -> (usize, usize) {
    let m = tone_count(num_keywords);
    let a = k / (m - 1);
    let r = k % (m - 1);
    let b = if r >= a { r + 1 } else { r };
    (a, b)
}

pub fn speaker_f0(s: usize) -> f64 {
    BASE_F0_HZ + F0_STEP_HZ * s as f64
}

impl SynthSpec {
    pub fn validate(&self, min_length: usize) -> Result<(), DataError> {
        let bad = |key: &'static str, msg: String| Err(DataError::InvalidSpec { key, msg });
        if self.num_keywords < 2 {
            return bad("data.keywords", "need at least 2 keywords".into());
        }
        if self.num_speakers < 2 {
            return bad("data.speakers", "need at least 2 speakers".into());
        }
        if self.train_per_pair == 0 || self.test_per_pair == 0 {
            return bad("data.train_per_pair", "both splits need utterances".into());
        }
        if self.rate == 0 {
            return bad("data.rate", "rate must be positive".into());
        }
        let nyquist = self.rate as f64 / 2.0;
        let top = *tone_table(self.num_keywords).last().unwrap();
        if top >= 0.95 * nyquist {
            return bad(
                "data.keywords",
                format!("{} keywords need a {top} Hz tone above the usable band", self.num_keywords),
            );
        }
        if speaker_f0(self.num_speakers - 1) >= SPEAKER_BAND_HZ / 2.0 {
            return bad("data.speakers", format!("{} speakers exceed the speaker band", self.num_speakers));
        }
        if self.sample_length < min_length.max(2) {
            return bad(
                "data.sample_length",
                format!("{} is shorter than the {min_length}-sample receptive field", self.sample_length),
            );
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("data.noise", format!("{} is not a non-negative level", self.noise));
        }
        Ok(())
    }

    fn keyword_template(&self, k: usize) -> Vec<f64> {
        let tones = tone_table(self.num_keywords);
        let (a, b) = keyword_tones(k, self.num_keywords);
        let mut r = rng::stream(self.seed, &format!("synth/keyword{k}"));
        let (pa, pb): (f64, f64) = (r.random::<f64>() * 2.0 * PI, r.random::<f64>() * 2.0 * PI);
        let half = self.sample_length / 2;
        let rate = self.rate as f64;
        (0..self.sample_length)
            .map(|n| {
                let t = n as f64 / rate;
                let (f, p) = if n < half { (tones[a], pa) } else { (tones[b], pb) };
                TONE_AMPLITUDE * (2.0 * PI * f * t + p).sin()
            })
            .collect()
    }

    fn speaker_signature(&self, s: usize) -> Vec<f64> {
        let f0 = speaker_f0(s);
        let mut r = rng::stream(self.seed, &format!("synth/speaker{s}"));
        let harmonics: Vec<(f64, f64, f64)> = (1..)
            .map(|h| h as f64 * f0)
            .take_while(|&f| f < SPEAKER_BAND_HZ)
            .enumerate()
            .map(|(i, f)| {
                let env = 0.2 + 0.8 * r.random::<f64>();
                let amp = env / ((i + 1) as f64).sqrt();
                (f, amp, r.random::<f64>() * 2.0 * PI)
            })
            .collect();
        // Scale so the continuous-time RMS is SPEAKER_RMS.
        let power: f64 = harmonics.iter().map(|(_, a, _)| a * a / 2.0).sum();
        let gain = SPEAKER_RMS / power.sqrt();
        let rate = self.rate as f64;
        (0..self.sample_length)
            .map(|n| {
                let t = n as f64 / rate;
                gain * harmonics
                    .iter()
                    .map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn utterance_id(keyword: usize, speaker: usize, split: Split, k: usize) -> String {
        format!("{}-kw{keyword:02}-spk{speaker:02}-{k:03}", split.name())
    }

    /// Generates every utterance in a fixed order: split, keyword, speaker,
    /// repetition.
    pub fn generate(&self, min_length: usize) -> Result<Vec<Utterance>, DataError> {
        self.validate(min_length)?;
        let keywords: Vec<Vec<f64>> = (0..self.num_keywords).map(|k| self.keyword_template(k)).collect();
        let speakers: Vec<Vec<f64>> = (0..self.num_speakers).map(|s| self.speaker_signature(s)).collect();
        let mut out = Vec::new();
        for (split, reps) in [(Split::Train, self.train_per_pair), (Split::Test, self.test_per_pair)] {
            for (kw, template) in keywords.iter().enumerate() {
                for (spk, signature) in speakers.iter().enumerate() {
                    for k in 0..reps {
                        let id = Self::utterance_id(kw, spk, split, k);
                        let mut r = rng::stream(self.seed, &format!("synth/noise/{id}"));
                        let samples = template
                            .iter()
                            .zip(signature)
                            .map(|(a, b)| {
                                let n: f64 = r.sample(StandardNormal);
                                (a + b + self.noise * n) as f32
                            })
                            .collect();
                        out.push(Utterance {
                            id,
                            keyword: kw,
                            speaker: spk,
                            split,
                            samples,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_keywords_use_four_tones() {
        assert_eq!(tone_count(12), 4);
        assert_eq!(tone_table(12), vec![2000.0, 2800.0, 3600.0, 4400.0]);
        let mut pairs: Vec<_> = (0..12).map(|k| keyword_tones(k, 12)).collect();
        assert!(pairs.iter().all(|(a, b)| a != b && *a < 4 && *b < 4));
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 12);
    }

    #[test]
    fn validation_names_keys() {
        let spec = SynthSpec {
            noise: -1.0,
            ..SynthSpec::default()
        };
        assert!(matches!(
            spec.validate(20),
            Err(DataError::InvalidSpec { key: "data.noise", .. })
        ));
        let spec = SynthSpec {
            sample_length: 10,
            ..SynthSpec::default()
        };
        assert!(matches!(
            spec.validate(20),
            Err(DataError::InvalidSpec { key: "data.sample_length", .. })
        ));
    }
}
