//! Synthetic conditional sequences with known generative factors.
//!
//! Each utterance is a `L × D` frame matrix built from a per-text-class
//! sinusoid template, scaled by an amplitude `a`, time-stretched by a tempo
//! `τ` (which sets the length), shifted by a per-speaker offset, plus small
//! Gaussian noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DATASET_MAGIC: &[u8; 7] = b"CAPTOY1";

pub const TEMPO_MIN: f64 = 0.75;
pub const TEMPO_MAX: f64 = 1.25;
pub const AMPLITUDE_LOG_STD: f64 = 0.25;
pub const OFFSET_STD: f64 = 0.5;
pub const NOISE_STD: f64 = 0.05;
pub const MIN_BASE_LENGTH: usize = 12;
pub const MAX_BASE_LENGTH: usize = 40;

// RNG streams derived from the `ToySpec` seed. The "world" (templates, offsets) is
// independent of how many utterances are drawn.
const WORLD_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub channels: usize,
    pub num_text_classes: usize,
    pub num_speakers: usize,
    /// One base frame count per text class.
    pub base_lengths: Vec<usize>,
    pub rng_seed: u64,
    /// Debug mode: `a = 1`, `τ = 1`, no noise.
    pub noiseless: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec::new(8, 10, 4, 0)
    }
}

impl ToySpec {
    /// Spec with base lengths spread evenly over `[12, 40]`.
    pub fn new(channels: usize, num_text_classes: usize, num_speakers: usize, rng_seed: u64) -> Self {
        ToySpec {
            channels,
            num_text_classes,
            num_speakers,
            base_lengths: default_base_lengths(num_text_classes),
            rng_seed,
            noiseless: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("toy spec needs at least one channel"));
        }
        if self.num_text_classes < 2 || self.num_speakers < 2 {
            return Err(Error::config(format!(
                "toy spec needs at least 2 text classes and 2 speakers, got {} and {}",
                self.num_text_classes, self.num_speakers
            )));
        }
        if self.base_lengths.len() != self.num_text_classes {
            return Err(Error::config(format!(
                "{} base lengths given for {} text classes",
                self.base_lengths.len(),
                self.num_text_classes
            )));
        }
        if let Some(&l) = self
            .base_lengths
            .iter()
            .find(|&&l| !(MIN_BASE_LENGTH..=MAX_BASE_LENGTH).contains(&l))
        {
            return Err(Error::config(format!(
                "base length {l} outside [{MIN_BASE_LENGTH}, {MAX_BASE_LENGTH}]"
            )));
        }
        let first = self.base_lengths[0];
        if self.base_lengths.iter().all(|&l| l == first) {
            return Err(Error::config("base lengths must differ across text classes"));
        }
        Ok(())
    }

    /// Longest possible utterance under this spec.
    pub fn max_length(&self) -> usize {
        let b = self.base_lengths.iter().copied().max().unwrap_or(1);
        utterance_length(b, TEMPO_MAX)
    }
}

pub fn default_base_lengths(num_classes: usize) -> Vec<usize> {
    if num_classes <= 1 {
        return vec![MIN_BASE_LENGTH; num_classes];
    }
    let span = (MAX_BASE_LENGTH - MIN_BASE_LENGTH) as f64;
    (0..num_classes)
        .map(|i| MIN_BASE_LENGTH + (span * i as f64 / (num_classes - 1) as f64).round() as usize)
        .collect()
}

/// `L = round(base · τ)`, at least one frame.
pub fn utterance_length(base: usize, tempo: f64) -> usize {
    ((base as f64 * tempo).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub amplitude: f64,
    pub tempo: f64,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub frames: Matrix,
    pub y_t: usize,
    pub y_s: usize,
    pub truth: GroundTruth,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }
}

/// The fixed per-seed parts of the generative process.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    /// `T × D` template frequencies, cycles per utterance.
    pub frequency: Matrix,
    /// `T × D` template phases.
    pub phase: Matrix,
    /// `S × D` speaker offsets.
    pub offsets: Matrix,
}

impl ToyWorld {
    pub fn new(spec: &ToySpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        rng.set_stream(WORLD_STREAM);
        let (t, d, s) = (spec.num_text_classes, spec.channels, spec.num_speakers);
        let mut frequency = Matrix::zeros(t, d);
        let mut phase = Matrix::zeros(t, d);
        for k in 0..t * d {
            frequency.data_mut()[k] = rng.random_range(0.5..2.5);
            phase.data_mut()[k] = rng.random_range(0.0..2.0 * PI);
        }
        let normal = Normal::new(0.0, OFFSET_STD).expect("valid std");
        let mut offsets = Matrix::zeros(s, d);
        for v in offsets.data_mut() {
            *v = normal.sample(&mut rng);
        }
        Ok(ToyWorld {
            frequency,
            phase,
            offsets,
        })
    }

    /// Template of class `y_t`, channel `c`, at normalized time `u ∈ [0, 1)`.
    pub fn template(&self, y_t: usize, c: usize, u: f64) -> f64 {
        (2.0 * PI * self.frequency.get(y_t, c) * u + self.phase.get(y_t, c)).sin()
    }

    /// Noise-free frames for the given factors.
    pub fn clean_frames(&self, spec: &ToySpec, y_t: usize, y_s: usize, amplitude: f64, tempo: f64) -> Matrix {
        let len = utterance_length(spec.base_lengths[y_t], tempo);
        let mut m = Matrix::zeros(len, spec.channels);
        for t in 0..len {
            let u = t as f64 / len as f64;
            for c in 0..spec.channels {
                m.row_mut(t)[c] = amplitude * self.template(y_t, c, u) + self.offsets.get(y_s, c);
            }
        }
        m
    }
}

/// Draw `n` utterances. Deterministic in `(spec, n)`; a prefix of a larger
/// draw equals a smaller draw with the same spec.
pub fn generate_dataset(spec: &ToySpec, n: usize) -> Result<Vec<Utterance>> {
    if n == 0 {
        return Err(Error::input("dataset size must be at least 1"));
    }
    let world = ToyWorld::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(SAMPLE_STREAM);
    let amp = LogNormal::new(0.0, AMPLITUDE_LOG_STD).expect("valid std");
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let y_t = rng.random_range(0..spec.num_text_classes);
        let y_s = rng.random_range(0..spec.num_speakers);
        let a: f64 = amp.sample(&mut rng);
        let tau = rng.random_range(TEMPO_MIN..TEMPO_MAX);
        let (a, tau) = if spec.noiseless { (1.0, 1.0) } else { (a, tau) };
        let mut frames = world.clean_frames(spec, y_t, y_s, a, tau);
        if !spec.noiseless {
            for v in frames.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        out.push(Utterance {
            frames,
            y_t,
            y_s,
            truth: GroundTruth {
                amplitude: a,
                tempo: tau,
                offset: world.offsets.row(y_s).to_vec(),
            },
        });
    }
    Ok(out)
}

/// Order-stable split: the first `round(n · fraction)` items train.
pub fn split<T: Clone>(data: &[T], train_fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::input(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let k = ((data.len() as f64) * train_fraction).round() as usize;
    let k = k.min(data.len());
    Ok((data[..k].to_vec(), data[k..].to_vec()))
}

pub fn encode_dataset(spec: &ToySpec, data: &[Utterance]) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(DATASET_MAGIC);
    w.u64(spec.channels as u64);
    w.u64(spec.num_text_classes as u64);
    w.u64(spec.num_speakers as u64);
    w.u64(spec.rng_seed);
    w.u32(spec.noiseless as u32);
    for &l in &spec.base_lengths {
        w.u64(l as u64);
    }
    w.u64(data.len() as u64);
    for u in data {
        w.u64(u.len() as u64);
        w.u32(u.y_t as u32);
        w.u32(u.y_s as u32);
        w.f64(u.truth.amplitude);
        w.f64(u.truth.tempo);
        w.f64_slice(&u.truth.offset);
        w.f64_slice(u.frames.data());
    }
    w.buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(ToySpec, Vec<Utterance>)> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(DATASET_MAGIC.len(), "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(0, "not a CAPTOY1 dataset (bad magic)"));
    }
    let at = r.offset();
    let channels = r.u64("channels")? as usize;
    let num_text_classes = r.u64("text class count")? as usize;
    let num_speakers = r.u64("speaker count")? as usize;
    let rng_seed = r.u64("seed")?;
    let noiseless = r.u32("noiseless flag")? != 0;
    if num_text_classes > 1 << 20 || channels > 1 << 20 {
        return Err(Error::format(at, "implausible header sizes"));
    }
    let mut base_lengths = Vec::with_capacity(num_text_classes);
    for _ in 0..num_text_classes {
        base_lengths.push(r.u64("base length")? as usize);
    }
    let spec = ToySpec {
        channels,
        num_text_classes,
        num_speakers,
        base_lengths,
        rng_seed,
        noiseless,
    };
    spec.validate().map_err(|e| Error::format(at, format!("invalid header: {e}")))?;
    let n = r.u64("record count")?;
    let mut data = Vec::new();
    for i in 0..n {
        let rec_at = r.offset();
        let len = r.u64("utterance length")? as usize;
        let y_t = r.u32("text label")? as usize;
        let y_s = r.u32("speaker label")? as usize;
        if y_t >= num_text_classes || y_s >= num_speakers {
            return Err(Error::format(rec_at, format!("record {i}: label out of range")));
        }
        let amplitude = r.f64("amplitude")?;
        let tempo = r.f64("tempo")?;
        let offset = r.f64_vec(channels, "offset")?;
        let frames_at = r.offset();
        let body = r.f64_vec(len.saturating_mul(channels), "frames")?;
        let frames =
            Matrix::from_vec(len, channels, body).map_err(|e| Error::format(frames_at, format!("record {i}: {e}")))?;
        data.push(Utterance {
            frames,
            y_t,
            y_s,
            truth: GroundTruth {
                amplitude,
                tempo,
                offset,
            },
        });
    }
    if !r.is_empty() {
        return Err(Error::format(r.offset(), "trailing bytes after last record"));
    }
    Ok((spec, data))
}

pub fn save_dataset(path: impl AsRef<Path>, spec: &ToySpec, data: &[Utterance]) -> Result<()> {
    std::fs::write(path, encode_dataset(spec, data))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(ToySpec, Vec<Utterance>)> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> ToySpec {
        ToySpec::new(3, 4, 2, seed)
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(11);
        let a = generate_dataset(&spec, 20).unwrap();
        let b = generate_dataset(&spec, 20).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small_spec(12), 20).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lengths_follow_class_and_tempo() {
        let spec = ToySpec::default();
        for u in generate_dataset(&spec, 200).unwrap() {
            assert!((TEMPO_MIN..TEMPO_MAX).contains(&u.truth.tempo));
            assert_eq!(u.len(), utterance_length(spec.base_lengths[u.y_t], u.truth.tempo));
            assert!(u.frames.is_finite());
        }
    }

    #[test]
    fn noiseless_frames_equal_template_plus_offset() {
        let mut spec = small_spec(3);
        spec.noiseless = true;
        let world = ToyWorld::new(&spec).unwrap();
        for u in generate_dataset(&spec, 10).unwrap() {
            let l = spec.base_lengths[u.y_t];
            assert_eq!(u.len(), l);
            for t in 0..l {
                for c in 0..spec.channels {
                    let want = world.template(u.y_t, c, t as f64 / l as f64) + world.offsets.get(u.y_s, c);
                    assert_eq!(u.frames.get(t, c), want);
                }
            }
        }
    }

    #[test]
    fn class_frequencies_within_binomial_interval() {
        let spec = ToySpec::default();
        let data = generate_dataset(&spec, 1000).unwrap();
        let mut counts = [0usize; 10];
        for u in &data {
            counts[u.y_t] += 1;
        }
        // Binomial(1000, 0.1): mean 100, sd sqrt(90); 99% two-sided z = 2.576.
        let half = 2.576 * 90f64.sqrt();
        for c in counts {
            assert!((c as f64 - 100.0).abs() <= half, "{counts:?}");
        }
    }

    #[test]
    fn split_is_order_stable() {
        let v: Vec<u32> = (0..100).collect();
        let (a, b) = split(&v, 0.9).unwrap();
        assert_eq!(a.len(), 90);
        assert_eq!(b.len(), 10);
        assert_eq!(a[0], 0);
        assert_eq!(b[0], 90);
        assert!(split(&v, 0.0).is_err());
        assert!(split(&v, 1.0).is_err());
    }

    #[test]
    fn round_trip_and_truncation() {
        let spec = small_spec(5);
        let data = generate_dataset(&spec, 7).unwrap();
        let bytes = encode_dataset(&spec, &data);
        let (spec2, data2) = decode_dataset(&bytes).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(data, data2);
        for cut in [0, 3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            match decode_dataset(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = ToySpec::default();
        s.base_lengths = vec![20; 10];
        assert!(s.validate().is_err());
        let s = ToySpec::new(8, 1, 4, 0);
        assert!(s.validate().is_err());
        let mut s = ToySpec::default();
        s.base_lengths[0] = 50;
        assert!(s.validate().is_err());
        assert!(generate_dataset(&ToySpec::default(), 0).is_err());
    }
}
