//! Mel cepstral distortion under dynamic time warping.
//!
//! Audio goes through a Hann-windowed STFT, an 80-band mel filterbank, log
//! compression, and a DCT down to 13 cepstra. Toy model frames skip the audio
//! stages and are compared channel by channel.

use std::f64::consts::{LN_10, PI};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;
pub const FRAME_LENGTH: usize = 1200;
pub const HOP_LENGTH: usize = 300;
pub const FFT_SIZE: usize = 2048;
pub const MEL_BANDS: usize = 80;
pub const MEL_LOW_HZ: f64 = 80.0;
pub const MEL_HIGH_HZ: f64 = 12_000.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const NUM_MFCC: usize = 13;
pub const WARP_PENALTY: f64 = 1.0;
/// Conventional dB scaling `10·√2 / ln 10` for cepstral distortion.
pub const MCD_DB_SCALE: f64 = 10.0 * std::f64::consts::SQRT_2 / LN_10;

// ---------------------------------------------------------------------------
// WAV

fn wav_err(chunk: &str, message: impl Into<String>) -> Error {
    Error::Wav {
        chunk: chunk.to_string(),
        message: message.into(),
    }
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Decode a 16-bit PCM RIFF/WAVE byte buffer to mono samples in `[-1, 1)`.
/// Stereo is averaged.
pub fn wav_decode(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    if bytes.len() < 12 {
        return Err(wav_err("RIFF", "file shorter than the 12-byte RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err("RIFF", "missing RIFF/WAVE signature"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u32)> = None;
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            return Err(wav_err("?", format!("truncated chunk header at byte {pos}")));
        }
        let id = String::from_utf8_lossy(&bytes[pos..pos + 4]).into_owned();
        let size = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body = bytes
            .get(body_start..body_start.saturating_add(size))
            .ok_or_else(|| wav_err(&id, format!("declares {size} bytes, {} remain", bytes.len() - body_start)))?;
        match id.as_str() {
            "fmt " => {
                if size < 16 {
                    return Err(wav_err(&id, format!("format chunk of {size} bytes is too short")));
                }
                let format_tag = le_u16(&body[0..2]);
                let channels = le_u16(&body[2..4]);
                let rate = le_u32(&body[4..8]);
                let bits = le_u16(&body[14..16]);
                if format_tag != 1 {
                    return Err(wav_err(&id, format!("format tag {format_tag} is not PCM")));
                }
                if bits != 16 {
                    return Err(wav_err(&id, format!("{bits}-bit samples are unsupported")));
                }
                if !(1..=2).contains(&channels) {
                    return Err(wav_err(&id, format!("{channels} channels are unsupported")));
                }
                fmt = Some((channels, rate));
            }
            "data" => {
                let (channels, rate) = fmt.ok_or_else(|| wav_err(&id, "data chunk precedes fmt chunk"))?;
                let frame_bytes = 2 * channels as usize;
                if size % frame_bytes != 0 {
                    return Err(wav_err(&id, format!("{size} bytes is not a whole number of frames")));
                }
                let samples = body
                    .chunks_exact(frame_bytes)
                    .map(|f| {
                        let sum: f64 = f.chunks_exact(2).map(|s| i16::from_le_bytes([s[0], s[1]]) as f64).sum();
                        sum / channels as f64 / 32768.0
                    })
                    .collect();
                return Ok((samples, rate));
            }
            _ => {}
        }
        // Chunks are padded to even length.
        pos = body_start + size + (size & 1);
    }
    Err(wav_err("data", "no data chunk"))
}

pub fn wav_read(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    wav_decode(&std::fs::read(path)?)
}

/// Encode mono samples as 16-bit PCM, clipping to the representable range.
pub fn wav_encode(samples: &[f64], rate: u32) -> Vec<u8> {
    let data_len = 2 * samples.len() as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(2 * rate).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn wav_write(path: impl AsRef<Path>, samples: &[f64], rate: u32) -> Result<()> {
    std::fs::write(path, wav_encode(samples, rate))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Mel spectrogram

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `T × bands` natural-log band energies.
    pub frames: Matrix,
    pub sample_rate: u32,
    /// Hop in seconds.
    pub hop: f64,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edges in Hz: `bands + 2` points equally spaced on the mel scale.
pub fn mel_band_edges(bands: usize, low_hz: f64, high_hz: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
    (0..bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
        .collect()
}

/// Triangular filters with unit peak, `bands × (fft_size/2 + 1)`.
pub fn mel_filterbank(rate: u32, fft_size: usize, bands: usize, low_hz: f64, high_hz: f64) -> Matrix {
    let edges = mel_band_edges(bands, low_hz, high_hz);
    let bins = fft_size / 2 + 1;
    let mut fb = Matrix::zeros(bands, bins);
    for m in 0..bands {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * rate as f64 / fft_size as f64;
            *w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
        }
    }
    fb
}

/// Symmetric Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

pub fn frame_count(len: usize) -> usize {
    if len < FRAME_LENGTH {
        0
    } else {
        1 + (len - FRAME_LENGTH) / HOP_LENGTH
    }
}

/// 80-band log-mel spectrogram: 50 ms Hann frames, 12.5 ms hop at 24 kHz,
/// zero-padded 2048-point FFT magnitude.
pub fn mel_spectrogram(samples: &[f64], rate: u32) -> Result<MelSpectrogram> {
    let t = frame_count(samples.len());
    if t == 0 {
        return Err(Error::input(format!(
            "signal of {} samples is shorter than one {FRAME_LENGTH}-sample frame",
            samples.len()
        )));
    }
    if rate == 0 || MEL_HIGH_HZ > rate as f64 / 2.0 {
        return Err(Error::input(format!("sample rate {rate} Hz cannot hold a 12 kHz mel range")));
    }
    let window = hann(FRAME_LENGTH);
    let fb = mel_filterbank(rate, FFT_SIZE, MEL_BANDS, MEL_LOW_HZ, MEL_HIGH_HZ);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let bins = FFT_SIZE / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut mag = vec![0.0; bins];
    let mut frames = Matrix::zeros(t, MEL_BANDS);
    for f in 0..t {
        let start = f * HOP_LENGTH;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < FRAME_LENGTH {
                Complex::new(samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        let row = frames.row_mut(f);
        for (b, out) in row.iter_mut().enumerate() {
            let e: f64 = fb.row(b).iter().zip(&mag).map(|(w, m)| w * m).sum();
            *out = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram {
        frames,
        sample_rate: rate,
        hop: HOP_LENGTH as f64 / rate as f64,
    })
}

// ---------------------------------------------------------------------------
// Cepstra

/// Orthonormal DCT-II of one vector.
pub fn dct2_orthonormal(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            s * x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .sum::<f64>()
        })
        .collect()
}

/// Cepstral coefficients 1..=13 of each frame (coefficient 0 dropped).
pub fn mfcc13(mel: &MelSpectrogram) -> Result<Matrix> {
    let (t, bands) = (mel.frames.rows(), mel.frames.cols());
    if t == 0 {
        return Err(Error::input("mel spectrogram has no frames"));
    }
    if bands <= NUM_MFCC {
        return Err(Error::input(format!("{bands} bands cannot yield {NUM_MFCC} cepstra past c0")));
    }
    let mut out = Matrix::zeros(t, NUM_MFCC);
    for f in 0..t {
        let c = dct2_orthonormal(mel.frames.row(f));
        out.row_mut(f).copy_from_slice(&c[1..=NUM_MFCC]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// DTW

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Divide by the number of aligned pairs on the optimal path.
    #[default]
    PathLength,
    /// Divide by the longer sequence length.
    MaxLength,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult {
    pub total_cost: f64,
    pub path: Vec<(usize, usize)>,
    pub per_frame_cost: f64,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Penalized DTW over steps `(1,1)`, `(1,0)`, `(0,1)` with `warp_penalty`
/// added on the two non-diagonal steps.
pub fn dtw(a: &Matrix, b: &Matrix, warp_penalty: f64) -> Result<DtwResult> {
    dtw_with(a, b, warp_penalty, Normalization::PathLength)
}

pub fn dtw_with(a: &Matrix, b: &Matrix, warp_penalty: f64, norm: Normalization) -> Result<DtwResult> {
    let (n, m) = (a.rows(), b.rows());
    if n == 0 || m == 0 {
        return Err(Error::input("dtw needs non-empty sequences"));
    }
    if a.cols() != b.cols() {
        return Err(Error::input(format!("frame widths differ: {} vs {}", a.cols(), b.cols())));
    }
    let idx = |i: usize, j: usize| i * m + j;
    let mut acc = vec![f64::INFINITY; n * m];
    // 0 = diagonal, 1 = (1,0), 2 = (0,1)
    let mut step = vec![0u8; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = euclidean(a.row(i), b.row(j));
            if i == 0 && j == 0 {
                acc[0] = c;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut best_step = 0;
            // Strict comparisons keep the earlier candidate on ties.
            if i > 0 && j > 0 {
                best = acc[idx(i - 1, j - 1)];
            }
            if i > 0 {
                let v = acc[idx(i - 1, j)] + warp_penalty;
                if v < best {
                    best = v;
                    best_step = 1;
                }
            }
            if j > 0 {
                let v = acc[idx(i, j - 1)] + warp_penalty;
                if v < best {
                    best = v;
                    best_step = 2;
                }
            }
            acc[idx(i, j)] = c + best;
            step[idx(i, j)] = best_step;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        match step[idx(i, j)] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            _ => j -= 1,
        }
        path.push((i, j));
    }
    path.reverse();
    let total = acc[idx(n - 1, m - 1)];
    let denom = match norm {
        Normalization::PathLength => path.len(),
        Normalization::MaxLength => n.max(m),
    };
    Ok(DtwResult {
        total_cost: total,
        per_frame_cost: total / denom as f64,
        path,
    })
}

// ---------------------------------------------------------------------------
// MCD-DTW

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McdOptions {
    pub warp_penalty: f64,
    pub normalization: Normalization,
    /// Multiply by `10·√2 / ln 10` (dB convention).
    pub db_scaled: bool,
}

impl Default for McdOptions {
    fn default() -> Self {
        McdOptions {
            warp_penalty: WARP_PENALTY,
            normalization: Normalization::PathLength,
            db_scaled: false,
        }
    }
}

/// Something comparable by MCD-DTW.
#[derive(Debug, Clone, PartialEq)]
pub enum McdInput {
    /// Feature frames used as cepstra directly (toy model outputs).
    Frames(Matrix),
    Audio { samples: Vec<f64>, rate: u32 },
}

impl McdInput {
    pub fn features(&self) -> Result<Matrix> {
        match self {
            McdInput::Frames(m) => Ok(m.clone()),
            McdInput::Audio { samples, rate } => mfcc13(&mel_spectrogram(samples, *rate)?),
        }
    }
}

/// Per-frame cost of the penalized alignment between two feature sequences.
pub fn mcd_dtw_frames(a: &Matrix, b: &Matrix, opts: &McdOptions) -> Result<f64> {
    let r = dtw_with(a, b, opts.warp_penalty, opts.normalization)?;
    Ok(if opts.db_scaled {
        MCD_DB_SCALE * r.per_frame_cost
    } else {
        r.per_frame_cost
    })
}

pub fn mcd_dtw(a: &McdInput, b: &McdInput, opts: &McdOptions) -> Result<f64> {
    mcd_dtw_frames(&a.features()?, &b.features()?, opts)
}
