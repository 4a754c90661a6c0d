use caplab::mcd::*;
use caplab::Error;
use proptest::prelude::*;
use std::f64::consts::PI;

fn sine(freq: f64, rate: u32, seconds: f64) -> Vec<f64> {
    let n = (rate as f64 * seconds) as usize;
    (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect()
}

// Band centres from the HTK mel formula, computed here without the library.
fn nearest_band(freq: f64) -> usize {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(80.0), mel(12000.0));
    (0..80)
        .min_by(|&a, &b| {
            let ca = inv(lo + (hi - lo) * (a + 1) as f64 / 81.0);
            let cb = inv(lo + (hi - lo) * (b + 1) as f64 / 81.0);
            (ca - freq).abs().partial_cmp(&(cb - freq).abs()).unwrap()
        })
        .unwrap()
}

#[test]
fn one_kilohertz_tone_peaks_in_the_nearest_band() {
    let mel = mel_spectrogram(&sine(1000.0, 24000, 0.5), 24000).unwrap();
    assert_eq!(mel.frames.cols(), 80);
    assert_eq!(mel.frames.rows(), frame_count(12000));
    for f in 0..mel.frames.rows() {
        let row = mel.frames.row(f);
        let arg = (0..80).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        assert_eq!(arg, nearest_band(1000.0), "frame {f}");
    }
}

#[test]
fn frame_geometry() {
    assert_eq!(frame_count(1199), 0);
    assert_eq!(frame_count(1200), 1);
    assert_eq!(frame_count(1499), 1);
    assert_eq!(frame_count(1500), 2);
    let mel = mel_spectrogram(&vec![0.0; 2400], 24000).unwrap();
    assert_eq!(mel.hop, 0.0125);
    assert!(mel_spectrogram(&vec![0.0; 100], 24000).is_err());
}

#[test]
fn constant_frame_has_no_cepstrum_past_c0() {
    let mel = MelSpectrogram {
        frames: caplab::numerics::Matrix::from_vec(1, 80, vec![-3.25; 80]).unwrap(),
        sample_rate: 24000,
        hop: 0.0125,
    };
    let c = mfcc13(&mel).unwrap();
    assert_eq!(c.cols(), 13);
    for v in c.row(0) {
        assert!(v.abs() < 1e-12, "{v}");
    }
}

#[test]
fn identical_audio_has_zero_distance() {
    let s = sine(440.0, 24000, 0.3);
    let a = McdInput::Audio { samples: s.clone(), rate: 24000 };
    let b = McdInput::Audio { samples: s, rate: 24000 };
    assert_eq!(mcd_dtw(&a, &b, &McdOptions::default()).unwrap(), 0.0);
    let c = McdInput::Audio { samples: sine(2000.0, 24000, 0.3), rate: 24000 };
    assert!(mcd_dtw(&a, &c, &McdOptions::default()).unwrap() > 0.0);
}

proptest! {
    #[test]
    fn dct_preserves_energy(x in prop::collection::vec(-10.0f64..10.0, 1..100)) {
        let c = dct2_orthonormal(&x);
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ec: f64 = c.iter().map(|v| v * v).sum();
        prop_assert!((ex - ec).abs() <= 1e-10 * (1.0 + ex));
    }

    #[test]
    fn wav_round_trip_is_within_quantization(s in prop::collection::vec(-1.0f64..1.0, 0..200), rate in 8000u32..48000) {
        let (back, r) = wav_decode(&wav_encode(&s, rate)).unwrap();
        prop_assert_eq!(r, rate);
        prop_assert_eq!(back.len(), s.len());
        for (a, b) in s.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }
}

// Canonical 44-byte header followed by two 16-bit samples, built by hand.
fn fixture() -> Vec<u8> {
    let mut v = Vec::new();
    v.extend_from_slice(b"RIFF");
    v.extend_from_slice(&40u32.to_le_bytes());
    v.extend_from_slice(b"WAVE");
    v.extend_from_slice(b"fmt ");
    v.extend_from_slice(&16u32.to_le_bytes());
    v.extend_from_slice(&1u16.to_le_bytes());
    v.extend_from_slice(&1u16.to_le_bytes());
    v.extend_from_slice(&16000u32.to_le_bytes());
    v.extend_from_slice(&32000u32.to_le_bytes());
    v.extend_from_slice(&2u16.to_le_bytes());
    v.extend_from_slice(&16u16.to_le_bytes());
    v.extend_from_slice(b"data");
    v.extend_from_slice(&4u32.to_le_bytes());
    v.extend_from_slice(&16384i16.to_le_bytes());
    v.extend_from_slice(&(-32768i16).to_le_bytes());
    v
}

#[test]
fn hand_built_wav_decodes() {
    let bytes = fixture();
    assert_eq!(bytes.len(), 48);
    let (s, rate) = wav_decode(&bytes).unwrap();
    assert_eq!(rate, 16000);
    assert_eq!(s.len(), 2);
    assert!((s[0] - 0.5).abs() < 1e-4);
    assert!((s[1] + 1.0).abs() < 1e-4);
}

#[test]
fn damaged_wav_names_the_chunk() {
    let mut bad = fixture();
    bad[8..12].copy_from_slice(b"AVI ");
    assert!(matches!(wav_decode(&bad), Err(Error::Wav { .. })));
    let mut pcm24 = fixture();
    pcm24[34] = 24;
    match wav_decode(&pcm24) {
        Err(Error::Wav { chunk, .. }) => assert_eq!(chunk, "fmt "),
        other => panic!("{other:?}"),
    }
    let cut = &fixture()[..30];
    assert!(wav_decode(cut).is_err());
}
