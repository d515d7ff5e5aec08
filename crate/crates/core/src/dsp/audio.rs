//! WAV input/output, resampling, and silence removal.

use super::{DspError, MelConfig, Result};
use std::path::Path;

/// Half-width of the windowed-sinc resampling kernel, in source samples.
const SINC_HALF_WIDTH: usize = 24;

/// Frame length used by [`clip_silence`], in seconds.
const SILENCE_FRAME_SECS: f32 = 0.025;

/// Loads a WAV file as a mono waveform at `config.sample_rate`.
///
/// Multi-channel audio is downmixed by averaging channels. Integer and
/// 32-bit float encodings are accepted; anything else (or an empty file)
/// is an [`DspError::UnsupportedFormat`].
pub fn load_audio(path: &Path, config: &MelConfig) -> Result<Vec<f32>> {
    if !path.exists() {
        return Err(DspError::FileNotFound(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| DspError::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(DspError::UnsupportedFormat(format!(
            "{}: zero channels",
            path.display()
        )));
    }

    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(DspError::UnsupportedFormat(format!(
                    "{}: {}-bit float",
                    path.display(),
                    spec.bits_per_sample
                )));
            }
            reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| DspError::UnsupportedFormat(e.to_string()))?
        }
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| DspError::UnsupportedFormat(e.to_string()))?
        }
    };

    let channels = spec.channels as usize;
    let n_frames = interleaved.len() / channels;
    if n_frames == 0 {
        return Err(DspError::UnsupportedFormat(format!(
            "{}: zero-length audio",
            path.display()
        )));
    }

    let mut mono = Vec::with_capacity(n_frames);
    for frame in interleaved.chunks_exact(channels) {
        mono.push(frame.iter().sum::<f32>() / channels as f32);
    }

    let mut out = if spec.sample_rate == config.sample_rate {
        mono
    } else {
        resample(&mono, spec.sample_rate, config.sample_rate)
    };
    for v in &mut out {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// Writes a mono waveform as 16-bit PCM.
pub fn write_wav_16bit(path: &Path, waveform: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| DspError::UnsupportedFormat(e.to_string()))?;
    for &v in waveform {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(q)
            .map_err(|e| DspError::UnsupportedFormat(e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| DspError::UnsupportedFormat(e.to_string()))?;
    Ok(())
}

/// Windowed-sinc resampler. Output length is `round(len * to / from)`.
pub fn resample(waveform: &[f32], from_rate: u32, to_rate: u32) -> Vec<f32> {
    assert!(from_rate > 0 && to_rate > 0, "sample rates must be positive");
    if from_rate == to_rate || waveform.is_empty() {
        return waveform.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = ((waveform.len() as f64 * ratio).round() as usize).max(1);

    // Low-pass cutoff in cycles per source sample, backed off slightly from
    // Nyquist so the transition band stays inside the kernel's resolution.
    let cutoff = 0.5 * ratio.min(1.0) * 0.92;
    let half = SINC_HALF_WIDTH as f64;

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 / ratio;
        let k_lo = (t - half).ceil() as i64;
        let k_hi = (t + half).floor() as i64;
        let mut acc = 0.0f64;
        let mut norm = 0.0f64;
        for k in k_lo..=k_hi {
            let x = t - k as f64;
            let w = sinc(2.0 * cutoff * x) * hann_taper(x / half);
            norm += w;
            if k >= 0 && (k as usize) < waveform.len() {
                acc += w * waveform[k as usize] as f64;
            }
        }
        out.push(if norm.abs() > 1e-12 { (acc / norm) as f32 } else { 0.0 });
    }
    out
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-9 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Symmetric Hann taper on `[-1, 1]`, zero outside.
fn hann_taper(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        0.5 + 0.5 * (std::f64::consts::PI * x).cos()
    }
}

/// Removes frames whose RMS falls more than `threshold_db` below the peak
/// frame RMS. Frames are 25 ms, non-overlapping; survivors are concatenated.
pub fn clip_silence(waveform: &[f32], sample_rate: u32, threshold_db: f32) -> Result<Vec<f32>> {
    let frame = ((sample_rate as f32 * SILENCE_FRAME_SECS).round() as usize).max(1);
    let mut rms = Vec::new();
    for chunk in waveform.chunks(frame) {
        let e: f32 = chunk.iter().map(|v| v * v).sum::<f32>() / chunk.len() as f32;
        rms.push(e.sqrt());
    }
    let peak = rms.iter().cloned().fold(0.0f32, f32::max);
    if peak <= 0.0 {
        return Err(DspError::AllSilent);
    }
    let threshold = peak * 10f32.powf(-threshold_db / 20.0);
    let mut out = Vec::new();
    for (i, chunk) in waveform.chunks(frame).enumerate() {
        if rms[i] >= threshold {
            out.extend_from_slice(chunk);
        }
    }
    if out.is_empty() {
        return Err(DspError::AllSilent);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f32::consts::TAU;

    fn tone(freq: f32, rate: u32, secs: f32, amp: f32) -> Vec<f32> {
        let n = (rate as f32 * secs).round() as usize;
        (0..n).map(|i| amp * (TAU * freq * i as f32 / rate as f32).sin()).collect()
    }

    #[test]
    fn load_16k_tone_keeps_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone16k.wav");
        write_wav_16bit(&path, &tone(440.0, 16_000, 1.0, 0.5), 16_000).unwrap();
        let wav = load_audio(&path, &MelConfig::default()).unwrap();
        assert_eq!(wav.len(), 16_000);
        assert!(wav.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn load_32k_tone_resamples_to_16000() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone32k.wav");
        write_wav_16bit(&path, &tone(440.0, 32_000, 1.0, 0.5), 32_000).unwrap();
        let wav = load_audio(&path, &MelConfig::default()).unwrap();
        assert_eq!(wav.len(), 16_000);
    }

    #[test]
    fn resample_preserves_tone_shape() {
        let src = tone(440.0, 32_000, 0.5, 0.8);
        let out = resample(&src, 32_000, 16_000);
        assert_eq!(out.len(), 8_000);
        // Compare the interior against an ideal 440 Hz tone at 16 kHz.
        let ideal = tone(440.0, 16_000, 0.5, 0.8);
        let mut err = 0.0f32;
        let mut count = 0;
        for i in 200..out.len() - 200 {
            err += (out[i] - ideal[i]).abs();
            count += 1;
        }
        assert!(err / (count as f32) < 0.02, "mean abs err {}", err / count as f32);
    }

    #[test]
    fn resample_identity_when_rates_match() {
        let src = tone(100.0, 16_000, 0.1, 0.5);
        assert_eq!(resample(&src, 16_000, 16_000), src);
    }

    #[test]
    fn missing_file_is_file_not_found() {
        let err = load_audio(Path::new("/nonexistent/x.wav"), &MelConfig::default());
        assert!(matches!(err, Err(DspError::FileNotFound(_))));
    }

    #[test]
    fn zero_length_wav_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        write_wav_16bit(&path, &[], 16_000).unwrap();
        let err = load_audio(&path, &MelConfig::default());
        assert!(matches!(err, Err(DspError::UnsupportedFormat(_))));
    }

    #[test]
    fn stereo_downmix_averages_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(16_384i16).unwrap(); // left  ~ 0.5
            w.write_sample(-16_384i16).unwrap(); // right ~ -0.5
        }
        w.finalize().unwrap();
        let wav = load_audio(&path, &MelConfig::default()).unwrap();
        assert_eq!(wav.len(), 100);
        assert!(wav.iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn clip_silence_removes_leading_silence() {
        // 0.5 s silence then 0.5 s tone at 16 kHz: exactly 8000 samples survive.
        let mut wav = vec![0.0f32; 8_000];
        wav.extend(tone(440.0, 16_000, 0.5, 0.5));
        let kept = clip_silence(&wav, 16_000, 40.0).unwrap();
        let frame = 400;
        assert!(
            (kept.len() as i64 - 8_000i64).unsigned_abs() as usize <= frame,
            "kept {} samples",
            kept.len()
        );
    }

    #[test]
    fn clip_silence_all_zero_is_error() {
        let err = clip_silence(&vec![0.0f32; 4_000], 16_000, 40.0);
        assert!(matches!(err, Err(DspError::AllSilent)));
    }

    #[test]
    fn clip_silence_keeps_uniform_tone_intact() {
        let wav = tone(300.0, 16_000, 0.5, 0.4);
        let kept = clip_silence(&wav, 16_000, 40.0).unwrap();
        assert_eq!(kept.len(), wav.len());
    }
}
