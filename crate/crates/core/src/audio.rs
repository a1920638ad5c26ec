//! Precomputed constant-Q spectrograms: the `.cqts` file format, fixed-length
//! patch sampling, log compression and a synthetic generator.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

pub const MAGIC: &[u8; 4] = b"CQTS";
pub const VERSION: u32 = 1;
pub const DEFAULT_BINS: usize = 96;
pub const DEFAULT_SAMPLE_RATE: u32 = 22050;
pub const DEFAULT_HOP: u32 = 1024;
pub const DEFAULT_PATCH_SECONDS: f64 = 15.0;

/// A `bins × frames` magnitude matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<f32>,
    pub sample_rate: u32,
    pub hop: u32,
}

impl Spectrogram {
    pub fn new(data: Array2<f32>, sample_rate: u32, hop: u32) -> Result<Self> {
        let (bins, frames) = data.dim();
        if bins == 0 || frames == 0 {
            return Err(Error::Shape(format!("spectrogram must be non-empty, got {bins}x{frames}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spectrogram contains non-finite values".into()));
        }
        Ok(Self {
            data,
            sample_rate,
            hop,
        })
    }

    pub fn bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.bins() as u32, self.frames() as u32, self.sample_rate, self.hop] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated spectrogram header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad spectrogram magic {magic:?}")));
        }
        let mut header = [0u32; 5];
        for h in &mut header {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated spectrogram header".into()))?;
            *h = u32::from_le_bytes(b);
        }
        let [version, bins, frames, sample_rate, hop] = header;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported spectrogram version {version}")));
        }
        let n = (bins as usize) * (frames as usize);
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|_| Error::Format("truncated spectrogram payload".into()))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let data = Array2::from_shape_vec((bins as usize, frames as usize), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(data, sample_rate, hop)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Frames covering `seconds` of audio: `floor(seconds * sr / hop) + 1`.
///
/// ```
/// assert_eq!(coldrec::audio::patch_frames(15.0, 22050, 1024), 323);
/// ```
pub fn patch_frames(seconds: f64, sample_rate: u32, hop: u32) -> usize {
    (seconds * f64::from(sample_rate) / f64::from(hop)).floor() as usize + 1
}

/// A contiguous run of frames cut from one track.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub data: Array2<f32>,
    pub item_id: String,
    pub start: usize,
}

/// Cuts a `length`-frame patch at a start drawn uniformly from the valid
/// range. The draw depends only on `(item_id, seed)`.
pub fn sample_patch(s: &Spectrogram, length: usize, item_id: &str, seed_: u64) -> Result<Patch> {
    if length == 0 || s.frames() < length {
        return Err(Error::InvalidInput(format!(
            "track `{item_id}` has {} frames, patch needs {length}",
            s.frames()
        )));
    }
    let start = seed::rng(seed::named(seed_, item_id)).random_range(0..=s.frames() - length);
    Ok(Patch {
        data: s.data.slice(s![.., start..start + length]).to_owned(),
        item_id: item_id.to_string(),
        start,
    })
}

/// Elementwise `ln(1 + x)` for non-negative magnitudes.
pub fn log_compress(s: &Spectrogram) -> Result<Spectrogram> {
    if s.data.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidInput("log compression needs non-negative magnitudes".into()));
    }
    Ok(Spectrogram {
        data: s.data.mapv(f32::ln_1p),
        sample_rate: s.sample_rate,
        hop: s.hop,
    })
}

/// Frequency band `[lo, hi)` owned by template `j` of `n`.
pub fn template_band(j: usize, n: usize, bins: usize) -> (usize, usize) {
    (j * bins / n, ((j + 1) * bins / n).max(j * bins / n + 1).min(bins))
}

/// Mixture of fixed band patterns plus uniform noise in `[0, noise)`.
///
/// Template `j` occupies its own frequency band and pulses over time with a
/// template-specific period, so both the band and the rhythm identify it.
/// Negative weights count as zero, keeping the output non-negative.
pub fn synth_spectrogram(bins: usize, frames: usize, template_weights: &[f64], noise: f64, seed_: u64) -> Spectrogram {
    let bins = bins.max(1);
    let frames = frames.max(1);
    let n = template_weights.len().min(bins);
    let mut data = Array2::<f32>::zeros((bins, frames));
    for (j, &w) in template_weights.iter().take(n).enumerate() {
        let w = w.max(0.0);
        if w == 0.0 {
            continue;
        }
        let (lo, hi) = template_band(j, n, bins);
        let period = 4.0 + 3.0 * j as f64;
        for t in 0..frames {
            let pulse = 1.0 + 0.5 * (std::f64::consts::TAU * t as f64 / period).sin();
            for b in lo..hi {
                data[[b, t]] += (w * pulse) as f32;
            }
        }
    }
    if noise > 0.0 {
        let mut rng = seed::rng(seed_);
        for v in data.iter_mut() {
            *v += (noise * rng.random::<f64>()) as f32;
        }
    }
    Spectrogram {
        data,
        sample_rate: DEFAULT_SAMPLE_RATE,
        hop: DEFAULT_HOP,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_frame_arithmetic() {
        assert_eq!(patch_frames(15.0, 22050, 1024), 323);
        assert_eq!(patch_frames(1e-9, 22050, 1024), 1);
        assert_eq!(patch_frames(1.0, 1000, 500), 3);
    }

    fn ramp(frames: usize) -> Spectrogram {
        let data = Array2::from_shape_fn((3, frames), |(b, t)| (b * 1000 + t) as f32);
        Spectrogram::new(data, 22050, 1024).unwrap()
    }

    #[test]
    fn full_length_patch_starts_at_zero() {
        let p = sample_patch(&ramp(323), 323, "x", 1).unwrap();
        assert_eq!(p.start, 0);
    }

    #[test]
    fn patch_start_in_range_and_exact_slice() {
        let s = ramp(1000);
        for seed_ in 0..50 {
            let p = sample_patch(&s, 323, "x", seed_).unwrap();
            assert!(p.start <= 677);
            assert_eq!(p.data, s.data.slice(s![.., p.start..p.start + 323]));
        }
        let a = sample_patch(&s, 323, "x", 9).unwrap();
        assert_eq!(a, sample_patch(&s, 323, "x", 9).unwrap());
    }

    #[test]
    fn short_track_rejected() {
        assert!(sample_patch(&ramp(100), 323, "x", 0).is_err());
    }

    #[test]
    fn log_compression_points() {
        let z = Spectrogram::new(Array2::zeros((2, 2)), 1, 1).unwrap();
        assert!(log_compress(&z).unwrap().data.iter().all(|v| *v == 0.0));
        let e = Spectrogram::new(Array2::from_elem((1, 1), std::f32::consts::E - 1.0), 1, 1).unwrap();
        assert!((log_compress(&e).unwrap().data[[0, 0]] - 1.0).abs() < 1e-6);
        let neg = Spectrogram::new(Array2::from_elem((1, 1), -1.0), 1, 1).unwrap();
        assert!(log_compress(&neg).is_err());
    }

    #[test]
    fn log_compression_matches_scalar_loop() {
        let s = synth_spectrogram(8, 20, &[1.0, 0.5], 2.0, 4);
        let out = log_compress(&s).unwrap();
        for b in 0..8 {
            for t in 0..20 {
                assert!((out.data[[b, t]] - (1.0 + s.data[[b, t]]).ln()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn synth_properties() {
        let z = synth_spectrogram(16, 30, &[0.0, 0.0, 0.0, 0.0], 0.0, 1);
        assert!(z.data.iter().all(|v| *v == 0.0));
        let a = synth_spectrogram(16, 30, &[0.2, 1.0, 0.0, 0.3], 0.5, 1);
        assert_eq!(a, synth_spectrogram(16, 30, &[0.2, 1.0, 0.0, 0.3], 0.5, 1));
        for j in 0..4 {
            let mut w = vec![0.0; 4];
            w[j] = 1.0;
            let s = synth_spectrogram(16, 30, &w, 0.3, 7);
            let band_mean = |k: usize| {
                let (lo, hi) = template_band(k, 4, 16);
                s.data.slice(s![lo..hi, ..]).mean().unwrap()
            };
            for k in (0..4).filter(|&k| k != j) {
                assert!(band_mean(j) > band_mean(k));
            }
        }
    }

    #[test]
    fn file_roundtrip_and_errors() {
        let s = synth_spectrogram(5, 7, &[1.0, 2.0], 0.1, 3);
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"CQTS");
        assert_eq!(bytes.len(), 24 + 5 * 7 * 4);
        let back = Spectrogram::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(back.data.iter().zip(s.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

        assert!(Spectrogram::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Spectrogram::read_from(bad.as_slice()).is_err());
    }

    #[test]
    fn log_compress_is_monotone() {
        let s = synth_spectrogram(6, 10, &[1.0, 0.2, 0.7], 1.0, 2);
        let out = log_compress(&s).unwrap();
        let mut pairs: Vec<(f32, f32)> = s.data.iter().copied().zip(out.data.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }
}
