//! Deterministic synthetic audio-visual episodes with a planted
//! cross-modal signal.
//!
//! An episode is a run of fixed-length segments. A speech segment plants a
//! constant amplitude-1 pattern direction in BOTH modalities and is labeled
//! positive. A non-speech segment may plant exactly one modality's pattern
//! as a distractor, so neither modality alone separates the classes; this
//! is what makes the video-only penalty measurable. Gaussian feature noise
//! covers everything. A given seed fixes the whole episode bitwise.

use crate::heads::FrameLabels;
use crate::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad episode file {path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("invalid episode config: {0}")]
    BadConfig(String),
}

/// Generator settings for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Video frames per episode.
    pub video_frames: usize,
    /// Audio frames per video frame.
    pub audio_rate: usize,
    pub audio_width: usize,
    pub video_width: usize,
    /// Prior probability that a segment is active speech.
    pub p_speech: f64,
    /// Probability a silent segment carries the video pattern anyway.
    pub p_distractor_v: f64,
    /// Likewise for audio.
    pub p_distractor_a: f64,
    /// Standard deviation of the added feature noise.
    pub noise_sigma: f64,
    /// Video frames per segment.
    pub segment_frames: usize,
    /// Base seed; episode i of a split derives from this.
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            video_frames: 64,
            audio_rate: 4,
            audio_width: 8,
            video_width: 8,
            p_speech: 0.4,
            p_distractor_v: 0.3,
            p_distractor_a: 0.3,
            noise_sigma: 0.5,
            segment_frames: 8,
            seed: 7,
        }
    }
}

impl EpisodeConfig {
    pub fn audio_frames(&self) -> usize {
        self.video_frames * self.audio_rate
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.video_frames == 0 || self.audio_rate == 0 || self.segment_frames == 0 {
            return Err(DataError::BadConfig(
                "frame counts and rate must be positive".into(),
            ));
        }
        if self.audio_width == 0 || self.video_width == 0 {
            return Err(DataError::BadConfig("feature widths must be positive".into()));
        }
        for (name, p) in [
            ("p_speech", self.p_speech),
            ("p_distractor_v", self.p_distractor_v),
            ("p_distractor_a", self.p_distractor_a),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::BadConfig(format!("{name}={p} not in [0,1]")));
            }
        }
        if self.p_distractor_v + self.p_distractor_a > 1.0 {
            return Err(DataError::BadConfig(
                "p_distractor_v + p_distractor_a must not exceed 1 (distractors are exclusive per segment)".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::BadConfig("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which patterns a segment carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentPlant {
    pub video: bool,
    pub audio: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub audio: Matrix,
    pub video: Matrix,
    pub labels: FrameLabels,
    pub plant_log: Vec<SegmentPlant>,
}

/// Stable seed derivation for splits and episode indices (splitmix64 over
/// the mixed inputs).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unit pattern direction: constant 1/sqrt(D) in every component.
fn pattern_direction(width: usize) -> Vec<f64> {
    let v = 1.0 / (width as f64).sqrt();
    vec![v; width]
}

/// Generate one episode, fully determined by `cfg` (including its seed).
pub fn generate_episode(cfg: &EpisodeConfig) -> Result<EpisodeBatch, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let t_v = cfg.video_frames;
    let t_a = cfg.audio_frames();
    let n_segments = t_v.div_ceil(cfg.segment_frames);

    // Segment plants first, then noise, so the draw order is fixed.
    let mut plant_log = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let speech = rng.gen::<f64>() < cfg.p_speech;
        let plant = if speech {
            SegmentPlant {
                video: true,
                audio: true,
            }
        } else {
            // Distractors are exclusive: at most one modality fires.
            let u = rng.gen::<f64>();
            if u < cfg.p_distractor_v {
                SegmentPlant {
                    video: true,
                    audio: false,
                }
            } else if u < cfg.p_distractor_v + cfg.p_distractor_a {
                SegmentPlant {
                    video: false,
                    audio: true,
                }
            } else {
                SegmentPlant {
                    video: false,
                    audio: false,
                }
            }
        };
        plant_log.push(plant);
    }

    let mut audio = Matrix::from_shape_fn((t_a, cfg.audio_width), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * cfg.noise_sigma
    });
    let mut video = Matrix::from_shape_fn((t_v, cfg.video_width), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * cfg.noise_sigma
    });

    let dir_a = pattern_direction(cfg.audio_width);
    let dir_v = pattern_direction(cfg.video_width);
    let mut labels = vec![0u8; t_v];
    for (s, plant) in plant_log.iter().enumerate() {
        let v_lo = s * cfg.segment_frames;
        let v_hi = ((s + 1) * cfg.segment_frames).min(t_v);
        if plant.video {
            for i in v_lo..v_hi {
                for (j, d) in dir_v.iter().enumerate() {
                    video[(i, j)] += d;
                }
            }
        }
        if plant.audio {
            for i in v_lo * cfg.audio_rate..v_hi * cfg.audio_rate {
                for (j, d) in dir_a.iter().enumerate() {
                    audio[(i, j)] += d;
                }
            }
        }
        if plant.video && plant.audio {
            for l in labels.iter_mut().take(v_hi).skip(v_lo) {
                *l = 1;
            }
        }
    }

    Ok(EpisodeBatch {
        audio,
        video,
        labels: FrameLabels::new(labels),
        plant_log,
    })
}

/// Additive white noise: x + N(0, sigma^2) i.i.d., seeded.
pub fn corrupt(x: &Matrix, sigma: f64, seed: u64) -> Matrix {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    if sigma == 0.0 {
        return x.clone();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += z * sigma;
    }
    out
}

// ── Episode file format ──────────────────────────────────────────────
//
// Little-endian header: magic "GFEP", version u32, T_v u32, r u32,
// D_in_a u32, D_in_v u32; then row-major f64 audio, f64 video, and one
// byte per video-frame label.

pub const EPISODE_MAGIC: &[u8; 4] = b"GFEP";
pub const EPISODE_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_episode(path: &Path, batch: &EpisodeBatch, audio_rate: usize) -> Result<(), DataError> {
    let t_v = batch.video.nrows();
    let t_a = batch.audio.nrows();
    if t_a != t_v * audio_rate {
        return Err(DataError::BadConfig(format!(
            "audio frames {t_a} do not equal rate {audio_rate} x video frames {t_v}"
        )));
    }
    let mut buf = Vec::with_capacity(24 + 8 * (batch.audio.len() + batch.video.len()) + t_v);
    buf.extend_from_slice(EPISODE_MAGIC);
    buf.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t_v as u32).to_le_bytes());
    buf.extend_from_slice(&(audio_rate as u32).to_le_bytes());
    buf.extend_from_slice(&(batch.audio.ncols() as u32).to_le_bytes());
    buf.extend_from_slice(&(batch.video.ncols() as u32).to_le_bytes());
    for v in batch.audio.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in batch.video.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&batch.labels.y);
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Read an episode file; returns the batch and the stored audio rate. The
/// plant log is not serialized, so the loaded batch carries an empty one.
pub fn read_episode(path: &Path) -> Result<(EpisodeBatch, usize), DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let bad = |reason: &str| DataError::BadFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 24 {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != EPISODE_MAGIC {
        return Err(bad("missing GFEP magic"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    if u32_at(4) != EPISODE_VERSION {
        return Err(bad(&format!("unsupported version {}", u32_at(4))));
    }
    let t_v = u32_at(8) as usize;
    let rate = u32_at(12) as usize;
    let d_a = u32_at(16) as usize;
    let d_v = u32_at(20) as usize;
    let t_a = t_v * rate;
    let expect = 24 + 8 * (t_a * d_a + t_v * d_v) + t_v;
    if bytes.len() != expect {
        return Err(bad(&format!(
            "size {} does not match header (expected {expect})",
            bytes.len()
        )));
    }
    let mut off = 24;
    let mut read_matrix = |rows: usize, cols: usize| {
        let mut m = Matrix::zeros((rows, cols));
        for v in m.iter_mut() {
            *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
        }
        m
    };
    let audio = read_matrix(t_a, d_a);
    let video = read_matrix(t_v, d_v);
    let labels: Vec<u8> = bytes[off..off + t_v].to_vec();
    if labels.iter().any(|&b| b > 1) {
        return Err(bad("labels must be 0/1 bytes"));
    }
    Ok((
        EpisodeBatch {
            audio,
            video,
            labels: FrameLabels::new(labels),
            plant_log: Vec::new(),
        },
        rate,
    ))
}
