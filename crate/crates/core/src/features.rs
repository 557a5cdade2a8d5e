//! Visual feature tracks: synthetic position encodings, precomputed embedding
//! files, and nearest-neighbour alignment to the spectrogram frame rate.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame rate of source video features.
pub const VIDEO_FPS: f64 = 10.0;
/// Default per-stream dimension of precomputed embeddings.
pub const PRECOMPUTED_DIM: usize = 1025;
/// Default dimension of synthetic position features.
pub const SYNTHETIC_DIM: usize = 64;

const PROJECTION_SEED: u64 = 0x5EED_F00D;

/// Per-frame feature vectors at a known frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    vectors: Array2<f64>,
    fps: f64,
}

impl FeatureTrack {
    pub fn new(vectors: Array2<f64>, fps: f64) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::invalid("feature track has no frames"));
        }
        if !(fps > 0.0) {
            return Err(Error::invalid("feature track fps must be positive"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature track contains non-finite values"));
        }
        Ok(Self { vectors, fps })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn into_vectors(self) -> Array2<f64> {
        self.vectors
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn n_frames(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames() as f64 / self.fps
    }

    pub fn negated(&self) -> Self {
        Self {
            vectors: self.vectors.mapv(|v| -v),
            fps: self.fps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    SyntheticPosition,
    Precomputed,
}

/// Where a corpus' features come from and whether they can be mirrored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureProviderSpec {
    pub kind: ProviderKind,
    pub dim: usize,
    pub flip_supported: bool,
}

impl FeatureProviderSpec {
    pub fn synthetic(dim: usize) -> Self {
        Self {
            kind: ProviderKind::SyntheticPosition,
            dim,
            flip_supported: true,
        }
    }

    /// Precomputed embeddings are only flippable when mirrored-frame
    /// embeddings are supplied alongside them.
    pub fn precomputed(dim: usize, has_flipped: bool) -> Self {
        Self {
            kind: ProviderKind::Precomputed,
            dim,
            flip_supported: has_flipped,
        }
    }
}

/// Source frame index nearest in time to output frame `i`, ties to the
/// earlier frame. Distances are compared scaled by `fps * target_fps` so that
/// rational frame times tie exactly.
fn nearest_frame(i: usize, target_fps: f64, start_time: f64, fps: f64, n: usize) -> usize {
    let scaled_t = start_time * fps * target_fps + i as f64 * fps;
    let x = scaled_t / target_fps;
    if x <= 0.0 {
        return 0;
    }
    let lo = (x.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let d_lo = (scaled_t - lo as f64 * target_fps).abs();
    let d_hi = (scaled_t - hi as f64 * target_fps).abs();
    if d_hi < d_lo {
        hi
    } else {
        lo
    }
}

/// Repeats source frames so that output frame `i` (at `target_fps`) copies
/// the source frame closest in time.
pub fn upsample_nearest(
    track: &FeatureTrack,
    target_frames: usize,
    target_fps: f64,
) -> Result<FeatureTrack> {
    upsample_nearest_from(track, target_frames, target_fps, 0.0)
}

/// As [`upsample_nearest`], with output frame 0 located at `start_time`
/// seconds into the track.
pub fn upsample_nearest_from(
    track: &FeatureTrack,
    target_frames: usize,
    target_fps: f64,
    start_time: f64,
) -> Result<FeatureTrack> {
    if target_frames == 0 {
        return Err(Error::invalid("target_frames must be at least 1"));
    }
    if !(target_fps > 0.0) {
        return Err(Error::invalid("target_fps must be positive"));
    }
    let n = track.n_frames();
    let mut out = Array2::zeros((target_frames, track.dim()));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let j = nearest_frame(i, target_fps, start_time, track.fps, n);
        row.assign(&track.vectors.row(j));
    }
    FeatureTrack::new(out, target_fps)
}

/// Row-wise concatenation `[a | b]`; by convention `a` is flow and `b` RGB.
pub fn concat_tracks(a: &FeatureTrack, b: &FeatureTrack) -> Result<FeatureTrack> {
    if a.n_frames() != b.n_frames() {
        return Err(Error::shape(format!(
            "frame count mismatch: {} vs {}",
            a.n_frames(),
            b.n_frames()
        )));
    }
    if a.fps != b.fps {
        return Err(Error::shape(format!(
            "fps mismatch: {} vs {}",
            a.fps, b.fps
        )));
    }
    let vectors = concatenate(Axis(1), &[a.vectors.view(), b.vectors.view()])
        .expect("row counts checked above");
    FeatureTrack::new(vectors, a.fps)
}

/// Fixed `[dim - 2, 2]` projection used for the synthetic feature columns
/// beyond position and velocity.
fn synthetic_projection(dim: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    Array2::from_shape_fn((dim.saturating_sub(2), 2), |_| {
        StandardNormal.sample(&mut rng)
    })
}

/// Position/velocity encoding of a pan trajectory sampled at video rate:
/// column 0 is `2 * pan - 1`, column 1 its per-frame gradient, and the rest a
/// fixed linear mix of the two.
pub fn synthetic_position_features(pan: &[f64], dim: usize) -> Result<FeatureTrack> {
    if dim < 2 {
        return Err(Error::invalid("synthetic features need dim >= 2"));
    }
    if pan.is_empty() {
        return Err(Error::invalid("pan trajectory is empty"));
    }
    if pan.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("pan values must lie in [0, 1]"));
    }
    let n = pan.len();
    let pos: Vec<f64> = pan.iter().map(|p| 2.0 * p - 1.0).collect();
    let vel: Vec<f64> = (0..n)
        .map(|i| match n {
            1 => 0.0,
            _ if i == 0 => pos[1] - pos[0],
            _ if i == n - 1 => pos[n - 1] - pos[n - 2],
            _ => 0.5 * (pos[i + 1] - pos[i - 1]),
        })
        .collect();
    let proj = synthetic_projection(dim);
    let vectors = Array2::from_shape_fn((n, dim), |(t, c)| match c {
        0 => pos[t],
        1 => vel[t],
        k => proj[[k - 2, 0]] * pos[t] + proj[[k - 2, 1]] * vel[t],
    });
    FeatureTrack::new(vectors, VIDEO_FPS)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    frames: usize,
    dim: usize,
    fps: f64,
}

/// Writes a tensor file: a one-line JSON header `{frames, dim, fps}` followed
/// by little-endian f32 values in row-major order.
pub fn save_precomputed(path: &Path, track: &FeatureTrack) -> Result<()> {
    let header = TensorHeader {
        frames: track.n_frames(),
        dim: track.dim(),
        fps: track.fps,
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    bytes.reserve(track.vectors.len() * 4);
    for v in track.vectors.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a tensor file written by [`save_precomputed`]. When `expected_dim`
/// is given the header must agree with it.
pub fn load_precomputed(path: &Path, expected_dim: Option<usize>) -> Result<FeatureTrack> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    let header: TensorHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::format(path, format!("malformed header: {e}")))?;
    if header.frames == 0 || header.dim == 0 || !(header.fps > 0.0) {
        return Err(Error::format(path, "malformed header: empty shape or bad fps"));
    }
    if let Some(d) = expected_dim {
        if d != header.dim {
            return Err(Error::format(
                path,
                format!("dim mismatch: file has {}, dataset expects {d}", header.dim),
            ));
        }
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let expected = header.frames * header.dim * 4;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload size mismatch: expected {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "NaN or infinite value in payload"));
    }
    let vectors = Array2::from_shape_vec((header.frames, header.dim), values)
        .expect("payload size checked");
    FeatureTrack::new(vectors, header.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_track(frames: usize, dim: usize, seed: u64) -> FeatureTrack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array2::from_shape_fn((frames, dim), |_| rng.random_range(-1.0f32..1.0) as f64);
        FeatureTrack::new(v, VIDEO_FPS).unwrap()
    }

    /// Brute-force argmin of `|i / target_fps - j / fps|` over every source
    /// frame, with both times expressed in units of `1 / (fps * target_fps)`.
    fn oracle_index(i: usize, target_fps: f64, n: usize, fps: f64) -> usize {
        let dist = |j: usize| (i as f64 * fps - j as f64 * target_fps).abs();
        let mut best = 0;
        for j in 1..n {
            if dist(j) < dist(best) {
                best = j;
            }
        }
        best
    }

    #[test]
    fn upsample_matches_brute_force_table() {
        let track = random_track(10, 3, 1);
        let up = upsample_nearest(&track, 100, 100.0).unwrap();
        let mut counts = [0usize; 10];
        for i in 0..100 {
            let j = oracle_index(i, 100.0, 10, 10.0);
            assert_eq!(up.vectors().row(i), track.vectors().row(j), "row {i}");
            counts[j] += 1;
        }
        assert!(counts[1..9].iter().all(|&c| c == 10), "{counts:?}");
        // Ties break toward the earlier frame: t = 0.05 s maps to frame 0.
        assert_eq!(up.vectors().row(5), track.vectors().row(0));
    }

    #[test]
    fn upsample_single_frame_and_identity() {
        let one = random_track(1, 4, 2);
        let up = upsample_nearest(&one, 37, 100.0).unwrap();
        for row in up.vectors().outer_iter() {
            assert_eq!(row, one.vectors().row(0));
        }
        let track = random_track(12, 4, 3);
        let same = upsample_nearest(&track, 12, VIDEO_FPS).unwrap();
        assert_eq!(same, track);
        assert!(upsample_nearest(&track, 0, 100.0).is_err());
    }

    #[test]
    fn concat_shapes_and_rows() {
        let a = random_track(5, 4, 4);
        let b = random_track(5, 6, 5);
        let c = concat_tracks(&a, &b).unwrap();
        assert_eq!(c.dim(), 10);
        for k in 0..5 {
            let row: Vec<f64> = a
                .vectors()
                .row(k)
                .iter()
                .chain(b.vectors().row(k).iter())
                .cloned()
                .collect();
            assert_eq!(c.vectors().row(k).to_vec(), row);
        }
        let zeros = FeatureTrack::new(Array2::zeros((5, 3)), VIDEO_FPS).unwrap();
        let c = concat_tracks(&a, &zeros).unwrap();
        assert_eq!(c.vectors().slice(ndarray::s![.., ..4]), a.vectors().view());
        assert!(concat_tracks(&a, &random_track(6, 2, 6)).is_err());
    }

    #[test]
    fn synthetic_features_examples() {
        let f = synthetic_position_features(&[0.5; 20], 8).unwrap();
        assert!(f.vectors().column(0).iter().all(|&v| v == 0.0));
        assert!(f.vectors().column(1).iter().all(|&v| v == 0.0));

        let lin: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
        let f = synthetic_position_features(&lin, 8).unwrap();
        let v0 = f.vectors()[[0, 1]];
        assert!(v0 > 0.0);
        for &v in f.vectors().column(1) {
            assert!((v - v0).abs() < 1e-12);
        }

        let flipped: Vec<f64> = lin.iter().map(|p| 1.0 - p).collect();
        let g = synthetic_position_features(&flipped, 8).unwrap();
        for (a, b) in f.vectors().iter().zip(g.vectors().iter()) {
            assert!((a + b).abs() < 1e-12);
        }

        assert!(synthetic_position_features(&[1.2], 8).is_err());
        assert!(synthetic_position_features(&[0.2], 1).is_err());
    }

    #[test]
    fn tensor_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tensor");
        let track = random_track(50, 1025, 7);
        save_precomputed(&path, &track).unwrap();
        let back = load_precomputed(&path, Some(1025)).unwrap();
        assert_eq!(back.n_frames(), 50);
        assert_eq!(back.dim(), 1025);
        assert_eq!(back.fps(), 10.0);
        assert_eq!(back, track);

        assert!(matches!(
            load_precomputed(&path, Some(64)),
            Err(Error::Format { .. })
        ));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_precomputed(&path, None).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"), "{err}");

        std::fs::write(&path, b"{frames: oops}\n").unwrap();
        assert!(load_precomputed(&path, None).is_err());

        let mut nan = b"{\"frames\":1,\"dim\":1,\"fps\":10.0}\n".to_vec();
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &nan).unwrap();
        assert!(load_precomputed(&path, None).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn upsampling_never_interpolates(frames in 1usize..30, target in 1usize..400, seed in 0u64..1000) {
                let track = random_track(frames, 3, seed);
                let up = upsample_nearest(&track, target, 100.0).unwrap();
                for row in up.vectors().outer_iter() {
                    prop_assert!(track.vectors().outer_iter().any(|r| r == row));
                }
            }

            #[test]
            fn synthetic_features_flip_equivariant(pan in prop::collection::vec(0.0f64..=1.0, 1..40)) {
                let f = synthetic_position_features(&pan, 16).unwrap();
                let flipped: Vec<f64> = pan.iter().map(|p| 1.0 - p).collect();
                let g = synthetic_position_features(&flipped, 16).unwrap();
                for (a, b) in f.vectors().iter().zip(g.vectors().iter()) {
                    prop_assert!((a + b).abs() < 1e-9);
                }
            }
        }
    }
}
