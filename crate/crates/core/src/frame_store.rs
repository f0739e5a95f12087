//! Scan storage: one directory per scan holding `manifest.json` (UTF-8),
//! `frames.bin` (raw little-endian u16, row-major within a frame, frame-major
//! within the file) and an optional `dark.bin` with one frame. These layouts
//! are bit-exact contracts; the round-trip tests pin them.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.bin";
pub const DARK_FILE: &str = "dark.bin";
pub const PIXEL_ENCODING_U16LE: &str = "u16le";

/// Slack allowed on `n_frames * omega_step <= 360`.
const OMEGA_COVER_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScanManifest {
    pub scan_id: String,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub omega_start: f64,
    pub omega_step: f64,
    pub pixel_encoding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dark_path: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

impl ScanManifest {
    pub fn new(scan_id: impl Into<String>, width: usize, height: usize, n_frames: usize) -> Self {
        Self {
            scan_id: scan_id.into(),
            width,
            height,
            n_frames,
            omega_start: 0.0,
            omega_step: 360.0 / n_frames.max(1) as f64,
            pixel_encoding: PIXEL_ENCODING_U16LE.to_string(),
            dark_path: None,
            tags: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::BadManifestField {
                field: field.to_string(),
                reason,
            })
        };
        if self.scan_id.is_empty() {
            return bad("scan_id", "must be non-empty".into());
        }
        if self.width == 0 {
            return bad("width", "must be > 0".into());
        }
        if self.height == 0 {
            return bad("height", "must be > 0".into());
        }
        if self.n_frames == 0 {
            return bad("n_frames", "must be >= 1 (empty scan forbidden)".into());
        }
        if !(self.omega_step > 0.0) {
            return bad("omega_step", format!("must be > 0, got {}", self.omega_step));
        }
        if !self.omega_start.is_finite() {
            return bad("omega_start", "must be finite".into());
        }
        let covered = self.n_frames as f64 * self.omega_step;
        if covered > 360.0 + OMEGA_COVER_TOL {
            return bad(
                "n_frames",
                format!("n_frames * omega_step = {covered} exceeds 360 degrees"),
            );
        }
        if self.pixel_encoding != PIXEL_ENCODING_U16LE {
            return bad(
                "pixel_encoding",
                format!(
                    "only `{PIXEL_ENCODING_U16LE}` is supported, got `{}`",
                    self.pixel_encoding
                ),
            );
        }
        Ok(())
    }

    pub fn omega_of(&self, index: usize) -> f64 {
        self.omega_start + index as f64 * self.omega_step
    }

    pub fn frame_bytes(&self) -> u64 {
        (self.width * self.height * 2) as u64
    }
}

/// Dense detector image of intensity counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch {
                context: format!("image data length {} != {height}x{width}", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[u16] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 2);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_le_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        let data = bytes
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }
}

/// One detector frame with rotation metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub omega: f64,
    pub pixels: Image,
}

pub type DarkFrame = Image;

/// Dark subtraction result; `clamped` counts pixels that went negative and
/// were clipped to zero.
#[derive(Clone, Debug)]
pub struct SubtractOutcome {
    pub frame: Frame,
    pub clamped: usize,
}

/// `out[i,j] = max(0, frame[i,j] - dark[i,j])`.
pub fn subtract_dark(frame: &Frame, dark: &DarkFrame) -> Result<SubtractOutcome> {
    let img = &frame.pixels;
    if img.height() != dark.height() || img.width() != dark.width() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "frame {}x{} vs dark {}x{}",
                img.height(),
                img.width(),
                dark.height(),
                dark.width()
            ),
        });
    }
    let mut clamped = 0usize;
    let data = img
        .data()
        .iter()
        .zip(dark.data())
        .map(|(&f, &d)| {
            if d > f {
                clamped += 1;
                0
            } else {
                f - d
            }
        })
        .collect();
    Ok(SubtractOutcome {
        frame: Frame {
            index: frame.index,
            omega: frame.omega,
            pixels: Image {
                height: img.height(),
                width: img.width(),
                data,
            },
        },
        clamped,
    })
}

#[derive(Clone, Debug)]
enum FrameSource {
    Dir { frames_path: PathBuf },
    Memory { frames: Arc<Vec<Image>> },
}

/// An ordered stack of frames with rotation metadata. Immutable after load;
/// cloning and slicing share the underlying source, and concurrent readers
/// are safe (directory-backed reads open their own handles).
#[derive(Clone, Debug)]
pub struct ScanSet {
    manifest: ScanManifest,
    source: FrameSource,
    dark: Option<Arc<Image>>,
    /// For sliced views: logical position -> physical frame index.
    indices: Option<Arc<Vec<usize>>>,
    /// Geometry of the physical source (slices keep original omegas).
    base: Arc<ScanManifest>,
}

impl ScanSet {
    /// Wrap in-memory frames (used by the synthetic generator and tests).
    pub fn from_memory(
        manifest: ScanManifest,
        frames: Vec<Image>,
        dark: Option<Image>,
    ) -> Result<Self> {
        manifest.validate()?;
        if frames.len() != manifest.n_frames {
            return Err(Error::BadManifestField {
                field: "n_frames".into(),
                reason: format!(
                    "{} frames supplied, manifest says {}",
                    frames.len(),
                    manifest.n_frames
                ),
            });
        }
        for img in frames.iter().chain(dark.iter()) {
            if img.height() != manifest.height || img.width() != manifest.width {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "frame {}x{} vs manifest {}x{}",
                        img.height(),
                        img.width(),
                        manifest.height,
                        manifest.width
                    ),
                });
            }
        }
        let base = Arc::new(manifest.clone());
        Ok(Self {
            manifest,
            source: FrameSource::Memory {
                frames: Arc::new(frames),
            },
            dark: dark.map(Arc::new),
            indices: None,
            base,
        })
    }

    pub fn manifest(&self) -> &ScanManifest {
        &self.manifest
    }

    pub fn scan_id(&self) -> &str {
        &self.manifest.scan_id
    }

    pub fn n_frames(&self) -> usize {
        match &self.indices {
            Some(ix) => ix.len(),
            None => self.manifest.n_frames,
        }
    }

    pub fn has_dark(&self) -> bool {
        self.dark.is_some()
    }

    /// Physical frame index behind logical position `i`.
    pub fn physical_index(&self, i: usize) -> usize {
        match &self.indices {
            Some(ix) => ix[i],
            None => i,
        }
    }

    /// Raw frame at logical position `i` (no dark correction).
    pub fn frame(&self, i: usize) -> Result<Frame> {
        let phys = self.physical_index(i);
        let omega = self.base.omega_of(phys);
        let pixels = match &self.source {
            FrameSource::Memory { frames } => frames[phys].clone(),
            FrameSource::Dir { frames_path } => {
                let mut f =
                    fs::File::open(frames_path).map_err(|e| Error::io(frames_path.clone(), e))?;
                let fb = self.base.frame_bytes();
                f.seek(SeekFrom::Start(phys as u64 * fb))
                    .map_err(|e| Error::io(frames_path.clone(), e))?;
                let mut buf = vec![0u8; fb as usize];
                f.read_exact(&mut buf)
                    .map_err(|e| Error::io(frames_path.clone(), e))?;
                Image::from_le_bytes(self.base.height, self.base.width, &buf)
            }
        };
        Ok(Frame {
            index: phys,
            omega,
            pixels,
        })
    }

    /// Dark-corrected frame at logical position `i`; identity when the scan
    /// carries no dark frame.
    pub fn corrected_frame(&self, i: usize) -> Result<SubtractOutcome> {
        let frame = self.frame(i)?;
        match &self.dark {
            Some(dark) => subtract_dark(&frame, dark),
            None => Ok(SubtractOutcome { frame, clamped: 0 }),
        }
    }

    /// Contiguous view of frames covering `delta_omega` degrees starting at
    /// `omega_begin` (normalized into [0, 360)), wrapping across 360.
    /// Frame count is `round(delta_omega / omega_step)`, capped at the scan
    /// length.
    pub fn slice_segment(&self, omega_begin: f64, delta_omega: f64) -> Result<ScanSet> {
        if !(delta_omega > 0.0 && delta_omega <= 360.0) {
            return Err(Error::BadRange {
                reason: format!("delta_omega must be in (0, 360], got {delta_omega}"),
            });
        }
        if !omega_begin.is_finite() {
            return Err(Error::BadRange {
                reason: "omega_begin must be finite".into(),
            });
        }
        let n = self.n_frames();
        let step = self.manifest.omega_step;
        let count = usize::min(((delta_omega / step).round() as usize).max(1), n);
        let begin = omega_begin.rem_euclid(360.0);
        let rel = (begin - self.manifest.omega_start).rem_euclid(360.0);
        let start = (rel / step).round() as usize % n;

        let indices: Vec<usize> = (0..count)
            .map(|j| self.physical_index((start + j) % n))
            .collect();
        let mut manifest = self.manifest.clone();
        manifest.n_frames = count;
        manifest.omega_start = self.base.omega_of(indices[0]);
        Ok(ScanSet {
            manifest,
            source: self.source.clone(),
            dark: self.dark.clone(),
            indices: Some(Arc::new(indices)),
            base: self.base.clone(),
        })
    }
}

/// Load a scan directory written by [`write_scan`] (or any producer of the
/// same layout). Frames are not decoded until first access.
pub fn load_scan(dir: impl AsRef<Path>) -> Result<ScanSet> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingFile {
            path: manifest_path,
        });
    }
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(manifest_path.clone(), e))?;
    let manifest: ScanManifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    manifest.validate()?;

    let frames_path = dir.join(FRAMES_FILE);
    if !frames_path.is_file() {
        return Err(Error::MissingFile { path: frames_path });
    }
    let expected = manifest.frame_bytes() * manifest.n_frames as u64;
    let found = fs::metadata(&frames_path)
        .map_err(|e| Error::io(frames_path.clone(), e))?
        .len();
    if found != expected {
        return Err(Error::SizeMismatch {
            path: frames_path,
            expected,
            found,
        });
    }

    let dark = match &manifest.dark_path {
        Some(rel) => {
            let dark_path = dir.join(rel);
            if !dark_path.is_file() {
                return Err(Error::MissingFile { path: dark_path });
            }
            let bytes = fs::read(&dark_path).map_err(|e| Error::io(dark_path.clone(), e))?;
            if bytes.len() as u64 != manifest.frame_bytes() {
                return Err(Error::SizeMismatch {
                    path: dark_path,
                    expected: manifest.frame_bytes(),
                    found: bytes.len() as u64,
                });
            }
            Some(Arc::new(Image::from_le_bytes(
                manifest.height,
                manifest.width,
                &bytes,
            )))
        }
        None => None,
    };

    let base = Arc::new(manifest.clone());
    Ok(ScanSet {
        manifest,
        source: FrameSource::Dir { frames_path },
        dark,
        indices: None,
        base,
    })
}

/// Persist a scan as a directory. Round-trips pixels bit-exactly.
pub fn write_scan(scan: &ScanSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;

    let mut manifest = scan.manifest.clone();
    manifest.n_frames = scan.n_frames();
    manifest.dark_path = scan.dark.as_ref().map(|_| DARK_FILE.to_string());

    let frames_path = dir.join(FRAMES_FILE);
    let mut out = std::io::BufWriter::new(
        fs::File::create(&frames_path).map_err(|e| Error::io(frames_path.clone(), e))?,
    );
    for i in 0..scan.n_frames() {
        let frame = scan.frame(i)?;
        out.write_all(&frame.pixels.to_le_bytes())
            .map_err(|e| Error::io(frames_path.clone(), e))?;
    }
    out.flush().map_err(|e| Error::io(frames_path.clone(), e))?;

    if let Some(dark) = &scan.dark {
        let dark_path = dir.join(DARK_FILE);
        fs::write(&dark_path, dark.to_le_bytes())
            .map_err(|e| Error::io(dark_path.clone(), e))?;
    }

    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_manifest(n_frames: usize, step: f64) -> ScanManifest {
        let mut m = ScanManifest::new("scan-a", 8, 6, n_frames);
        m.omega_step = step;
        m
    }

    fn random_scan(rng: &mut ChaCha8Rng, n_frames: usize, step: f64) -> ScanSet {
        let m = test_manifest(n_frames, step);
        let frames = (0..n_frames)
            .map(|_| {
                let data = (0..m.width * m.height)
                    .map(|_| rng.gen_range(0..2000))
                    .collect();
                Image::new(m.height, m.width, data).unwrap()
            })
            .collect();
        ScanSet::from_memory(m, frames, None).unwrap()
    }

    #[test]
    fn full_circle_manifest_reports_full_omega_range() {
        // 1440 frames at 0.25 degrees covers [omega0, omega0 + 360)
        let mut m = test_manifest(1440, 0.25);
        m.omega_start = -180.0;
        m.validate().unwrap();
        assert_eq!(m.omega_of(0), -180.0);
        assert!((m.omega_of(1439) - (-180.0 + 359.75)).abs() < 1e-9);
        assert!(m.omega_of(1439) < -180.0 + 360.0);
    }

    #[test]
    fn zero_frames_is_rejected() {
        let m = test_manifest(0, 0.25);
        match m.validate() {
            Err(Error::BadManifestField { field, .. }) => assert_eq!(field, "n_frames"),
            other => panic!("expected BadManifestField, got {other:?}"),
        }
    }

    #[test]
    fn overfull_rotation_is_rejected() {
        let m = test_manifest(1441, 0.25);
        assert!(m.validate().is_err());
    }

    #[test]
    fn truncated_frame_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scan = random_scan(&mut rng, 4, 90.0);
        write_scan(&scan, dir.path()).unwrap();
        // chop two bytes off frames.bin
        let fp = dir.path().join(FRAMES_FILE);
        let bytes = std::fs::read(&fp).unwrap();
        std::fs::write(&fp, &bytes[..bytes.len() - 2]).unwrap();
        match load_scan(dir.path()) {
            Err(Error::SizeMismatch { path, .. }) => {
                assert!(path.ends_with(FRAMES_FILE), "{path:?}")
            }
            other => panic!("expected SizeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn write_then_load_round_trips_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = test_manifest(5, 72.0);
        let frames: Vec<Image> = (0..5)
            .map(|_| {
                let data = (0..48).map(|_| rng.gen()).collect();
                Image::new(6, 8, data).unwrap()
            })
            .collect();
        let dark = Image::new(6, 8, (0..48).map(|_| rng.gen_range(0..4)).collect()).unwrap();
        let scan = ScanSet::from_memory(m, frames.clone(), Some(dark.clone())).unwrap();
        write_scan(&scan, dir.path()).unwrap();

        let loaded = load_scan(dir.path()).unwrap();
        assert!(loaded.has_dark());
        for i in 0..5 {
            assert_eq!(loaded.frame(i).unwrap().pixels, frames[i]);
        }
    }

    #[test]
    fn subtract_dark_identity_and_clamp() {
        let img = Image::new(2, 2, vec![5, 9, 0, 7]).unwrap();
        let frame = Frame {
            index: 0,
            omega: 0.0,
            pixels: img.clone(),
        };
        // frame == dark -> all zero
        let out = subtract_dark(&frame, &img).unwrap();
        assert!(out.frame.pixels.data().iter().all(|&v| v == 0));
        assert_eq!(out.clamped, 0);

        // frame 5, dark 9 -> 0 with clamps counted
        let dark = Image::new(2, 2, vec![9, 2, 0, 9]).unwrap();
        let out = subtract_dark(&frame, &dark).unwrap();
        assert_eq!(out.frame.pixels.data(), &[0, 7, 0, 0]);
        assert_eq!(out.clamped, 2);
    }

    #[test]
    fn subtract_dark_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: Vec<u16> = (0..64 * 64).map(|_| rng.gen_range(0..300)).collect();
            let b: Vec<u16> = (0..64 * 64).map(|_| rng.gen_range(0..300)).collect();
            let frame = Frame {
                index: 0,
                omega: 0.0,
                pixels: Image::new(64, 64, a.clone()).unwrap(),
            };
            let dark = Image::new(64, 64, b.clone()).unwrap();
            let out = subtract_dark(&frame, &dark).unwrap();
            for i in 0..a.len() {
                assert_eq!(out.frame.pixels.data()[i], a[i].saturating_sub(b[i]));
            }
        }
    }

    #[test]
    fn subtract_dark_dimension_mismatch() {
        let frame = Frame {
            index: 0,
            omega: 0.0,
            pixels: Image::zeros(2, 2),
        };
        let dark = Image::zeros(2, 3);
        assert!(matches!(
            subtract_dark(&frame, &dark),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn slice_full_circle_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scan = random_scan(&mut rng, 16, 22.5);
        let sliced = scan.slice_segment(0.0, 360.0).unwrap();
        assert_eq!(sliced.n_frames(), scan.n_frames());
        for i in 0..16 {
            assert_eq!(sliced.frame(i).unwrap(), scan.frame(i).unwrap());
        }
    }

    #[test]
    fn slice_wraps_across_360() {
        // 1440 frames at 0.25 deg; begin 350, width 20 -> indices 1400..1439, 0..39
        let m = test_manifest(1440, 0.25);
        let frames = vec![Image::zeros(6, 8); 1440];
        let scan = ScanSet::from_memory(m, frames, None).unwrap();
        let sliced = scan.slice_segment(350.0, 20.0).unwrap();
        assert_eq!(sliced.n_frames(), 80);
        assert_eq!(sliced.physical_index(0), 1400);
        assert_eq!(sliced.physical_index(39), 1439);
        assert_eq!(sliced.physical_index(40), 0);
        assert_eq!(sliced.physical_index(79), 39);
        // frames keep their original omega
        assert!((sliced.frame(0).unwrap().omega - 350.0).abs() < 1e-9);
        assert!((sliced.frame(40).unwrap().omega - 0.0).abs() < 1e-9);
    }

    #[test]
    fn slice_40_degrees_at_quarter_step_gives_160_frames() {
        let m = test_manifest(1440, 0.25);
        let frames = vec![Image::zeros(6, 8); 1440];
        let scan = ScanSet::from_memory(m, frames, None).unwrap();
        let sliced = scan.slice_segment(123.0, 40.0).unwrap();
        assert_eq!(sliced.n_frames(), 160);
    }

    #[test]
    fn slice_rejects_bad_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scan = random_scan(&mut rng, 8, 45.0);
        assert!(matches!(
            scan.slice_segment(0.0, 0.0),
            Err(Error::BadRange { .. })
        ));
        assert!(matches!(
            scan.slice_segment(0.0, 361.0),
            Err(Error::BadRange { .. })
        ));
    }

    #[test]
    fn slice_count_matches_delta_within_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scan = random_scan(&mut rng, 144, 2.5);
        for _ in 0..200 {
            let begin: f64 = rng.gen_range(-400.0..400.0);
            let delta: f64 = rng.gen_range(2.5..360.0);
            let sliced = scan.slice_segment(begin, delta).unwrap();
            let covered = sliced.n_frames() as f64 * 2.5;
            assert!(
                (covered - delta).abs() <= 2.5 + 1e-9,
                "delta {delta} covered {covered}"
            );
        }
    }
}
