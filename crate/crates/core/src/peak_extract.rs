//! Frame -> peak patches: robust thresholding, 8-connected component
//! labeling with area gates, and fixed-size normalized windows around each
//! retained spot.
//!
//! Datasets persist as a raw binary patch file (`count: u64le`,
//! `patch_size: u32le`, then contiguous little-endian f32 pixels) plus a CSV
//! sidecar with one provenance row per patch.

use crate::frame_store::{Frame, Image, ScanSet};
use crate::util;
use crate::{Error, Result};
use rayon::prelude::*;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// How the per-frame threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Fixed threshold in counts; pixels must exceed it strictly.
    Absolute(f64),
    /// `median + k * MAD` of the frame's pixel counts.
    MedianMad { k: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExtractionConfig {
    pub threshold: ThresholdRule,
    pub min_area: usize,
    pub max_area: usize,
    pub patch_size: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdRule::MedianMad { k: 5.0 },
            min_area: 4,
            max_area: 2000,
            patch_size: 15,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 5 || self.patch_size % 2 == 0 {
            return Err(Error::ConfigInvalid {
                field: "patch_size".into(),
                reason: format!("must be odd and >= 5, got {}", self.patch_size),
            });
        }
        if self.min_area == 0 || self.max_area < self.min_area {
            return Err(Error::ConfigInvalid {
                field: "min_area/max_area".into(),
                reason: format!(
                    "need 1 <= min ({}) <= max ({})",
                    self.min_area, self.max_area
                ),
            });
        }
        if let ThresholdRule::Absolute(t) = self.threshold {
            if !(t >= 0.0) {
                return Err(Error::ConfigInvalid {
                    field: "threshold".into(),
                    reason: format!("must be >= 0, got {t}"),
                });
            }
        }
        Ok(())
    }
}

/// Binary mask with the geometry of its frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

/// `mask[i,j] = frame[i,j] > threshold` (strict).
pub fn threshold_mask(img: &Image, threshold: f64) -> Mask {
    Mask {
        height: img.height(),
        width: img.width(),
        data: img
            .data()
            .iter()
            .map(|&v| f64::from(v) > threshold)
            .collect(),
    }
}

/// `median + k * MAD` of pixel counts via two histogram passes.
pub fn median_mad_threshold(img: &Image, k: f64) -> f64 {
    let n = img.data().len();
    let mut hist = vec![0u32; 1 << 16];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    let median = histogram_median(&hist, n);
    let mut dev_hist = vec![0u32; 1 << 16];
    for &v in img.data() {
        let d = (i32::from(v) - i32::from(median)).unsigned_abs() as usize;
        dev_hist[d] += 1;
    }
    let mad = histogram_median(&dev_hist, n);
    f64::from(median) + k * f64::from(mad)
}

fn histogram_median(hist: &[u32], n: usize) -> u16 {
    let target = (n - 1) / 2;
    let mut seen = 0usize;
    for (value, &count) in hist.iter().enumerate() {
        seen += count as usize;
        if seen > target {
            return value as u16;
        }
    }
    0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentStats {
    pub label: u32,
    pub area: usize,
    /// Inclusive (min_row, min_col, max_row, max_col).
    pub bbox: (usize, usize, usize, usize),
    /// Intensity-weighted, sub-pixel.
    pub centroid: (f64, f64),
    pub total_intensity: u64,
}

#[derive(Clone, Debug)]
pub struct ComponentMask {
    pub height: usize,
    pub width: usize,
    /// 0 = background; retained components are labeled 1..=n contiguously.
    pub label_map: Vec<u32>,
    pub components: Vec<ComponentStats>,
}

impl ComponentMask {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }
}

const VISITED: u32 = u32::MAX;
const REJECTED: u32 = u32::MAX - 1;

/// 8-connected labeling over `mask`, with components outside
/// `[min_area, max_area]` discarded and the survivors relabeled 1..=n in
/// row-major discovery order. Intensity statistics come from `img`.
pub fn connected_components(
    mask: &Mask,
    img: &Image,
    min_area: usize,
    max_area: usize,
) -> ComponentMask {
    debug_assert_eq!(mask.height, img.height());
    debug_assert_eq!(mask.width, img.width());
    let (h, w) = (mask.height, mask.width);
    let mut label_map = vec![0u32; h * w];
    let mut components = Vec::new();
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut member_cells: Vec<(usize, usize)> = Vec::new();
    let mut next_label = 1u32;

    for r0 in 0..h {
        for c0 in 0..w {
            let idx0 = r0 * w + c0;
            if !mask.data[idx0] || label_map[idx0] != 0 {
                continue;
            }
            member_cells.clear();
            stack.push((r0, c0));
            label_map[idx0] = VISITED;
            while let Some((r, c)) = stack.pop() {
                member_cells.push((r, c));
                let r_hi = (r + 1).min(h - 1);
                let c_hi = (c + 1).min(w - 1);
                for rr in r.saturating_sub(1)..=r_hi {
                    for cc in c.saturating_sub(1)..=c_hi {
                        let idx = rr * w + cc;
                        if mask.data[idx] && label_map[idx] == 0 {
                            label_map[idx] = VISITED;
                            stack.push((rr, cc));
                        }
                    }
                }
            }

            let area = member_cells.len();
            if area < min_area || area > max_area {
                for &(r, c) in &member_cells {
                    label_map[r * w + c] = REJECTED;
                }
                continue;
            }

            let label = next_label;
            next_label += 1;
            let mut bbox = (usize::MAX, usize::MAX, 0usize, 0usize);
            let mut total = 0u64;
            let mut wr = 0.0f64;
            let mut wc = 0.0f64;
            for &(r, c) in &member_cells {
                label_map[r * w + c] = label;
                bbox.0 = bbox.0.min(r);
                bbox.1 = bbox.1.min(c);
                bbox.2 = bbox.2.max(r);
                bbox.3 = bbox.3.max(c);
                let i = f64::from(img.get(r, c));
                total += u64::from(img.get(r, c));
                wr += i * r as f64;
                wc += i * c as f64;
            }
            let centroid = if total > 0 {
                (wr / total as f64, wc / total as f64)
            } else {
                // degenerate all-zero component (possible with externally
                // supplied masks): geometric centroid
                let n = area as f64;
                (
                    member_cells.iter().map(|&(r, _)| r as f64).sum::<f64>() / n,
                    member_cells.iter().map(|&(_, c)| c as f64).sum::<f64>() / n,
                )
            };
            components.push(ComponentStats {
                label,
                area,
                bbox,
                centroid,
                total_intensity: total,
            });
        }
    }
    for v in &mut label_map {
        if *v == REJECTED {
            *v = 0;
        }
    }
    ComponentMask {
        height: h,
        width: w,
        label_map,
        components,
    }
}

/// Fixed-size normalized window around one diffraction spot.
#[derive(Clone, Debug, PartialEq)]
pub struct PeakPatch {
    /// Row-major `size * size` values in [0, 1]; the max is exactly 1.
    pub pixels: Vec<f32>,
    pub size: usize,
    pub frame_index: usize,
    pub omega: f64,
    pub centroid_row: f64,
    pub centroid_col: f64,
    pub raw_max: u16,
    pub component_area: usize,
}

#[derive(Clone, Debug, Default)]
pub struct FrameDiagnostics {
    pub threshold: f64,
    pub n_components: usize,
    pub border_discards: usize,
    pub zero_patch_discards: usize,
    pub saturated_pixels: usize,
    pub clamped_pixels: usize,
}

/// One patch per retained component, centered at the rounded
/// intensity-weighted centroid. Windows that would cross the frame border
/// are discarded (and counted); each patch is scaled by its own max raw
/// intensity so the brightest pixel is exactly 1.
pub fn extract_patches(
    frame: &Frame,
    comps: &ComponentMask,
    patch_size: usize,
) -> (Vec<PeakPatch>, usize, usize) {
    let half = patch_size / 2;
    let (h, w) = (frame.pixels.height(), frame.pixels.width());
    let mut patches = Vec::with_capacity(comps.components.len());
    let mut border_discards = 0usize;
    let mut zero_discards = 0usize;

    for comp in &comps.components {
        let cr = comp.centroid.0.round() as isize;
        let cc = comp.centroid.1.round() as isize;
        if cr < half as isize
            || cc < half as isize
            || cr + half as isize >= h as isize
            || cc + half as isize >= w as isize
        {
            border_discards += 1;
            continue;
        }
        let (cr, cc) = (cr as usize, cc as usize);
        let mut raw = Vec::with_capacity(patch_size * patch_size);
        let mut raw_max = 0u16;
        for r in cr - half..=cr + half {
            let row = frame.pixels.row(r);
            for &v in &row[cc - half..=cc + half] {
                raw_max = raw_max.max(v);
                raw.push(v);
            }
        }
        if raw_max == 0 {
            zero_discards += 1;
            continue;
        }
        let scale = f32::from(raw_max);
        let pixels: Vec<f32> = raw.iter().map(|&v| f32::from(v) / scale).collect();
        patches.push(PeakPatch {
            pixels,
            size: patch_size,
            frame_index: frame.index,
            omega: frame.omega,
            centroid_row: comp.centroid.0,
            centroid_col: comp.centroid.1,
            raw_max,
            component_area: comp.area,
        });
    }
    (patches, border_discards, zero_discards)
}

/// Threshold + label + window one dark-corrected frame.
pub fn extract_frame(frame: &Frame, cfg: &ExtractionConfig) -> (Vec<PeakPatch>, FrameDiagnostics) {
    let threshold = match cfg.threshold {
        ThresholdRule::Absolute(t) => t,
        ThresholdRule::MedianMad { k } => median_mad_threshold(&frame.pixels, k),
    };
    let mask = threshold_mask(&frame.pixels, threshold);
    let comps = connected_components(&mask, &frame.pixels, cfg.min_area, cfg.max_area);
    let saturated = frame
        .pixels
        .data()
        .iter()
        .filter(|&&v| v == u16::MAX)
        .count();
    let (patches, border_discards, zero_patch_discards) =
        extract_patches(frame, &comps, cfg.patch_size);
    let diag = FrameDiagnostics {
        threshold,
        n_components: comps.n_components(),
        border_discards,
        zero_patch_discards,
        saturated_pixels: saturated,
        clamped_pixels: 0,
    };
    (patches, diag)
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct ExtractionStats {
    pub n_frames: usize,
    pub border_discards: usize,
    pub zero_patch_discards: usize,
    pub saturated_pixels: usize,
    pub clamped_pixels: usize,
    pub wall_seconds: f64,
    pub frames_per_second: f64,
}

/// The unit of learning and scoring: every peak patch from one contiguous
/// rotation segment, in frame order.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    pub dataset_id: String,
    pub patch_size: usize,
    pub patches: Vec<PeakPatch>,
    pub stats: ExtractionStats,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Extract every frame of a scan. Frames are processed in parallel but the
/// patch sequence is concatenated in frame order, so output is independent
/// of worker count.
pub fn extract_dataset(scan: &ScanSet, cfg: &ExtractionConfig) -> Result<PatchDataset> {
    cfg.validate()?;
    util::init_workers();
    let n = scan.n_frames();
    let (per_frame, wall_seconds) = util::timed(|| -> Result<Vec<_>> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let corrected = scan.corrected_frame(i)?;
                let (patches, mut diag) = extract_frame(&corrected.frame, cfg);
                diag.clamped_pixels = corrected.clamped;
                Ok((patches, diag))
            })
            .collect()
    });
    let per_frame = per_frame?;

    let mut stats = ExtractionStats {
        n_frames: n,
        wall_seconds,
        frames_per_second: if wall_seconds > 0.0 {
            n as f64 / wall_seconds
        } else {
            0.0
        },
        ..Default::default()
    };
    let mut patches = Vec::new();
    for (frame_patches, diag) in per_frame {
        stats.border_discards += diag.border_discards;
        stats.zero_patch_discards += diag.zero_patch_discards;
        stats.saturated_pixels += diag.saturated_pixels;
        stats.clamped_pixels += diag.clamped_pixels;
        patches.extend(frame_patches);
    }
    Ok(PatchDataset {
        dataset_id: scan.scan_id().to_string(),
        patch_size: cfg.patch_size,
        patches,
        stats,
    })
}

// ------------------------------------------------------------ persistence

fn sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("csv")
}

/// Write `<path>` (binary patches) and `<path with .csv>` (provenance).
pub fn save_dataset(dataset: &PatchDataset, bin_path: impl AsRef<Path>) -> Result<()> {
    let bin_path = bin_path.as_ref();
    if let Some(parent) = bin_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.to_path_buf(), e))?;
        }
    }
    let file =
        std::fs::File::create(bin_path).map_err(|e| Error::io(bin_path.to_path_buf(), e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&(dataset.patches.len() as u64).to_le_bytes())
        .and_then(|_| out.write_all(&(dataset.patch_size as u32).to_le_bytes()))
        .map_err(|e| Error::io(bin_path.to_path_buf(), e))?;
    for patch in &dataset.patches {
        for v in &patch.pixels {
            out.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(bin_path.to_path_buf(), e))?;
        }
    }
    out.flush()
        .map_err(|e| Error::io(bin_path.to_path_buf(), e))?;

    let csv_path = sidecar_path(bin_path);
    let csv_err = |e: csv::Error| Error::Malformed {
        path: csv_path.clone(),
        reason: e.to_string(),
    };
    let mut writer = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    writer
        .write_record([
            "frame_index",
            "omega",
            "centroid_row",
            "centroid_col",
            "raw_max",
            "area",
        ])
        .map_err(csv_err)?;
    for p in &dataset.patches {
        writer
            .write_record(&[
                p.frame_index.to_string(),
                p.omega.to_string(),
                p.centroid_row.to_string(),
                p.centroid_col.to_string(),
                p.raw_max.to_string(),
                p.component_area.to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(csv_path, e))?;
    Ok(())
}

/// Load a dataset pair written by [`save_dataset`]. The dataset id is the
/// binary file's stem.
pub fn load_dataset(bin_path: impl AsRef<Path>) -> Result<PatchDataset> {
    let bin_path = bin_path.as_ref();
    if !bin_path.is_file() {
        return Err(Error::MissingFile {
            path: bin_path.to_path_buf(),
        });
    }
    let mut file =
        std::fs::File::open(bin_path).map_err(|e| Error::io(bin_path.to_path_buf(), e))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|e| Error::io(bin_path.to_path_buf(), e))?;
    let count = u64::from_le_bytes(header[0..8].try_into().unwrap()) as usize;
    let patch_size = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let pixels_len = count * patch_size * patch_size;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(bin_path.to_path_buf(), e))?;
    if bytes.len() != pixels_len * 4 {
        return Err(Error::SizeMismatch {
            path: bin_path.to_path_buf(),
            expected: (12 + pixels_len * 4) as u64,
            found: (12 + bytes.len()) as u64,
        });
    }

    let csv_path = sidecar_path(bin_path);
    if !csv_path.is_file() {
        return Err(Error::MissingFile { path: csv_path });
    }
    let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| Error::Malformed {
        path: csv_path.clone(),
        reason: e.to_string(),
    })?;
    let mut rows: Vec<(usize, f64, f64, f64, u16, usize)> = Vec::with_capacity(count);
    for record in reader.records() {
        let record = record.map_err(|e| Error::Malformed {
            path: csv_path.clone(),
            reason: e.to_string(),
        })?;
        let parse_err = |what: &str| Error::Malformed {
            path: csv_path.clone(),
            reason: format!("bad field {what} in row {record:?}"),
        };
        rows.push((
            record[0].parse().map_err(|_| parse_err("frame_index"))?,
            record[1].parse().map_err(|_| parse_err("omega"))?,
            record[2].parse().map_err(|_| parse_err("centroid_row"))?,
            record[3].parse().map_err(|_| parse_err("centroid_col"))?,
            record[4].parse().map_err(|_| parse_err("raw_max"))?,
            record[5].parse().map_err(|_| parse_err("area"))?,
        ));
    }
    if rows.len() != count {
        return Err(Error::Malformed {
            path: csv_path,
            reason: format!("{} provenance rows for {count} patches", rows.len()),
        });
    }

    let pp = patch_size * patch_size;
    let patches = rows
        .into_iter()
        .enumerate()
        .map(|(i, (frame_index, omega, cr, cc, raw_max, area))| {
            let pixels = bytes[i * pp * 4..(i + 1) * pp * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            PeakPatch {
                pixels,
                size: patch_size,
                frame_index,
                omega,
                centroid_row: cr,
                centroid_col: cc,
                raw_max,
                component_area: area,
            }
        })
        .collect();
    Ok(PatchDataset {
        dataset_id: bin_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        patch_size,
        patches,
        stats: ExtractionStats::default(),
    })
}
