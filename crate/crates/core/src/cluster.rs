//! Reference clustering and the rare event indicator.
//!
//! The reference dataset is summarized as K centers in embedding space
//! (Lloyd's algorithm with k-means++ seeding). A test embedding's
//! assignment confidence is the margin `(D2 - D1) / D2` of its two nearest
//! centers; the REI of a dataset is the fraction of embeddings whose
//! confidence falls below the threshold `t`. Centers are frozen after
//! reference fitting so the baseline semantics cannot drift.

use crate::byol::EncoderModel;
use crate::frame_store::{Frame, ScanSet};
use crate::peak_extract::{extract_frame, ExtractionConfig, PatchDataset};
use crate::util;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Read;
use std::path::Path;

pub const CLUSTER_MAGIC: &[u8; 4] = b"BRCL";
pub const CLUSTER_VERSION: u32 = 1;
pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = f64::from(x) - f64::from(y);
        s += d * d;
    }
    s
}

/// Lloyd's algorithm with k-means++ initialization. Converges when the
/// largest center movement drops below `tol`; empty clusters are reseeded
/// to the point farthest from its assigned center.
pub fn kmeans_fit(
    vectors: &[Vec<f32>],
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<Vec<f32>>> {
    let n = vectors.len();
    if k == 0 || n < k {
        return Err(Error::TooFewVectors { n, k });
    }
    let dim = vectors[0].len();

    // k-means++ seeding
    let mut centers: Vec<Vec<f32>> = Vec::with_capacity(k);
    centers.push(vectors[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(vectors[next].clone());
        for (i, v) in vectors.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(v, centers.last().unwrap()));
        }
    }

    let mut assignment = vec![0usize; n];
    for _iter in 0..max_iter {
        // assignment step; ties break toward the lower center index
        for (i, v) in vectors.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(v, center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignment[i] = best.1;
        }

        // update step with f64 accumulation
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(v) {
                *s += f64::from(x);
            }
        }
        let mut new_centers = centers.clone();
        for c in 0..k {
            if counts[c] == 0 {
                // reseed to the point farthest from its assigned center
                let mut far = (f64::NEG_INFINITY, 0usize);
                for (i, v) in vectors.iter().enumerate() {
                    let d = sq_dist(v, &centers[assignment[i]]);
                    if d > far.0 {
                        far = (d, i);
                    }
                }
                new_centers[c] = vectors[far.1].clone();
                continue;
            }
            for (j, s) in sums[c].iter().enumerate() {
                new_centers[c][j] = (s / counts[c] as f64) as f32;
            }
        }

        let shift = centers
            .iter()
            .zip(&new_centers)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centers = new_centers;
        if shift < tol {
            break;
        }
    }
    Ok(centers)
}

/// Sum of squared distances to the nearest center.
pub fn kmeans_inertia(vectors: &[Vec<f32>], centers: &[Vec<f32>]) -> f64 {
    vectors
        .iter()
        .map(|v| {
            centers
                .iter()
                .map(|c| sq_dist(v, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Nearest center and the margin confidence `(D2 - D1) / D2` in [0, 1].
/// A single-center model is maximally confident by convention.
pub fn assignment_confidence(vector: &[f32], centers: &[Vec<f32>]) -> Result<(usize, f64)> {
    if centers.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "no centers".into(),
        });
    }
    if centers[0].len() != vector.len() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "vector dim {} vs center dim {}",
                vector.len(),
                centers[0].len()
            ),
        });
    }
    if centers.len() == 1 {
        return Ok((0, 1.0));
    }
    let mut best = (f64::INFINITY, 0usize);
    let mut second = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(vector, c).sqrt();
        if d < best.0 {
            second = best.0;
            best = (d, i);
        } else if d < second {
            second = d;
        }
    }
    let confidence = if second > 0.0 {
        (second - best.0) / second
    } else {
        0.0
    };
    Ok((best.1, confidence))
}

/// K reference centers plus the confidence threshold, bound to the encoder
/// that produced the embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f32>>,
    pub threshold: f64,
    pub reference_id: String,
    pub encoder_checksum: String,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, |c| c.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::ConfigInvalid {
                field: "k".into(),
                reason: "cluster model needs at least one center".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::ConfigInvalid {
                field: "threshold".into(),
                reason: format!("t must be in [0, 1], got {}", self.threshold),
            });
        }
        if self
            .centers
            .iter()
            .any(|c| c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::ConfigInvalid {
                field: "centers".into(),
                reason: "non-finite center".into(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CLUSTER_MAGIC);
        out.extend_from_slice(&CLUSTER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.threshold.to_le_bytes());
        out.extend_from_slice(&(self.encoder_checksum.len() as u32).to_le_bytes());
        out.extend_from_slice(self.encoder_checksum.as_bytes());
        out.extend_from_slice(&(self.reference_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.reference_id.as_bytes());
        for c in &self.centers {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.to_path_buf(), e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.to_path_buf(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.to_path_buf(), e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let mut pos = 0usize;
        macro_rules! take {
            ($n:expr) => {{
                let n = $n;
                if pos + n > bytes.len() {
                    return Err(malformed(format!("truncated at byte {pos}")));
                }
                let s = &bytes[pos..pos + n];
                pos += n;
                s
            }};
        }
        if take!(4) != CLUSTER_MAGIC {
            return Err(malformed("bad magic".into()));
        }
        let version = u32::from_le_bytes(take!(4).try_into().unwrap());
        if version != CLUSTER_VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        let k = u32::from_le_bytes(take!(4).try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take!(4).try_into().unwrap()) as usize;
        let threshold = f64::from_le_bytes(take!(8).try_into().unwrap());
        let ck_len = u32::from_le_bytes(take!(4).try_into().unwrap()) as usize;
        let encoder_checksum = String::from_utf8(take!(ck_len).to_vec())
            .map_err(|_| malformed("non-utf8 checksum".into()))?;
        let id_len = u32::from_le_bytes(take!(4).try_into().unwrap()) as usize;
        let reference_id = String::from_utf8(take!(id_len).to_vec())
            .map_err(|_| malformed("non-utf8 reference id".into()))?;
        let mut centers = Vec::with_capacity(k);
        for _ in 0..k {
            let raw = take!(dim * 4);
            centers.push(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            );
        }
        let model = ClusterModel {
            centers,
            threshold,
            reference_id,
            encoder_checksum,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Embed the reference dataset and fit the frozen K centers.
pub fn fit_reference(
    encoder: &EncoderModel,
    reference: &PatchDataset,
    k: usize,
    threshold: f64,
    seed: u64,
) -> Result<ClusterModel> {
    if reference.is_empty() {
        return Err(Error::EmptyDataset {
            context: "reference dataset is empty".into(),
        });
    }
    let embeddings = encoder.embed(&reference.patches);
    let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(seed, "kmeans"));
    let centers = kmeans_fit(&embeddings, k, &mut rng, KMEANS_MAX_ITER, KMEANS_TOL)?;
    let model = ClusterModel {
        centers,
        threshold,
        reference_id: reference.dataset_id.clone(),
        encoder_checksum: encoder.checksum(),
    };
    model.validate()?;
    Ok(model)
}

/// Per-dataset REI result; the partial block is present iff partial mode
/// was used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct REIReport {
    pub dataset_id: String,
    pub n_patches: usize,
    pub n_uncertain: usize,
    pub rei: f64,
    pub eval_wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial: Option<PartialBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialBlock {
    pub delta_omega: f64,
    pub n_repeats: usize,
    pub rei_mean: f64,
    pub rei_min: f64,
    pub rei_max: f64,
}

fn check_binding(encoder: &EncoderModel, cluster: &ClusterModel) -> Result<()> {
    let checksum = encoder.checksum();
    if checksum != cluster.encoder_checksum {
        return Err(Error::ModelMismatch {
            context: format!(
                "cluster model was fit with encoder {} but got {}",
                &cluster.encoder_checksum[..16.min(cluster.encoder_checksum.len())],
                &checksum[..16]
            ),
        });
    }
    Ok(())
}

/// Confidences for every patch (parallel over patches, order preserved).
pub fn dataset_confidences(
    dataset: &PatchDataset,
    encoder: &EncoderModel,
    cluster: &ClusterModel,
) -> Result<Vec<f64>> {
    let embeddings = encoder.embed(&dataset.patches);
    embeddings
        .par_iter()
        .map(|v| assignment_confidence(v, &cluster.centers).map(|(_, c)| c))
        .collect()
}

pub fn count_uncertain(confidences: &[f64], threshold: f64) -> usize {
    confidences.iter().filter(|&&c| c < threshold).count()
}

/// Batch REI over one dataset: the fraction of embeddings whose assignment
/// confidence falls below the model threshold.
pub fn rei_score(
    dataset: &PatchDataset,
    encoder: &EncoderModel,
    cluster: &ClusterModel,
) -> Result<REIReport> {
    check_binding(encoder, cluster)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset {
            context: format!("dataset `{}` has no patches", dataset.dataset_id),
        });
    }
    let (confidences, wall) = util::timed(|| dataset_confidences(dataset, encoder, cluster));
    let confidences = confidences?;
    let n_uncertain = count_uncertain(&confidences, cluster.threshold);
    Ok(REIReport {
        dataset_id: dataset.dataset_id.clone(),
        n_patches: confidences.len(),
        n_uncertain,
        rei: n_uncertain as f64 / confidences.len() as f64,
        eval_wall_seconds: wall,
        partial: None,
    })
}

/// Partial-rotation REI: `n_repeats` random starting angles, each scoring a
/// contiguous `delta_omega` segment. Top-level counts aggregate all repeats
/// (so `rei = n_uncertain / n_patches` holds exactly); the partial block
/// reports the per-repeat mean/min/max.
pub fn partial_rei(
    scan: &ScanSet,
    extraction: &ExtractionConfig,
    encoder: &EncoderModel,
    cluster: &ClusterModel,
    delta_omega: f64,
    n_repeats: usize,
    rng: &mut ChaCha8Rng,
) -> Result<REIReport> {
    check_binding(encoder, cluster)?;
    if n_repeats == 0 {
        return Err(Error::ConfigInvalid {
            field: "n_repeats".into(),
            reason: "must be >= 1".into(),
        });
    }
    let mut total_patches = 0usize;
    let mut total_uncertain = 0usize;
    let mut per_repeat = Vec::with_capacity(n_repeats);
    let mut wall = 0.0f64;
    for _ in 0..n_repeats {
        let begin: f64 = rng.gen_range(0.0..360.0);
        let segment = scan.slice_segment(begin, delta_omega)?;
        let (result, seconds) = util::timed(|| -> Result<(usize, usize)> {
            let ds = crate::peak_extract::extract_dataset(&segment, extraction)?;
            if ds.is_empty() {
                return Err(Error::EmptyDataset {
                    context: format!(
                        "segment at omega {begin:.3} (+{delta_omega}) of `{}`",
                        scan.scan_id()
                    ),
                });
            }
            let confidences = dataset_confidences(&ds, encoder, cluster)?;
            Ok((
                count_uncertain(&confidences, cluster.threshold),
                confidences.len(),
            ))
        });
        let (uncertain, patches) = result?;
        wall += seconds;
        total_patches += patches;
        total_uncertain += uncertain;
        per_repeat.push(uncertain as f64 / patches as f64);
    }
    let mean = per_repeat.iter().sum::<f64>() / per_repeat.len() as f64;
    let min = per_repeat.iter().copied().fold(f64::INFINITY, f64::min);
    let max = per_repeat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(REIReport {
        dataset_id: scan.scan_id().to_string(),
        n_patches: total_patches,
        n_uncertain: total_uncertain,
        rei: total_uncertain as f64 / total_patches as f64,
        eval_wall_seconds: wall,
        partial: Some(PartialBlock {
            delta_omega,
            n_repeats,
            rei_mean: mean,
            rei_min: min,
            rei_max: max,
        }),
    })
}

/// A sliding-window REI event: a score, or a gap when the window held no
/// patches at all.
#[derive(Clone, Debug, PartialEq)]
pub enum StreamEvent {
    Score {
        end_index: usize,
        end_omega: f64,
        rei: f64,
        n_patches: usize,
    },
    Gap {
        end_index: usize,
        end_omega: f64,
    },
}

impl StreamEvent {
    pub fn end_index(&self) -> usize {
        match self {
            StreamEvent::Score { end_index, .. } | StreamEvent::Gap { end_index, .. } => *end_index,
        }
    }

    pub fn rei(&self) -> Option<f64> {
        match self {
            StreamEvent::Score { rei, .. } => Some(*rei),
            StreamEvent::Gap { .. } => None,
        }
    }
}

/// Streaming REI over the most recent `window` frames, emitted every
/// `stride` frames. Memory is constant in stream length: only per-frame
/// (uncertain, total) counts are retained.
pub struct StreamScorer<'a> {
    encoder: &'a EncoderModel,
    cluster: &'a ClusterModel,
    extraction: ExtractionConfig,
    window: usize,
    stride: usize,
    counts: VecDeque<(usize, usize)>,
    frames_seen: usize,
}

impl<'a> StreamScorer<'a> {
    pub fn new(
        encoder: &'a EncoderModel,
        cluster: &'a ClusterModel,
        extraction: ExtractionConfig,
        window: usize,
        stride: usize,
    ) -> Result<Self> {
        check_binding(encoder, cluster)?;
        if window == 0 || stride == 0 {
            return Err(Error::ConfigInvalid {
                field: "window/stride".into(),
                reason: "both must be >= 1".into(),
            });
        }
        extraction.validate()?;
        Ok(Self {
            encoder,
            cluster,
            extraction,
            window,
            stride,
            counts: VecDeque::with_capacity(window + 1),
            frames_seen: 0,
        })
    }

    /// Consume one (dark-corrected) frame; emits an event whenever a full
    /// window aligns with the stride.
    pub fn push_frame(&mut self, frame: &Frame) -> Result<Option<StreamEvent>> {
        let (patches, _) = extract_frame(frame, &self.extraction);
        let (uncertain, total) = if patches.is_empty() {
            (0, 0)
        } else {
            let ds = PatchDataset {
                dataset_id: String::new(),
                patch_size: self.extraction.patch_size,
                patches,
                stats: Default::default(),
            };
            let confidences = dataset_confidences(&ds, self.encoder, self.cluster)?;
            (
                count_uncertain(&confidences, self.cluster.threshold),
                confidences.len(),
            )
        };
        self.counts.push_back((uncertain, total));
        if self.counts.len() > self.window {
            self.counts.pop_front();
        }
        self.frames_seen += 1;

        if self.frames_seen >= self.window && (self.frames_seen - self.window) % self.stride == 0 {
            let (unc, tot) = self
                .counts
                .iter()
                .fold((0usize, 0usize), |(a, b), &(u, t)| (a + u, b + t));
            let event = if tot == 0 {
                StreamEvent::Gap {
                    end_index: frame.index,
                    end_omega: frame.omega,
                }
            } else {
                StreamEvent::Score {
                    end_index: frame.index,
                    end_omega: frame.omega,
                    rei: unc as f64 / tot as f64,
                    n_patches: tot,
                }
            };
            return Ok(Some(event));
        }
        Ok(None)
    }
}

/// Run the stream scorer over every frame of a scan.
pub fn stream_rei(
    scan: &ScanSet,
    extraction: &ExtractionConfig,
    encoder: &EncoderModel,
    cluster: &ClusterModel,
    window: usize,
    stride: usize,
) -> Result<Vec<StreamEvent>> {
    let mut scorer = StreamScorer::new(encoder, cluster, extraction.clone(), window, stride)?;
    let mut events = Vec::new();
    for i in 0..scan.n_frames() {
        let corrected = scan.corrected_frame(i)?;
        if let Some(event) = scorer.push_frame(&corrected.frame)? {
            events.push(event);
        }
    }
    Ok(events)
}

// ------------------------------------------------------------- reporting

pub const REPORT_COLUMNS: [&str; 9] = [
    "dataset_id",
    "n_patches",
    "n_uncertain",
    "rei",
    "wall_s",
    "delta_omega",
    "rei_mean",
    "rei_min",
    "rei_max",
];

/// CSV rows for a report list; partial fields are empty in batch mode and
/// `wall_s` is empty when `include_timing` is false (deterministic output).
pub fn reports_csv(reports: &[REIReport], include_timing: bool) -> String {
    let mut out = String::new();
    out.push_str(&REPORT_COLUMNS.join(","));
    out.push('\n');
    for r in reports {
        let wall = if include_timing {
            r.eval_wall_seconds.to_string()
        } else {
            String::new()
        };
        let (dw, mean, min, max) = match &r.partial {
            Some(p) => (
                p.delta_omega.to_string(),
                p.rei_mean.to_string(),
                p.rei_min.to_string(),
                p.rei_max.to_string(),
            ),
            None => Default::default(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.dataset_id, r.n_patches, r.n_uncertain, r.rei, wall, dw, mean, min, max
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::byol::Encoder;
    use crate::peak_extract::PeakPatch;

    fn test_encoder(seed: u64) -> EncoderModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderModel {
            encoder: Encoder::init(&mut rng),
            patch_size: 9,
            seed,
            epochs_trained: 0,
            training_set_id: "ref".into(),
        }
    }

    fn blob(rng: &mut ChaCha8Rng, center: &[f32], spread: f32, n: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| c + rng.gen_range(-spread..spread))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn k1_center_is_the_coordinate_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vectors = blob(&mut rng, &[2.0, -1.0, 0.5], 1.0, 200);
        let centers = kmeans_fit(&vectors, 1, &mut rng, 300, 1e-9).unwrap();
        for j in 0..3 {
            let mean: f64 = vectors.iter().map(|v| f64::from(v[j])).sum::<f64>() / 200.0;
            assert!((f64::from(centers[0][j]) - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn two_blobs_recover_blob_means_within_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = blob(&mut rng, &[5.0, 5.0], 0.5, 150);
        let b = blob(&mut rng, &[-5.0, -5.0], 0.5, 130);
        let mean = |vs: &[Vec<f32>]| -> Vec<f64> {
            (0..2)
                .map(|j| vs.iter().map(|v| f64::from(v[j])).sum::<f64>() / vs.len() as f64)
                .collect()
        };
        let (ma, mb) = (mean(&a), mean(&b));
        let mut vectors = a;
        vectors.extend(b);
        let centers = kmeans_fit(&vectors, 2, &mut rng, 300, 1e-9).unwrap();
        // match centers to blobs by proximity
        let c0 = &centers[0];
        let (want0, want1) = if (f64::from(c0[0]) - ma[0]).abs() < (f64::from(c0[0]) - mb[0]).abs()
        {
            (&ma, &mb)
        } else {
            (&mb, &ma)
        };
        for j in 0..2 {
            assert!((f64::from(centers[0][j]) - want0[j]).abs() < 1e-6);
            assert!((f64::from(centers[1][j]) - want1[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn n_equals_k_gives_zero_inertia() {
        let vectors = vec![vec![0.0f32, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers = kmeans_fit(&vectors, 3, &mut rng, 300, 1e-9).unwrap();
        assert!(kmeans_inertia(&vectors, &centers) < 1e-12);
    }

    #[test]
    fn too_few_vectors_is_an_error() {
        let vectors = vec![vec![0.0f32; 4]; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            kmeans_fit(&vectors, 5, &mut rng, 10, 1e-6),
            Err(Error::TooFewVectors { n: 3, k: 5 })
        ));
    }

    #[test]
    fn inertia_is_monotone_non_increasing_across_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vectors = blob(&mut rng, &[0.0, 0.0, 0.0], 3.0, 120);
        vectors.extend(blob(&mut rng, &[6.0, -2.0, 1.0], 3.0, 120));
        // same seeding, increasing iteration budgets
        let mut last = f64::INFINITY;
        for iters in 1..12 {
            let mut fit_rng = ChaCha8Rng::seed_from_u64(42);
            let centers = kmeans_fit(&vectors, 6, &mut fit_rng, iters, 0.0).unwrap();
            let inertia = kmeans_inertia(&vectors, &centers);
            assert!(inertia <= last + 1e-9, "iter {iters}: {inertia} > {last}");
            last = inertia;
        }
    }

    #[test]
    fn confidence_unit_cases() {
        // equidistant from the two nearest centers -> 0
        let centers = vec![vec![0.0f32, 0.0], vec![2.0, 0.0]];
        let (_, c) = assignment_confidence(&[1.0, 0.0], &centers).unwrap();
        assert!(c.abs() < 1e-12);
        // exactly on a center with a distinct second -> 1
        let (id, c) = assignment_confidence(&[0.0, 0.0], &centers).unwrap();
        assert_eq!(id, 0);
        assert!((c - 1.0).abs() < 1e-12);
        // D1 = 3, D2 = 6 -> 0.5
        let centers = vec![vec![3.0f32, 0.0], vec![-6.0, 0.0]];
        let (_, c) = assignment_confidence(&[0.0, 0.0], &centers).unwrap();
        assert!((c - 0.5).abs() < 1e-7);
        // K = 1 -> 1 by convention
        let (_, c) = assignment_confidence(&[9.0, 9.0], &[vec![0.0, 0.0]]).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_invariant_under_center_permutation_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let centers: Vec<Vec<f32>> = (0..5)
                .map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let v: Vec<f32> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (_, c) = assignment_confidence(&v, &centers).unwrap();
            assert!((0.0..=1.0).contains(&c));

            let mut permuted = centers.clone();
            permuted.reverse();
            let (_, cp) = assignment_confidence(&v, &permuted).unwrap();
            assert!((c - cp).abs() < 1e-12);

            // translate every vector and center by the same offset
            let offset: Vec<f32> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let shifted_centers: Vec<Vec<f32>> = centers
                .iter()
                .map(|cv| cv.iter().zip(&offset).map(|(a, b)| a + b).collect())
                .collect();
            let shifted_v: Vec<f32> = v.iter().zip(&offset).map(|(a, b)| a + b).collect();
            let (_, cs) = assignment_confidence(&shifted_v, &shifted_centers).unwrap();
            assert!((c - cs).abs() < 1e-5, "{c} vs {cs}");
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let centers = vec![vec![0.0f32, 0.0]];
        assert!(matches!(
            assignment_confidence(&[0.0, 0.0, 0.0], &centers),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rei_counting_fractions() {
        let confidences = [0.9, 0.2, 0.8, 0.1, 0.3, 0.7, 0.6, 0.55, 0.95, 0.85];
        // 3 of 10 below 0.5 -> 0.3
        assert_eq!(count_uncertain(&confidences, 0.5), 3);
        // all confidences >= t -> rei 0
        assert_eq!(count_uncertain(&confidences, 0.05), 0);
    }

    fn tiny_dataset(seed: u64, n: usize) -> PatchDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatchDataset {
            dataset_id: format!("ds-{seed}"),
            patch_size: 9,
            patches: (0..n)
                .map(|i| PeakPatch {
                    pixels: (0..81).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    size: 9,
                    frame_index: i,
                    omega: i as f64,
                    centroid_row: 0.0,
                    centroid_col: 0.0,
                    raw_max: 10,
                    component_area: 4,
                })
                .collect(),
            stats: Default::default(),
        }
    }

    #[test]
    fn rei_score_counts_and_binds_models() {
        let encoder = test_encoder(11);
        let reference = tiny_dataset(1, 60);
        let cluster = fit_reference(&encoder, &reference, 5, 0.5, 99).unwrap();
        let report = rei_score(&reference, &encoder, &cluster).unwrap();
        assert_eq!(report.n_patches, 60);
        assert_eq!(
            report.rei,
            report.n_uncertain as f64 / report.n_patches as f64
        );
        assert!((0.0..=1.0).contains(&report.rei));
        assert!(report.partial.is_none());

        // different encoder -> ModelMismatch
        let other = test_encoder(12);
        assert!(matches!(
            rei_score(&reference, &other, &cluster),
            Err(Error::ModelMismatch { .. })
        ));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let encoder = test_encoder(11);
        let reference = tiny_dataset(1, 60);
        let cluster = fit_reference(&encoder, &reference, 5, 0.5, 99).unwrap();
        let empty = PatchDataset {
            dataset_id: "empty".into(),
            patch_size: 9,
            patches: Vec::new(),
            stats: Default::default(),
        };
        assert!(matches!(
            rei_score(&empty, &encoder, &cluster),
            Err(Error::EmptyDataset { .. })
        ));
    }

    #[test]
    fn cluster_model_file_round_trips() {
        let encoder = test_encoder(13);
        let reference = tiny_dataset(2, 40);
        let model = fit_reference(&encoder, &reference, 4, 0.5, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cluster.bin");
        model.save(&path).unwrap();
        let loaded = ClusterModel::load(&path).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn reports_csv_shapes() {
        let batch = REIReport {
            dataset_id: "a".into(),
            n_patches: 10,
            n_uncertain: 3,
            rei: 0.3,
            eval_wall_seconds: 0.5,
            partial: None,
        };
        let partial = REIReport {
            dataset_id: "b".into(),
            n_patches: 100,
            n_uncertain: 40,
            rei: 0.4,
            eval_wall_seconds: 1.5,
            partial: Some(PartialBlock {
                delta_omega: 40.0,
                n_repeats: 20,
                rei_mean: 0.41,
                rei_min: 0.35,
                rei_max: 0.47,
            }),
        };
        let csv = reports_csv(&[batch.clone(), partial], true);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("dataset_id,"));
        assert!(lines[1].contains(",,,,")); // empty partial fields
        assert!(lines[2].contains("40"));

        // deterministic mode leaves wall_s empty
        let csv = reports_csv(&[batch], false);
        assert!(csv.lines().nth(1).unwrap().contains("0.3,,"));
    }
}
