//! Ground-truth-labeled synthetic diffraction scans.
//!
//! Spots are anisotropic Gaussians in a local (radial, azimuthal) frame on
//! detector rings, persisting over a window of rotation angles. Material
//! states and instrument effects enter as per-frame multipliers: azimuthal
//! smearing (slip analog), fragmentation into displaced shards (fracture
//! analog), and flux scaling, plus per-scan beam cropping and layout
//! (position) changes. Every rendered spot lands in `truth.json`, so the
//! extraction and scoring stages can be tested against exact ground truth.

use crate::frame_store::{Image, ScanManifest, ScanSet};
use crate::util;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const TRUTH_FILE: &str = "truth.json";
pub const SCENARIO_FILE: &str = "scenario.json";

/// One generated diffraction spot (before shattering/scheduling).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpotSpec {
    pub ring_radius: f64,
    pub azimuth_deg: f64,
    pub omega_center: f64,
    /// Spot persists on frames with |omega - omega_center| <= omega_width/2.
    pub omega_width: f64,
    pub amplitude: f64,
    pub sigma_radial: f64,
    pub sigma_azimuthal: f64,
}

/// Per-frame state multipliers; each list has length `n_frames` or 1.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StateSchedule {
    pub smear: Vec<f64>,
    pub fragment: Vec<f64>,
    pub flux: Vec<f64>,
}

impl StateSchedule {
    pub fn constant(smear: f64, fragment: f64, flux: f64) -> Self {
        Self {
            smear: vec![smear],
            fragment: vec![fragment],
            flux: vec![flux],
        }
    }

    /// Step schedule: `before` until `at` (exclusive), `after` from there on.
    pub fn smear_step(n_frames: usize, at: usize, before: f64, after: f64) -> Self {
        let smear = (0..n_frames)
            .map(|i| if i < at { before } else { after })
            .collect();
        Self {
            smear,
            fragment: vec![1.0],
            flux: vec![1.0],
        }
    }

    pub fn flux_step(n_frames: usize, at: usize, before: f64, after: f64) -> Self {
        let flux = (0..n_frames)
            .map(|i| if i < at { before } else { after })
            .collect();
        Self {
            smear: vec![1.0],
            fragment: vec![1.0],
            flux,
        }
    }

    fn at(values: &[f64], frame: usize) -> f64 {
        if values.len() == 1 {
            values[0]
        } else {
            values[frame]
        }
    }

    fn validate(&self, n_frames: usize) -> Result<()> {
        for (name, values) in [
            ("smear", &self.smear),
            ("fragment", &self.fragment),
            ("flux", &self.flux),
        ] {
            if values.len() != 1 && values.len() != n_frames {
                return Err(Error::ConfigInvalid {
                    field: format!("schedule.{name}"),
                    reason: format!(
                        "length {} must be 1 or n_frames ({n_frames})",
                        values.len()
                    ),
                });
            }
            if values.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::ConfigInvalid {
                    field: format!("schedule.{name}"),
                    reason: "multipliers must be >= 0".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticScanConfig {
    pub scan_id: String,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub omega_start: f64,
    pub omega_step: f64,
    pub n_spots: usize,
    pub ring_radii: Vec<f64>,
    pub sigma_radial: f64,
    pub sigma_azimuthal: f64,
    /// Per-spot multiplicative sigma jitter, uniform in [1-j, 1+j].
    pub sigma_jitter: f64,
    pub amplitude_range: (f64, f64),
    pub omega_width_range: (f64, f64),
    /// Spots whose omega windows overlap keep at least this center distance.
    pub min_spot_separation: f64,
    /// Poisson background mean in counts (0 disables noise).
    pub noise_floor: f64,
    /// Spot layout seed ("which grains diffract").
    pub seed: u64,
    /// Acquisition noise seed (varies between repeated scans of one layout).
    pub noise_seed: u64,
    pub schedule: StateSchedule,
    /// Illuminated fraction of the spot population (beam size analog).
    pub beam_keep_fraction: f64,
    /// Radial sigma scale from beam cropping (truncated grains).
    pub beam_sigma_scale: f64,
    pub state_label: String,
}

impl SyntheticScanConfig {
    /// A small full-circle scan; callers override what they need.
    pub fn base(scan_id: impl Into<String>, seed: u64) -> Self {
        Self {
            scan_id: scan_id.into(),
            width: 256,
            height: 256,
            n_frames: 240,
            omega_start: 0.0,
            omega_step: 1.5,
            n_spots: 500,
            ring_radii: vec![48.0, 72.0, 96.0],
            sigma_radial: 1.7,
            sigma_azimuthal: 2.1,
            sigma_jitter: 0.15,
            amplitude_range: (250.0, 2500.0),
            omega_width_range: (3.0, 6.0),
            min_spot_separation: 17.0,
            noise_floor: 2.0,
            seed,
            noise_seed: seed,
            schedule: StateSchedule::constant(1.0, 1.0, 1.0),
            beam_keep_fraction: 1.0,
            beam_sigma_scale: 1.0,
            state_label: "baseline".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &str, reason: String| {
            Err(Error::ConfigInvalid {
                field: field.into(),
                reason,
            })
        };
        if self.width == 0 || self.height == 0 {
            return invalid("width/height", "must be > 0".into());
        }
        if self.n_frames == 0 {
            return invalid("n_frames", "must be >= 1".into());
        }
        if !(self.omega_step > 0.0) || self.n_frames as f64 * self.omega_step > 360.0 + 1e-9 {
            return invalid(
                "omega_step",
                format!(
                    "need step > 0 and n_frames * step <= 360, got {} * {}",
                    self.n_frames, self.omega_step
                ),
            );
        }
        if self.ring_radii.is_empty() {
            return invalid("ring_radii", "must name at least one ring".into());
        }
        if !(self.sigma_radial > 0.0) || !(self.sigma_azimuthal > 0.0) {
            return invalid("sigma", "sigmas must be > 0".into());
        }
        if !(self.amplitude_range.0 > 0.0) || self.amplitude_range.1 < self.amplitude_range.0 {
            return invalid("amplitude_range", "need 0 < lo <= hi".into());
        }
        if !(self.beam_keep_fraction > 0.0 && self.beam_keep_fraction <= 1.0) {
            return invalid("beam_keep_fraction", "must be in (0, 1]".into());
        }
        if !(self.beam_sigma_scale > 0.0) {
            return invalid("beam_sigma_scale", "must be > 0".into());
        }
        self.schedule.validate(self.n_frames)?;
        Ok(())
    }

    fn detector_center(&self) -> (f64, f64) {
        (
            (self.height as f64 - 1.0) / 2.0,
            (self.width as f64 - 1.0) / 2.0,
        )
    }
}

/// One spot as actually rendered on one frame (post-schedule, post-shard).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RenderedSpot {
    pub parent: usize,
    pub shard: usize,
    pub row: f64,
    pub col: f64,
    pub amplitude: f64,
    pub sigma_radial: f64,
    pub sigma_azimuthal: f64,
    pub azimuth_deg: f64,
    pub ring_radius: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FrameTruth {
    pub frame: usize,
    pub omega: f64,
    pub spots: Vec<RenderedSpot>,
}

/// Per-frame ground truth for a generated scan.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TruthManifest {
    pub scan_id: String,
    pub seed: u64,
    pub spot_specs: Vec<SpotSpec>,
    pub frames: Vec<FrameTruth>,
}

pub fn save_truth(truth: &TruthManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(truth).expect("truth serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<TruthManifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn wrap180(x: f64) -> f64 {
    let v = x.rem_euclid(360.0);
    if v > 180.0 {
        v - 360.0
    } else {
        v
    }
}

/// Draw the spot population for a layout seed. Spots whose omega windows
/// overlap are rejection-sampled to keep `min_spot_separation` between
/// centers, so same-frame spots stay resolvable.
pub fn draw_spots(cfg: &SyntheticScanConfig) -> Vec<SpotSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (cy, cx) = cfg.detector_center();
    let mut spots: Vec<SpotSpec> = Vec::with_capacity(cfg.n_spots);
    let pos_of = |s: &SpotSpec| {
        let az = s.azimuth_deg.to_radians();
        (cy + s.ring_radius * az.sin(), cx + s.ring_radius * az.cos())
    };
    for _ in 0..cfg.n_spots {
        let mut candidate = None;
        for _attempt in 0..200 {
            let ring = cfg.ring_radii[rng.gen_range(0..cfg.ring_radii.len())];
            let azimuth = rng.gen_range(0.0..360.0);
            let omega_center = rng.gen_range(0.0..360.0);
            let omega_width = rng.gen_range(cfg.omega_width_range.0..=cfg.omega_width_range.1);
            let amplitude = rng.gen_range(cfg.amplitude_range.0..=cfg.amplitude_range.1);
            let jr = rng.gen_range(1.0 - cfg.sigma_jitter..=1.0 + cfg.sigma_jitter);
            let ja = rng.gen_range(1.0 - cfg.sigma_jitter..=1.0 + cfg.sigma_jitter);
            let spot = SpotSpec {
                ring_radius: ring,
                azimuth_deg: azimuth,
                omega_center,
                omega_width,
                amplitude,
                sigma_radial: cfg.sigma_radial * jr,
                sigma_azimuthal: cfg.sigma_azimuthal * ja,
            };
            let (r, c) = pos_of(&spot);
            let clash = spots.iter().any(|other| {
                let omega_gap = wrap180(other.omega_center - spot.omega_center).abs();
                if omega_gap > (other.omega_width + spot.omega_width) / 2.0 {
                    return false;
                }
                let (or, oc) = pos_of(other);
                let d2 = (or - r).powi(2) + (oc - c).powi(2);
                d2 < cfg.min_spot_separation * cfg.min_spot_separation
            });
            candidate = Some(spot);
            if !clash {
                break;
            }
        }
        spots.push(candidate.expect("at least one attempt"));
    }
    spots
}

struct Shard {
    amplitude_fraction: f64,
    radial_offset: f64,
    azimuthal_offset: f64,
    omega_offset: f64,
}

/// Deterministic shard set for a spot at fragmentation level `m`.
/// Amplitude fractions sum to one; in-plane displacements stay within
/// 1.5 sigma per axis; shards reorient in omega so they land on nearby
/// frames as separate, dimmer, unsmeared spots.
fn shards_for(cfg: &SyntheticScanConfig, spot_idx: usize, spot: &SpotSpec, m: usize) -> Vec<Shard> {
    if m <= 1 {
        return vec![Shard {
            amplitude_fraction: 1.0,
            radial_offset: 0.0,
            azimuthal_offset: 0.0,
            omega_offset: 0.0,
        }];
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, &format!("frag-{spot_idx}-{m}")));
    let mut weights: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    weights
        .into_iter()
        .enumerate()
        .map(|(j, amplitude_fraction)| Shard {
            amplitude_fraction,
            radial_offset: rng.gen_range(-1.5..1.5) * spot.sigma_radial,
            azimuthal_offset: rng.gen_range(-1.5..1.5) * spot.sigma_azimuthal,
            omega_offset: (j as f64 - (m as f64 - 1.0) / 2.0) * spot.omega_width
                + rng.gen_range(-0.3..0.3) * spot.omega_width,
        })
        .collect()
}

fn fragment_count(factor: f64) -> usize {
    (factor.round() as i64).clamp(1, 5) as usize
}

/// Spots rendered on frame `frame_idx` under the config's schedule.
pub fn frame_truth(cfg: &SyntheticScanConfig, spots: &[SpotSpec], frame_idx: usize) -> FrameTruth {
    let omega = cfg.omega_start + frame_idx as f64 * cfg.omega_step;
    let smear = StateSchedule::at(&cfg.schedule.smear, frame_idx);
    let fragment = StateSchedule::at(&cfg.schedule.fragment, frame_idx);
    let flux = StateSchedule::at(&cfg.schedule.flux, frame_idx);
    let kept = (cfg.beam_keep_fraction * cfg.n_spots as f64).ceil() as usize;
    let (cy, cx) = cfg.detector_center();

    let mut rendered = Vec::new();
    for (idx, spot) in spots.iter().take(kept).enumerate() {
        let m = fragment_count(fragment);
        for (shard_idx, shard) in shards_for(cfg, idx, spot, m).iter().enumerate() {
            let shard_omega = spot.omega_center + shard.omega_offset;
            if wrap180(omega - shard_omega).abs() > spot.omega_width / 2.0 {
                continue;
            }
            let az = spot.azimuth_deg.to_radians();
            let radius = spot.ring_radius + shard.radial_offset;
            let row = cy + radius * az.sin() + shard.azimuthal_offset * az.cos();
            let col = cx + radius * az.cos() - shard.azimuthal_offset * az.sin();
            rendered.push(RenderedSpot {
                parent: idx,
                shard: shard_idx,
                row,
                col,
                amplitude: spot.amplitude * shard.amplitude_fraction * flux,
                sigma_radial: spot.sigma_radial * cfg.beam_sigma_scale,
                sigma_azimuthal: spot.sigma_azimuthal * smear,
                azimuth_deg: spot.azimuth_deg,
                ring_radius: radius,
            });
        }
    }
    FrameTruth {
        frame: frame_idx,
        omega,
        spots: rendered,
    }
}

/// Render the noiseless signal field for one frame.
fn render_signal(cfg: &SyntheticScanConfig, truth: &FrameTruth, field: &mut [f64]) {
    field.fill(0.0);
    let (h, w) = (cfg.height, cfg.width);
    for spot in &truth.spots {
        let az = spot.azimuth_deg.to_radians();
        let (sin_a, cos_a) = (az.sin(), az.cos());
        let reach = 4.0 * spot.sigma_radial.max(spot.sigma_azimuthal);
        let r_lo = (spot.row - reach).floor().max(0.0) as usize;
        let r_hi = (spot.row + reach).ceil().min(h as f64 - 1.0) as usize;
        let c_lo = (spot.col - reach).floor().max(0.0) as usize;
        let c_hi = (spot.col + reach).ceil().min(w as f64 - 1.0) as usize;
        if r_lo > r_hi || c_lo > c_hi {
            continue;
        }
        let inv_r2 = 1.0 / (2.0 * spot.sigma_radial * spot.sigma_radial);
        let inv_a2 = 1.0 / (2.0 * spot.sigma_azimuthal * spot.sigma_azimuthal);
        for r in r_lo..=r_hi {
            let dr = r as f64 - spot.row;
            let row_slice = &mut field[r * w..(r + 1) * w];
            for (c, cell) in row_slice[c_lo..=c_hi].iter_mut().enumerate() {
                let dc = (c + c_lo) as f64 - spot.col;
                // project displacement onto the local (radial, azimuthal) axes
                let p_rad = dc * cos_a + dr * sin_a;
                let p_az = -dc * sin_a + dr * cos_a;
                *cell +=
                    spot.amplitude * (-(p_rad * p_rad * inv_r2 + p_az * p_az * inv_a2)).exp();
            }
        }
    }
}

/// Render one frame: deterministic signal plus Poisson background, rounded
/// and clipped to u16.
pub fn render_frame(
    cfg: &SyntheticScanConfig,
    spots: &[SpotSpec],
    frame_idx: usize,
) -> (Image, FrameTruth) {
    let truth = frame_truth(cfg, spots, frame_idx);
    let mut field = vec![0.0f64; cfg.height * cfg.width];
    render_signal(cfg, &truth, &mut field);

    let mut data: Vec<u16> = Vec::with_capacity(field.len());
    if cfg.noise_floor > 0.0 {
        // independent noise substream per (noise_seed, frame)
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        rng.set_stream(frame_idx as u64 + 1);
        let poisson = Poisson::new(cfg.noise_floor).expect("noise_floor > 0");
        for v in &field {
            let noise: f64 = poisson.sample(&mut rng);
            data.push((v + noise).round().clamp(0.0, 65535.0) as u16);
        }
    } else {
        for v in &field {
            data.push(v.round().clamp(0.0, 65535.0) as u16);
        }
    }
    (
        Image::new(cfg.height, cfg.width, data).expect("sized by construction"),
        truth,
    )
}

/// Generate a full scan with its ground-truth manifest. Deterministic in
/// `(seed, noise_seed)`; frames render in parallel on independent substreams.
pub fn generate_scan(cfg: &SyntheticScanConfig) -> Result<(ScanSet, TruthManifest)> {
    cfg.validate()?;
    util::init_workers();
    let spots = draw_spots(cfg);

    use rayon::prelude::*;
    let rendered: Vec<(Image, FrameTruth)> = (0..cfg.n_frames)
        .into_par_iter()
        .map(|i| render_frame(cfg, &spots, i))
        .collect();

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut truths = Vec::with_capacity(cfg.n_frames);
    for (img, t) in rendered {
        frames.push(img);
        truths.push(t);
    }

    let mut manifest = ScanManifest::new(&cfg.scan_id, cfg.width, cfg.height, cfg.n_frames);
    manifest.omega_start = cfg.omega_start;
    manifest.omega_step = cfg.omega_step;
    manifest
        .tags
        .insert("state_label".into(), cfg.state_label.clone());
    manifest
        .tags
        .insert("beam_size".into(), format!("{}", cfg.beam_keep_fraction));
    let scan = ScanSet::from_memory(manifest, frames, None)?;
    Ok((
        scan,
        TruthManifest {
            scan_id: cfg.scan_id.clone(),
            seed: cfg.seed,
            spot_specs: spots,
            frames: truths,
        },
    ))
}

// ------------------------------------------------------------- scenarios

/// Scenario families emulating in-situ series and instrument changes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Scenario {
    /// Azimuthal smearing ladder (crystallographic slip analog).
    Slip { smear_ladder: Vec<f64> },
    /// Fragmentation ladder (brittle fracture analog).
    Fracture { fragment_ladder: Vec<f64> },
    /// Constant flux levels per scan (incident beam drift analog).
    FluxDrift { flux_ladder: Vec<f64> },
    /// Start-angle offsets in degrees; scans differ only in omega_start.
    StartAngle { offsets_deg: Vec<f64> },
    /// Rotation step ladder; frame count adjusts to keep 360 coverage.
    RotationStep { steps_deg: Vec<f64> },
    /// Beam sizes in (0, 1]: crops the illuminated spot population and
    /// truncates radial extent.
    BeamSize { sizes: Vec<f64> },
    /// Fresh spot layouts at fixed state (sample position analog).
    Position { n_positions: usize },
}

impl Scenario {
    /// Parse a scenario by name with optional numeric parameters (empty
    /// slice selects the family's default ladder).
    pub fn from_name(name: &str, values: &[f64]) -> Result<Scenario> {
        let or_default = |def: Vec<f64>| {
            if values.is_empty() {
                def
            } else {
                values.to_vec()
            }
        };
        match name {
            "slip" => Ok(Scenario::Slip {
                smear_ladder: or_default(vec![1.0, 1.0, 1.2, 1.5, 2.0, 3.0]),
            }),
            "fracture" => Ok(Scenario::Fracture {
                fragment_ladder: or_default(vec![1.0, 1.0, 2.0, 3.0, 4.0, 5.0]),
            }),
            "flux" | "flux_drift" => Ok(Scenario::FluxDrift {
                flux_ladder: or_default(vec![1.0, 0.8, 0.6, 0.45, 0.3]),
            }),
            "start_angle" => Ok(Scenario::StartAngle {
                offsets_deg: or_default(vec![
                    0.125, -0.125, 0.25, -0.25, 0.314, -0.314, 0.628, -0.628,
                ]),
            }),
            "rotation_step" => Ok(Scenario::RotationStep {
                steps_deg: or_default(vec![1.5, 1.0, 2.0, 3.0]),
            }),
            "beam_size" => Ok(Scenario::BeamSize {
                sizes: or_default(vec![1.0, 0.75, 0.5, 0.35, 0.25]),
            }),
            "position" => Ok(Scenario::Position {
                n_positions: if values.is_empty() {
                    5
                } else {
                    values[0] as usize
                },
            }),
            other => Err(Error::UnknownScenario { name: other.into() }),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Scenario::Slip { .. } => "slip",
            Scenario::Fracture { .. } => "fracture",
            Scenario::FluxDrift { .. } => "flux_drift",
            Scenario::StartAngle { .. } => "start_angle",
            Scenario::RotationStep { .. } => "rotation_step",
            Scenario::BeamSize { .. } => "beam_size",
            Scenario::Position { .. } => "position",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedScan {
    pub label: String,
    pub config: SyntheticScanConfig,
    pub scan: ScanSet,
    pub truth: TruthManifest,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioScanSummary {
    pub scan_id: String,
    pub label: String,
    pub smear: f64,
    pub fragment: f64,
    pub flux: f64,
    pub beam_size: f64,
    pub omega_start: f64,
    pub omega_step: f64,
    pub layout_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub family: String,
    pub base_scan_id: String,
    pub scans: Vec<ScenarioScanSummary>,
}

fn slip_label(i: usize, smear: f64) -> String {
    if i == 0 {
        "baseline".into()
    } else if smear <= 1.0 {
        "elastic".into()
    } else if smear <= 1.5 {
        "transition".into()
    } else {
        "plastic".into()
    }
}

/// Materialize a labeled scan series for one scenario family. Scans reuse
/// the base layout (same grains) unless the family says otherwise;
/// acquisition noise differs per scan.
pub fn generate_experiment(
    base: &SyntheticScanConfig,
    scenario: &Scenario,
) -> Result<(Vec<GeneratedScan>, ScenarioManifest)> {
    base.validate()?;
    let mut configs: Vec<(String, SyntheticScanConfig)> = Vec::new();
    let scan_cfg = |i: usize| {
        let mut cfg = base.clone();
        cfg.scan_id = format!("{}-{}-{i:02}", base.scan_id, scenario.family_name());
        cfg.noise_seed = util::derive_seed(base.noise_seed, &format!("scan-{i}"));
        cfg
    };
    match scenario {
        Scenario::Slip { smear_ladder } => {
            for (i, &s) in smear_ladder.iter().enumerate() {
                let mut cfg = scan_cfg(i);
                cfg.schedule = StateSchedule::constant(s, 1.0, 1.0);
                cfg.state_label = slip_label(i, s);
                configs.push((cfg.state_label.clone(), cfg));
            }
        }
        Scenario::Fracture { fragment_ladder } => {
            for (i, &f) in fragment_ladder.iter().enumerate() {
                let mut cfg = scan_cfg(i);
                cfg.schedule = StateSchedule::constant(1.0, f, 1.0);
                cfg.state_label = if i == 0 {
                    "baseline".into()
                } else if fragment_count(f) <= 1 {
                    "elastic".into()
                } else {
                    "fracture".into()
                };
                configs.push((cfg.state_label.clone(), cfg));
            }
        }
        Scenario::FluxDrift { flux_ladder } => {
            for (i, &f) in flux_ladder.iter().enumerate() {
                let mut cfg = scan_cfg(i);
                cfg.schedule = StateSchedule::constant(1.0, 1.0, f);
                cfg.state_label = if i == 0 {
                    "baseline".into()
                } else {
                    format!("flux_{f}")
                };
                configs.push((cfg.state_label.clone(), cfg));
            }
        }
        Scenario::StartAngle { offsets_deg } => {
            for (i, &off) in offsets_deg.iter().enumerate() {
                let mut cfg = scan_cfg(i);
                cfg.omega_start = base.omega_start + off;
                cfg.state_label = format!("instrument_start_{off}");
                configs.push((cfg.state_label.clone(), cfg));
            }
        }
        Scenario::RotationStep { steps_deg } => {
            for (i, &step) in steps_deg.iter().enumerate() {
                if !(step > 0.0) {
                    return Err(Error::ConfigInvalid {
                        field: "steps_deg".into(),
                        reason: format!("step must be > 0, got {step}"),
                    });
                }
                let mut cfg = scan_cfg(i);
                let coverage = base.n_frames as f64 * base.omega_step;
                cfg.omega_step = step;
                cfg.n_frames = (coverage / step).round() as usize;
                cfg.state_label = format!("instrument_step_{step}");
                configs.push((cfg.state_label.clone(), cfg));
            }
        }
        Scenario::BeamSize { sizes } => {
            for (i, &size) in sizes.iter().enumerate() {
                let mut cfg = scan_cfg(i);
                cfg.beam_keep_fraction = size;
                cfg.beam_sigma_scale = 0.5 + 0.5 * size;
                cfg.state_label = format!("instrument_beam_{size}");
                configs.push((cfg.state_label.clone(), cfg));
            }
        }
        Scenario::Position { n_positions } => {
            if *n_positions == 0 {
                return Err(Error::ConfigInvalid {
                    field: "n_positions".into(),
                    reason: "must be >= 1".into(),
                });
            }
            for i in 0..*n_positions {
                let mut cfg = scan_cfg(i);
                if i > 0 {
                    cfg.seed = util::derive_seed(base.seed, &format!("position-{i}"));
                }
                cfg.state_label = format!("instrument_pos_{i}");
                configs.push((cfg.state_label.clone(), cfg));
            }
        }
    }

    let mut scans = Vec::with_capacity(configs.len());
    let mut summaries = Vec::with_capacity(configs.len());
    for (label, cfg) in configs {
        let (scan, truth) = generate_scan(&cfg)?;
        summaries.push(ScenarioScanSummary {
            scan_id: cfg.scan_id.clone(),
            label: label.clone(),
            smear: cfg.schedule.smear[0],
            fragment: cfg.schedule.fragment[0],
            flux: cfg.schedule.flux[0],
            beam_size: cfg.beam_keep_fraction,
            omega_start: cfg.omega_start,
            omega_step: cfg.omega_step,
            layout_seed: cfg.seed,
        });
        scans.push(GeneratedScan {
            label,
            config: cfg,
            scan,
            truth,
        });
    }
    Ok((
        scans,
        ScenarioManifest {
            family: scenario.family_name().to_string(),
            base_scan_id: base.scan_id.clone(),
            scans: summaries,
        },
    ))
}
