//! Hyperparameter selection: the confidence-summation plateau picks the
//! epoch count; the (K, t) grid maximizes REI sensitivity between labeled
//! elastic-state and plastic-state dataset groups.

use crate::byol::EncoderModel;
use crate::cluster::{assignment_confidence, kmeans_fit, KMEANS_MAX_ITER, KMEANS_TOL};
use crate::peak_extract::PatchDataset;
use crate::util;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_PLATEAU_WINDOW: usize = 20;
pub const DEFAULT_PLATEAU_FRAC: f64 = 0.05;

/// First epoch count at which the trailing `window` of the confidence
/// curve has spread at most `frac` of the curve's total rise so far.
/// `None` while no plateau has appeared.
pub fn confidence_plateau(curve: &[f64], window: usize, frac: f64) -> Option<usize> {
    if curve.len() < window {
        return None;
    }
    let rise = {
        let max = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = curve.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    };
    for end in window..=curve.len() {
        let tail = &curve[end - window..end];
        let max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = tail.iter().copied().fold(f64::INFINITY, f64::min);
        if max - min <= frac * rise {
            return Some(end);
        }
    }
    None
}

/// Epoch count to train: the plateau point of the confidence-summation
/// curve, falling back to the final epoch when the curve never settles.
pub fn select_epochs(confidence_curve: &[f64], window: usize, frac: f64) -> Result<usize> {
    if confidence_curve.len() < window {
        return Err(Error::ShortLog {
            len: confidence_curve.len(),
            window,
        });
    }
    Ok(confidence_plateau(confidence_curve, window, frac).unwrap_or(confidence_curve.len()))
}

/// Separation between the post-onset minimum and pre-onset maximum REI,
/// normalized by the post-onset spread. Negative values mean the model
/// fails to detect the onset at that setting.
pub fn rei_sensitivity(rei_elastic: &[f64], rei_plastic: &[f64]) -> Result<f64> {
    if rei_elastic.is_empty() {
        return Err(Error::EmptyGroup {
            which: "elastic".into(),
        });
    }
    if rei_plastic.is_empty() {
        return Err(Error::EmptyGroup {
            which: "plastic".into(),
        });
    }
    let max_elastic = rei_elastic.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_plastic = rei_plastic.iter().copied().fold(f64::INFINITY, f64::min);
    let max_plastic = rei_plastic.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = max_plastic - min_plastic;
    if spread <= 0.0 {
        return Err(Error::PlasticSpreadZero);
    }
    Ok((min_plastic - max_elastic) / spread)
}

/// REI-sensitivity surface over (K, t). `cells[i][j]` pairs `ks[i]` with
/// `ts[j]`; undefined cells (zero plastic spread) hold NaN and are
/// reported as-is.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityGrid {
    pub ks: Vec<usize>,
    pub ts: Vec<f64>,
    pub cells: Vec<Vec<f64>>,
    /// No cell is positive: the model fails to separate the groups.
    pub all_negative: bool,
    pub elastic_ids: Vec<String>,
    pub plastic_ids: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSummary {
    pub best_k: usize,
    pub best_t: f64,
    pub best_value: f64,
    pub all_negative: bool,
    pub grid: SensitivityGrid,
}

impl SensitivityGrid {
    /// Argmax with ties broken toward smaller K, then smaller t.
    pub fn argmax(&self) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, &k) in self.ks.iter().enumerate() {
            for (j, &t) in self.ts.iter().enumerate() {
                let v = self.cells[i][j];
                if !v.is_finite() {
                    continue;
                }
                if best.map_or(true, |(_, _, bv)| v > bv) {
                    best = Some((k, t, v));
                }
            }
        }
        best
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("K,t,rei_sensitivity\n");
        for (i, &k) in self.ks.iter().enumerate() {
            for (j, &t) in self.ts.iter().enumerate() {
                let v = self.cells[i][j];
                if v.is_finite() {
                    out.push_str(&format!("{k},{t},{v}\n"));
                } else {
                    out.push_str(&format!("{k},{t},\n"));
                }
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.to_path_buf(), e))
    }
}

/// Evaluate the grid: one K-means fit per K (t only thresholds), then Eq.-2
/// style sensitivity per (K, t) from the labeled groups' REIs.
pub fn tune_grid(
    encoder: &EncoderModel,
    reference: &PatchDataset,
    elastic: &[PatchDataset],
    plastic: &[PatchDataset],
    ks: &[usize],
    ts: &[f64],
    seed: u64,
) -> Result<(SensitivityGrid, (usize, f64))> {
    if elastic.len() < 2 {
        return Err(Error::EmptyGroup {
            which: format!("elastic (need >= 2 volumes, got {})", elastic.len()),
        });
    }
    if plastic.len() < 2 {
        return Err(Error::EmptyGroup {
            which: format!("plastic (need >= 2 volumes, got {})", plastic.len()),
        });
    }
    if ks.is_empty() || ts.is_empty() {
        return Err(Error::ConfigInvalid {
            field: "ks/ts".into(),
            reason: "grid axes must be non-empty".into(),
        });
    }
    for &t in ts {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::ConfigInvalid {
                field: "ts".into(),
                reason: format!("threshold {t} outside [0, 1]"),
            });
        }
    }
    if reference.is_empty() {
        return Err(Error::EmptyDataset {
            context: "reference dataset is empty".into(),
        });
    }

    let reference_embeddings = encoder.embed(&reference.patches);
    let embed_group = |group: &[PatchDataset]| -> Vec<Vec<Vec<f32>>> {
        group.iter().map(|ds| encoder.embed(&ds.patches)).collect()
    };
    let elastic_embeddings = embed_group(elastic);
    let plastic_embeddings = embed_group(plastic);

    let mut cells = vec![vec![f64::NAN; ts.len()]; ks.len()];
    for (i, &k) in ks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(seed, &format!("grid-k{k}")));
        let centers = kmeans_fit(&reference_embeddings, k, &mut rng, KMEANS_MAX_ITER, KMEANS_TOL)?;
        let conf_of = |group: &[Vec<Vec<f32>>]| -> Result<Vec<Vec<f64>>> {
            group
                .iter()
                .map(|embs| {
                    embs.iter()
                        .map(|v| assignment_confidence(v, &centers).map(|(_, c)| c))
                        .collect()
                })
                .collect()
        };
        let elastic_conf = conf_of(&elastic_embeddings)?;
        let plastic_conf = conf_of(&plastic_embeddings)?;
        for (j, &t) in ts.iter().enumerate() {
            let rei_of = |confs: &[Vec<f64>]| -> Vec<f64> {
                confs
                    .iter()
                    .map(|c| {
                        crate::cluster::count_uncertain(c, t) as f64 / c.len().max(1) as f64
                    })
                    .collect()
            };
            match rei_sensitivity(&rei_of(&elastic_conf), &rei_of(&plastic_conf)) {
                Ok(v) => cells[i][j] = v,
                Err(Error::PlasticSpreadZero) => cells[i][j] = f64::NAN,
                Err(e) => return Err(e),
            }
        }
    }

    let all_negative = cells
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .all(|&v| v <= 0.0);
    let grid = SensitivityGrid {
        ks: ks.to_vec(),
        ts: ts.to_vec(),
        cells,
        all_negative,
        elastic_ids: elastic.iter().map(|d| d.dataset_id.clone()).collect(),
        plastic_ids: plastic.iter().map(|d| d.dataset_id.clone()).collect(),
    };
    let (k, t, _) = grid.argmax().ok_or(Error::PlasticSpreadZero)?;
    Ok((grid, (k, t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensitivity_arithmetic_examples() {
        // min_plastic 0.30, max_elastic 0.27, plastic spread 0.01 -> 3.0
        let elastic = [0.25, 0.27, 0.26];
        let plastic = [0.30, 0.31];
        let v = rei_sensitivity(&elastic, &plastic).unwrap();
        assert!((v - 3.0).abs() < 1e-9, "{v}");

        // min_plastic < max_elastic -> negative (fails to detect the onset)
        let elastic = [0.4, 0.5];
        let plastic = [0.3, 0.6];
        assert!(rei_sensitivity(&elastic, &plastic).unwrap() < 0.0);
    }

    #[test]
    fn sensitivity_error_cases() {
        assert!(matches!(
            rei_sensitivity(&[], &[0.1, 0.2]),
            Err(Error::EmptyGroup { .. })
        ));
        assert!(matches!(
            rei_sensitivity(&[0.1], &[]),
            Err(Error::EmptyGroup { .. })
        ));
        assert!(matches!(
            rei_sensitivity(&[0.1], &[0.3, 0.3]),
            Err(Error::PlasticSpreadZero)
        ));
        assert!(matches!(
            rei_sensitivity(&[0.1], &[0.3]),
            Err(Error::PlasticSpreadZero)
        ));
    }

    #[test]
    fn sensitivity_invariant_to_constant_shift() {
        let elastic = [0.2, 0.25];
        let plastic = [0.4, 0.5, 0.45];
        let base = rei_sensitivity(&elastic, &plastic).unwrap();
        let shift = 0.17;
        let elastic2: Vec<f64> = elastic.iter().map(|v| v + shift).collect();
        let plastic2: Vec<f64> = plastic.iter().map(|v| v + shift).collect();
        let shifted = rei_sensitivity(&elastic2, &plastic2).unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn plateau_on_flat_curve_is_the_window() {
        let curve = vec![5.0; 30];
        assert_eq!(confidence_plateau(&curve, 20, 0.05), Some(20));
        assert_eq!(select_epochs(&curve, 20, 0.05).unwrap(), 20);
    }

    #[test]
    fn monotone_curve_falls_back_to_final_epoch() {
        let curve: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(confidence_plateau(&curve, 20, 0.05), None);
        assert_eq!(select_epochs(&curve, 20, 0.05).unwrap(), 50);
    }

    #[test]
    fn short_log_is_an_error() {
        let curve = vec![1.0; 5];
        assert!(matches!(
            select_epochs(&curve, 20, 0.05),
            Err(Error::ShortLog { len: 5, window: 20 })
        ));
    }

    #[test]
    fn plateau_matches_brute_force_scan_on_noisy_curves() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            // saturating-exponential curve with noise: rises then flattens
            let n = 120;
            let tau = rng.gen_range(5.0..30.0);
            let noise = rng.gen_range(0.0..0.02);
            let curve: Vec<f64> = (0..n)
                .map(|i| {
                    let x = 1.0 - (-(i as f64) / tau).exp();
                    x + rng.gen_range(-noise..=noise)
                })
                .collect();
            let window = 15;
            let frac = 0.05;
            let got = select_epochs(&curve, window, frac).unwrap();

            // independent brute-force scan of every trailing window
            let rise = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - curve.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut want = n;
            'scan: for end in window..=n {
                let tail = &curve[end - window..end];
                let spread = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - tail.iter().cloned().fold(f64::INFINITY, f64::min);
                if spread <= frac * rise {
                    want = end;
                    break 'scan;
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn grid_argmax_prefers_smaller_k_then_smaller_t_on_ties() {
        let grid = SensitivityGrid {
            ks: vec![10, 20],
            ts: vec![0.3, 0.5],
            cells: vec![vec![1.0, 2.0], vec![2.0, 0.5]],
            all_negative: false,
            elastic_ids: vec![],
            plastic_ids: vec![],
        };
        // 2.0 appears at (10, 0.5) and (20, 0.3); smaller K wins
        let (k, t, v) = grid.argmax().unwrap();
        assert_eq!((k, t), (10, 0.5));
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_cell_grid_is_its_own_argmax() {
        let grid = SensitivityGrid {
            ks: vec![7],
            ts: vec![0.4],
            cells: vec![vec![-1.25]],
            all_negative: true,
            elastic_ids: vec![],
            plastic_ids: vec![],
        };
        let (k, t, v) = grid.argmax().unwrap();
        assert_eq!((k, t), (7, 0.4));
        assert!((v + 1.25).abs() < 1e-12);
    }
}
