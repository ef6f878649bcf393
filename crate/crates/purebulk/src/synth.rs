//! Synthetic cohorts with planted structure: per-subtype expression
//! programs, a shared normal background, known tumor purity, grade proxies,
//! and exponential survival with subtype-specific hazards. Every downstream
//! claim in the test suite gets its oracle from here.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::{ExpressionMatrix, GeneId, SampleKind, SampleMeta};
use crate::error::{Error, Result};

/// Subtype label attached to generated adjacent-normal samples. Matches the
/// reference category the dilution benchmark scores against.
pub const NORMAL_SUBTYPE: &str = "PN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_genes: usize,
    pub n_tumor: usize,
    pub n_normal: usize,
    pub n_subtypes: usize,
    /// Scale of the ±1 program loadings in linear expression space.
    pub program_strength: f64,
    /// Tumor purity is uniform on this inclusive range.
    pub purity_range: [f64; 2],
    pub noise_sd: f64,
    /// Log hazard multiplier per subtype (length n_subtypes).
    pub hazard_weights: Vec<f64>,
    /// Uniform censoring horizon in months; None disables censoring.
    pub censor_horizon: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_genes: 2000,
            n_tumor: 300,
            n_normal: 50,
            n_subtypes: 3,
            program_strength: 3.0,
            purity_range: [0.35, 0.95],
            noise_sd: 0.5,
            hazard_weights: vec![0.5, 0.0, -0.5],
            censor_horizon: Some(120.0),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subtypes < 2 {
            return Err(Error::InvalidInput("need at least 2 subtypes".into()));
        }
        if self.n_genes < self.n_subtypes {
            return Err(Error::InvalidInput(format!(
                "{} genes cannot carry {} distinguishable subtype programs",
                self.n_genes, self.n_subtypes
            )));
        }
        if self.n_tumor == 0 || self.n_normal == 0 {
            return Err(Error::InvalidInput(
                "need at least one tumor and one normal sample".into(),
            ));
        }
        let [lo, hi] = self.purity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidInput(format!(
                "purity range [{lo}, {hi}] must satisfy 0 <= low <= high <= 1"
            )));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::InvalidInput("noise sd must be non-negative".into()));
        }
        if self.hazard_weights.len() != self.n_subtypes {
            return Err(Error::InvalidInput(format!(
                "{} hazard weights for {} subtypes",
                self.hazard_weights.len(),
                self.n_subtypes
            )));
        }
        if let Some(h) = self.censor_horizon {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::InvalidInput(
                    "censoring horizon must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The planted ground truth behind a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    /// One ±program_strength sparse loading vector per subtype, over genes.
    pub programs: Vec<Array1<f64>>,
    /// The shared adjacent-normal program.
    pub normal_program: Array1<f64>,
    /// Genes (indices) carrying each subtype's program, disjoint per subtype.
    pub program_genes: Vec<Vec<usize>>,
    /// Per-tumor purity, aligned with tumor sample order.
    pub purity: Vec<f64>,
    /// Per-tumor subtype index.
    pub subtype_of: Vec<usize>,
}

/// Expression programs: one disjoint gene block per subtype plus one shared
/// normal block; within its block each gene is active with probability 1/2
/// and signed ±1, scaled by `program_strength`.
fn make_programs(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<Array1<f64>>, Array1<f64>, Vec<Vec<usize>>) {
    let n_blocks = cfg.n_subtypes + 1;
    let block = cfg.n_genes / n_blocks;
    let mut programs = Vec::with_capacity(cfg.n_subtypes);
    let mut program_genes = Vec::with_capacity(cfg.n_subtypes);
    let fill = |start: usize, rng: &mut ChaCha8Rng| -> (Array1<f64>, Vec<usize>) {
        let mut v = Array1::zeros(cfg.n_genes);
        let mut genes = Vec::new();
        for g in start..start + block {
            if rng.random::<f64>() < 0.5 {
                let sign = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
                v[g] = sign * cfg.program_strength;
                genes.push(g);
            }
        }
        (v, genes)
    };
    for s in 0..cfg.n_subtypes {
        let (v, genes) = fill(s * block, rng);
        programs.push(v);
        program_genes.push(genes);
    }
    let (normal_program, _) = fill(cfg.n_subtypes * block, rng);
    (programs, normal_program, program_genes)
}

/// Generate a full cohort: expression matrix (log2-transformed, metadata
/// attached) plus the planted truth used by oracle tests.
///
/// Tumor sample composition in linear space is
/// `purity·program(subtype) + (1−purity)·normal_program + noise`; adjacent
/// normals are `normal_program + noise`. A single global shift makes all
/// values non-negative before the log2(x+1) transform, so planted structure
/// survives intact.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<(ExpressionMatrix, PlantedTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let (programs, normal_program, program_genes) = make_programs(cfg, &mut rng);

    let mut purity_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    purity_rng.set_stream(1);
    let [lo, hi] = cfg.purity_range;
    let purity: Vec<f64> = (0..cfg.n_tumor)
        .map(|_| {
            if lo == hi {
                lo
            } else {
                purity_rng.random::<f64>() * (hi - lo) + lo
            }
        })
        .collect();
    let subtype_of: Vec<usize> = (0..cfg.n_tumor).map(|i| i % cfg.n_subtypes).collect();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let noise = if cfg.noise_sd > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sd).expect("validated sd"))
    } else {
        None
    };

    let n_total = cfg.n_tumor + cfg.n_normal;
    let mut values = Array2::zeros((n_total, cfg.n_genes));
    for i in 0..cfg.n_tumor {
        let p = purity[i];
        let prog = &programs[subtype_of[i]];
        for g in 0..cfg.n_genes {
            let mut v = p * prog[g] + (1.0 - p) * normal_program[g];
            if let Some(d) = &noise {
                v += noise_rng.sample(d);
            }
            values[[i, g]] = v;
        }
    }
    for i in 0..cfg.n_normal {
        for g in 0..cfg.n_genes {
            let mut v = normal_program[g];
            if let Some(d) = &noise {
                v += noise_rng.sample(d);
            }
            values[[cfg.n_tumor + i, g]] = v;
        }
    }

    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        values.mapv_inplace(|v| v - min);
    }
    values.mapv_inplace(|v| (v + 1.0).log2());

    // grade proxy: tertiles of purity x program_strength across tumors
    let grades = tertile_grades(&purity.iter().map(|p| p * cfg.program_strength).collect::<Vec<_>>());

    let gene_width = cfg.n_genes.to_string().len();
    let genes: Vec<GeneId> = (0..cfg.n_genes)
        .map(|g| GeneId::new(format!("G{:0width$}", g + 1, width = gene_width)).expect("valid id"))
        .collect();

    let id_width = n_total.to_string().len();
    let mut samples = Vec::with_capacity(n_total);
    for i in 0..cfg.n_tumor {
        let mut s = SampleMeta::new(
            format!("T{:0width$}", i + 1, width = id_width),
            SampleKind::Tumor,
        );
        s.subtype = Some(format!("S{}", subtype_of[i] + 1));
        s.grade = Some(grades[i]);
        samples.push(s);
    }
    for i in 0..cfg.n_normal {
        let mut s = SampleMeta::new(
            format!("N{:0width$}", i + 1, width = id_width),
            SampleKind::AdjacentNormal,
        );
        s.subtype = Some(NORMAL_SUBTYPE.to_string());
        s.grade = Some(0);
        samples.push(s);
    }

    let weights: BTreeMap<String, f64> = (0..cfg.n_subtypes)
        .map(|s| (format!("S{}", s + 1), cfg.hazard_weights[s]))
        .collect();
    generate_survival(&mut samples, &weights, cfg.censor_horizon, cfg.seed)?;

    let matrix = ExpressionMatrix::new(genes, samples, values)?;
    Ok((
        matrix,
        PlantedTruth {
            programs,
            normal_program,
            program_genes,
            purity,
            subtype_of,
        },
    ))
}

/// Grades 1..=3 from tertile ranks (ties broken by index, stable).
fn tertile_grades(score: &[f64]) -> Vec<u8> {
    let n = score.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].partial_cmp(&score[b]).expect("finite scores"));
    let mut grades = vec![1u8; n];
    for (rank, &i) in order.iter().enumerate() {
        grades[i] = (1 + rank * 3 / n.max(1)) as u8;
    }
    grades
}

/// Fill survival fields in place: exponential event times with rate
/// `exp(weight[subtype]) / 60` (so weight 0 means a 60-month mean), censored
/// uniformly on `[0, horizon]` when a horizon is given.
///
/// Samples whose subtype has no weight entry (e.g. adjacent normals) keep
/// empty survival fields.
pub fn generate_survival(
    samples: &mut [SampleMeta],
    weights: &BTreeMap<String, f64>,
    censor_horizon: Option<f64>,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    for s in samples.iter_mut() {
        let subtype = s.subtype.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!("sample {} has no subtype", s.sample_id))
        })?;
        let Some(&w) = weights.get(subtype) else {
            continue;
        };
        let rate = w.exp() / 60.0;
        let u: f64 = rng.random();
        let t = (-u.ln() / rate).max(1e-6);
        let (time, event) = match censor_horizon {
            Some(h) => {
                let c = rng.random::<f64>() * h;
                if t <= c {
                    (t, true)
                } else {
                    (c.max(1e-6), false)
                }
            }
            None => (t, true),
        };
        s.survival_time = Some(time);
        s.survival_event = Some(event);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{fit_multinomial_lr, index_labels, macro_f1};
    use crate::data::{split_cohort, StratifyField};
    use crate::survival::{km_curve, log_rank_test, SurvivalRecord};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_genes: 200,
            n_tumor: 90,
            n_normal: 20,
            n_subtypes: 3,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (a, _) = generate_cohort(&small(5)).unwrap();
        let (b, _) = generate_cohort(&small(5)).unwrap();
        assert_eq!(a.samples(), b.samples());
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn zero_noise_full_purity_gives_identical_subtype_rows() {
        let cfg = SynthConfig {
            noise_sd: 0.0,
            purity_range: [1.0, 1.0],
            ..small(6)
        };
        let (m, truth) = generate_cohort(&cfg).unwrap();
        for i in 0..cfg.n_tumor {
            for j in 0..cfg.n_tumor {
                if truth.subtype_of[i] == truth.subtype_of[j] {
                    assert_eq!(m.row(i), m.row(j), "rows {i} and {j}");
                }
            }
        }
    }

    #[test]
    fn zero_noise_zero_purity_matches_normals() {
        let cfg = SynthConfig {
            noise_sd: 0.0,
            purity_range: [0.0, 0.0],
            ..small(7)
        };
        let (m, _) = generate_cohort(&cfg).unwrap();
        let normal_row = m.row(cfg.n_tumor);
        for i in 0..cfg.n_tumor {
            assert_eq!(m.row(i), normal_row, "tumor row {i}");
        }
    }

    #[test]
    fn values_are_non_negative_after_transform() {
        let (m, _) = generate_cohort(&small(8)).unwrap();
        assert!(m.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn purity_increases_distance_from_normal() {
        // With zero noise every tumor gene moves monotonically away from its
        // normal value as purity grows, so distance to the (noise-free)
        // normal row must be strictly ordered by purity within a subtype.
        let cfg = SynthConfig {
            noise_sd: 0.0,
            ..small(9)
        };
        let (m, truth) = generate_cohort(&cfg).unwrap();
        let normal_row = m.row(cfg.n_tumor);
        let dist: Vec<f64> = (0..cfg.n_tumor)
            .map(|i| {
                m.row(i)
                    .iter()
                    .zip(normal_row.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        for i in 0..cfg.n_tumor {
            for j in 0..cfg.n_tumor {
                if truth.subtype_of[i] == truth.subtype_of[j] && truth.purity[i] < truth.purity[j]
                {
                    assert!(
                        dist[i] < dist[j],
                        "purity {} gave distance {} but purity {} gave {}",
                        truth.purity[i],
                        dist[i],
                        truth.purity[j],
                        dist[j]
                    );
                }
            }
        }
    }

    #[test]
    fn raw_data_is_linearly_separable_at_full_purity() {
        let cfg = SynthConfig {
            purity_range: [1.0, 1.0],
            ..SynthConfig::default()
        };
        let (m, _) = generate_cohort(&cfg).unwrap();
        // tumors only, split, fit on raw log2 expression
        let tumors: Vec<usize> = (0..cfg.n_tumor).collect();
        let t = m.subset_samples(&tumors).unwrap();
        let split = split_cohort(&t, 0.7, Some(StratifyField::Subtype), 1).unwrap();
        let labels: Vec<String> = t
            .samples()
            .iter()
            .map(|s| s.subtype.clone().unwrap())
            .collect();
        let (vocab, y) = index_labels(&labels);
        let train = t.subset_samples(&split.train_indices).unwrap();
        let test = t.subset_samples(&split.test_indices).unwrap();
        let y_train: Vec<usize> = split.train_indices.iter().map(|&i| y[i]).collect();
        let y_test: Vec<usize> = split.test_indices.iter().map(|&i| y[i]).collect();
        let model = fit_multinomial_lr(train.values(), &y_train, vocab.clone(), 1e-2).unwrap();
        let pred = model.predict(test.values()).unwrap();
        let f1 = macro_f1(&y_test, &pred, vocab.len()).unwrap();
        assert!(f1 >= 0.95, "macro-F1 {f1} below 0.95 on clean data");
    }

    fn records_of(m: &ExpressionMatrix, subtype: &str) -> Vec<SurvivalRecord> {
        m.samples()
            .iter()
            .filter(|s| s.subtype.as_deref() == Some(subtype))
            .filter_map(|s| match (s.survival_time, s.survival_event) {
                (Some(t), Some(e)) => Some(SurvivalRecord::new(t, e).unwrap()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn equal_hazards_are_exchangeable() {
        let mut non_sig = 0;
        let total = 100;
        for seed in 0..total {
            let cfg = SynthConfig {
                hazard_weights: vec![0.0, 0.0, 0.0],
                n_genes: 12, // expression is irrelevant here
                ..small(1000 + seed)
            };
            let (m, _) = generate_cohort(&cfg).unwrap();
            let a = records_of(&m, "S1");
            let b = records_of(&m, "S2");
            let r = log_rank_test(&a, &b).unwrap();
            if r.p > 0.01 {
                non_sig += 1;
            }
        }
        assert!(non_sig >= 95, "only {non_sig}/{total} null tests were non-significant");
    }

    #[test]
    fn tenfold_hazard_sinks_the_km_curve() {
        let cfg = SynthConfig {
            hazard_weights: vec![10.0f64.ln(), 0.0, 0.0],
            n_tumor: 300,
            n_genes: 12,
            ..small(55)
        };
        let (m, _) = generate_cohort(&cfg).unwrap();
        let fast = km_curve(&records_of(&m, "S1")).unwrap();
        let slow = km_curve(&records_of(&m, "S2")).unwrap();
        // compare survival at the pooled median follow-up time
        let mut all_times: Vec<f64> = fast.times.iter().chain(&slow.times).cloned().collect();
        all_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let t_med = all_times[all_times.len() / 2];
        let surv_at = |c: &crate::survival::KmCurve, t: f64| {
            let mut s = 1.0;
            for (ct, cs) in c.times.iter().zip(&c.survival) {
                if *ct <= t {
                    s = *cs;
                }
            }
            s
        };
        assert!(
            surv_at(&fast, t_med) < surv_at(&slow, t_med),
            "10x hazard curve is not below at median time"
        );
    }

    #[test]
    fn no_censoring_means_all_events() {
        let cfg = SynthConfig {
            censor_horizon: None,
            ..small(10)
        };
        let (m, _) = generate_cohort(&cfg).unwrap();
        for s in m.samples().iter().filter(|s| s.kind == SampleKind::Tumor) {
            assert_eq!(s.survival_event, Some(true));
        }
    }

    #[test]
    fn normals_have_grade_zero_and_no_survival() {
        let (m, _) = generate_cohort(&small(11)).unwrap();
        for s in m.samples().iter().filter(|s| s.kind == SampleKind::AdjacentNormal) {
            assert_eq!(s.grade, Some(0));
            assert_eq!(s.subtype.as_deref(), Some(NORMAL_SUBTYPE));
            assert_eq!(s.survival_time, None);
        }
    }

    #[test]
    fn grades_are_tertiles_of_purity() {
        let (m, truth) = generate_cohort(&small(12)).unwrap();
        let grades: Vec<u8> = m
            .samples()
            .iter()
            .take(truth.purity.len())
            .map(|s| s.grade.unwrap())
            .collect();
        // counts split as evenly as possible
        for g in 1..=3u8 {
            let count = grades.iter().filter(|&&x| x == g).count();
            assert!((count as i64 - 30).abs() <= 1, "grade {g} count {count}");
        }
        // higher-purity tumors never get lower grades
        for i in 0..grades.len() {
            for j in 0..grades.len() {
                if truth.purity[i] < truth.purity[j] {
                    assert!(grades[i] <= grades[j]);
                }
            }
        }
    }

    #[test]
    fn rejects_fewer_genes_than_subtypes() {
        let cfg = SynthConfig {
            n_genes: 2,
            n_subtypes: 3,
            hazard_weights: vec![0.0; 3],
            ..SynthConfig::default()
        };
        assert!(generate_cohort(&cfg).is_err());
    }
}
