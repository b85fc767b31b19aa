//! Synthetic multi-task populations with planted signal.
//!
//! Every scan is an additive low-rank mixture: shared spatial maps driven by
//! scan-specific latent time courses, plus a gender map (present only when
//! the label is 1), a cognitive map scaled by the subject's score, a map
//! specific to the scan's task, and white noise. Planted maps are
//! orthogonalized when they fit, so task contexts are distinct.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ScanTimeSeries, TaskSet};
use crate::math::Matrix;
use crate::rng::{stream, DOMAIN_SYNTH};
use crate::train::{PartitionMap, NUM_PARTITIONS};

/// Number of shared (label-free) spatial components.
pub const SHARED_COMPONENTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_tasks: usize,
    pub n_rois: usize,
    pub timepoints: usize,
    pub gender_effect: f64,
    pub cog_effect: f64,
    pub task_effect: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 60,
            n_tasks: 3,
            n_rois: 20,
            timepoints: 100,
            gender_effect: 1.0,
            cog_effect: 1.0,
            task_effect: 1.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("subjects", self.n_subjects),
            ("tasks", self.n_tasks),
            ("rois", self.n_rois),
            ("timepoints", self.timepoints),
        ];
        for (name, v) in counts {
            if v < 2 {
                return Err(Error::InvalidConfig(format!("need at least 2 {name}, got {v}")));
            }
        }
        let effects = [
            ("gender_effect", self.gender_effect),
            ("cog_effect", self.cog_effect),
            ("task_effect", self.task_effect),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in effects {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Fixed spatial maps, one per row, each of length `n_rois`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patterns {
    pub shared: Matrix<f64>,
    pub gender: Vec<f64>,
    pub cog: Vec<f64>,
    pub tasks: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub tasks: TaskSet,
    pub scans: Vec<ScanTimeSeries>,
    /// Balanced round-robin assignment of subjects to partitions 1..=5.
    pub partitions: PartitionMap,
    pub patterns: Patterns,
}

pub fn subject_id(k: usize) -> String {
    format!("sub{:04}", k + 1)
}

fn gaussian_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Gram–Schmidt, then rescale each row to norm `√len` (unit RMS entries).
fn orthogonalize(rows: &mut [Vec<f64>]) {
    for k in 0..rows.len() {
        let (done, rest) = rows.split_at_mut(k);
        let v = &mut rest[0];
        for u in done.iter() {
            let d: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, a)| *x -= d * a);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
    }
    for v in rows.iter_mut() {
        let scale = (v.len() as f64).sqrt();
        v.iter_mut().for_each(|x| *x *= scale);
    }
}

fn make_patterns(config: &SynthConfig) -> Result<Patterns> {
    let n = config.n_rois;
    let mut rng = stream(config.seed, &[DOMAIN_SYNTH, 0]);
    let shared = gaussian_rows(&mut rng, SHARED_COMPONENTS, n);
    let mut planted = gaussian_rows(&mut rng, 2 + config.n_tasks, n);
    if planted.len() <= n {
        orthogonalize(&mut planted);
    }
    let tasks = planted.split_off(2);
    Ok(Patterns {
        shared: Matrix::from_rows(&shared)?,
        gender: planted[0].clone(),
        cog: planted[1].clone(),
        tasks: Matrix::from_rows(&tasks)?,
    })
}

pub fn generate_population(config: &SynthConfig) -> Result<Population> {
    config.validate()?;
    let tasks = TaskSet::canonical(config.n_tasks)?;
    let patterns = make_patterns(config)?;
    let labels: Vec<(u8, f64)> = (0..config.n_subjects)
        .map(|s| {
            let mut rng = stream(config.seed, &[DOMAIN_SYNTH, 1, s as u64]);
            let gender = u8::from(rng.random_bool(0.5));
            (gender, rng.random_range(0.0..=1.0))
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..config.n_subjects)
        .flat_map(|s| (0..config.n_tasks).map(move |m| (s, m)))
        .collect();
    let scans = jobs
        .par_iter()
        .map(|&(s, m)| {
            let (gender, cog) = labels[s];
            let data = scan_signal(config, &patterns, s, m, gender, cog);
            ScanTimeSeries::new(subject_id(s), tasks.by_index(m + 1)?, data, gender, cog)
        })
        .collect::<Result<Vec<_>>>()?;

    let partitions = (0..config.n_subjects)
        .map(|s| (subject_id(s), (s % NUM_PARTITIONS as usize) as u8 + 1))
        .collect();
    Ok(Population {
        tasks,
        scans,
        partitions,
        patterns,
    })
}

fn scan_signal(
    config: &SynthConfig,
    patterns: &Patterns,
    subject: usize,
    task: usize,
    gender: u8,
    cog: f64,
) -> Matrix<f64> {
    let n = config.n_rois;
    let mut rng = stream(config.seed, &[DOMAIN_SYNTH, 2, subject as u64, task as u64]);
    let planted: [(f64, &[f64]); 3] = [
        (config.gender_effect * f64::from(gender), &patterns.gender),
        (config.cog_effect * cog, &patterns.cog),
        (config.task_effect, patterns.tasks.row(task)),
    ];
    let mut data = Matrix::zeros(config.timepoints, n);
    for t in 0..config.timepoints {
        let row = data.row_mut(t);
        for k in 0..SHARED_COMPONENTS {
            let a: f64 = rng.sample(StandardNormal);
            row.iter_mut()
                .zip(patterns.shared.row(k))
                .for_each(|(x, &p)| *x += a * p);
        }
        for (effect, map) in planted {
            let a: f64 = rng.sample(StandardNormal);
            row.iter_mut().zip(map).for_each(|(x, &p)| *x += effect * a * p);
        }
        for x in row.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *x += config.noise_std * e;
        }
    }
    data
}
