//! Fixtures shared by the criterion benchmarks in `benches/`.

use tagat_core::graph::build_all;
use tagat_core::{generate_population, Example, GraphOptions, LabeledGraph, Population, Result, SynthConfig};

/// One subject per task-scan, `rois` regions, 200 timepoints.
pub fn population(subjects: usize, rois: usize) -> Result<Population> {
    generate_population(&SynthConfig {
        n_subjects: subjects,
        n_tasks: 3,
        n_rois: rois,
        timepoints: 200,
        ..Default::default()
    })
}

pub fn graphs(pop: &Population) -> Result<Vec<LabeledGraph>> {
    build_all(&pop.scans, &GraphOptions::default())
}

pub fn examples(subjects: usize, rois: usize) -> Result<Vec<Example<f32>>> {
    Example::prepare(&graphs(&population(subjects, rois)?)?)
}
