//! End-to-end orchestration: temporal thinning, the analysis pipeline with
//! plot-ready CSV emission, and streaming scoring of full trajectories
//! through a fitted model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{
    cut, euclidean_distance_matrix, great_circle_distance_matrix, ward_linkage, Dendrogram,
    LinkageVariant,
};
use crate::error::{Error, Result};
use crate::io::{
    write_model_json, CsvField, CsvWriter, ModelJson, TrajectoryReader,
};
use crate::markov::{
    average_transition_matrix, equilibrium, estimate_transition_matrix,
    final_location_probabilities, pool_transition_matrix, temporal_cluster, StateSequence,
    TransitionMatrix,
};
use crate::pca::{cumulative_variance, fit_shape_pca, variance_percentages};
use crate::pns::{pns_project, variance_by_component, PnsModel};
use crate::pnss::{
    choose_component_count, embed_on_sphere, fit_pnss, pnss_mean_shape, principal_arc,
    GpaDiagnostics, PnssModel,
};
use crate::procrustes::{
    gpa, opa_fit, riemannian_shape_distance, tangent_project, to_preshape, Configuration,
    PreShape,
};
use crate::sphere::SpherePoint;
use crate::synth::SyntheticSpec;

/// One simulation run: an ordered temporal sequence of configurations.
#[derive(Debug, Clone)]
pub struct Run {
    pub run_id: String,
    pub frames: Vec<Configuration>,
}

/// A set of runs sharing landmark count, dimension and frame count.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    pub runs: Vec<Run>,
    landmarks: usize,
    ambient_dim: usize,
    frame_count: usize,
}

impl TrajectoryDataset {
    pub fn new(runs: Vec<Run>) -> Result<Self> {
        let first = runs
            .first()
            .and_then(|r| r.frames.first())
            .ok_or_else(|| Error::Ingest("dataset contains no frames".into()))?;
        let landmarks = first.landmarks();
        let ambient_dim = first.ambient_dim();
        let frame_count = runs[0].frames.len();
        for run in &runs {
            if run.frames.len() != frame_count {
                return Err(Error::Dimension(format!(
                    "run {} has {} frames, expected {frame_count}",
                    run.run_id,
                    run.frames.len()
                )));
            }
            for f in &run.frames {
                if f.landmarks() != landmarks || f.ambient_dim() != ambient_dim {
                    return Err(Error::Dimension(format!(
                        "run {}: configuration is {}×{}, expected {landmarks}×{ambient_dim}",
                        run.run_id,
                        f.landmarks(),
                        f.ambient_dim()
                    )));
                }
            }
        }
        Ok(Self {
            runs,
            landmarks,
            ambient_dim,
            frame_count,
        })
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn total_frames(&self) -> usize {
        self.runs.len() * self.frame_count
    }
}

/// 1-based frame indices kept when thinning `frame_count` frames down to
/// `count`: 1 + round((i−1)·(frame_count−1)/(count−1)). When the stride
/// divides evenly this is an exact arithmetic progression.
pub fn thin_indices(frame_count: usize, count: usize) -> Result<Vec<usize>> {
    if count < 2 || count > frame_count {
        return Err(Error::Range(format!(
            "thin count {count} outside 2..={frame_count}"
        )));
    }
    let step = (frame_count - 1) as f64 / (count - 1) as f64;
    Ok((0..count)
        .map(|i| 1 + (i as f64 * step).round() as usize)
        .collect())
}

/// Keep `count` equally spaced frames of every run.
pub fn thin(dataset: &TrajectoryDataset, count: usize) -> Result<TrajectoryDataset> {
    let kept = thin_indices(dataset.frame_count(), count)?;
    let runs = dataset
        .runs
        .iter()
        .map(|run| Run {
            run_id: run.run_id.clone(),
            frames: kept.iter().map(|&i| run.frames[i - 1].clone()).collect(),
        })
        .collect();
    TrajectoryDataset::new(runs)
}

/// How the overall transition matrix pools runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Sum transition counts across runs, then normalize.
    Counts,
    /// Average the per-run probability matrices.
    Average,
}

/// Pipeline parameters. All fields have defaults; a TOML config file with
/// the same keys overrides them, and CLI flags override the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Frames kept per run by temporal thinning.
    pub thin_count: usize,
    /// Embedding dimension; when absent the variance rule picks it.
    pub p: Option<usize>,
    /// Cumulative-variance fraction for the automatic choice of p.
    pub variance_threshold: f64,
    /// Number of shape states for clustering.
    pub k_states: usize,
    /// Number of temporal clusters of runs.
    pub k_tc: usize,
    /// Principal-arc interval multiplier.
    pub c: f64,
    /// Samples per principal arc (odd, ≥ 3).
    pub arc_samples: usize,
    /// How many leading PNSS components get arc files.
    pub arc_components: usize,
    /// How many leading PC scores feed the PC-space clustering.
    pub pc_cluster_components: usize,
    /// Overall-matrix pooling mode.
    pub pool_mode: PoolMode,
    /// Linkage convention for all Ward clustering.
    pub linkage: LinkageVariant,
    /// Generator seed (used by `synthesize`; recorded for provenance).
    pub seed: u64,
    /// Worker threads; 0 leaves the global default.
    pub threads: usize,
    /// Output directory; the CLI flag overrides this.
    pub out: Option<PathBuf>,
    /// Parameters for the synthetic generator subcommand.
    pub synthesize: Option<SyntheticSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            thin_count: 100,
            p: None,
            variance_threshold: 0.9,
            k_states: 4,
            k_tc: 4,
            c: 1.0,
            arc_samples: 21,
            arc_components: 3,
            pc_cluster_components: 3,
            pool_mode: PoolMode::Counts,
            linkage: LinkageVariant::WardD,
            seed: 0,
            threads: 0,
            out: None,
            synthesize: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin_count < 2 {
            return Err(Error::Config("thin_count must be ≥ 2".into()));
        }
        if !(self.variance_threshold > 0.0 && self.variance_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "variance_threshold {} outside (0, 1]",
                self.variance_threshold
            )));
        }
        if self.k_states == 0 || self.k_tc == 0 {
            return Err(Error::Config("k_states and k_tc must be positive".into()));
        }
        if self.arc_samples < 3 || self.arc_samples.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "arc_samples {} must be odd and ≥ 3",
                self.arc_samples
            )));
        }
        if self.arc_components == 0 || self.pc_cluster_components == 0 {
            return Err(Error::Config(
                "arc_components and pc_cluster_components must be positive".into(),
            ));
        }
        if let Some(p) = self.p {
            if p < 2 {
                return Err(Error::Config(format!("p = {p} must be ≥ 2")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

/// Pipeline stages in execution order. Each stage persists its artifacts
/// before the next starts, so a failure leaves everything up to it on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    DistanceHistogram,
    Gpa,
    Pca,
    Embed,
    Pns,
    Cluster,
    Transitions,
    TemporalCluster,
    Arcs,
    ClusterRefit,
}

impl Stage {
    pub const LAST: Stage = Stage::ClusterRefit;
}

/// What the pipeline produced, for reporting.
#[derive(Debug, Clone, Default)]
pub struct PipelineSummary {
    pub observations: usize,
    pub chosen_p: Option<usize>,
    pub cluster_sizes: Vec<usize>,
    pub skipped_refits: Vec<usize>,
    pub files: Vec<PathBuf>,
    pub transition_mode_difference: Option<f64>,
}

/// Run the full pipeline.
pub fn run_pipeline(
    dataset: &TrajectoryDataset,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineSummary> {
    run_pipeline_through(dataset, config, out_dir, Stage::LAST)
}

/// Run the pipeline up to and including `through`.
pub fn run_pipeline_through(
    dataset: &TrajectoryDataset,
    config: &PipelineConfig,
    out_dir: &Path,
    through: Stage,
) -> Result<PipelineSummary> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    std::fs::create_dir_all(out_dir)?;
    let mut summary = PipelineSummary::default();

    // Thinning is definitional for everything downstream.
    let count = config.thin_count.min(dataset.frame_count());
    let kept = thin_indices(dataset.frame_count(), count).map_err(|e| e.in_stage("thin"))?;
    let thinned = thin(dataset, count).map_err(|e| e.in_stage("thin"))?;

    // Flatten run-major; observation i maps to (run, original frame index).
    let mut obs_run: Vec<usize> = Vec::with_capacity(thinned.total_frames());
    let mut obs_frame: Vec<usize> = Vec::with_capacity(thinned.total_frames());
    let mut configs: Vec<Configuration> = Vec::with_capacity(thinned.total_frames());
    for (ri, run) in thinned.runs.iter().enumerate() {
        for (fi, frame) in run.frames.iter().enumerate() {
            obs_run.push(ri);
            obs_frame.push(kept[fi]);
            configs.push(frame.clone());
        }
    }
    summary.observations = configs.len();
    let run_ids: Vec<&str> = thinned.runs.iter().map(|r| r.run_id.as_str()).collect();

    // ── distance histogram ─────────────────────────────────────────────
    {
        let stage = "distance-histogram";
        let mut times: Vec<usize> = vec![0, 1, count.saturating_sub(2), count - 1];
        times.sort_unstable();
        times.dedup();
        times.retain(|&t| t < count);
        let path = out_dir.join("distance_histogram.csv");
        let mut csv = CsvWriter::create(
            &path,
            &["time_index", "run_a", "run_b", "distance"],
        )
        .map_err(|e| e.in_stage(stage))?;
        for &t in &times {
            let frames: Vec<&Configuration> =
                thinned.runs.iter().map(|r| &r.frames[t]).collect();
            let pairs: Vec<(usize, usize)> = (0..frames.len())
                .flat_map(|a| ((a + 1)..frames.len()).map(move |b| (a, b)))
                .collect();
            let distances: Vec<f64> = pairs
                .par_iter()
                .map(|&(a, b)| riemannian_shape_distance(frames[a], frames[b]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage(stage))?;
            for (&(a, b), &d) in pairs.iter().zip(distances.iter()) {
                csv.row(&[
                    CsvField::UInt(kept[t] as u64),
                    run_ids[a].into(),
                    run_ids[b].into(),
                    d.into(),
                ])
                .map_err(|e| e.in_stage(stage))?;
            }
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);
    }
    if through < Stage::Gpa {
        return Ok(summary);
    }

    // ── GPA ────────────────────────────────────────────────────────────
    let gpa_result = gpa(&configs).map_err(|e| e.in_stage("gpa"))?;
    {
        let stage = "gpa";
        let mean_path = out_dir.join("procrustes_mean.csv");
        write_configuration_csv(&mean_path, &gpa_result.mean.to_configuration())
            .map_err(|e| e.in_stage(stage))?;
        summary.files.push(mean_path);

        let path = out_dir.join("fit_distances.csv");
        let mut csv = CsvWriter::create(&path, &["run_id", "frame_index", "distance", "unique"])
            .map_err(|e| e.in_stage(stage))?;
        for (i, fit) in gpa_result.fits.iter().enumerate() {
            csv.row(&[
                run_ids[obs_run[i]].into(),
                CsvField::UInt(obs_frame[i] as u64),
                fit.distance.into(),
                CsvField::UInt(fit.unique as u64),
            ])
            .map_err(|e| e.in_stage(stage))?;
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);
    }
    if through < Stage::Pca {
        return Ok(summary);
    }

    // ── shape PCA ──────────────────────────────────────────────────────
    let pca = fit_shape_pca(&gpa_result).map_err(|e| e.in_stage("pca"))?;
    {
        let stage = "pca";
        let path = out_dir.join("variance_pca.csv");
        let percents = variance_percentages(&pca);
        let cumulative = cumulative_variance(&pca);
        let mut csv = CsvWriter::create(&path, &["component", "percent", "cumulative"])
            .map_err(|e| e.in_stage(stage))?;
        for (i, (pct, cum)) in percents.iter().zip(cumulative.iter()).enumerate() {
            csv.row(&[CsvField::UInt(i as u64 + 1), (*pct).into(), (*cum).into()])
                .map_err(|e| e.in_stage(stage))?;
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);

        let path = out_dir.join("pc_scores.csv");
        let mut header: Vec<String> = vec!["run_id".into(), "frame_index".into()];
        for j in 1..=pca.retained {
            header.push(format!("pc{j}"));
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut csv =
            CsvWriter::create(&path, &header_refs).map_err(|e| e.in_stage(stage))?;
        for i in 0..pca.observations() {
            let mut row: Vec<CsvField> = vec![
                run_ids[obs_run[i]].into(),
                CsvField::UInt(obs_frame[i] as u64),
            ];
            for j in 0..pca.retained {
                row.push(pca.scores[(i, j)].into());
            }
            csv.row(&row).map_err(|e| e.in_stage(stage))?;
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);
    }
    if through < Stage::Embed {
        return Ok(summary);
    }

    // ── sphere embedding ───────────────────────────────────────────────
    let p = match config.p {
        Some(p) => p,
        None => choose_component_count(&pca, config.variance_threshold)
            .map_err(|e| e.in_stage("embed"))?,
    };
    summary.chosen_p = Some(p);
    let embedded = embed_on_sphere(&gpa_result, &pca, p).map_err(|e| e.in_stage("embed"))?;
    if through < Stage::Pns {
        return Ok(summary);
    }

    // ── PNS on the embedded points ─────────────────────────────────────
    let pns = crate::pns::pns_decompose(&embedded).map_err(|e| e.in_stage("pns"))?;
    let cut_point = std::f64::consts::PI * pns.final_scale;
    let model = PnssModel {
        gpa_info: GpaDiagnostics {
            iterations: gpa_result.iterations,
            objective: gpa_result.objective,
            observations: configs.len(),
            nonunique_fits: gpa_result.nonunique_fits(),
        },
        pca,
        p,
        embedded,
        pns,
        cut_point,
    };
    {
        let stage = "pns";
        let path = out_dir.join("model.json");
        write_model_json(&path, &ModelJson::from_model(&model)).map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);

        let path = out_dir.join("pnss_scores.csv");
        let mut header: Vec<String> = vec!["run_id".into(), "frame_index".into()];
        for j in 1..=model.p {
            header.push(format!("pnss{j}"));
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut csv = CsvWriter::create(&path, &header_refs).map_err(|e| e.in_stage(stage))?;
        for i in 0..model.scores().ncols() {
            let mut row: Vec<CsvField> = vec![
                run_ids[obs_run[i]].into(),
                CsvField::UInt(obs_frame[i] as u64),
            ];
            for j in 0..model.p {
                row.push(model.scores()[(j, i)].into());
            }
            csv.row(&row).map_err(|e| e.in_stage(stage))?;
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);

        let path = out_dir.join("variance_pnss.csv");
        let shares = variance_by_component(&model.pns).map_err(|e| e.in_stage(stage))?;
        let mut csv = CsvWriter::create(&path, &["component", "percent", "cumulative"])
            .map_err(|e| e.in_stage(stage))?;
        let mut acc = 0.0;
        for (i, share) in shares.iter().enumerate() {
            acc += share;
            csv.row(&[CsvField::UInt(i as u64 + 1), (*share).into(), acc.into()])
                .map_err(|e| e.in_stage(stage))?;
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);
    }
    if through < Stage::Cluster {
        return Ok(summary);
    }

    // ── clustering: on the sphere and in PC space ──────────────────────
    let labels_sphere = {
        let stage = "cluster";
        let n = model.embedded.len();
        if config.k_states > n {
            return Err(Error::Range(format!(
                "k_states {} exceeds {} observations",
                config.k_states, n
            ))
            .in_stage(stage));
        }
        let sphere_d =
            great_circle_distance_matrix(&model.embedded).map_err(|e| e.in_stage(stage))?;
        let sphere_dend = ward_linkage(&sphere_d, config.linkage);
        let labels_sphere = cut(&sphere_dend, config.k_states).map_err(|e| e.in_stage(stage))?;
        drop(sphere_d);

        let pc_cols = config.pc_cluster_components.min(model.pca.retained);
        let pc_rows = DMatrix::from_fn(n, pc_cols, |r, c| model.pca.scores[(r, c)]);
        let pc_d = euclidean_distance_matrix(&pc_rows).map_err(|e| e.in_stage(stage))?;
        let pc_dend = ward_linkage(&pc_d, config.linkage);
        let labels_pc = cut(&pc_dend, config.k_states).map_err(|e| e.in_stage(stage))?;
        drop(pc_d);

        let path = out_dir.join("clusters.csv");
        let mut csv = CsvWriter::create(
            &path,
            &["run_id", "frame_index", "cluster_sphere", "cluster_pc"],
        )
        .map_err(|e| e.in_stage(stage))?;
        for i in 0..n {
            csv.row(&[
                run_ids[obs_run[i]].into(),
                CsvField::UInt(obs_frame[i] as u64),
                CsvField::UInt(labels_sphere[i] as u64),
                CsvField::UInt(labels_pc[i] as u64),
            ])
            .map_err(|e| e.in_stage(stage))?;
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);

        for (name, dend) in [
            ("dendrogram_sphere.csv", &sphere_dend),
            ("dendrogram_pc.csv", &pc_dend),
        ] {
            let path = out_dir.join(name);
            write_dendrogram_csv(&path, dend).map_err(|e| e.in_stage(stage))?;
            summary.files.push(path);
        }

        let path = out_dir.join("visit_history.csv");
        let mut csv = CsvWriter::create(&path, &["run_id", "frame_index", "cluster"])
            .map_err(|e| e.in_stage(stage))?;
        for i in 0..n {
            csv.row(&[
                run_ids[obs_run[i]].into(),
                CsvField::UInt(obs_frame[i] as u64),
                CsvField::UInt(labels_sphere[i] as u64),
            ])
            .map_err(|e| e.in_stage(stage))?;
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);

        summary.cluster_sizes = (1..=config.k_states)
            .map(|c| labels_sphere.iter().filter(|&&l| l == c).count())
            .collect();
        labels_sphere
    };
    if through < Stage::Transitions {
        return Ok(summary);
    }

    // ── transition analysis ────────────────────────────────────────────
    let sequences: Vec<StateSequence> = {
        let stage = "transitions";
        let mut per_run: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..labels_sphere.len() {
            per_run.entry(obs_run[i]).or_default().push(labels_sphere[i]);
        }
        per_run
            .into_iter()
            .map(|(ri, labels)| {
                StateSequence::new(run_ids[ri].to_string(), labels, config.k_states)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage(stage))?
    };
    let per_run_mats: Vec<TransitionMatrix> =
        sequences.iter().map(estimate_transition_matrix).collect();
    {
        let stage = "transitions";
        let path = out_dir.join("transition_per_run.csv");
        let mut csv = CsvWriter::create(&path, &["run_id", "from", "to", "prob", "count"])
            .map_err(|e| e.in_stage(stage))?;
        for (seq, mat) in sequences.iter().zip(per_run_mats.iter()) {
            for from in 0..config.k_states {
                for to in 0..config.k_states {
                    csv.row(&[
                        seq.run_id.as_str().into(),
                        CsvField::UInt(from as u64 + 1),
                        CsvField::UInt(to as u64 + 1),
                        mat.probs()[(from, to)].into(),
                        CsvField::UInt(mat.counts()[(from, to)]),
                    ])
                    .map_err(|e| e.in_stage(stage))?;
                }
            }
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);

        let pooled = pool_transition_matrix(&sequences).map_err(|e| e.in_stage(stage))?;
        let averaged = average_transition_matrix(&sequences).map_err(|e| e.in_stage(stage))?;
        let difference = (pooled.probs() - averaged.probs()).abs().max();
        summary.transition_mode_difference = Some(difference);
        let overall = match config.pool_mode {
            PoolMode::Counts => &pooled,
            PoolMode::Average => &averaged,
        };

        for (name, mat) in [
            ("transition_overall.csv", overall),
            ("transition_pooled.csv", &pooled),
            ("transition_averaged.csv", &averaged),
        ] {
            let path = out_dir.join(name);
            write_transition_csv(&path, mat).map_err(|e| e.in_stage(stage))?;
            summary.files.push(path);
        }

        // Table-style pretty print at 4 decimal places.
        let path = out_dir.join("transition_overall.txt");
        let mut text = String::from("Overall transition matrix (rows: from, columns: to)\n");
        text.push_str(&format!(
            "pooling mode: {:?}; max |pooled − averaged| = {difference:.2e}\n\n    ",
            config.pool_mode
        ));
        for c in 0..config.k_states {
            text.push_str(&format!("{:>8}", c + 1));
        }
        text.push('\n');
        for r in 0..config.k_states {
            text.push_str(&format!("{:>4}", r + 1));
            for c in 0..config.k_states {
                text.push_str(&format!("  {:6.4}", overall.probs()[(r, c)]));
            }
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(Error::Io)?;
        summary.files.push(path);
    }
    if through < Stage::TemporalCluster {
        return Ok(summary);
    }

    // ── temporal clustering and equilibria ─────────────────────────────
    {
        let stage = "temporal-cluster";
        let k_tc = config.k_tc.min(per_run_mats.len());
        let tc = temporal_cluster(&per_run_mats, k_tc).map_err(|e| e.in_stage(stage))?;

        let path = out_dir.join("tc_labels.csv");
        let mut csv =
            CsvWriter::create(&path, &["run_id", "tc"]).map_err(|e| e.in_stage(stage))?;
        for (seq, &label) in sequences.iter().zip(tc.labels.iter()) {
            csv.row(&[seq.run_id.as_str().into(), CsvField::UInt(label as u64)])
                .map_err(|e| e.in_stage(stage))?;
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);

        // Equilibria: the overall chain plus one row per temporal cluster.
        let pooled = pool_transition_matrix(&sequences).map_err(|e| e.in_stage(stage))?;
        let overall_eq = equilibrium(&pooled).map_err(|e| e.in_stage(stage))?;
        let path = out_dir.join("equilibrium.csv");
        let mut header: Vec<String> = vec!["group".into()];
        for s in 1..=config.k_states {
            header.push(format!("cluster{s}"));
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut csv = CsvWriter::create(&path, &header_refs).map_err(|e| e.in_stage(stage))?;
        let mut overall_row: Vec<CsvField> = vec!["overall".into()];
        for v in overall_eq.probs().iter() {
            overall_row.push((*v).into());
        }
        csv.row(&overall_row).map_err(|e| e.in_stage(stage))?;
        for (t, eq) in tc.equilibria.iter().enumerate() {
            let mut row: Vec<CsvField> = vec![format!("tc{}", t + 1).as_str().into()];
            match eq {
                Some(eq) => {
                    for v in eq.probs().iter() {
                        row.push((*v).into());
                    }
                }
                None => {
                    // No unique equilibrium for this group's pooled chain.
                    for _ in 0..config.k_states {
                        row.push(f64::NAN.into());
                    }
                }
            }
            csv.row(&row).map_err(|e| e.in_stage(stage))?;
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);

        let final_probs = final_location_probabilities(&sequences, &tc.labels)
            .map_err(|e| e.in_stage(stage))?;
        let path = out_dir.join("final_locations.csv");
        let mut header: Vec<String> = vec!["tc".into()];
        for s in 1..=config.k_states {
            header.push(format!("cluster{s}"));
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut csv = CsvWriter::create(&path, &header_refs).map_err(|e| e.in_stage(stage))?;
        for (t, probs) in final_probs.iter().enumerate() {
            let mut row: Vec<CsvField> = vec![CsvField::UInt(t as u64 + 1)];
            for v in probs.iter() {
                row.push((*v).into());
            }
            csv.row(&row).map_err(|e| e.in_stage(stage))?;
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);
    }
    if through < Stage::Arcs {
        return Ok(summary);
    }

    // ── principal arcs and means ───────────────────────────────────────
    {
        let stage = "arcs";
        let path = out_dir.join("means.csv");
        let pnss_mean = pnss_mean_shape(&model).map_err(|e| e.in_stage(stage))?;
        let procrustes_mean = model.pca.mean.to_configuration();
        write_means_csv(&path, &[("pnss", &pnss_mean), ("procrustes", &procrustes_mean)])
            .map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);

        for j in 1..=config.arc_components.min(model.p) {
            let arc = principal_arc(&model, j, config.c, config.arc_samples)
                .map_err(|e| e.in_stage(stage))?;
            let path = out_dir.join(format!("arc_pnss{j}.csv"));
            write_arc_csv(&path, &arc.configurations, arc.s_j, config.c)
                .map_err(|e| e.in_stage(stage))?;
            summary.files.push(path);
        }
    }
    if through < Stage::ClusterRefit {
        return Ok(summary);
    }

    // ── per-cluster PNSS refits ────────────────────────────────────────
    {
        let stage = "cluster-refit";
        let path = out_dir.join("cluster_means.csv");
        let mut header: Vec<String> =
            vec!["cluster".into(), "mean_kind".into(), "landmark".into()];
        for c in 1..=thinned.ambient_dim() {
            header.push(format!("coord{c}"));
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut csv = CsvWriter::create(&path, &header_refs).map_err(|e| e.in_stage(stage))?;

        for cluster_label in 1..=config.k_states {
            let members: Vec<Configuration> = configs
                .iter()
                .zip(labels_sphere.iter())
                .filter(|(_, &l)| l == cluster_label)
                .map(|(c, _)| c.clone())
                .collect();
            // A refit needs enough members for its own GPA, PCA and PNS.
            if members.len() < 6 {
                summary.skipped_refits.push(cluster_label);
                continue;
            }
            let sub_p = p
                .min(members.len() - 2)
                .min(crate::pnss::embedding_dimension_bound(
                    thinned.landmarks(),
                    thinned.ambient_dim(),
                ) - 1)
                .max(2);
            let sub_model = match fit_pnss(&members, sub_p) {
                Ok(m) => m,
                Err(Error::Rank(_)) | Err(Error::Underdetermined { .. }) => {
                    summary.skipped_refits.push(cluster_label);
                    continue;
                }
                Err(e) => return Err(e.in_stage(stage)),
            };
            let sub_mean = pnss_mean_shape(&sub_model).map_err(|e| e.in_stage(stage))?;
            let sub_procrustes = sub_model.pca.mean.to_configuration();
            for (kind, config_mean) in [("pnss", &sub_mean), ("procrustes", &sub_procrustes)] {
                for r in 0..config_mean.landmarks() {
                    let mut row: Vec<CsvField> = vec![
                        CsvField::UInt(cluster_label as u64),
                        kind.into(),
                        CsvField::UInt(r as u64 + 1),
                    ];
                    for c in 0..config_mean.ambient_dim() {
                        row.push(config_mean.points()[(r, c)].into());
                    }
                    csv.row(&row).map_err(|e| e.in_stage(stage))?;
                }
            }

            let arc = principal_arc(&sub_model, 1, config.c, config.arc_samples)
                .map_err(|e| e.in_stage(stage))?;
            let arc_path = out_dir.join(format!("cluster{cluster_label}_arc_pnss1.csv"));
            write_arc_csv(&arc_path, &arc.configurations, arc.s_j, config.c)
                .map_err(|e| e.in_stage(stage))?;
            summary.files.push(arc_path);
        }
        csv.finish().map_err(|e| e.in_stage(stage))?;
        summary.files.push(path);
    }

    Ok(summary)
}

fn write_configuration_csv(path: &Path, config: &Configuration) -> Result<()> {
    let mut header: Vec<String> = vec!["landmark".into()];
    for c in 1..=config.ambient_dim() {
        header.push(format!("coord{c}"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = CsvWriter::create(path, &header_refs)?;
    for r in 0..config.landmarks() {
        let mut row: Vec<CsvField> = vec![CsvField::UInt(r as u64 + 1)];
        for c in 0..config.ambient_dim() {
            row.push(config.points()[(r, c)].into());
        }
        csv.row(&row)?;
    }
    csv.finish()
}

fn write_means_csv(path: &Path, means: &[(&str, &Configuration)]) -> Result<()> {
    let m = means[0].1.ambient_dim();
    let mut header: Vec<String> = vec!["mean_kind".into(), "landmark".into()];
    for c in 1..=m {
        header.push(format!("coord{c}"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = CsvWriter::create(path, &header_refs)?;
    for (kind, config) in means {
        for r in 0..config.landmarks() {
            let mut row: Vec<CsvField> = vec![(*kind).into(), CsvField::UInt(r as u64 + 1)];
            for c in 0..config.ambient_dim() {
                row.push(config.points()[(r, c)].into());
            }
            csv.row(&row)?;
        }
    }
    csv.finish()
}

fn write_arc_csv(path: &Path, configs: &[Configuration], s_j: f64, c_mult: f64) -> Result<()> {
    let m = configs[0].ambient_dim();
    let mut header: Vec<String> =
        vec!["sample".into(), "score_offset".into(), "landmark".into()];
    for c in 1..=m {
        header.push(format!("coord{c}"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = CsvWriter::create(path, &header_refs)?;
    let samples = configs.len();
    for (idx, config) in configs.iter().enumerate() {
        let t = idx as f64 / (samples - 1) as f64;
        let offset = -c_mult * s_j + 2.0 * c_mult * s_j * t;
        for r in 0..config.landmarks() {
            let mut row: Vec<CsvField> = vec![
                CsvField::UInt(idx as u64),
                offset.into(),
                CsvField::UInt(r as u64 + 1),
            ];
            for cc in 0..m {
                row.push(config.points()[(r, cc)].into());
            }
            csv.row(&row)?;
        }
    }
    csv.finish()
}

fn write_transition_csv(path: &Path, mat: &TransitionMatrix) -> Result<()> {
    let k = mat.state_count();
    let mut header: Vec<String> = vec!["from".into()];
    for c in 1..=k {
        header.push(format!("to{c}"));
    }
    header.push("row_support".into());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = CsvWriter::create(path, &header_refs)?;
    for r in 0..k {
        let mut row: Vec<CsvField> = vec![CsvField::UInt(r as u64 + 1)];
        for c in 0..k {
            row.push(mat.probs()[(r, c)].into());
        }
        row.push(CsvField::UInt(mat.row_support()[r] as u64));
        csv.row(&row)?;
    }
    csv.finish()
}

fn write_dendrogram_csv(path: &Path, dend: &Dendrogram) -> Result<()> {
    let mut csv = CsvWriter::create(path, &["step", "left", "right", "height", "size"])?;
    for (i, m) in dend.merges.iter().enumerate() {
        csv.row(&[
            CsvField::UInt(i as u64),
            CsvField::UInt(m.left as u64),
            CsvField::UInt(m.right as u64),
            m.height.into(),
            CsvField::UInt(m.size as u64),
        ])?;
    }
    csv.finish()
}

// ── streaming scorer ───────────────────────────────────────────────────

/// PNSS coordinates of one new configuration through fitted model parts.
pub fn score_configuration(
    mean: &PreShape,
    eigenvectors: &[DMatrix<f64>],
    pns: &PnsModel,
    config: &Configuration,
) -> Result<DVector<f64>> {
    let pre = to_preshape(config)?;
    let fit = opa_fit(&pre, mean)?;
    let tangent = tangent_project(&fit.fitted, mean)?;
    let t_norm = tangent.norm();
    let p = eigenvectors.len();
    let lambda: Vec<f64> = if t_norm < 1e-14 {
        vec![0.0; p]
    } else {
        eigenvectors
            .iter()
            .map(|v| (fit.distance / t_norm) * crate::procrustes::inner_product(&tangent, v))
            .collect()
    };
    let g = embed_lambda_point(&lambda)?;
    pns_project(pns, &g)
}

fn embed_lambda_point(lambda: &[f64]) -> Result<SpherePoint> {
    crate::pnss::embed_lambda(lambda)
}

/// Stream-score every frame of every trajectory file under `data_dir`,
/// writing the first `components` PNSS coordinates per frame. Frames are
/// processed in chunks so memory stays bounded; output order is the file
/// order and frame order of the input.
pub fn score_stream(
    mean: &PreShape,
    eigenvectors: &[DMatrix<f64>],
    pns: &PnsModel,
    data_dir: &Path,
    out_path: &Path,
    components: usize,
) -> Result<usize> {
    let components = components.clamp(1, eigenvectors.len());
    let files = crate::io::trajectory_files(data_dir)?;
    let mut header: Vec<String> = vec!["run_id".into(), "frame_index".into()];
    for j in 1..=components {
        header.push(format!("pnss{j}"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = CsvWriter::create(out_path, &header_refs)?;

    const CHUNK: usize = 1024;
    let mut total = 0usize;
    for path in &files {
        let run_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let mut reader = TrajectoryReader::open(path)?;
        let mut frame_index = 0usize;
        loop {
            let mut chunk = Vec::with_capacity(CHUNK);
            while chunk.len() < CHUNK {
                match reader.next_frame()? {
                    Some(f) => chunk.push(f),
                    None => break,
                }
            }
            if chunk.is_empty() {
                break;
            }
            let scores: Vec<DVector<f64>> = chunk
                .par_iter()
                .map(|c| score_configuration(mean, eigenvectors, pns, c))
                .collect::<Result<Vec<_>>>()?;
            for s in &scores {
                frame_index += 1;
                let mut row: Vec<CsvField> = vec![
                    run_id.as_str().into(),
                    CsvField::UInt(frame_index as u64),
                ];
                for j in 0..components {
                    row.push(s[j].into());
                }
                csv.row(&row)?;
            }
            total += scores.len();
        }
    }
    csv.finish()?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, SyntheticSpec};
    use tempfile::tempdir;

    #[test]
    fn thin_indices_match_formula() {
        assert_eq!(thin_indices(10, 4).unwrap(), vec![1, 4, 7, 10]);
        let identity = thin_indices(7, 7).unwrap();
        assert_eq!(identity, vec![1, 2, 3, 4, 5, 6, 7]);
        assert!(thin_indices(10, 1).is_err());
        assert!(thin_indices(10, 11).is_err());
    }

    #[test]
    fn thin_paper_fixture() {
        let kept = thin_indices(10_000, 100).unwrap();
        assert_eq!(kept.len(), 100);
        assert_eq!(kept[0], 1);
        assert_eq!(kept[1], 102);
        assert_eq!(kept[2], 203);
        assert_eq!(kept[98], 9899);
        assert_eq!(kept[99], 10_000);
        for w in kept.windows(2) {
            assert_eq!(w[1] - w[0], 101);
        }
    }

    #[test]
    fn config_defaults_validate() {
        let config = PipelineConfig::default();
        config.validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut config = PipelineConfig::default();
        config.arc_samples = 4;
        assert!(config.validate().is_err());
        config.arc_samples = 21;
        config.variance_threshold = 0.0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(
            &path,
            "thin_count = 50\nk_states = 3\nvariance_threshold = 0.85\nlinkage = \"ward-d2\"\n",
        )
        .unwrap();
        let config = PipelineConfig::load(&path).unwrap();
        assert_eq!(config.thin_count, 50);
        assert_eq!(config.k_states, 3);
        assert_eq!(config.linkage, LinkageVariant::WardD2);
        // Unset keys keep defaults.
        assert_eq!(config.k_tc, 4);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "thin_cuont = 50\n").unwrap();
        assert!(matches!(
            PipelineConfig::load(&path),
            Err(Error::Config(_))
        ));
    }

    fn small_pipeline_config() -> PipelineConfig {
        PipelineConfig {
            thin_count: 30,
            k_states: 3,
            k_tc: 2,
            arc_samples: 5,
            arc_components: 2,
            ..Default::default()
        }
    }

    fn small_synthetic() -> crate::synth::SyntheticDataset {
        synthesize(&SyntheticSpec {
            landmarks: 6,
            ambient_dim: 3,
            runs: 6,
            frames: 30,
            states: 3,
            dwell: 0.85,
            noise: 0.01,
            separation: 0.5,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn pipeline_produces_all_artifacts() {
        let data = small_synthetic();
        let dir = tempdir().unwrap();
        let summary =
            run_pipeline(&data.dataset, &small_pipeline_config(), dir.path()).unwrap();
        assert_eq!(summary.observations, 6 * 30);
        for name in [
            "distance_histogram.csv",
            "procrustes_mean.csv",
            "fit_distances.csv",
            "variance_pca.csv",
            "pc_scores.csv",
            "model.json",
            "pnss_scores.csv",
            "variance_pnss.csv",
            "clusters.csv",
            "dendrogram_sphere.csv",
            "dendrogram_pc.csv",
            "visit_history.csv",
            "transition_per_run.csv",
            "transition_overall.csv",
            "transition_pooled.csv",
            "transition_averaged.csv",
            "transition_overall.txt",
            "tc_labels.csv",
            "equilibrium.csv",
            "final_locations.csv",
            "means.csv",
            "arc_pnss1.csv",
            "arc_pnss2.csv",
            "cluster_means.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
    }

    #[test]
    fn pipeline_stage_gating() {
        let data = small_synthetic();
        let dir = tempdir().unwrap();
        run_pipeline_through(
            &data.dataset,
            &small_pipeline_config(),
            dir.path(),
            Stage::Pca,
        )
        .unwrap();
        assert!(dir.path().join("variance_pca.csv").exists());
        assert!(!dir.path().join("model.json").exists());
        assert!(!dir.path().join("clusters.csv").exists());
    }

    #[test]
    fn pipeline_rejects_oversized_p() {
        let data = small_synthetic();
        let dir = tempdir().unwrap();
        let config = PipelineConfig {
            p: Some(100),
            ..small_pipeline_config()
        };
        let err = run_pipeline(&data.dataset, &config, dir.path()).unwrap_err();
        match &err {
            Error::Stage { stage, source } => {
                assert_eq!(*stage, "embed");
                // The bound m(k−1) − m(m−1)/2 − 1 = 3·5 − 3 − 1 = 11 for
                // k=6, m=3 must be named.
                assert!(source.to_string().contains("11"), "got: {source}");
            }
            other => panic!("expected stage error, got {other}"),
        }
        // Artifacts up to the failed stage persist.
        assert!(dir.path().join("variance_pca.csv").exists());
    }

    #[test]
    fn scoring_matches_fit_coordinates() {
        let data = small_synthetic();
        let config = small_pipeline_config();
        let thinned = thin(&data.dataset, config.thin_count).unwrap();
        let configs: Vec<Configuration> = thinned
            .runs
            .iter()
            .flat_map(|r| r.frames.iter().cloned())
            .collect();
        let model = fit_pnss(&configs, 3).unwrap();
        for (i, c) in configs.iter().enumerate().step_by(17) {
            let scored = score_configuration(
                &model.pca.mean,
                &model.pca.eigenvectors[..model.p],
                &model.pns,
                c,
            )
            .unwrap();
            let stored = model.scores().column(i);
            for j in 0..model.p {
                assert!(
                    (scored[j] - stored[j]).abs() < 1e-8,
                    "obs {i} component {j}: {} vs {}",
                    scored[j],
                    stored[j]
                );
            }
        }
    }

    #[test]
    fn score_stream_covers_all_frames() {
        let data = small_synthetic();
        let dir = tempdir().unwrap();
        let data_dir = dir.path().join("data");
        crate::io::write_dataset(&data_dir, &data.dataset).unwrap();

        let thinned = thin(&data.dataset, 30).unwrap();
        let configs: Vec<Configuration> = thinned
            .runs
            .iter()
            .flat_map(|r| r.frames.iter().cloned())
            .collect();
        let model = fit_pnss(&configs, 3).unwrap();

        let out = dir.path().join("all_scores.csv");
        let total = score_stream(
            &model.pca.mean,
            &model.pca.eigenvectors[..model.p],
            &model.pns,
            &data_dir,
            &out,
            3,
        )
        .unwrap();
        assert_eq!(total, data.dataset.total_frames());
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 1 + total);
        assert!(text.lines().next().unwrap().starts_with("run_id,frame_index,pnss1"));
    }
}
