//! File formats: the plain-text trajectory format, CSV emission and the
//! model JSON schema.
//!
//! Trajectory files are UTF-8 text, one file per run: a header line
//! `k m frames`, then each frame as k lines of m space-separated decimal
//! coordinates, frames separated by one blank line. Floats are written with
//! Rust's shortest round-trip formatting, so emitted files and CSVs parse
//! back to bit-identical values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Run, TrajectoryDataset};
use crate::pns::{PnsLevel, PnsModel};
use crate::pnss::PnssModel;
use crate::procrustes::{Configuration, PreShape};
use crate::sphere::SpherePoint;

/// Extension of trajectory files.
pub const TRAJECTORY_EXT: &str = "traj";

/// Write one run to a trajectory file.
pub fn write_run(path: &Path, frames: &[Configuration]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Range("cannot write a run with no frames".into()))?;
    let (k, m) = (first.landmarks(), first.ambient_dim());
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{k} {m} {}", frames.len())?;
    for (f, config) in frames.iter().enumerate() {
        if f > 0 {
            writeln!(w)?;
        }
        for r in 0..k {
            let row: Vec<String> = (0..m).map(|c| config.points()[(r, c)].to_string()).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write every run of a dataset as `<run_id>.traj` under `dir`.
pub fn write_dataset(dir: &Path, dataset: &TrajectoryDataset) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(dataset.runs.len());
    for run in &dataset.runs {
        let path = dir.join(format!("{}.{TRAJECTORY_EXT}", run.run_id));
        write_run(&path, &run.frames)?;
        paths.push(path);
    }
    Ok(paths)
}

struct LineSource {
    reader: BufReader<File>,
    line_no: usize,
}

impl LineSource {
    fn next_line(&mut self) -> Result<Option<String>> {
        let mut buf = String::new();
        let read = self.reader.read_line(&mut buf)?;
        if read == 0 {
            return Ok(None);
        }
        self.line_no += 1;
        while buf.ends_with('\n') || buf.ends_with('\r') {
            buf.pop();
        }
        Ok(Some(buf))
    }
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Ingest(format!("{}:{line}: {msg}", path.display()))
}

/// Streaming reader over the frames of one trajectory file.
pub struct TrajectoryReader {
    path: PathBuf,
    source: LineSource,
    pub landmarks: usize,
    pub ambient_dim: usize,
    pub frames: usize,
    read_so_far: usize,
}

impl TrajectoryReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut source = LineSource {
            reader: BufReader::new(file),
            line_no: 0,
        };
        let header = source
            .next_line()?
            .ok_or_else(|| parse_err(path, 1, "empty file; expected header `k m frames`"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                source.line_no,
                format!("header must be `k m frames`, got {fields:?}"),
            ));
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| parse_err(path, 1, format!("cannot parse {what} from `{s}`")))
        };
        let landmarks = parse_usize(fields[0], "landmark count")?;
        let ambient_dim = parse_usize(fields[1], "ambient dimension")?;
        let frames = parse_usize(fields[2], "frame count")?;
        if ambient_dim < 2 || landmarks <= ambient_dim {
            return Err(parse_err(
                path,
                1,
                format!("need k > m ≥ 2, header says k={landmarks}, m={ambient_dim}"),
            ));
        }
        Ok(Self {
            path: path.to_path_buf(),
            source,
            landmarks,
            ambient_dim,
            frames,
            read_so_far: 0,
        })
    }

    /// Read the next frame, or `None` after the declared count.
    pub fn next_frame(&mut self) -> Result<Option<Configuration>> {
        if self.read_so_far == self.frames {
            // Allow trailing blank lines, reject trailing data.
            while let Some(line) = self.source.next_line()? {
                if !line.trim().is_empty() {
                    return Err(parse_err(
                        &self.path,
                        self.source.line_no,
                        format!("data after the declared {} frames", self.frames),
                    ));
                }
            }
            return Ok(None);
        }
        if self.read_so_far > 0 {
            match self.source.next_line()? {
                Some(line) if line.trim().is_empty() => {}
                Some(_) => {
                    return Err(parse_err(
                        &self.path,
                        self.source.line_no,
                        "expected a blank line between frames",
                    ))
                }
                None => {
                    return Err(parse_err(
                        &self.path,
                        self.source.line_no + 1,
                        format!(
                            "file ends after {} of {} frames",
                            self.read_so_far, self.frames
                        ),
                    ))
                }
            }
        }
        let mut points = DMatrix::zeros(self.landmarks, self.ambient_dim);
        for r in 0..self.landmarks {
            let line = self.source.next_line()?.ok_or_else(|| {
                parse_err(
                    &self.path,
                    self.source.line_no + 1,
                    format!(
                        "file ends inside frame {} (landmark {} of {})",
                        self.read_so_far + 1,
                        r + 1,
                        self.landmarks
                    ),
                )
            })?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != self.ambient_dim {
                return Err(parse_err(
                    &self.path,
                    self.source.line_no,
                    format!(
                        "expected {} coordinates, found {}",
                        self.ambient_dim,
                        fields.len()
                    ),
                ));
            }
            for (c, field) in fields.iter().enumerate() {
                points[(r, c)] = field.parse().map_err(|_| {
                    parse_err(
                        &self.path,
                        self.source.line_no,
                        format!("cannot parse coordinate `{field}`"),
                    )
                })?;
            }
        }
        self.read_so_far += 1;
        let config = Configuration::new(points).map_err(|e| {
            parse_err(
                &self.path,
                self.source.line_no,
                format!("frame {} is invalid: {e}", self.read_so_far),
            )
        })?;
        Ok(Some(config))
    }
}

/// Trajectory files of a directory, sorted by file name.
pub fn trajectory_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.is_file() && p.extension().map(|e| e == TRAJECTORY_EXT).unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Ingest(format!(
            "no .{TRAJECTORY_EXT} files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

/// Parse a whole directory of per-run trajectory files. Parse failures are
/// fatal per file and aggregated into one report.
pub fn ingest(dir: &Path) -> Result<TrajectoryDataset> {
    let files = trajectory_files(dir)?;
    let mut runs = Vec::with_capacity(files.len());
    let mut failures: Vec<String> = Vec::new();
    for path in &files {
        let run_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let parse_one = || -> Result<Run> {
            let mut reader = TrajectoryReader::open(path)?;
            let mut frames = Vec::with_capacity(reader.frames);
            while let Some(frame) = reader.next_frame()? {
                frames.push(frame);
            }
            if frames.is_empty() {
                return Err(parse_err(path, 1, "run declares zero frames"));
            }
            Ok(Run {
                run_id: run_id.clone(),
                frames,
            })
        };
        match parse_one() {
            Ok(run) => runs.push(run),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Ingest(failures.join("\n")));
    }
    TrajectoryDataset::new(runs)
}

/// A CSV writer that formats floats with shortest round-trip precision.
pub struct CsvWriter {
    writer: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut writer = BufWriter::new(File::create(path)?);
        writeln!(writer, "{}", header.join(","))?;
        Ok(Self { writer })
    }

    pub fn row(&mut self, fields: &[CsvField]) -> Result<()> {
        let cells: Vec<String> = fields.iter().map(|f| f.render()).collect();
        writeln!(self.writer, "{}", cells.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// A single CSV cell.
pub enum CsvField {
    Str(String),
    Int(i64),
    UInt(u64),
    Float(f64),
}

impl CsvField {
    fn render(&self) -> String {
        match self {
            CsvField::Str(s) => s.clone(),
            CsvField::Int(i) => i.to_string(),
            CsvField::UInt(u) => u.to_string(),
            CsvField::Float(f) => f.to_string(),
        }
    }
}

impl From<&str> for CsvField {
    fn from(s: &str) -> Self {
        CsvField::Str(s.to_string())
    }
}

impl From<f64> for CsvField {
    fn from(f: f64) -> Self {
        CsvField::Float(f)
    }
}

impl From<usize> for CsvField {
    fn from(u: usize) -> Self {
        CsvField::UInt(u as u64)
    }
}

// ── model JSON ──────────────────────────────────────────────────────────

/// Serialized form of a fitted model. Arrays are explicit nested lists;
/// matrices are row-major lists of rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelJson {
    pub format_version: u32,
    pub gpa: GpaJson,
    pub pca: PcaJson,
    pub pns: PnsJson,
    pub pnss: PnssJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpaJson {
    pub landmarks: usize,
    pub ambient_dim: usize,
    pub observations: usize,
    pub iterations: usize,
    pub objective: f64,
    pub nonunique_fits: usize,
    /// Mean pre-shape X̄, (k−1)×m.
    pub mean: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaJson {
    /// All eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub retained: usize,
    /// The first p eigenvector matrices, each (k−1)×m.
    pub eigenvectors: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PnsLevelJson {
    pub axis: Vec<f64>,
    pub radius: f64,
    pub rotation_to_pole: Vec<Vec<f64>>,
    pub scale_in: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PnsJson {
    pub levels: Vec<PnsLevelJson>,
    pub final_mean_angle: f64,
    pub final_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PnssJson {
    pub p: usize,
    pub cut_point: f64,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows
        .first()
        .ok_or_else(|| Error::Serialize("empty matrix in model JSON".into()))?
        .len();
    for row in rows {
        if row.len() != ncols {
            return Err(Error::Serialize("ragged matrix in model JSON".into()));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

impl ModelJson {
    pub fn from_model(model: &PnssModel) -> Self {
        Self {
            format_version: 1,
            gpa: GpaJson {
                landmarks: model.landmarks(),
                ambient_dim: model.ambient_dim(),
                observations: model.gpa_info.observations,
                iterations: model.gpa_info.iterations,
                objective: model.gpa_info.objective,
                nonunique_fits: model.gpa_info.nonunique_fits,
                mean: matrix_to_rows(model.pca.mean.matrix()),
            },
            pca: PcaJson {
                eigenvalues: model.pca.eigenvalues.clone(),
                retained: model.pca.retained,
                eigenvectors: model.pca.eigenvectors[..model.p]
                    .iter()
                    .map(matrix_to_rows)
                    .collect(),
            },
            pns: PnsJson {
                levels: model
                    .pns
                    .levels
                    .iter()
                    .map(|l| PnsLevelJson {
                        axis: l.axis.coords().iter().copied().collect(),
                        radius: l.radius,
                        rotation_to_pole: matrix_to_rows(&l.rotation_to_pole),
                        scale_in: l.scale_in,
                    })
                    .collect(),
                final_mean_angle: model.pns.final_mean_angle,
                final_scale: model.pns.final_scale,
            },
            pnss: PnssJson {
                p: model.p,
                cut_point: model.cut_point,
            },
        }
    }

    /// Rebuild the parts needed to score new configurations: the mean, the
    /// first p eigenvectors and the PNS chain (without per-observation
    /// coordinates).
    pub fn to_scoring_parts(&self) -> Result<(PreShape, Vec<DMatrix<f64>>, PnsModel)> {
        let mean = PreShape::new(rows_to_matrix(&self.gpa.mean)?)?;
        let eigenvectors: Vec<DMatrix<f64>> = self
            .pca
            .eigenvectors
            .iter()
            .map(|rows| rows_to_matrix(rows))
            .collect::<Result<Vec<_>>>()?;
        if eigenvectors.len() != self.pnss.p {
            return Err(Error::Serialize(format!(
                "model stores {} eigenvectors but p = {}",
                eigenvectors.len(),
                self.pnss.p
            )));
        }
        let levels = self
            .pns
            .levels
            .iter()
            .map(|l| {
                Ok(PnsLevel {
                    axis: SpherePoint::new(DVector::from_row_slice(&l.axis))?,
                    radius: l.radius,
                    rotation_to_pole: rows_to_matrix(&l.rotation_to_pole)?,
                    scale_in: l.scale_in,
                    residuals: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pns = PnsModel {
            levels,
            final_mean_angle: self.pns.final_mean_angle,
            final_scale: self.pns.final_scale,
            coordinates: DMatrix::zeros(self.pnss.p, 0),
        };
        Ok((mean, eigenvectors, pns))
    }
}

pub fn write_model_json(path: &Path, model: &ModelJson) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn read_model_json(path: &Path) -> Result<ModelJson> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
