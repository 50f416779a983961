//! Compression reports: per-layer, per-stage addition counts and accuracy.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Baseline,
    Pruned,
    Shared,
    Lcc,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Pruned => "pruned",
            Stage::Shared => "shared",
            Stage::Lcc => "lcc",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `+inf` goes to JSON as `null` and comes back as `+inf`.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    #[serde(with = "inf_as_null")]
    pub value: f64,
    /// Set when the compressed side needs no additions at all.
    pub infinite: bool,
}

/// `baseline / compressed`. Zero compressed additions give the `+inf`
/// sentinel with the flag set; `0 / 0` counts as no change (1.0).
pub fn compression_ratio(baseline_adds: u64, compressed_adds: u64) -> Ratio {
    match (baseline_adds, compressed_adds) {
        (0, 0) => Ratio { value: 1.0, infinite: false },
        (_, 0) => Ratio { value: f64::INFINITY, infinite: true },
        (b, c) => Ratio { value: b as f64 / c as f64, infinite: false },
    }
}

/// Cost of one layer after one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStage {
    pub stage: Stage,
    /// Input columns the matrix still reads (after pruning).
    pub input_dims: usize,
    /// Distinct columns of the stored matrix (after sharing).
    pub unique_columns: usize,
    /// Additions that sum tied inputs before the product.
    pub pooling_adds: u64,
    /// Additions of the product itself (CSD or adder program).
    pub matrix_adds: u64,
    pub adds: u64,
    /// Fidelity of the implemented matrix against the stage's float matrix;
    /// `+inf` means exact.
    #[serde(with = "inf_as_null")]
    pub sqnr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub kind: String,
    /// CSD additions of the unregularized model's layer.
    pub baseline_adds: u64,
    /// Groups (input columns or kernels) removed by pruning.
    pub pruned_dims: usize,
    /// `Some(false)` when a decomposition stopped short of its target.
    pub lcc_converged: Option<bool>,
    /// One entry per executed stage, in stage order.
    pub stages: Vec<LayerStage>,
}

impl LayerReport {
    pub fn stage(&self, stage: Stage) -> Option<&LayerStage> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn final_stage(&self) -> &LayerStage {
        self.stages.last().expect("every layer has a baseline entry")
    }

    pub fn ratio(&self) -> Ratio {
        compression_ratio(self.baseline_adds, self.final_stage().adds)
    }
}

/// Totals after one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub adds: u64,
    pub ratio: Ratio,
    /// Test-set top-1 accuracy of the model after this stage. The LCC stage
    /// is measured by executing the adder programs.
    pub top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub seed: u64,
    pub lambdas: Vec<f64>,
    pub baseline_adds: u64,
    pub layers: Vec<LayerReport>,
    pub stages: Vec<StageSummary>,
}

impl CompressionReport {
    /// Build the stage totals from the per-layer entries.
    pub fn new(seed: u64, lambdas: Vec<f64>, layers: Vec<LayerReport>, accuracy: &[(Stage, f64)]) -> Result<Self> {
        let mut order: Vec<Stage> = layers.iter().flat_map(|l| l.stages.iter().map(|s| s.stage)).collect();
        order.sort();
        order.dedup();
        if let Some(l) = layers.iter().find(|l| l.stages.iter().map(|s| s.stage).ne(order.iter().copied())) {
            return Err(Error::Shape(format!("layer {} does not report every stage", l.layer)));
        }
        let baseline_adds = layers.iter().map(|l| l.baseline_adds).sum();
        let stages = order
            .iter()
            .map(|&stage| {
                let adds = layers.iter().map(|l| l.stage(stage).map_or(0, |s| s.adds)).sum();
                StageSummary {
                    stage,
                    adds,
                    ratio: compression_ratio(baseline_adds, adds),
                    top1: accuracy.iter().find(|(s, _)| *s == stage).map(|&(_, a)| a),
                }
            })
            .collect();
        Ok(CompressionReport {
            seed,
            lambdas,
            baseline_adds,
            layers,
            stages,
        })
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// The last executed stage (the deployed model).
    pub fn final_summary(&self) -> Option<&StageSummary> {
        self.stages.last()
    }

    pub fn total_ratio(&self) -> Ratio {
        self.final_summary()
            .map_or(compression_ratio(0, 0), |s| s.ratio)
    }

    /// Recompute every total from the layer rows and compare exactly.
    pub fn check_consistency(&self) -> Result<()> {
        let again = CompressionReport::new(
            self.seed,
            self.lambdas.clone(),
            self.layers.clone(),
            &self.stages.iter().filter_map(|s| s.top1.map(|a| (s.stage, a))).collect::<Vec<_>>(),
        )?;
        if again.baseline_adds != self.baseline_adds || again.stages != self.stages {
            return Err(Error::Shape("report totals disagree with the layer rows".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("report: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const CSV_HEADER: [&str; 11] = [
    "layer",
    "kind",
    "stage",
    "input_dims",
    "unique_columns",
    "pooling_adds",
    "matrix_adds",
    "adds",
    "baseline_adds",
    "ratio",
    "sqnr_db",
];

#[derive(Serialize)]
struct CsvRow<'a> {
    layer: usize,
    kind: &'a str,
    stage: Stage,
    input_dims: usize,
    unique_columns: usize,
    pooling_adds: u64,
    matrix_adds: u64,
    adds: u64,
    baseline_adds: u64,
    ratio: f64,
    sqnr_db: f64,
}

/// One row per (layer, stage); an empty report yields only the header.
pub fn report_csv(report: &CompressionReport) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for l in &report.layers {
        for s in &l.stages {
            w.serialize(CsvRow {
                layer: l.layer,
                kind: &l.kind,
                stage: s.stage,
                input_dims: s.input_dims,
                unique_columns: s.unique_columns,
                pooling_adds: s.pooling_adds,
                matrix_adds: s.matrix_adds,
                adds: s.adds,
                baseline_adds: l.baseline_adds,
                ratio: compression_ratio(l.baseline_adds, s.adds).value,
                sqnr_db: s.sqnr_db,
            })
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Write `<stem>.json` and/or `<stem>.csv` into `dir`.
pub fn emit_report(report: &CompressionReport, dir: &Path, stem: &str, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        let (ext, body) = match f {
            ReportFormat::Json => ("json", report.to_json()),
            ReportFormat::Csv => ("csv", report_csv(report)),
        };
        let path = dir.join(format!("{stem}.{ext}"));
        std::fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

/// File stem for one sweep point; the lambda is written in its shortest
/// round-trip decimal form.
pub fn sweep_stem(lambda: f64) -> String {
    format!("report-lambda-{lambda}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(stage: Stage, adds: u64) -> LayerStage {
        LayerStage {
            stage,
            input_dims: 4,
            unique_columns: 4,
            pooling_adds: 0,
            matrix_adds: adds,
            adds,
            sqnr_db: f64::INFINITY,
        }
    }

    fn layer(i: usize, base: u64, last: u64) -> LayerReport {
        LayerReport {
            layer: i,
            kind: "dense".into(),
            baseline_adds: base,
            pruned_dims: 0,
            lcc_converged: Some(true),
            stages: vec![entry(Stage::Baseline, base), entry(Stage::Lcc, last)],
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(compression_ratio(7, 7).value, 1.0);
        assert_eq!(compression_ratio(400, 100).value, 4.0);
        let r = compression_ratio(5, 0);
        assert!(r.infinite && r.value == f64::INFINITY);
        assert!(!compression_ratio(0, 0).infinite);
    }

    #[test]
    fn totals_are_sums_of_layer_rows() {
        let r = CompressionReport::new(1, vec![0.1], vec![layer(0, 400, 50), layer(1, 100, 50)], &[(Stage::Lcc, 0.9)]).unwrap();
        assert_eq!(r.baseline_adds, 500);
        assert_eq!(r.stage(Stage::Lcc).unwrap().adds, 100);
        assert_eq!(r.total_ratio().value, 5.0);
        assert_eq!(r.stage(Stage::Lcc).unwrap().top1, Some(0.9));
        r.check_consistency().unwrap();
        let mut bad = r.clone();
        bad.stages[1].adds += 1;
        assert!(bad.check_consistency().is_err());
    }

    #[test]
    fn json_roundtrip_keeps_infinities() {
        let mut l = layer(0, 10, 0);
        l.stages[0].sqnr_db = 42.5;
        let r = CompressionReport::new(3, vec![], vec![l], &[]).unwrap();
        assert!(r.total_ratio().infinite);
        let back = CompressionReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_rows_and_empty_report() {
        let empty = CompressionReport::new(0, vec![], vec![], &[]).unwrap();
        assert_eq!(report_csv(&empty).trim_end(), CSV_HEADER.join(","));
        assert_eq!(empty.total_ratio().value, 1.0);

        let r = CompressionReport::new(0, vec![], vec![layer(0, 8, 2), layer(1, 4, 4)], &[]).unwrap();
        let text = report_csv(&r);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 4);
        assert_eq!(lines[2], "0,dense,lcc,4,4,0,2,2,8,4.0,inf");
    }

    #[test]
    fn mismatched_stages_are_rejected() {
        let mut l = layer(1, 4, 4);
        l.stages.pop();
        assert!(CompressionReport::new(0, vec![], vec![layer(0, 8, 2), l], &[]).is_err());
    }

    #[test]
    fn emit_writes_requested_formats() {
        let dir = tempfile::tempdir().unwrap();
        let r = CompressionReport::new(0, vec![], vec![layer(0, 8, 2)], &[]).unwrap();
        let files = emit_report(&r, dir.path(), &sweep_stem(0.25), &[ReportFormat::Json, ReportFormat::Csv]).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["report-lambda-0.25.json", "report-lambda-0.25.csv"]);
        let back = CompressionReport::from_json(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
