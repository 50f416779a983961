//! Stage functions and the end-to-end run.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{DataConfig, PipelineConfig};
use super::deploy::DeployedModel;
use super::report::{emit_report, sweep_stem, CompressionReport, LayerReport, LayerStage, ReportFormat, Stage};
use crate::convlower::{conv_addition_cost, lower};
use crate::lcc::{self, decompose, reconstruct, to_adder_program, AdderProgram, LccDecomposition};
use crate::nncore::{load_mnist, top1_accuracy, train, Dataset, Layer, LayerKind, Model, Split, TrainOptions};
use crate::numerics::{csd_matrix_cost, quantize_matrix, sqnr_db, FixedPointConfig};
use crate::par;
use crate::pruning::compact_pruned;
use crate::sharing::{cluster_columns, retrain_shared, ClusterModel, LayerClusters};
use crate::{Error, Result};

pub const CLASSES: usize = 10;

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_datasets(cfg: &DataConfig) -> Result<Datasets> {
    let root = cfg.resolve_root();
    Ok(Datasets {
        train: load_mnist(&root, Split::Train, cfg.train_limit)?,
        test: load_mnist(&root, Split::Test, cfg.test_limit)?,
    })
}

fn image_side(data: &Dataset) -> Result<usize> {
    let px = data.images.ncols();
    let side = (px as f64).sqrt().round() as usize;
    if side * side != px {
        return Err(Error::Shape(format!("{px} pixels is not a square image")));
    }
    Ok(side)
}

/// Train the unregularized reference model.
pub fn train_baseline(cfg: &PipelineConfig, data: &Dataset) -> Result<Model> {
    let mut model = cfg.model.build(image_side(data)?, CLASSES, cfg.seed)?;
    train(&mut model, data, &cfg.baseline_train(), TrainOptions::default())?;
    Ok(model)
}

/// Regularized training from the same initialization, then removal of the
/// pruned groups.
pub fn train_pruned(cfg: &PipelineConfig, data: &Dataset) -> Result<Model> {
    let mut model = cfg.model.build(image_side(data)?, CLASSES, cfg.seed)?;
    train(&mut model, data, &cfg.regularized_train(), TrainOptions::default())?;
    compact_model(&mut model, &cfg.prune.lambdas, cfg.prune.tol)?;
    Ok(model)
}

/// Drop pruned groups of every regularized layer. Dense layers keep only
/// their surviving columns and gather their inputs; convolutions keep their
/// shape with the pruned kernels set to exactly zero.
pub fn compact_model(model: &mut Model, lambdas: &[f64], tol: f64) -> Result<()> {
    for (i, l) in model.layers.iter_mut().enumerate() {
        if lambdas.get(i).is_none_or(|&lam| lam <= 0.0) {
            continue;
        }
        if l.tying.is_some() {
            return Err(Error::Config(format!("layer {i} is already tied")));
        }
        let gs = l.group_structure();
        match l.kind {
            LayerKind::Dense => {
                let c = compact_pruned(l.weight.view(), gs, tol)?;
                l.gather = Some(match &l.gather {
                    Some(old) => c.retained.iter().map(|&j| old[j]).collect(),
                    None => c.retained,
                });
                l.weight = c.matrix;
            }
            LayerKind::Conv { .. } => {
                let norms = gs.group_norms(l.weight.view())?;
                if norms.iter().all(|&n| n <= tol) {
                    return Err(Error::Degenerate(format!("all {} groups of layer {i} pruned", norms.len())));
                }
                let mut g = gs.to_groups(l.weight.view())?;
                for (mut row, &n) in g.rows_mut().into_iter().zip(&norms) {
                    if n <= tol {
                        row.fill(0.0);
                    }
                }
                l.weight = gs.from_groups(g.view())?;
            }
        }
    }
    Ok(())
}

/// Cluster the configured layers, tie them and retrain. The returned
/// centroids are the retrained ones.
pub fn share_model(cfg: &PipelineConfig, model: &mut Model, data: &Dataset) -> Result<ClusterModel> {
    let share = cfg.share.clustering(cfg.seed, cfg.parallelism);
    let mut cm = ClusterModel::default();
    for &li in &cfg.share.layers {
        let l = model
            .layers
            .get(li)
            .ok_or_else(|| Error::Config(format!("layer {li} does not exist")))?;
        let (clusters, ap) = cluster_columns(l.weight.view(), &share)?;
        log::info!(
            "layer {li}: {} columns -> {} clusters ({} iterations, converged {})",
            l.weight.ncols(),
            clusters.len(),
            ap.iterations,
            ap.converged
        );
        cm.layers.push(LayerClusters { layer: li, clusters });
    }
    retrain_shared(model, &cm, data, &cfg.retrain())?;
    for lc in &mut cm.layers {
        let w = &model.layers[lc.layer].weight;
        for (c, cl) in lc.clusters.iter_mut().enumerate() {
            cl.centroid = w.column(c).to_vec();
        }
    }
    Ok(cm)
}

/// Decompositions of one layer: one per dense layer, one per input map
/// (lowered matrix) for convolutions. `None` marks an all-zero matrix,
/// which needs no additions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDecomposition {
    pub layer: usize,
    pub matrices: Vec<Option<LccDecomposition>>,
}

impl LayerDecomposition {
    pub fn programs(&self, shapes: &[(usize, usize)]) -> Vec<AdderProgram> {
        self.matrices
            .iter()
            .zip(shapes)
            .map(|(d, &(rows, cols))| match d {
                Some(d) => to_adder_program(d),
                None => AdderProgram {
                    n_inputs: cols,
                    nodes: Vec::new(),
                    outputs: vec![None; rows],
                },
            })
            .collect()
    }

    pub fn converged(&self) -> bool {
        self.matrices.iter().flatten().all(|d| d.diagnostics.converged)
    }
}

/// The matrices a layer multiplies with.
pub fn layer_matrices(l: &Layer) -> Result<Vec<Array2<f64>>> {
    match l.kind {
        LayerKind::Dense => Ok(vec![l.weight.clone()]),
        LayerKind::Conv { spec, lowering } => Ok(lower(spec, l.weight.view(), lowering)?.matrices),
    }
}

fn quantization_sqnr(w: ArrayView2<f64>, fp: FixedPointConfig) -> f64 {
    // an all-zero matrix is represented exactly
    sqnr_db(w, quantize_matrix(w, fp).view()).unwrap_or(f64::INFINITY)
}

/// Decompose every layer at the configured fidelity policy.
pub fn decompose_model(cfg: &PipelineConfig, model: &Model) -> Result<Vec<LayerDecomposition>> {
    let mut out = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        let mut matrices = Vec::new();
        for w in layer_matrices(l)? {
            if w.iter().all(|&v| v == 0.0) {
                matrices.push(None);
                continue;
            }
            let target = quantization_sqnr(w.view(), cfg.baseline);
            let d = decompose(w.view(), &cfg.lcc.lcc_config(target, cfg.parallelism))?;
            log::info!(
                "layer {i}: {}x{} -> {} additions at {:.2} dB (target {target:.2} dB)",
                w.nrows(),
                w.ncols(),
                lcc::count_additions(&d),
                d.achieved_sqnr
            );
            matrices.push(Some(d));
        }
        out.push(LayerDecomposition { layer: i, matrices });
    }
    Ok(out)
}

pub fn model_programs(model: &Model, decs: &[LayerDecomposition]) -> Result<Vec<Option<Vec<AdderProgram>>>> {
    model
        .layers
        .iter()
        .zip(decs)
        .map(|(l, d)| {
            let shapes: Vec<_> = layer_matrices(l)?.iter().map(|m| m.dim()).collect();
            Ok(Some(d.programs(&shapes)))
        })
        .collect()
}

fn pooling_adds(l: &Layer) -> u64 {
    l.tying
        .as_ref()
        .map_or(0, |t| t.sizes().iter().map(|&s| s as u64 - 1).sum())
}

fn input_dims(l: &Layer) -> Result<usize> {
    match l.kind {
        LayerKind::Dense => Ok(l.gathered_width()),
        LayerKind::Conv { .. } => Ok(l.group_structure().group_norms(l.weight.view())?.iter().filter(|&&n| n > 0.0).count()),
    }
}

/// Layer cost after a stage. Without a decomposition the product is
/// costed in CSD at the baseline word length.
pub fn layer_stage(stage: Stage, l: &Layer, dec: Option<&LayerDecomposition>, fp: FixedPointConfig) -> Result<LayerStage> {
    let matrices = layer_matrices(l)?;
    let per_matrix: Vec<u64> = match dec {
        None => matrices.iter().map(|w| csd_matrix_cost(w.view(), fp).adds).collect(),
        Some(d) => {
            let shapes: Vec<_> = matrices.iter().map(|m| m.dim()).collect();
            d.programs(&shapes).iter().map(|p| p.additions()).collect()
        }
    };
    let matrix_adds = match l.kind {
        LayerKind::Dense => per_matrix[0],
        LayerKind::Conv { spec, lowering } => conv_addition_cost(spec, lowering, &per_matrix)?,
    };
    let sqnr = match dec {
        None => quantization_sqnr(l.weight.view(), fp),
        Some(d) => {
            let (mut signal, mut noise) = (0.0, 0.0);
            for (w, dm) in matrices.iter().zip(&d.matrices) {
                signal += w.iter().map(|v| v * v).sum::<f64>();
                if let Some(dm) = dm {
                    noise += (w - &reconstruct(dm)).iter().map(|v| v * v).sum::<f64>();
                }
            }
            crate::numerics::sqnr_from_energies(signal, noise)
        }
    };
    let pooling = pooling_adds(l);
    Ok(LayerStage {
        stage,
        input_dims: input_dims(l)?,
        unique_columns: l.weight.ncols(),
        pooling_adds: pooling,
        matrix_adds,
        adds: pooling + matrix_adds,
        sqnr_db: sqnr,
    })
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: CompressionReport,
    pub baseline: Model,
    pub pruned: Option<Model>,
    pub shared: Option<(Model, ClusterModel)>,
    pub decompositions: Option<Vec<LayerDecomposition>>,
    pub output_dir: PathBuf,
}

impl RunOutcome {
    /// The model the final stage deploys.
    pub fn final_model(&self) -> &Model {
        self.shared
            .as_ref()
            .map(|(m, _)| m)
            .or(self.pruned.as_ref())
            .unwrap_or(&self.baseline)
    }
}

pub fn decomposition_file(layer: usize, matrix: usize, n_matrices: usize) -> String {
    if n_matrices == 1 {
        format!("layer-{layer}.lccd")
    } else {
        format!("layer-{layer}-map-{matrix}.lccd")
    }
}

pub fn save_decompositions(dir: &Path, decs: &[LayerDecomposition]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for d in decs {
        for (k, m) in d.matrices.iter().enumerate() {
            if let Some(m) = m {
                lcc::serial::save(m, &dir.join(decomposition_file(d.layer, k, d.matrices.len())))?;
            }
        }
    }
    Ok(())
}

/// Inverse of [`save_decompositions`] for `model`. A missing file stands
/// for an all-zero matrix; a missing file for a nonzero matrix is an error.
pub fn load_decompositions(dir: &Path, model: &Model) -> Result<Vec<LayerDecomposition>> {
    let mut out = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        let mats = layer_matrices(l)?;
        let mut matrices = Vec::with_capacity(mats.len());
        for (k, w) in mats.iter().enumerate() {
            let path = dir.join(decomposition_file(i, k, mats.len()));
            let d = if path.exists() {
                let d = lcc::serial::load(&path)?;
                if (d.rows, d.cols) != w.dim() {
                    return Err(Error::Format {
                        path,
                        msg: format!("{}x{} decomposition for a {:?} matrix", d.rows, d.cols, w.dim()),
                    });
                }
                Some(d)
            } else if w.iter().all(|&v| v == 0.0) {
                None
            } else {
                return Err(Error::Format {
                    path,
                    msg: "missing decomposition of a nonzero matrix".into(),
                });
            };
            matrices.push(d);
        }
        out.push(LayerDecomposition { layer: i, matrices });
    }
    Ok(out)
}

/// Stage checkpoint of `model` tagged with the run seed.
pub fn stage_checkpoint(stage: Stage, cfg: &PipelineConfig, model: &Model, clusters: Option<&ClusterModel>) -> Checkpoint {
    Checkpoint {
        stage,
        seed: cfg.seed,
        model: model.clone(),
        clusters: clusters.cloned(),
    }
}

/// Rebuild a run from the artifacts in the output directory: the baseline
/// checkpoint is required; pruned and shared checkpoints and the `lcc/`
/// decompositions of the final model are picked up when present. Every
/// stage is re-evaluated and `report.{json,csv}` rewritten.
pub fn resume_run(cfg: &PipelineConfig, data: &Datasets) -> Result<RunOutcome> {
    let out = cfg.output_dir.clone();
    let load = |name: &str| -> Result<Option<Checkpoint>> {
        let path = out.join(name);
        if path.exists() {
            load_checkpoint(&path).map(Some)
        } else {
            Ok(None)
        }
    };
    let baseline = load("baseline.ckpt")?
        .ok_or_else(|| Error::Config(format!("no baseline checkpoint in {}", out.display())))?
        .model;
    let pruned = load("pruned.ckpt")?.map(|c| c.model);
    let shared = match load("shared.ckpt")? {
        Some(c) => Some((
            c.model,
            c.clusters.ok_or_else(|| Error::Format {
                path: out.join("shared.ckpt"),
                msg: "shared checkpoint without clusters".into(),
            })?,
        )),
        None => None,
    };
    let mut run = RunOutcome {
        report: CompressionReport::new(cfg.seed, vec![], vec![], &[])?,
        baseline,
        pruned,
        shared,
        decompositions: None,
        output_dir: out.clone(),
    };
    let mut accuracy = vec![(Stage::Baseline, top1_accuracy(&run.baseline, &data.test)?)];
    if let Some(m) = &run.pruned {
        accuracy.push((Stage::Pruned, top1_accuracy(m, &data.test)?));
    }
    if let Some((m, _)) = &run.shared {
        accuracy.push((Stage::Shared, top1_accuracy(m, &data.test)?));
    }
    let lcc_dir = out.join("lcc");
    if lcc_dir.is_dir() {
        let model = run.final_model();
        let decs = load_decompositions(&lcc_dir, model)?;
        let deployed = DeployedModel::new(model, &model_programs(model, &decs)?)?;
        accuracy.push((Stage::Lcc, deployed.accuracy(&data.test, cfg.parallelism)?));
        run.decompositions = Some(decs);
    }
    run.report = build_report(cfg, &run, &accuracy).map_err(|e| e.in_stage("report"))?;
    emit_report(&run.report, &out, "report", &[ReportFormat::Json, ReportFormat::Csv])?;
    Ok(run)
}

/// Run every enabled stage in order, writing checkpoints, decompositions
/// and `report.{json,csv}` into the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_datasets(&cfg.data).map_err(|e| e.in_stage("data"))?;
    run_with_data(cfg, &data, None)
}

/// As [`run_pipeline`] on loaded data; a baseline model may be supplied to
/// skip its training (it must come from the same configuration).
pub fn run_with_data(cfg: &PipelineConfig, data: &Datasets, baseline: Option<Model>) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let mut accuracy = Vec::new();

    let baseline = match baseline {
        Some(m) => m,
        None => train_baseline(cfg, &data.train).map_err(|e| e.in_stage("train"))?,
    };
    save_checkpoint(&stage_checkpoint(Stage::Baseline, cfg, &baseline, None), &out.join("baseline.ckpt"))?;
    accuracy.push((Stage::Baseline, top1_accuracy(&baseline, &data.test)?));

    let pruned = if cfg.prune.is_active() {
        let m = train_pruned(cfg, &data.train).map_err(|e| e.in_stage("prune"))?;
        save_checkpoint(&stage_checkpoint(Stage::Pruned, cfg, &m, None), &out.join("pruned.ckpt"))?;
        accuracy.push((Stage::Pruned, top1_accuracy(&m, &data.test)?));
        Some(m)
    } else {
        None
    };

    let shared = if cfg.share.enabled {
        let mut m = pruned.clone().unwrap_or_else(|| baseline.clone());
        let cm = share_model(cfg, &mut m, &data.train).map_err(|e| e.in_stage("share"))?;
        save_checkpoint(&stage_checkpoint(Stage::Shared, cfg, &m, Some(&cm)), &out.join("shared.ckpt"))?;
        accuracy.push((Stage::Shared, top1_accuracy(&m, &data.test)?));
        Some((m, cm))
    } else {
        None
    };

    let mut outcome = RunOutcome {
        report: CompressionReport::new(cfg.seed, vec![], vec![], &[])?,
        baseline,
        pruned,
        shared,
        decompositions: None,
        output_dir: out.clone(),
    };

    if cfg.lcc.enabled {
        let model = outcome.final_model();
        let decs = decompose_model(cfg, model).map_err(|e| e.in_stage("decompose"))?;
        save_decompositions(&out.join("lcc"), &decs)?;
        let deployed = DeployedModel::new(model, &model_programs(model, &decs)?).map_err(|e| e.in_stage("deploy"))?;
        let acc = deployed
            .accuracy(&data.test, cfg.parallelism)
            .map_err(|e| e.in_stage("deploy"))?;
        accuracy.push((Stage::Lcc, acc));
        outcome.decompositions = Some(decs);
    }

    outcome.report = build_report(cfg, &outcome, &accuracy).map_err(|e| e.in_stage("report"))?;
    emit_report(&outcome.report, &out, "report", &[ReportFormat::Json, ReportFormat::Csv])?;
    Ok(outcome)
}

/// Per-layer, per-stage costs of a finished run.
pub fn build_report(cfg: &PipelineConfig, run: &RunOutcome, accuracy: &[(Stage, f64)]) -> Result<CompressionReport> {
    let fp = cfg.baseline;
    let mut layers = Vec::with_capacity(run.baseline.layers.len());
    for (i, bl) in run.baseline.layers.iter().enumerate() {
        let base = layer_stage(Stage::Baseline, bl, None, fp)?;
        let mut stages = vec![base.clone()];
        let mut pruned_dims = 0;
        if let Some(p) = &run.pruned {
            let s = layer_stage(Stage::Pruned, &p.layers[i], None, fp)?;
            pruned_dims = base.input_dims - s.input_dims;
            stages.push(s);
        }
        if let Some((m, _)) = &run.shared {
            stages.push(layer_stage(Stage::Shared, &m.layers[i], None, fp)?);
        }
        let mut converged = None;
        if let Some(decs) = &run.decompositions {
            stages.push(layer_stage(Stage::Lcc, &run.final_model().layers[i], Some(&decs[i]), fp)?);
            converged = Some(decs[i].converged());
        }
        layers.push(LayerReport {
            layer: i,
            kind: match bl.kind {
                LayerKind::Dense => "dense".into(),
                LayerKind::Conv { lowering, .. } => format!("conv-{}", lowering_name(lowering)),
            },
            baseline_adds: base.adds,
            pruned_dims,
            lcc_converged: converged,
            stages,
        });
    }
    let lambdas = if cfg.prune.is_active() { cfg.prune.lambdas.clone() } else { vec![] };
    CompressionReport::new(cfg.seed, lambdas, layers, accuracy)
}

fn lowering_name(l: crate::convlower::Lowering) -> &'static str {
    match l {
        crate::convlower::Lowering::Fk => "fk",
        crate::convlower::Lowering::Pk => "pk",
    }
}

/// Independent runs over the first-layer lambdas of `cfg.sweep`. The
/// baseline is trained once and shared. Each point writes its artifacts to
/// `<output_dir>/lambda-<λ>/` and its report to
/// `<output_dir>/report-lambda-<λ>.{json,csv}`.
pub fn run_sweep(cfg: &PipelineConfig) -> Result<Vec<(f64, CompressionReport)>> {
    cfg.validate()?;
    if cfg.sweep.lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one lambda".into()));
    }
    let data = load_datasets(&cfg.data).map_err(|e| e.in_stage("data"))?;
    run_sweep_with_data(cfg, &data)
}

pub fn run_sweep_with_data(cfg: &PipelineConfig, data: &Datasets) -> Result<Vec<(f64, CompressionReport)>> {
    let baseline = train_baseline(cfg, &data.train).map_err(|e| e.in_stage("train"))?;
    let points = par::map_slice(cfg.parallelism, &cfg.sweep.lambdas, |&lam| -> Result<(f64, CompressionReport)> {
        let mut c = cfg.clone();
        c.prune.lambdas = vec![lam];
        c.output_dir = cfg.output_dir.join(format!("lambda-{lam}"));
        let run = run_with_data(&c, data, Some(baseline.clone()))?;
        Ok((lam, run.report))
    });
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let (lam, report) = p?;
        emit_report(&report, &cfg.output_dir, &sweep_stem(lam), &[ReportFormat::Json, ReportFormat::Csv])?;
        out.push((lam, report));
    }
    Ok(out)
}
