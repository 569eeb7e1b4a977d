//! End-to-end orchestration: ingest → contract → features → normalize →
//! cluster → report.
//!
//! Every stage reads its inputs from the previous stage's artifacts (or from
//! memory in a one-shot run) and writes its own artifacts into the output
//! directory. Both paths serialize through the same functions, so a staged
//! run and a one-shot run produce byte-identical files.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use itertools::process_results;
use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cluster::{trimmed_kmeans, AssignmentTable, ClusterModel, TrimmedKMeansConfig};
use crate::contraction::{build_contraction, load_contraction, AddressUserMap};
use crate::error::{Error, Result};
use crate::features::{
    assemble_feature_matrix, build_user_graph, load_feature_matrix, FeatureMatrix, FEATURE_NAMES,
};
use crate::ingest::{
    load_address_universe, load_flow_records, load_theft_catalog, wipe_addresses, FlowRecord, Side,
    TheftCatalog,
};
use crate::normalize::MinMaxScaler;
use crate::report::{
    load_dispersion_csv, match_catalog, summarize, write_dispersion_csv, AnomalyReport,
    ReportConfig, StageLog,
};

pub const STAGES_JSON: &str = "stages.json";
pub const CONTRACTION_TSV: &str = "contraction.tsv";
pub const FEATURES_CSV: &str = "features.csv";
pub const SCALER_JSON: &str = "scaler.json";
pub const MODEL_JSON: &str = "model.json";
pub const ASSIGNMENTS_CSV: &str = "assignments.csv";
pub const REPORT_JSON: &str = "report.json";
pub const DISPERSION_CSV: &str = "dispersion.csv";
pub const MATCHES_CSV: &str = "matches.csv";

#[derive(Debug, Clone)]
pub enum ContractionMode {
    Load(PathBuf),
    Derive,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub txin: PathBuf,
    pub txout: PathBuf,
    pub addresses: Option<PathBuf>,
    pub contraction: ContractionMode,
    pub thefts: Option<PathBuf>,
    pub cluster: TrimmedKMeansConfig,
    pub flag_labels: BTreeSet<u32>,
    pub out: PathBuf,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.cluster.validate_params()?;
        validate_flags(&self.flag_labels, self.cluster.k)
    }
}

fn validate_flags(flags: &BTreeSet<u32>, k: usize) -> Result<()> {
    match flags.iter().find(|&&l| l as usize > k) {
        Some(l) => Err(Error::Config(format!("flag label {l} exceeds k={k}"))),
        None if flags.is_empty() => Err(Error::Config("flag label set is empty".into())),
        None => Ok(()),
    }
}

/// `model.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub config: TrimmedKMeansConfig,
    pub n_rows: usize,
    pub trim_count: usize,
    pub objective: f64,
    pub centers: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn new(config: &TrimmedKMeansConfig, n_rows: usize, model: &ClusterModel) -> Self {
        ModelFile {
            config: *config,
            n_rows,
            trim_count: model.trim_count,
            objective: model.objective,
            centers: model.centers.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

/// Tracks files written into the output directory so a failed run can remove them.
pub struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn remove_all(&mut self) {
        for p in self.written.drain(..) {
            let _ = std::fs::remove_file(p);
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s.into_bytes()
}

fn collect_flows(path: &Path, side: Side) -> Result<Vec<FlowRecord>> {
    load_flow_records(path, side)?.collect()
}

/// Ingest and wipe. Returns the retained address universe and stage counts.
pub fn ingest_stage(txin: &Path, txout: &Path, addresses: Option<&Path>) -> Result<(Vec<u64>, StageLog)> {
    let universe: Option<HashSet<u64>> = addresses.map(load_address_universe).transpose()?;
    let (retained, stats) = wipe_addresses(
        universe.as_ref(),
        load_flow_records(txin, Side::Input)?,
        load_flow_records(txout, Side::Output)?,
    )?;
    info!(
        "ingest: {} input rows, {} output rows, {} transactions",
        stats.n_input_rows, stats.n_output_rows, stats.n_distinct_transactions
    );
    info!(
        "wipe: {} addresses before, {} after ({} wiped)",
        stats.n_universe_addresses, stats.n_distinct_addresses, stats.n_wiped_addresses
    );
    Ok((retained, StageLog::from_stats(&stats, None)))
}

pub fn contract_stage(txin: &Path, mode: &ContractionMode) -> Result<AddressUserMap> {
    match mode {
        ContractionMode::Load(path) => load_contraction(path),
        ContractionMode::Derive => {
            process_results(load_flow_records(txin, Side::Input)?, |recs| build_contraction(recs))
        }
    }
}

pub fn features_from_records(
    txin: &[FlowRecord],
    txout: &[FlowRecord],
    map: &AddressUserMap,
) -> FeatureMatrix {
    let graph = build_user_graph(txin.iter().copied(), txout.iter().copied(), map);
    info!("features: {} users, {} edge instances", graph.n_users(), graph.n_edges());
    assemble_feature_matrix(&graph)
}

pub fn features_stage(txin: &Path, txout: &Path, map: &AddressUserMap) -> Result<FeatureMatrix> {
    let ins = collect_flows(txin, Side::Input)?;
    let outs = collect_flows(txout, Side::Output)?;
    Ok(features_from_records(&ins, &outs, map))
}

pub fn fit_scaler(features: &FeatureMatrix) -> Result<MinMaxScaler> {
    MinMaxScaler::fit(&features.values, &FEATURE_NAMES)
}

/// Normalizes `features` with `scaler` and clusters the result.
pub fn cluster_stage(
    features: &FeatureMatrix,
    scaler: &MinMaxScaler,
    config: &TrimmedKMeansConfig,
) -> Result<(Array2<f64>, ClusterModel, AssignmentTable)> {
    let normalized = scaler.transform(&features.values)?;
    let (model, assignments) = trimmed_kmeans(&normalized, config)?;
    info!(
        "cluster: k={} alpha={} trimmed {} of {} rows, objective {}",
        config.k,
        config.alpha,
        model.trim_count,
        features.n_rows(),
        model.objective
    );
    Ok((normalized, model, assignments))
}

pub fn build_report(
    model: &ModelFile,
    stages: StageLog,
    user_ids: &[u64],
    assignments: &AssignmentTable,
    catalog: &TheftCatalog,
    map: &AddressUserMap,
    flag_labels: &BTreeSet<u32>,
) -> AnomalyReport {
    let (matches, counts) = match_catalog(catalog, map, user_ids, assignments, flag_labels);
    info!(
        "report: flagged {} users, {} addresses, {} cases",
        counts.users, counts.addresses, counts.cases
    );
    AnomalyReport {
        config: ReportConfig {
            k: model.config.k,
            alpha: model.config.alpha,
            n_starts: model.config.n_starts,
            max_iter: model.config.max_iter,
            tol: model.config.tol,
            seed: model.config.seed,
            trim_count: model.trim_count,
            n_rows: model.n_rows,
            flag_labels: flag_labels.iter().copied().collect(),
        },
        stages,
        summaries: summarize(assignments, model.config.k),
        counts,
        matches,
    }
}

fn load_catalog(thefts: Option<&Path>) -> Result<TheftCatalog> {
    thefts.map_or_else(|| Ok(TheftCatalog::default()), load_theft_catalog)
}

fn dispersion_bytes(user_ids: &[u64], assignments: &AssignmentTable) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dispersion_csv(&mut buf, user_ids, assignments).expect("write to memory");
    buf
}

fn write_report(art: &mut Artifacts, report: &AnomalyReport, user_ids: &[u64], asg: &AssignmentTable) -> Result<()> {
    art.write(REPORT_JSON, report.to_json().as_bytes())?;
    art.write(DISPERSION_CSV, &dispersion_bytes(user_ids, asg))?;
    let mut buf = Vec::new();
    report.write_matches_csv(&mut buf).expect("write to memory");
    art.write(MATCHES_CSV, &buf)
}

fn write_contraction(art: &mut Artifacts, map: &AddressUserMap, retained: &[u64]) -> Result<()> {
    let mut buf = Vec::new();
    map.write_tsv(&mut buf, retained).expect("write to memory");
    art.write(CONTRACTION_TSV, &buf)
}

fn write_features(art: &mut Artifacts, features: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::new();
    features.write_csv(&mut buf).expect("write to memory");
    art.write(FEATURES_CSV, &buf)
}

fn run_stages(config: &PipelineConfig, art: &mut Artifacts) -> Result<AnomalyReport> {
    let (retained, mut stages) =
        ingest_stage(&config.txin, &config.txout, config.addresses.as_deref())?;
    let map = contract_stage(&config.txin, &config.contraction)?;
    let n_users = map.n_users_over(&retained) as u64;
    stages.users_after_contraction = Some(n_users);
    info!("contraction: {n_users} users");
    art.write(STAGES_JSON, &to_json(&stages))?;
    write_contraction(art, &map, &retained)?;

    let features = features_stage(&config.txin, &config.txout, &map)?;
    write_features(art, &features)?;
    let scaler = fit_scaler(&features)?;
    art.write(SCALER_JSON, scaler.to_json().as_bytes())?;

    let (_, model, assignments) = cluster_stage(&features, &scaler, &config.cluster)?;
    let model_file = ModelFile::new(&config.cluster, features.n_rows(), &model);
    art.write(MODEL_JSON, &to_json(&model_file))?;
    art.write(ASSIGNMENTS_CSV, &dispersion_bytes(&features.user_ids, &assignments))?;

    let catalog = load_catalog(config.thefts.as_deref())?;
    let report = build_report(
        &model_file,
        stages,
        &features.user_ids,
        &assignments,
        &catalog,
        &map,
        &config.flag_labels,
    );
    write_report(art, &report, &features.user_ids, &assignments)?;
    Ok(report)
}

/// Runs every stage. On failure, artifacts written so far are removed.
pub fn run_pipeline(config: &PipelineConfig) -> Result<AnomalyReport> {
    config.validate()?;
    let mut art = Artifacts::new(&config.out)?;
    match run_stages(config, &mut art) {
        Ok(report) => Ok(report),
        Err(e) => {
            art.remove_all();
            Err(e)
        }
    }
}

/// Staged equivalents of [`run_pipeline`]; each reads the previous stage's
/// artifacts from `out`.
pub mod staged {
    use super::*;

    pub fn ingest_stats(txin: &Path, txout: &Path, addresses: Option<&Path>, out: &Path) -> Result<StageLog> {
        let (_, stages) = ingest_stage(txin, txout, addresses)?;
        Artifacts::new(out)?.write(STAGES_JSON, &to_json(&stages))?;
        Ok(stages)
    }

    pub fn contract(
        txin: &Path,
        txout: &Path,
        addresses: Option<&Path>,
        mode: &ContractionMode,
        out: &Path,
    ) -> Result<StageLog> {
        let (retained, mut stages) = ingest_stage(txin, txout, addresses)?;
        let map = contract_stage(txin, mode)?;
        stages.users_after_contraction = Some(map.n_users_over(&retained) as u64);
        let mut art = Artifacts::new(out)?;
        art.write(STAGES_JSON, &to_json(&stages))?;
        write_contraction(&mut art, &map, &retained)?;
        Ok(stages)
    }

    pub fn features(txin: &Path, txout: &Path, contraction: Option<&Path>, out: &Path) -> Result<FeatureMatrix> {
        let default = out.join(CONTRACTION_TSV);
        let map = load_contraction(contraction.unwrap_or(&default))?;
        let features = features_stage(txin, txout, &map)?;
        write_features(&mut Artifacts::new(out)?, &features)?;
        Ok(features)
    }

    pub fn normalize(out: &Path) -> Result<MinMaxScaler> {
        let features = load_feature_matrix(&out.join(FEATURES_CSV))?;
        let scaler = fit_scaler(&features)?;
        Artifacts::new(out)?.write(SCALER_JSON, scaler.to_json().as_bytes())?;
        Ok(scaler)
    }

    pub fn cluster(config: &TrimmedKMeansConfig, out: &Path) -> Result<ModelFile> {
        config.validate_params()?;
        let features = load_feature_matrix(&out.join(FEATURES_CSV))?;
        let scaler = MinMaxScaler::load(&out.join(SCALER_JSON))?;
        let (_, model, assignments) = cluster_stage(&features, &scaler, config)?;
        let model_file = ModelFile::new(config, features.n_rows(), &model);
        let mut art = Artifacts::new(out)?;
        art.write(MODEL_JSON, &to_json(&model_file))?;
        art.write(ASSIGNMENTS_CSV, &dispersion_bytes(&features.user_ids, &assignments))?;
        Ok(model_file)
    }

    pub fn report(thefts: Option<&Path>, flag_labels: &BTreeSet<u32>, out: &Path) -> Result<AnomalyReport> {
        let model: ModelFile = read_json(&out.join(MODEL_JSON))?;
        validate_flags(flag_labels, model.config.k)?;
        let stages: StageLog = read_json(&out.join(STAGES_JSON))?;
        let map = load_contraction(&out.join(CONTRACTION_TSV))?;
        let (user_ids, assignments) = load_dispersion_csv(&out.join(ASSIGNMENTS_CSV))?;
        let catalog = load_catalog(thefts)?;
        let report = build_report(&model, stages, &user_ids, &assignments, &catalog, &map, flag_labels);
        write_report(&mut Artifacts::new(out)?, &report, &user_ids, &assignments)?;
        Ok(report)
    }
}
