//! Stage orchestration: train-ae → fit-ot → train-gan → eval.
//!
//! Each stage writes into `stages/<name>-<key>/` under the output
//! directory, where `key` hashes the configuration sections the stage reads
//! together with its upstream key. A stage directory holding a `stage.json`
//! marker with the same key is complete and can be reused. Downstream stages
//! always read their inputs back from disk, so a resumed run sees exactly
//! the bytes an uninterrupted one would.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aegan::{
    encode_dataset, read_history_csv, train_autoencoder, train_gan_with, write_history_csv,
    AeHistory, Autoencoder, GanModel, HistoryRow,
};
use crate::config::{DataKind, LatentSource, RunConfig};
use crate::data::{load_idx, make_dataset};
use crate::error::{Error, Result};
use crate::extension::{build_rips, select_epsilon, ExtendedMap, GaussianLatent, LatentSampler, RipsSummary};
use crate::geometry::PointCloud;
use crate::metrics::{
    cell_uniformity, coverage, exact_w2, nearest_code_gap, project_to_codes, CodeGap, CoverageReport, ModeSpec,
    UniformityTest,
};
use crate::plot;
use crate::rng::{uniform_cube_cloud, RngStream};
use crate::sdot::{solve, SdotCheckpoint, SdotProblem};

pub const MANIFEST_FILE: &str = "manifest.json";
const MARKER: &str = "stage.json";
const KEY_CHARS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainAe,
    FitOt,
    TrainGan,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::TrainAe, Stage::FitOt, Stage::TrainGan, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainAe => "train-ae",
            Stage::FitOt => "fit-ot",
            Stage::TrainGan => "train-gan",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Completed,
    Cached,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub status: StageStatus,
    /// Artifact name → path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub notes: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: RunConfig,
    pub dataset: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub metrics: Option<EvalReport>,
}

impl RunManifest {
    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn load(out: &Path) -> Result<Self> {
        read_json(&out.join(MANIFEST_FILE))
    }
}

/// Scores of the eval stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub latent_source: LatentSource,
    pub sample_count: usize,
    pub epsilon: f64,
    pub ae_mse: f64,
    pub ae_below_threshold: bool,
    pub sdot_converged: bool,
    pub sdot_iterations: usize,
    pub sdot_max_deviation: f64,
    pub rips: RipsSummary,
    /// Distance from each sampled latent to its nearest code.
    pub latent_code_gap: CodeGap,
    pub certificate_holds: bool,
    /// Exact W2 between consecutive blocks of sampled latents and their
    /// nearest-code projections.
    pub w2_blocks: Vec<f64>,
    pub uniformity: UniformityTest,
    pub coverage: Option<CoverageReport>,
    pub mode_shares: Option<Vec<f64>>,
    pub gap_fraction: Option<f64>,
    /// Coverage of the plain decoder on the same latents.
    pub decoder_coverage: Option<CoverageReport>,
    pub gan_epochs: usize,
    pub gan_final: Option<HistoryRow>,
    pub d_real_ge_fake_fraction: Option<f64>,
    pub content_loss_first: Option<f64>,
    pub content_loss_last: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Reuse completed stages with matching keys.
    pub resume: bool,
    /// Last stage to run.
    pub until: Stage,
    /// Reuse completed stages before `until` even without `resume`.
    pub reuse_upstream: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { resume: false, until: Stage::Eval, reuse_upstream: false }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::Missing { path: path.to_path_buf(), what: e.to_string() })?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    cloud.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    let f = File::open(path).map_err(|e| Error::Missing { path: path.to_path_buf(), what: e.to_string() })?;
    PointCloud::read_csv(BufReader::new(f))
}

/// Data points with optional mode metadata.
pub struct LoadedData {
    pub points: PointCloud,
    pub labels: Option<Vec<usize>>,
    pub modes: Option<ModeSpec>,
}

/// Materializes the configured dataset.
pub fn load_dataset(config: &RunConfig) -> Result<LoadedData> {
    match config.data.synthetic() {
        Some(params) => {
            let ds = make_dataset(&params, &RngStream::new(config.seed, 0))?;
            Ok(LoadedData { points: ds.points, labels: Some(ds.labels), modes: Some(ds.modes) })
        }
        None => {
            let path = config.data.idx_path.as_ref().ok_or(Error::Config("missing data.idx_path".into()))?;
            let mut points = load_idx(path)?;
            if config.data.limit > 0 && config.data.limit < points.len() {
                points = points.select(&(0..config.data.limit).collect::<Vec<_>>());
            }
            Ok(LoadedData { points, labels: None, modes: None })
        }
    }
}

/// Writes `points.csv`, and for synthetic kinds `labels.csv` and
/// `modes.json`, into `dir`. Returns artifact name → path.
pub fn write_dataset(data: &LoadedData, dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    let p = dir.join("points.csv");
    write_cloud(&p, &data.points)?;
    files.insert("points".to_string(), p);
    if let Some(labels) = &data.labels {
        let p = dir.join("labels.csv");
        let mut w = BufWriter::new(File::create(&p)?);
        writeln!(w, "label")?;
        for l in labels {
            writeln!(w, "{l}")?;
        }
        w.flush()?;
        files.insert("labels".to_string(), p);
    }
    if let Some(modes) = &data.modes {
        let p = dir.join("modes.json");
        write_json(&p, modes)?;
        files.insert("modes".to_string(), p);
    }
    Ok(files)
}

fn stage_inputs(config: &RunConfig, stage: Stage) -> Result<serde_json::Value> {
    let mut v = match stage {
        Stage::TrainAe => serde_json::json!({ "seed": config.seed, "data": config.data, "ae": config.ae }),
        Stage::FitOt => serde_json::json!({ "ot": config.ot }),
        Stage::TrainGan => serde_json::json!({ "gan": config.gan }),
        Stage::Eval => serde_json::json!({ "eval": config.eval }),
    };
    if stage == Stage::TrainAe && config.data.kind == DataKind::Idx {
        if let Some(path) = &config.data.idx_path {
            let bytes = fs::read(path).map_err(|e| Error::Missing { path: path.clone(), what: e.to_string() })?;
            v["idx_sha256"] = hex(&Sha256::digest(&bytes)).into();
        }
    }
    Ok(v)
}

/// Stage keys in pipeline order; each folds in its upstream key.
pub fn stage_keys(config: &RunConfig) -> Result<Vec<String>> {
    let mut keys = Vec::new();
    let mut upstream = String::new();
    for stage in Stage::ALL {
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(upstream.as_bytes());
        h.update(serde_json::to_string(&stage_inputs(config, stage)?)?.as_bytes());
        let key = hex(&h.finalize())[..KEY_CHARS].to_string();
        upstream = key.clone();
        keys.push(key);
    }
    Ok(keys)
}

pub fn run_id(config: &RunConfig) -> Result<String> {
    Ok(match &config.run_id {
        Some(id) => id.clone(),
        None => stage_keys(config)?[3].clone(),
    })
}

#[derive(Serialize, Deserialize, PartialEq)]
struct Marker {
    stage: Stage,
    key: String,
    artifacts: BTreeMap<String, String>,
    notes: Vec<String>,
}

struct Ctx<'a> {
    config: &'a RunConfig,
    out: &'a Path,
    root: RngStream,
    data: LoadedData,
    dirs: BTreeMap<Stage, PathBuf>,
}

type Artifacts = (BTreeMap<String, String>, Vec<String>);

impl Ctx<'_> {
    fn dir(&self, stage: Stage) -> &Path {
        &self.dirs[&stage]
    }

    fn artifact(&self, stage: Stage, name: &str) -> PathBuf {
        self.dir(stage).join(name)
    }

    fn record(&self, files: &[(&str, &str)]) -> BTreeMap<String, String> {
        files.iter().map(|(k, p)| (k.to_string(), rel(self.out, Path::new(p)))).collect()
    }

    fn load_ae(&self) -> Result<Autoencoder> {
        Autoencoder::from_json(&fs::read_to_string(self.artifact(Stage::TrainAe, "ae.json"))?)
    }

    fn load_codes(&self) -> Result<PointCloud> {
        read_cloud(&self.artifact(Stage::TrainAe, "codes.csv"))
    }

    fn load_map(&self) -> Result<(ExtendedMap, SdotCheckpoint)> {
        let codes = self.load_codes()?;
        let ck: SdotCheckpoint = read_json(&self.artifact(Stage::FitOt, "sdot.json"))?;
        let problem = SdotProblem::uniform(codes.clone())?;
        let rips = build_rips(&codes, ck.epsilon)?;
        let map = ExtendedMap::new(problem, ck.potential(), ck.cell_stats()?, rips, self.config.ot.neighbor_count)?;
        Ok((map, ck))
    }

    fn latent_sampler(&self) -> Result<Box<dyn LatentSampler>> {
        Ok(match self.config.gan.latent_source {
            LatentSource::Ot => Box::new(self.load_map()?.0),
            LatentSource::Gaussian => Box::new(GaussianLatent::fit(&self.load_codes()?)?),
        })
    }

    fn stage_rng(&self, stage: Stage) -> RngStream {
        self.root.split_named(stage.name())
    }

    fn train_ae(&self) -> Result<Artifacts> {
        let dir = self.dir(Stage::TrainAe);
        let arch = self.config.ae.architecture(self.data.points.dim());
        let (ae, history) =
            train_autoencoder(&self.data.points, &arch, &self.config.ae.schedule(), &self.stage_rng(Stage::TrainAe))?;
        let codes = encode_dataset(&ae, &self.data.points)?;
        let (ae_path, hist_path, codes_path) = (dir.join("ae.json"), dir.join("ae_history.json"), dir.join("codes.csv"));
        fs::write(&ae_path, ae.to_json()?)?;
        write_json(&hist_path, &history)?;
        write_cloud(&codes_path, &codes)?;
        let mut notes = Vec::new();
        if !history.below_threshold {
            notes.push(format!(
                "reconstruction MSE {} is not below the threshold {}",
                history.final_mse, history.threshold
            ));
        }
        let files = self.record(&[
            ("autoencoder", &ae_path.to_string_lossy()),
            ("history", &hist_path.to_string_lossy()),
            ("codes", &codes_path.to_string_lossy()),
        ]);
        Ok((files, notes))
    }

    fn fit_ot(&self) -> Result<Artifacts> {
        let dir = self.dir(Stage::FitOt);
        let codes = self.load_codes()?;
        let problem = SdotProblem::uniform(codes.clone())?;
        let report = solve(&problem, &self.config.ot.solver(problem.len()), &self.stage_rng(Stage::FitOt))?;
        if !report.converged {
            return Err(Error::invalid(format!(
                "transport solver stopped at deviation {} after {} iterations",
                report.max_deviation, report.iterations
            )));
        }
        let epsilon = match self.config.ot.epsilon {
            Some(e) => e,
            None => select_epsilon(&codes, codes.dim() + 1)?,
        };
        let rips = build_rips(&codes, epsilon)?;
        let (ck_path, rips_path, rep_path) = (dir.join("sdot.json"), dir.join("rips.json"), dir.join("solve.json"));
        write_json(&ck_path, &SdotCheckpoint::new(&problem, &report, epsilon, self.config.seed))?;
        write_json(&rips_path, &rips.summary())?;
        write_json(
            &rep_path,
            &serde_json::json!({
                "iterations": report.iterations,
                "converged": report.converged,
                "max_deviation": report.max_deviation,
                "trace": report.trace,
            }),
        )?;
        let files = self.record(&[
            ("potential", &ck_path.to_string_lossy()),
            ("rips", &rips_path.to_string_lossy()),
            ("solve", &rep_path.to_string_lossy()),
        ]);
        Ok((files, vec![]))
    }

    fn train_gan(&self) -> Result<Artifacts> {
        let dir = self.dir(Stage::TrainGan).to_path_buf();
        let ae = self.load_ae()?;
        let sampler = self.latent_sampler()?;
        let (model_path, hist_path) = (dir.join("gan.json"), dir.join("history.csv"));
        let mut rows: Vec<HistoryRow> = Vec::new();
        let (model, history) = train_gan_with(
            &ae,
            sampler.as_ref(),
            &self.data.points,
            &self.config.gan.schedule(),
            &self.stage_rng(Stage::TrainGan),
            |m, row| {
                // checkpoint after every epoch so a divergence keeps the last good state
                rows.push(*row);
                fs::write(&model_path, m.to_json()?)?;
                write_history_csv(&rows, BufWriter::new(File::create(&hist_path)?))
            },
        )?;
        fs::write(&model_path, model.to_json()?)?;
        write_history_csv(&history, BufWriter::new(File::create(&hist_path)?))?;
        let files =
            self.record(&[("model", &model_path.to_string_lossy()), ("history", &hist_path.to_string_lossy())]);
        Ok((files, vec![]))
    }

    fn eval(&self) -> Result<(Artifacts, EvalReport)> {
        let dir = self.dir(Stage::Eval);
        let rng = self.stage_rng(Stage::Eval);
        let cfg = &self.config.eval;
        let ae = self.load_ae()?;
        let ae_hist: AeHistory = read_json(&self.artifact(Stage::TrainAe, "ae_history.json"))?;
        let codes = self.load_codes()?;
        let (map, ck) = self.load_map()?;
        let solve_rep: serde_json::Value = read_json(&self.artifact(Stage::FitOt, "solve.json"))?;
        let model = GanModel::from_json(&fs::read_to_string(self.artifact(Stage::TrainGan, "gan.json"))?)?;
        let history = read_history_csv(BufReader::new(File::open(self.artifact(Stage::TrainGan, "history.csv"))?))?;
        let sampler = self.latent_sampler()?;

        let latents = sampler.sample_latent(cfg.samples, &rng.split_named("latents"))?;
        let samples = decode_samples_from(&model.generator, &latents)?;
        let decoded = decode_samples_from(&ae.decoder, &latents)?;
        let (lat_path, smp_path, rep_path) = (dir.join("latents.csv"), dir.join("samples.csv"), dir.join("report.json"));
        write_cloud(&lat_path, &latents)?;
        write_cloud(&smp_path, &samples)?;

        let gap = nearest_code_gap(&latents, &codes)?;
        let projection = project_to_codes(&latents, &codes)?;
        let mut w2_blocks = Vec::new();
        let mut start = 0;
        while start < latents.len() {
            let idx: Vec<usize> = (start..(start + cfg.w2_block).min(latents.len())).collect();
            w2_blocks.push(exact_w2(&latents.select(&idx), &projection.select(&idx))?);
            start += cfg.w2_block;
        }
        let cube = uniform_cube_cloud(&rng.split_named("uniformity"), codes.dim(), cfg.uniformity_samples);
        let uniformity = cell_uniformity(&cube, map.problem(), map.potential())?;
        let cov = self.data.modes.as_ref().map(|m| coverage(&samples, m)).transpose()?;
        let dec_cov = self.data.modes.as_ref().map(|m| coverage(&decoded, m)).transpose()?;
        let report = EvalReport {
            run_id: run_id(self.config)?,
            latent_source: self.config.gan.latent_source,
            sample_count: cfg.samples,
            epsilon: ck.epsilon,
            ae_mse: ae_hist.final_mse,
            ae_below_threshold: ae_hist.below_threshold,
            sdot_converged: ck.converged,
            sdot_iterations: solve_rep["iterations"].as_u64().unwrap_or(0) as usize,
            sdot_max_deviation: solve_rep["max_deviation"].as_f64().unwrap_or(f64::NAN),
            rips: map.rips().summary(),
            certificate_holds: gap.max <= ck.epsilon,
            latent_code_gap: gap,
            w2_blocks,
            uniformity,
            mode_shares: cov.as_ref().map(|c| c.shares()),
            gap_fraction: cov.as_ref().map(|c| c.gap_fraction()),
            coverage: cov,
            decoder_coverage: dec_cov,
            gan_epochs: history.len(),
            gan_final: history.last().copied(),
            d_real_ge_fake_fraction: (!history.is_empty()).then(|| {
                history.iter().filter(|r| r.d_real_mean >= r.d_fake_mean).count() as f64 / history.len() as f64
            }),
            content_loss_first: history.first().map(|r| r.l_img),
            content_loss_last: history.last().map(|r| r.l_img),
        };
        write_json(&rep_path, &report)?;
        let files = self.record(&[
            ("latents", &lat_path.to_string_lossy()),
            ("samples", &smp_path.to_string_lossy()),
            ("report", &rep_path.to_string_lossy()),
        ]);
        Ok(((files, vec![]), report))
    }
}

fn decode_samples_from(net: &crate::nn::Mlp, latents: &PointCloud) -> Result<PointCloud> {
    let m = crate::nn::Matrix::from_cloud(latents);
    net.predict(&m)?.to_cloud()
}

fn cached(dir: &Path, stage: Stage, key: &str) -> Option<Marker> {
    let m: Marker = read_json(&dir.join(MARKER)).ok()?;
    (m.stage == stage && m.key == key).then_some(m)
}

/// Runs the pipeline into `out`, rewriting the manifest after every stage.
/// On a stage failure the manifest records it and the error is returned.
pub fn run_pipeline(config: &RunConfig, out: &Path, opts: RunOptions) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let manifest_path = out.join(MANIFEST_FILE);
    let id = run_id(config)?;
    if let Ok(prev) = RunManifest::load(out) {
        if prev.config != *config {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration; use a fresh output directory",
                out.display()
            )));
        }
    }
    let keys = stage_keys(config)?;
    let data = load_dataset(config)?;
    let dataset =
        write_dataset(&data, &out.join("data"))?.into_iter().map(|(k, p)| (k, rel(out, &p))).collect();
    let dirs = Stage::ALL
        .iter()
        .zip(&keys)
        .map(|(&s, k)| (s, out.join("stages").join(format!("{}-{k}", s.name()))))
        .collect();
    let ctx = Ctx { config, out, root: RngStream::new(config.seed, 0), data, dirs };
    let mut manifest = RunManifest {
        run_id: id,
        config: config.clone(),
        dataset,
        stages: Stage::ALL
            .iter()
            .zip(&keys)
            .map(|(&stage, key)| StageRecord {
                stage,
                key: key.clone(),
                status: StageStatus::Pending,
                artifacts: BTreeMap::new(),
                notes: vec![],
                error: None,
            })
            .collect(),
        metrics: None,
    };
    for (k, &stage) in Stage::ALL.iter().enumerate() {
        if stage > opts.until {
            break;
        }
        let dir = ctx.dir(stage).to_path_buf();
        let reuse = opts.resume || (opts.reuse_upstream && stage < opts.until);
        if let Some(marker) = reuse.then(|| cached(&dir, stage, &keys[k])).flatten() {
            let rec = &mut manifest.stages[k];
            rec.status = StageStatus::Cached;
            rec.artifacts = marker.artifacts;
            rec.notes = marker.notes;
            if stage == Stage::Eval {
                manifest.metrics = Some(read_json(&dir.join("report.json"))?);
            }
            write_json(&manifest_path, &manifest)?;
            continue;
        }
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let result = match stage {
            Stage::TrainAe => ctx.train_ae(),
            Stage::FitOt => ctx.fit_ot(),
            Stage::TrainGan => ctx.train_gan(),
            Stage::Eval => ctx.eval().map(|(a, report)| {
                manifest.metrics = Some(report);
                a
            }),
        };
        let rec = &mut manifest.stages[k];
        match result {
            Ok((artifacts, notes)) => {
                write_json(&dir.join(MARKER), &Marker { stage, key: keys[k].clone(), artifacts: artifacts.clone(), notes: notes.clone() })?;
                rec.status = StageStatus::Completed;
                rec.artifacts = artifacts;
                rec.notes = notes;
                write_json(&manifest_path, &manifest)?;
            }
            Err(e) => {
                rec.status = StageStatus::Failed;
                rec.error = Some(e.to_string());
                write_json(&manifest_path, &manifest)?;
                return Err(Error::Stage { stage: stage.name().to_string(), source: Box::new(e) });
            }
        }
    }
    Ok(manifest)
}

/// Writes the latent scatter, loss curves and discriminator curves of a
/// completed run into `out/plots`.
pub fn emit_plots(manifest: &RunManifest, out: &Path) -> Result<Vec<PathBuf>> {
    let artifact = |stage: Stage, name: &str| -> Result<PathBuf> {
        manifest
            .stage(stage)
            .and_then(|s| s.artifacts.get(name))
            .map(|p| out.join(p))
            .ok_or_else(|| Error::Missing { path: out.join(MANIFEST_FILE), what: format!("{} {name}", stage.name()) })
    };
    let hist_path = artifact(Stage::TrainGan, "history")?;
    let history = read_history_csv(BufReader::new(
        File::open(&hist_path).map_err(|e| Error::Missing { path: hist_path.clone(), what: e.to_string() })?,
    ))?;
    let codes = read_cloud(&artifact(Stage::TrainAe, "codes")?)?;
    let latents = match artifact(Stage::Eval, "latents") {
        Ok(p) => read_cloud(&p)?,
        Err(_) => PointCloud::new(codes.dim())?,
    };
    let dir = out.join("plots");
    fs::create_dir_all(&dir)?;
    let files = [
        ("latent_scatter.svg", plot::scatter_svg("Latent codes and sampled latents", &[("codes", &codes), ("sampled", &latents)])),
        ("losses.svg", plot::loss_curves_svg(&history, manifest.config.gan.beta)),
        ("discriminator.svg", plot::discriminator_curves_svg(&history)),
    ];
    let mut written = Vec::new();
    for (name, svg) in files {
        let p = dir.join(name);
        fs::write(&p, svg)?;
        written.push(p);
    }
    Ok(written)
}
