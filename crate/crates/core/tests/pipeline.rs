use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use aeotgan::config::{DataKind, LatentSource, RunConfig};
use aeotgan::data::{load_idx, make_dataset, parse_idx, segment_endpoints, DatasetKind, DatasetParams, Idx};
use aeotgan::geometry::PointCloud;
use aeotgan::pipeline::{
    emit_plots, load_dataset, run_pipeline, stage_keys, write_dataset, RunManifest, RunOptions, Stage, StageStatus,
};
use aeotgan::plot::{discriminator_curves_svg, loss_curves_svg, scatter_svg};
use aeotgan::{Error, RngStream};
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3

[data]
kind = "gaussian-mixture"
per_mode = 100

[ae]
hidden = [16, 16]
epochs = 40

[gan]
epochs = 3
batch_size = 32

[eval]
samples = 1000
w2_block = 200
uniformity_samples = 20000
"#;

fn small() -> RunConfig {
    RunConfig::from_toml(SMALL).unwrap()
}

fn statuses(m: &RunManifest) -> Vec<StageStatus> {
    m.stages.iter().map(|s| s.status).collect()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                found.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    found.sort();
    found
}

#[test]
fn fresh_run_completes_every_stage() {
    let tmp = TempDir::new().unwrap();
    let m = run_pipeline(&small(), tmp.path(), RunOptions::default()).unwrap();
    assert_eq!(m.stages.iter().map(|s| s.stage).collect::<Vec<_>>(), Stage::ALL);
    assert_eq!(statuses(&m), vec![StageStatus::Completed; 4]);
    assert_eq!(RunManifest::load(tmp.path()).unwrap(), m);
    for s in &m.stages {
        for p in s.artifacts.values() {
            assert!(tmp.path().join(p).is_file(), "{p}");
        }
    }
    let r = m.metrics.unwrap();
    assert!(r.certificate_holds && r.latent_code_gap.max <= r.epsilon);
    assert!(r.w2_blocks.iter().all(|&w| w <= r.epsilon));
    assert_eq!(r.w2_blocks.len(), 5);
    assert_eq!(r.gan_epochs, 3);
    assert_eq!(r.run_id, m.run_id);
    let c = r.coverage.unwrap();
    assert_eq!(c.counts.iter().sum::<usize>() + c.gap, 1000);
}

#[test]
fn resume_reports_cached_stages() {
    let tmp = TempDir::new().unwrap();
    let cfg = small();
    let partial = run_pipeline(&cfg, tmp.path(), RunOptions { until: Stage::TrainAe, ..RunOptions::default() }).unwrap();
    assert_eq!(partial.stages[0].status, StageStatus::Completed);
    assert!(partial.stages[1..].iter().all(|s| s.status == StageStatus::Pending));
    assert!(partial.metrics.is_none());

    let resumed = run_pipeline(&cfg, tmp.path(), RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    assert_eq!(
        statuses(&resumed),
        vec![StageStatus::Cached, StageStatus::Completed, StageStatus::Completed, StageStatus::Completed]
    );
    let again = run_pipeline(&cfg, tmp.path(), RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    assert_eq!(statuses(&again), vec![StageStatus::Cached; 4]);
    assert_eq!(again.metrics, resumed.metrics);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = small();
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let straight = run_pipeline(&cfg, a.path(), RunOptions::default()).unwrap();
    run_pipeline(&cfg, b.path(), RunOptions { until: Stage::FitOt, ..RunOptions::default() }).unwrap();
    let resumed = run_pipeline(&cfg, b.path(), RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    assert_eq!(straight.metrics, resumed.metrics);
    let report = |m: &RunManifest, dir: &Path| fs::read(dir.join(&m.stage(Stage::Eval).unwrap().artifacts["report"])).unwrap();
    assert_eq!(report(&straight, a.path()), report(&resumed, b.path()));
}

#[test]
fn identical_configs_give_identical_bytes() {
    let cfg = small();
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    run_pipeline(&cfg, a.path(), RunOptions::default()).unwrap();
    run_pipeline(&cfg, b.path(), RunOptions::default()).unwrap();
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa, fb);
    assert!(fa.len() >= 17, "{fa:?}");
    for f in &fa {
        assert!(fs::read(a.path().join(f)).unwrap() == fs::read(b.path().join(f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn changed_config_in_existing_directory_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small();
    run_pipeline(&cfg, tmp.path(), RunOptions { until: Stage::TrainAe, ..RunOptions::default() }).unwrap();
    cfg.gan.beta = 10.0;
    let err = run_pipeline(&cfg, tmp.path(), RunOptions { resume: true, ..RunOptions::default() }).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn stage_keys_follow_upstream_changes() {
    let base = stage_keys(&small()).unwrap();
    assert_eq!(base.len(), 4);
    assert!(base.iter().all(|k| k.len() == 16 && k.chars().all(|c| c.is_ascii_hexdigit())));
    let mut c = small();
    c.eval.samples = 2000;
    let k = stage_keys(&c).unwrap();
    assert_eq!(k[..3], base[..3]);
    assert_ne!(k[3], base[3]);
    let mut c = small();
    c.ae.epochs = 41;
    assert!(stage_keys(&c).unwrap().iter().zip(&base).all(|(a, b)| a != b));
}

#[test]
fn failed_stage_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small();
    cfg.ot.max_iterations = Some(1);
    cfg.ot.tolerance = Some(1e-9);
    let err = run_pipeline(&cfg, tmp.path(), RunOptions::default()).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(stage, "fit-ot"),
        other => panic!("unexpected {other}"),
    }
    let m = RunManifest::load(tmp.path()).unwrap();
    assert_eq!(
        statuses(&m),
        vec![StageStatus::Completed, StageStatus::Failed, StageStatus::Pending, StageStatus::Pending]
    );
    assert!(m.stages[1].error.as_ref().unwrap().contains("iterations"));
}

#[test]
fn gaussian_latent_source_runs() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small();
    cfg.gan.latent_source = LatentSource::Gaussian;
    let m = run_pipeline(&cfg, tmp.path(), RunOptions::default()).unwrap();
    assert_eq!(m.metrics.unwrap().latent_source, LatentSource::Gaussian);
}

// ---- datasets

#[test]
fn gaussian_mixture_shape() {
    let ds = make_dataset(&DatasetParams::new(DatasetKind::GaussianMixture), &RngStream::new(1, 0)).unwrap();
    assert_eq!(ds.points.len(), 3000);
    assert_eq!(ds.points.dim(), 2);
    assert_eq!(ds.modes.len(), 3);
    for k in 0..3 {
        assert_eq!(ds.labels.iter().filter(|&&l| l == k).count(), 1000);
    }
    // sample means sit on their centers
    for k in 0..3 {
        let idx: Vec<usize> = (0..3000).filter(|&i| ds.labels[i] == k).collect();
        let mean = ds.points.select(&idx).mean().unwrap();
        let c = ds.modes.centers.point(k);
        assert!((mean[0] - c[0]).abs() < 0.01 && (mean[1] - c[1]).abs() < 0.01);
    }
}

fn min_cross_distance(ds: &aeotgan::data::Dataset) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in ds.points.iter().enumerate() {
        for (j, b) in ds.points.iter().enumerate() {
            if ds.labels[i] < ds.labels[j] {
                best = best.min(aeotgan::squared_distance(a, b).unwrap().sqrt());
            }
        }
    }
    best
}

#[test]
fn segments_are_disjoint() {
    let p = DatasetParams { per_mode: 300, ..DatasetParams::new(DatasetKind::Segments) };
    let ds = make_dataset(&p, &RngStream::new(2, 0)).unwrap();
    assert_eq!(ds.points.len(), 900);
    let sigma = p.sigma();
    assert!(min_cross_distance(&ds) > 6.0 * sigma);
    // each point hugs its own segment
    let ends = segment_endpoints(3);
    for (x, &l) in ds.points.iter().zip(&ds.labels) {
        let [a, b] = ends[l];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let t = (((x[0] - a[0]) * dx + (x[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
        let d = ((x[0] - a[0] - t * dx).powi(2) + (x[1] - a[1] - t * dy).powi(2)).sqrt();
        assert!(d < 6.0 * sigma, "{d}");
    }
}

#[test]
fn rings_are_disjoint() {
    let p = DatasetParams { per_mode: 300, ..DatasetParams::new(DatasetKind::TwoRings) };
    let ds = make_dataset(&p, &RngStream::new(3, 0)).unwrap();
    assert!(ds.labels.iter().all(|&l| l < 2));
    assert!(min_cross_distance(&ds) > 6.0 * p.sigma());
}

#[test]
fn same_seed_same_dataset_bytes() {
    let cfg = small();
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    write_dataset(&load_dataset(&cfg).unwrap(), a.path()).unwrap();
    let files = write_dataset(&load_dataset(&cfg).unwrap(), b.path()).unwrap();
    assert_eq!(files.keys().collect::<Vec<_>>(), ["labels", "modes", "points"]);
    for name in ["points.csv", "labels.csv", "modes.json"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    let mut other = small();
    other.seed = 4;
    let c = TempDir::new().unwrap();
    write_dataset(&load_dataset(&other).unwrap(), c.path()).unwrap();
    assert_ne!(fs::read(a.path().join("points.csv")).unwrap(), fs::read(c.path().join("points.csv")).unwrap());
}

#[test]
fn unknown_kind_is_rejected() {
    assert!(matches!("spirals".parse::<DatasetKind>(), Err(Error::UnknownKind(k)) if k == "spirals"));
    for k in ["gaussian-mixture", "segments", "two-rings"] {
        assert_eq!(k.parse::<DatasetKind>().unwrap().to_string(), k);
    }
    assert!(RunConfig::from_toml("[data]\nkind = \"spirals\"\n").is_err());
}

// ---- IDX

fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [count, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

#[test]
fn idx_images_parse_and_scale() {
    let bytes = idx_images(2, 2, 2, &[0, 255, 51, 102, 255, 0, 0, 255]);
    match parse_idx(&bytes).unwrap() {
        Idx::Images { rows, cols, points } => {
            assert_eq!((rows, cols, points.len(), points.dim()), (2, 2, 2, 4));
            assert_eq!(points.point(0), [0.0, 1.0, 0.2, 0.4]);
            assert_eq!(points.point(1)[0], 1.0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn idx_labels_parse() {
    let mut b = vec![0, 0, 8, 1, 0, 0, 0, 3];
    b.extend_from_slice(&[7, 0, 9]);
    assert_eq!(parse_idx(&b).unwrap(), Idx::Labels(vec![7, 0, 9]));
}

#[test]
fn idx_errors_carry_offsets() {
    let mut bad = idx_images(1, 1, 1, &[0]);
    bad[3] = 5;
    assert!(matches!(parse_idx(&bad), Err(Error::Format { offset: 0, .. })));
    let short = idx_images(2, 2, 2, &[1, 2, 3]);
    assert!(matches!(parse_idx(&short), Err(Error::Format { offset: 19, .. })));
    assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(parse_idx(&[0, 0, 8, 3, 0, 0, 0, 1, 0, 0]), Err(Error::Format { offset: 8, .. })));
    assert!(matches!(parse_idx(&idx_images(1, 0, 3, &[])), Err(Error::Format { .. })));
}

#[test]
fn idx_pipeline_runs_without_mode_metadata() {
    let tmp = TempDir::new().unwrap();
    let mut r = RngStream::new(8, 8);
    let pixels: Vec<u8> = (0..60 * 4).map(|_| (r.uniform() * 256.0) as u8).collect();
    let path = tmp.path().join("images.idx");
    fs::write(&path, idx_images(60, 2, 2, &pixels)).unwrap();
    assert_eq!(load_idx(&path).unwrap().len(), 60);
    let mut cfg = small();
    cfg.data.kind = DataKind::Idx;
    cfg.data.idx_path = Some(path.clone());
    cfg.data.limit = 50;
    let out = tmp.path().join("out");
    let m = run_pipeline(&cfg, &out, RunOptions::default()).unwrap();
    let rep = m.metrics.unwrap();
    assert!(rep.coverage.is_none() && rep.mode_shares.is_none());
    assert_eq!(PointCloud::read_csv(std::io::BufReader::new(fs::File::open(out.join("data/points.csv")).unwrap())).unwrap().len(), 50);
    assert!(!out.join("data/modes.json").exists());
}

// ---- config

#[test]
fn empty_config_takes_defaults() {
    let c = RunConfig::from_toml("").unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!((c.gan.beta, c.gan.alpha_hidden, c.gan.lr_ratio, c.gan.t_inner, c.gan.lr_g), (2000.0, 0.06, 15.0, 3, 2e-5));
    assert_eq!(c.gan.batch_size, 64);
    assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
}

#[test]
fn config_validation() {
    for bad in [
        "typo = 1",
        "[gan]\nbeta = -1.0",
        "[gan]\nalpha_hidden = -0.1",
        "[ot]\nepsilon = 0.0",
        "[ot]\nmc_samples = 0",
        "[ae]\nepochs = 0",
        "[data]\nkind = \"idx\"",
        "[eval]\nsamples = 0",
        "[gan]\nbatch_size = 30",
    ] {
        assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
    }
    assert!(matches!(RunConfig::load(Path::new("/nonexistent/run.toml")), Err(Error::Missing { .. })));
}

// ---- plots

#[test]
fn empty_scatter_is_a_valid_svg() {
    let empty = PointCloud::new(2).unwrap();
    let svg = scatter_svg("nothing", &[("codes", &empty), ("sampled", &empty)]);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(!svg.contains("NaN") && !svg.contains("inf"));
    assert!(!svg.contains("<circle"));
    assert_eq!(svg, scatter_svg("nothing", &[("codes", &empty), ("sampled", &empty)]));
    let curves = loss_curves_svg(&[], 2000.0);
    assert!(curves.starts_with("<svg") && !curves.contains("NaN"));
    assert!(discriminator_curves_svg(&[]).trim_end().ends_with("</svg>"));
}

#[test]
fn plots_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let m = run_pipeline(&small(), tmp.path(), RunOptions::default()).unwrap();
    let first: Vec<Vec<u8>> = emit_plots(&m, tmp.path()).unwrap().iter().map(|p| fs::read(p).unwrap()).collect();
    let files = emit_plots(&m, tmp.path()).unwrap();
    assert_eq!(files.len(), 3);
    for (p, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(p).unwrap(), bytes);
    }
    let scatter = String::from_utf8(first[0].clone()).unwrap();
    assert_eq!(scatter.matches("<circle").count(), 300 + 1000);
}

#[test]
fn plots_need_a_history() {
    let tmp = TempDir::new().unwrap();
    let m = run_pipeline(&small(), tmp.path(), RunOptions { until: Stage::FitOt, ..RunOptions::default() }).unwrap();
    assert!(matches!(emit_plots(&m, tmp.path()), Err(Error::Missing { .. })));
}

// ---- command line

fn cli(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_aeotgan")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn cli_runs_resumes_and_fails_cleanly() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("run.toml"), SMALL).unwrap();
    let ok = cli(&["run", "--config", "run.toml", "--out", "o"], tmp.path());
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    for f in ["latent_scatter.svg", "losses.svg", "discriminator.svg"] {
        assert!(tmp.path().join("o/plots").join(f).is_file());
    }
    let again = cli(&["eval", "--config", "run.toml", "--out", "o", "--resume"], tmp.path());
    assert!(String::from_utf8_lossy(&again.stdout).contains("Cached"));

    let reseeded = cli(&["train-ae", "--config", "run.toml", "--out", "o", "--seed", "9"], tmp.path());
    assert!(!reseeded.status.success());
    assert!(String::from_utf8_lossy(&reseeded.stderr).contains("different configuration"));

    let stage = cli(&["fit-ot", "--config", "run.toml", "--out", "p", "--seed", "9"], tmp.path());
    assert!(stage.status.success());
    let m = RunManifest::load(&tmp.path().join("p")).unwrap();
    assert_eq!(m.config.seed, 9);
    assert_eq!(m.stages[1].status, StageStatus::Completed);
    assert_eq!(m.stages[2].status, StageStatus::Pending);

    assert!(!cli(&["plot", "--out", "missing"], tmp.path()).status.success());
    fs::write(tmp.path().join("bad.toml"), "[gan]\nbeta = -1.0\n").unwrap();
    assert!(!cli(&["run", "--config", "bad.toml", "--out", "q"], tmp.path()).status.success());

    let data = cli(&["make-data", "--config", "run.toml", "--out", "d"], tmp.path());
    assert!(data.status.success());
    assert!(tmp.path().join("d/data/points.csv").is_file());
}
