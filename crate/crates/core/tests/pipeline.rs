use std::path::Path;

use mldili::config::RunConfig;
use mldili::forward::observation::DataRecord;
use mldili::multilevel::Mode;
use mldili::pipeline::{self, Experiment, Layout, LisArtefact, RunOverrides};
use mldili::Error;

fn tiny(dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.hierarchy.max_level = 1;
    c.hierarchy.coarse_cells = 8;
    c.hierarchy.base_dim = 10;
    c.hierarchy.dim_scale = 10;
    c.output_dir = dir.to_path_buf();
    c.run.pilot_steps = 300;
    c.run.write_traces = true;
    c
}

#[test]
fn data_generation_is_reproducible_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let layout = Layout::new(dir.path());
    let first = pipeline::generate_data(&cfg, false).unwrap();
    assert_eq!(first.y.len(), 71);
    let bytes = (std::fs::read(layout.data()).unwrap(), std::fs::read(layout.truth()).unwrap());
    let err = pipeline::generate_data(&cfg, false).unwrap_err();
    assert!(err.is_config(), "{err}");
    pipeline::generate_data(&cfg, true).unwrap();
    assert_eq!(std::fs::read(layout.data()).unwrap(), bytes.0);
    assert_eq!(std::fs::read(layout.truth()).unwrap(), bytes.1);
}

#[test]
fn noise_level_follows_peak_convention() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.snr = 1e12;
    let data = pipeline::generate_data(&cfg, false).unwrap();
    let exp = Experiment::prepare(&cfg).unwrap();
    let truth = pipeline::read_truth(&exp.layout).unwrap();
    let (clean, _) = exp.model(1, &data).unwrap().observe(&truth).unwrap();
    let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((data.sigma - peak / 1e12).abs() <= 1e-15 * peak);
    for (y, f) in data.y.iter().zip(&clean) {
        assert!((y - f).abs() < 1e-9 * peak, "{y} vs {f}");
    }
}

#[test]
fn subspace_build_requires_data() {
    let dir = tempfile::tempdir().unwrap();
    let err = pipeline::build_lis(&tiny(dir.path())).unwrap_err();
    assert!(matches!(err, Error::MissingArtefact { .. }), "{err}");
}

#[test]
fn subspace_artefact_round_trips_and_dominates_single_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::generate_data(&cfg, false).unwrap();
    let (art, summary) = pipeline::build_lis(&cfg).unwrap();
    let back = LisArtefact::read(&Layout::new(dir.path()).lis()).unwrap();
    assert_eq!(back, art);
    assert_eq!(summary.levels.len(), 2);
    for row in &summary.levels {
        let single = row.single_level_rank.unwrap();
        assert!(row.cumulative_rank >= single, "{} < {single}", row.cumulative_rank);
        let sigma = &art.levels[row.level].sigma_r;
        assert_eq!(sigma.nrows(), row.cumulative_rank);
        assert!((sigma - sigma.transpose()).amax() < 1e-12);
    }
    let g = art.basis.dense(1);
    let gram = g.transpose() * &g;
    assert!((gram - nalgebra::DMatrix::identity(g.ncols(), g.ncols())).amax() < 1e-10);
    assert!(summary.table().lines().count() == 3);
}

#[test]
fn truncated_artefact_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::generate_data(&cfg, false).unwrap();
    pipeline::build_lis(&cfg).unwrap();
    let path = Layout::new(dir.path()).lis();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(LisArtefact::read(&path), Err(Error::Format { .. })));
}

#[test]
fn huge_threshold_gives_empty_subspace_and_complement_only_sampler() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.lis.threshold = 1e12;
    cfg.lis.single_level_comparison = false;
    cfg.lis.timing_matvecs = 0;
    pipeline::generate_data(&cfg, false).unwrap();
    let (art, _) = pipeline::build_lis(&cfg).unwrap();
    assert_eq!(art.basis.rank(1), 0);
    cfg.run.mode = Mode::Dili;
    cfg.run.samples = Some(vec![200]);
    cfg.run.write_traces = false;
    let dili = pipeline::run(&cfg).unwrap().run;
    assert_eq!(dili.report.levels.len(), 1);
    let dt = cfg.proposal.dt_perp;
    cfg.proposal.pcn_a = (2.0 - dt) / (2.0 + dt);
    cfg.run.mode = Mode::Pcn;
    let pcn = pipeline::run(&cfg).unwrap().run;
    let (a, b) = (&dili.base[0], &pcn.base[0]);
    assert_eq!(a.accepted, b.accepted);
    for (x, y) in a.misfits.iter().zip(&b.misfits) {
        assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn every_mode_runs_and_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::generate_data(&cfg, false).unwrap();
    pipeline::build_lis(&cfg).unwrap();
    for mode in Mode::ALL {
        let c = RunOverrides {
            mode: Some(mode),
            eps: Some(0.05),
            seed: Some(9),
            workers: Some(1),
        }
        .apply(&cfg)
        .unwrap();
        let out = pipeline::run(&c).unwrap();
        let levels = if mode.is_multilevel() { 2 } else { 1 };
        assert_eq!(out.run.report.levels.len(), levels, "{mode}");
        for f in ["report.json", "levels.csv", "iact.csv"] {
            assert!(out.dir.join(f).is_file(), "{mode}: {f}");
        }
        let top = 1;
        assert!(out.dir.join(format!("trace_level{top}.csv")).is_file());
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.dir.join("report.json")).unwrap()).unwrap();
        assert_eq!(doc["config"]["run"]["seed"], 9);
        assert_eq!(doc["data_sha256"].as_str().unwrap().len(), 64);
        let iact = doc["iact"].as_array().unwrap();
        assert_eq!(iact.len(), levels);
        assert!(iact[0]["tau_target"].as_f64().unwrap() >= 1.0);
        assert!(iact[0]["tau_params_mean"].as_f64().unwrap() >= 1.0);
    }
    let csv = pipeline::summarize_runs(&[Layout::new(dir.path()).runs()], None).unwrap();
    assert_eq!(csv.lines().count(), 1 + Mode::ALL.len());
}

#[test]
fn runs_are_reproducible_from_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    pipeline::generate_data(&cfg, false).unwrap();
    pipeline::build_lis(&cfg).unwrap();
    cfg.run.samples = Some(vec![300, 200]);
    let a = pipeline::run(&cfg).unwrap().run.report;
    let b = pipeline::run(&cfg).unwrap().run.report;
    assert_eq!(a.estimate, b.estimate);
    assert_eq!(a.allocation, b.allocation);
}

#[test]
fn single_report_gives_single_row_and_subspace_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    pipeline::generate_data(&cfg, false).unwrap();
    pipeline::build_lis(&cfg).unwrap();
    cfg.run.mode = Mode::Pcn;
    cfg.run.samples = Some(vec![200]);
    let out = pipeline::run(&cfg).unwrap();
    let csv = pipeline::summarize_runs(&[out.dir.join("report.json")], None).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("pCN,"));
    let layout = Layout::new(dir.path());
    let with_lis = pipeline::summarize_runs(&[out.dir.clone()], Some(&layout.lis_summary())).unwrap();
    assert_eq!(with_lis.lines().count(), 4);
    assert!(with_lis.contains("LIS-reuse") && with_lis.contains("LIS-fresh"));
}

#[test]
fn run_without_target_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = pipeline::run(&cfg).err().expect("run without a target must fail");
    assert!(err.is_config(), "{err}");
}

#[test]
fn data_record_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    pipeline::generate_data(&cfg, false).unwrap();
    cfg.data.sensors = Some(vec![[0.5, 0.5]]);
    let exp = Experiment::prepare(&cfg).unwrap();
    assert!(exp.read_data().unwrap_err().is_config());
    let rec: DataRecord = DataRecord::read_json(&exp.layout.data()).unwrap();
    assert_eq!(rec.sensors.len(), 71);
}
