use std::fs;
use std::path::Path;

use da_core::analysis::{SweepParam, TransferReport};
use da_core::harness::{cmd_report, cmd_train, run_pipeline, AttackParams, ExperimentConfig, Workspace, ENSEMBLE};

const CONFIG: &str = r#"
seed = 21
[dataset]
kind = "rings"
n = 320
hw = 8
classes = 3
contrast = 0.15
jitter = 0.1
[training]
epochs = 12
batch = 16
warmup = 2
[[model]]
id = "n0"
arch = "mlp:16"
[[model]]
id = "n1"
arch = "cnn:2,8"
[[model]]
id = "r0"
arch = "mlp:16"
training = "pgd"
train_steps = 3
[attack]
presets = ["i-fgsm", "mi-fgsm", "da-mi-fgsm"]
sources = ["n0", "n1", "ensemble"]
eval_size = 16
params = { samples = 4 }
[[sweep]]
parameter = "N"
grid = [2, 4]
"#;

fn config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(CONFIG).unwrap();
    c.output = dir.to_path_buf();
    c
}

fn run_with_workers(workers: usize) -> (Vec<u8>, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
    let run = pool.install(|| run_pipeline(&config(dir.path()))).unwrap();
    (fs::read(run.join("report.json")).unwrap(), fs::read(run.join("report.csv")).unwrap())
}

#[test]
fn pipeline_is_byte_identical_across_runs_and_workers() {
    let one = run_with_workers(1);
    assert_eq!(one, run_with_workers(1));
    assert_eq!(one, run_with_workers(4));
}

#[test]
fn report_rows_cover_presets_sources_targets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    run_pipeline(&cfg).unwrap();
    let report = TransferReport::from_json(&fs::read_to_string(cfg.run_dir().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 3 * 3 * 3);
    let csv = fs::read_to_string(cfg.run_dir().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + report.rows.len());
    for r in report.rows.iter().filter(|r| r.source == ENSEMBLE) {
        assert_eq!(r.white_box, r.target != "r0");
    }
    // Every preset has two single normal sources, so each gets a matrix.
    assert_eq!(report.similarity.len(), 3);
    let curve = &report.sweeps[0];
    assert_eq!(curve.parameter, SweepParam::Samples);
    assert_eq!(curve.points.iter().map(|p| p.value).collect::<Vec<_>>(), [2.0, 4.0]);
    assert!(curve.points.iter().all(|p| p.rows.len() == 3));
    let eval = report.evaluation.unwrap();
    assert!(eval.used > 0 && eval.used == eval.correct_by_all.min(16));
}

#[test]
fn white_box_dominates_black_box() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(&config(dir.path())).unwrap();
    for source in ["n0", "n1"] {
        let r = ws.attack("i-fgsm", source, &AttackParams::default()).unwrap();
        let wb = r.rows.iter().find(|r| r.white_box).unwrap().success_rate;
        assert!(wb >= 95.0, "{source}: white-box success {wb}");
        for row in r.rows.iter().filter(|r| !r.white_box) {
            assert!(wb >= row.success_rate, "{source} -> {}: {} > {wb}", row.target, row.success_rate);
        }
    }
}

#[test]
fn merge_is_order_independent() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(&config(dir.path())).unwrap();
    let none = AttackParams::default();
    let a = ws.attack("i-fgsm", "n0", &none).unwrap();
    let b = ws.attack("mi-fgsm", "n1", &none).unwrap();
    let c = ws.attack("i-fgsm", ENSEMBLE, &none).unwrap();
    let abc = TransferReport::merge(&[a.clone(), b.clone(), c.clone()]).unwrap();
    let cab = TransferReport::merge(&[c.clone(), a.clone(), b.clone()]).unwrap();
    assert_eq!(abc.rows, cab.rows);
    let nested = TransferReport::merge(&[TransferReport::merge(&[a, b]).unwrap(), c]).unwrap();
    assert_eq!(abc.to_json().unwrap(), nested.to_json().unwrap());
}

#[test]
fn report_rejects_artifacts_of_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let ws = Workspace::open(&cfg).unwrap();
    ws.attack("i-fgsm", "n0", &AttackParams::default()).unwrap();
    // Copy the artifacts into the run directory of a different config.
    let mut other = cfg.clone();
    other.attack.eval_size = 15;
    let from = cfg.run_dir().join("reports");
    let to = other.run_dir().join("reports");
    fs::create_dir_all(&to).unwrap();
    for e in fs::read_dir(&from).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, to.join(p.file_name().unwrap())).unwrap();
    }
    assert_eq!(cmd_report(&other).unwrap_err().exit_code(), 3);
}

#[test]
fn retraining_reproduces_the_manifest() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, first) = cmd_train(&config(a.path())).unwrap();
    let (_, second) = cmd_train(&config(b.path())).unwrap();
    assert_eq!(first, second);
    // A second run in the same directory resumes from the model files.
    let (_, resumed) = cmd_train(&config(a.path())).unwrap();
    assert_eq!(first, resumed);
    let pgd = |id: &str| first.models.iter().find(|m| m.id == id).unwrap().pgd_accuracy;
    assert!(pgd("r0") > pgd("n0").max(pgd("n1")), "{first:?}");
}
