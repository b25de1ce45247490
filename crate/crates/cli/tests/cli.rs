use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5
output = "OUT"
[dataset]
kind = "rings"
n = 200
hw = 8
classes = 2
[training]
epochs = 4
batch = 16
[[model]]
id = "a"
arch = "mlp:8"
[[model]]
id = "b"
arch = "linear"
[attack]
presets = ["fgsm", "da-fgsm"]
eval_size = 8
params = { samples = 2 }
"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_da-attack")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(dir: &Path, output: &Path) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, CONFIG.replace("OUT", output.to_str().unwrap())).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&cli(&["--help"])), 0);
    assert_eq!(code(&cli(&[])), 2);
    assert_eq!(code(&cli(&["attack", "--bogus"])), 2);
    assert_eq!(code(&cli(&["train", "--config", "/nonexistent/exp.toml"])), 2);
}

#[test]
fn dataset_gen_is_deterministic_and_import_checks_format() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    for name in ["a.dakd", "b.dakd"] {
        let out = cli(&["dataset", "gen", "rings", "--n", "30", "--hw", "6", "--seed", "3", "-o", &p(name)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let bytes = fs::read(p("a.dakd")).unwrap();
    assert_eq!(bytes, fs::read(p("b.dakd")).unwrap());
    assert_eq!(code(&cli(&["dataset", "import", &p("a.dakd")])), 0);
    fs::write(p("cut.dakd"), &bytes[..bytes.len() - 5]).unwrap();
    assert_eq!(code(&cli(&["dataset", "import", &p("cut.dakd")])), 3);
    assert_eq!(code(&cli(&["dataset", "import", &p("missing.dakd")])), 2);
    assert_eq!(code(&cli(&["dataset", "gen", "rings", "--seed", "1", "--contrast", "2", "-o", &p("c.dakd")])), 2);
}

#[test]
fn run_attack_sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &dir.path().join("runs"));
    let run = cli(&["--workers", "2", "run", "--config", &config]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let run_dir = String::from_utf8(run.stdout).unwrap().trim().to_string();
    for f in ["dataset.dakd", "manifest.json", "models/a.dakm", "report.json", "report.csv"] {
        assert!(Path::new(&run_dir).join(f).exists(), "missing {f}");
    }

    let attack = cli(&["attack", "--config", &config, "--source", "ensemble", "--attack", "mi-fgsm", "--epsilon", "8", "--unit", "255"]);
    assert_eq!(code(&attack), 0);
    let csv = String::from_utf8(attack.stdout).unwrap();
    assert!(csv.starts_with("#schema=da-report/1"));
    assert_eq!(csv.lines().count(), 2 + 2);

    let sweep = cli(&["sweep", "--config", &config, "--param", "N", "--grid", "1,3", "--sources", "b"]);
    assert_eq!(code(&sweep), 0);
    assert_eq!(String::from_utf8(sweep.stdout).unwrap().lines().count(), 2);

    let report = cli(&["report", "--config", &config]);
    assert_eq!(code(&report), 0);
    // Two presets from two sources plus the ensemble run, two targets each.
    assert_eq!(String::from_utf8(report.stdout).unwrap().lines().count(), 2 + 5 * 2);

    assert_eq!(code(&cli(&["attack", "--config", &config, "--source", "zzz"])), 2);
    assert_eq!(code(&cli(&["attack", "--config", &config, "--source", "a", "--attack", "cw"])), 2);
    assert_eq!(code(&cli(&["sweep", "--config", &config, "--param", "gamma"])), 2);
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let config = write_config(dir.path(), &blocker.join("runs"));
    assert_eq!(code(&cli(&["train", "--config", &config])), 4);
}
