//! The `tumorseg` binary end to end on a miniature configuration.

use std::path::Path;
use std::process::{Command, Output};

use tumorseg::cli::{TrainSummary, EXIT_DATA, EXIT_USAGE};
use tumorseg::curriculum::TrainLog;
use tumorseg::metrics::MetricsReport;

const CONFIG: &str = r#"
seed = 4
[dataset]
cases = 5
split = 0.6
[phantom]
dims = [24, 48, 48]
[preprocess]
inplane_size = [16, 16]
subvol_depth = 8
subvol_stride = 4
[network]
base_channels = 2
channel_cap = 8
levels = 2
blocks_per_level = [1, 1]
[training]
epochs = 1
validation_fraction = 0.34
"#;

fn tumorseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tumorseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tumorseg(dir, args);
    assert!(
        out.status.success(),
        "tumorseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.toml"), CONFIG).unwrap();
    let c = ["--config", "c.toml"];
    let with = |rest: &[&'static str]| -> Vec<&'static str> {
        c.iter().copied().chain(rest.iter().copied()).collect()
    };

    assert!(ok(d, &with(&["phantom", "--out", "data"])).contains("3 train, 2 test"));
    let again = tumorseg(d, &with(&["phantom", "--out", "data"]));
    assert_eq!(again.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(d, &with(&["phantom", "--out", "data", "--force"]));

    ok(d, &with(&["preprocess", "--data", "data", "--out", "prep"]));
    for sub in ["whole", "patches", "validation", "cases"] {
        assert!(d.join("prep").join(sub).is_dir(), "{sub}");
    }

    ok(d, &with(&["train", "--data", "prep", "--out", "three"]));
    let summary: TrainSummary =
        serde_json::from_str(&std::fs::read_to_string(d.join("three/train.json")).unwrap())
            .unwrap();
    assert_eq!(summary.checkpoints.len(), 3);
    assert_eq!(summary.seed, 4);
    let log = TrainLog::read_jsonl(&d.join("three/train_log.jsonl")).unwrap();
    assert_eq!(log.stages.len(), 3);
    assert_eq!(log.config_hash, summary.config_hash);
    assert!(log.stages.iter().all(|s| s.validation_dice.len() == 1));

    ok(
        d,
        &with(&[
            "train",
            "--data",
            "prep",
            "--schedule",
            "naive",
            "--out",
            "naive",
        ]),
    );
    let naive: TrainSummary =
        serde_json::from_str(&std::fs::read_to_string(d.join("naive/train.json")).unwrap())
            .unwrap();
    assert_eq!(naive.checkpoints.len(), 1);
    ok(
        d,
        &with(&[
            "train",
            "--data",
            "prep",
            "--schedule",
            "cascade",
            "--out",
            "cascade",
        ]),
    );
    assert!(
        d.join("cascade/cascade_liver.ckpt").is_file()
            && d.join("cascade/cascade_tumor.ckpt").is_file()
    );

    let table = ok(
        d,
        &with(&[
            "eval",
            "--data",
            "prep",
            "--model",
            "three",
            "--name",
            "three-stage",
        ]),
    );
    assert!(table.starts_with("Approach"));
    ok(
        d,
        &with(&[
            "eval", "--data", "prep", "--model", "cascade", "--name", "cascade",
        ]),
    );
    ok(
        d,
        &with(&[
            "eval",
            "--data",
            "prep",
            "--ground-truth",
            "--out",
            ".",
            "--save-predictions",
        ]),
    );
    let gt = MetricsReport::load(&d.join("report_ground-truth.json")).unwrap();
    assert_eq!((gt.summary.dc, gt.summary.dg), (1.0, 1.0));
    let three = MetricsReport::load(&d.join("three/report_three-stage.json")).unwrap();
    assert_eq!(three.metadata["seed"], "4");
    assert_eq!(three.metadata["config_hash"], summary.config_hash);
    assert!(three.cases.iter().all(|c| c.seconds.is_some()));

    let report = ok(
        d,
        &[
            "report",
            "three/report_three-stage.json",
            "cascade/report_cascade.json",
            "report_ground-truth.json",
        ],
    );
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(
        lines[0].split_whitespace().collect::<Vec<_>>(),
        ["Approach", "DC", "DG", "VOE", "RVD", "ASSD", "MSD", "RMSD"]
    );

    let id = gt.cases[0].id.clone();
    let p = |s: &str| format!("predictions_ground-truth/{id}_{s}.raw");
    let (img, g, pr) = (p("img"), p("gt"), p("pred"));
    ok(
        d,
        &[
            "slices", "--volume", &img, "--gt", &g, "--pred", &pr, "--z", "0,1", "--out", "sl",
        ],
    );
    let ppm = std::fs::read(d.join("sl/slice_z001.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n# seed="));

    // a configuration with another topology refuses the trained weights
    std::fs::write(
        d.join("wide.toml"),
        CONFIG.replace("base_channels = 2", "base_channels = 4"),
    )
    .unwrap();
    let out = tumorseg(
        d,
        &[
            "--config",
            "wide.toml",
            "eval",
            "--data",
            "prep",
            "--model",
            "three",
            "--name",
            "x",
        ],
    );
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(tumorseg(d, &["frobnicate"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(
        tumorseg(d, &["train", "--schedule", "two-stage"])
            .status
            .code(),
        Some(EXIT_USAGE)
    );
    assert_eq!(
        tumorseg(d, &["phantom", "--cases", "1", "--out", "x"])
            .status
            .code(),
        Some(EXIT_USAGE)
    );
    assert_eq!(
        tumorseg(d, &["eval", "--data", "missing", "--ground-truth"])
            .status
            .code(),
        Some(EXIT_DATA)
    );
    std::fs::write(d.join("bad.toml"), "seed = \"seven\"").unwrap();
    assert_eq!(
        tumorseg(d, &["--config", "bad.toml", "report", "x.json"])
            .status
            .code(),
        Some(EXIT_USAGE)
    );
    assert!(tumorseg(d, &["--help"]).status.success());
}
