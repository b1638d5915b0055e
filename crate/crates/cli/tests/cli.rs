use std::path::{Path, PathBuf};
use std::process::Command;

struct Out {
    dir: PathBuf,
    code: i32,
    stdout: String,
    stderr: String,
}

impl Out {
    fn run_dir(&self) -> PathBuf {
        let line = self
            .stdout
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("run: "))
            .expect("run line");
        self.dir.join(line)
    }

    fn value(&self, key: &str) -> &str {
        let prefix = format!("{key}: ");
        self.stdout
            .lines()
            .find_map(|l| l.strip_prefix(prefix.as_str()))
            .unwrap_or_else(|| panic!("no `{key}` line in\n{}", self.stdout))
    }
}

fn cxrnet(dir: &Path, args: &[&str]) -> Out {
    let o = Command::new(env!("CARGO_BIN_EXE_cxrnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    Out {
        dir: dir.to_path_buf(),
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> Out {
    let o = cxrnet(dir, args);
    assert_eq!(o.code, 0, "{args:?} failed:\n{}\n{}", o.stdout, o.stderr);
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Source manifests without images; the dataset command only reads rows.
fn fake_sources(dir: &Path, normal: usize, pneumonia: usize, covid: usize) -> (PathBuf, PathBuf) {
    let header = "path,label,source,partition,aug_recipe\n";
    let mut rsna = String::from(header);
    for i in 0..normal {
        rsna += &format!("n/{i}.png,Normal,RSNA,train,\n");
    }
    for i in 0..pneumonia {
        rsna += &format!("p/{i}.png,Pneumonia,RSNA,train,\n");
    }
    let mut cov = String::from(header);
    for i in 0..covid {
        cov += &format!("c/{i}.png,COVID19,COVIDCollection,train,\n");
    }
    let (a, b) = (dir.join("rsna.csv"), dir.join("covid.csv"));
    std::fs::write(&a, rsna).unwrap();
    std::fs::write(&b, cov).unwrap();
    (a, b)
}

/// Small synthetic corpus split into train/test manifests.
fn small_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let synth = ok(dir, &["synth", "--per-class", "10,10,8", "--resolution", "32"]);
    let corpus = synth.run_dir().join("corpus");
    let ds = ok(
        dir,
        &[
            "dataset",
            "--rsna",
            s(&corpus.join("rsna.csv")),
            "--covid",
            s(&corpus.join("covid.csv")),
            "--train-counts",
            "7,7,5",
            "--test-counts",
            "3,3,3",
        ],
    );
    (ds.run_dir().join("train.csv"), ds.run_dir().join("test.csv"))
}

fn train_toy(dir: &Path, train: &Path, mode: &str, epochs: &str) -> Out {
    ok(
        dir,
        &[
            "train",
            "--train",
            s(train),
            "--mode",
            mode,
            "--toy",
            "--resolution",
            "32",
            "--epochs",
            epochs,
            "--batch-size",
            "4",
        ],
    )
}

#[test]
fn arch_b3_reports_resolution_300() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(t.path(), &["arch", "--variant", "b3"]);
    assert_eq!(o.value("resolution"), "300");
    assert!(o.run_dir().join("arch.txt").is_file());
}

#[test]
fn arch_b0_imagenet_params() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(t.path(), &["arch", "--variant", "b0", "--imagenet-top"]);
    let params: f64 = o.value("params").parse().unwrap();
    assert!((params / 5_330_564.0 - 1.0).abs() <= 0.002, "{params}");
    assert_eq!(o.value("classes"), "1000");
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = cxrnet(t.path(), &["arch", "--variant", "b9"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("b9"));
    assert!(!t.path().join("runs").exists());
}

#[test]
fn dataset_balanced_prints_per_class_counts() {
    let t = tempfile::tempdir().unwrap();
    let (rsna, covid) = fake_sources(t.path(), 1200, 1200, 200);
    let o = ok(
        t.path(),
        &[
            "dataset",
            "--rsna",
            s(&rsna),
            "--covid",
            s(&covid),
            "--mode",
            "balanced",
            "--train-counts",
            "1100,1100,150",
            "--test-counts",
            "100,100,50",
        ],
    );
    assert!(o.stdout.lines().any(|l| l == "1000,1000,1000"), "{}", o.stdout);
    let train = std::fs::read_to_string(o.run_dir().join("train.csv")).unwrap();
    assert_eq!(train.lines().count(), 3001);
}

#[test]
fn dataset_raw_keeps_source_counts() {
    let t = tempfile::tempdir().unwrap();
    let (rsna, covid) = fake_sources(t.path(), 60, 50, 30);
    let o = ok(
        t.path(),
        &[
            "dataset",
            "--rsna",
            s(&rsna),
            "--covid",
            s(&covid),
            "--train-counts",
            "40,35,20",
            "--test-counts",
            "10,10,5",
        ],
    );
    assert_eq!(o.value("source train"), "40,35,20");
    assert!(o.stdout.lines().any(|l| l == "40,35,20"));
}

#[test]
fn dataset_is_reproducible_for_a_seed() {
    let t = tempfile::tempdir().unwrap();
    let (rsna, covid) = fake_sources(t.path(), 80, 80, 40);
    let args = |out: &'static str| {
        vec![
            "--seed",
            "11",
            "--out",
            out,
            "dataset",
            "--rsna",
            s(&rsna),
            "--covid",
            s(&covid),
            "--mode",
            "raw-plus-aug",
            "--covid-aug",
            "25",
            "--cap",
            "50",
            "--train-counts",
            "60,60,30",
            "--test-counts",
            "10,10,10",
        ]
    };
    let a = ok(t.path(), &args("a")).run_dir();
    let b = ok(t.path(), &args("b")).run_dir();
    for f in ["train.csv", "test.csv", "counts.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn train_toy_traces_every_epoch_and_infers() {
    let t = tempfile::tempdir().unwrap();
    let (train, test) = small_dataset(t.path());
    let run = train_toy(t.path(), &train, "flat", "10").run_dir();
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    for (i, r) in rows.iter().enumerate() {
        assert!(r.starts_with(&format!("{},", i + 1)), "{r}");
    }

    let model = run.join("model");
    let image = std::fs::read_to_string(&test)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .to_string();
    let o = ok(t.path(), &["infer", "--model", s(&model), "--image", &image]);
    assert!(["Normal", "Pneumonia", "COVID19"].contains(&o.value("label")));
    let total: f64 = ["p_normal", "p_pneumonia", "p_covid"]
        .iter()
        .map(|k| o.value(k).parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-4, "{total}");
}

#[test]
fn eval_hier_reports_both_stages() {
    let t = tempfile::tempdir().unwrap();
    let (train, test) = small_dataset(t.path());
    let root = train_toy(t.path(), &train, "hier", "1").run_dir();
    assert!(root.join("trace_root.csv").is_file() && root.join("trace_leaf.csv").is_file());
    let model = root.join("model");

    let o = ok(
        t.path(),
        &["eval", "--mode", "hier", "--test", s(&test), "--model", s(&model)],
    );
    assert!(o.stdout.contains("stage-1 confusion"), "{}", o.stdout);
    assert!(o.stdout.contains("stage-2 confusion"), "{}", o.stdout);
    let dir = o.run_dir();
    for f in ["confusion.csv", "stage1.csv", "stage2.csv", "predictions.csv"] {
        assert!(dir.join(f).is_file(), "{f}");
    }

    let wrong = cxrnet(
        t.path(),
        &["eval", "--mode", "flat", "--test", s(&test), "--model", s(&model)],
    );
    assert_eq!(wrong.code, 1);
}

#[test]
fn flags_beat_config_beat_defaults() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.cfg");
    std::fs::write(&cfg, "# arch defaults\nclasses = 5\nno_se = true\nseed = 9\n").unwrap();
    let c = s(&cfg);

    let o = ok(t.path(), &["--config", c, "arch", "--variant", "b0"]);
    assert_eq!(o.value("classes"), "5");
    assert_eq!(o.value("se"), "false");
    let snap = std::fs::read_to_string(o.run_dir().join("config.txt")).unwrap();
    assert!(snap.contains("seed = 9") && snap.contains("classes = 5"), "{snap}");

    let o = ok(t.path(), &["--config", c, "arch", "--variant", "b0", "--classes", "7"]);
    assert_eq!(o.value("classes"), "7");

    let o = ok(t.path(), &["arch", "--variant", "b0"]);
    assert_eq!(o.value("classes"), "3");
    assert_eq!(o.value("se"), "true");
}

#[test]
fn bad_config_and_missing_inputs() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_flag = 1\n").unwrap();
    let o = cxrnet(t.path(), &["--config", s(&cfg), "arch", "--variant", "b0"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("no-such-flag"), "{}", o.stderr);

    let o = cxrnet(t.path(), &["infer", "--model", "nope", "--image", "nope.png"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("does not exist"));
    assert!(!t.path().join("runs").exists());
}
