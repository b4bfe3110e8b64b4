//! End-to-end runs of the `nnoc` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nnoc::synth::structured_scene;
use nnoc::{write_ply, Model, Variant, VoxelSet};

fn nnoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnoc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn cloud(&self, name: &str, vs: &VoxelSet) -> PathBuf {
        let p = self.path(name);
        write_ply(vs, &p).unwrap();
        p
    }
}

#[test]
fn encode_decode_verify() {
    let f = Fixture::new();
    let cloud = structured_scene(6, 21);
    let ply = f.cloud("c.ply", &cloud);
    let bin = f.path("c.bin");
    let back = f.path("back.ply");

    let o = nnoc(&["encode", s(&ply), s(&bin), "--variant", "fnnoc2"]);
    assert!(o.status.success());
    let report = stdout(&o);
    assert!(report.contains("bpov "), "{report}");
    assert!(report.contains("bpov_content"), "{report}");

    let o = nnoc(&["decode", s(&bin), s(&back)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let raw = nnoc::read_ply(&back).unwrap();
    assert_eq!(nnoc::requantize(&raw, 6).unwrap(), cloud);

    let o = nnoc(&["verify", s(&ply), "--variant", "nnoc"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("LOSSLESS: OK"));
}

#[test]
fn tsv_report_is_tab_separated() {
    let f = Fixture::new();
    let ply = f.cloud("c.ply", &structured_scene(5, 2));
    let o = nnoc(&["encode", s(&ply), s(&f.path("c.bin")), "--report", "tsv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().all(|l| l.split('\t').count() == 2), "{text}");
}

#[test]
fn model_mismatches_exit_four() {
    let f = Fixture::new();
    let ply = f.cloud("c.ply", &structured_scene(5, 3));
    let model_a = f.path("a.model");
    let model_b = f.path("b.model");
    std::fs::write(&model_a, Model::init(Variant::Fnnoc, 1).to_bytes()).unwrap();
    std::fs::write(&model_b, Model::init(Variant::Fnnoc, 2).to_bytes()).unwrap();

    let o = nnoc(&["encode", s(&ply), s(&f.path("x.bin")), "--model", s(&model_a), "--variant", "nnoc"]);
    assert_eq!(o.status.code(), Some(4));

    let bin = f.path("c.bin");
    assert!(nnoc(&["encode", s(&ply), s(&bin), "--model", s(&model_a)]).status.success());
    let o = nnoc(&["decode", s(&bin), s(&f.path("o.ply")), "--model", s(&model_b)]);
    assert_eq!(o.status.code(), Some(4));

    let mut bytes = std::fs::read(&bin).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&bin, bytes).unwrap();
    let o = nnoc(&["decode", s(&bin), s(&f.path("o.ply")), "--model", s(&model_a)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn input_errors_exit_three() {
    let f = Fixture::new();
    let bad = f.path("bad.ply");
    std::fs::write(&bad, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n").unwrap();
    assert_eq!(nnoc(&["verify", s(&bad)]).status.code(), Some(3));
    assert_eq!(nnoc(&["decode", s(&f.path("missing.bin")), s(&f.path("o.ply"))]).status.code(), Some(3));
    let junk_model = f.path("junk.model");
    std::fs::write(&junk_model, b"NNOCMDL1 not really").unwrap();
    let ply = f.cloud("c.ply", &structured_scene(4, 1));
    assert_eq!(nnoc(&["verify", s(&ply), "--model", s(&junk_model)]).status.code(), Some(3));
    assert_eq!(nnoc(&["verify", s(&ply), "--depth", "40"]).status.code(), Some(2));
    assert_eq!(nnoc(&["verify"]).status.code(), Some(2));
}

#[test]
fn collect_statistics() {
    let f = Fixture::new();
    let single = VoxelSet::voxelize([[3, 5, 6]], 3).unwrap();
    let one = f.cloud("one.ply", &single);
    let field = |o: &Output, key: &str| -> u64 {
        stdout(o)
            .lines()
            .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
            .unwrap()
    };

    let o = nnoc(&["collect", s(&f.path("a.hist")), s(&one)]);
    assert!(o.status.success());
    assert_eq!(field(&o, "occurrences"), 8);
    assert!(field(&o, "unique") <= 8);
    let unique_one = field(&o, "unique");

    let o = nnoc(&["collect-contexts", s(&f.path("b.hist")), s(&one), s(&one)]);
    assert!(o.status.success());
    assert_eq!(field(&o, "occurrences"), 16);
    assert_eq!(field(&o, "unique"), unique_one);

    let other = f.cloud("other.ply", &structured_scene(5, 8));
    let o = nnoc(&["collect", s(&f.path("c.hist")), s(&other)]);
    let unique_other = field(&o, "unique");
    let o = nnoc(&["collect", s(&f.path("d.hist")), s(&one), s(&other)]);
    assert!(field(&o, "unique") <= unique_one + unique_other);
}

#[test]
fn train_log_and_learning() {
    let f = Fixture::new();
    let train_clouds: Vec<PathBuf> = (0..3)
        .map(|i| f.cloud(&format!("t{i}.ply"), &structured_scene(5, i)))
        .collect();
    let hist = f.path("t.hist");
    let mut args = vec!["collect", s(&hist), "--variant", "fnnoc3"];
    args.extend(train_clouds.iter().map(|p| s(p)));
    assert!(nnoc(&args).status.success());

    let model = f.path("m.model");
    let o = nnoc(&[
        "train", s(&hist), s(&model), "--seed", "5", "--batch-size", "128", "--max-epochs", "15",
        "--report", "tsv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows[0][0], 0.0);
    for w in rows.windows(2) {
        assert!(w[1][3] <= w[0][3], "best validation loss went up");
    }
    assert!(rows.last().unwrap()[3] < 1.0, "{text}");
    let loaded = Model::from_bytes(&std::fs::read(&model).unwrap()).unwrap();
    assert_eq!(loaded.variant(), Variant::Fnnoc3);
}

#[test]
fn bench_table() {
    let f = Fixture::new();
    let data = f.path("data");
    std::fs::create_dir(&data).unwrap();
    write_ply(&structured_scene(5, 1), data.join("alpha.ply")).unwrap();
    write_ply(&structured_scene(5, 2), data.join("beta.ply")).unwrap();
    let baseline = f.path("baseline.txt");
    std::fs::write(&baseline, "alpha 4.0\nbeta 5.0\n").unwrap();

    let o = nnoc(&["bench", s(&data), "--baseline", s(&baseline), "--report", "tsv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0], ["cloud", "voxels", "bpov", "bpov_content", "seconds", "baseline", "gain_pct"]);
    assert_eq!(rows.len(), 4);
    let bpov: Vec<f64> = rows[1..3].iter().map(|r| r[2].parse().unwrap()).collect();
    let avg: f64 = rows[3][2].parse().unwrap();
    assert!((avg - (bpov[0] + bpov[1]) / 2.0).abs() < 1e-3);
    let gain: f64 = rows[1][6].parse().unwrap();
    assert!((gain - 100.0 * (1.0 - bpov[0] / 4.0)).abs() < 0.05);

    let empty = f.path("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = nnoc(&["bench", s(&empty)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no .ply files"));
}
