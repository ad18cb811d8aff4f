use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spn_core::io::{read_label_pgm, write_label_pgm, TensorFile};
use spn_core::LabelMap;

fn spn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spn"))
        .args(args)
        .output()
        .expect("spawn spn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&spn(&[])), 2);
    assert_eq!(code(&spn(&["frobnicate"])), 2);
    assert_eq!(code(&spn(&["verify", "--size", "21"])), 2);
    assert_eq!(code(&spn(&["verify", "--kind", "five-way"])), 2);
    assert_eq!(code(&spn(&["verify", "--inject-fault", "nonsense"])), 2);
    assert_eq!(code(&spn(&["gradcheck", "--coords", "0"])), 2);
    assert_eq!(code(&spn(&["train", "--set", "epochz=3"])), 2);
    assert_eq!(code(&spn(&["--threads", "0", "verify"])), 2);
}

#[test]
fn help_exits_zero() {
    let o = spn(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("verify"));
}

#[test]
fn verify_writes_csv_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.csv");
    let o = spn(&[
        "verify",
        "--kind",
        "one-way",
        "--trials",
        "4",
        "--size",
        "6",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines.len() >= 5, "{csv}");
    assert!(lines[1..].iter().all(|l| l.contains("true")), "{csv}");
}

#[test]
fn gradcheck_fault_is_reported() {
    let o = spn(&["gradcheck", "--coords", "20"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let o = spn(&[
        "gradcheck",
        "--coords",
        "20",
        "--inject-fault",
        "perturb-backward",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
}

fn read_square(path: &Path) -> (usize, Vec<f64>) {
    let t = TensorFile::read(path).unwrap();
    let dims = t.dims_usize();
    assert_eq!(dims.len(), 2);
    assert_eq!(dims[0], dims[1]);
    (dims[0], t.data.to_vec())
}

#[test]
fn affinity_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("aff");
    let o = spn(&[
        "affinity",
        "--random",
        "--size",
        "5",
        "--dir",
        "bottom-to-top",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("lower_triangular true"));
    let (n, g) = read_square(&out.join("G.spnt"));
    let (_, a) = read_square(&out.join("A.spnt"));
    let (_, l) = read_square(&out.join("L.spnt"));
    assert_eq!(n, 25);
    for i in 0..n {
        let row: f64 = g[i * n..(i + 1) * n].iter().sum();
        assert!((row - 1.0).abs() < 1e-12);
        for j in 0..n {
            let eye = if i == j { 1.0 } else { 0.0 };
            // G = I - L, and A is its off-diagonal part
            assert!((g[i * n + j] - (eye - l[i * n + j])).abs() < 1e-12);
            if i != j {
                assert_eq!(a[i * n + j], g[i * n + j]);
            } else {
                assert_eq!(a[i * n + j], 0.0);
            }
        }
    }
    let csv = fs::read_to_string(out.join("sparsity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn affinity_of_zero_gates_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("aff");
    let o = spn(&[
        "affinity",
        "--zero",
        "--size",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let (n, g) = read_square(&out.join("G.spnt"));
    for i in 0..n {
        for j in 0..n {
            assert_eq!(g[i * n + j], if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn affinity_needs_a_gate_source() {
    let dir = tempfile::tempdir().unwrap();
    let o = spn(&["affinity", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn impulse_one_way_stays_on_its_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("imp.pgm");
    let o = spn(&[
        "impulse",
        "--kind",
        "one-way",
        "--size",
        "7",
        "--row",
        "3",
        "--col",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let img = read_label_pgm(&out).unwrap();
    for r in 0..7 {
        for c in 0..7 {
            let on = img.at(r, c) == 255;
            assert_eq!(on, r == 3 && c >= 2, "({r},{c})");
        }
    }
    assert!(stdout(&o).contains("support_pixels 5"));
}

#[test]
fn impulse_rejects_out_of_range_position() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("imp.pgm");
    let o = spn(&[
        "impulse",
        "--size",
        "5",
        "--row",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_reports_iou() {
    let dir = tempfile::tempdir().unwrap();
    let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let (p, g) = (dir.path().join("p.pgm"), dir.path().join("g.pgm"));
    write_label_pgm(&p, &pred).unwrap();
    write_label_pgm(&g, &gt).unwrap();
    let o = spn(&[
        "eval",
        "--pred",
        p.to_str().unwrap(),
        "--gt",
        g.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("class 0 IoU 0.500000"), "{s}");
    assert!(s.contains("class 1 IoU 0.666667"), "{s}");
    assert!(s.contains("mean IoU 0.583333"), "{s}");

    let bad = dir.path().join("bad.pgm");
    fs::write(&bad, b"P5\n2 2\n255\n\x00").unwrap();
    let o = spn(&[
        "eval",
        "--pred",
        bad.to_str().unwrap(),
        "--gt",
        g.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_train_refine_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let sets = [
        "--set",
        "train_size=6",
        "--set",
        "val_size=3",
        "--set",
        "image_size=32",
        "--set",
        "coarse_factor=4",
    ];

    let mut args = vec!["gen-data", "--out", data.to_str().unwrap()];
    args.extend(sets);
    let o = spn(&args);
    assert_eq!(code(&o), 0);
    let sha = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("manifest_sha256 ").map(str::to_string))
        .unwrap();
    assert_eq!(sha.len(), 64);
    assert!(data.join("config.txt").exists());

    // regeneration with the same seed is byte-identical
    let again = dir.path().join("data2");
    let mut args = vec!["gen-data", "--out", again.to_str().unwrap()];
    args.extend(sets);
    assert!(stdout(&spn(&args)).contains(&sha));

    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--set",
        "epochs=1",
    ];
    args.extend(sets);
    let o = spn(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epochs = 1"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,loss,iou_0,iou_1,mean_iou,seconds"));
    assert!(run.join("summary.txt").exists());

    let labels = dir.path().join("ref.pgm");
    let probs = dir.path().join("ref.spnt");
    let o = spn(&[
        "refine",
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--image",
        data.join("images/0000.ppm").to_str().unwrap(),
        "--coarse",
        data.join("coarse/0000.spnt").to_str().unwrap(),
        "--out-labels",
        labels.to_str().unwrap(),
        "--out-probs",
        probs.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let l = read_label_pgm(&labels).unwrap();
    assert_eq!((l.height(), l.width()), (32, 32));
    let p = TensorFile::read(&probs).unwrap();
    assert_eq!(p.dims_usize(), vec![32, 32, 2]);
    let v: Vec<f32> = p.data.to_vec();
    for px in v.chunks(2) {
        assert!((px[0] + px[1] - 1.0).abs() < 1e-5);
    }

    // a coarse map of the wrong size is a checkpoint/shape mismatch
    let o = spn(&[
        "refine",
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--image",
        data.join("images/0000.ppm").to_str().unwrap(),
        "--coarse",
        probs
            .to_str()
            .unwrap()
            .replace("ref.spnt", "missing.spnt")
            .as_str(),
        "--out-labels",
        labels.to_str().unwrap(),
    ]);
    assert_ne!(code(&o), 0);
}
