//! Behavior of the installed binary: output contracts, exit codes, and
//! determinism under fixed seeds.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{GrayImage, Rgb, RgbImage};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_visnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf8 stderr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY_DEMO: &str = r#"
p = 3
k = 4
steps = 20
seed = 1

[data]
identities = 6
images_per_identity = 12
eval_per_identity = 4
queries_per_identity = 2

[net]
classes = 6
"#;

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("demo.toml");
    std::fs::write(&path, TINY_DEMO).unwrap();
    path
}

fn run_tiny_demo(dir: &Path) -> (Output, PathBuf) {
    let cfg = write_tiny_config(dir);
    let out_dir = dir.join("out");
    let out = run(&[
        "train-demo",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--quiet",
    ]);
    (out, out_dir)
}

#[test]
fn param_count_prints_table_and_reference_status() {
    let out = run(&["param-count"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("component=backbone params=23508032"));
    assert!(text.contains("component=semantic_head params=2628100"));
    assert!(text.contains("component=classifier params=1538048"));
    assert!(text.contains("component=bn_neck params=4096"));
    assert!(text.contains("status=DISCREPANCY"));
    assert!(text.contains("23,508,032"));
}

#[test]
fn param_count_assert_reference_passes_on_default() {
    let out = run(&["param-count", "--assert-reference"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
}

#[test]
fn param_count_rejects_malformed_spec_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arch.toml");
    std::fs::write(
        &path,
        "[[component]]\nname = \"x\"\n[[component.layer]]\nkind = >>>\n",
    )
    .unwrap();
    let out = run(&["param-count", "--spec", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("arch.toml"), "stderr: {err}");
    assert!(err.contains("line 4"), "stderr: {err}");
}

#[test]
fn param_count_written_default_counts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.toml");
    let out = run(&["param-count", "--write-default", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let out = run(&[
        "param-count",
        "--spec",
        path.to_str().unwrap(),
        "--assert-reference",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("component=total params=36618312"));
}

#[test]
fn param_count_assert_fails_on_edited_spec() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("edited.toml");
    run(&["param-count", "--write-default", path.to_str().unwrap()]);
    let text = std::fs::read_to_string(&path).unwrap();
    // Shrink the classifier so a derivable row goes wrong.
    let text = text.replace("c_out = 751", "c_out = 750");
    assert_ne!(text, std::fs::read_to_string(&path).unwrap());
    std::fs::write(&path, text).unwrap();
    let out = run(&[
        "param-count",
        "--spec",
        path.to_str().unwrap(),
        "--assert-reference",
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("status=MISMATCH"));
}

#[test]
fn grad_check_passes_and_reports_per_parameter() {
    let out = run(&["grad-check", "--seed", "0", "--probes", "2"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("head.classifier.w"));
    assert!(text.contains("fusion.attn1.w"));
    assert!(text.contains("pass"));
}

#[test]
fn grad_check_sabotage_is_caught() {
    let out = run(&[
        "grad-check",
        "--seed",
        "0",
        "--probes",
        "2",
        "--sabotage",
        "head.classifier.w",
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("exceeds tolerance"));
}

#[test]
fn grad_check_unknown_sabotage_param_is_input_error() {
    let out = run(&["grad-check", "--sabotage", "nope.w", "--probes", "1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_demo_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (out1, out_dir) = run_tiny_demo(dir.path());
    assert_eq!(code(&out1), 0, "stderr: {}", stderr(&out1));
    let text = stdout(&out1);
    assert!(text.contains("loss_step10="));
    assert!(text.contains("rank1="));
    for f in ["query.vneb", "gallery.vneb", "manifest.csv"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let q1 = std::fs::read(out_dir.join("query.vneb")).unwrap();

    let dir2 = tempfile::tempdir().unwrap();
    let (out2, out_dir2) = run_tiny_demo(dir2.path());
    // Identical apart from the `wrote <path>` lines, which carry the
    // run-specific output directory.
    let logs = |s: &str| -> Vec<String> {
        s.lines()
            .filter(|l| !l.starts_with("wrote "))
            .map(String::from)
            .collect()
    };
    assert_eq!(logs(&stdout(&out1)), logs(&stdout(&out2)));
    assert_eq!(q1, std::fs::read(out_dir2.join("query.vneb")).unwrap());
}

#[test]
fn train_demo_log_lines_have_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = run(&[
        "train-demo",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
        "--steps",
        "5",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let steps: Vec<&str> = text.lines().filter(|l| l.starts_with("step ")).collect();
    assert_eq!(steps.len(), 5);
    assert!(steps[0].contains(" w "), "log line: {}", steps[0]);
}

#[test]
fn train_demo_divergence_exits_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = run(&[
        "train-demo",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
        "--quiet",
        "--lr",
        "1e150",
        "--steps",
        "10",
    ]);
    assert_eq!(code(&out), 3);
    assert!(
        stderr(&out).contains("diverged at step"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn train_demo_rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "stepz = 10\n").unwrap();
    let out = run(&[
        "train-demo",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("stepz"), "stderr: {}", stderr(&out));
}

#[test]
fn train_demo_written_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.toml");
    let out = run(&["train-demo", "--write-config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("steps = 300"));
    assert!(text.contains("[dwa]"));
    assert!(text.contains("[fidi]"));
}

#[test]
fn eval_matches_train_demo_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (out, out_dir) = run_tiny_demo(dir.path());
    let summary = stdout(&out);
    let eval_out = run(&[
        "eval",
        "--query",
        out_dir.join("query.vneb").to_str().unwrap(),
        "--gallery",
        out_dir.join("gallery.vneb").to_str().unwrap(),
        "--manifest",
        out_dir.join("manifest.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&eval_out), 0, "stderr: {}", stderr(&eval_out));
    let eval_text = stdout(&eval_out);
    // Embeddings round through f32 storage; ranking figures must agree with
    // the in-process evaluation the demo printed.
    for key in ["rank1=", "map=", "evaluated="] {
        let expect = summary.lines().find(|l| l.starts_with(key)).unwrap();
        assert!(
            eval_text.contains(expect),
            "missing `{expect}` in:\n{eval_text}"
        );
    }
    let ap_file = out_dir.join("query_ap.txt");
    assert!(ap_file.exists());
    let ap_text = std::fs::read_to_string(ap_file).unwrap();
    assert_eq!(ap_text.lines().count(), 12);
    assert!(ap_text.lines().all(|l| l.starts_with("query=")));
}

#[test]
fn eval_self_retrieval_across_cameras_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out_dir) = run_tiny_demo(dir.path());
    // Query embeddings against themselves, with gallery metadata taken from
    // the query split but distinct camids; build that manifest by swapping
    // split labels.
    let manifest = std::fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    let doctored: String = manifest
        .lines()
        .map(|l| {
            if let Some(rest) = l.strip_suffix(",query") {
                // Re-emit the row once per split with different camids.
                let mut parts: Vec<&str> = rest.split(',').collect();
                let camid_bumped = format!("{}", parts[2].parse::<i64>().unwrap() + 40);
                let q = format!("{},query", rest);
                parts[0] = Box::leak(format!("{}_g", parts[0]).into_boxed_str());
                parts[2] = Box::leak(camid_bumped.into_boxed_str());
                format!("{},gallery\n{q}", parts.join(","))
            } else if l.ends_with(",gallery") {
                String::new()
            } else {
                l.to_string()
            }
        })
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n");
    let m_path = out_dir.join("self.csv");
    std::fs::write(&m_path, doctored + "\n").unwrap();
    let out = run(&[
        "eval",
        "--query",
        out_dir.join("query.vneb").to_str().unwrap(),
        "--gallery",
        out_dir.join("query.vneb").to_str().unwrap(),
        "--manifest",
        m_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(
        stdout(&out).contains("rank1=1.000000"),
        "out: {}",
        stdout(&out)
    );
}

#[test]
fn eval_corrupt_magic_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out_dir) = run_tiny_demo(dir.path());
    let bad = out_dir.join("broken.vneb");
    let mut bytes = std::fs::read(out_dir.join("query.vneb")).unwrap();
    bytes[0..4].copy_from_slice(b"JUNK");
    std::fs::write(&bad, bytes).unwrap();
    let out = run(&[
        "eval",
        "--query",
        bad.to_str().unwrap(),
        "--gallery",
        out_dir.join("gallery.vneb").to_str().unwrap(),
        "--manifest",
        out_dir.join("manifest.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("broken.vneb"), "stderr: {err}");
    assert!(err.contains("bad magic"), "stderr: {err}");
}

#[test]
fn eval_row_count_mismatch_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out_dir) = run_tiny_demo(dir.path());
    // The gallery file has 12 rows; the manifest lists 12 query images too,
    // but swapping the files puts the gallery file against the query split
    // of a manifest with fewer rows once truncated.
    let manifest = std::fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    let mut kept = 0;
    let truncated: Vec<&str> = manifest
        .lines()
        .filter(|l| {
            if l.ends_with(",query") {
                kept += 1;
                kept <= 5
            } else {
                true
            }
        })
        .collect();
    let m_path = out_dir.join("short.csv");
    std::fs::write(&m_path, truncated.join("\n") + "\n").unwrap();
    let out = run(&[
        "eval",
        "--query",
        out_dir.join("query.vneb").to_str().unwrap(),
        "--gallery",
        out_dir.join("gallery.vneb").to_str().unwrap(),
        "--manifest",
        m_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("manifest lists 5 query"),
        "stderr: {}",
        stderr(&out)
    );
}

fn write_person_fixture(dir: &Path) -> PathBuf {
    let (w, h) = (20u32, 28u32);
    let mut img = RgbImage::new(w, h);
    let mut mask = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let person = (6..14).contains(&x) && (6..22).contains(&y);
            img.put_pixel(
                x,
                y,
                if person {
                    Rgb([210, 60, 60])
                } else {
                    Rgb([40, 70, 180])
                },
            );
            mask.put_pixel(x, y, image::Luma([if person { 255 } else { 0 }]));
        }
    }
    let img_path = dir.join("person.png");
    img.save(&img_path).unwrap();
    mask.save(dir.join("person_mask.png")).unwrap();
    img_path
}

#[test]
fn augment_writes_variants_and_preserves_person_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let img_path = write_person_fixture(dir.path());
    let out = run(&[
        "augment",
        "--seed",
        "5",
        "--count",
        "2",
        img_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("person_aug1.png"));
    assert!(text.contains("person_aug2.png"));

    let src = image::open(&img_path).unwrap().to_rgb8();
    for n in 1..=2 {
        let aug = image::open(dir.path().join(format!("person_aug{n}.png")))
            .unwrap()
            .to_rgb8();
        assert_eq!(aug.dimensions(), src.dimensions());
        for y in 6..22 {
            for x in 6..14 {
                assert_eq!(
                    aug.get_pixel(x, y),
                    src.get_pixel(x, y),
                    "person pixel moved at {x},{y}"
                );
            }
        }
    }
}

#[test]
fn augment_fixed_seed_is_bitwise_reproducible() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = write_person_fixture(dir_a.path());
    let b = write_person_fixture(dir_b.path());
    assert_eq!(
        code(&run(&["augment", "--seed", "9", a.to_str().unwrap()])),
        0
    );
    assert_eq!(
        code(&run(&["augment", "--seed", "9", b.to_str().unwrap()])),
        0
    );
    let bytes_a = std::fs::read(dir_a.path().join("person_aug1.png")).unwrap();
    let bytes_b = std::fs::read(dir_b.path().join("person_aug1.png")).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn augment_missing_mask_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let img_path = write_person_fixture(dir.path());
    std::fs::remove_file(dir.path().join("person_mask.png")).unwrap();
    let out = run(&["augment", img_path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("person.png"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn sample_dumps_balanced_batches() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out_dir) = run_tiny_demo(dir.path());
    let m = out_dir.join("manifest.csv");
    let args = [
        "sample",
        "--manifest",
        m.to_str().unwrap(),
        "--p",
        "3",
        "--k",
        "4",
        "--seed",
        "2",
    ];
    let out = run(&args);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    // 6 train identities at P=3: two batches per epoch.
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        assert!(line.contains("identities=3"), "line: {line}");
        assert!(line.contains("images=12"), "line: {line}");
        let comp = line.split("composition=").nth(1).unwrap();
        assert!(comp.split(',').all(|c| c.ends_with(":4")), "line: {line}");
    }
    assert_eq!(stdout(&run(&args)), text);
}

#[test]
fn sample_rejects_too_few_identities() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out_dir) = run_tiny_demo(dir.path());
    let m = out_dir.join("manifest.csv");
    let out = run(&[
        "sample",
        "--manifest",
        m.to_str().unwrap(),
        "--p",
        "40",
        "--k",
        "4",
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("identities"),
        "stderr: {}",
        stderr(&out)
    );
}
