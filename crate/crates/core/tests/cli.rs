use cpdc::data::procedural_texture;
use cpdc::image_io::{read_image, write_ppm};
use std::path::Path;
use std::process::Command;

fn cpdc(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cpdc")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "cpdc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_compress_decompress_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("images");
    std::fs::create_dir(&data).unwrap();
    for i in 0..3 {
        write_ppm(&data.join(format!("img{i}.ppm")), &procedural_texture(i, 40, 48)).unwrap();
    }
    let train = |out: &Path, seed: &str| {
        cpdc(&[
            "train", "--data", s(&data), "--out", s(out), "--steps", "3", "--widths", "4,4", "--channels", "3", "--batch", "2",
            "--crop", "16", "--seed", seed,
        ]);
    };
    let model = dir.path().join("m.cpdm");
    let model2 = dir.path().join("m2.cpdm");
    train(&model, "5");
    train(&model2, "5");
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&model2).unwrap());
    assert!(dir.path().join("m.cpdm.log.jsonl").exists());

    let input = data.join("img1.ppm");
    let bits = dir.path().join("img1.cpdc");
    let decoded = dir.path().join("img1.out.ppm");
    cpdc(&["compress", "--model", s(&model), "--input", s(&input), "--output", s(&bits)]);
    cpdc(&["decompress", "--model", s(&model), "--input", s(&bits), "--output", s(&decoded)]);
    let x = read_image(&decoded).unwrap();
    assert_eq!(x.shape(), &[40, 48, 3]);

    let report = dir.path().join("report.jsonl");
    cpdc(&["eval", "--model", s(&model), "--data", s(&data), "--report", s(&report)]);
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 3);
    assert!(lines.iter().all(|v| v["schema"] == 1));

    // a model trained with another seed cannot decode this stream
    let other = dir.path().join("other.cpdm");
    train(&other, "6");
    let fail = Command::new(env!("CARGO_BIN_EXE_cpdc"))
        .args(["decompress", "--model", s(&other), "--input", s(&bits), "--output", s(&decoded)])
        .output()
        .unwrap();
    assert!(!fail.status.success());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cpdm");
    let out = Command::new(env!("CARGO_BIN_EXE_cpdc"))
        .args(["compress", "--model", s(&missing), "--input", "x.ppm", "--output", "y.cpdc"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
