use std::path::Path;
use std::process::{Command, Output};

use mrisynth_core::io::{read_labels, read_volume, write_labels, write_volume, RecordReader};
use mrisynth_core::phantom::phantom_head;
use mrisynth_core::volume::Dims;
use mrisynth_core::{LabelMap, Volume};

fn mrisynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrisynth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_map(dir: &Path, name: &str, map: &LabelMap) -> String {
    let p = dir.join(name);
    write_labels(&p, map).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(mrisynth(&["--help"]).status.code(), Some(0));
    assert_eq!(mrisynth(&["--version"]).status.code(), Some(0));
    assert_eq!(mrisynth(&[]).status.code(), Some(1));
    assert_eq!(mrisynth(&["generate", "--count", "1"]).status.code(), Some(1));
    assert_eq!(mrisynth(&["segment", "--bias", "maybe"]).status.code(), Some(1));
}

#[test]
fn generate_zero_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_map(dir.path(), "map.nii.gz", &phantom_head(Dims::cube(16), 0));
    let out = dir.path().join("out");
    let o = mrisynth(&["generate", "--maps", &map, "--count", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!out.exists() || std::fs::read_dir(&out).unwrap().next().is_none());
}

#[test]
fn generate_writes_named_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let maps = dir.path().join("maps");
    std::fs::create_dir(&maps).unwrap();
    write_map(&maps, "a.nii.gz", &phantom_head(Dims::cube(16), 0));
    write_map(&maps, "b.nii", &phantom_head(Dims::cube(16), 1));
    let out = dir.path().join("out");
    let o = mrisynth(&["generate", "--maps", s(&maps), "--count", "3", "--out", s(&out), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for i in 0..3 {
        let img = read_volume(out.join(format!("{i:06}_image.nii.gz"))).unwrap().into_volume();
        let tgt = read_labels(out.join(format!("{i:06}_target.nii.gz"))).unwrap();
        assert_eq!(img.dims(), tgt.dims());
        let json = std::fs::read_to_string(out.join(format!("{i:06}_params.json"))).unwrap();
        let rec = mrisynth_core::ParameterRecord::from_json(&json).unwrap();
        assert_eq!(rec.sample_index, i);
    }
    assert!(!out.join("000003_image.nii.gz").exists());
}

#[test]
fn stream_stdout_matches_generate() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_map(dir.path(), "map.nii.gz", &phantom_head(Dims::cube(16), 2));
    let o = mrisynth(&["stream", "--maps", &map, "--count", "2", "--stdout", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pairs: Vec<_> = RecordReader::new(&o.stdout[..]).collect::<Result<_, _>>().unwrap();
    assert_eq!(pairs.len(), 2);

    let out = dir.path().join("out");
    let g = mrisynth(&["generate", "--maps", &map, "--count", "2", "--out", s(&out), "--seed", "7"]);
    assert_eq!(g.status.code(), Some(0), "{}", stderr(&g));
    for p in &pairs {
        let i = p.record.sample_index;
        let img = read_volume(out.join(format!("{i:06}_image.nii.gz"))).unwrap().into_volume();
        assert_eq!(img, p.image);
    }
}

#[test]
fn stream_requires_a_sink() {
    let o = mrisynth(&["stream", "--maps", "x.nii.gz"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn segment_dim_mismatch_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_map(dir.path(), "map.nii.gz", &phantom_head(Dims::cube(12), 0));
    let atlas = dir.path().join("atlas.nii.gz");
    let o = mrisynth(&["make-atlas", "--maps", &map, "--sigma", "1", "--out", s(&atlas)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let img = dir.path().join("img.nii.gz");
    write_volume(&img, &Volume::filled(Dims::new(10, 11, 12), 0.5)).unwrap();
    let o = mrisynth(&["segment", "--image", s(&img), "--atlas", s(&atlas), "--out", s(&dir.path().join("seg.nii.gz"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("10x11x12") && err.contains("12x12x12"), "{err}");
}

#[test]
fn missing_input_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mrisynth(&[
        "evaluate",
        "--pred",
        s(&dir.path().join("nope.nii")),
        "--truth",
        s(&dir.path().join("nope.nii")),
        "--out",
        s(&dir.path().join("d.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn evaluate_self_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let map = phantom_head(Dims::cube(16), 3);
    let path = write_map(dir.path(), "map.nii.gz", &map);
    let csv = dir.path().join("dice.csv");
    let o = mrisynth(&["evaluate", "--pred", &path, "--truth", &path, "--out", s(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let expected = map.label_set().into_iter().filter(|&l| l != 0).count();
    assert_eq!(rows.len(), expected + 1);
    for row in rows {
        let dice: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(dice, 1.0, "{row}");
    }
}

#[test]
fn evaluate_explicit_labels() {
    let dir = tempfile::tempdir().unwrap();
    let a = LabelMap::from_fn(Dims::cube(4), |i, _, _| if i < 2 { 1 } else { 2 });
    let b = LabelMap::from_fn(Dims::cube(4), |i, _, _| if i < 1 { 1 } else { 2 });
    let pa = write_map(dir.path(), "a.nii", &a);
    let pb = write_map(dir.path(), "b.nii", &b);
    let csv = dir.path().join("dice.csv");
    let o = mrisynth(&["evaluate", "--pred", &pa, "--truth", &pb, "--labels", "1", "--out", s(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    // |A| = 32, |B| = 16, overlap 16.
    let expected = 2.0 * 16.0 / 48.0;
    let row = text.lines().nth(1).unwrap();
    let d: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((d - expected).abs() < 1e-12, "{row}");
}

#[test]
fn atlas_then_segment_recovers_generated_target() {
    let dir = tempfile::tempdir().unwrap();
    let truth = phantom_head(Dims::cube(24), 4);
    let map = write_map(dir.path(), "truth.nii.gz", &truth);
    let atlas = dir.path().join("atlas.nii.gz");
    let o = mrisynth(&["make-atlas", "--maps", &map, "--sigma", "1", "--out", s(&atlas)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // Piecewise-constant image with well separated means per label.
    let img = Volume::from_fn(truth.dims(), |i, j, k| {
        let l = truth.get(i, j, k);
        ((l as f32 * 37.0) % 251.0) / 255.0
    });
    let img_path = dir.path().join("img.nii.gz");
    write_volume(&img_path, &img).unwrap();
    let seg = dir.path().join("seg.nii.gz");
    let o = mrisynth(&[
        "segment", "--image", s(&img_path), "--atlas", s(&atlas), "--bias", "off", "--max-iter", "10", "--out", s(&seg),
        "--posteriors",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = read_labels(&seg).unwrap();
    assert_eq!(out.dims(), truth.dims());
    let agree = out.labels().iter().zip(truth.labels()).filter(|(a, b)| a == b).count();
    assert!(agree as f64 / truth.labels().len() as f64 > 0.95);
    assert!(dir.path().join("seg_post_0.nii.gz").exists());
}

#[test]
fn stream_listen_serves_a_consumer() {
    use std::io::{BufRead, BufReader};
    use std::process::Stdio;

    let dir = tempfile::tempdir().unwrap();
    let map = write_map(dir.path(), "map.nii.gz", &phantom_head(Dims::cube(16), 5));
    let mut child = Command::new(env!("CARGO_BIN_EXE_mrisynth"))
        .args(["stream", "--maps", &map, "--count", "2", "--listen", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_owned();
    let conn = std::net::TcpStream::connect(&addr).unwrap();
    let pairs: Vec<_> = RecordReader::new(conn).collect::<Result<_, _>>().unwrap();
    assert_eq!(pairs.iter().map(|p| p.record.sample_index).collect::<Vec<_>>(), vec![0, 1]);
    assert!(child.wait().unwrap().success());
}
