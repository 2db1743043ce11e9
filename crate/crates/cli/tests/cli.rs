use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use selconv::graph::Graph;
use selconv::selective::rig_constant;
use selconv::spec::NetworkSpec;

fn scn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scn")).args(args).output().expect("binary runs")
}

fn spec_path(name: &str) -> String {
    format!("{}/../../specs/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn total_macs(o: &Output) -> f64 {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("total (macs):")).expect("total line");
    line.split_whitespace().nth(2).unwrap().parse().unwrap()
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn count_flops_reproduces_ssd300_and_pelee() {
    let o = scn(&["count-flops", "--spec", &spec_path("ssd300_vgg16")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!((total_macs(&o) / 31.78 - 1.0).abs() <= 0.05);
    let o = scn(&["count-flops", "--spec", &spec_path("pelee304"), "--convention", "2macs"]);
    assert!(o.status.success());
    assert!((total_macs(&o) / 1.18 - 1.0).abs() <= 0.10);
}

#[test]
fn count_flops_on_toy_reports_no_reduction_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    let o = scn(&["count-flops", "--spec", &spec_path("toy"), "--out", csv.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("guided reduced:   0.00%"), "{}", stdout(&o));
    let text = fs::read_to_string(csv).unwrap();
    assert!(text.lines().next().unwrap().contains("dense_flops"));
    assert!(text.contains("conv4"));
}

#[test]
fn check_equiv_is_exact() {
    let o = scn(&["check-equiv", "--seed", "5"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "100/100 exact");
}

#[test]
fn gradcheck_passes() {
    let o = scn(&["gradcheck", "--seed", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("ok")).count(), 6);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = scn(&["gen-data", "--count", "16", "--seed", "7", "--out", d.to_str().unwrap()]);
        assert!(o.status.success());
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta.len(), 32);
    assert_eq!(ta, tb);
}

#[test]
fn train_then_infer_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(scn(&["gen-data", "--count", "4", "--seed", "1", "--out", data.to_str().unwrap()]).status.success());
    let o = scn(&[
        "train", "--spec", &spec_path("toy"), "--data", data.to_str().unwrap(), "--epochs", "1", "--out", run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,L,Lc,Ll,Lm,mask_density_mean,flops_reduction_mean\n"));
    assert_eq!(history.lines().count(), 2);

    let image = data.join("scene_00000.ppm");
    let weights = run.join("weights.scnw");
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("infer{k}"));
        let o = scn(&[
            "infer", "--spec", &spec_path("toy"), "--weights", weights.to_str().unwrap(), "--data",
            image.to_str().unwrap(), "--out", out.to_str().unwrap(), "--score", "0.0",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outs.push(read_tree(&out));
    }
    assert_eq!(outs[0], outs[1]);
    let names: Vec<_> = outs[0].iter().map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["detections.json", "mask_l0.pgm", "mask_l1.pgm", "prob.pgm"]);
}

#[test]
fn infer_with_module_rigged_off_detects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::from_file(spec_path("toy")).unwrap();
    let g = Graph::build(&spec).unwrap();
    let mut params = g.init_params(0);
    rig_constant(&mut params, false).unwrap();
    let weights = dir.path().join("off.scnw");
    params.write_scnw(fs::File::create(&weights).unwrap()).unwrap();
    let data = dir.path().join("data");
    assert!(scn(&["gen-data", "--count", "1", "--seed", "3", "--out", data.to_str().unwrap()]).status.success());
    let out = dir.path().join("out");
    let o = scn(&[
        "infer", "--spec", &spec_path("toy"), "--weights", weights.to_str().unwrap(), "--data",
        data.join("scene_00000.ppm").to_str().unwrap(), "--out", out.to_str().unwrap(), "--score", "0.0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("detections.json")).unwrap().trim(), "[]");
    for level in ["mask_l0.pgm", "mask_l1.pgm"] {
        let m = selconv::mask::SaliencyMask::read_pgm(fs::File::open(out.join(level)).unwrap()).unwrap();
        assert_eq!(m.count_ones(), 0);
    }
}

#[test]
fn malformed_inputs_exit_with_schema_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(spec_path("toy")).unwrap().replacen("\"kernel\": 3", "\"kernel\": 3, \"groups\": 2", 1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, text).unwrap();
    let o = scn(&["count-flops", "--spec", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("layers[0]") && err.contains("groups"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let weights = dir.path().join("w.scnw");
    fs::write(&weights, b"SCNW\x01\x00\x00\x00").unwrap();
    let o = scn(&["infer", "--spec", &spec_path("toy"), "--weights", weights.to_str().unwrap(), "--data", "x.ppm", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    assert_eq!(scn(&["train", "--spec", &spec_path("toy")]).status.code(), Some(2));
    assert_eq!(scn(&["check-equiv", "--trials", "many"]).status.code(), Some(2));
}
