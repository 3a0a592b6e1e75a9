use std::path::Path;
use std::process::{Command, Output};

fn glpdepth(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glpdepth"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn config_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn params_prints_three_counts() {
    let dir = tempfile::tempdir().unwrap();
    let full = config_dir().join("full.cfg");
    let o = glpdepth(&["params", "--config", full.to_str().unwrap()], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o), "decoder 664903\nencoder 13151424\ntotal 13816327\n");
    let o = glpdepth(&["params", "--config", full.to_str().unwrap(), "--no-sff"], dir.path());
    assert!(stdout(&o).starts_with("decoder 328513\n"));

    std::fs::write(dir.path().join("bad.cfg"), "decoder_width = 64\nwarmup = 3\n").unwrap();
    let o = glpdepth(&["params", "--config", "bad.cfg"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warmup"));
}

#[test]
fn gradcheck_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let o = glpdepth(&["gradcheck", "--op", "matmul", "--trials", "3"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("PASS matmul"));
    let o = glpdepth(&["gradcheck", "--op", "no_such_op"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn train_eval_predict_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let toy = config_dir().join("toy.cfg");
    let o = glpdepth(
        &[
            "train",
            "--config",
            toy.to_str().unwrap(),
            "--data",
            "synth:seed=1,n=10,H=32,W=32",
            "--out",
            "m.ckpt",
            "--epochs",
            "1",
            "--seed",
            "2",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch   0"));

    let o = glpdepth(
        &[
            "eval",
            "--ckpt",
            "m.ckpt",
            "--data",
            "synth:4,3,32,64",
            "--crop",
            "0,0,32,16",
            "--report",
            "r.txt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("n_pixels=1536"));
    let report = std::fs::read_to_string(d.join("r.txt")).unwrap();
    assert!(report.starts_with("delta1="));
    assert!(report.lines().last().unwrap().contains("\tabs_rel="));

    let o = glpdepth(
        &[
            "corrupt",
            "--data",
            "synth:4,2,32,32",
            "--kinds",
            "gaussian_noise,motion_blur",
            "--severities",
            "1..5",
            "--seed",
            "3",
            "--out",
            "c",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = std::fs::read_dir(d.join("c"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 20);
    assert_eq!(names[0], "synth00000.gaussian_noise.1.ppm");
    assert!(names.contains(&"synth00001.motion_blur.5.ppm".to_string()));

    let o = glpdepth(
        &[
            "predict",
            "--ckpt",
            "m.ckpt",
            "--rgb",
            "c/synth00000.motion_blur.3.ppm",
            "--out",
            "d.pgm",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, w, depth) = glpdepth::data::pnm::read_pgm16(&d.join("d.pgm")).unwrap();
    assert_eq!((h, w), (32, 32));
    assert!(depth.iter().all(|&v| v > 0.0 && v <= 10.0));

    let o = glpdepth(
        &["corrupt", "--data", "synth:4,1,32,32", "--kinds", "fog", "--out", "c2"],
        d,
    );
    assert!(!o.status.success());
    let o = glpdepth(&["eval", "--ckpt", "missing.ckpt", "--data", "synth:4,1,32,32"], d);
    assert!(!o.status.success());
}

#[test]
fn manifest_data_source() {
    let dir = tempfile::tempdir().unwrap();
    let samples = glpdepth::data::synth::synth_dataset(9, 3, 32, 32).unwrap();
    let manifest = glpdepth::data::manifest::Manifest::export(&samples, &dir.path().join("set"), "img").unwrap();
    let o = glpdepth(
        &[
            "corrupt",
            "--data",
            manifest.to_str().unwrap(),
            "--kinds",
            "contrast",
            "--severities",
            "2",
            "--seed",
            "0",
            "--out",
            "out",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/img00002.contrast.2.ppm").exists());
}
