//! Helpers for driving the `voldiff` binary from tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_voldiff");

/// `voldiff args...` run from `cwd`, with default run folders kept inside it.
pub fn voldiff(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).env("VOLDIFF_OUT", cwd.join("runs")).output().expect("spawn voldiff")
}

/// Like [`voldiff`] but panics with stderr unless the exit code is 0.
pub fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = voldiff(cwd, args);
    assert!(out.status.success(), "voldiff {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// Every file under `dir`, keyed by its relative path.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).expect("read_dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&p).expect("read"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

const CAPTIONS: &str = r#"{"id":"b","views":["red cube","red cube","red cube","red cube","red cube","red cube","red cube","red cube"],"summary":"a red cube"}
{"id":"a","views":["blue sphere","blue sphere","small blue sphere","blue sphere","blue sphere","blue sphere","blue sphere","blue sphere"],"summary":"red cube"}
"#;

const DIFFUSION_CONFIG: &str = "n = 8\ncount = 2\nsteps = 3\ntimesteps = 10\nbatch_size = 2\nwidth1 = 8\nwidth2 = 8\nattn_dim = 8\ntime_dim = 8\n";

/// Runs every subcommand once on tiny settings inside `root`, each into its
/// own run folder. Inputs are relative paths so the config snapshots do not
/// depend on `root`. Returns `(command, run folder)` pairs.
pub fn pipeline(root: &Path) -> Vec<(&'static str, PathBuf)> {
    fs::write(root.join("captions.jsonl"), CAPTIONS).unwrap();
    fs::write(root.join("diffusion.toml"), DIFFUSION_CONFIG).unwrap();
    let steps: &[(&str, &str, &[&str])] = &[
        ("scene-gen", "sg", &["scene-gen", "--count", "2", "--complexity", "2", "--seed", "5"]),
        ("make-dataset", "ds", &["make-dataset", "--scenes", "sg/scenes.json", "--views", "6", "--width", "16", "--height", "16", "--samples-per-ray", "16"]),
        (
            "train-encoder",
            "te",
            &[
                "train-encoder", "--dataset", "ds/dataset", "--n", "8", "--input-views", "4", "--supervision-views", "2",
                "--pixels-per-view", "32", "--samples-per-ray", "8", "--steps", "3", "--eval-every", "0", "--eval-pixels", "32",
                "--psnr-views", "2,4", "--psnr-samples", "8",
            ],
        ),
        ("encode", "enc", &["encode", "--checkpoint", "te/encoder.vdcp", "--dataset", "ds/dataset", "--n", "8"]),
        (
            "render",
            "r1",
            &["render", "--volume", "enc/volumes/scene_0000.volb", "--checkpoint", "te/encoder.vdcp", "--width", "16", "--height", "16", "--samples-per-ray", "16", "--jitter", "true"],
        ),
        ("render", "r2", &["render", "--scenes", "sg/scenes.json", "--scene-index", "1", "--width", "16", "--height", "16", "--samples-per-ray", "16"]),
        ("train-diffusion", "td", &["train-diffusion", "--config", "diffusion.toml", "--seed", "2"]),
        ("sample", "sa", &["sample", "--checkpoint", "td/denoiser.vdcp", "--caption", "red cube", "--count", "2", "--seed", "9"]),
        ("noise-lab verify", "nv", &["noise-lab", "verify", "--m", "16", "--samples", "4000", "--seed", "1"]),
        ("noise-lab sweep", "ns", &["noise-lab", "sweep", "--resolutions", "4,16", "--samples", "4000", "--empirical-scenes", "1", "--empirical-n", "8", "--empirical-samples", "2000"]),
        ("noise-lab feasibility", "nf", &["noise-lab", "feasibility"]),
        ("filter", "fi", &["filter", "--input", "captions.jsonl"]),
        ("metrics", "m1", &["metrics", "--pred", "r1/render.rgb.imgf", "--ref", "r2/render.rgb.imgf"]),
        ("metrics", "m2", &["metrics", "--pred", "sa/sample_000.volb", "--ref", "td/train/volume_0000.volb"]),
    ];
    let mut runs = Vec::new();
    for (cmd, out, args) in steps {
        let mut args = args.to_vec();
        args.extend(["--out", out]);
        ok(root, &args);
        runs.push((*cmd, root.join(out)));
    }
    runs
}

/// Runs [`pipeline`] twice and lists every file that differs between the two.
pub fn pipeline_differences() -> (usize, Vec<String>) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    let mut diffs = Vec::new();
    let mut files = 0;
    for ((cmd, da), (_, db)) in ra.iter().zip(&rb) {
        let (ta, tb) = (tree(da), tree(db));
        files += ta.len();
        if ta.keys().ne(tb.keys()) {
            diffs.push(format!("{cmd}: file lists differ"));
            continue;
        }
        for (k, v) in &ta {
            if tb[k] != *v {
                diffs.push(format!("{cmd}: {k}"));
            }
        }
    }
    (files, diffs)
}
