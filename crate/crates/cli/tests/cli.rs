use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ldm_core::imageio::read_gray_png;

fn ldm(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldm"))
        .arg(cmd)
        .args(["--out", out.to_str().unwrap(), "--log-level", "warn"])
        .args(extra)
        .output()
        .expect("binary runs")
}

fn ok(cmd: &str, out: &Path, extra: &[&str]) {
    let o = ldm(cmd, out, extra);
    assert!(o.status.success(), "{cmd} failed:\n{}", String::from_utf8_lossy(&o.stderr));
}

/// Every file under `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const TINY: &[&str] = &[
    "--n-per-class", "16",
    "--codec-iterations", "4", "--codec-eval-every", "2",
    "--den-iterations", "4", "--den-batch", "4",
    "--lora-iterations", "3", "--lora-batch", "4",
    "--steps", "4", "--upscale-steps", "3",
];

fn tiny_pipeline(out: &Path, workers: &str) {
    let mut args = TINY.to_vec();
    args.extend(["--workers", workers]);
    for cmd in ["make-data", "train-codec", "train-denoiser", "finetune-lora"] {
        ok(cmd, out, &args);
    }
    let mut gen = args.clone();
    gen.extend(["--prompt-labels", "Cardiomegaly", "--n", "4"]);
    ok("generate", out, &gen);
    ok("upscale", out, &gen);
}

#[test]
fn unknown_keys_are_all_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldm("generate", dir.path(), &["--bogus", "1", "--steps", "many", "--nope=2"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    for key in ["`bogus`", "`nope`", "`steps`"] {
        assert!(err.contains(key), "{key} missing from:\n{err}");
    }
}

#[test]
fn missing_artifacts_name_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldm("generate", dir.path(), &[]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("codec checkpoint not found") && err.contains("ldm train-codec"), "{err}");
    let o = ldm("train-codec", dir.path(), &[]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ldm make-data"));
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nn-per-class = 3\nimage-size = 32\nseed = 5\n").unwrap();
    ok("make-data", dir.path(), &["--config", cfg.to_str().unwrap(), "--seed", "6"]);
    let resolved = std::fs::read_to_string(dir.path().join("data/config.txt")).unwrap();
    assert!(resolved.contains("n-per-class = 3\n") && resolved.contains("seed = 6\n"), "{resolved}");
    let img = read_gray_png(&dir.path().join("data/images").read_dir().unwrap().next().unwrap().unwrap().path()).unwrap();
    assert_eq!(img.width, 32);
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "make-data");
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn pipeline_outputs_and_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_pipeline(a.path(), "1");

    let gen = a.path().join("generate");
    let pngs: Vec<_> = gen.join("cardiomegaly").read_dir().unwrap().filter_map(|e| {
        let n = e.unwrap().file_name().into_string().unwrap();
        (n.ends_with(".png") && n != "grid.png").then_some(n)
    }).collect();
    assert_eq!(pngs.len(), 4);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(gen.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["prompts"][0]["images"].as_array().unwrap().len(), 4);
    assert_eq!(read_gray_png(&gen.join("cardiomegaly/000.png")).unwrap().width, 64);
    let up = read_gray_png(&a.path().join("upscale/cardiomegaly/000_x2.png")).unwrap();
    assert_eq!((up.width, up.height), (128, 128));

    // different directory and worker count, same configuration
    tiny_pipeline(b.path(), "2");
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (path, bytes) in &ta {
        if path.file_name().unwrap() == "config.txt" {
            continue;
        }
        assert!(bytes == &tb[path], "{} differs between reruns", path.display());
    }
}
