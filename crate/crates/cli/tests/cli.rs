//! Drives the `voxgan` binary through a full phantom → train → explore run.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use voxgan::volume::{list_volumes, read_volume};

fn voxgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxgan")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = voxgan(args);
    assert!(
        out.status.success(),
        "voxgan {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_workflow_on_phantoms() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["phantom", "--out", p(&data), "--count", "6", "--shape", "32,32,32", "--seed", "1"]);
    assert_eq!(list_volumes(&data).unwrap().len(), 6);

    for arch in ["progan", "stylegan"] {
        let out = run.join(arch);
        ok(&[
            "train", "--data", p(&data), "--out", p(&out), "--arch", arch, "--channels", "1",
            "--steps-per-stage", "1", "--batch", "2", "--n-critic", "1",
        ]);
        let ck = out.join("final");
        assert!(ck.join("manifest.json").exists());
        assert!(out.join("metrics.jsonl").exists());
        ok(&["train-encoder", "--checkpoint", p(&ck), "--data", p(&data), "--steps", "2", "--batch", "2"]);

        let gen = out.join("gen");
        let flag = if arch == "progan" { ["--truncation", "1.5"] } else { ["--psi", "0.7"] };
        ok(&["generate", "--checkpoint", p(&ck), "--out", p(&gen), "--count", "2", "--seed", "3", flag[0], flag[1]]);
        let samples = list_volumes(&gen).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(read_volume(&samples[0]).unwrap().shape(), [32, 32, 32]);
        let wrong = if arch == "progan" { ["--psi", "0.7"] } else { ["--truncation", "1.5"] };
        assert!(!voxgan(&["generate", "--checkpoint", p(&ck), "--out", p(&gen), wrong[0], wrong[1]]).status.success());

        let (ca, cb) = (gen.join("sample_0000.json"), gen.join("sample_0001.json"));
        let frames = out.join("frames");
        ok(&["transition", "--checkpoint", p(&ck), "--code-a", p(&ca), "--code-b", p(&cb), "--steps", "2", "--out", p(&frames)]);
        assert_eq!(list_volumes(&frames).unwrap().len(), 2);

        let code = out.join("code.json");
        let recon = out.join("recon.vgan");
        ok(&[
            "invert", "--checkpoint", p(&ck), "--input", p(&list_volumes(&data).unwrap()[0]), "--steps", "2",
            "--out", p(&code), "--reconstruction", p(&recon),
        ]);
        let c: Value = serde_json::from_str(&std::fs::read_to_string(&code).unwrap()).unwrap();
        assert_eq!(c["code"].as_array().unwrap().len(), 512);
        assert!(recon.exists());

        let dirs = ok(&["directions", "--checkpoint", p(&ck), "--k", "3", "--arch", arch]);
        let d: Value = serde_json::from_str(&dirs).unwrap();
        assert_eq!(d["directions"].as_array().unwrap().len(), 3);

        let edit = out.join("edit");
        ok(&[
            "edit", "--checkpoint", p(&ck), "--input", p(&samples[0]), "--direction-index", "2",
            "--strength", "-3", "--steps", "1", "--out", p(&edit),
        ]);
        for f in ["edited.vgan", "reconstruction.vgan", "residual.vgan", "code.json"] {
            assert!(edit.join(f).exists(), "{f}");
        }
        let (e, r, res) = (
            read_volume(edit.join("edited.vgan")).unwrap(),
            read_volume(edit.join("reconstruction.vgan")).unwrap(),
            read_volume(edit.join("residual.vgan")).unwrap(),
        );
        assert!(e.residual(&r).unwrap().to_tensor().max_abs_diff(&res.to_tensor()) < 1e-6);

        let mix = out.join("mix.vgan");
        let mixed = voxgan(&["mix", "--checkpoint", p(&ck), "--source", p(&ca), "--target", p(&cb), "--boundary", "4", "--out", p(&mix)]);
        assert_eq!(mixed.status.success(), arch == "stylegan");
    }

    let m = ok(&[
        "metrics", "--real", p(&data), "--generated", p(&run.join("progan/gen")), "--k", "1",
        "--extractor-phantoms", "16",
    ]);
    let m: Value = serde_json::from_str(&m).unwrap();
    assert!(m["fid"].as_f64().unwrap() >= 0.0);
    for key in ["precision", "recall"] {
        let v = m[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = voxgan(&["generate", "--checkpoint", p(&tmp.path().join("missing")), "--out", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = voxgan(&["phantom", "--out", p(tmp.path()), "--shape", "1,2"]);
    assert!(!out.status.success());
}
