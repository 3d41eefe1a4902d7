use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use mvdiff::pipeline::{read_pfm, write_pfm};
use mvdiff::scene::TriMesh;
use ndarray::Array3;

const BIN: &str = env!("CARGO_BIN_EXE_mvdiff");

const SMALL: &str = r#"{
  "schedule": {"num_steps": 20},
  "rig": {"views_per_track": 4, "width": 32, "height": 32},
  "render": {"orbit_frames": 3},
  "refine": {"iterations": 3},
  "demo2d": {"size": 16}
}"#;

fn mvdiff(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn mvdiff")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "generate",
        "--config",
        s(cfg),
        "--out",
        s(out),
        "--seed",
        "5",
    ];
    args.extend_from_slice(extra);
    mvdiff(&args)
}

/// Target latent for the oracle backend, shaped like the small rig's latents.
fn target(dir: &Path) -> PathBuf {
    let p = dir.join("target.pfm");
    let img = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| {
        0.4 * ((x as f64 * 0.3 + c as f64).sin() + (y as f64 * 0.2).cos()) / 2.0
    });
    write_pfm(&p, &img).unwrap();
    p
}

fn no_outputs(out: &Path) -> bool {
    !out.join("manifest.json").exists() && !out.join("views").exists()
}

#[test]
fn generate_twice_gives_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = generate(&cfg, &a, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean cross-view PSNR"));
    let o = generate(&cfg, &b, &["--workers", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ma = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.json")).unwrap());
    for f in [
        "views/view_00.png",
        "latents/latent_07.pfm",
        "metrics.csv",
        "timings.json",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let unknown = write(
        dir.path(),
        "unknown.json",
        r#"{"schedule": {"num_steps": 20, "stepz": 3}}"#,
    );
    let two = write(dir.path(), "two.json", r#"{"rig": {"views_per_track": 2}}"#);
    let broken = write(dir.path(), "broken.json", "{ not json");
    for cfg in [&unknown, &two, &broken, &dir.path().join("missing.json")] {
        let o = generate(cfg, &out, &[]);
        assert_eq!(code(&o), 2, "{}: {}", cfg.display(), stderr(&o));
        assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
        assert!(no_outputs(&out));
    }
    let o = mvdiff(&["generate", "--no-such-flag"]);
    assert_eq!(code(&o), 2);
    let o = mvdiff(&["frobnicate"]);
    assert_eq!(code(&o), 2);
    let two_msg = stderr(&generate(&two, &out, &[]));
    assert!(two_msg.contains("views_per_track"), "{two_msg}");
}

#[test]
fn unreachable_backend_exits_3_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", SMALL);
    let out = dir.path().join("out");
    // bind then drop so the port is closed
    let addr = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .to_string();
    let o = generate(&cfg, &out, &["--backend-addr", &addr]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(no_outputs(&out));
    let o = generate(
        &cfg,
        &out,
        &["--backend-cmd", "/nonexistent/backend --mode stdio"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(no_outputs(&out));
}

#[test]
fn stdio_backend_matches_in_process_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let t = target(dir.path());
    let cfg = write(dir.path(), "run.json", SMALL);
    let local_cfg = write(
        dir.path(),
        "local.json",
        &SMALL.replacen(
            "{\n",
            &format!(
                "{{\n  \"denoiser\": {{\"kind\": \"oracle\", \"target\": \"{}\"}},\n",
                s(&t)
            ),
            1,
        ),
    );
    let (remote, local) = (dir.path().join("remote"), dir.path().join("local"));
    let cmd = format!("{BIN} serve --mode stdio --target {}", s(&t));
    let o = generate(&cfg, &remote, &["--backend-cmd", &cmd]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = generate(&local_cfg, &local, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for v in 0..8 {
        let name = format!("latents/latent_{v:02}.pfm");
        let a = read_pfm(&remote.join(&name)).unwrap();
        let b = read_pfm(&local.join(&name)).unwrap();
        let worst = (&a - &b).mapv(f64::abs).fold(0.0, |m: f64, &x| m.max(x));
        // the wire carries f32 tensors
        assert!(worst < 1e-4, "view {v}: {worst}");
    }
}

#[test]
fn backend_killed_mid_run_exits_3_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let t = target(dir.path());
    let cfg = write(dir.path(), "run.json", SMALL);
    let out = dir.path().join("out");
    let cmd = format!("{BIN} serve --mode stdio --target {} --exit-after 5", s(&t));
    let o = generate(&cfg, &out, &["--backend-cmd", &cmd]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(no_outputs(&out));
    if out.exists() {
        let partial = fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| e.ok())
            .any(|e| e.file_name().to_string_lossy().starts_with(".partial"));
        assert!(!partial);
    }
}

#[test]
fn tcp_backend_serves_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let t = target(dir.path());
    let cfg = write(dir.path(), "run.json", SMALL);
    let out = dir.path().join("out");
    let mut server = Command::new(BIN)
        .args([
            "serve",
            "--mode",
            "tcp",
            "--target",
            s(&t),
            "--max-connections",
            "1",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let o = generate(&cfg, &out, &["--backend-addr", line.trim()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("manifest.json").exists());
    assert!(server.wait().unwrap().success());
}

#[test]
fn refine_render_and_eval_read_generate_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", SMALL);
    let gen = dir.path().join("gen");
    let o = generate(&cfg, &gen, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mesh = dir.path().join("sphere.obj");
    TriMesh::icosphere(3, 1.0).write_obj(&mesh).unwrap();

    let normals: Vec<String> = (0..8)
        .map(|v| s(&gen.join(format!("conditions/normal_{v:02}.pfm"))).to_string())
        .collect();
    let out = dir.path().join("refine");
    let mut args = vec![
        "refine",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--mesh",
        s(&mesh),
        "--targets",
    ];
    args.extend(normals.iter().map(String::as_str));
    let o = mvdiff(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let refined = TriMesh::read_obj(&out.join("refined.obj")).unwrap();
    assert_eq!(refined.faces().len(), 1280);
    assert!(out.join("refine_trace.csv").exists() && out.join("manifest.json").exists());

    let out = dir.path().join("render");
    let views = gen.join("views");
    let o = mvdiff(&[
        "render",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--mesh",
        s(&mesh),
        "--images",
        s(&views),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rendered 3 frames"));
    for k in 0..3 {
        assert!(out.join(format!("frames/frame_{k:03}.png")).exists());
    }
    assert!(out.join("baked.obj").exists());

    let out = dir.path().join("eval");
    let o = mvdiff(&[
        "eval",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--images",
        s(&views),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("metrics.csv").exists() && out.join("metrics.json").exists());

    // one image short of the rig
    let few: Vec<String> = (0..7)
        .map(|v| s(&views.join(format!("view_{v:02}.png"))).to_string())
        .collect();
    let out = dir.path().join("eval-short");
    let mut args = vec!["eval", "--config", s(&cfg), "--out", s(&out), "--images"];
    args.extend(few.iter().map(String::as_str));
    let o = mvdiff(&args);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(no_outputs(&out));

    let o = mvdiff(&[
        "refine",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--mesh",
        s(&dir.path().join("none.obj")),
        "--targets",
        &normals[0],
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn demo2d_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", SMALL);
    let out = dir.path().join("demo");
    let o = mvdiff(&[
        "demo2d",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--seed",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("consensus true"));
    assert!(out.join("summary.json").exists() && out.join("process_03.pfm").exists());
}

#[test]
fn version_and_help() {
    let o = mvdiff(&["--version"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("mvdiff "));
    let o = mvdiff(&["--help"]);
    assert_eq!(code(&o), 0);
    let help = String::from_utf8_lossy(&o.stdout);
    for sub in ["generate", "refine", "render", "eval", "demo2d"] {
        assert!(help.contains(sub), "{sub}");
    }
}
