use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use diffmesh::geometry::parse_obj;

fn diffmesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffmesh"))
        .args(args)
        .env_remove("DIFFMESH_SEED")
        .output()
        .expect("spawn diffmesh")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn checksum(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("records_sha256="))
        .expect("checksum line")
        .to_string()
}

const SMALL: [&str; 8] = [
    "--set",
    "vertex_count=96",
    "--set",
    "joint_count=6",
    "--set",
    "image_size=16",
    "--samples",
    "20",
];

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["gen-data", "--out", out];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    diffmesh(&args)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let oa = gen(&a, &[]);
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    assert!(stdout(&oa).contains("# effective spec"));
    assert!(stdout(&oa).contains("wrote 20 samples (16 train, 4 test)"));
    let ob = gen(&b, &[]);
    assert_eq!(checksum(&oa), checksum(&ob));
    assert_eq!(fs::read(a.join("records.bin")).unwrap(), fs::read(b.join("records.bin")).unwrap());

    let c = tmp.path().join("c");
    let oc = gen(&c, &["--seed", "99"]);
    assert_ne!(checksum(&oa), checksum(&oc));

    // Existing output without --force.
    let again = gen(&a, &[]);
    assert_eq!(code(&again), 3);
    assert_eq!(code(&gen(&a, &["--force"])), 0);

    // Invalid spec leaves nothing behind.
    let d = tmp.path().join("d");
    let bad = gen(&d, &["--set", "image_size=3"]);
    assert_eq!(code(&bad), 2);
    assert!(!d.exists());
    let unknown = gen(&d, &["--set", "colour=red"]);
    assert_eq!(code(&unknown), 2);
}

#[test]
fn seed_env_overrides_file_and_flag_overrides_env() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.txt");
    fs::write(&spec, "seed=1\nsample_count=4\nvertex_count=96\njoint_count=6\nimage_size=8\n").unwrap();
    let run = |dir: &str, env: Option<&str>, flag: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_diffmesh"));
        cmd.args(["gen-data", "--spec", p(&spec), "--out", p(&out)]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        match env {
            Some(e) => cmd.env("DIFFMESH_SEED", e),
            None => cmd.env_remove("DIFFMESH_SEED"),
        };
        let o = cmd.output().unwrap();
        assert_eq!(code(&o), 0);
        stdout(&o)
    };
    assert!(run("a", None, None).contains("seed=1\n"));
    assert!(run("b", Some("5"), None).contains("seed=5\n"));
    assert!(run("c", Some("5"), Some("7")).contains("seed=7\n"));
}

#[test]
fn train_sample_eval_export_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, &[])), 0);
    let model = tmp.path().join("m.bin");
    let train_args = |out: &Path, extra: &[&str]| {
        let mut v = vec![
            "train".to_string(),
            "--data".into(),
            p(&data).into(),
            "--out".into(),
            p(out).into(),
            "--epochs".into(),
            "1".into(),
            "--batch-size".into(),
            "8".into(),
            "--set".into(),
            "width=16".into(),
            "--set".into(),
            "heads=2".into(),
            "--set".into(),
            "num_blocks=1".into(),
            "--set".into(),
            "timesteps=50".into(),
        ];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        diffmesh(&refs)
    };
    let o = run(train_args(&model, &[]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("# effective train config"));
    assert!(stdout(&o).contains("trained to step 2"));
    let csv = fs::read_to_string(tmp.path().join("m.bin.loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,L_vertex,L_joint,L_smooth,total"));
    assert_eq!(csv.lines().count(), 3);

    // Overwrite guard, then resume continues the step counter.
    assert_eq!(code(&run(train_args(&model, &[]))), 3);
    let resumed = tmp.path().join("m2.bin");
    let o = run(train_args(&resumed, &["--resume", p(&model)]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("resuming at step 2"));
    assert!(stdout(&o).contains("trained to step 4"));

    // Config errors write nothing.
    let bad = tmp.path().join("bad.bin");
    assert_eq!(code(&run(train_args(&bad, &["--lr", "-1"]))), 2);
    assert!(!bad.exists());

    let nodiff = tmp.path().join("nd.bin");
    let o = run(train_args(&nodiff, &["--ablation", "no-diffusion"]));
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("use_diffusion=false"));

    // Sampling is deterministic and writes a valid OBJ.
    let obj1 = tmp.path().join("s1.obj");
    let obj2 = tmp.path().join("s2.obj");
    for obj in [&obj1, &obj2] {
        let o = diffmesh(&["sample", "--model", p(&model), "--data", p(&data), "--index", "17", "--out", p(obj)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&obj1).unwrap();
    assert_eq!(text, fs::read_to_string(&obj2).unwrap());
    let (v, f) = parse_obj(&text).unwrap();
    assert_eq!(v.len(), 96);
    assert!(f.iter().flatten().all(|&i| i < 96));

    // Sweep emits one row per setting.
    let csv = tmp.path().join("eval.csv");
    let o = diffmesh(&["eval", "--model", p(&model), "--data", p(&data), "--steps", "1,2,5,10", "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "variant,E_J,E_PJ,E_V,E_PV");
    assert_eq!(rows.len(), 5);
    assert!(rows[4].starts_with("steps=10,"));
    let csv2 = tmp.path().join("eval2.csv");
    diffmesh(&["eval", "--model", p(&model), "--data", p(&data), "--steps", "1,2,5,10", "--out", p(&csv2)]);
    assert_eq!(table, fs::read_to_string(&csv2).unwrap());

    let oracle = diffmesh(&["eval", "--oracle", "--data", p(&data)]);
    assert_eq!(code(&oracle), 0);
    let line = stdout(&oracle).lines().find(|l| l.starts_with("oracle")).unwrap().to_string();
    let vals: Vec<f64> = line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(vals.iter().all(|&v| v == 0.0), "{line}");

    // Export of a ground-truth sample reparses exactly.
    let gt = tmp.path().join("gt.obj");
    assert_eq!(code(&diffmesh(&["export-obj", "--data", p(&data), "--index", "3", "--out", p(&gt)])), 0);
    let (v, _) = parse_obj(&fs::read_to_string(&gt).unwrap()).unwrap();
    let ds = diffmesh::data::Dataset::read(&data, None).unwrap();
    assert_eq!(v, ds.samples[3].verts);
    let tpl = tmp.path().join("tpl.obj");
    assert_eq!(code(&diffmesh(&["export-obj", "--data", p(&data), "--template", "--out", p(&tpl)])), 0);
}

#[test]
fn mismatched_model_and_data_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d96 = tmp.path().join("d96");
    assert_eq!(code(&gen(&d96, &[])), 0);
    let d100 = tmp.path().join("d100");
    let o = diffmesh(&[
        "gen-data", "--out", p(&d100), "--set", "vertex_count=100", "--set", "joint_count=6", "--set",
        "image_size=16", "--samples", "4",
    ]);
    assert_eq!(code(&o), 0);
    let model = tmp.path().join("m.bin");
    let o = diffmesh(&[
        "train", "--data", p(&d96), "--out", p(&model), "--epochs", "1", "--samples", "4", "--set", "width=16",
        "--set", "heads=2", "--set", "num_blocks=1", "--set", "timesteps=20",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let obj = tmp.path().join("x.obj");
    let o = diffmesh(&["sample", "--model", p(&model), "--data", p(&d100), "--index", "0", "--out", p(&obj)]);
    assert_eq!(code(&o), 2);
    assert!(!obj.exists());
    let o = diffmesh(&["eval", "--model", p(&tmp.path().join("missing.bin")), "--data", p(&d96)]);
    assert_eq!(code(&o), 3);
}
