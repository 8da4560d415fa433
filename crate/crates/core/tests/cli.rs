use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fairmargin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairmargin")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CONFIG: &str = "
seed = 2
input_dim = 6
group.a.classes = 3
group.a.sigma = 0.1
group.a.samples_per_class = 10
group.b.classes = 2
group.b.sigma = 0.3
group.b.samples_per_class = 10
epochs = 2
batch_size = 8
hidden = 8
embedding_dim = 4
eval.genuine_per_class = 3
eval.impostor_count = 40
grad_check.configs = 5
";

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let data = dir.join("data.csv");
    let out = fairmargin(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    (p(&cfg).to_string(), p(&data).to_string())
}

#[test]
fn train_writes_artifacts_and_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    let out = fairmargin(&["train", "--config", &cfg, "--data", &data, "--out-dir", p(&run)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("final validation accuracy"));
    for name in ["checkpoint.txt", "favoritism.txt", "train_log.csv"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().skip(1).all(|l| l.ends_with(",0.0")));
    let favoritism = fs::read_to_string(run.join("favoritism.txt")).unwrap();
    assert_eq!(favoritism.matches("favoritism-state v1").count(), 3);
}

#[test]
fn eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    fairmargin(&["train", "--config", &cfg, "--data", &data, "--out-dir", p(&run)]);
    let ev = dir.path().join("eval");
    let ck = run.join("checkpoint.txt");
    let out = fairmargin(&[
        "eval", "--config", &cfg, "--checkpoint", p(&ck), "--data", &data, "--out-dir", p(&ev), "--fairness",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["report.json", "report.csv", "heatmap.csv", "pairs.csv"] {
        assert!(ev.join(name).is_file(), "{name}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["fairness"]["gini"].is_number());
    assert_eq!(report["per_group"].as_object().unwrap().len(), 2);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let code = |args: &[&str]| fairmargin(args).status.code();

    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "no_such_key = 1\n").unwrap();
    let bad = fairmargin(&["grad-check", "--config", p(&bad_cfg)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no_such_key"));
    assert_eq!(code(&["train", "--config", &cfg, "--data", &data, "--out-dir", "x", "--loss", "hinge"]), Some(2));
    assert_eq!(code(&["train", "--config", &cfg, "--data", &data, "--out-dir", "x", "--harmony", "2"]), Some(2));
    assert_eq!(code(&["eval", "--out-dir", "x"]), Some(2));

    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&["train", "--data", p(&missing), "--out-dir", p(&dir.path().join("r"))]), Some(3));

    let broken = dir.path().join("broken.csv");
    let text = fs::read_to_string(&data).unwrap();
    fs::write(&broken, text.replacen(",0.", ",zz", 1)).unwrap();
    assert_eq!(code(&["train", "--data", p(&broken), "--out-dir", p(&dir.path().join("r"))]), Some(4));

    let run = dir.path().join("run");
    fairmargin(&["train", "--config", &cfg, "--data", &data, "--out-dir", p(&run)]);
    let ck = run.join("checkpoint.txt");
    let eval_dir = dir.path().join("e");
    let one_group = [
        "eval", "--config", &cfg, "--checkpoint", p(&ck), "--data", &data, "--attributes", "group:a",
        "--out-dir", p(&eval_dir),
    ];
    assert_eq!(code(&one_group), Some(0));
    let mut strict = one_group.to_vec();
    strict.push("--fairness");
    assert_eq!(code(&strict), Some(5));

    assert_eq!(code(&["grad-check", "--config", &cfg]), Some(0));
    assert_eq!(code(&["grad-check", "--config", &cfg, "--corrupt-gradient"]), Some(1));
}

#[test]
fn wall_time_flag_records_durations() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    let out = fairmargin(&["train", "--config", &cfg, "--data", &data, "--out-dir", p(&run), "--log-wall-time"]);
    assert_eq!(out.status.code(), Some(0));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let last: f64 = log.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(last > 0.0);
}

#[test]
fn gen_data_writes_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = setup(dir.path());
    let text = fs::read_to_string(&data).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "id,class,attr:group:a,attr:group:b,x0,x1,x2,x3,x4,x5");
    assert_eq!(lines.count(), 50);
}

#[test]
fn zero_epochs_gives_empty_log_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    let zero = dir.path().join("zero.cfg");
    fs::write(&zero, fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 0")).unwrap();
    let out = fairmargin(&["train", "--config", p(&zero), "--data", &data, "--out-dir", p(&run)]);
    assert_eq!(out.status.code(), Some(0));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let ck = fs::read_to_string(run.join("checkpoint.txt")).unwrap();
    assert!(ck.contains("epoch 0"), "{ck}");
}

/// Two groups scored against a hub at angle 0. Group a: genuine
/// {0.1, 0.4, 0.5}, impostor {0.2, 0.3}, EER 1/3. Group b: genuine
/// {0.2, 0.6}, impostor {0.4, 0.8}, EER 1/2. Overall EER 4/9.
#[test]
fn eval_matches_hand_scored_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let mut emb = String::from("id,class,attr:g:a,attr:g:b,e0,e1\n");
    let mut pairs = String::from("id_a,id_b,genuine\n");
    let groups: [(&str, &[(f64, bool)], [f64; 2]); 2] = [
        ("a", &[(0.1, true), (0.4, true), (0.5, true), (0.2, false), (0.3, false)], [1.0, -1.0]),
        ("b", &[(0.2, true), (0.6, true), (0.4, false), (0.8, false)], [-1.0, 1.0]),
    ];
    let mut class = 0;
    for (g, members, [x, y]) in groups {
        emb.push_str(&format!("{g}0,{class},{x:?},{y:?},1.0,0.0\n"));
        for (i, (cos, genuine)) in members.iter().enumerate() {
            let sin = (1.0 - cos * cos).sqrt();
            let c = if *genuine { class } else { class + 1 + i };
            emb.push_str(&format!("{g}{},{c},{x:?},{y:?},{cos:?},{sin:?}\n", i + 1));
            pairs.push_str(&format!("{g}0,{g}{},{}\n", i + 1, u8::from(*genuine)));
        }
        class += 100;
    }
    let (e, pr) = (dir.path().join("emb.csv"), dir.path().join("pairs.csv"));
    fs::write(&e, emb).unwrap();
    fs::write(&pr, pairs).unwrap();
    let ev = dir.path().join("eval");
    let out = fairmargin(&["eval", "--embeddings", p(&e), "--pairs", p(&pr), "--out-dir", p(&ev), "--fairness"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let close = |v: &serde_json::Value, want: f64| (v.as_f64().unwrap() - want).abs() < 1e-12;
    assert!(close(&r["per_group"]["g:a"]["eer"], 1.0 / 3.0), "{r}");
    assert!(close(&r["per_group"]["g:b"]["eer"], 0.5), "{r}");
    assert!(close(&r["overall"]["eer"], 4.0 / 9.0), "{r}");
    assert!(close(&r["fairness"]["std"], 1.0 / 12.0), "{r}");
    assert!(close(&r["fairness"]["gini"], 0.1), "{r}");
    assert!(close(&r["fairness"]["ser"], 1.5), "{r}");
}
