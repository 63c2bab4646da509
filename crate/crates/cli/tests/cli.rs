use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dagkit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dagkit"))
        .args(args)
        .current_dir(dir)
        .env("DAGKIT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let diamond = write(dir.path(), "diamond.txt", "# n=4 d=1\n0 1\n0 2\n1 3\n2 3\n");
    let cyclic = write(dir.path(), "cyclic.txt", "# n=2 d=1\n0 1\n1 0\n");

    let ok = dagkit(&["validate", &diamond], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("n=4 edges=4 depth=2"));

    let bad = dagkit(&["validate", &cyclic], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("cycle"));

    let usage = dagkit(&["validate", &diamond, "--bogus"], dir.path());
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn chain_statistics() {
    let dir = tempfile::tempdir().unwrap();
    assert!(dagkit(&["gen", "chain,n=8", "--out", "chain.txt"], dir.path()).status.success());
    let out = dagkit(&["stats", "chain.txt", "--format", "kv"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("avg_n_k=7.00"), "{text}");
    assert!(text.contains("total_n_k=56"));
}

#[test]
fn reach_writes_index() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "g.txt", "# n=3 d=1\n0 1\n1 2\n");
    let out = dagkit(&["reach", &g, "--k", "1", "--out", "idx.txt"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let idx = fs::read_to_string(dir.path().join("idx.txt")).unwrap();
    let parsed = dagkit::ReachabilityIndex::from_text(&idx).unwrap();
    assert_eq!(parsed.neighbors(0), &[1]);
    assert_eq!(parsed.neighbors(1), &[0, 2]);
    assert_eq!(parsed.neighbors(2), &[1]);
}

#[test]
fn pagerank_support() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "g.txt", "# n=4 d=1\n0 1\n1 2\n");
    let out = dagkit(&["ppr-check", &g, "--root", "1"], dir.path());
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("ok=true"));
    assert!(text.contains("zero_set={3}"), "{text}");
}

#[test]
fn train_then_forward() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.txt", "lr=0.005\nepochs=3\nbatch_size=4\nd_model=8\nheads=2\nblocks=1\nk=2\n");
    let out = dagkit(
        &["train", "--gen", "layered,layers=3,p=0.3,d=2", "--count", "10", "--n-range", "4:9", "--cfg", "cfg.txt"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("graphs=10 train=8 val=2"));
    let history = fs::read_to_string(dir.path().join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss");
    assert_eq!(lines.len(), 4);

    assert!(dagkit(&["gen", "layered,n=6,layers=3,d=2,seed=9", "--out", "one.txt"], dir.path()).status.success());
    let fwd = dagkit(&["forward", "one.txt", "--ckpt", "model.ckpt", "--k", "2"], dir.path());
    assert!(fwd.status.success(), "{}", String::from_utf8_lossy(&fwd.stderr));
    let rows: Vec<String> = stdout(&fwd).lines().map(str::to_owned).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split(' ').count() == 1 && r.parse::<f64>().unwrap().is_finite()));

    let graph = dagkit(&["forward", "one.txt", "--ckpt", "model.ckpt", "--task", "graph", "--readout", "sinks"], dir.path());
    assert!(graph.status.success());
    assert_eq!(stdout(&graph).lines().count(), 1);
}

#[test]
fn gradient_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dagkit(&["gradcheck", "--n", "6", "--samples", "200", "--seed", "3"], dir.path());
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("checked=200"));
}

#[test]
fn bench_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let bound = dagkit(&["bench", "bound", "--trees", "20", "--n-max", "64"], dir.path());
    let text = stdout(&bound);
    assert_eq!(bound.status.code(), Some(0), "{text}");
    assert!(text.contains("trees=20 violations=0"));
    assert!(text.contains("chain n=64 sum=4032 bound=4032 ok=true"));

    let scale = dagkit(&["bench", "scale", "--sizes", "16,32", "--repeats", "1", "--format", "csv"], dir.path());
    assert!(scale.status.success(), "{}", String::from_utf8_lossy(&scale.stderr));
    assert_eq!(stdout(&scale).lines().count(), 3);

    let cross = dagkit(&["bench", "crossover", "--sizes", "16,32", "--repeats", "1", "--format", "kv"], dir.path());
    assert_eq!(cross.status.code(), Some(0), "{}", stdout(&cross));
}
