use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gnas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnas"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const LANDSCAPE: &str = "\
dataset = \"landscape\"
n_blocks = 2
n_ops = 2
population_size = 8
generation_size = 8
mutation_prob = 0.05
epochs = 12
checkpoint_every = 4
";

const DESK: &str = "\
synthetic_classes = 4
synthetic_train_per_class = 8
synthetic_valid_per_class = 8
image_size = 8
n_blocks = 2
n_ops = 3
channels = 4
n_cells = 1
batch_size = 16
pad = 1
epochs = 2
population_size = 4
generation_size = 2
eval_subset = 16
final_epochs = 2
final_n_cells = 1
final_channels = 4
";

#[test]
fn enumerate_reports_exact_and_formula_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = gnas(dir.path(), &["enumerate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("140625000000"), "{text}");
    assert!(text.contains("45000000"), "{text}");
    assert!(text.contains("1e12"), "{text}");
}

#[test]
fn mode_flag_selects_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = gnas(dir.path(), &["--mode", "enumerate-space"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .contains("140625000000"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "learning_rte = 0.1\n").unwrap();
    let o = gnas(dir.path(), &["search", "--config", "bad.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rte"));

    fs::write(dir.path().join("neg.toml"), "mutation_prob = 1.5\n").unwrap();
    let o = gnas(dir.path(), &["search", "--config", "neg.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("mutation_prob"));

    let o = gnas(dir.path(), &["search", "--config", "missing.toml"]);
    assert_eq!(code(&o), 1);
    let o = gnas(dir.path(), &["--no-such-flag"]);
    assert_eq!(code(&o), 1);
    let o = gnas(dir.path(), &["search", "--mode", "ablate"]);
    assert_eq!(code(&o), 1);
    let o = gnas(dir.path(), &["final-train", "--out", "nothing-here"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("best.json"));
}

#[test]
fn landscape_search_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), LANDSCAPE).unwrap();
    let o = gnas(
        dir.path(),
        &["search", "--config", "run.toml", "--out", "r"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("r");
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,mean,max,min,std,inserted,lr,train_loss")
    );
    assert_eq!(lines.count(), 12);
    for name in ["input_cell.dot", "normal_cell.dot", "reduction_cell.dot"] {
        let dot = fs::read_to_string(run.join(name)).unwrap();
        let nodes = dot
            .lines()
            .filter(|l| l.contains("label=") && !l.contains("->"))
            .count();
        assert_eq!(nodes, 4, "{name}");
    }
    for name in ["best.json", "population.json", "state.ckpt", "search.toml"] {
        assert!(run.join(name).exists(), "{name}");
    }
    assert!(!run.join(".gnas.lock").exists());
    let pop: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("population.json")).unwrap()).unwrap();
    assert!(pop.get("schema").is_some() && pop.get("spec").is_some());
    assert_eq!(pop["members"].as_array().unwrap().len(), 8);

    // a second search into the same directory needs --resume
    let o = gnas(
        dir.path(),
        &["search", "--config", "run.toml", "--out", "r"],
    );
    assert_eq!(code(&o), 1);
    let o = gnas(
        dir.path(),
        &["search", "--config", "run.toml", "--out", "r", "--resume"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(run.join("history.csv")).unwrap(),
        history
    );
    let o = gnas(
        dir.path(),
        &[
            "search", "--config", "run.toml", "--out", "r", "--resume", "--seed", "9",
        ],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), LANDSCAPE).unwrap();
    let o = gnas(
        dir.path(),
        &[
            "search", "--config", "run.toml", "--out", "a", "--seed", "5",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gnas(
        dir.path(),
        &["--config", "a/search.toml", "--out", "b", "search"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    for f in [
        "history.csv",
        "best.json",
        "population.json",
        "normal_cell.dot",
    ] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    let o = gnas(
        dir.path(),
        &[
            "search", "--config", "run.toml", "--out", "c", "--seed", "6",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_ne!(read("a", "history.csv"), read("c", "history.csv"));
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), LANDSCAPE).unwrap();
    fs::create_dir(dir.path().join("r")).unwrap();
    fs::write(dir.path().join("r/.gnas.lock"), "1").unwrap();
    let o = gnas(
        dir.path(),
        &["search", "--config", "run.toml", "--out", "r"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn image_search_then_final_train_and_export() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("desk.toml"), DESK).unwrap();
    let o = gnas(
        dir.path(),
        &["search", "--config", "desk.toml", "--out", "d"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("d");
    assert!(run.join("weights.ckpt").exists());
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.lines().nth(1).unwrap().contains(",0.100000,"));

    let o = gnas(
        dir.path(),
        &["final-train", "--config", "desk.toml", "--out", "d"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let result: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("final.json")).unwrap()).unwrap();
    let acc = result["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(run.join("final_weights.ckpt").exists());
    assert_eq!(
        fs::read_to_string(run.join("final_history.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let o = gnas(
        dir.path(),
        &[
            "export-dot",
            "--config",
            "desk.toml",
            "--out",
            "dots",
            "--genome",
            "d/best.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["input_cell.dot", "normal_cell.dot", "reduction_cell.dot"] {
        assert_eq!(
            fs::read(dir.path().join("dots").join(name)).unwrap(),
            fs::read(run.join(name)).unwrap()
        );
    }

    // the individual was searched with 2 blocks
    let o = gnas(
        dir.path(),
        &["export-dot", "--out", "dots2", "--genome", "d/best.json"],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn diverging_training_exits_with_two_and_dumps_the_genome() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{DESK}lr = 1e200\ngrad_clip = 0\n");
    fs::write(dir.path().join("boom.toml"), cfg).unwrap();
    let o = gnas(
        dir.path(),
        &["search", "--config", "boom.toml", "--out", "x"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("x/abort.json")).unwrap())
            .unwrap();
    assert_eq!(dump["mode"], "search");
    assert!(dump["layer"].is_string());
    let genome = dump["genome"].as_array().expect("three genomes");
    assert_eq!(genome.len(), 3);
    assert_eq!(genome[0].as_array().unwrap().len(), 8);
    // rows written before the abort are still on disk
    let history = fs::read_to_string(dir.path().join("x/history.csv")).unwrap();
    assert!(history.starts_with("epoch,"));
    assert!(!dir.path().join("x/.gnas.lock").exists());
}

#[test]
fn ablate_writes_sweep_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{LANDSCAPE}ablate_seeds = 3\nablate_mutation_probs = [0.0, 0.5]\nablate_population_sizes = [4]\n"
    );
    fs::write(dir.path().join("abl.toml"), cfg).unwrap();
    let o = gnas(
        dir.path(),
        &["ablate", "--config", "abl.toml", "--out", "a"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("a/ablate_summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("mutation_prob,0,3,"));
    assert!(rows[3].starts_with("population_size,4,3,"));
    let history = fs::read_to_string(dir.path().join("a/ablate_history.csv")).unwrap();
    // 3 arms x 3 seeds x (12 epochs + initial population)
    assert_eq!(history.lines().count(), 1 + 3 * 3 * 13);
}
