use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn progembed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progembed")).args(args).output().expect("binary runs")
}

const SMALL: &str = "\
task = \"midpoint\"
corpus_size = 30
k_budget = 5
compose_size = 15

[npm]
m = 6
epochs = 3
pretrain_epochs = 3

[tree]
epochs = 2
";

fn pipeline(config: &Path, out: &Path) {
    let steps: &[&[&str]] = &[
        &["gen"],
        &["extract"],
        &["train", "--model", "npm"],
        &["train", "--model", "rnn"],
        &["eval-post"],
        &["compose"],
        &["feedback", "--method", "npm_rnn"],
        &["feedback", "--method", "bag", "--strategy", "random"],
        &["feedback", "--method", "knn", "--strategy", "most_common"],
        &["feedback", "--method", "unittest", "--strategy", "random"],
        &["report"],
    ];
    for step in steps {
        let mut args = vec!["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "11"];
        args.extend_from_slice(step);
        let o = progembed(&args);
        assert!(o.status.success(), "{step:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let a = tmp.path().join("a");
    pipeline(&config, &a);
    let sa = snapshot(&a);
    fs::remove_dir_all(&a).unwrap();
    pipeline(&config, &a);
    let sb = snapshot(&a);
    assert!(sa.iter().any(|(n, _)| n == "compose.csv"));
    assert!(sa.iter().any(|(n, _)| n == "config.toml"));
    assert_eq!(sa.len(), sb.len());
    for ((na, da), (nb, db)) in sa.iter().zip(&sb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
    let saved = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 11"));
}

#[test]
fn distinct_seeds_give_distinct_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let mut corpora = Vec::new();
    for seed in ["1", "2", "3"] {
        let out = tmp.path().join(seed);
        let o = progembed(&["--seed", seed, "--out", out.to_str().unwrap(), "gen"]);
        assert!(o.status.success());
        corpora.push(fs::read(out.join("corpus.tsv")).unwrap());
    }
    assert_ne!(corpora[0], corpora[1]);
    assert_ne!(corpora[1], corpora[2]);
    assert_ne!(corpora[0], corpora[2]);
}

#[test]
fn exit_codes() {
    assert_eq!(progembed(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(progembed(&["--help"]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    // No corpus in the output directory yet.
    assert_eq!(progembed(&["--out", out, "extract"]).status.code(), Some(2));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "task = \"nonexistent\"\n").unwrap();
    assert_eq!(progembed(&["--config", bad.to_str().unwrap(), "gen"]).status.code(), Some(1));
    let diverge = tmp.path().join("diverge.toml");
    fs::write(&diverge, "corpus_size = 20\n[npm]\nm = 4\nlearning_rate = 1e300\nepochs = 2\npretrain_epochs = 2\n").unwrap();
    let args = ["--config", diverge.to_str().unwrap(), "--out", out];
    assert!(progembed(&[&args[..], &["gen"]].concat()).status.success());
    assert_eq!(progembed(&[&args[..], &["train", "--model", "npm"]].concat()).status.code(), Some(3));
}
