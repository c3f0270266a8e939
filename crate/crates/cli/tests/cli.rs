use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn slt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slt"))
        .args(args)
        .env("SLT_THREADS", "1")
        .output()
        .expect("spawn slt")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
[model]
d_model = 8
ff_dim = 16
enc_layers = 2
dec_layers = 1
n_heads = 2

[train]
batch_size = 8
max_epochs = 1

[task]
mode = "many2one"

[data]
languages = [{sl = "bfi", lang = "en"}, {sl = "ase", lang = "en"}]
lexicon_size = 10
train_size = 16
dev_size = 4
test_size = 4
"#;

#[test]
fn unknown_subcommand_exits_2() {
    let out = slt(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    assert_eq!(slt(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_manifest_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = slt(&["train", "--data", p(&dir.path().join("nowhere")), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn malformed_config_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nd_model = 8\nbogus = 1\n").unwrap();
    let out = slt(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("data"))]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_ne!(out.status.code(), Some(0));
    assert!(err.contains('3'), "{err}");
}

#[test]
fn evaluating_a_file_against_itself_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("refs.txt");
    fs::write(&f, "the cat sat on the mat\nhello world again\n").unwrap();
    let out = slt(&["evaluate", "--hyp", p(&f), "--ref", p(&f)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("BLEU\t100.00"));
}

#[test]
fn gen_train_translate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let hyp = dir.path().join("hyp.tsv");

    assert_eq!(slt(&["gen-data", "--config", p(&cfg), "--out", p(&data)]).status.code(), Some(0));
    for split in ["train", "dev", "test"] {
        assert!(data.join(format!("{split}.jsonl")).exists());
    }
    let out = slt(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--quiet"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("ckpt_best").exists());
    assert!(run.join("train_log.jsonl").exists());
    assert!(run.join("resolved_config.toml").exists());

    let out = slt(&["translate", "--ckpt", p(&run.join("ckpt_best")), "--data", p(&data), "--beam", "2", "--out", p(&hyp)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&hyp).unwrap();
    assert!(text.starts_with("id\tsl\tlang\thyp\tscore\ttruncated\n"));
    assert_eq!(text.lines().count(), 1 + 8);

    let out = slt(&["evaluate", "--hyp", p(&hyp), "--ref", p(&data.join("test.jsonl")), "--metric", "bleu,rouge"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("BLEU\t") && stdout.contains("ROUGE-L\t"), "{stdout}");
}
