//! End-to-end acceptance checks. Each test prints one `[Cn] PASS|FAIL` line to
//! stderr (uncaptured) before asserting.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use slt_cli::config::ExperimentConfig;
use slt_cli::studies::{render_ablation_tsv, run_ablation, run_conflict_study};
use slt_core::ctc::{ctc_loss, ctc_loss_bruteforce, CtcPosteriors};
use slt_core::data::{
    gen_synthetic_corpus, make_labels, Labels, LanguagePair, Sample, SynthConfig, TaskMode, TaskSpec, Tokenizer, Vocabulary,
};
use slt_core::decoding::{beam_search, greedy_decode, lid_greedy_decode, translate_corpus, DecodeConfig, Search};
use slt_core::eval::{bleu, compare_runs, render_delta_tsv, rouge_l, BleuTokenizer, Smoothing};
use slt_core::model::{compute_total_loss, evaluate_loss, ModelConfig, ModelParams};
use slt_core::numerics::{finite_diff_grad, max_relative_error, Rng, Tensor};
use slt_core::training::{train, TrainConfig, TrainOptions};

fn report(id: &str, pass: bool, detail: &str) {
    let _ = writeln!(
        std::io::stderr(),
        "[{id}] {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{id} failed: {detail}");
}

fn random_posteriors(frames: usize, vocab: usize, rng: &mut Rng) -> CtcPosteriors {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            let e: Vec<f64> = (0..vocab).map(|_| (2.0 * rng.normal()).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect();
    CtcPosteriors::from_probs(&rows, 0).unwrap()
}

#[test]
fn c1_ctc_matches_exhaustive_enumeration() {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let (mut cells, mut worst, mut draws) = (0, 0.0f64, 0);
    let mut consistent = true;
    for t in 1..=6 {
        for l in 0..=3 {
            for v in 2..=4 {
                cells += 1;
                for _ in 0..50 {
                    let post = random_posteriors(t, v, &mut rng);
                    let target: Vec<usize> = (0..l).map(|_| rng.int_in(1, v - 1)).collect();
                    let brute = ctc_loss_bruteforce(&post, &target).unwrap();
                    match ctc_loss(&post, &target) {
                        Ok((loss, _)) => worst = worst.max((loss - brute).abs()),
                        Err(_) => consistent &= brute.is_infinite(),
                    }
                    draws += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "C1",
        consistent && worst <= 1e-6 && secs <= 120.0,
        &format!("{cells} cells, {draws} draws, max |dp - brute| = {worst:.2e} (tol 1e-6), {secs:.1}s (limit 120s)"),
    );
}

fn grad_check_model() -> (ModelConfig, ModelParams, Vec<Tensor>, Vec<Labels>) {
    let cfg = ModelConfig {
        feature_dim: 3,
        d_model: 8,
        ff_dim: 16,
        enc_layers: 2,
        dec_layers: 2,
        n_heads: 2,
        dropout: 0.0,
        text_vocab: 9,
        lid_vocab: 3,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, 5).unwrap();
    let mut rng = Rng::new(6);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (frames, words, sl) in [(7usize, vec![5usize, 6, 5], 1usize), (5, vec![7, 8], 2)] {
        feats.push(Tensor::new(vec![frames, 3], (0..frames * 3).map(|_| rng.normal()).collect()).unwrap());
        let mut attn = vec![2];
        attn.extend(&words);
        attn.push(3);
        labels.push(Labels {
            attn,
            lid: Some(vec![sl; words.len()]),
            txt_ctc: words,
        });
    }
    (cfg, params, feats, labels)
}

#[test]
fn c2_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = Rng::new(7);
    let mut ctc_worst = 0.0f64;
    for (t, v, target) in [(4, 3, vec![1, 2]), (6, 4, vec![3, 3, 1]), (5, 2, vec![1]), (3, 3, vec![])] {
        let post = random_posteriors(t, v, &mut rng);
        let (_, grad) = ctc_loss(&post, &target).unwrap();
        let num = finite_diff_grad(
            |x| ctc_loss(&CtcPosteriors::from_log_probs_unchecked(x.clone(), 0), &target).unwrap().0,
            post.log_probs(),
            1e-5,
        )
        .unwrap();
        ctc_worst = ctc_worst.max(max_relative_error(&grad, &num, 1e-8));
    }

    let (cfg, p, feats, labels) = grad_check_model();
    let fr: Vec<&Tensor> = feats.iter().collect();
    let lr: Vec<&Labels> = labels.iter().collect();
    let out = compute_total_loss(&cfg, &p, &fr, &lr, None).unwrap();
    let mut joint_worst = 0.0f64;
    let mut shift_invariant_ok = true;
    for (i, name) in p.names().iter().enumerate() {
        let num = finite_diff_grad(
            |t| {
                let mut q = p.clone();
                q.tensors_mut()[i] = t.clone();
                evaluate_loss(&cfg, &q, &fr, &lr).unwrap().l_total
            },
            &p.tensors()[i],
            1e-4,
        )
        .unwrap();
        if name.ends_with(".bk") {
            // key biases cancel in the attention softmax: the true gradient is zero
            shift_invariant_ok &= out.grads[i].data().iter().all(|g| g.abs() < 1e-12);
            shift_invariant_ok &= num.data().iter().all(|g| g.abs() < 1e-8);
            continue;
        }
        joint_worst = joint_worst.max(max_relative_error(&out.grads[i], &num, 1e-6));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "C2",
        ctc_worst <= 1e-4 && joint_worst <= 1e-4 && shift_invariant_ok && secs <= 300.0,
        &format!(
            "ctc rel err {ctc_worst:.2e}, joint loss rel err {joint_worst:.2e} over {} tensors (tol 1e-4), {secs:.1}s (limit 300s)",
            p.names().len()
        ),
    );
}

fn lid_exact_match(cfg: &ModelConfig, params: &ModelParams, vocab: &Vocabulary, task: &TaskSpec, samples: &[Sample]) -> f64 {
    let hits = samples
        .iter()
        .filter(|s| {
            let want = make_labels(s, task, vocab).unwrap().lid.unwrap();
            lid_greedy_decode(cfg, params, &s.features).unwrap() == want
        })
        .count();
    100.0 * hits as f64 / samples.len() as f64
}

#[test]
fn c3_synthetic_one_to_one_mastery() {
    let start = Instant::now();
    let syn = gen_synthetic_corpus(&SynthConfig {
        languages: vec![LanguagePair::new("bfi", "en")],
        lexicon_size: 50,
        noise: 0.05,
        feature_dim: 16,
        train_size: 2000,
        dev_size: 100,
        test_size: 500,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let model = ModelConfig {
        feature_dim: 16,
        d_model: 64,
        ff_dim: 256,
        enc_layers: 2,
        dec_layers: 2,
        n_heads: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        batch_size: 32,
        max_epochs: 120,
        patience: 120,
        seed: 1,
        ..TrainConfig::default()
    };
    let task = TaskSpec::new(TaskMode::OneToOne, true);
    let out = train(&model, &tcfg, &syn.corpus, &task, None, TrainOptions::default()).unwrap();
    let (cfg, params, vocab) = (&out.best.meta.model, &out.best.params, &out.best.meta.vocab);
    let test = &syn.corpus.test;
    let hyps = translate_corpus(cfg, params, &DecodeConfig::default(), test, vocab, &task, Tokenizer::Whitespace, Search::Beam, 1)
        .unwrap();
    let h: Vec<String> = hyps.iter().map(|t| t.text.clone()).collect();
    let r: Vec<String> = test.iter().map(|s| s.text.join(" ")).collect();
    let score = bleu(&h, &r, BleuTokenizer::Whitespace, Smoothing::None).unwrap().bleu;
    let lid = lid_exact_match(cfg, params, vocab, &task, test);
    let secs = start.elapsed().as_secs_f64();
    report(
        "C3",
        score >= 95.0 && lid >= 99.0 && secs <= 1800.0,
        &format!(
            "beam-5 test BLEU {score:.2} (>= 95), LID exact match {lid:.1}% (>= 99) on {} sentences, best step {}, {secs:.0}s (limit 1800s)",
            test.len(),
            out.best.meta.step
        ),
    );
}

fn study_config(languages: &[(&str, &str)], mode: &str, frames: [usize; 2]) -> ExperimentConfig {
    let langs: Vec<String> = languages
        .iter()
        .map(|(s, l)| format!("{{sl = \"{s}\", lang = \"{l}\"}}"))
        .collect();
    let text = format!(
        r#"
[model]
feature_dim = 16
d_model = 32
ff_dim = 64
enc_layers = 2
dec_layers = 2
n_heads = 4
dropout = 0.0

[train]
batch_size = 16
max_epochs = 30
patience = 100

[data]
languages = [{}]
lexicon_size = 20
overlap = 0.5
frames_per_sign = [{}, {}]
sentence_len = [2, 5]
train_size = 1000
dev_size = 50
test_size = 100

[task]
mode = "{mode}"

[study]
seeds = [1, 2, 3]
"#,
        langs.join(", "),
        frames[0],
        frames[1]
    );
    ExperimentConfig::parse(&text, "study").unwrap()
}

#[test]
fn c4_universal_model_loses_to_individual_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = study_config(&[("csl", "en"), ("ukl", "en"), ("rsl", "en"), ("bfi", "en")], "many2one", [2, 3]);
    let rep = run_conflict_study(&cfg, dir.path(), 1).unwrap();
    let ind = rep.deltas.mean.score_a;
    let uni = rep.deltas.mean.score_b;
    let _ = write!(std::io::stderr(), "{}", render_delta_tsv(&rep.deltas));
    for (seed, t) in cfg.study.seeds.iter().zip(&rep.per_seed) {
        let _ = writeln!(std::io::stderr(), "seed {seed}: mean delta {:.2}", t.mean.delta);
    }
    report(
        "C4",
        uni < ind,
        &format!("many-to-one, 4 languages, overlap 0.5, 3 seeds: universal {uni:.2} vs individual {ind:.2} (delta {:.2}, must be < 0)", uni - ind),
    );
}

#[test]
fn c5_token_level_lid_helps_many_to_many() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = study_config(&[("csl", "zh"), ("gsg", "de"), ("bfi", "en"), ("rsl", "ru")], "many2many", [3, 4]);
    cfg.study.order = Some(vec!["csl".into(), "gsg".into(), "bfi".into(), "rsl".into()]);
    let rep = run_ablation(&cfg, 4, dir.path(), 1).unwrap();
    let _ = write!(std::io::stderr(), "{}", render_ablation_tsv(&rep.rows));
    let last = rep.rows.last().unwrap();
    report(
        "C5",
        rep.rows.len() == 3 && last.with_lid >= last.without_lid,
        &format!(
            "many-to-many (4\u{2192}4), overlap 0.5, 3 seeds: w LID {:.2} vs w/o LID {:.2} (must be >=)",
            last.with_lid, last.without_lid
        ),
    );
}

#[test]
fn c6_metrics_and_published_deltas() {
    let ws = BleuTokenizer::Whitespace;
    let same = ["the cat sat on the mat", "a quick brown fox"];
    let identity = bleu(&same, &same, ws, Smoothing::None).unwrap().bleu;
    let hand = bleu(&["the cat sat on mat"], &["the cat sat on the mat"], ws, Smoothing::None).unwrap().bleu;
    let rouge = rouge_l(&["the cat sat"], &["the cat sat down"], ws).unwrap();

    let individual = [6.24, 4.00, 3.69, 3.30, 3.77, 3.40, 3.63, 6.21, 4.49, 6.23];
    let universal = [2.72, 2.36, 2.19, 4.14, 3.31, 1.19, 3.02, 3.94, 3.20, 4.70];
    let expected = [-3.52, -1.64, -1.50, 0.84, -0.46, -2.21, -0.61, -2.27, -1.29, -1.53];
    let codes = ["csl", "ukl", "rsl", "icl", "gsg", "ise", "bqn", "swl", "lls", "bfi"];
    let a: Vec<(String, f64)> = codes.iter().zip(individual).map(|(c, v)| (format!("{c}-en"), v)).collect();
    let b: Vec<(String, f64)> = codes.iter().zip(universal).map(|(c, v)| (format!("{c}-en"), v)).collect();
    let table = compare_runs(&a, &b).unwrap();
    let rows_ok = table
        .rows
        .iter()
        .zip(expected)
        .all(|(r, e)| (r.delta - e).abs() < 5e-3);
    // the published mean row is computed from the published mean inputs
    let mean = compare_runs(&[("mean".into(), 4.60)], &[("mean".into(), 3.10)]).unwrap().mean.delta;

    report(
        "C6",
        (identity - 100.0).abs() < 1e-9
            && (hand - 57.89).abs() <= 0.01
            && (rouge - 85.71).abs() <= 0.01
            && rows_ok
            && (table.rows[0].delta + 3.52).abs() < 5e-3
            && (mean + 1.50).abs() < 5e-3,
        &format!(
            "identity {identity:.2}, hand BLEU {hand:.4} (57.89 +- 0.01), ROUGE-L {rouge:.4} (85.71 +- 0.01), csl delta {:.2}, mean delta {mean:.2}",
            table.rows[0].delta
        ),
    );
}

#[test]
fn c7_degenerate_beam_equals_greedy() {
    let syn = gen_synthetic_corpus(&SynthConfig {
        languages: vec![LanguagePair::new("bfi", "en")],
        lexicon_size: 12,
        feature_dim: 8,
        train_size: 200,
        dev_size: 10,
        test_size: 100,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let model = ModelConfig {
        feature_dim: 8,
        d_model: 16,
        ff_dim: 32,
        enc_layers: 2,
        dec_layers: 2,
        n_heads: 2,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let task = TaskSpec::new(TaskMode::OneToOne, true);
    let out = train(&model, &tcfg, &syn.corpus, &task, None, TrainOptions::default()).unwrap();
    let (cfg, params) = (&out.best.meta.model, &out.best.params);
    let dcfg = DecodeConfig {
        beam: 1,
        ctc_weight: 0.0,
        ..DecodeConfig::default()
    };
    let mut same = 0;
    let mut nonempty = 0;
    for s in &syn.corpus.test {
        let g = greedy_decode(cfg, params, &[&s.features], &[vec![]], &dcfg).unwrap();
        let b = beam_search(cfg, params, &dcfg, &s.features, &[]).unwrap();
        if b[0].body() == g[0].0.as_slice() {
            same += 1;
        }
        nonempty += usize::from(!g[0].0.is_empty());
    }
    let n = syn.corpus.test.len();
    report(
        "C7",
        same == n && n == 100,
        &format!("{same}/{n} inputs token-identical ({nonempty} non-empty outputs)"),
    );
}

fn slt(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_slt"))
        .args(args)
        .current_dir(dir)
        .env("SLT_THREADS", "1")
        .output()
        .unwrap()
}

#[test]
fn c8_training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
[model]
feature_dim = 8
d_model = 16
ff_dim = 32
enc_layers = 2
dec_layers = 2
n_heads = 2
dropout = 0.1

[train]
max_epochs = 3
log_every = 1

[data]
languages = [{sl = "bfi", lang = "en"}, {sl = "gsg", lang = "en"}]
lexicon_size = 10
overlap = 0.3
feature_dim = 8
train_size = 60
dev_size = 10
test_size = 10
"#;
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    let gen = slt(&["gen-data", "--config", "exp.toml", "--out", "data"], dir.path());
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    for run in ["run1", "run2"] {
        let o = slt(
            &["train", "--config", "exp.toml", "--data", "data", "--task", "many2one", "--out", run, "--quiet"],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |run: &str, f: &str| std::fs::read(dir.path().join(run).join(f)).unwrap();
    let ckpt_same = read("run1", "ckpt_best") == read("run2", "ckpt_best");
    let log_same = read("run1", "train_log.jsonl") == read("run2", "train_log.jsonl");
    report(
        "C8",
        ckpt_same && log_same,
        &format!(
            "two `slt train` runs: best checkpoint identical = {ckpt_same} ({} bytes), log identical = {log_same}",
            read("run1", "ckpt_best").len()
        ),
    );
}

#[test]
fn c9_label_rows_for_hello_world() {
    let vocab = Vocabulary::new(
        vec!["en".into()],
        vec!["ase".into()],
        vec!["hello".into(), "world".into()],
    )
    .unwrap();
    let sample = Sample {
        id: "s".into(),
        sl: "ase".into(),
        lang: "en".into(),
        features: Tensor::zeros(&[8, 2]),
        text: vec!["hello".into(), "world".into()],
    };
    let render = |ids: &[usize]| vocab.decode(ids).join(" ");
    let labels = |mode| make_labels(&sample, &TaskSpec::new(mode, true), &vocab).unwrap();
    let m2m = labels(TaskMode::ManyToMany);
    let m2o = labels(TaskMode::ManyToOne);
    let o2o = labels(TaskMode::OneToOne);
    let lid: Vec<String> = m2m.lid.clone().unwrap().iter().map(|&i| vocab.lid_token(i)).collect();
    let rows = [
        render(&m2m.txt_ctc),
        render(&m2o.txt_ctc),
        render(&o2o.txt_ctc),
        lid.join(" "),
    ];
    let want = ["<en> hello world", "hello world", "hello world", "<ase> <ase> <ase>"];
    let attn_ok = render(&m2m.attn) == "<bos> <en> hello world <eos>" && render(&o2o.attn) == "<bos> hello world <eos>";
    report(
        "C9",
        rows == want && attn_ok,
        &format!("rows {rows:?}"),
    );
}
