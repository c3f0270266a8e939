use slt_core::data::{build_vocab, gen_synthetic_corpus, LanguagePair, SynthConfig, TaskMode, TaskSpec, Tokenizer, Vocabulary};
use slt_core::decoding::{parse_hypotheses_tsv, render_hypotheses_tsv, translate_corpus, DecodeConfig, Search};
use slt_core::model::{parse_checkpoint, write_checkpoint_to, Checkpoint, CheckpointMeta, ModelConfig, ModelParams};
use slt_core::Error;

fn setup(mode: TaskMode) -> (ModelConfig, ModelParams, Vocabulary, TaskSpec, Vec<slt_core::data::Sample>) {
    let syn = gen_synthetic_corpus(&SynthConfig {
        languages: match mode {
            TaskMode::OneToOne => vec![LanguagePair::new("bfi", "en")],
            TaskMode::ManyToOne => vec![LanguagePair::new("bfi", "en"), LanguagePair::new("ase", "en")],
            TaskMode::ManyToMany => vec![LanguagePair::new("bfi", "en"), LanguagePair::new("gsg", "de")],
        },
        lexicon_size: 10,
        train_size: 20,
        dev_size: 4,
        test_size: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let task = TaskSpec::new(mode, true);
    let vocab = build_vocab(&syn.corpus, &task).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        ff_dim: 16,
        enc_layers: 2,
        dec_layers: 1,
        n_heads: 2,
        text_vocab: vocab.len(),
        lid_vocab: vocab.lid_len(),
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, 3).unwrap();
    (cfg, params, vocab, task, syn.corpus.test)
}

#[test]
fn empty_input_gives_empty_output() {
    let (cfg, params, vocab, task, _) = setup(TaskMode::ManyToOne);
    for search in [Search::Greedy, Search::Beam] {
        let out = translate_corpus(&cfg, &params, &DecodeConfig::default(), &[], &vocab, &task, Tokenizer::Whitespace, search, 1).unwrap();
        assert!(out.is_empty());
    }
}

#[test]
fn duplicate_ids_are_rejected() {
    let (cfg, params, vocab, task, mut test) = setup(TaskMode::ManyToOne);
    test[1].id = test[0].id.clone();
    let err = translate_corpus(&cfg, &params, &DecodeConfig::default(), &test, &vocab, &task, Tokenizer::Whitespace, Search::Greedy, 1).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
}

#[test]
fn output_order_and_threading_are_stable() {
    let (cfg, params, vocab, task, test) = setup(TaskMode::ManyToMany);
    let dcfg = DecodeConfig {
        beam: 3,
        max_len: Some(6),
        ..DecodeConfig::default()
    };
    let one = translate_corpus(&cfg, &params, &dcfg, &test, &vocab, &task, Tokenizer::Whitespace, Search::Beam, 1).unwrap();
    let many = translate_corpus(&cfg, &params, &dcfg, &test, &vocab, &task, Tokenizer::Whitespace, Search::Beam, 3).unwrap();
    assert_eq!(one, many);
    let ids: Vec<&str> = one.iter().map(|t| t.id.as_str()).collect();
    let want: Vec<&str> = test.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, want);
    for t in &one {
        assert!(t.tokens.iter().all(|w| !w.starts_with('<')), "{:?}", t.tokens);
    }

    let rows = parse_hypotheses_tsv(&render_hypotheses_tsv(&one), "hyp").unwrap();
    assert_eq!(rows.len(), one.len());
    for (r, t) in rows.iter().zip(&one) {
        assert_eq!((&r.id, &r.sl, &r.text, r.truncated), (&t.id, &t.sl, &t.text, t.truncated));
    }
}

#[test]
fn checkpoint_bytes_roundtrip() {
    let (cfg, params, vocab, task, _) = setup(TaskMode::OneToOne);
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            model: cfg,
            vocab,
            task,
            step: 7,
            experiment: "seed = 1\n".into(),
        },
        params,
        opt: None,
    };
    let bytes = write_checkpoint_to(&ckpt).unwrap();
    let back = parse_checkpoint(&bytes).unwrap();
    assert_eq!(back.meta, ckpt.meta);
    assert_eq!(write_checkpoint_to(&back).unwrap(), bytes);
    assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
}
