//! Generator statistics, persistence round-trips and error reporting.

use std::fs;

use cogpath::synthdata::{
    answer_prior, generate_dataset, load_dataset, load_split, requested_prior, save_dataset,
    tv_distance, BiasSpec, DataDims, Dataset, Split, DEFAULT_NOISE_SIGMA,
};
use cogpath::Error;

const DIMS: DataDims = DataDims { d_q: 32, d_v: 32 };

fn dataset(beta: f64, n_train: usize, n_test: usize, seed: u64) -> Dataset {
    let spec = BiasSpec::shifted(16, 3, beta, DEFAULT_NOISE_SIGMA).unwrap();
    generate_dataset(&spec, DIMS, 16, n_train, n_test, seed).unwrap()
}

#[test]
fn unbiased_marginals_are_uniform() {
    let d = dataset(0.0, 20_000, 5_000, 1);
    for t in 0..3 {
        let k = d.meta.bias.answers_per_type[t].len() as f64;
        let p = answer_prior(&d.train, t, 16).unwrap();
        let uniform: Vec<f64> = (0..16)
            .map(|a| if d.meta.bias.answers_per_type[t].contains(&a) { 1.0 / k } else { 0.0 })
            .collect();
        assert!(tv_distance(&p, &uniform) < 0.02, "type {t}");
    }
}

#[test]
fn biased_marginals_match_requested_priors() {
    let d = dataset(0.9, 20_000, 5_000, 2);
    for t in 0..3 {
        let train = answer_prior(&d.train, t, 16).unwrap();
        let test = answer_prior(&d.test, t, 16).unwrap();
        let want_train = requested_prior(&d.meta.bias, Split::Train, t, 16);
        let want_test = requested_prior(&d.meta.bias, Split::Test, t, 16);
        assert!(tv_distance(&train, &want_train) < 0.02, "train type {t}");
        assert!(tv_distance(&test, &want_test) < 0.02, "test type {t}");
        // the shift between splits
        assert!(tv_distance(&train, &test) >= 0.5, "type {t}");
    }
}

#[test]
fn samples_obey_rule_and_partition() {
    let d = dataset(0.9, 3_000, 1_000, 3);
    for s in d.train.iter().chain(&d.test) {
        assert_eq!(s.answer, d.meta.bias.rule(s.q_type, s.c_q, s.c_v));
        assert!(d.meta.bias.answers_per_type[s.q_type].contains(&s.answer));
    }
}

#[test]
fn question_alone_does_not_determine_answer() {
    // Under uniform latents every answer of a type is reachable from each c_q
    // with equal count, so a q-only classifier is at chance.
    let spec = BiasSpec::shifted(16, 3, 0.0, DEFAULT_NOISE_SIGMA).unwrap();
    for (t, answers) in spec.answers_per_type.iter().enumerate() {
        let k = answers.len();
        for c_q in 0..k {
            let mut counts = [0usize; 16];
            for c_v in 0..k {
                counts[spec.rule(t, c_q, c_v)] += 1;
            }
            assert!(answers.iter().all(|&a| counts[a] == 1));
        }
    }
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(dataset(0.9, 500, 100, 7), dataset(0.9, 500, 100, 7));
    assert_ne!(dataset(0.9, 500, 100, 7).train, dataset(0.9, 500, 100, 8).train);
}

#[test]
fn save_load_save_is_byte_identical() {
    let d = dataset(0.9, 20_000, 5_000, 4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(a.path(), &d).unwrap();
    let loaded = load_dataset(a.path()).unwrap();
    assert!(loaded == d, "loaded dataset differs");
    assert!(loaded.train.iter().zip(&d.train).all(|(x, y)| x.answer == y.answer));
    save_dataset(b.path(), &loaded).unwrap();
    for name in ["meta.json", "train.jsonl", "test.jsonl"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn truncated_line_reports_its_number() {
    let d = dataset(0.5, 50, 10, 5);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &d).unwrap();
    let path = dir.path().join("train.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let half = lines[6].len() / 2;
    lines[6].truncate(half);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load_split(&path, &d.meta) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn dimension_mismatch_is_a_validation_error() {
    let d = dataset(0.5, 20, 10, 6);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &d).unwrap();
    let mut meta = d.meta.clone();
    meta.dims.d_v = 31;
    assert!(matches!(
        load_split(&dir.path().join("test.jsonl"), &meta),
        Err(Error::Validation(_))
    ));
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(BiasSpec::shifted(16, 3, 1.2, 0.1).is_err());
    assert!(BiasSpec::shifted(3, 3, 0.5, 0.1).is_err());
    let spec = BiasSpec::shifted(16, 3, 0.5, 0.1).unwrap();
    assert!(generate_dataset(&spec, DIMS, 16, 0, 10, 0).is_err());
}
