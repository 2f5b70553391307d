//! Synthetic multimodal QA with a per-type answer-prior shift between splits.
//!
//! Each sample has a question type `t` and two latent concepts, `c_q` carried by
//! the question features and `c_v` carried by the image features. The answer is
//! `answers_per_type[t][(c_q + c_v) mod K_t]`, so neither modality alone
//! determines it. Answers are drawn from a split-specific prior and latents
//! are then drawn uniformly from the answer's preimage, which lets the train
//! and test priors differ while the rule stays fixed.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Answer partition and the two per-type priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub num_types: usize,
    pub answers_per_type: Vec<Vec<usize>>,
    pub train_prior: Vec<Vec<f64>>,
    pub test_prior: Vec<Vec<f64>>,
    pub bias_strength: f64,
    pub noise_sigma: f64,
}

pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

/// Per-type answer counts: a two-answer type first, the rest split evenly.
pub fn default_partition(vocab: usize, types: usize) -> Result<Vec<Vec<usize>>> {
    if types == 0 {
        return Err(Error::Config("need at least one question type".into()));
    }
    let sizes: Vec<usize> = if types == 1 {
        vec![vocab]
    } else {
        let rest = vocab.saturating_sub(2);
        let (base, extra) = (rest / (types - 1), rest % (types - 1));
        std::iter::once(2)
            .chain((0..types - 1).map(|i| base + usize::from(i >= types - 1 - extra)))
            .collect()
    };
    if sizes.iter().any(|&s| s < 2) {
        return Err(Error::Config(format!(
            "vocabulary of {vocab} cannot give {types} types at least two answers each"
        )));
    }
    let mut next = 0;
    Ok(sizes
        .into_iter()
        .map(|s| {
            let ids = (next..next + s).collect();
            next += s;
            ids
        })
        .collect())
}

/// `(1 − β)·uniform + β·onehot(major)` over `k` answers.
pub fn skewed_prior(k: usize, major: usize, beta: f64) -> Vec<f64> {
    let base = (1.0 - beta) / k as f64;
    (0..k)
        .map(|i| if i == major { base + beta } else { base })
        .collect()
}

impl BiasSpec {
    /// Train prior favours each type's first answer, test prior the middle one.
    pub fn shifted(vocab: usize, types: usize, beta: f64, noise_sigma: f64) -> Result<Self> {
        let answers_per_type = default_partition(vocab, types)?;
        let train_prior = answers_per_type
            .iter()
            .map(|a| skewed_prior(a.len(), 0, beta))
            .collect();
        let test_prior = answers_per_type
            .iter()
            .map(|a| skewed_prior(a.len(), a.len() / 2, beta))
            .collect();
        let spec = Self {
            num_types: types,
            answers_per_type,
            train_prior,
            test_prior,
            bias_strength: beta,
            noise_sigma,
        };
        spec.validate(vocab)?;
        Ok(spec)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::Config(format!(
                "bias strength {} outside [0, 1]",
                self.bias_strength
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if self.answers_per_type.len() != self.num_types
            || self.train_prior.len() != self.num_types
            || self.test_prior.len() != self.num_types
        {
            return Err(Error::Config("per-type tables must have num_types entries".into()));
        }
        let mut seen = vec![false; vocab];
        for (t, answers) in self.answers_per_type.iter().enumerate() {
            if answers.is_empty() {
                return Err(Error::Config(format!("type {t} has no answers")));
            }
            for &a in answers {
                if a >= vocab || std::mem::replace(&mut seen[a], true) {
                    return Err(Error::Config(format!(
                        "answer {a} of type {t} is out of range or shared"
                    )));
                }
            }
            for (name, prior) in [("train", &self.train_prior[t]), ("test", &self.test_prior[t])] {
                let total: f64 = prior.iter().sum();
                if prior.len() != answers.len()
                    || prior.iter().any(|p| p.is_nan() || *p < 0.0)
                    || (total - 1.0).abs() > 1e-9
                {
                    return Err(Error::Config(format!("{name} prior of type {t} is not a distribution")));
                }
            }
        }
        Ok(())
    }

    pub fn max_answers(&self) -> usize {
        self.answers_per_type.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// `answers_per_type[t][(c_q + c_v) mod K_t]`.
    pub fn rule(&self, t: usize, c_q: usize, c_v: usize) -> usize {
        let answers = &self.answers_per_type[t];
        answers[(c_q + c_v) % answers.len()]
    }

    /// All latent pairs that produce answer `a` for type `t`.
    pub fn preimage(&self, t: usize, a: usize) -> Result<Vec<(usize, usize)>> {
        let answers = self
            .answers_per_type
            .get(t)
            .ok_or_else(|| Error::Generation(format!("unknown question type {t}")))?;
        let k = answers.len();
        let Some(pos) = answers.iter().position(|&x| x == a) else {
            return Err(Error::Generation(format!(
                "no latent concepts produce answer {a} for type {t}"
            )));
        };
        Ok((0..k).map(|c_q| (c_q, (pos + k - c_q) % k)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub d_q: usize,
    pub d_v: usize,
}

/// One question/image/answer record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(rename = "t")]
    pub q_type: usize,
    #[serde(rename = "cq")]
    pub c_q: usize,
    #[serde(rename = "cv")]
    pub c_v: usize,
    #[serde(rename = "a")]
    pub answer: usize,
    #[serde(rename = "q")]
    pub q_feat: Vec<f64>,
    #[serde(rename = "v")]
    pub v_feat: Vec<f64>,
}

/// Everything needed to regenerate or validate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub dims: DataDims,
    pub vocab: usize,
    pub bias: BiasSpec,
    /// `num_types × d_q`, row-major.
    pub type_embedding: Vec<f64>,
    /// `max_answers × d_q`, row-major.
    pub concept_q_embedding: Vec<f64>,
    /// `max_answers × d_v`, row-major.
    pub concept_v_embedding: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub meta: DatasetMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

fn gaussian_table(rng: &mut RngState, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.normal()).collect()
}

fn draw_split(
    meta: &DatasetMeta,
    split: Split,
    n: usize,
    rng: &mut RngState,
) -> Result<Vec<Sample>> {
    let bias = &meta.bias;
    let DataDims { d_q, d_v } = meta.dims;
    let priors = match split {
        Split::Train => &bias.train_prior,
        Split::Test => &bias.test_prior,
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.below(bias.num_types);
        let answer = bias.answers_per_type[t][rng.categorical(&priors[t])];
        let pre = bias.preimage(t, answer)?;
        let (c_q, c_v) = pre[rng.below(pre.len())];
        let type_row = &meta.type_embedding[t * d_q..(t + 1) * d_q];
        let cq_row = &meta.concept_q_embedding[c_q * d_q..(c_q + 1) * d_q];
        let cv_row = &meta.concept_v_embedding[c_v * d_v..(c_v + 1) * d_v];
        let q_feat = type_row
            .iter()
            .zip(cq_row)
            .map(|(a, b)| a + b + bias.noise_sigma * rng.normal())
            .collect();
        let v_feat = cv_row
            .iter()
            .map(|a| a + bias.noise_sigma * rng.normal())
            .collect();
        out.push(Sample {
            q_type: t,
            c_q,
            c_v,
            answer,
            q_feat,
            v_feat,
        });
    }
    Ok(out)
}

/// Draws both splits. Fully determined by the arguments.
pub fn generate_dataset(
    spec: &BiasSpec,
    dims: DataDims,
    vocab: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    if dims.d_q == 0 || dims.d_v == 0 {
        return Err(Error::Config("feature dimensions must be positive".into()));
    }
    spec.validate(vocab)?;
    let root = RngState::new(seed);
    let mut emb = root.split("embeddings");
    let k = spec.max_answers();
    let meta = DatasetMeta {
        seed,
        dims,
        vocab,
        bias: spec.clone(),
        type_embedding: gaussian_table(&mut emb, spec.num_types, dims.d_q),
        concept_q_embedding: gaussian_table(&mut emb, k, dims.d_q),
        concept_v_embedding: gaussian_table(&mut emb, k, dims.d_v),
        n_train,
        n_test,
    };
    let train = draw_split(&meta, Split::Train, n_train, &mut root.split("train"))?;
    let test = draw_split(&meta, Split::Test, n_test, &mut root.split("test"))?;
    Ok(Dataset { train, test, meta })
}

/// Empirical answer distribution over the whole vocabulary for one type.
pub fn answer_prior(samples: &[Sample], q_type: usize, vocab: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; vocab];
    let mut n = 0usize;
    for s in samples.iter().filter(|s| s.q_type == q_type) {
        if s.answer >= vocab {
            return Err(Error::Index {
                index: s.answer,
                len: vocab,
            });
        }
        counts[s.answer] += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract(format!("no samples of question type {q_type}")));
    }
    Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// Half the L1 distance between two distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// The requested prior of `split` for type `t`, spread over the vocabulary.
pub fn requested_prior(spec: &BiasSpec, split: Split, t: usize, vocab: usize) -> Vec<f64> {
    let prior = match split {
        Split::Train => &spec.train_prior[t],
        Split::Test => &spec.test_prior[t],
    };
    let mut out = vec![0.0; vocab];
    for (&a, &p) in spec.answers_per_type[t].iter().zip(prior) {
        out[a] = p;
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One JSON object per line.
pub fn save_split(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut buf = BufWriter::new(Vec::new());
    for s in samples {
        serde_json::to_writer(&mut buf, s)?;
        buf.write_all(b"\n")?;
    }
    let bytes = buf.into_inner().map_err(|e| e.into_error())?;
    write_atomic(path, &bytes)
}

pub fn save_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(meta)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_meta(path: &Path) -> Result<DatasetMeta> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(path)?)?;
    meta.bias.validate(meta.vocab)?;
    let k = meta.bias.max_answers();
    if meta.type_embedding.len() != meta.bias.num_types * meta.dims.d_q
        || meta.concept_q_embedding.len() != k * meta.dims.d_q
        || meta.concept_v_embedding.len() != k * meta.dims.d_v
    {
        return Err(Error::Validation("embedding tables do not match dims".into()));
    }
    Ok(meta)
}

fn validate_sample(s: &Sample, meta: &DatasetMeta, line: usize) -> Result<()> {
    let bias = &meta.bias;
    let fail = |msg: String| Err(Error::Validation(format!("line {line}: {msg}")));
    if s.q_feat.len() != meta.dims.d_q || s.v_feat.len() != meta.dims.d_v {
        return fail(format!(
            "feature lengths ({}, {}) differ from meta ({}, {})",
            s.q_feat.len(),
            s.v_feat.len(),
            meta.dims.d_q,
            meta.dims.d_v
        ));
    }
    if s.q_type >= bias.num_types {
        return fail(format!("question type {} out of range", s.q_type));
    }
    let k = bias.answers_per_type[s.q_type].len();
    if s.c_q >= k || s.c_v >= k {
        return fail("latent concept out of range".into());
    }
    if s.answer != bias.rule(s.q_type, s.c_q, s.c_v) {
        return fail(format!("answer {} disagrees with the latent rule", s.answer));
    }
    Ok(())
}

/// Reads a JSONL split, checking every record against `meta`.
pub fn load_split(path: &Path, meta: &DatasetMeta) -> Result<Vec<Sample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        validate_sample(&sample, meta, line_no)?;
        out.push(sample);
    }
    Ok(out)
}

/// Writes `meta.json`, `train.jsonl` and `test.jsonl` into `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_split(&dir.join(Split::Train.file_name()), &data.train)?;
    save_split(&dir.join(Split::Test.file_name()), &data.test)?;
    save_meta(&dir.join("meta.json"), &data.meta)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = load_meta(&dir.join("meta.json"))?;
    let train = load_split(&dir.join(Split::Train.file_name()), &meta)?;
    let test = load_split(&dir.join(Split::Test.file_name()), &meta)?;
    if train.len() != meta.n_train || test.len() != meta.n_test {
        return Err(Error::Validation(format!(
            "split sizes ({}, {}) differ from meta ({}, {})",
            train.len(),
            test.len(),
            meta.n_train,
            meta.n_test
        )));
    }
    Ok(Dataset { train, test, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<Sample> {
        let answers = [0, 1, 1, 3, 3, 3, 0, 1, 3, 3];
        answers
            .iter()
            .map(|&a| Sample {
                q_type: 0,
                c_q: 0,
                c_v: 0,
                answer: a,
                q_feat: vec![],
                v_feat: vec![],
            })
            .collect()
    }

    #[test]
    fn partition_defaults() {
        let p = default_partition(16, 3).unwrap();
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 7, 7]);
        assert_eq!(p.concat(), (0..16).collect::<Vec<_>>());
        assert_eq!(default_partition(17, 3).unwrap()[2].len(), 8);
        assert!(default_partition(3, 3).is_err());
    }

    #[test]
    fn zero_beta_is_uniform() {
        let spec = BiasSpec::shifted(16, 3, 0.0, 0.1).unwrap();
        for t in 0..3 {
            assert_eq!(spec.train_prior[t], spec.test_prior[t]);
            let k = spec.answers_per_type[t].len() as f64;
            spec.train_prior[t].iter().for_each(|&p| assert_eq!(p, 1.0 / k));
        }
    }

    #[test]
    fn rule_and_preimage_agree() {
        let spec = BiasSpec::shifted(16, 3, 0.5, 0.1).unwrap();
        for t in 0..3 {
            for &a in &spec.answers_per_type[t] {
                let pre = spec.preimage(t, a).unwrap();
                assert_eq!(pre.len(), spec.answers_per_type[t].len());
                assert!(pre.iter().all(|&(cq, cv)| spec.rule(t, cq, cv) == a));
            }
        }
        match spec.preimage(0, 9) {
            Err(Error::Generation(msg)) => assert!(msg.contains("answer 9") && msg.contains("type 0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn answer_prior_hand_count() {
        let prior = answer_prior(&fixture(), 0, 5).unwrap();
        assert_eq!(prior, vec![0.2, 0.3, 0.0, 0.5, 0.0]);
        let single = answer_prior(&fixture()[3..4], 0, 5).unwrap();
        assert_eq!(single, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(answer_prior(&fixture(), 1, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = BiasSpec::shifted(16, 3, 0.9, 0.1).unwrap();
        spec.bias_strength = 1.5;
        assert!(spec.validate(16).is_err());
        let mut spec = BiasSpec::shifted(16, 3, 0.9, 0.1).unwrap();
        spec.train_prior[1][0] += 0.1;
        assert!(spec.validate(16).is_err());
        let mut spec = BiasSpec::shifted(16, 3, 0.9, 0.1).unwrap();
        spec.answers_per_type[1][0] = 0;
        assert!(spec.validate(16).is_err());
    }
}
