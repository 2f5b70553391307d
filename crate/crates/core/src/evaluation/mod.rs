//! Accuracy, score ablations, routing statistics and sweeps.

mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use report::{
    answer_distribution_svg, eval_reports_csv, routing_heatmap_svg, sweep_csv, variant_csv_row,
};

use crate::copnet::{finalize, predict_rows, CopModel, Routing};
use crate::error::{Error, Result};
use crate::numerics::{add, log_sigmoid, sub, RngState, Tensor};
use crate::synthdata::{answer_prior, Dataset, DatasetMeta, Sample};
use crate::training::{train, Arch, Batch, Network, TrainConfig};

const EVAL_BATCH: usize = 512;

/// Which score is arg-maxed at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    ZFinal,
    Z11Only,
    Z10Only,
    ZuOnly,
    ExclZ11,
    ExclZ10,
    ExclZu,
    RandRoute,
    BrokenX,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 9] = [
        ScoreVariant::ZFinal,
        ScoreVariant::Z11Only,
        ScoreVariant::Z10Only,
        ScoreVariant::ZuOnly,
        ScoreVariant::ExclZ11,
        ScoreVariant::ExclZ10,
        ScoreVariant::ExclZu,
        ScoreVariant::RandRoute,
        ScoreVariant::BrokenX,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreVariant::ZFinal => "z_final",
            ScoreVariant::Z11Only => "z11_only",
            ScoreVariant::Z10Only => "z10_only",
            ScoreVariant::ZuOnly => "zu_only",
            ScoreVariant::ExclZ11 => "excl_z11",
            ScoreVariant::ExclZ10 => "excl_z10",
            ScoreVariant::ExclZu => "excl_zu",
            ScoreVariant::RandRoute => "rand_route",
            ScoreVariant::BrokenX => "broken_x",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Self::name).join(", ")
    }
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; valid names: {}",
                    Self::valid_names()
                ))
            })
    }
}

/// Scores of a completed trace under `variant`.
///
/// `RandRoute` and `BrokenX` change how the trace is produced, not how it is
/// scored, so both score as `ZFinal`.
pub fn score(trace: &crate::copnet::ForwardTrace, variant: ScoreVariant) -> Result<Tensor> {
    let (z11, z10, z01, z00) = (&trace.z11, &trace.z10, &trace.z01, &trace.z00);
    let debias = |kept: &Tensor, rest: &Tensor| -> Result<Tensor> {
        sub(&log_sigmoid(&add(kept, rest)?), &log_sigmoid(rest))
    };
    match variant {
        ScoreVariant::ZFinal | ScoreVariant::RandRoute | ScoreVariant::BrokenX => {
            finalize(z11, z10, z01, z00)
        }
        ScoreVariant::Z11Only => Ok(z11.clone()),
        ScoreVariant::Z10Only => Ok(z10.clone()),
        ScoreVariant::ZuOnly => add(z01, z00),
        ScoreVariant::ExclZ11 => Ok(log_sigmoid(&add(&add(z10, z01)?, z00)?)),
        ScoreVariant::ExclZ10 => debias(z11, &add(z01, z00)?),
        ScoreVariant::ExclZu => debias(z11, z10),
    }
}

impl Network {
    /// `(d_q, d_v, vocab)` read off the parameter shapes.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            Network::Cop(m) => (m.config.d_q, m.config.d_v, m.config.vocab),
            Network::Monolithic(m) => {
                let d_q = m.interp.w1.shape()[0];
                let d_v = m.fusion.wv.shape()[0];
                (d_q, d_v, m.answer.b2.len())
            }
        }
    }

    fn check_meta(&self, meta: &DatasetMeta) -> Result<()> {
        let (d_q, d_v, vocab) = self.dims();
        if (d_q, d_v, vocab) != (meta.dims.d_q, meta.dims.d_v, meta.vocab) {
            return Err(Error::Validation(format!(
                "model dims ({d_q}, {d_v}, {vocab}) differ from dataset ({}, {}, {})",
                meta.dims.d_q, meta.dims.d_v, meta.vocab
            )));
        }
        Ok(())
    }
}

/// Predicted answers for `samples` under `variant`; `seed` drives random routing.
pub fn predict_samples(
    network: &Network,
    samples: &[Sample],
    variant: ScoreVariant,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = RngState::new(seed).split("random-routing");
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = Batch::gather(chunk)?;
        let preds = match network {
            Network::Monolithic(m) => {
                if variant != ScoreVariant::ZFinal {
                    return Err(Error::Config(format!(
                        "variant {variant} needs a routed model"
                    )));
                }
                predict_rows(&m.forward(&batch.q, &batch.v)?)
            }
            Network::Cop(m) => {
                if variant == ScoreVariant::BrokenX && m.w1_x.is_none() {
                    return Err(Error::Config(
                        "broken_x needs a model trained with broken_causal".into(),
                    ));
                }
                let mut routing = if variant == ScoreVariant::RandRoute {
                    Routing::Random(&mut rng)
                } else {
                    Routing::Inference
                };
                let trace = m.forward(&batch.q, &batch.v, &mut routing)?;
                predict_rows(&score(&trace, variant)?)
            }
        };
        out.extend(preds);
    }
    Ok(out)
}

/// Accuracy summary of one variant on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: ScoreVariant,
    pub overall: f64,
    pub per_type: Vec<f64>,
    pub counts_per_type: Vec<usize>,
    /// Predicted answer distribution per type, over the vocabulary.
    pub predicted_distribution: Vec<Vec<f64>>,
    pub config_fingerprint: String,
}

fn fingerprint(network: &Network) -> String {
    match network {
        Network::Cop(m) => m.config.fingerprint(),
        Network::Monolithic(_) => "monolithic".into(),
    }
}

fn report_from_predictions(
    network: &Network,
    samples: &[Sample],
    meta: &DatasetMeta,
    variant: ScoreVariant,
    preds: &[usize],
) -> EvalReport {
    let types = meta.bias.num_types;
    let mut correct = vec![0usize; types];
    let mut counts = vec![0usize; types];
    let mut dist = vec![vec![0.0; meta.vocab]; types];
    for (s, &p) in samples.iter().zip(preds) {
        counts[s.q_type] += 1;
        correct[s.q_type] += usize::from(p == s.answer);
        dist[s.q_type][p] += 1.0;
    }
    for (row, &n) in dist.iter_mut().zip(&counts) {
        if n > 0 {
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let total: usize = counts.iter().sum();
    EvalReport {
        variant,
        overall: correct.iter().sum::<usize>() as f64 / total.max(1) as f64,
        per_type: correct
            .iter()
            .zip(&counts)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect(),
        counts_per_type: counts,
        predicted_distribution: dist,
        config_fingerprint: fingerprint(network),
    }
}

/// Accuracy under `variant` with deterministic routing (random routing uses seed 0).
pub fn accuracy(
    network: &Network,
    samples: &[Sample],
    meta: &DatasetMeta,
    variant: ScoreVariant,
) -> Result<EvalReport> {
    evaluate(network, samples, meta, variant, 0)
}

pub fn evaluate(
    network: &Network,
    samples: &[Sample],
    meta: &DatasetMeta,
    variant: ScoreVariant,
    seed: u64,
) -> Result<EvalReport> {
    network.check_meta(meta)?;
    let preds = predict_samples(network, samples, variant, seed)?;
    Ok(report_from_predictions(network, samples, meta, variant, &preds))
}

/// Every gate replaced by a uniformly random expert.
pub fn random_routing_eval(
    network: &Network,
    samples: &[Sample],
    meta: &DatasetMeta,
    seed: u64,
) -> Result<EvalReport> {
    evaluate(network, samples, meta, ScoreVariant::RandRoute, seed)
}

/// Per-type proportions of (cop1 expert, cop2-on-`i_mul` expert) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub n1: usize,
    pub n2: usize,
    /// `per_type[t][i][j]`: share of type-`t` samples routed to pair `(i, j)`.
    pub per_type: Vec<Vec<Vec<f64>>>,
    pub counts: Vec<usize>,
}

impl RoutingStats {
    /// Largest pair share for type `t`.
    pub fn modal_mass(&self, t: usize) -> f64 {
        self.per_type[t]
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }
}

pub fn routing_stats(model: &CopModel, samples: &[Sample], meta: &DatasetMeta) -> Result<RoutingStats> {
    Network::Cop(model.clone()).check_meta(meta)?;
    let (n1, n2) = (model.config.n1, model.config.n2);
    let types = meta.bias.num_types;
    let mut counts = vec![0usize; types];
    let mut mass = vec![vec![vec![0.0; n2]; n1]; types];
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = Batch::gather(chunk)?;
        let trace = model.forward(&batch.q, &batch.v, &mut Routing::Inference)?;
        for ((s, i), j) in chunk
            .iter()
            .zip(trace.sel1.primary())
            .zip(trace.sel2_mul.primary())
        {
            counts[s.q_type] += 1;
            mass[s.q_type][i][j] += 1.0;
        }
    }
    for (m, &n) in mass.iter_mut().zip(&counts) {
        if n > 0 {
            m.iter_mut().flatten().for_each(|v| *v /= n as f64);
        }
    }
    Ok(RoutingStats {
        n1,
        n2,
        per_type: mass,
        counts,
    })
}

/// Train-split, test-split and predicted answer distributions for one type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub q_type: usize,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Builds the three distributions from test-split predictions.
pub fn answer_distribution_from_predictions(
    data: &Dataset,
    predictions: &[usize],
    q_type: usize,
) -> Result<AnswerDistribution> {
    let vocab = data.meta.vocab;
    let train = answer_prior(&data.train, q_type, vocab)?;
    let test = answer_prior(&data.test, q_type, vocab)?;
    let predicted_samples: Vec<Sample> = data
        .test
        .iter()
        .zip(predictions)
        .filter(|(s, _)| s.q_type == q_type)
        .map(|(s, &p)| Sample {
            answer: p,
            q_feat: Vec::new(),
            v_feat: Vec::new(),
            ..s.clone()
        })
        .collect();
    let predicted = answer_prior(&predicted_samples, q_type, vocab)?;
    Ok(AnswerDistribution {
        q_type,
        train,
        test,
        predicted,
    })
}

pub fn answer_distribution(network: &Network, data: &Dataset, q_type: usize) -> Result<AnswerDistribution> {
    network.check_meta(&data.meta)?;
    let preds = predict_samples(network, &data.test, ScoreVariant::ZFinal, 0)?;
    answer_distribution_from_predictions(data, &preds, q_type)
}

/// `(mean, standard error)`; the error is zero for a single value.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One configuration of a sweep with its per-seed accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n1: usize,
    pub n2: usize,
    pub k: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

fn run_cell(base: &TrainConfig, model: crate::copnet::CopConfig, seeds: &[u64], data: &Dataset) -> Result<SweepRow> {
    let mut accuracies = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            arch: Arch::Cop,
            model: model.clone(),
            ..base.clone()
        };
        let outcome = train(cfg, data)?;
        let report = accuracy(&outcome.trainer.network, &data.test, &data.meta, ScoreVariant::ZFinal)?;
        accuracies.push(report.overall);
    }
    let (mean, stderr) = mean_stderr(&accuracies);
    Ok(SweepRow {
        n1: model.n1,
        n2: model.n2,
        k: model.k_select,
        hidden1: model.hidden1,
        hidden2: model.hidden2,
        seeds: seeds.to_vec(),
        accuracies,
        mean,
        stderr,
    })
}

/// Default `(N1, N2)` grid.
pub const DEFAULT_PAIRS: [(usize, usize); 6] = [(1, 1), (2, 2), (3, 3), (3, 5), (5, 5), (10, 10)];

/// Trains every `(n1, n2)` pair for every seed, refitting hidden sizes so each
/// pair uses the same parameter budget.
pub fn expert_grid_sweep(
    base: &TrainConfig,
    pairs: &[(usize, usize)],
    seeds: &[u64],
    data: &Dataset,
) -> Result<Vec<SweepRow>> {
    let models = pairs
        .iter()
        .map(|&(n1, n2)| {
            let mut m = base.model.clone();
            m.n1 = n1;
            m.n2 = n2;
            m.k_select = m.k_select.min(n1.min(n2)).max(1);
            m.fit_hidden()?;
            m.validate()?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    models.into_iter().map(|m| run_cell(base, m, seeds, data)).collect()
}

/// Trains with `k` experts active per gate, in training and inference.
pub fn khot_sweep(base: &TrainConfig, ks: &[usize], seeds: &[u64], data: &Dataset) -> Result<Vec<SweepRow>> {
    let limit = base.model.n1.min(base.model.n2);
    let models = ks
        .iter()
        .map(|&k| {
            if k == 0 || k > limit {
                return Err(Error::Config(format!("k = {k} must lie in 1..={limit}")));
            }
            Ok(crate::copnet::CopConfig {
                k_select: k,
                ..base.model.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    models.into_iter().map(|m| run_cell(base, m, seeds, data)).collect()
}

/// Evaluates every variant. `broken` is the separately trained broken-causal
/// model; without it the `BrokenX` row is skipped.
pub fn ablation_reports(
    network: &Network,
    broken: Option<&Network>,
    samples: &[Sample],
    meta: &DatasetMeta,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::with_capacity(ScoreVariant::ALL.len());
    for variant in ScoreVariant::ALL {
        let report = match (variant, broken) {
            (ScoreVariant::BrokenX, Some(b)) => evaluate(b, samples, meta, variant, seed)?,
            (ScoreVariant::BrokenX, None) => continue,
            _ => evaluate(network, samples, meta, variant, seed)?,
        };
        out.push(report);
    }
    Ok(out)
}
