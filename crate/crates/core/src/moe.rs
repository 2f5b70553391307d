//! Mixture-of-experts pools with hard Gumbel-max routing.
//!
//! Each pool holds `N` two-layer perceptrons and an affine gate. The gate's
//! logits are perturbed with Gumbel noise during training and the arg-max
//! expert is taken as a hard one-hot choice; gradients reach the gate through
//! the tempered softmax of the same perturbed logits (straight-through). At
//! inference the choice is the noise-free arg-max.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    add, affine, relu, sample_gumbel, scale, softmax, softmax_values, straight_through,
    weighted_sum, RngState, Tensor,
};

/// Shape of a two-layer perceptron `d_in → hidden → d_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
}

impl LayerDims {
    pub fn new(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self { d_in, hidden, d_out }
    }

    /// Weights and biases of both layers.
    pub fn params(&self) -> usize {
        self.d_in * self.hidden + self.hidden + self.hidden * self.d_out + self.d_out
    }
}

fn uniform_weights(rng: &mut RngState, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Tensor::param(data, &[fan_in, fan_out])
}

/// `x ↦ relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct Expert {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Expert {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let expert = Self { w1, b1, w2, b2 };
        let dims = expert.dims();
        if expert.b1.shape() != [dims.hidden]
            || expert.w2.shape() != [dims.hidden, dims.d_out]
            || expert.b2.shape() != [dims.d_out]
        {
            return Err(Error::shape("expert", expert.w1.shape(), expert.w2.shape()));
        }
        Ok(expert)
    }

    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init(dims: LayerDims, rng: &mut RngState) -> Result<Self> {
        Self::new(
            uniform_weights(rng, dims.d_in, dims.hidden)?,
            Tensor::param(vec![0.0; dims.hidden], &[dims.hidden])?,
            uniform_weights(rng, dims.hidden, dims.d_out)?,
            Tensor::param(vec![0.0; dims.d_out], &[dims.d_out])?,
        )
    }

    pub fn dims(&self) -> LayerDims {
        let s1 = self.w1.shape();
        LayerDims::new(s1[0], s1[1], self.b2.len())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = relu(&affine(x, &self.w1, &self.b1)?);
        affine(&h, &self.w2, &self.b2)
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Affine gate `ℝ^{d_in} → ℝ^N`.
#[derive(Clone, Debug)]
pub struct GateNetwork {
    pub w: Tensor,
    pub b: Tensor,
}

impl GateNetwork {
    pub fn init(d_in: usize, n: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            w: uniform_weights(rng, d_in, n)?,
            b: Tensor::param(vec![0.0; n], &[n])?,
        })
    }

    pub fn size(&self) -> usize {
        self.b.len()
    }
}

#[derive(Clone, Debug)]
pub struct MoePool {
    pub experts: Vec<Expert>,
    pub gate: GateNetwork,
}

impl MoePool {
    pub fn new(experts: Vec<Expert>, gate: GateNetwork) -> Result<Self> {
        let Some(first) = experts.first() else {
            return Err(Error::Config("a pool needs at least one expert".into()));
        };
        let dims = first.dims();
        if experts.iter().any(|e| e.dims() != dims) {
            return Err(Error::Config("experts in a pool must share dimensions".into()));
        }
        if gate.w.shape() != [dims.d_in, experts.len()] || gate.b.shape() != [experts.len()] {
            return Err(Error::shape("gate", gate.w.shape(), &[dims.d_in, experts.len()]));
        }
        Ok(Self { experts, gate })
    }

    pub fn init(n: usize, dims: LayerDims, rng: &mut RngState) -> Result<Self> {
        let experts = (0..n)
            .map(|_| Expert::init(dims, rng))
            .collect::<Result<Vec<_>>>()?;
        let gate = GateNetwork::init(dims.d_in, n, rng)?;
        Self::new(experts, gate)
    }

    pub fn size(&self) -> usize {
        self.experts.len()
    }

    pub fn dims(&self) -> LayerDims {
        self.experts[0].dims()
    }

    pub fn gate_logits(&self, x: &Tensor) -> Result<Tensor> {
        affine(x, &self.gate.w, &self.gate.b)
    }

    /// `Σ_n g_n · E_n(x)`.
    ///
    /// When the weights carry gradients every expert is evaluated so the gate
    /// sees each expert's output; otherwise only selected experts run.
    pub fn forward(&self, x: &Tensor, sel: &GateSelection) -> Result<Tensor> {
        let n = self.size();
        if sel.weights.cols() != n || sel.weights.rows() != x.rows() {
            return Err(Error::shape("moe_forward", sel.weights.shape(), &[x.rows(), n]));
        }
        let evaluate_all = sel.weights.requires_grad();
        let outputs = (0..n)
            .map(|i| {
                if evaluate_all || sel.chosen.iter().any(|c| c.contains(&i)) {
                    self.experts[i].forward(x).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        weighted_sum(&sel.weights, &outputs)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.experts.iter().flat_map(Expert::params).collect();
        out.push(&self.gate.w);
        out.push(&self.gate.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .experts
            .iter_mut()
            .flat_map(Expert::params_mut)
            .collect();
        out.push(&mut self.gate.w);
        out.push(&mut self.gate.b);
        out
    }

    /// Parameter names in the order of [`MoePool::params`].
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.size() {
            for part in ["w1", "b1", "w2", "b2"] {
                names.push(format!("{prefix}.expert{i}.{part}"));
            }
        }
        names.push(format!("{prefix}.gate.w"));
        names.push(format!("{prefix}.gate.b"));
        names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Inference,
}

/// Mixture weights for a batch of gate decisions.
#[derive(Clone, Debug)]
pub struct GateSelection {
    /// `[rows × N]` (or `[N]` for a single input); each row sums to one.
    pub weights: Tensor,
    /// Selected expert indices per row, strongest first.
    pub chosen: Vec<Vec<usize>>,
    pub phase: Phase,
}

impl GateSelection {
    /// First (strongest) choice of each row.
    pub fn primary(&self) -> Vec<usize> {
        self.chosen.iter().map(|c| c[0]).collect()
    }
}

/// Indices of the `k` largest entries, largest first, ties to the lower index.
fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// How a gate turns logits into a selection.
#[derive(Clone, Copy, Debug)]
pub enum SelectKind<'a> {
    /// Noise-free arg-max; constant weights.
    Inference,
    /// Hard top-k of `logits + noise`, straight-through gradient.
    Training { noise: &'a [f64] },
    /// Tempered softmax of `logits + noise` used directly as the weights.
    Relaxed { noise: &'a [f64] },
}

/// Top-`k` selection with precomputed noise. The selected weights are the
/// tempered softmax restricted to the chosen indices (exactly 1.0 when `k = 1`).
pub fn select_top_k(
    logits: &Tensor,
    k: usize,
    temperature: f64,
    kind: SelectKind<'_>,
) -> Result<GateSelection> {
    let n = logits.cols();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("k = {k} outside 1..={n}")));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Contract(format!("temperature {temperature} must be positive")));
    }
    let noise = match kind {
        SelectKind::Inference => None,
        SelectKind::Training { noise } | SelectKind::Relaxed { noise } => {
            if noise.len() != logits.len() {
                return Err(Error::shape("gate_noise", logits.shape(), &[noise.len()]));
            }
            Some(noise)
        }
    };
    let perturbed: Vec<f64> = match noise {
        Some(g) => logits.values().iter().zip(g).map(|(l, g)| l + g).collect(),
        None => logits.values().to_vec(),
    };
    let mut hard = vec![0.0; perturbed.len()];
    let mut chosen = Vec::with_capacity(logits.rows());
    for (row, out) in perturbed.chunks(n).zip(hard.chunks_mut(n)) {
        let picked = top_k(row, k);
        let sel: Vec<f64> = picked.iter().map(|&i| row[i] / temperature).collect();
        for (&i, w) in picked.iter().zip(softmax_values(&sel)) {
            out[i] = w;
        }
        chosen.push(picked);
    }
    let (weights, phase) = match (kind, noise) {
        (SelectKind::Inference, _) | (_, None) => {
            (Tensor::new(hard, logits.shape())?, Phase::Inference)
        }
        (SelectKind::Training { .. }, Some(g)) => {
            let soft = tempered_softmax(logits, g, temperature)?;
            (straight_through(hard, &soft)?, Phase::Training)
        }
        (SelectKind::Relaxed { .. }, Some(g)) => {
            (tempered_softmax(logits, g, temperature)?, Phase::Training)
        }
    };
    Ok(GateSelection {
        weights,
        chosen,
        phase,
    })
}

fn tempered_softmax(logits: &Tensor, noise: &[f64], temperature: f64) -> Result<Tensor> {
    let g = Tensor::new(noise.to_vec(), logits.shape())?;
    softmax(&scale(&add(logits, &g)?, 1.0 / temperature))
}

/// Gumbel-max one-hot selection.
pub fn select_one_hot(
    logits: &Tensor,
    rng: &mut RngState,
    temperature: f64,
    phase: Phase,
) -> Result<GateSelection> {
    select_k_hot(logits, 1, rng, temperature, phase)
}

/// Top-`k` selection; noise is drawn from `rng` only in the training phase.
pub fn select_k_hot(
    logits: &Tensor,
    k: usize,
    rng: &mut RngState,
    temperature: f64,
    phase: Phase,
) -> Result<GateSelection> {
    match phase {
        Phase::Inference => select_top_k(logits, k, temperature, SelectKind::Inference),
        Phase::Training => {
            let noise = sample_gumbel(rng, logits.shape());
            select_top_k(
                logits,
                k,
                temperature,
                SelectKind::Training {
                    noise: noise.values(),
                },
            )
        }
    }
}

/// Uniformly random one-hot rows, ignoring the gate.
pub fn select_uniform(rows: usize, n: usize, rng: &mut RngState) -> Result<GateSelection> {
    let mut weights = vec![0.0; rows * n];
    let mut chosen = Vec::with_capacity(rows);
    for r in 0..rows {
        let i = rng.below(n);
        weights[r * n + i] = 1.0;
        chosen.push(vec![i]);
    }
    Ok(GateSelection {
        weights: Tensor::new(weights, &[rows, n])?,
        chosen,
        phase: Phase::Inference,
    })
}

/// Outcome of [`budget_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub reference_params: usize,
    pub total_params: usize,
    pub pass: bool,
}

/// Compares the summed parameters of `networks` (each `(count, dims)`) with
/// the reference layer's parameter count.
pub fn budget_check(reference: LayerDims, networks: &[(usize, LayerDims)]) -> BudgetReport {
    let reference_params = reference.params();
    let total_params = networks.iter().map(|(c, d)| c * d.params()).sum();
    BudgetReport {
        reference_params,
        total_params,
        pass: total_params <= reference_params,
    }
}

/// Largest hidden size such that `count` networks `d_in → h' → d_out` fit the
/// reference budget, or `None` if even `h' = 1` does not.
pub fn fit_hidden(reference: LayerDims, count: usize) -> Option<usize> {
    let per_hidden = count * (reference.d_in + 1 + reference.d_out);
    let fixed = count * reference.d_out;
    let budget = reference.params();
    if budget < fixed + per_hidden {
        return None;
    }
    Some((budget - fixed) / per_hidden)
}
