//! The two-stage cognitive-pathways model.
//!
//! Stage one interprets the question: a routed pool (`cop1`) feeds a fusion
//! with the image to give the multimodal interpretation `i_mul`, while the
//! monolithic network `w1_m` gives the question-only interpretation `i_q`.
//! Stage two answers from both interpretations with the routed pool (`cop2`)
//! and the monolithic network `w2_m`, producing four logit vectors:
//!
//! | logits | path                        |
//! |--------|-----------------------------|
//! | `z11`  | `cop2(i_mul)`: full flow    |
//! | `z10`  | `w2_m(i_mul)`: monolithic   |
//! | `z01`  | `cop2(i_q)`: unimodal       |
//! | `z00`  | `w2_m(i_q)`: unimodal       |
//!
//! Inference scores `log σ(z11 + z10 + z01 + z00) − log σ(z10 + z01 + z00)`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{
    budget_check, fit_hidden, select_k_hot, select_top_k, select_uniform, BudgetReport, Expert,
    GateSelection, LayerDims, MoePool, Phase, SelectKind,
};
use crate::numerics::{
    add, affine, argmax, cross_entropy, log_sigmoid, matmul, mul, sub, RngState, Tensor,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

/// Model hyperparameters. `ref_hidden*` give the hidden size of the
/// reference layer whose parameter count bounds each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CopConfig {
    pub d_q: usize,
    pub d_v: usize,
    pub d_i: usize,
    pub vocab: usize,
    pub n1: usize,
    pub n2: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub ref_hidden1: usize,
    pub ref_hidden2: usize,
    pub temperature: f64,
    pub loss_kind: LossKind,
    pub stop_gradient_branches: bool,
    pub k_select: usize,
    /// Replace `z01` by `cop2(fusion(w1_x(q), v))`.
    pub broken_causal: bool,
}

pub const DEFAULT_REF_HIDDEN: usize = 128;

impl Default for CopConfig {
    fn default() -> Self {
        Self::with_experts(3, 3).expect("default config fits its budget")
    }
}

impl CopConfig {
    /// Default dimensions with `(n1, n2)` experts and hidden sizes fitted to
    /// the reference budget.
    pub fn with_experts(n1: usize, n2: usize) -> Result<Self> {
        let mut cfg = Self {
            d_q: 32,
            d_v: 32,
            d_i: 64,
            vocab: 16,
            n1,
            n2,
            hidden1: 0,
            hidden2: 0,
            ref_hidden1: DEFAULT_REF_HIDDEN,
            ref_hidden2: DEFAULT_REF_HIDDEN,
            temperature: 1.0,
            loss_kind: LossKind::CrossEntropy,
            stop_gradient_branches: false,
            k_select: 1,
            broken_causal: false,
        };
        cfg.fit_hidden()?;
        Ok(cfg)
    }

    /// Set `hidden1`/`hidden2` to the largest sizes the budget allows.
    pub fn fit_hidden(&mut self) -> Result<()> {
        self.hidden1 = fit_hidden(self.reference1(), self.n1 + 1).ok_or_else(|| {
            Error::Config(format!("interpreting stage cannot fit {} experts", self.n1))
        })?;
        self.hidden2 = fit_hidden(self.reference2(), self.n2 + 1).ok_or_else(|| {
            Error::Config(format!("answering stage cannot fit {} experts", self.n2))
        })?;
        Ok(())
    }

    pub fn reference1(&self) -> LayerDims {
        LayerDims::new(self.d_q, self.ref_hidden1, self.d_i)
    }

    pub fn reference2(&self) -> LayerDims {
        LayerDims::new(self.d_i, self.ref_hidden2, self.vocab)
    }

    pub fn stage1(&self) -> LayerDims {
        LayerDims::new(self.d_q, self.hidden1, self.d_i)
    }

    pub fn stage2(&self) -> LayerDims {
        LayerDims::new(self.d_i, self.hidden2, self.vocab)
    }

    /// Budget of each stage: its experts plus its monolithic network.
    pub fn budgets(&self) -> (BudgetReport, BudgetReport) {
        (
            budget_check(self.reference1(), &[(self.n1, self.stage1()), (1, self.stage1())]),
            budget_check(self.reference2(), &[(self.n2, self.stage2()), (1, self.stage2())]),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_q", self.d_q),
            ("d_v", self.d_v),
            ("d_i", self.d_i),
            ("vocab", self.vocab),
            ("n1", self.n1),
            ("n2", self.n2),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("ref_hidden1", self.ref_hidden1),
            ("ref_hidden2", self.ref_hidden2),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.k_select == 0 || self.k_select > self.n1.min(self.n2) {
            return Err(Error::Config(format!(
                "k_select = {} must lie in 1..={}",
                self.k_select,
                self.n1.min(self.n2)
            )));
        }
        let (b1, b2) = self.budgets();
        for (stage, b) in [("interpreting", b1), ("answering", b2)] {
            if !b.pass {
                return Err(Error::Config(format!(
                    "{stage} stage uses {} parameters, budget is {}",
                    b.total_params, b.reference_params
                )));
            }
        }
        Ok(())
    }

    /// Stable hash of the serialized config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = DefaultHasher::new();
        json.hash(&mut h);
        format!("{:016x}", h.finish())
    }
}

/// `(interp_q · W_q) ⊙ (v · W_v + b_v)`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub wq: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
}

impl Fusion {
    pub fn init(d_i: usize, d_v: usize, rng: &mut RngState) -> Result<Self> {
        let bq = 1.0 / (d_i as f64).sqrt();
        let bv = 1.0 / (d_v as f64).sqrt();
        let wq = (0..d_i * d_i).map(|_| rng.uniform_range(-bq, bq)).collect();
        let wv = (0..d_v * d_i).map(|_| rng.uniform_range(-bv, bv)).collect();
        Ok(Self {
            wq: Tensor::param(wq, &[d_i, d_i])?,
            wv: Tensor::param(wv, &[d_v, d_i])?,
            bv: Tensor::param(vec![0.0; d_i], &[d_i])?,
        })
    }

    pub fn apply(&self, interp_q: &Tensor, v: &Tensor) -> Result<Tensor> {
        let pq = matmul(interp_q, &self.wq)?;
        let pv = affine(v, &self.wv, &self.bv)?;
        mul(&pq, &pv)
    }

    pub fn params(&self) -> [&Tensor; 3] {
        [&self.wq, &self.wv, &self.bv]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.wq, &mut self.wv, &mut self.bv]
    }
}

/// Gate slots of one forward pass, in draw order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateSlot {
    Cop1 = 0,
    Cop2Mul = 1,
    Cop2Q = 2,
}

/// Where gate decisions come from.
pub enum Routing<'a> {
    /// Deterministic arg-max, no noise.
    Inference,
    /// Fresh Gumbel noise per row from `rng`, straight-through gradients.
    Training(&'a mut RngState),
    /// Fixed noise per slot. `relaxed` uses the soft weights in the forward pass.
    Frozen { noise: [Vec<f64>; 3], relaxed: bool },
    /// Uniformly random one-hot choices.
    Random(&'a mut RngState),
}

impl Routing<'_> {
    fn select(
        &mut self,
        slot: GateSlot,
        logits: &Tensor,
        k: usize,
        temperature: f64,
    ) -> Result<GateSelection> {
        match self {
            Routing::Inference => select_top_k(logits, k, temperature, SelectKind::Inference),
            Routing::Training(rng) => select_k_hot(logits, k, rng, temperature, Phase::Training),
            Routing::Frozen { noise, relaxed } => {
                let noise = &noise[slot as usize];
                let kind = if *relaxed {
                    SelectKind::Relaxed { noise }
                } else {
                    SelectKind::Training { noise }
                };
                select_top_k(logits, k, temperature, kind)
            }
            Routing::Random(rng) => select_uniform(logits.rows(), logits.cols(), rng),
        }
    }
}

/// Intermediates of one (batched) forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub i_mul: Tensor,
    pub i_q: Tensor,
    pub z11: Tensor,
    pub z10: Tensor,
    pub z01: Tensor,
    pub z00: Tensor,
    pub z_final: Tensor,
    pub sel1: GateSelection,
    pub sel2_mul: GateSelection,
    pub sel2_q: GateSelection,
}

/// Four answer logits with the two answering-stage selections.
pub struct AnswerLogits {
    pub z11: Tensor,
    pub z10: Tensor,
    pub z01: Tensor,
    pub z00: Tensor,
    pub sel2_mul: GateSelection,
    pub sel2_q: GateSelection,
}

#[derive(Clone, Debug)]
pub struct CopModel {
    pub config: CopConfig,
    pub cop1: MoePool,
    pub cop2: MoePool,
    pub w1_m: Expert,
    pub w2_m: Expert,
    pub fusion: Fusion,
    /// Extra question interpreter of the broken-causal variant.
    pub w1_x: Option<Expert>,
}

fn check_cols(op: &'static str, t: &Tensor, want: usize) -> Result<()> {
    if t.cols() != want || t.shape().len() > 2 {
        return Err(Error::shape(op, t.shape(), &[want]));
    }
    Ok(())
}

impl CopModel {
    pub fn init(config: CopConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let cop1 = MoePool::init(config.n1, config.stage1(), &mut rng.split("cop1"))?;
        let cop2 = MoePool::init(config.n2, config.stage2(), &mut rng.split("cop2"))?;
        let w1_m = Expert::init(config.stage1(), &mut rng.split("w1_m"))?;
        let w2_m = Expert::init(config.stage2(), &mut rng.split("w2_m"))?;
        let fusion = Fusion::init(config.d_i, config.d_v, &mut rng.split("fusion"))?;
        let w1_x = if config.broken_causal {
            Some(Expert::init(config.stage1(), &mut rng.split("w1_x"))?)
        } else {
            None
        };
        Ok(Self {
            config,
            cop1,
            cop2,
            w1_m,
            w2_m,
            fusion,
            w1_x,
        })
    }

    pub fn fusion(&self, interp_q: &Tensor, v: &Tensor) -> Result<Tensor> {
        check_cols("fusion", interp_q, self.config.d_i)?;
        check_cols("fusion", v, self.config.d_v)?;
        self.fusion.apply(interp_q, v)
    }

    /// `i_mul = fusion(cop1(q), v)`, `i_q = w1_m(q)`.
    pub fn interpret(
        &self,
        q: &Tensor,
        v: &Tensor,
        routing: &mut Routing<'_>,
    ) -> Result<(Tensor, Tensor, GateSelection)> {
        check_cols("interpret", q, self.config.d_q)?;
        check_cols("interpret", v, self.config.d_v)?;
        if q.rows() != v.rows() {
            return Err(Error::shape("interpret", q.shape(), v.shape()));
        }
        let cfg = &self.config;
        let logits = self.cop1.gate_logits(q)?;
        let sel1 = routing.select(GateSlot::Cop1, &logits, cfg.k_select, cfg.temperature)?;
        let interp = self.cop1.forward(q, &sel1)?;
        let i_mul = self.fusion(&interp, v)?;
        let i_q = self.w1_m.forward(q)?;
        Ok((i_mul, i_q, sel1))
    }

    /// The four answering-stage logits.
    pub fn answer_logits(
        &self,
        i_mul: &Tensor,
        i_q: &Tensor,
        routing: &mut Routing<'_>,
    ) -> Result<AnswerLogits> {
        self.answer_stage(i_mul, i_q, i_q, routing)
    }

    /// `unimodal_routed` feeds `cop2` for `z01`; `i_q` feeds `w2_m` for `z00`.
    fn answer_stage(
        &self,
        i_mul: &Tensor,
        unimodal_routed: &Tensor,
        i_q: &Tensor,
        routing: &mut Routing<'_>,
    ) -> Result<AnswerLogits> {
        let cfg = &self.config;
        check_cols("answer_logits", i_mul, cfg.d_i)?;
        check_cols("answer_logits", i_q, cfg.d_i)?;
        let logits_mul = self.cop2.gate_logits(i_mul)?;
        let sel2_mul = routing.select(GateSlot::Cop2Mul, &logits_mul, cfg.k_select, cfg.temperature)?;
        let z11 = self.cop2.forward(i_mul, &sel2_mul)?;

        let (mul_side, routed_side, q_side) = if cfg.stop_gradient_branches {
            (i_mul.detach(), unimodal_routed.detach(), i_q.detach())
        } else {
            (i_mul.clone(), unimodal_routed.clone(), i_q.clone())
        };
        let z10 = self.w2_m.forward(&mul_side)?;
        let logits_q = self.cop2.gate_logits(&routed_side)?;
        let sel2_q = routing.select(GateSlot::Cop2Q, &logits_q, cfg.k_select, cfg.temperature)?;
        let z01 = self.cop2.forward(&routed_side, &sel2_q)?;
        let z00 = self.w2_m.forward(&q_side)?;
        Ok(AnswerLogits {
            z11,
            z10,
            z01,
            z00,
            sel2_mul,
            sel2_q,
        })
    }

    /// Full forward pass. In the broken-causal variant `z01` is computed from
    /// `fusion(w1_x(q), v)` instead of `i_q`.
    pub fn forward(&self, q: &Tensor, v: &Tensor, routing: &mut Routing<'_>) -> Result<ForwardTrace> {
        let (i_mul, i_q, sel1) = self.interpret(q, v, routing)?;
        let a = match &self.w1_x {
            Some(w1_x) => {
                let i_x = self.fusion(&w1_x.forward(q)?, v)?;
                self.answer_stage(&i_mul, &i_x, &i_q, routing)?
            }
            None => self.answer_logits(&i_mul, &i_q, routing)?,
        };
        let z_final = finalize(&a.z11, &a.z10, &a.z01, &a.z00)?;
        Ok(ForwardTrace {
            i_mul,
            i_q,
            z11: a.z11,
            z10: a.z10,
            z01: a.z01,
            z00: a.z00,
            z_final,
            sel1,
            sel2_mul: a.sel2_mul,
            sel2_q: a.sel2_q,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.cop1.params();
        out.extend(self.cop2.params());
        out.extend(self.w1_m.params());
        out.extend(self.w2_m.params());
        out.extend(self.fusion.params());
        if let Some(x) = &self.w1_x {
            out.extend(x.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.cop1.params_mut();
        out.extend(self.cop2.params_mut());
        out.extend(self.w1_m.params_mut());
        out.extend(self.w2_m.params_mut());
        out.extend(self.fusion.params_mut());
        if let Some(x) = &mut self.w1_x {
            out.extend(x.params_mut());
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.cop1.param_names("cop1");
        names.extend(self.cop2.param_names("cop2"));
        names.extend(expert_names("w1_m"));
        names.extend(expert_names("w2_m"));
        names.extend(["fusion.wq", "fusion.wv", "fusion.bv"].map(String::from));
        if self.w1_x.is_some() {
            names.extend(expert_names("w1_x"));
        }
        names
    }
}

fn expert_names(prefix: &str) -> Vec<String> {
    ["w1", "b1", "w2", "b2"]
        .iter()
        .map(|p| format!("{prefix}.{p}"))
        .collect()
}

/// `log σ(z11 + z10 + z01 + z00) − log σ(z10 + z01 + z00)`.
pub fn finalize(z11: &Tensor, z10: &Tensor, z01: &Tensor, z00: &Tensor) -> Result<Tensor> {
    let rest = add(&add(z10, z01)?, z00)?;
    let full = add(z11, &rest)?;
    sub(&log_sigmoid(&full), &log_sigmoid(&rest))
}

/// Loss split into its three named parts; `total` is their sum.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Tensor,
    pub l_total: Tensor,
    pub l_m: Tensor,
    pub l_u: Tensor,
}

/// `CE(log σ(Σz)) + CE(log σ(z10)) + CE(log σ(z01)) + CE(log σ(z00))`, each
/// averaged over the batch.
pub fn cop_loss(trace: &ForwardTrace, targets: &[usize]) -> Result<LossParts> {
    let all = add(&add(&add(&trace.z11, &trace.z10)?, &trace.z01)?, &trace.z00)?;
    let l_total = cross_entropy(&log_sigmoid(&all), targets)?;
    let l_m = cross_entropy(&log_sigmoid(&trace.z10), targets)?;
    let l_u = add(
        &cross_entropy(&log_sigmoid(&trace.z01), targets)?,
        &cross_entropy(&log_sigmoid(&trace.z00), targets)?,
    )?;
    let total = add(&add(&l_total, &l_m)?, &l_u)?;
    Ok(LossParts {
        total,
        l_total,
        l_m,
        l_u,
    })
}

/// Arg-max answer index.
pub fn predict(z_final: &[f64]) -> usize {
    argmax(z_final)
}

/// Arg-max per row.
pub fn predict_rows(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows()).map(|r| argmax(scores.row(r))).collect()
}

/// Normalisation constant of the single-mediator baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CfvqaParams {
    pub c: f64,
}

/// `log σ(z_k + z_q) − log σ(z_q + c)`.
pub fn cfvqa_finalize(z_k: &Tensor, z_q: &Tensor, params: CfvqaParams) -> Result<Tensor> {
    let shifted = add(z_q, &Tensor::new(vec![params.c; z_q.len()], z_q.shape())?)?;
    sub(&log_sigmoid(&add(z_k, z_q)?), &log_sigmoid(&shifted))
}

/// `CE(log σ(z_k + z_q)) + CE(log σ(z_q))`.
pub fn cfvqa_loss(z_k: &Tensor, z_q: &Tensor, targets: &[usize]) -> Result<Tensor> {
    add(
        &cross_entropy(&log_sigmoid(&add(z_k, z_q)?), targets)?,
        &cross_entropy(&log_sigmoid(z_q), targets)?,
    )
}

/// Equal-budget baseline `w2(fusion(w1(q), v))` with no routing.
#[derive(Clone, Debug)]
pub struct MonolithicModel {
    pub interp: Expert,
    pub answer: Expert,
    pub fusion: Fusion,
}

impl MonolithicModel {
    /// Both networks take the reference hidden sizes of `config`.
    pub fn init(config: &CopConfig, rng: &mut RngState) -> Result<Self> {
        let interp = Expert::init(config.reference1(), &mut rng.split("w1_m"))?;
        let answer = Expert::init(config.reference2(), &mut rng.split("w2_m"))?;
        let fusion = Fusion::init(config.d_i, config.d_v, &mut rng.split("fusion"))?;
        Ok(Self {
            interp,
            answer,
            fusion,
        })
    }

    /// Shares `w1_m`, `w2_m` and the fusion of a routed model.
    pub fn from_cop(model: &CopModel) -> Self {
        Self {
            interp: model.w1_m.clone(),
            answer: model.w2_m.clone(),
            fusion: model.fusion.clone(),
        }
    }

    pub fn forward(&self, q: &Tensor, v: &Tensor) -> Result<Tensor> {
        let i = self.fusion.apply(&self.interp.forward(q)?, v)?;
        self.answer.forward(&i)
    }

    /// Parameters of (interpreting, answering) networks.
    pub fn budgets(&self, config: &CopConfig) -> (BudgetReport, BudgetReport) {
        (
            budget_check(config.reference1(), &[(1, self.interp.dims())]),
            budget_check(config.reference2(), &[(1, self.answer.dims())]),
        )
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.interp.params().into();
        out.extend(self.answer.params());
        out.extend(self.fusion.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.interp.params_mut().into();
        out.extend(self.answer.params_mut());
        out.extend(self.fusion.params_mut());
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = expert_names("w1_m");
        names.extend(expert_names("w2_m"));
        names.extend(["fusion.wq", "fusion.wv", "fusion.bv"].map(String::from));
        names
    }
}
