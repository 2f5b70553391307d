//! Initialization, the Adam training loop, per-epoch validation and checkpoints.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, MAGIC, VERSION};
pub use optim::{AdamParams, OptimState};

use crate::copnet::{cop_loss, CopConfig, CopModel, MonolithicModel, Routing};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, ScoreVariant};
use crate::numerics::{cross_entropy, RngState, Tensor};
use crate::synthdata::{Dataset, DatasetMeta, Sample};

/// Which network a run trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    Cop,
    Monolithic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamParams,
    pub arch: Arch,
    pub model: CopConfig,
    /// Validate every this many epochs (and always after the last one).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            seed: 0,
            adam: AdamParams::default(),
            arch: Arch::Cop,
            model: CopConfig::default(),
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "epochs, batch size and validation cadence must be at least 1".into(),
            ));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.model.validate()
    }

    /// Checks model dimensions against a dataset before any training step.
    pub fn check_dataset(&self, meta: &DatasetMeta) -> Result<()> {
        let m = &self.model;
        if m.d_q != meta.dims.d_q || m.d_v != meta.dims.d_v || m.vocab != meta.vocab {
            return Err(Error::Validation(format!(
                "model expects (d_q, d_v, vocab) = ({}, {}, {}), dataset has ({}, {}, {})",
                m.d_q, m.d_v, m.vocab, meta.dims.d_q, meta.dims.d_v, meta.vocab
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = std::collections::hash_map::DefaultHasher::new();
        json.hash(&mut h);
        format!("{:016x}", h.finish())
    }
}

/// A trainable network of either architecture.
#[derive(Clone, Debug)]
pub enum Network {
    Cop(CopModel),
    Monolithic(MonolithicModel),
}

impl Network {
    pub fn init(arch: Arch, config: &CopConfig, rng: &mut RngState) -> Result<Self> {
        Ok(match arch {
            Arch::Cop => Network::Cop(init_params_with(config.clone(), rng)?),
            Arch::Monolithic => Network::Monolithic(MonolithicModel::init(config, rng)?),
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Network::Cop(m) => m.param_names(),
            Network::Monolithic(m) => m.param_names(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Network::Cop(m) => m.params(),
            Network::Monolithic(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Network::Cop(m) => m.params_mut(),
            Network::Monolithic(m) => m.params_mut(),
        }
    }

    /// Mean training loss of a batch with gate noise drawn from `noise`.
    pub fn batch_loss(&self, batch: &Batch, noise: &mut RngState) -> Result<Tensor> {
        match self {
            Network::Cop(m) => {
                let trace = m.forward(&batch.q, &batch.v, &mut Routing::Training(noise))?;
                Ok(cop_loss(&trace, &batch.targets)?.total)
            }
            Network::Monolithic(m) => cross_entropy(&m.forward(&batch.q, &batch.v)?, &batch.targets),
        }
    }

    pub fn as_cop(&self) -> Option<&CopModel> {
        match self {
            Network::Cop(m) => Some(m),
            Network::Monolithic(_) => None,
        }
    }
}

/// Stacked features of a group of samples.
pub struct Batch {
    pub q: Tensor,
    pub v: Tensor,
    pub targets: Vec<usize>,
    pub types: Vec<usize>,
}

impl Batch {
    pub fn gather<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let (mut q, mut v, mut targets, mut types) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut d_q, mut d_v) = (None, None);
        for s in samples {
            if *d_q.get_or_insert(s.q_feat.len()) != s.q_feat.len()
                || *d_v.get_or_insert(s.v_feat.len()) != s.v_feat.len()
            {
                return Err(Error::Validation("samples with mixed feature sizes".into()));
            }
            q.extend_from_slice(&s.q_feat);
            v.extend_from_slice(&s.v_feat);
            targets.push(s.answer);
            types.push(s.q_type);
        }
        let n = targets.len();
        if n == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        Ok(Self {
            q: Tensor::new(q, &[n, d_q.unwrap_or(0)])?,
            v: Tensor::new(v, &[n, d_v.unwrap_or(0)])?,
            targets,
            types,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Routed model with uniform `±1/√fan_in` weights and zero biases.
pub fn init_params(config: CopConfig, seed: u64) -> Result<CopModel> {
    init_params_with(config, &mut RngState::new(seed))
}

fn init_params_with(config: CopConfig, rng: &mut RngState) -> Result<CopModel> {
    config.validate()?;
    CopModel::init(config, rng)
}

/// One row of the per-epoch log. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub train_loss_median: Option<f64>,
    pub val_acc_overall: Option<f64>,
    pub val_acc_per_type: Vec<f64>,
}

/// CSV with header `epoch,train_loss,val_acc_overall,val_acc_t0,...`.
pub fn epoch_log_csv(records: &[EpochRecord], num_types: usize) -> String {
    let mut out = String::from("epoch,train_loss,val_acc_overall");
    for t in 0..num_types {
        let _ = write!(out, ",val_acc_t{t}");
    }
    out.push('\n');
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let _ = write!(out, "{},{},{}", r.epoch, fmt(r.train_loss), fmt(r.val_acc_overall));
        for t in 0..num_types {
            let _ = write!(out, ",{}", fmt(r.val_acc_per_type.get(t).copied()));
        }
        out.push('\n');
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Resumable training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub network: Network,
    pub optim: OptimState,
    /// Completed epochs.
    pub epoch: usize,
    root: RngState,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = RngState::new(config.seed);
        let network = Network::init(config.arch, &config.model, &mut root.split("init"))?;
        let optim = OptimState::new(config.adam, &network.params());
        Ok(Self {
            config,
            network,
            optim,
            epoch: 0,
            root,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(ckpt.config.clone())?;
        let names = trainer.network.param_names();
        let find = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| Error::Corruption(format!("tensor {name} missing")))?;
            if t.shape != shape {
                return Err(Error::Corruption(format!(
                    "tensor {name} has shape {:?}, model expects {shape:?}",
                    t.shape
                )));
            }
            Ok(t.data.clone())
        };
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (name, p) in names.iter().zip(trainer.network.params_mut()) {
            let shape = p.shape().to_vec();
            *p = Tensor::param(find(name, &shape)?, &shape)?;
            m.push(find(&format!("adam.m.{name}"), &shape)?);
            v.push(find(&format!("adam.v.{name}"), &shape)?);
        }
        trainer.optim.m = m;
        trainer.optim.v = v;
        trainer.optim.step = ckpt.optim_step;
        trainer.epoch = ckpt.epoch;
        trainer.root = RngState::restore(ckpt.rng);
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let names = self.network.param_names();
        let params = self.network.params();
        let mut tensors: Vec<NamedTensor> = names
            .iter()
            .zip(&params)
            .map(|(n, p)| NamedTensor {
                name: n.clone(),
                shape: p.shape().to_vec(),
                data: p.values().to_vec(),
            })
            .collect();
        for (label, buffers) in [("m", &self.optim.m), ("v", &self.optim.v)] {
            for ((n, p), b) in names.iter().zip(&params).zip(buffers) {
                tensors.push(NamedTensor {
                    name: format!("adam.{label}.{n}"),
                    shape: p.shape().to_vec(),
                    data: b.clone(),
                });
            }
        }
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.root.snapshot(),
            optim_step: self.optim.step,
            tensors,
        }
    }

    /// One pass over `train` in a seeded shuffled order. Returns the mean and
    /// median batch loss.
    pub fn run_epoch(&mut self, train: &[Sample]) -> Result<(f64, f64)> {
        let epoch = self.epoch as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.root.split_indexed("shuffle", epoch).shuffle(&mut order);
        let mut noise = self.root.split_indexed("gate-noise", epoch);
        let names = self.network.param_names();
        let mut losses = Vec::with_capacity(order.len() / self.config.batch_size + 1);
        for chunk in order.chunks(self.config.batch_size) {
            let batch = Batch::gather(chunk.iter().map(|&i| &train[i]))?;
            let loss = self.network.batch_loss(&batch, &mut noise)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {}", self.epoch + 1)));
            }
            loss.backward()?;
            self.optim.step(&mut self.network.params_mut(), &names)?;
            losses.push(value);
        }
        self.epoch += 1;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok((mean, median(&mut losses)))
    }

    pub fn validate(&self, data: &Dataset) -> Result<(f64, Vec<f64>)> {
        let report = accuracy(&self.network, &data.test, &data.meta, ScoreVariant::ZFinal)?;
        Ok((report.overall, report.per_type))
    }

    /// Trains until `config.epochs` are complete, logging each epoch.
    pub fn run(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&Self, &EpochRecord)) -> Result<Vec<EpochRecord>> {
        self.config.check_dataset(&data.meta)?;
        let mut log = Vec::new();
        if self.epoch == 0 {
            let (overall, per_type) = self.validate(data)?;
            let rec = EpochRecord {
                epoch: 0,
                train_loss: None,
                train_loss_median: None,
                val_acc_overall: Some(overall),
                val_acc_per_type: per_type,
            };
            on_epoch(self, &rec);
            log.push(rec);
        }
        while self.epoch < self.config.epochs {
            let (mean, med) = self.run_epoch(&data.train)?;
            let due = self.epoch.is_multiple_of(self.config.validate_every) || self.epoch == self.config.epochs;
            let (overall, per_type) = if due {
                let (o, p) = self.validate(data)?;
                (Some(o), p)
            } else {
                (None, Vec::new())
            };
            let rec = EpochRecord {
                epoch: self.epoch,
                train_loss: Some(mean),
                train_loss_median: Some(med),
                val_acc_overall: overall,
                val_acc_per_type: per_type,
            };
            on_epoch(self, &rec);
            log.push(rec);
        }
        Ok(log)
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<EpochRecord>,
    /// Snapshot with the highest validation accuracy and its epoch.
    pub best: (usize, Network),
}

/// Trains from scratch on `data`.
pub fn train(config: TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.check_dataset(&data.meta)?;
    let mut trainer = Trainer::new(config)?;
    let mut best: Option<(f64, usize, Network)> = None;
    let log = trainer.run(data, |t, rec| {
        if let Some(acc) = rec.val_acc_overall {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, rec.epoch, t.network.clone()));
            }
        }
    })?;
    let (_, epoch, net) = best.expect("epoch 0 is always validated");
    Ok(TrainOutcome {
        trainer,
        log,
        best: (epoch, net),
    })
}

/// Rebuilds a network from a checkpoint's parameters.
pub fn network_from_checkpoint(ckpt: &Checkpoint) -> Result<Network> {
    Ok(Trainer::from_checkpoint(ckpt)?.network)
}
