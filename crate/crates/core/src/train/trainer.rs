use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{Checkpoint, CheckpointConfig, CheckpointMeta, RngState, FORMAT_VERSION};
use super::metrics::{MetricsLog, MetricsRow};
use super::optim::{adamw_update, clip_factor, global_norm, AdamState};
use super::{lr_at, TrainConfig};
use crate::analysis::flops::flops_estimate;
use crate::autograd::Graph;
use crate::data::{Batch, BatchIterator, DataPosition, TokenShard};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Parameters};
use crate::tensor::Matrix;

/// Everything that changes from one optimizer step to the next.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optim: AdamState<f32>,
    pub step: u64,
    /// Draws pondering step counts.
    pub rng: ChaCha8Rng,
    pub tokens_seen: u64,
    pub cumulative_flops: f64,
}

fn step_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl TrainState {
    pub fn fresh(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate_with(model_cfg)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::init(model_cfg.clone(), cfg.mechanism.extras(), &mut init_rng)?;
        let optim = AdamState::new(model.params.tensors());
        Ok(Self {
            model,
            optim,
            step: 0,
            rng: step_rng(cfg.seed),
            tokens_seen: 0,
            cumulative_flops: 0.0,
        })
    }

    /// Resume exactly where a checkpoint left off.
    pub fn resume(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate_with(&ckpt.config.model)?;
        let model = ckpt.model();
        let optim = match &ckpt.optim {
            Some(o) if o.matches(model.params.tensors()) => o.clone(),
            _ => {
                return Err(Error::Validation(
                    "checkpoint has no optimizer state to resume from".into(),
                ))
            }
        };
        Ok(Self {
            model,
            optim,
            step: ckpt.meta.step,
            rng: ckpt.meta.rng.restore()?,
            tokens_seen: ckpt.meta.tokens_seen,
            cumulative_flops: ckpt.meta.cumulative_flops,
        })
    }

    /// Continual pretraining: load weights, switch to `cfg.mechanism`, reset
    /// the optimizer and counters. Tensors the new mechanism needs that the
    /// checkpoint lacks are freshly initialized from `cfg.seed`.
    pub fn warm_start(
        ckpt: &Checkpoint,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate_with(model_cfg)?;
        let named = ckpt
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let params = Parameters::from_named(model_cfg, named)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = params.with_extras(model_cfg, cfg.mechanism.extras(), &mut init_rng)?;
        let optim = AdamState::new(params.tensors());
        Ok(Self {
            model: Model {
                config: model_cfg.clone(),
                params,
            },
            optim,
            step: 0,
            rng: step_rng(cfg.seed),
            tokens_seen: 0,
            cumulative_flops: 0.0,
        })
    }
}

/// One optimizer step on `batch`: resolve the pondering steps, forward and
/// backward through the whole chain, clip, update.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &Batch) -> Result<MetricsRow> {
    let mech = &cfg.mechanism;
    let resolved = mech.resolve_steps(&mut state.rng);
    let mut g = Graph::<f32>::new();
    let lm = state.model.on(&mut g, true);
    let loss_var = mech.loss(
        &mut g,
        &lm,
        &batch.inputs,
        &batch.targets,
        batch.layout,
        resolved,
    )?;
    let vars = lm.vars().to_vec();
    let loss = g.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            batch_id: batch.id,
            dump: String::new(),
        });
    }
    let mut grads = g.backward(loss_var);
    let params = state.model.params.tensors();
    let mut gs: Vec<Matrix<f32>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .take(*v)
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    drop(g);
    let grad_norm = global_norm(&gs);
    let scale = clip_factor(grad_norm, cfg.grad_clip_norm) as f32;
    if scale != 1.0 {
        for gm in &mut gs {
            gm.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }

    state.step += 1;
    state.optim.t += 1;
    let lr = lr_at(state.step, cfg);
    let hyper = cfg.hyper(lr);
    let t = state.optim.t;
    for (i, gm) in gs.iter().enumerate() {
        let decay = state.model.params.decays(i);
        let p = &mut state.model.params.tensors_mut()[i];
        adamw_update(
            p.data_mut(),
            gm.data(),
            state.optim.m[i].data_mut(),
            state.optim.v[i].data_mut(),
            t,
            &hyper,
            decay,
        );
    }

    let tokens = batch.tokens() as u64;
    state.tokens_seen += tokens;
    let per_token =
        flops_estimate(&state.model.config, mech, mech.compute_count(resolved)).train_per_token;
    state.cumulative_flops += per_token * tokens as f64;
    Ok(MetricsRow {
        step: state.step,
        loss,
        lr,
        grad_norm,
        tokens_seen: state.tokens_seen,
        cumulative_flops: state.cumulative_flops,
        resolved_ponder_steps: resolved,
    })
}

#[derive(Serialize)]
struct BatchDump<'a> {
    step: u64,
    batch_id: u64,
    inputs: &'a [usize],
    targets: &'a [usize],
}

/// The training loop over a shuffled batch stream.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub state: TrainState,
    batches: BatchIterator<'a>,
    log: Option<MetricsLog>,
    dump_dir: Option<PathBuf>,
    pub tokenizer_hash: Option<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        state: TrainState,
        cfg: TrainConfig,
        shards: &'a [TokenShard],
        position: DataPosition,
    ) -> Result<Self> {
        cfg.validate_with(&state.model.config)?;
        for s in shards {
            if s.vocab_size as usize != state.model.config.vocab_size {
                return Err(Error::Validation(format!(
                    "shard vocab size {} does not match model vocab size {}",
                    s.vocab_size, state.model.config.vocab_size
                )));
            }
        }
        let mut batches = BatchIterator::new(shards, cfg.batch.clone(), true)?;
        batches.seek(position);
        Ok(Self {
            cfg,
            state,
            batches,
            log: None,
            dump_dir: None,
            tokenizer_hash: None,
        })
    }

    /// Write every row to `log` as it is produced.
    pub fn with_log(mut self, log: MetricsLog) -> Self {
        self.log = Some(log);
        self
    }

    /// Where a batch that produced a non-finite loss is written.
    pub fn with_dump_dir(mut self, dir: &Path) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn position(&self) -> DataPosition {
        self.batches.position()
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.cfg.total_steps
    }

    pub fn step(&mut self) -> Result<MetricsRow> {
        let batch = self.batches.next_batch();
        match train_step(&mut self.state, &self.cfg, &batch) {
            Ok(row) => {
                if let Some(log) = &mut self.log {
                    log.push(&row)?;
                }
                Ok(row)
            }
            Err(Error::NonFiniteLoss { step, batch_id, .. }) => {
                let dump = match &self.dump_dir {
                    Some(dir) => {
                        let path = dir.join(format!("nonfinite_batch_{batch_id}.json"));
                        let body = serde_json::to_string(&BatchDump {
                            step,
                            batch_id,
                            inputs: &batch.inputs,
                            targets: &batch.targets,
                        })
                        .map_err(|e| Error::json(&path, e))?;
                        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
                        path.display().to_string()
                    }
                    None => "(no dump directory configured)".into(),
                };
                if let Some(log) = &mut self.log {
                    log.flush()?;
                }
                Err(Error::NonFiniteLoss {
                    step,
                    batch_id,
                    dump,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Train until `total_steps`, calling `on_row` after every step.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow)) -> Result<()> {
        while !self.done() {
            let row = self.step()?;
            on_row(&row);
        }
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        Checkpoint {
            config: CheckpointConfig {
                format_version: FORMAT_VERSION,
                model: self.state.model.config.clone(),
                mechanism: self.cfg.mechanism.clone(),
                train: Some(self.cfg.clone()),
            },
            params: self.state.model.params.clone(),
            optim: with_optimizer.then(|| self.state.optim.clone()),
            meta: CheckpointMeta {
                step: self.state.step,
                rng: RngState::capture(&self.state.rng),
                data: self.position(),
                tokens_seen: self.state.tokens_seen,
                cumulative_flops: self.state.cumulative_flops,
                adam_t: self.state.optim.t,
                tokenizer_hash: self.tokenizer_hash.clone(),
            },
        }
    }
}
