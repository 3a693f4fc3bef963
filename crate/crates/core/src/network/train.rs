use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use log::{debug, info};

use super::{Mode, Network, TrainConfig};
use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::scaling::GroupId;
use crate::tensor::{Matrix, Rng};

/// Rows evaluated per forward pass in [`evaluate`].
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub error: f64,
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleRecord {
    pub epoch: usize,
    pub group: GroupId,
    pub exponent: i32,
}

/// One application of the scaling policy to one group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyEvent {
    /// Training examples seen when the policy ran.
    pub examples: u64,
    pub group: GroupId,
    pub step: i32,
    pub exponent: i32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub scales: Vec<ScaleRecord>,
    pub policy_events: Vec<PolicyEvent>,
    /// State of the dropout stream after the last step.
    pub rng_state: u64,
}

impl TrainingLog {
    pub fn final_error(&self, split: Split) -> Option<f64> {
        self.epochs.iter().rev().find(|r| r.split == split).map(|r| r.error)
    }

    pub fn errors(&self, split: Split) -> Vec<f64> {
        self.epochs
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.error)
            .collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,split,error,lr,momentum")?;
        for r in &self.epochs {
            writeln!(w, "{},{},{},{},{}", r.epoch, r.split, r.error, r.lr, r.momentum)?;
        }
        Ok(())
    }

    pub fn write_scale_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,group_id,exponent")?;
        for r in &self.scales {
            writeln!(w, "{},{},{}", r.epoch, r.group, r.exponent)?;
        }
        Ok(())
    }
}

/// Fraction of rows whose argmax class differs from the label. Ties go to
/// the lowest class index.
pub fn evaluate(net: &mut Network, x: &Matrix, y: &[u8]) -> Result<f64> {
    if x.rows() != y.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", x.rows(), y.len())));
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..x.rows()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let pred = net.predict(&x.select_rows(chunk))?;
        wrong += chunk.iter().zip(pred).filter(|&(&i, p)| p != y[i] as usize).count();
    }
    Ok(wrong as f64 / y.len() as f64)
}

fn dropout_stream(seed: u64) -> Rng {
    let mut root = Rng::new(seed);
    // the first split seeds parameter initialization
    root.split();
    root.split()
}

/// Per-epoch bookkeeping shared by training and calibration.
struct Loop {
    rng: Rng,
    examples: u64,
}

impl Loop {
    fn epoch(&mut self, net: &mut Network, ds: &Dataset, epoch: usize, events: &mut Vec<PolicyEvent>) -> Result<()> {
        let cfg = net.config().clone();
        let lr = cfg.schedule.lr_at(epoch as f64);
        let momentum = cfg.schedule.momentum_at(epoch as f64);
        let period = cfg.policy.update_period;
        for batch in minibatches(ds, cfg.batch_size, cfg.seed, epoch as u64)? {
            let trace = net.forward(&batch.x, Mode::Train, &mut self.rng)?;
            let grads = net.backward(&trace, &batch.y)?;
            net.sgd_step(&grads, lr, momentum)?;
            let before = self.examples / period;
            self.examples += batch.y.len() as u64;
            if net.precision().is_dynamic() && self.examples / period != before {
                for (group, step) in net.apply_scaling_policy()? {
                    let exponent = net.precision().bank().exponent(group).unwrap_or_default();
                    if step != 0 {
                        debug!("{} examples: {group} -> {exponent}", self.examples);
                    }
                    events.push(PolicyEvent {
                        examples: self.examples,
                        group,
                        step,
                        exponent,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Runs the configured number of epochs, evaluating on both splits before
/// the first epoch and after every epoch.
pub fn train(net: &mut Network, train_set: &Dataset, test_set: &Dataset) -> Result<TrainingLog> {
    if train_set.features() != net.inputs() || test_set.features() != net.inputs() {
        return Err(Error::Shape(format!(
            "datasets have {}/{} features, network expects {}",
            train_set.features(),
            test_set.features(),
            net.inputs()
        )));
    }
    let cfg = net.config().clone();
    let mut log = TrainingLog::default();
    let mut state = Loop {
        rng: dropout_stream(cfg.seed),
        examples: 0,
    };
    let record = |net: &mut Network, log: &mut TrainingLog, epoch: usize| -> Result<()> {
        // the row for epoch e carries the schedule used to train epoch e
        let lr = cfg.schedule.lr_at(epoch as f64);
        let momentum = cfg.schedule.momentum_at(epoch as f64);
        for (split, ds) in [(Split::Train, train_set), (Split::Test, test_set)] {
            let error = evaluate(net, &ds.x, &ds.y)?;
            log.epochs.push(EpochRecord {
                epoch,
                split,
                error,
                lr,
                momentum,
            });
        }
        for (group, exponent) in net.precision().bank().exponents() {
            log.scales.push(ScaleRecord { epoch, group, exponent });
        }
        Ok(())
    };
    record(net, &mut log, 0)?;
    for epoch in 0..cfg.epochs {
        state.epoch(net, train_set, epoch, &mut log.policy_events)?;
        record(net, &mut log, epoch + 1)?;
        info!(
            "epoch {}: train {:.4} test {:.4}",
            epoch + 1,
            log.final_error(Split::Train).unwrap_or(f64::NAN),
            log.final_error(Split::Test).unwrap_or(f64::NAN)
        );
    }
    log.rng_state = state.rng.state();
    Ok(log)
}

fn observe_parameters(net: &mut Network) {
    let params: Vec<(GroupId, Matrix)> = net
        .parameters()
        .into_iter()
        .map(|(id, p)| (id, p.master().clone()))
        .collect();
    for (id, m) in params {
        net.precision_mut().observe(id, &m);
    }
}

/// Trains an exact-arithmetic copy of the configuration for `epochs` epochs
/// and derives every group's exponent from the largest magnitude it saw.
/// Returns the exponents together with the trained exact network.
pub fn calibrate_network(
    config: &TrainConfig,
    train_set: &Dataset,
    epochs: usize,
) -> Result<(BTreeMap<GroupId, i32>, Network)> {
    let cfg = config.exact_variant();
    let mut net = Network::new(train_set.features(), train_set.classes, &cfg)?;
    net.precision_mut().start_trace();
    // parameters as initialized count too
    observe_parameters(&mut net);
    let mut state = Loop {
        rng: dropout_stream(cfg.seed),
        examples: 0,
    };
    let mut events = Vec::new();
    for epoch in 0..epochs {
        state.epoch(&mut net, train_set, epoch, &mut events)?;
        observe_parameters(&mut net);
    }
    let trace = net
        .precision_mut()
        .take_trace()
        .ok_or(Error::NoCalibrationData)?;
    Ok((trace.calibrate()?, net))
}

/// Exponents from [`calibrate_network`].
pub fn calibrate(config: &TrainConfig, train_set: &Dataset, epochs: usize) -> Result<BTreeMap<GroupId, i32>> {
    calibrate_network(config, train_set, epochs).map(|(e, _)| e)
}
