//! Maxout MLP with dropout and a softmax output, trained by SGD with momentum.
//!
//! Every layer follows the same staging: parameters and inputs are read from
//! their grids, products are accumulated exactly, the weighted sums are
//! quantized, the maxout nonlinearity and dropout are applied, and the layer
//! output is quantized again. The backward pass mirrors this, quantizing each
//! gradient tensor right after the product that produces it. Softmax and the
//! loss run in host precision on the quantized logits.

mod checkpoint;
mod param;
mod precision;
mod schedule;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use param::{apply_max_norm, DualParam};
pub use precision::{FormatSpec, Precision};
pub use schedule::Schedule;
pub use train::{
    calibrate, calibrate_network, evaluate, train, EpochRecord, PolicyEvent, ScaleRecord, Split,
    TrainingLog,
};

use crate::error::{Error, Result};
use crate::formats::QuantFormat;
use crate::scaling::{GroupId, ScalingPolicy, TensorRole};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Units per hidden maxout layer.
    pub hidden_units: Vec<usize>,
    /// Pieces per unit, one entry per hidden layer.
    pub pieces: Vec<usize>,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    pub schedule: Schedule,
    /// Column-norm limit for every weight matrix; `None` disables it.
    pub max_norm: Option<f64>,
    pub prop_format: FormatSpec,
    pub update_format: FormatSpec,
    pub policy: ScalingPolicy,
    /// Exponent every dynamic group starts from before calibration.
    pub initial_exponent: i32,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_units: vec![200, 200],
            pieces: vec![2, 2],
            input_dropout: 0.2,
            hidden_dropout: 0.5,
            schedule: Schedule {
                lr_start: 0.1,
                lr_end: 0.01,
                lr_epochs: 20.0,
                momentum_start: 0.5,
                momentum_max: 0.7,
                momentum_saturate_epoch: 10.0,
            },
            max_norm: Some(1.9365),
            prop_format: FormatSpec::Static(QuantFormat::ExactHost),
            update_format: FormatSpec::Static(QuantFormat::ExactHost),
            policy: ScalingPolicy::default(),
            initial_exponent: 5,
            seed: 1234,
            epochs: 20,
            batch_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden_units.is_empty() {
            return bad("at least one hidden layer is required".into());
        }
        if self.pieces.len() != self.hidden_units.len() {
            return bad(format!(
                "{} piece counts for {} hidden layers",
                self.pieces.len(),
                self.hidden_units.len()
            ));
        }
        if self.pieces.iter().any(|&k| k == 0 || k > u8::MAX as usize) {
            return bad("pieces per unit must be in [1, 255]".into());
        }
        if self.hidden_units.contains(&0) {
            return bad("hidden layers need at least one unit".into());
        }
        for (name, p) in [("input_dropout", self.input_dropout), ("hidden_dropout", self.hidden_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        let s = &self.schedule;
        if !(s.lr_start >= s.lr_end && s.lr_end > 0.0) {
            return bad(format!("learning rates need lr_start >= lr_end > 0, got {} / {}", s.lr_start, s.lr_end));
        }
        for (name, m) in [("momentum_start", s.momentum_start), ("momentum_max", s.momentum_max)] {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("{name} = {m} outside [0, 1)"));
            }
        }
        if let Some(l) = self.max_norm {
            if !(l > 0.0) {
                return bad(format!("max_norm = {l} must be positive"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        self.policy.validate()?;
        Precision::new(self.prop_format, self.update_format, self.policy)?;
        Ok(())
    }

    /// Same run with exact arithmetic in both stages.
    pub fn exact_variant(&self) -> TrainConfig {
        TrainConfig {
            prop_format: FormatSpec::Static(QuantFormat::ExactHost),
            update_format: FormatSpec::Static(QuantFormat::ExactHost),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub weights: DualParam,
    pub bias: DualParam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxoutLayer {
    index: usize,
    fan_in: usize,
    units: usize,
    pieces: Vec<Piece>,
}

impl MaxoutLayer {
    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn pieces_mut(&mut self) -> &mut [Piece] {
        &mut self.pieces
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLayer {
    index: usize,
    pub weights: DualParam,
    pub bias: DualParam,
}

/// State kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the quantized input, `activations[l]` the output of
    /// hidden layer `l`, both after dropout.
    pub activations: Vec<Matrix>,
    /// Scaled dropout masks (0 or `1/(1-p)`) applied to each activation.
    pub masks: Vec<Option<Matrix>>,
    /// Winning piece of every unit, per hidden layer, row-major.
    pub argmax: Vec<Vec<u8>>,
    pub logits: Matrix,
    pub probs: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Per hidden layer, per piece.
    pub hidden: Vec<Vec<ParamGrad>>,
    pub output: ParamGrad,
}

impl Gradients {
    /// Flattened in the same order as [`Network::parameters`].
    pub fn flatten(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.hidden {
            for g in layer {
                out.push(&g.weights);
                out.push(&g.bias);
            }
        }
        out.push(&self.output.weights);
        out.push(&self.output.bias);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    config: TrainConfig,
    inputs: usize,
    classes: usize,
    hidden: Vec<MaxoutLayer>,
    output: SoftmaxLayer,
    precision: Precision,
}

fn gid(layer: usize, role: TensorRole) -> GroupId {
    GroupId::new(layer, role)
}

fn init_param(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Result<Matrix> {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::random_uniform(rng, fan_in, fan_out, -r, r)
}

/// Row-wise softmax with the row max subtracted first.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
    out
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn dropout_mask(rng: &mut Rng, rows: usize, cols: usize, p: f64) -> Result<Matrix> {
    let keep = 1.0 - p;
    Ok(Matrix::random_bernoulli(rng, rows, cols, keep)?.scale(1.0 / keep))
}

impl Network {
    pub fn new(inputs: usize, classes: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if inputs == 0 || classes < 2 {
            return Err(Error::Config(format!("{inputs} inputs / {classes} classes")));
        }
        let mut precision = Precision::new(config.prop_format, config.update_format, config.policy)?;
        let depth = config.hidden_units.len();
        precision.register(gid(0, TensorRole::Output), config.initial_exponent);
        for l in 1..=depth {
            for id in Precision::all_roles_for(l, true) {
                precision.register(id, config.initial_exponent);
            }
        }
        for id in Precision::all_roles_for(depth + 1, false) {
            precision.register(id, config.initial_exponent);
        }
        let mut net = Network {
            config: config.clone(),
            inputs,
            classes,
            hidden: Vec::new(),
            output: SoftmaxLayer {
                index: depth + 1,
                weights: DualParam::new(Matrix::zeros(1, 1)),
                bias: DualParam::new(Matrix::zeros(1, 1)),
            },
            precision,
        };
        net.reinitialize()?;
        Ok(net)
    }

    /// Draws fresh parameters from the configured seed and zeroes momentum.
    /// Scale exponents are left as they are.
    pub fn reinitialize(&mut self) -> Result<()> {
        let mut rng = Rng::new(self.config.seed).split();
        let mut fan_in = self.inputs;
        self.hidden.clear();
        for (i, (&units, &k)) in self.config.hidden_units.iter().zip(&self.config.pieces).enumerate() {
            let mut pieces = Vec::with_capacity(k);
            for _ in 0..k {
                pieces.push(Piece {
                    weights: DualParam::new(init_param(&mut rng, fan_in, units)?),
                    bias: DualParam::new(Matrix::zeros(1, units)),
                });
            }
            self.hidden.push(MaxoutLayer {
                index: i + 1,
                fan_in,
                units,
                pieces,
            });
            fan_in = units;
        }
        self.output.weights = DualParam::new(init_param(&mut rng, fan_in, self.classes)?);
        self.output.bias = DualParam::new(Matrix::zeros(1, self.classes));
        self.requantize_masters()?;
        self.sync_all()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn hidden(&self) -> &[MaxoutLayer] {
        &self.hidden
    }

    pub fn hidden_mut(&mut self) -> &mut [MaxoutLayer] {
        &mut self.hidden
    }

    pub fn output(&self) -> &SoftmaxLayer {
        &self.output
    }

    pub fn output_mut(&mut self) -> &mut SoftmaxLayer {
        &mut self.output
    }

    pub fn precision(&self) -> &Precision {
        &self.precision
    }

    pub fn precision_mut(&mut self) -> &mut Precision {
        &mut self.precision
    }

    fn param_groups(&self) -> Vec<(GroupId, GroupId)> {
        let mut out: Vec<(GroupId, GroupId)> = Vec::new();
        for layer in &self.hidden {
            for _ in &layer.pieces {
                out.push((gid(layer.index, TensorRole::Weights), gid(layer.index, TensorRole::Bias)));
            }
        }
        out.push((
            gid(self.output.index, TensorRole::Weights),
            gid(self.output.index, TensorRole::Bias),
        ));
        out
    }

    /// All parameters with their scale group, weights before bias, hidden
    /// layers first.
    pub fn parameters(&self) -> Vec<(GroupId, &DualParam)> {
        let groups = self.param_groups();
        let mut params: Vec<&DualParam> = Vec::new();
        for layer in &self.hidden {
            for p in &layer.pieces {
                params.push(&p.weights);
                params.push(&p.bias);
            }
        }
        params.push(&self.output.weights);
        params.push(&self.output.bias);
        let ids = groups.into_iter().flat_map(|(w, b)| [w, b]);
        ids.zip(params).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<(GroupId, &mut DualParam)> {
        let groups = self.param_groups();
        let mut params: Vec<&mut DualParam> = Vec::new();
        for layer in &mut self.hidden {
            for p in &mut layer.pieces {
                params.push(&mut p.weights);
                params.push(&mut p.bias);
            }
        }
        params.push(&mut self.output.weights);
        params.push(&mut self.output.bias);
        let ids = groups.into_iter().flat_map(|(w, b)| [w, b]);
        ids.zip(params).collect()
    }

    /// Re-derives every propagation copy under the current exponents.
    pub fn sync_all(&mut self) -> Result<()> {
        let mut precision = std::mem::replace(
            &mut self.precision,
            Precision::new(
                FormatSpec::Static(QuantFormat::ExactHost),
                FormatSpec::Static(QuantFormat::ExactHost),
                ScalingPolicy::default(),
            )?,
        );
        let result = (|| {
            for (id, p) in self.parameters_mut() {
                let fmt = precision.prop_format(id);
                p.sync(fmt, precision.bank_mut().get_mut(id))?;
            }
            Ok(())
        })();
        self.precision = precision;
        result
    }

    /// Rounds every master onto its current update grid.
    pub fn requantize_masters(&mut self) -> Result<()> {
        let precision = self.precision.clone();
        for (id, p) in self.parameters_mut() {
            let q = precision.quantize_update(id, p.master())?;
            p.set_master(q)?;
        }
        Ok(())
    }

    /// True when every propagation copy equals the quantized master.
    pub fn is_synced(&self) -> bool {
        self.parameters()
            .into_iter()
            .all(|(id, p)| p.verify_sync(self.precision.prop_format(id)))
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode, rng: &mut Rng) -> Result<ForwardTrace> {
        if x.cols() != self.inputs {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.inputs
            )));
        }
        let train = mode == Mode::Train;
        let Network {
            config,
            hidden,
            output,
            precision,
            ..
        } = self;
        let batch = x.rows();
        let mut activations = Vec::with_capacity(hidden.len() + 1);
        let mut masks = Vec::with_capacity(hidden.len() + 1);
        let mut argmaxes = Vec::with_capacity(hidden.len());

        let in_id = gid(0, TensorRole::Output);
        let mut h = precision.quantize(in_id, x)?;
        if train && config.input_dropout > 0.0 {
            let mask = dropout_mask(rng, batch, x.cols(), config.input_dropout)?;
            h = precision.quantize(in_id, &h.mul(&mask)?)?;
            masks.push(Some(mask));
        } else {
            masks.push(None);
        }
        let mut prev_id = in_id;

        for layer in hidden.iter() {
            let l = layer.index;
            let (w_id, b_id, z_id, o_id) = (
                gid(l, TensorRole::Weights),
                gid(l, TensorRole::Bias),
                gid(l, TensorRole::WeightedSum),
                gid(l, TensorRole::Output),
            );
            let (wf, bf) = (precision.prop_format(w_id), precision.prop_format(b_id));
            let mut best: Option<Matrix> = None;
            let mut arg = vec![0u8; batch * layer.units];
            for (j, piece) in layer.pieces.iter().enumerate() {
                let z = precision.qmatmul(
                    (&h, prev_id),
                    (piece.weights.prop(wf)?, w_id),
                    Some((piece.bias.prop(bf)?, b_id)),
                    z_id,
                )?;
                match best.as_mut() {
                    None => best = Some(z),
                    Some(b) => {
                        for ((bv, a), &zv) in b.as_mut_slice().iter_mut().zip(arg.iter_mut()).zip(z.as_slice()) {
                            if zv > *bv {
                                *bv = zv;
                                *a = j as u8;
                            }
                        }
                    }
                }
            }
            let mut out = best.expect("k >= 1");
            if train && config.hidden_dropout > 0.0 {
                let mask = dropout_mask(rng, batch, layer.units, config.hidden_dropout)?;
                out = out.mul(&mask)?;
                masks.push(Some(mask));
            } else {
                masks.push(None);
            }
            activations.push(std::mem::replace(&mut h, precision.quantize(o_id, &out)?));
            argmaxes.push(arg);
            prev_id = o_id;
        }

        let l = output.index;
        let (w_id, b_id) = (gid(l, TensorRole::Weights), gid(l, TensorRole::Bias));
        let logits = precision.qmatmul(
            (&h, prev_id),
            (output.weights.prop(precision.prop_format(w_id))?, w_id),
            Some((output.bias.prop(precision.prop_format(b_id))?, b_id)),
            gid(l, TensorRole::WeightedSum),
        )?;
        activations.push(h);
        let probs = softmax(&logits);
        Ok(ForwardTrace {
            activations,
            masks,
            argmax: argmaxes,
            logits,
            probs,
        })
    }

    /// Gradients of the mean negative log-likelihood.
    pub fn backward(&mut self, trace: &ForwardTrace, labels: &[u8]) -> Result<Gradients> {
        let depth = self.hidden.len();
        if trace.activations.len() != depth + 1 || trace.argmax.len() != depth || trace.masks.len() != depth + 1 {
            return Err(Error::MissingState("forward trace does not match the network"));
        }
        let batch = labels.len();
        if trace.probs.rows() != batch {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {}",
                batch,
                trace.probs.rows()
            )));
        }
        let classes = self.classes;
        let Network {
            hidden,
            output,
            precision,
            ..
        } = self;

        let mut dlogits = trace.probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            if y as usize >= classes {
                return Err(Error::InvalidArgument(format!("label {y} outside [0, {classes})")));
            }
            let v = dlogits.get(r, y as usize);
            dlogits.set(r, y as usize, v - 1.0);
        }
        let dlogits = dlogits.scale(1.0 / batch as f64);

        let l = output.index;
        let dz = precision.quantize(gid(l, TensorRole::GradWeightedSum), &dlogits)?;
        let h_last = &trace.activations[depth];
        let out_grad = ParamGrad {
            weights: precision.qmatmul(
                (&h_last.transpose(), gid(depth, TensorRole::Output)),
                (&dz, gid(l, TensorRole::GradWeightedSum)),
                None,
                gid(l, TensorRole::GradWeights),
            )?,
            bias: precision.quantize(gid(l, TensorRole::GradBias), &dz.column_sums())?,
        };
        let w_id = gid(l, TensorRole::Weights);
        let mut dh = precision.qmatmul(
            (&dz, gid(l, TensorRole::GradWeightedSum)),
            (&output.weights.prop(precision.prop_format(w_id))?.transpose(), w_id),
            None,
            gid(depth, TensorRole::GradOutput),
        )?;

        let mut hidden_grads: Vec<Vec<ParamGrad>> = vec![Vec::new(); depth];
        for (li, layer) in hidden.iter().enumerate().rev() {
            let l = layer.index;
            if let Some(mask) = &trace.masks[l] {
                dh = dh.mul(mask)?;
            }
            let gz_id = gid(l, TensorRole::GradWeightedSum);
            let arg = &trace.argmax[li];
            let k = layer.pieces.len();
            let mut routed: Vec<Matrix> = (0..k).map(|_| Matrix::zeros(batch, layer.units)).collect();
            for (idx, (&g, &a)) in dh.as_slice().iter().zip(arg.iter()).enumerate() {
                routed[a as usize].as_mut_slice()[idx] = g;
            }
            let routed: Vec<Matrix> = routed
                .iter()
                .map(|m| precision.quantize(gz_id, m))
                .collect::<Result<_>>()?;
            let input_t = trace.activations[l - 1].transpose();
            let in_id = gid(l - 1, TensorRole::Output);
            for dz_j in &routed {
                hidden_grads[li].push(ParamGrad {
                    weights: precision.qmatmul(
                        (&input_t, in_id),
                        (dz_j, gz_id),
                        None,
                        gid(l, TensorRole::GradWeights),
                    )?,
                    bias: precision.quantize(gid(l, TensorRole::GradBias), &dz_j.column_sums())?,
                });
            }
            if l > 1 {
                let w_id = gid(l, TensorRole::Weights);
                let wf = precision.prop_format(w_id);
                let wts: Vec<Matrix> = layer
                    .pieces
                    .iter()
                    .map(|p| p.weights.prop(wf).map(Matrix::transpose))
                    .collect::<Result<_>>()?;
                let terms: Vec<(&Matrix, GroupId, &Matrix, GroupId)> = routed
                    .iter()
                    .zip(&wts)
                    .map(|(dz_j, wt)| (dz_j, gz_id, wt, w_id))
                    .collect();
                dh = precision.qmatmul_sum(&terms, gid(l - 1, TensorRole::GradOutput))?;
            }
        }
        Ok(Gradients {
            hidden: hidden_grads,
            output: out_grad,
        })
    }

    /// One momentum SGD step on every master, followed by max-norm projection
    /// of weight columns and a re-sync of the propagation copies.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
        let flat = grads.flatten();
        let max_norm = self.config.max_norm;
        let precision = self.precision.clone();
        let params = self.parameters_mut();
        if params.len() != flat.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                flat.len(),
                params.len()
            )));
        }
        for ((id, p), g) in params.into_iter().zip(flat) {
            let limit = if id.role == TensorRole::Weights { max_norm } else { None };
            p.sgd_update(g, lr, momentum, precision.update_format(id), limit, &id.to_string())?;
        }
        self.sync_all()
    }

    /// Mean negative log-likelihood without dropout and without touching
    /// overflow statistics.
    pub fn loss(&mut self, x: &Matrix, labels: &[u8]) -> Result<f64> {
        self.precision.set_recording(false);
        let trace = self.forward(x, Mode::Eval, &mut Rng::new(0));
        self.precision.set_recording(true);
        let trace = trace?;
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            total -= trace.probs.get(r, y as usize).ln();
        }
        Ok(total / labels.len() as f64)
    }

    /// Argmax class per row, evaluated without dropout or statistics.
    pub fn predict(&mut self, x: &Matrix) -> Result<Vec<usize>> {
        self.precision.set_recording(false);
        let trace = self.forward(x, Mode::Eval, &mut Rng::new(0));
        self.precision.set_recording(true);
        let trace = trace?;
        Ok((0..trace.probs.rows()).map(|r| argmax(trace.probs.row(r))).collect())
    }

    /// Applies the scaling policy, re-rounds masters onto the new update grids
    /// and re-syncs. Returns the exponent changes.
    pub fn apply_scaling_policy(&mut self) -> Result<Vec<(GroupId, i32)>> {
        let changes = self.precision.apply_policy();
        if changes.iter().any(|&(_, s)| s != 0) {
            self.requantize_masters()?;
        }
        self.sync_all()?;
        // the re-sync recorded weight statistics under the new exponents;
        // the next window starts clean
        self.precision.bank_mut().reset_counters();
        Ok(changes)
    }
}
