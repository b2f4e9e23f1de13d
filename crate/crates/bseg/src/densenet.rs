//! Fully convolutional DenseNet encoder–decoder.
//!
//! The network is built from a declarative [`NetworkSpec`]: a stem
//! convolution, a down path of dense blocks and transition-down units, a
//! bottleneck, an up path of transition-up units and dense blocks fed by
//! skip connections, and a terminal 1x1 classifier with per-pixel softmax.
//!
//! Each dense-block module is batch norm -> ReLU -> 3x3 conv -> dropout and
//! concatenates its output with its input. Down-path blocks hand their full
//! concatenation to the skip and the transition; the bottleneck and up-path
//! blocks forward only their newly produced feature maps, except the final
//! block whose input is concatenated back in before the classifier.

use std::collections::HashMap;

use crate::rng::{self, domain, CounterRng, RngKey};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::ops::{BatchNormMode, BnState, Padding};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Epsilon used by every batch-norm layer in the network.
pub const BN_EPS: f64 = 1e-5;

/// Declarative description of one FC-DenseNet.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Module counts per dense block: down path, bottleneck, up path.
    /// Must have odd length; the number of pooling stages is `(len - 1) / 2`.
    pub db_layer_counts: Vec<usize>,
    /// Feature maps added by each dense-block module.
    pub growth_rate: usize,
    /// Filters extracted by the stem convolution.
    pub stem_filters: usize,
    /// Dropout probability for every module and transition-down unit;
    /// zero yields the deterministic benchmark network.
    pub dropout_p: f64,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl NetworkSpec {
    /// The configuration used for the two binary tasks: blocks
    /// `[2,3,4,5,6,8,6,5,4,3,2]`, growth rate 16, 48 stem filters.
    pub fn models_1_2(num_classes: usize, input_channels: usize) -> Self {
        NetworkSpec {
            db_layer_counts: vec![2, 3, 4, 5, 6, 8, 6, 5, 4, 3, 2],
            growth_rate: 16,
            stem_filters: 48,
            dropout_p: 0.5,
            num_classes,
            input_channels,
        }
    }

    /// The deeper multi-class configuration: `[4,5,7,10,12,15,12,10,7,5,4]`.
    pub fn model_3(num_classes: usize, input_channels: usize) -> Self {
        NetworkSpec {
            db_layer_counts: vec![4, 5, 7, 10, 12, 15, 12, 10, 7, 5, 4],
            growth_rate: 16,
            stem_filters: 48,
            dropout_p: 0.5,
            num_classes,
            input_channels,
        }
    }

    /// Two-pool profile small enough for CI and desk experiments.
    pub fn tiny(num_classes: usize, input_channels: usize) -> Self {
        NetworkSpec {
            db_layer_counts: vec![1, 2, 2, 2, 1],
            growth_rate: 4,
            stem_filters: 8,
            dropout_p: 0.5,
            num_classes,
            input_channels,
        }
    }

    /// Identical architecture with all dropout removed.
    pub fn benchmark(&self) -> Self {
        NetworkSpec {
            dropout_p: 0.0,
            ..self.clone()
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn with_input_channels(mut self, c: usize) -> Self {
        self.input_channels = c;
        self
    }

    /// Number of pooling stages (and transition-up stages).
    pub fn pools(&self) -> usize {
        (self.db_layer_counts.len() - 1) / 2
    }

    /// Input spatial dimensions must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.pools()
    }

    pub fn validate(&self) -> Result<()> {
        if self.db_layer_counts.is_empty() || self.db_layer_counts.len().is_multiple_of(2) {
            return Err(Error::Spec(format!(
                "db_layer_counts must have odd length, got {}",
                self.db_layer_counts.len()
            )));
        }
        if self.db_layer_counts.contains(&0) {
            return Err(Error::Spec("dense blocks need at least one module".into()));
        }
        if self.growth_rate == 0 {
            return Err(Error::Spec("growth_rate must be positive".into()));
        }
        if self.stem_filters == 0 {
            return Err(Error::Spec("stem_filters must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Spec("input_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Spec(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Serialize to the flat text form used in checkpoint headers.
    pub fn to_header(&self) -> String {
        let counts: Vec<String> = self.db_layer_counts.iter().map(|m| m.to_string()).collect();
        format!(
            "db_layer_counts={}\ngrowth_rate={}\nstem_filters={}\ndropout_p={}\nnum_classes={}\ninput_channels={}\n",
            counts.join(","),
            self.growth_rate,
            self.stem_filters,
            self.dropout_p,
            self.num_classes,
            self.input_channels
        )
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("spec header", format!("missing '=' in {line:?}")))?;
            fields.insert(key.trim(), value.trim());
        }
        let get = |key: &str| -> Result<&str> {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| Error::format("spec header", format!("missing key {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::format("spec header", format!("bad integer for {key}")))
        };
        let db_layer_counts = get("db_layer_counts")?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::format("spec header", "bad db_layer_counts entry"))
            })
            .collect::<Result<Vec<usize>>>()?;
        let spec = NetworkSpec {
            db_layer_counts,
            growth_rate: parse_usize("growth_rate")?,
            stem_filters: parse_usize("stem_filters")?,
            dropout_p: get("dropout_p")?
                .parse()
                .map_err(|_| Error::format("spec header", "bad dropout_p"))?,
            num_classes: parse_usize("num_classes")?,
            input_channels: parse_usize("input_channels")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// How a forward pass treats batch-norm statistics and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics, keyed dropout at the given global step.
    Train { seed: u64, step: u64 },
    /// Running statistics, no dropout; never consults the RNG.
    Deterministic,
    /// Running statistics with keyed dropout: one stochastic posterior sample.
    McSample { seed: u64, sample: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Running statistics are state, not optimizer targets.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub id: String,
    pub kind: ParamKind,
    pub tensor: Tensor<S>,
}

/// All parameters and batch-norm state of one network, in a deterministic
/// schema order derived from the [`NetworkSpec`].
#[derive(Debug, Clone)]
pub struct NetworkParams<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> NetworkParams<S> {
    pub(crate) fn from_entries(entries: Vec<ParamEntry<S>>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        NetworkParams { entries, index }
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Result<&Tensor<S>> {
        self.index
            .get(id)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {id}")))
    }

    pub fn entry_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {id}")))
    }

    pub fn set_tensor(&mut self, index: usize, tensor: Tensor<S>) {
        debug_assert_eq!(self.entries[index].tensor.shape(), tensor.shape());
        self.entries[index].tensor = tensor;
    }

    /// Indices of optimizer-visible entries, in schema order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.tensor.numel())
            .sum()
    }

    fn bn_state(&self, prefix: &str) -> Result<BnState<S>> {
        Ok(BnState {
            mean: self.get(&format!("{prefix}.bn.mean"))?.data().to_vec(),
            var: self.get(&format!("{prefix}.bn.var"))?.data().to_vec(),
        })
    }
}

/// Declared identity, role, and shape of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamDecl {
    pub id: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

fn bn_decls(prefix: &str, channels: usize, out: &mut Vec<ParamDecl>) {
    for (suffix, kind) in [
        ("bn.gamma", ParamKind::BnGamma),
        ("bn.beta", ParamKind::BnBeta),
        ("bn.mean", ParamKind::BnRunningMean),
        ("bn.var", ParamKind::BnRunningVar),
    ] {
        out.push(ParamDecl {
            id: format!("{prefix}.{suffix}"),
            kind,
            shape: vec![channels],
        });
    }
}

fn conv_decls(
    prefix: &str,
    kh: usize,
    cin: usize,
    cout: usize,
    bias: bool,
    out: &mut Vec<ParamDecl>,
) {
    out.push(ParamDecl {
        id: format!("{prefix}.conv.w"),
        kind: ParamKind::Weight,
        shape: vec![kh, kh, cin, cout],
    });
    if bias {
        out.push(ParamDecl {
            id: format!("{prefix}.conv.b"),
            kind: ParamKind::Bias,
            shape: vec![cout],
        });
    }
}

/// Enumerate every parameter in execution order. This is the single
/// source of truth for checkpoint layout and initialization.
pub fn schema(spec: &NetworkSpec) -> Vec<ParamDecl> {
    let mut out = Vec::new();
    let k = spec.growth_rate;
    let pools = spec.pools();
    conv_decls(
        "stem",
        3,
        spec.input_channels,
        spec.stem_filters,
        true,
        &mut out,
    );

    let block_decls = |block: usize, cin: usize, m: usize, out: &mut Vec<ParamDecl>| {
        for j in 0..m {
            let c_in_j = cin + j * k;
            let prefix = format!("db{block}.mod{j}");
            bn_decls(&prefix, c_in_j, out);
            conv_decls(&prefix, 3, c_in_j, k, true, out);
        }
    };

    let mut c = spec.stem_filters;
    let mut skips = Vec::new();
    for i in 0..pools {
        let block = i + 1;
        let m = spec.db_layer_counts[i];
        block_decls(block, c, m, &mut out);
        let full = c + m * k;
        skips.push(full);
        let td = format!("td{}", i + 1);
        bn_decls(&td, full, &mut out);
        conv_decls(&td, 1, full, full, true, &mut out);
        c = full;
    }

    let bottleneck = pools + 1;
    let m_b = spec.db_layer_counts[pools];
    block_decls(bottleneck, c, m_b, &mut out);
    let mut new_prev = m_b * k;
    let mut pre_classifier = c + m_b * k;

    for i in 0..pools {
        let block = pools + 2 + i;
        let m = spec.db_layer_counts[pools + 1 + i];
        out.push(ParamDecl {
            id: format!("tu{}.conv.w", i + 1),
            kind: ParamKind::Weight,
            shape: vec![3, 3, new_prev, new_prev],
        });
        let skip = skips[pools - 1 - i];
        let db_in = new_prev + skip;
        block_decls(block, db_in, m, &mut out);
        new_prev = m * k;
        pre_classifier = db_in + m * k;
    }

    conv_decls(
        "classifier",
        1,
        pre_classifier,
        spec.num_classes,
        true,
        &mut out,
    );
    out
}

/// Total trainable scalar count implied by a spec.
pub fn parameter_count(spec: &NetworkSpec) -> usize {
    schema(spec)
        .iter()
        .filter(|d| d.kind.trainable())
        .map(|d| d.shape.iter().product::<usize>())
        .sum()
}

/// Initialize parameters: He-uniform conv kernels, zero biases and betas,
/// unit gammas, fresh running statistics. Deterministic in `init_seed`.
pub fn build<S: Scalar>(spec: &NetworkSpec, init_seed: u64) -> Result<NetworkParams<S>> {
    spec.validate()?;
    let decls = schema(spec);
    let mut entries = Vec::with_capacity(decls.len());
    for (idx, decl) in decls.into_iter().enumerate() {
        let tensor = match decl.kind {
            ParamKind::Weight => {
                let fan_in: usize = decl.shape[..3].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                let mut rng = CounterRng::from_parts(init_seed, domain::INIT, idx as u64);
                Tensor::from_fn(decl.shape.clone(), |_| {
                    S::from_f64(rng.range_f64(-limit, limit))
                })
            }
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => {
                Tensor::zeros(decl.shape.clone())
            }
            ParamKind::BnGamma | ParamKind::BnRunningVar => {
                Tensor::filled(decl.shape.clone(), S::ONE)
            }
        };
        entries.push(ParamEntry {
            id: decl.id,
            kind: decl.kind,
            tensor,
        });
    }
    Ok(NetworkParams::from_entries(entries))
}

/// Deferred batch-norm running-stat update produced by a train-mode pass.
#[derive(Debug, Clone)]
pub struct BnUpdate<S: Scalar> {
    pub mean_index: usize,
    pub var_index: usize,
    pub state: BnState<S>,
}

impl<S: Scalar> BnUpdate<S> {
    pub fn apply(self, params: &mut NetworkParams<S>) {
        let mean_len = self.state.mean.len();
        let var_len = self.state.var.len();
        params.set_tensor(
            self.mean_index,
            Tensor::new(vec![mean_len], self.state.mean).expect("bn state shape"),
        );
        params.set_tensor(
            self.var_index,
            Tensor::new(vec![var_len], self.state.var).expect("bn state shape"),
        );
    }
}

/// Everything a forward pass produced, including the graph for backward.
pub struct ForwardPass<S: Scalar> {
    pub graph: Graph<S>,
    /// Softmax output node, shaped like the input with `num_classes` channels.
    pub output: NodeId,
    /// Graph leaf per parameter entry; `None` for entries the pass did not
    /// lift into the graph (running statistics).
    pub param_nodes: Vec<Option<NodeId>>,
    /// Running-stat updates to apply after a train-mode pass.
    pub bn_updates: Vec<BnUpdate<S>>,
    /// `(layer id, output shape)` in execution order.
    pub trace: Vec<(String, Vec<usize>)>,
}

struct Runner<'a, S: Scalar> {
    spec: &'a NetworkSpec,
    params: &'a NetworkParams<S>,
    graph: Graph<S>,
    mode: ForwardMode,
    dropout_site: u64,
    param_nodes: Vec<Option<NodeId>>,
    bn_updates: Vec<BnUpdate<S>>,
    trace: Vec<(String, Vec<usize>)>,
    with_grads: bool,
}

impl<S: Scalar> Runner<'_, S> {
    fn param_node(&mut self, id: &str) -> Result<NodeId> {
        let index = self.params.entry_index(id)?;
        if let Some(node) = self.param_nodes[index] {
            return Ok(node);
        }
        let entry = &self.params.entries()[index];
        let requires = self.with_grads && entry.kind.trainable();
        let node = self.graph.leaf(entry.tensor.clone(), requires);
        self.param_nodes[index] = Some(node);
        Ok(node)
    }

    fn record(&mut self, id: impl Into<String>, node: NodeId) {
        self.trace
            .push((id.into(), self.graph.value(node).shape().to_vec()));
    }

    fn dropout_key(&mut self) -> Option<RngKey> {
        let site = self.dropout_site;
        self.dropout_site += 1;
        match self.mode {
            ForwardMode::Deterministic => None,
            ForwardMode::Train { seed, step } => {
                Some(RngKey::new(rng::mix(&[seed, domain::DROPOUT]), site, step))
            }
            ForwardMode::McSample { seed, sample } => Some(RngKey::new(
                rng::mix(&[seed, domain::MC_SAMPLE]),
                site,
                sample,
            )),
        }
    }

    /// The modular stacked layer: BN -> ReLU -> conv -> dropout.
    fn stacked_module(&mut self, x: NodeId, prefix: &str, padding: Padding) -> Result<NodeId> {
        let gamma = self.param_node(&format!("{prefix}.bn.gamma"))?;
        let beta = self.param_node(&format!("{prefix}.bn.beta"))?;
        let state = self.params.bn_state(prefix)?;
        let bn_mode = match self.mode {
            ForwardMode::Train { .. } => BatchNormMode::Train,
            _ => BatchNormMode::Infer,
        };
        let (y, new_state) = self
            .graph
            .batch_norm(x, gamma, beta, bn_mode, &state, BN_EPS)?;
        if let Some(state) = new_state {
            self.bn_updates.push(BnUpdate {
                mean_index: self.params.entry_index(&format!("{prefix}.bn.mean"))?,
                var_index: self.params.entry_index(&format!("{prefix}.bn.var"))?,
                state,
            });
        }
        let y = self.graph.relu(y);
        let w = self.param_node(&format!("{prefix}.conv.w"))?;
        let b = self.param_node(&format!("{prefix}.conv.b"))?;
        let mut y = self.graph.conv2d(y, w, b, padding, 1)?;
        let p = self.spec.dropout_p;
        let key = self.dropout_key();
        if p > 0.0 {
            if let Some(key) = key {
                y = self.graph.dropout(y, p, key)?;
            }
        }
        Ok(y)
    }

    /// Dense block: returns the full concatenation and the new features.
    fn dense_block(&mut self, x: NodeId, block: usize, m: usize) -> Result<(NodeId, NodeId)> {
        let mut acc = x;
        let mut features = Vec::with_capacity(m);
        for j in 0..m {
            self.record(format!("db{block}.mod{j}.in"), acc);
            let feat = self.stacked_module(acc, &format!("db{block}.mod{j}"), Padding::Same)?;
            features.push(feat);
            acc = self.graph.concat_channels(&[acc, feat])?;
        }
        let new = if features.len() == 1 {
            features[0]
        } else {
            self.graph.concat_channels(&features)?
        };
        self.record(format!("db{block}.full"), acc);
        self.record(format!("db{block}.new"), new);
        Ok((acc, new))
    }

    fn transition_down(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let y = self.stacked_module(x, &format!("td{index}"), Padding::Valid)?;
        let y = self.graph.max_pool2d(y)?;
        self.record(format!("td{index}"), y);
        Ok(y)
    }

    fn transition_up(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let w = self.param_node(&format!("tu{index}.conv.w"))?;
        let y = self.graph.transposed_conv2d(x, w)?;
        self.record(format!("tu{index}"), y);
        Ok(y)
    }

    fn run(mut self, input: &Tensor<S>) -> Result<ForwardPass<S>> {
        let dims = input.spatial_dims()?;
        if dims.channels != self.spec.input_channels {
            return Err(Error::dim(format!(
                "input has {} channels, spec expects {}",
                dims.channels, self.spec.input_channels
            )));
        }
        let divisor = self.spec.spatial_divisor();
        if dims.height % divisor != 0 || dims.width % divisor != 0 {
            return Err(Error::dim(format!(
                "input {}x{} not divisible by 2^pools = {divisor}",
                dims.height, dims.width
            )));
        }

        let pools = self.spec.pools();
        let x = self.graph.leaf(input.clone(), false);
        let w = self.param_node("stem.conv.w")?;
        let b = self.param_node("stem.conv.b")?;
        let mut current = self.graph.conv2d(x, w, b, Padding::Same, 1)?;
        self.record("stem", current);

        let mut skips = Vec::with_capacity(pools);
        for i in 0..pools {
            let m = self.spec.db_layer_counts[i];
            let (full, _) = self.dense_block(current, i + 1, m)?;
            skips.push(full);
            current = self.transition_down(full, i + 1)?;
        }

        let m_b = self.spec.db_layer_counts[pools];
        let (bottleneck_full, bottleneck_new) = self.dense_block(current, pools + 1, m_b)?;

        let final_full = if pools == 0 {
            bottleneck_full
        } else {
            let mut new_prev = bottleneck_new;
            let mut final_full = bottleneck_full;
            for i in 0..pools {
                let up = self.transition_up(new_prev, i + 1)?;
                let skip = skips[pools - 1 - i];
                let db_in = self.graph.concat_channels(&[up, skip])?;
                let block = pools + 2 + i;
                let m = self.spec.db_layer_counts[pools + 1 + i];
                let (full, new) = self.dense_block(db_in, block, m)?;
                new_prev = new;
                final_full = full;
            }
            final_full
        };
        self.record("classifier.in", final_full);

        let w = self.param_node("classifier.conv.w")?;
        let b = self.param_node("classifier.conv.b")?;
        let logits = self.graph.conv2d(final_full, w, b, Padding::Valid, 1)?;
        let output = self.graph.softmax_channels(logits)?;
        self.record("output", output);

        Ok(ForwardPass {
            graph: self.graph,
            output,
            param_nodes: self.param_nodes,
            bn_updates: self.bn_updates,
            trace: self.trace,
        })
    }
}

/// Full forward pass keeping the compute graph, for training and probing.
pub fn forward_pass<S: Scalar>(
    params: &NetworkParams<S>,
    spec: &NetworkSpec,
    input: &Tensor<S>,
    mode: ForwardMode,
) -> Result<ForwardPass<S>> {
    spec.validate()?;
    let runner = Runner {
        spec,
        params,
        graph: Graph::new(),
        mode,
        dropout_site: 0,
        param_nodes: vec![None; params.entries().len()],
        bn_updates: Vec::new(),
        trace: Vec::new(),
        with_grads: matches!(mode, ForwardMode::Train { .. }),
    };
    runner.run(input)
}

/// Convenience forward returning just the softmax map.
pub fn forward<S: Scalar>(
    params: &NetworkParams<S>,
    spec: &NetworkSpec,
    input: &Tensor<S>,
    mode: ForwardMode,
) -> Result<Tensor<S>> {
    let mut pass = forward_pass(params, spec, input, mode)?;
    Ok(pass.graph.take_value(pass.output))
}
