//! The assembled network.
//!
//! For each stage `s` of `D`: an adjacency per view (Gaussian generator on
//! stage 0, then either sliced from the previous stage or regenerated), a
//! dense convolution block, dropout in training mode, and union pooling. The
//! survivors' rows from every post-pool stage are stacked side by side, passed
//! through a linear readout and max-pooled over nodes. The classifier sees
//! `[h0 ; readout]`, where `h0` never enters the graph.

mod config;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, TokenSequence};
use crate::diffcore::{cross_entropy, grad_check, DenseArray, GradCheckReport, NodeId, ParamGrads, ParamStore, Tape};
use crate::dtwpool::{self, softdtw, PoolStage, PoolTrace};
use crate::error::{Error, Result};
use crate::gaussian_graph::{self, AdjacencyNorm};
use crate::graphconv::{self, ConvShape};

pub use config::ModelConfig;
pub use train::{evaluate, train, train_from, EpochReport, MetricsLog, SplitMetrics, TrainOutcome};

pub const CLS_PARAM: &str = "cls.start";
pub const READOUT_W: &str = "readout.w";
pub const READOUT_B: &str = "readout.b";
pub const CLASSIFIER_W: &str = "classifier.w";
pub const CLASSIFIER_B: &str = "classifier.b";

pub fn attention_param_names(stage: usize, view: usize) -> (String, String) {
    (format!("attn.s{stage}.v{view}.query.w"), format!("attn.s{stage}.v{view}.key.w"))
}

/// Fresh parameters for `config`, seeded by `config.seed`.
pub fn init_params(config: &ModelConfig) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let (d, g, n) = (config.width, config.gaussian_width, config.views);
    let edge_stages = if config.regenerate_edges { config.conv_stages() } else { 1 };
    for s in 0..edge_stages {
        let w_in = if s == 0 { config.input_width } else { d };
        if config.attention_edges {
            for v in 0..n {
                let (q, k) = attention_param_names(s, v);
                store.insert_xavier(q, w_in, g, &mut rng)?;
                store.insert_xavier(k, w_in, g, &mut rng)?;
            }
        } else {
            gaussian_graph::init_encoders(&mut store, s, n, w_in, g, &mut rng)?;
        }
    }
    for s in 0..config.conv_stages() {
        let shape = conv_shape(config, s);
        graphconv::init_block(&mut store, s, &shape, &mut rng)?;
    }
    if config.pool_stages > 0 {
        let stages: Vec<Option<usize>> = if config.per_stage_pool {
            (0..config.pool_stages).map(Some).collect()
        } else {
            vec![None]
        };
        for s in stages {
            let (w, b) = dtwpool::pool_param_names(s);
            store.insert_xavier(w, d, 1, &mut rng)?;
            store.insert_zeros(b, &[1])?;
        }
    }
    store.insert_xavier(READOUT_W, config.readout_width(), d, &mut rng)?;
    store.insert_zeros(READOUT_B, &[d])?;
    store.insert_xavier(CLASSIFIER_W, config.input_width + d, config.classes, &mut rng)?;
    store.insert_zeros(CLASSIFIER_B, &[config.classes])?;
    if config.trainable_cls {
        store.insert_zeros(CLS_PARAM, &[1, config.input_width])?;
    }
    Ok(store)
}

fn conv_shape(config: &ModelConfig, stage: usize) -> ConvShape {
    ConvShape {
        input_width: if stage == 0 { config.input_width } else { config.width },
        width: config.width,
        sublayers: config.sublayers,
        views: config.views,
    }
}

/// Plain-value result of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    pub logits: Vec<f64>,
    pub h_final: Vec<f64>,
    /// `V^1`: output of the first convolution over every node, original order.
    pub first_conv: DenseArray,
    /// Original positions fed to the graph (`1..=T+1`; SEP included).
    pub initial_positions: Vec<usize>,
    pub trace: PoolTrace,
}

impl ForwardRecord {
    pub fn realized_ratios(&self) -> Vec<f64> {
        self.trace.stages.iter().map(|s| s.realized_ratio).collect()
    }

    pub fn mean_realized_ratio(&self) -> f64 {
        let r = self.realized_ratios();
        if r.is_empty() {
            1.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }

    /// Positions alive after the last stage (all positions when `D = 0`).
    pub fn final_positions(&self) -> &[usize] {
        self.trace.final_positions().unwrap_or(&self.initial_positions)
    }

    /// Argmax of the logits; ties go to the smallest class.
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The two loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cse: f64,
    /// Unweighted SoftDTW between `V^1` and `V^D`; zero without pooling.
    pub dtw: f64,
}

struct Graph {
    logits: NodeId,
    h_final: NodeId,
    first_conv: NodeId,
    last_pool: Option<NodeId>,
    initial_positions: Vec<usize>,
    trace: PoolTrace,
}

fn check_example(example: &TokenSequence, config: &ModelConfig) -> Result<()> {
    let e = &example.embeddings;
    if e.rank() != 2 || e.cols() != config.input_width {
        return Err(Error::config(
            "input_width",
            format!(
                "example `{}` has embedding shape {:?}, configured width is {}",
                example.id,
                e.shape(),
                config.input_width
            ),
        ));
    }
    if e.rows() < 3 {
        return Err(Error::Input(format!(
            "example `{}` has no tokens besides CLS and SEP",
            example.id
        )));
    }
    Ok(())
}

fn dropout(tape: &mut Tape, x: NodeId, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let shape = tape.shape(x).to_vec();
            let n = shape.iter().product();
            let mask = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
            tape.mul_const(x, DenseArray::new(shape, mask)?)
        }
        _ => Ok(x),
    }
}

/// Pre-normalization edge scores and the adjacency derived from them, one
/// node per view.
struct Edges {
    raw: Vec<NodeId>,
    adjacency: Vec<NodeId>,
}

fn edge_norm(config: &ModelConfig) -> AdjacencyNorm {
    if config.attention_edges {
        AdjacencyNorm::Softmax
    } else {
        config.adjacency_norm
    }
}

fn normalize(tape: &mut Tape, raw: Vec<NodeId>, config: &ModelConfig) -> Result<Edges> {
    let adjacency = raw
        .iter()
        .map(|&r| gaussian_graph::normalize_on_tape(tape, r, edge_norm(config)))
        .collect::<Result<_>>()?;
    Ok(Edges { raw, adjacency })
}

fn fresh_edges(tape: &mut Tape, x: NodeId, stage: usize, config: &ModelConfig) -> Result<Edges> {
    let raw = if config.attention_edges {
        let scale = 1.0 / (config.gaussian_width as f64).sqrt();
        (0..config.views)
            .map(|v| {
                let (q, k) = attention_param_names(stage, v);
                let (q, k) = (tape.param(&q)?, tape.param(&k)?);
                let q = tape.matmul(x, q)?;
                let k = tape.matmul(x, k)?;
                let scores = tape.matmul_nt(q, k)?;
                Ok(tape.scale(scores, scale))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let bank = gaussian_graph::encode_on_tape(tape, x, stage, config.views)?;
        bank.iter()
            .map(|&(mean, std)| tape.pairwise_kl(mean, std))
            .collect::<Result<Vec<_>>>()?
    };
    normalize(tape, raw, config)
}

/// Restricts the edges to `keep` and renormalizes. Slicing the raw scores and
/// normalizing again equals renormalizing the sliced adjacency rows, but
/// survives rows whose softmax mass sat entirely on dropped nodes.
fn slice_edges(tape: &mut Tape, edges: &Edges, keep: &[usize], config: &ModelConfig) -> Result<Edges> {
    let raw = edges
        .raw
        .iter()
        .map(|&r| tape.submatrix(r, keep, keep))
        .collect::<Result<Vec<_>>>()?;
    normalize(tape, raw, config)
}

fn build(tape: &mut Tape, example: &TokenSequence, config: &ModelConfig, mut rng: Option<&mut ChaCha8Rng>) -> Result<Graph> {
    check_example(example, config)?;
    let emb = &example.embeddings;
    let rows = emb.rows();
    let h0 = if config.trainable_cls {
        tape.param(CLS_PARAM)?
    } else {
        tape.constant(DenseArray::matrix(1, emb.cols(), emb.row(0).to_vec())?)
    };
    let initial_positions: Vec<usize> = (1..rows).collect();
    let v0 = DenseArray::matrix(rows - 1, emb.cols(), emb.values()[emb.cols()..].to_vec())?;
    let mut x = tape.constant(v0);
    let mut positions = initial_positions.clone();
    let mut edges = fresh_edges(tape, x, 0, config)?;
    let mut first_conv = None;
    let mut pooled: Vec<(NodeId, Vec<usize>)> = Vec::new();
    let mut trace = PoolTrace::default();

    for s in 0..config.conv_stages() {
        if s > 0 && config.regenerate_edges {
            edges = fresh_edges(tape, x, s, config)?;
        }
        let h = graphconv::conv_block_on_tape(tape, &edges.adjacency, x, s, config.sublayers, config.self_loops)?;
        let h = dropout(tape, h, config.dropout, rng.as_deref_mut())?;
        if s == 0 {
            first_conv = Some(h);
        }
        if config.pool_stages == 0 {
            x = h;
            break;
        }
        let (w, b) = dtwpool::pool_param_names(config.per_stage_pool.then_some(s));
        let (w, b) = (tape.param(&w)?, tape.param(&b)?);
        let scores = dtwpool::sag_scores_on_tape(tape, &edges.adjacency, h, w, b, config.self_loops)?;
        let p = dtwpool::union_pool_on_tape(tape, h, &scores, config.ratio)?;
        positions = p.survivors.iter().map(|&i| positions[i]).collect();
        trace.stages.push(PoolStage {
            positions: positions.clone(),
            features: tape.value(p.features).clone(),
            realized_ratio: p.realized_ratio,
        });
        pooled.push((p.features, positions.clone()));
        if s + 1 < config.conv_stages() && !config.regenerate_edges {
            edges = slice_edges(tape, &edges, &p.survivors, config)?;
        }
        x = p.features;
    }

    let stacked = if pooled.is_empty() {
        x
    } else {
        let last = positions.clone();
        let parts = pooled
            .iter()
            .map(|(node, pos)| {
                // survivors of the last stage are a subset of every earlier stage
                let rows: Vec<usize> = last.iter().map(|p| pos.binary_search(p).expect("nested stages")).collect();
                tape.gather_rows(*node, &rows)
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)?
        }
    };
    let (rw, rb) = (tape.param(READOUT_W)?, tape.param(READOUT_B)?);
    let f = tape.linear(stacked, rw, rb)?;
    let f = tape.col_max(f)?;
    let h_final = tape.concat_cols(&[h0, f])?;
    let (cw, cb) = (tape.param(CLASSIFIER_W)?, tape.param(CLASSIFIER_B)?);
    let logits = tape.linear(h_final, cw, cb)?;
    Ok(Graph {
        logits,
        h_final,
        first_conv: first_conv.expect("at least one stage"),
        last_pool: pooled.last().map(|(n, _)| *n),
        initial_positions,
        trace,
    })
}

fn record(tape: &Tape, g: Graph) -> Result<ForwardRecord> {
    let logits = tape.value(g.logits).values().to_vec();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(ForwardRecord {
        logits,
        h_final: tape.value(g.h_final).values().to_vec(),
        first_conv: tape.value(g.first_conv).clone(),
        initial_positions: g.initial_positions,
        trace: g.trace,
    })
}

/// Forward pass. `train_rng` turns on dropout and drives its masks.
pub fn forward(
    example: &TokenSequence,
    params: &ParamStore,
    config: &ModelConfig,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardRecord> {
    let mut tape = Tape::new(params);
    let g = build(&mut tape, example, config, train_rng)?;
    record(&tape, g)
}

/// Cross entropy plus `lambda` times SoftDTW between `V^1` and `V^D`.
pub fn loss(record: &ForwardRecord, label: usize, config: &ModelConfig) -> Result<LossParts> {
    let cse = cross_entropy(&record.logits, label)?;
    let dtw = match record.trace.stages.last() {
        Some(last) => softdtw(&record.first_conv, &last.features, config.gamma)?,
        None => 0.0,
    };
    let total = if config.lambda == 0.0 { cse } else { cse + config.lambda * dtw };
    Ok(LossParts { total, cse, dtw })
}

/// Everything one training step needs from one example.
pub struct ExampleStep {
    pub loss: LossParts,
    pub grads: ParamGrads,
    pub record: ForwardRecord,
}

/// Forward, loss and reverse pass for one example.
pub fn loss_and_grads(
    example: &TokenSequence,
    params: &ParamStore,
    config: &ModelConfig,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<ExampleStep> {
    let mut tape = Tape::new(params);
    let g = build(&mut tape, example, config, train_rng)?;
    let cse = tape.cross_entropy(g.logits, example.label)?;
    let (total, dtw) = match g.last_pool {
        Some(last) => {
            let dtw = tape.soft_dtw(g.first_conv, last, config.gamma)?;
            let dtw_value = tape.value(dtw).values()[0];
            if config.lambda == 0.0 {
                (cse, dtw_value)
            } else {
                let weighted = tape.scale(dtw, config.lambda);
                (tape.add(cse, weighted)?, dtw_value)
            }
        }
        None => (cse, 0.0),
    };
    let parts = LossParts {
        total: tape.value(total).values()[0],
        cse: tape.value(cse).values()[0],
        dtw,
    };
    let grads = tape.backward(total)?;
    let grads = tape.param_grads(&grads);
    let record = record(&tape, g)?;
    Ok(ExampleStep { loss: parts, grads, record })
}

/// Checks that `params` were built for `config`.
pub fn check_params(params: &ParamStore, config: &ModelConfig) -> Result<()> {
    params.check_layout(&init_params(config)?)
}

/// One prediction per example with its record.
pub struct Prediction {
    pub label: usize,
    pub record: ForwardRecord,
}

pub fn predict(dataset: &Dataset, params: &ParamStore, config: &ModelConfig) -> Result<Vec<Prediction>> {
    if dataset.input_width != config.input_width {
        return Err(Error::config(
            "input_width",
            format!("data width {} but model width {}", dataset.input_width, config.input_width),
        ));
    }
    check_params(params, config)?;
    dataset
        .examples
        .iter()
        .map(|ex| {
            let record = forward(ex, params, config, None)?;
            Ok(Prediction {
                label: record.predicted(),
                record,
            })
        })
        .collect()
}

/// Model configuration used by the gradient-check harness: `T = 8`, `d = 16`,
/// `g = 8`, two views, two sub-layers, two pooling stages, `r = 0.5`.
pub fn tiny_config() -> ModelConfig {
    ModelConfig::tiny()
}

/// A random example of `tokens` tokens for `config`, drawn from `seed`.
pub fn random_example(config: &ModelConfig, tokens: usize, label: usize, seed: u64) -> TokenSequence {
    random_example_scaled(config, tokens, label, seed, 1.0)
}

/// Like [`random_example`] with embedding entries drawn from `[-scale, scale)`.
pub fn random_example_scaled(config: &ModelConfig, tokens: usize, label: usize, seed: u64, scale: f64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = tokens + 2;
    let values = (0..rows * config.input_width).map(|_| rng.random_range(-scale..scale)).collect();
    TokenSequence {
        id: format!("random-{seed}"),
        label,
        embeddings: DenseArray::matrix(rows, config.input_width, values).expect("consistent shape"),
        token_strings: None,
        spans: None,
        trigger_mask: None,
    }
}

/// Step used by [`check_gradients`].
pub const GRADCHECK_STEP: f64 = 3e-5;

/// A well-conditioned point for finite-difference checks: Xavier weights,
/// biases drawn from `U(-0.5, 0.5)` and token embeddings from `U(-0.3, 0.3)`.
///
/// Zero biases put many ReLU inputs and pooling gates right at zero, where
/// a central difference straddles a kink, and large embeddings saturate the
/// KL softmax so that true gradients fall below what an `f64` loss can
/// resolve by differencing.
pub fn gradcheck_instance(config: &ModelConfig, tokens: usize, seed: u64) -> Result<(ParamStore, TokenSequence)> {
    let mut params = init_params(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    for e in 0..params.len() {
        let entry = params.entry_mut(e);
        if entry.value.rank() == 1 {
            for v in entry.value.values_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let label = (seed as usize) % config.classes;
    Ok((params, random_example_scaled(config, tokens, label, seed, 0.3)))
}

/// Full-loss gradient check at [`gradcheck_instance`].
pub fn check_gradients(config: &ModelConfig, tokens: usize, seed: u64) -> Result<GradCheckReport> {
    check_gradients_with(config, tokens, seed, |_| {})
}

/// [`check_gradients`] with a hook that may rewrite the reverse-mode
/// gradients before comparison; used to confirm the checker catches a broken
/// backward pass.
pub fn check_gradients_with(
    config: &ModelConfig,
    tokens: usize,
    seed: u64,
    tamper: impl Fn(&mut ParamGrads),
) -> Result<GradCheckReport> {
    let (mut params, example) = gradcheck_instance(config, tokens, seed)?;
    grad_check(
        |p| {
            let mut s = loss_and_grads(&example, p, config, None)?;
            tamper(&mut s.grads);
            Ok((s.loss.total, s.grads))
        },
        &mut params,
        GRADCHECK_STEP,
    )
}
