//! Episodic meta-training: per episode, compute prototypes, build the
//! null-space projector, score queries, accumulate softmax cross-entropy,
//! and update θ and Φ jointly with Adam under a step-decay learning rate.
//!
//! Episode slot k is bound positionally to reference row k; reference
//! labels never change across a run. By default the projector is treated as
//! an episode constant during backpropagation (gradients still reach Φ
//! through the logits); the differentiate-projector mode backpropagates
//! through P = I - V(VᵀV)⁺Vᵀ instead.

use crate::embedding::{self, EmbeddingConfig, EmbeddingParams};
use crate::episodes::{Episode, EpisodeSource};
use crate::error::{MlnError, Result};
use crate::head::{self, GradientMode, HeadConfig, LogitMode, NullProjector, ReferenceBank};
use crate::num::linalg::DEFAULT_RANK_TOL;
use crate::num::matrix::{argmax, Matrix};
use crate::num::rng::RngStream;
use crate::num::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes: u64,
    /// Training way; higher than the evaluation way in the usual protocol.
    pub way: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub n_ref: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub gradient_mode: GradientMode,
    pub logit_mode: LogitMode,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 2000,
            way: 20,
            shots: 1,
            queries_per_class: 5,
            n_ref: 20,
            base_lr: 3e-3,
            decay_factor: 0.5,
            decay_interval: 2000,
            gradient_mode: GradientMode::default(),
            logit_mode: LogitMode::default(),
            normalize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn head_config(&self, dim: usize) -> HeadConfig {
        HeadConfig {
            dim,
            n_ref: self.n_ref,
            logit_mode: self.logit_mode,
            gradient_mode: self.gradient_mode,
            normalize: self.normalize,
        }
    }

    fn validate(&self, emb: &EmbeddingConfig) -> Result<()> {
        if self.way > self.n_ref {
            return Err(MlnError::InvalidConfig(format!(
                "training way {} exceeds reference count {}",
                self.way, self.n_ref
            )));
        }
        if emb.output_dim() <= self.way {
            return Err(MlnError::InvalidConfig(format!(
                "embedding dim {} must exceed training way {} for the projection space to exist",
                emb.output_dim(),
                self.way
            )));
        }
        Ok(())
    }
}

/// Learnable state: the embedding parameters θ and the reference bank Φ.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub emb_config: EmbeddingConfig,
    pub params: EmbeddingParams,
    pub bank: ReferenceBank,
}

/// Gradients mirroring [`Model`]'s learnable tensors.
pub struct ModelGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
    pub bank: Matrix,
}

pub struct EpisodeLoss {
    pub loss: f64,
    /// Per-query logits, one row per query in episode order.
    pub logits: Matrix,
}

struct LossGraph {
    tape: Tape,
    loss: NodeId,
    logits: NodeId,
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
    bank: NodeId,
}

/// Builds the differentiable loss graph for one episode. When `fixed_proj`
/// is given (or the gradient mode stops gradients at the projector), P
/// enters the graph as a constant.
fn build_loss_graph(
    model: &Model,
    episode: &Episode,
    head: &HeadConfig,
    fixed_proj: Option<&Matrix>,
) -> Result<LossGraph> {
    let way = episode.way;
    if way > model.bank.n_ref() {
        return Err(MlnError::BankTooSmall { n_ref: model.bank.n_ref(), way });
    }
    let dim = model.emb_config.output_dim();
    let mut tape = Tape::new();

    let nodes = embedding::params_on_tape(&mut tape, &model.params);
    let bank_leaf = tape.leaf(model.bank.refs.clone());

    // episode slot k <-> reference row k (positional binding)
    let mut sel = Matrix::zeros(way, model.bank.n_ref());
    for k in 0..way {
        sel.set(k, k, 1.0);
    }
    let sel = tape.constant(sel);
    let phi_ep = tape.matmul(sel, bank_leaf)?;

    let x_support = tape.constant(Matrix::from_rows(
        &episode.support.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>(),
    )?);
    let x_query = tape.constant(Matrix::from_rows(
        &episode.queries.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>(),
    )?);
    let e_support = embedding::embed_batch_on_tape(&mut tape, &nodes, x_support)?;
    let g_query = embedding::embed_batch_on_tape(&mut tape, &nodes, x_query)?;

    // prototypes as a constant averaging matrix applied to support embeddings
    let mut avg = Matrix::zeros(way, episode.support.len());
    let mut counts = vec![0usize; way];
    for (i, (_, slot)) in episode.support.iter().enumerate() {
        if *slot >= way {
            return Err(MlnError::Sampling(format!("slot {slot} out of range for way {way}")));
        }
        counts[*slot] += 1;
        avg.set(*slot, i, 1.0);
    }
    for (slot, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(MlnError::EmptyClassSlot { slot });
        }
        for i in 0..episode.support.len() {
            let v = avg.get(slot, i) / n as f64;
            avg.set(slot, i, v);
        }
    }
    let avg = tape.constant(avg);
    let protos = tape.matmul(avg, e_support)?;

    let (phi_hat, protos_hat) = if head.normalize {
        (tape.row_normalize(phi_ep)?, tape.row_normalize(protos)?)
    } else {
        (phi_ep, protos)
    };

    let proj = match (fixed_proj, head.gradient_mode) {
        (Some(p), _) => tape.constant(p.clone()),
        (None, GradientMode::StopGradientProjector) => {
            let refs_val = tape.value(phi_hat).clone();
            let protos_val = head::PrototypeSet { protos: tape.value(protos_hat).clone() };
            // inputs are already in the requested normalization state
            let errs = head::error_vectors(&refs_val, &protos_val, false)?;
            let p = head::build_projector(&errs, DEFAULT_RANK_TOL)?;
            tape.constant(p.projector)
        }
        (None, GradientMode::DifferentiateProjector) => {
            // V rows = C·φ̂ - ĝ with C = N_c·I - 1·1ᵀ
            let mut c = Matrix::zeros(way, way);
            for i in 0..way {
                for j in 0..way {
                    c.set(i, j, if i == j { way as f64 - 1.0 } else { -1.0 });
                }
            }
            let c = tape.constant(c);
            let bracket = tape.matmul(c, phi_hat)?;
            let v_rows = tape.sub(bracket, protos_hat)?;
            let v_rows_t = tape.transpose(v_rows);
            let gram = tape.matmul(v_rows, v_rows_t)?;
            let gram_pinv = tape.pinv(gram);
            let inner = tape.matmul(gram_pinv, v_rows)?;
            let p_range = tape.matmul(v_rows_t, inner)?;
            let eye = tape.constant(Matrix::identity(dim));
            tape.sub(eye, p_range)?
        }
    };

    // logits for all queries at once
    let logits = match head.logit_mode {
        LogitMode::ProjectedEuclidean => {
            // score_{k,q} = 2(φ̂P Gᵀ)_{k,q} - (φ̂∘φ̂P)1 - 1ᵀ(G∘GP)
            let phi_p = tape.matmul(phi_hat, proj)?;
            let self_phi = tape.mul_elem(phi_hat, phi_p)?;
            let a = tape.row_sum(self_phi);
            let g_t = tape.transpose(g_query);
            let cross = tape.matmul(phi_p, g_t)?;
            let g_p = tape.matmul(g_query, proj)?;
            let self_g = tape.mul_elem(g_query, g_p)?;
            let cq = tape.row_sum(self_g);
            let t = tape.scale(cross, 2.0);
            let neg_a = tape.scale(a, -1.0);
            let t = tape.add_col_broadcast(t, neg_a)?;
            let neg_c = tape.scale(cq, -1.0);
            let neg_c_row = tape.transpose(neg_c);
            let t = tape.add_row_broadcast(t, neg_c_row)?;
            tape.transpose(t)
        }
        LogitMode::ProjectedInnerProduct => {
            let phi_p = tape.matmul(phi_hat, proj)?;
            let g_t = tape.transpose(g_query);
            let scores = tape.matmul(phi_p, g_t)?;
            tape.transpose(scores)
        }
    };

    let labels: Vec<usize> = episode.queries.iter().map(|(_, s)| *s).collect();
    let loss = tape.softmax_xent_mean(logits, &labels)?;

    Ok(LossGraph { tape, loss, logits, weights: nodes.weights, biases: nodes.biases, bank: bank_leaf })
}

/// Forward-only episode loss and per-query logits.
pub fn episode_loss(model: &Model, episode: &Episode, head: &HeadConfig) -> Result<EpisodeLoss> {
    let g = build_loss_graph(model, episode, head, None)?;
    Ok(EpisodeLoss { loss: g.tape.value(g.loss).get(0, 0), logits: g.tape.value(g.logits).clone() })
}

/// Forward-only loss with an externally supplied projector (the
/// finite-difference oracle path: perturb parameters while holding P fixed).
pub fn episode_loss_fixed_projector(
    model: &Model,
    episode: &Episode,
    head: &HeadConfig,
    proj: &NullProjector,
) -> Result<EpisodeLoss> {
    let g = build_loss_graph(model, episode, head, Some(&proj.projector))?;
    Ok(EpisodeLoss { loss: g.tape.value(g.loss).get(0, 0), logits: g.tape.value(g.logits).clone() })
}

/// Episode loss with gradients for θ and Φ.
pub fn episode_loss_with_grads(
    model: &Model,
    episode: &Episode,
    head: &HeadConfig,
) -> Result<(EpisodeLoss, ModelGrads)> {
    let g = build_loss_graph(model, episode, head, None)?;
    let grads = g.tape.backward(g.loss)?;
    let out = EpisodeLoss {
        loss: g.tape.value(g.loss).get(0, 0),
        logits: g.tape.value(g.logits).clone(),
    };
    Ok((
        out,
        ModelGrads {
            weights: g.weights.iter().map(|&n| grads.get(n).clone()).collect(),
            biases: g.biases.iter().map(|&n| grads.get(n).clone()).collect(),
            bank: grads.get(g.bank).clone(),
        },
    ))
}

/// The projector the stop-gradient path would hold fixed for this episode.
pub fn episode_projector(model: &Model, episode: &Episode, head: &HeadConfig) -> Result<NullProjector> {
    let support_emb = embedding::embed_batch(
        &model.params,
        &Matrix::from_rows(&episode.support.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>())?,
    )?;
    let support: Vec<(Vec<f64>, usize)> = support_emb
        .data()
        .chunks(support_emb.cols())
        .zip(&episode.support)
        .map(|(row, (_, slot))| (row.to_vec(), *slot))
        .collect();
    let protos = head::class_averages(&support, episode.way)?;
    let refs = model.bank.episode_rows(episode.way)?;
    let errs = head::error_vectors(&refs, &protos, head.normalize)?;
    head::build_projector(&errs, DEFAULT_RANK_TOL)
}

/// Bias-corrected Adam over a flat list of tensors (θ followed by Φ).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            first_moment: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second_moment: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        let mut shapes: Vec<(usize, usize)> = Vec::new();
        for w in &model.params.weights {
            shapes.push((w.rows(), w.cols()));
        }
        for b in &model.params.biases {
            shapes.push((b.rows(), b.cols()));
        }
        shapes.push((model.bank.refs.rows(), model.bank.refs.cols()));
        AdamState::new(&shapes)
    }
}

/// One Adam step over matching `params`/`grads` lists.
pub fn adam_update(state: &mut AdamState, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(MlnError::DimensionMismatch {
            op: "adam_update",
            detail: format!(
                "{} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.len() {
        if !params[i].same_shape(grads[i]) || !params[i].same_shape(&state.first_moment[i]) {
            return Err(MlnError::DimensionMismatch {
                op: "adam_update",
                detail: format!("tensor {i} shape mismatch"),
            });
        }
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = params[i].data_mut();
        for ((pj, (mj, vj)), &gj) in p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(grads[i].data()) {
            *mj = state.beta1 * *mj + (1.0 - state.beta1) * gj;
            *vj = state.beta2 * *vj + (1.0 - state.beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *pj -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// base_lr · factor^(⌊step / interval⌋)
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    config.base_lr * config.decay_factor.powi((step / config.decay_interval) as i32)
}

/// One `episode,loss,train_acc,lr` metrics line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub episode: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "episode,loss,train_acc,lr";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.episode, self.loss, self.train_acc, self.lr)
    }
}

/// Serializable training snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub emb_config: EmbeddingConfig,
    pub params: EmbeddingParams,
    pub bank: ReferenceBank,
    pub adam: AdamState,
    pub train_config: TrainConfig,
    pub episode_counter: u64,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            emb_config: self.emb_config.clone(),
            params: self.params.clone(),
            bank: self.bank.clone(),
        }
    }
}

/// Runs the episodic training loop. Φ starts as random unit-norm rows;
/// per-episode loss, training accuracy and learning rate are returned as a
/// metrics stream alongside the final checkpoint. Aborts if the loss goes
/// non-finite.
pub fn train_loop(
    train_cfg: &TrainConfig,
    emb_cfg: &EmbeddingConfig,
    source: &EpisodeSource,
) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    train_cfg.validate(emb_cfg)?;
    if source.input_dim() != emb_cfg.input_dim {
        return Err(MlnError::InvalidConfig(format!(
            "dataset items have dim {}, embedding expects {}",
            source.input_dim(),
            emb_cfg.input_dim
        )));
    }
    let dim = emb_cfg.output_dim();
    let head = train_cfg.head_config(dim);

    let params = embedding::init_params(emb_cfg, &mut RngStream::new(emb_cfg.init_seed));
    let mut bank_rng = RngStream::new(train_cfg.seed).derive(0x42414e4b); // bank stream
    let bank = ReferenceBank::init(train_cfg.n_ref, dim, &mut bank_rng)?;
    let mut model = Model { emb_config: emb_cfg.clone(), params, bank };
    let mut adam = AdamState::for_model(&model);
    let mut episode_rng = RngStream::new(train_cfg.seed).derive(0x45505344); // episode stream

    let mut metrics = Vec::with_capacity(train_cfg.episodes as usize);
    for ep in 0..train_cfg.episodes {
        let episode = source.sample(
            train_cfg.way,
            train_cfg.shots,
            train_cfg.queries_per_class,
            &mut episode_rng,
        )?;
        let (out, grads) = episode_loss_with_grads(&model, &episode, &head)?;
        if !out.loss.is_finite() {
            return Err(MlnError::Diverged { episode: ep });
        }
        let correct = episode
            .queries
            .iter()
            .enumerate()
            .filter(|(q, (_, slot))| argmax(out.logits.row(*q)) == *slot)
            .count();
        let train_acc = correct as f64 / episode.queries.len() as f64;
        let lr = lr_schedule(ep, train_cfg);

        let mut tensors: Vec<&mut Matrix> = Vec::new();
        let mut grad_refs: Vec<&Matrix> = Vec::new();
        for (w, g) in model.params.weights.iter_mut().zip(&grads.weights) {
            tensors.push(w);
            grad_refs.push(g);
        }
        for (b, g) in model.params.biases.iter_mut().zip(&grads.biases) {
            tensors.push(b);
            grad_refs.push(g);
        }
        tensors.push(&mut model.bank.refs);
        grad_refs.push(&grads.bank);
        adam_update(&mut adam, &mut tensors, &grad_refs, lr)?;

        metrics.push(MetricsRow { episode: ep, loss: out.loss, train_acc, lr });
    }

    let checkpoint = Checkpoint {
        emb_config: emb_cfg.clone(),
        params: model.params,
        bank: model.bank,
        adam,
        train_config: train_cfg.clone(),
        episode_counter: train_cfg.episodes,
    };
    Ok((checkpoint, metrics))
}
