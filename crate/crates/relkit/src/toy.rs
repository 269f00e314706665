//! Desk-scale restoration harness: a tiny frozen native-RoPE teacher, an
//! identical student with scaled RoPE, and a distillation loop that updates
//! only the attention projections from the kernel's relation gradients.
//!
//! Gradients are local per layer: each layer's relation loss flows into
//! that layer's own Wq/Wk/Wv through the projection, with the layer input
//! treated as a constant. For a one-layer model this is exact; across
//! layers it ignores the indirect path through earlier blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::TileConfig;
use crate::objectives::{overall_loss, HeadBatch, LossWeights};
use crate::oracle::logit_kl;
use crate::rope::{rope_apply, rope_unapply, RopeConfig};
use crate::tensor::{masked_row_softmax, matmul_scaled, MaskSpec, Precision, Tensor2D};

/// Architecture of the toy model pair.
#[derive(Debug, Clone, Copy)]
pub struct ToyConfig {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Teacher-native sequence range; forward passes refuse longer inputs.
    pub seq_len: usize,
    pub rope_base: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            layers: 2,
            heads: 2,
            head_dim: 16,
            seq_len: 128,
            rope_base: 256.0,
        }
    }
}

impl ToyConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Effective rank of the toy embedding table.
const EMBED_RANK: usize = 6;

/// Init damping of q/k projection rows by the rotation their pair
/// accumulates across the native window: amplitude min(1, c / (theta * n)).
/// Keeps relation structure dominated by content and gentle rotations, the
/// regime where projection updates can actually undo a scale change.
fn pair_damp(frequency: f64, window: usize) -> f64 {
    (1.5 / (frequency * 0.75 * window as f64)).min(1.0)
}

/// Per-layer attention projections, stored output-major and applied as
/// `x * W^T`.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Tensor2D,
    pub wk: Tensor2D,
    pub wv: Tensor2D,
    pub wo: Tensor2D,
}

/// Attention-only residual decoder with frozen embedding and tied
/// unembedding. Teacher and student differ only in the RoPE scale and in
/// the trainable Wq/Wk/Wv deltas accumulated during distillation.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub embedding: Tensor2D,
    pub blocks: Vec<LayerWeights>,
    pub rope: RopeConfig,
}

impl ToyModel {
    /// Seeded initialization: embedding uniform in [-1, 1), projections
    /// uniform with gain 3/sqrt(D) so relation logits come out peaked
    /// rather than near-uniform. Query/key rows feeding the fastest
    /// rotation pairs are damped, mirroring how trained heads concentrate
    /// their relational energy below the wrap-around frequencies.
    pub fn seeded(config: ToyConfig, seed: u64, rope_scale: f64) -> Result<Self> {
        let d_model = config.model_dim();
        let dh = config.head_dim;
        let rope_probe = RopeConfig::new(dh, config.rope_base, 1.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |bound: f64| -> f64 { rng.gen_range(-bound..bound) };
        // Token vectors drawn from a low-rank subspace; real embedding
        // tables are strongly anisotropic, and low-rank content keeps the
        // relation structure within reach of projection updates.
        let rank = EMBED_RANK.min(d_model);
        let coeffs = Tensor2D::from_fn(config.vocab, rank, Precision::Double, |_, _| draw(1.0))?;
        let basis = Tensor2D::from_fn(rank, d_model, Precision::Double, |_, _| draw(1.0))?;
        let embedding = Tensor2D::from_fn(config.vocab, d_model, Precision::Double, |v, j| {
            let scale = 1.0 / (rank as f64).sqrt();
            (0..rank).map(|k| coeffs.get(v, k) * basis.get(k, j)).sum::<f64>() * scale
        })?;
        let gain = 3.0 / (d_model as f64).sqrt();
        // Output row o of a q/k projection lands in rotation pair (o % dh)/2.
        let damp = |o: usize| pair_damp(rope_probe.frequency((o % dh) / 2), config.seq_len);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut matrix = |tapered: bool| {
                Tensor2D::from_fn(d_model, d_model, Precision::Double, |o, _| {
                    draw(gain) * if tapered { damp(o) } else { 1.0 }
                })
            };
            blocks.push(LayerWeights {
                wq: matrix(true)?,
                wk: matrix(true)?,
                wv: matrix(false)?,
                // Residual-branch output kept small, as in standard
                // depth-scaled init; keeps deeper layer inputs stable.
                wo: matrix(false)?.scaled(0.25 / (config.layers as f64).sqrt())?,
            });
        }
        Ok(Self {
            config,
            embedding,
            blocks,
            rope: RopeConfig::new(config.head_dim, config.rope_base, rope_scale)?,
        })
    }

    /// The same weights under a different RoPE scale.
    pub fn with_rope_scale(&self, scale: f64) -> Result<Self> {
        Ok(Self {
            rope: RopeConfig::new(self.config.head_dim, self.config.rope_base, scale)?,
            ..self.clone()
        })
    }

    fn gather_embeddings(&self, tokens: &[u32]) -> Result<Tensor2D> {
        let d_model = self.config.model_dim();
        Tensor2D::from_fn(tokens.len(), d_model, Precision::Double, |i, j| {
            self.embedding.get(tokens[i] as usize, j)
        })
    }

    /// Standard causal attention forward returning, per layer, the relation
    /// targets (post-RoPE Q and K, pre-attention V, per head) and the layer
    /// input used by the projections.
    pub fn forward_with_relations(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        let n = tokens.len();
        if n == 0 || n > self.config.seq_len {
            return Err(Error::InvalidShape {
                rows: n,
                cols: self.config.seq_len,
            });
        }
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize >= self.config.vocab {
                return Err(Error::TokenOutOfRange {
                    position,
                    token,
                    vocab: self.config.vocab,
                });
            }
        }
        let heads = self.config.heads;
        let dh = self.config.head_dim;
        let d_model = self.config.model_dim();
        let mask = MaskSpec::causal(n)?;
        let attn_scale = 1.0 / (dh as f64).sqrt();

        let mut x = self.gather_embeddings(tokens)?;
        let mut layers = Vec::with_capacity(self.config.layers);
        for block in &self.blocks {
            let hidden_input = x.clone();
            let q_full = matmul_scaled(&x, &block.wq, 1.0)?;
            let k_full = matmul_scaled(&x, &block.wk, 1.0)?;
            let v_full = matmul_scaled(&x, &block.wv, 1.0)?;

            let mut q_heads = Vec::with_capacity(heads);
            let mut k_heads = Vec::with_capacity(heads);
            let mut v_heads = Vec::with_capacity(heads);
            let mut attended = vec![0.0; n * d_model];
            for h in 0..heads {
                let slice = |t: &Tensor2D| {
                    Tensor2D::from_fn(n, dh, Precision::Double, |i, j| t.get(i, h * dh + j))
                };
                let q = rope_apply(&slice(&q_full)?, &self.rope)?;
                let k = rope_apply(&slice(&k_full)?, &self.rope)?;
                let v = slice(&v_full)?;
                let scores = matmul_scaled(&q, &k, attn_scale)?;
                let attn = masked_row_softmax(&scores, &mask)?;
                let out = matmul_scaled(&attn, &v.transpose(), 1.0)?;
                for i in 0..n {
                    let src = out.row(i);
                    let dst = &mut attended[i * d_model + h * dh..i * d_model + (h + 1) * dh];
                    dst.copy_from_slice(src);
                }
                q_heads.push(q);
                k_heads.push(k);
                v_heads.push(v);
            }
            let attended = Tensor2D::new(n, d_model, attended, Precision::Double)?;
            x = x.add(&matmul_scaled(&attended, &block.wo, 1.0)?)?;
            layers.push(LayerTrace {
                relations: HeadBatch::new(1, heads, q_heads, k_heads, v_heads, vec![mask.clone()])?,
                hidden_input,
            });
        }
        let logits = matmul_scaled(&x, &self.embedding, 1.0)?;
        Ok(ForwardTrace { logits, layers })
    }
}

/// Relation targets and projection input of one layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub relations: HeadBatch,
    pub hidden_input: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Next-token logits per position, n x vocab.
    pub logits: Tensor2D,
    pub layers: Vec<LayerTrace>,
}

/// Gradients w.r.t. one layer's trainable projections.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub dwq: Tensor2D,
    pub dwk: Tensor2D,
    pub dwv: Tensor2D,
}

/// Relation loss averaged over layers plus local per-layer projection
/// gradients and the monitored logit KL (temperature 1, final position).
pub fn relation_loss_and_grads(
    teacher_trace: &ForwardTrace,
    student_trace: &ForwardTrace,
    student: &ToyModel,
    weights: &LossWeights,
    tile: &TileConfig,
) -> Result<(f64, Vec<LayerGrads>, f64)> {
    let layers = student.blocks.len();
    let heads = student.config.heads;
    let dh = student.config.head_dim;
    let d_model = student.config.model_dim();
    let layer_scale = 1.0 / layers as f64;

    let mut total = 0.0;
    let mut grads = Vec::with_capacity(layers);
    for (t_layer, s_layer) in teacher_trace.layers.iter().zip(&student_trace.layers) {
        let (loss, slice_grads) =
            overall_loss(&t_layer.relations, &s_layer.relations, weights, tile)?;
        total += layer_scale * loss;

        let n = s_layer.hidden_input.rows();
        let assemble = |per_head: &[Tensor2D], unrotate: bool| -> Result<Tensor2D> {
            let mut heads_unrot = Vec::with_capacity(heads);
            for g in per_head {
                heads_unrot.push(if unrotate {
                    rope_unapply(g, &student.rope)?
                } else {
                    g.clone()
                });
            }
            Tensor2D::from_fn(n, d_model, Precision::Double, |i, j| {
                heads_unrot[j / dh].get(i, j % dh)
            })
        };
        let dq = assemble(&slice_grads.dq, true)?;
        let dk = assemble(&slice_grads.dk, true)?;
        let dv = assemble(&slice_grads.dv, false)?;
        let hidden_t = s_layer.hidden_input.transpose();
        let project = |g: &Tensor2D| matmul_scaled(&g.transpose(), &hidden_t, layer_scale);
        grads.push(LayerGrads {
            dwq: project(&dq)?,
            dwk: project(&dk)?,
            dwv: project(&dv)?,
        });
    }

    let last = student_trace.logits.rows() - 1;
    let monitored = logit_kl(
        teacher_trace.logits.row(last),
        student_trace.logits.row(last),
        1.0,
    )?;
    Ok((total, grads, monitored))
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone)]
pub struct DistillHyper {
    pub weights: LossWeights,
    pub tile: TileConfig,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl DistillHyper {
    pub fn with_steps(total_steps: usize) -> Self {
        Self {
            weights: LossWeights::default(),
            tile: TileConfig::default(),
            base_lr: 2e-3,
            warmup_steps: 10,
            total_steps,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Linear warmup to the base rate, then cosine decay to zero.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.base_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else if self.total_steps <= self.warmup_steps {
            self.base_lr
        } else {
            let progress =
                (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
            self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone)]
struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Step counter, optimizer moments per trainable matrix, and the metric log.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub step: usize,
    moments: Vec<AdamMoments>,
    pub metrics: Vec<StepMetrics>,
}

impl DistillState {
    pub fn new(model: &ToyModel) -> Self {
        let d = model.config.model_dim();
        let moments = (0..model.blocks.len() * 3)
            .map(|_| AdamMoments {
                m: vec![0.0; d * d],
                v: vec![0.0; d * d],
            })
            .collect();
        Self {
            step: 0,
            moments,
            metrics: Vec::new(),
        }
    }
}

/// Per-step monitoring record.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub relation_kl: f64,
    pub logit_kl: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

fn global_norm(grads: &[LayerGrads]) -> f64 {
    let mut sum = 0.0;
    for g in grads {
        for t in [&g.dwq, &g.dwk, &g.dwv] {
            sum += t.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    sum.sqrt()
}

/// One distillation step: relation loss on the current tokens, local
/// projection gradients, global-norm clipping, and an adaptive-moment
/// update of the student's Wq/Wk/Wv. Metrics are logged before the update,
/// so step 0 records the untouched student.
pub fn distill_step(
    teacher: &ToyModel,
    student: &mut ToyModel,
    tokens: &[u32],
    hyper: &DistillHyper,
    state: &mut DistillState,
) -> Result<StepMetrics> {
    let teacher_trace = teacher.forward_with_relations(tokens)?;
    let student_trace = student.forward_with_relations(tokens)?;
    let (relation_kl, grads, monitored) = relation_loss_and_grads(
        &teacher_trace,
        &student_trace,
        student,
        &hyper.weights,
        &hyper.tile,
    )?;

    let raw_norm = global_norm(&grads);
    if !raw_norm.is_finite() {
        return Err(Error::TrainingDiverged { step: state.step });
    }
    let clip = if raw_norm > hyper.clip_norm {
        hyper.clip_norm / raw_norm
    } else {
        1.0
    };
    let lr = hyper.learning_rate(state.step);

    let t = (state.step + 1) as f64;
    let bias1 = 1.0 - hyper.beta1.powf(t);
    let bias2 = 1.0 - hyper.beta2.powf(t);
    for (layer, grad) in grads.iter().enumerate() {
        let block = &mut student.blocks[layer];
        for (slot, (weight, g)) in [
            (&mut block.wq, &grad.dwq),
            (&mut block.wk, &grad.dwk),
            (&mut block.wv, &grad.dwv),
        ]
        .into_iter()
        .enumerate()
        {
            let moments = &mut state.moments[layer * 3 + slot];
            let mut data = weight.data().to_vec();
            for (idx, value) in data.iter_mut().enumerate() {
                let gc = g.data()[idx] * clip;
                moments.m[idx] = hyper.beta1 * moments.m[idx] + (1.0 - hyper.beta1) * gc;
                moments.v[idx] = hyper.beta2 * moments.v[idx] + (1.0 - hyper.beta2) * gc * gc;
                let m_hat = moments.m[idx] / bias1;
                let v_hat = moments.v[idx] / bias2;
                *value -= lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
            }
            *weight = Tensor2D::new(weight.rows(), weight.cols(), data, weight.precision())?;
        }
    }

    let metrics = StepMetrics {
        step: state.step,
        relation_kl,
        logit_kl: monitored,
        lr,
        grad_norm: raw_norm,
    };
    state.metrics.push(metrics);
    state.step += 1;
    Ok(metrics)
}

/// Seeded Markov-chain token stream: each state has a handful of preferred
/// successors so the sequence repeats tokens and carries non-trivial
/// relation structure.
pub fn markov_tokens(vocab: usize, len: usize, seed: u64) -> Vec<u32> {
    const SUCCESSORS: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table: Vec<[u32; SUCCESSORS]> = (0..vocab)
        .map(|_| {
            let mut row = [0u32; SUCCESSORS];
            for slot in &mut row {
                *slot = rng.gen_range(0..vocab as u32);
            }
            row
        })
        .collect();
    let mut state = rng.gen_range(0..vocab as u32);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(state);
        state = table[state as usize][rng.gen_range(0..SUCCESSORS)];
    }
    out
}

/// Full restoration run configuration.
#[derive(Debug, Clone)]
pub struct RestorationConfig {
    pub model: ToyConfig,
    pub rope_scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub hyper: DistillHyper,
}

impl RestorationConfig {
    pub fn new(rope_scale: f64, steps: usize, seed: u64) -> Self {
        Self {
            model: ToyConfig::default(),
            rope_scale,
            steps,
            seed,
            hyper: DistillHyper::with_steps(steps),
        }
    }
}

#[derive(Debug)]
pub struct RestorationOutcome {
    pub teacher: ToyModel,
    pub student: ToyModel,
    pub metrics: Vec<StepMetrics>,
}

/// Placeholder for the optional second-stage context adaptation. No
/// language-modeling loop is built here; budgeting for such a stage goes
/// through [`crate::budget::token_budget`]. The student passes through
/// untouched.
pub fn context_adaptation_stage(_student: &mut ToyModel) {}

/// Build the teacher/student pair, sample one seeded token sequence, and
/// run the distillation loop for the configured number of steps.
pub fn run_restoration(config: &RestorationConfig) -> Result<RestorationOutcome> {
    if config.steps == 0 {
        return Err(Error::Parse {
            field: "steps (must be >= 1)".to_string(),
        });
    }
    let teacher = ToyModel::seeded(config.model, config.seed, 1.0)?;
    let mut student = teacher.with_rope_scale(config.rope_scale)?;
    let tokens = markov_tokens(
        config.model.vocab,
        config.model.seq_len,
        config.seed.wrapping_add(0x746f6b), // token-stream sub-seed
    );
    let mut state = DistillState::new(&student);
    for _ in 0..config.steps {
        distill_step(&teacher, &mut student, &tokens, &config.hyper, &mut state)?;
    }
    context_adaptation_stage(&mut student);
    Ok(RestorationOutcome {
        teacher,
        student,
        metrics: state.metrics,
    })
}
