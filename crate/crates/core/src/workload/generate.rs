//! Synthetic RLHF workload.
//!
//! Each round emits the PPO stage's phases in order: `generation`, the four
//! evaluation inferences (`infer_actor`, `infer_ref`, `infer_critic`,
//! `infer_reward`) and the two training phases (`train_actor`,
//! `train_critic`). Model weights, gradients and optimizer state are
//! allocated once up front, outside any phase, under ids starting with
//! [`PERSISTENT_PREFIX`]; everything else is freed before the round ends.
//!
//! Sizes follow ordinary transformer accounting. For a batch `b`, sequence
//! length `n`, hidden size `h` and element width `e`:
//!
//! * a hidden-state tensor is `b * n * h * e` bytes,
//! * attention scores are `b * heads * n_q * n_kv * e` bytes (`heads = h / 64`),
//! * the MLP expands to `4 * b * n * h * e`,
//! * the KV cache of one layer holding `n` tokens is `2 * h * b * n * e`,
//! * optimizer state is two fp32 moments per parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PhaseKind, Trace, TraceEvent, TraceOrigin, WorkloadError};
use crate::Bytes;

/// Tensor ids of state that outlives every phase start with this prefix.
pub const PERSISTENT_PREFIX: &str = "state:";

const HEAD_DIM: u64 = 64;
const OPTIMIZER_MOMENTS: u64 = 2;
const FP32: u64 = 4;
const TOKEN_ID_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ZeroStage {
    None,
    One,
    Two,
    Three,
}

impl ZeroStage {
    pub const ALL: [ZeroStage; 4] = [ZeroStage::None, ZeroStage::One, ZeroStage::Two, ZeroStage::Three];
}

impl std::fmt::Display for ZeroStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ZeroStage::None => "none",
            ZeroStage::One => "1",
            ZeroStage::Two => "2",
            ZeroStage::Three => "3",
        })
    }
}

impl std::str::FromStr for ZeroStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "0" => Ok(ZeroStage::None),
            "1" => Ok(ZeroStage::One),
            "2" => Ok(ZeroStage::Two),
            "3" => Ok(ZeroStage::Three),
            other => Err(format!("unknown zero stage {other:?} (expected none, 1, 2 or 3)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelRole {
    Actor,
    Reference,
    Critic,
    Reward,
}

impl ModelRole {
    pub const ALL: [ModelRole; 4] = [
        ModelRole::Actor,
        ModelRole::Reference,
        ModelRole::Critic,
        ModelRole::Reward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelRole::Actor => "actor",
            ModelRole::Reference => "ref",
            ModelRole::Critic => "critic",
            ModelRole::Reward => "reward",
        }
    }

    pub fn trained(self) -> bool {
        matches!(self, ModelRole::Actor | ModelRole::Critic)
    }

    fn actor_sized(self) -> bool {
        matches!(self, ModelRole::Actor | ModelRole::Reference)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub rounds: u32,
    pub actor_params: u64,
    pub critic_params: u64,
    pub hidden_size: u64,
    pub layers: u32,
    pub batch: u64,
    /// Training micro-batch; the full batch when unset.
    pub train_micro_batch: Option<u64>,
    pub seq_len: u64,
    pub gen_tokens: u64,
    pub world_size: u64,
    pub zero_stage: ZeroStage,
    pub grad_ckpt: bool,
    /// Keep every k-th layer input under checkpointing; `ceil(sqrt(layers))` when unset.
    pub ckpt_interval: Option<u32>,
    pub offload: bool,
    pub bytes_per_element: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    /// OPT-1.3b actor / OPT-350m critic, scaled down so a full run replays in well under a second.
    fn default() -> Self {
        Self {
            rounds: 2,
            actor_params: 48 << 20,
            critic_params: 4 << 20,
            hidden_size: 512,
            layers: 16,
            batch: 2,
            train_micro_batch: None,
            seq_len: 256,
            gen_tokens: 256,
            world_size: 1,
            zero_stage: ZeroStage::None,
            grad_ckpt: false,
            ckpt_interval: None,
            offload: false,
            bytes_per_element: 2,
            seed: 42,
        }
    }
}

impl WorkloadSpec {
    /// A few hundred events; handy for tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            rounds: 1,
            actor_params: 1 << 18,
            critic_params: 1 << 16,
            hidden_size: 64,
            layers: 2,
            batch: 1,
            train_micro_batch: None,
            seq_len: 32,
            gen_tokens: 4,
            world_size: 1,
            zero_stage: ZeroStage::None,
            grad_ckpt: false,
            ckpt_interval: None,
            offload: false,
            bytes_per_element: 2,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let counts = [
            ("rounds", self.rounds as u64),
            ("actor_params", self.actor_params),
            ("critic_params", self.critic_params),
            ("hidden_size", self.hidden_size),
            ("layers", self.layers as u64),
            ("batch", self.batch),
            ("seq_len", self.seq_len),
            ("gen_tokens", self.gen_tokens),
            ("world_size", self.world_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(WorkloadError::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if !matches!(self.bytes_per_element, 2 | 4) {
            return Err(WorkloadError::InvalidSpec(
                "bytes_per_element must be 2 or 4".into(),
            ));
        }
        if self.train_micro_batch == Some(0) {
            return Err(WorkloadError::InvalidSpec("train_micro_batch must be positive".into()));
        }
        if self.ckpt_interval == Some(0) {
            return Err(WorkloadError::InvalidSpec("ckpt_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn micro_batch(&self) -> u64 {
        self.train_micro_batch.unwrap_or(self.batch).min(self.batch)
    }

    pub fn checkpoint_interval(&self) -> u32 {
        self.ckpt_interval
            .unwrap_or_else(|| (self.layers as f64).sqrt().ceil() as u32)
            .max(1)
    }

    fn partitioned(&self) -> bool {
        self.world_size > 1
    }

    fn shard(&self, n: u64) -> u64 {
        n.div_ceil(self.world_size)
    }
}

/// Checked product; any overflow is an invalid spec.
fn product(factors: &[u64]) -> Result<Bytes, WorkloadError> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| WorkloadError::InvalidSpec(format!("byte size overflows: {factors:?}")))
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    role: ModelRole,
    hidden: u64,
    heads: u64,
    layer_params: u64,
}

/// Tensor sizes of one layer for a given batch geometry.
#[derive(Debug, Clone, Copy)]
struct LayerSizes {
    hidden: Bytes,
    scores: Bytes,
    mlp: Bytes,
}

struct Emitter<'a> {
    spec: &'a WorkloadSpec,
    events: Vec<TraceEvent>,
}

impl Emitter<'_> {
    fn alloc(&mut self, id: impl Into<String>, bytes: Bytes) {
        self.events.push(TraceEvent::alloc(id, bytes));
    }

    fn free(&mut self, id: impl Into<String>) {
        self.events.push(TraceEvent::free(id));
    }

    fn begin(&mut self, name: &str, kind: PhaseKind) {
        self.events.push(TraceEvent::phase_begin(name, kind));
    }

    fn end(&mut self, name: &str, kind: PhaseKind) {
        self.events.push(TraceEvent::phase_end(name, kind));
    }

    fn shape(&self, role: ModelRole) -> Shape {
        let s = self.spec;
        let (params, hidden) = if role.actor_sized() {
            (s.actor_params, s.hidden_size)
        } else {
            (s.critic_params, critic_hidden(s))
        };
        Shape {
            role,
            hidden,
            heads: (hidden / HEAD_DIM).max(1),
            layer_params: params.div_ceil(s.layers as u64),
        }
    }

    fn sizes(&self, shape: &Shape, batch: u64, q_len: u64, kv_len: u64) -> Result<LayerSizes, WorkloadError> {
        let e = self.spec.bytes_per_element;
        Ok(LayerSizes {
            hidden: product(&[batch, q_len, shape.hidden, e])?,
            scores: product(&[batch, shape.heads, q_len, kv_len, e])?,
            mlp: product(&[4, batch, q_len, shape.hidden, e])?,
        })
    }

    fn gathers(&self, shape: &Shape) -> bool {
        shape.role.trained() && self.spec.zero_stage == ZeroStage::Three && self.spec.partitioned()
    }

    fn param_bytes(&self, shape: &Shape) -> Result<Bytes, WorkloadError> {
        let sharded = shape.role.trained() && self.spec.zero_stage >= ZeroStage::Three;
        let n = if sharded { self.spec.shard(shape.layer_params) } else { shape.layer_params };
        product(&[n, self.spec.bytes_per_element])
    }

    fn grad_bytes(&self, shape: &Shape) -> Result<Bytes, WorkloadError> {
        let n = if self.spec.zero_stage >= ZeroStage::Two {
            self.spec.shard(shape.layer_params)
        } else {
            shape.layer_params
        };
        product(&[n, self.spec.bytes_per_element])
    }

    fn optim_bytes(&self, shape: &Shape) -> Result<Bytes, WorkloadError> {
        let n = if self.spec.zero_stage >= ZeroStage::One {
            self.spec.shard(shape.layer_params)
        } else {
            shape.layer_params
        };
        product(&[OPTIMIZER_MOMENTS, n, FP32])
    }

    fn full_layer_bytes(&self, shape: &Shape) -> Result<Bytes, WorkloadError> {
        product(&[shape.layer_params, self.spec.bytes_per_element])
    }

    fn param_id(role: ModelRole, layer: u32) -> String {
        format!("{PERSISTENT_PREFIX}{}:param:{layer}", role.name())
    }

    fn load_params(&mut self, role: ModelRole) -> Result<(), WorkloadError> {
        let shape = self.shape(role);
        let bytes = self.param_bytes(&shape)?;
        for l in 0..self.spec.layers {
            self.alloc(Self::param_id(role, l), bytes);
        }
        Ok(())
    }

    fn unload_params(&mut self, role: ModelRole) {
        for l in 0..self.spec.layers {
            self.free(Self::param_id(role, l));
        }
    }

    fn setup(&mut self) -> Result<(), WorkloadError> {
        for role in ModelRole::ALL {
            self.load_params(role)?;
        }
        for role in [ModelRole::Actor, ModelRole::Critic] {
            let shape = self.shape(role);
            let grad = self.grad_bytes(&shape)?;
            let optim = self.optim_bytes(&shape)?;
            for l in 0..self.spec.layers {
                self.alloc(format!("{PERSISTENT_PREFIX}{}:grad:{l}", role.name()), grad);
                self.alloc(format!("{PERSISTENT_PREFIX}{}:optim:{l}", role.name()), optim);
            }
        }
        Ok(())
    }

    fn generation(&mut self, round: u32, prompt: u64) -> Result<(), WorkloadError> {
        const PHASE: &str = "generation";
        let spec = self.spec;
        let shape = self.shape(ModelRole::Actor);
        let gather = self.gathers(&shape).then(|| self.full_layer_bytes(&shape)).transpose()?;
        let e = spec.bytes_per_element;
        self.begin(PHASE, PhaseKind::Inference);
        let kv_id = |l: u32, t: u64| format!("r{round}:{PHASE}:kv:{l}:{t}");
        for t in 1..=spec.gen_tokens {
            // The first step runs the whole prompt; later steps one token each.
            let kv_len = prompt + t - 1;
            let q_len = if t == 1 { prompt } else { 1 };
            let sz = self.sizes(&shape, spec.batch, q_len, kv_len)?;
            let kv = product(&[2, shape.hidden, spec.batch, kv_len, e])?;
            for l in 0..spec.layers {
                let p = format!("r{round}:{PHASE}:{t}:{l}");
                if let Some(g) = gather {
                    self.alloc(format!("{p}:gather"), g);
                }
                self.alloc(format!("{p}:hidden"), sz.hidden);
                self.alloc(format!("{p}:scores"), sz.scores);
                self.alloc(kv_id(l, t), kv);
                if t > 1 {
                    self.free(kv_id(l, t - 1));
                }
                self.free(format!("{p}:scores"));
                self.free(format!("{p}:hidden"));
                if gather.is_some() {
                    self.free(format!("{p}:gather"));
                }
            }
        }
        let seq = product(&[spec.batch, prompt + spec.gen_tokens, TOKEN_ID_BYTES])?;
        self.alloc(format!("r{round}:exp:seq"), seq);
        for l in 0..spec.layers {
            self.free(kv_id(l, spec.gen_tokens));
        }
        self.end(PHASE, PhaseKind::Inference);
        Ok(())
    }

    /// Forward pass without autograd: intermediates die as soon as the next op consumes them.
    fn inference(&mut self, round: u32, phase: &str, role: ModelRole, len: u64) -> Result<(), WorkloadError> {
        let spec = self.spec;
        let shape = self.shape(role);
        let gather = self.gathers(&shape).then(|| self.full_layer_bytes(&shape)).transpose()?;
        let sz = self.sizes(&shape, spec.batch, len, len)?;
        self.begin(phase, PhaseKind::Inference);
        let emb = format!("r{round}:{phase}:emb");
        self.alloc(&emb, sz.hidden);
        let mut prev = emb;
        for l in 0..spec.layers {
            let t = |name: &str| format!("r{round}:{phase}:{l}:{name}");
            if let Some(g) = gather {
                self.alloc(t("gather"), g);
            }
            self.alloc(t("ln1"), sz.hidden);
            for qkv in ["q", "k", "v"] {
                self.alloc(t(qkv), sz.hidden);
            }
            self.free(t("ln1"));
            self.alloc(t("scores"), sz.scores);
            self.alloc(t("probs"), sz.scores);
            self.free(t("scores"));
            self.alloc(t("ctx"), sz.hidden);
            for dead in ["probs", "q", "k", "v"] {
                self.free(t(dead));
            }
            self.alloc(t("attn"), sz.hidden);
            self.free(t("ctx"));
            self.alloc(t("res"), sz.hidden);
            self.free(t("attn"));
            self.free(&prev);
            self.alloc(t("ln2"), sz.hidden);
            self.alloc(t("fc1"), sz.mlp);
            self.free(t("ln2"));
            self.alloc(t("gelu"), sz.mlp);
            self.free(t("fc1"));
            self.alloc(t("fc2"), sz.hidden);
            self.free(t("gelu"));
            self.alloc(t("out"), sz.hidden);
            self.free(t("fc2"));
            self.free(t("res"));
            if gather.is_some() {
                self.free(t("gather"));
            }
            prev = t("out");
        }
        self.free(&prev);
        let result = if role == ModelRole::Reward {
            product(&[spec.batch, FP32])?
        } else {
            product(&[spec.batch, len, FP32])?
        };
        self.alloc(format!("r{round}:exp:{}", role.name()), result);
        self.end(phase, PhaseKind::Inference);
        Ok(())
    }

    fn training(&mut self, round: u32, phase: &str, role: ModelRole, len: u64) -> Result<(), WorkloadError> {
        let spec = self.spec;
        let shape = self.shape(role);
        self.begin(phase, PhaseKind::Training);
        if spec.offload && role == ModelRole::Actor {
            self.unload_params(ModelRole::Reference);
            self.unload_params(ModelRole::Reward);
        }
        let micro = spec.micro_batch();
        let steps = spec.batch.div_ceil(micro);
        for mb in 0..steps {
            let batch = micro.min(spec.batch - mb * micro);
            self.train_step(&format!("r{round}:{phase}:mb{mb}"), &shape, batch, len)?;
        }
        let update = product(&[self.spec.shard(shape.layer_params), spec.bytes_per_element])?;
        for l in 0..spec.layers {
            let id = format!("r{round}:{phase}:{l}:update");
            self.alloc(&id, update);
            self.free(id);
        }
        if role == ModelRole::Critic {
            self.free(format!("r{round}:exp:seq"));
            for r in ModelRole::ALL {
                self.free(format!("r{round}:exp:{}", r.name()));
            }
        }
        self.end(phase, PhaseKind::Training);
        Ok(())
    }

    /// One forward/backward over a micro-batch.
    fn train_step(&mut self, prefix: &str, shape: &Shape, batch: u64, len: u64) -> Result<(), WorkloadError> {
        const SAVED: [&str; 10] = ["ln1", "q", "k", "v", "probs", "ctx", "res", "ln2", "fc1", "gelu"];
        let spec = self.spec;
        let sz = self.sizes(shape, batch, len, len)?;
        let gather = self.gathers(shape).then(|| self.full_layer_bytes(shape)).transpose()?;
        let grad_scatter = (spec.zero_stage >= ZeroStage::Two && spec.partitioned())
            .then(|| self.full_layer_bytes(shape))
            .transpose()?;
        let size_of = |name: &str| match name {
            "probs" => sz.scores,
            "fc1" | "gelu" => sz.mlp,
            _ => sz.hidden,
        };
        let interval = spec.checkpoint_interval();
        let kept_input = |l: u32| !spec.grad_ckpt || l.is_multiple_of(interval);

        let emb = format!("{prefix}:emb");
        self.alloc(&emb, sz.hidden);
        let mut inputs = Vec::with_capacity(spec.layers as usize);
        let mut prev = emb;
        for l in 0..spec.layers {
            let t = |name: &str| format!("{prefix}:{l}:{name}");
            if let Some(g) = gather {
                self.alloc(t("gather"), g);
            }
            for name in ["ln1", "q", "k", "v"] {
                self.alloc(t(name), size_of(name));
            }
            self.alloc(t("scores"), sz.scores);
            self.alloc(t("probs"), sz.scores);
            self.free(t("scores"));
            for name in ["ctx", "attn", "res"] {
                self.alloc(t(name), sz.hidden);
            }
            self.free(t("attn"));
            for name in ["ln2", "fc1", "gelu", "fc2", "out"] {
                self.alloc(t(name), size_of(name));
            }
            self.free(t("fc2"));
            if gather.is_some() {
                self.free(t("gather"));
            }
            if spec.grad_ckpt {
                for name in SAVED.iter().rev() {
                    self.free(t(name));
                }
                if !kept_input(l) {
                    self.free(&prev);
                }
            }
            inputs.push(prev);
            prev = t("out");
        }

        let loss_grad = format!("{prefix}:loss_grad");
        self.alloc(&loss_grad, sz.hidden);
        self.free(&prev);

        let mut grad_out = loss_grad;
        for l in (0..spec.layers).rev() {
            let t = |name: &str| format!("{prefix}:{l}:{name}");
            if let Some(g) = gather {
                self.alloc(t("bwd_gather"), g);
            }
            let saved: Vec<String> = if spec.grad_ckpt {
                let names: Vec<String> = SAVED.iter().map(|n| t(&format!("re_{n}"))).collect();
                for (id, name) in names.iter().zip(SAVED) {
                    self.alloc(id, size_of(name));
                }
                names
            } else {
                SAVED.iter().map(|n| t(n)).collect()
            };
            if let Some(g) = grad_scatter {
                self.alloc(t("grad_full"), g);
            }
            self.alloc(t("grad_mlp"), sz.mlp);
            let grad_in = t("grad_in");
            self.alloc(&grad_in, sz.hidden);
            self.free(t("grad_mlp"));
            self.free(&grad_out);
            grad_out = grad_in;
            for id in saved.iter().rev() {
                self.free(id);
            }
            if grad_scatter.is_some() {
                self.free(t("grad_full"));
            }
            if gather.is_some() {
                self.free(t("bwd_gather"));
            }
            if kept_input(l) {
                self.free(&inputs[l as usize]);
            }
        }
        self.free(&grad_out);
        Ok(())
    }
}

/// Critic hidden size, scaled from the actor by the square root of the parameter ratio.
fn critic_hidden(spec: &WorkloadSpec) -> u64 {
    let ratio = spec.critic_params as f64 / spec.actor_params as f64;
    let raw = spec.hidden_size as f64 * ratio.sqrt();
    if spec.hidden_size < HEAD_DIM {
        return (raw.round() as u64).clamp(1, spec.hidden_size);
    }
    let rounded = (raw / HEAD_DIM as f64).round() as u64 * HEAD_DIM;
    rounded.clamp(HEAD_DIM, spec.hidden_size.max(HEAD_DIM))
}

/// Prompt length of one round: the configured length minus a seeded jitter
/// of up to an eighth of it, in steps of 8 tokens.
fn prompt_len(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> u64 {
    let max_jitter = spec.seq_len / 8 / 8;
    let jitter = rng.gen_range(0..=max_jitter) * 8;
    spec.seq_len - jitter
}

pub fn generate(spec: &WorkloadSpec) -> Result<Trace, WorkloadError> {
    spec.validate()?;
    let mut em = Emitter {
        spec,
        events: Vec::new(),
    };
    em.setup()?;
    let padded = spec
        .seq_len
        .checked_add(spec.gen_tokens)
        .ok_or_else(|| WorkloadError::InvalidSpec("sequence length overflows".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for round in 0..spec.rounds {
        let prompt = prompt_len(spec, &mut rng);
        let len = prompt + spec.gen_tokens;
        em.generation(round, prompt)?;
        em.inference(round, "infer_actor", ModelRole::Actor, len)?;
        em.inference(round, "infer_ref", ModelRole::Reference, len)?;
        em.inference(round, "infer_critic", ModelRole::Critic, len)?;
        em.inference(round, "infer_reward", ModelRole::Reward, len)?;
        em.training(round, "train_actor", ModelRole::Actor, padded)?;
        em.training(round, "train_critic", ModelRole::Critic, padded)?;
        if spec.offload {
            em.load_params(ModelRole::Reference)?;
            em.load_params(ModelRole::Reward)?;
        }
    }
    Trace::new(em.events, TraceOrigin::Generated(Box::new(spec.clone())))
}
