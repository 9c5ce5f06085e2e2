//! The two MIL architectures.
//!
//! * **ABMIL**: a gated-attention scorer assigns one score per instance,
//!   softmax turns the scores into weights, and the bag embedding is the
//!   weighted mean of instance embeddings.
//! * **ASMIL**: `N` trainable FEAT tokens cross-attend to the instances
//!   (one softmax row over instances per token). During training a random
//!   subset of the updated tokens is dropped; the survivors and a CLS token
//!   pass through a second attention layer read out by CLS.
//!
//! Parameters live in a [`ParamSet`] of named tensors. Names starting with
//! `attn.` form the attention-producing submodule that the anchor mirrors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionMap};
use crate::error::{AsmilError, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::DenseMatrix;

/// Prefix shared by every parameter the anchor mirrors.
pub const ATTENTION_PREFIX: &str = "attn.";

pub const EMBED_WEIGHT: &str = "attn.embed.weight";
pub const EMBED_BIAS: &str = "attn.embed.bias";
pub const SCORER_V: &str = "attn.scorer.v";
pub const SCORER_U: &str = "attn.scorer.u";
pub const SCORER_W: &str = "attn.scorer.w";
pub const FEAT_TOKENS: &str = "attn.feat_tokens";
pub const STAGE1_QUERY: &str = "attn.query";
pub const STAGE1_KEY: &str = "attn.key";
pub const MIX_XI: &str = "attn.mix_xi";
pub const STAGE2_QUERY: &str = "agg.query";
pub const STAGE2_KEY: &str = "agg.key";
pub const CLS_TOKEN: &str = "agg.cls";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// One labeled bag of instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    /// `M × D`, one row per instance.
    pub features: DenseMatrix,
    pub label: usize,
}

impl Bag {
    pub fn new(id: impl Into<String>, features: DenseMatrix, label: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(AsmilError::shape("a bag needs at least one instance"));
        }
        Ok(Self {
            id: id.into(),
            features,
            label,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Abmil,
    Asmil,
}

/// How the online model maps scores to attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineAttention {
    #[default]
    Softmax,
    /// Softmax/NSF blend with a trainable ξ.
    Mixed,
}

impl OnlineAttention {
    pub fn map(self) -> AttentionMap {
        match self {
            OnlineAttention::Softmax => AttentionMap::Softmax { temperature: 1.0 },
            OnlineAttention::Mixed => AttentionMap::Mixed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Instance feature dimension `D`.
    pub input_dim: usize,
    /// Width `d` of the gated scorer.
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    /// Number of FEAT tokens `N`.
    #[serde(default = "default_tokens")]
    pub n_tokens: usize,
    pub n_classes: usize,
    /// Optional `Linear + ReLU` instance encoder in front of the attention.
    #[serde(default)]
    pub embed_dim: Option<usize>,
    #[serde(default)]
    pub online_attention: OnlineAttention,
}

fn default_hidden_dim() -> usize {
    128
}

fn default_tokens() -> usize {
    8
}

impl ModelConfig {
    pub fn abmil(input_dim: usize, n_classes: usize) -> Self {
        Self {
            architecture: Architecture::Abmil,
            input_dim,
            hidden_dim: default_hidden_dim(),
            n_tokens: default_tokens(),
            n_classes,
            embed_dim: None,
            online_attention: OnlineAttention::Softmax,
        }
    }

    pub fn asmil(input_dim: usize, n_classes: usize) -> Self {
        Self {
            architecture: Architecture::Asmil,
            ..Self::abmil(input_dim, n_classes)
        }
    }

    /// Width of the instance embeddings the attention operates on.
    pub fn token_dim(&self) -> usize {
        self.embed_dim.unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(AsmilError::config("input_dim", "must be at least 1"));
        }
        if self.n_classes < 2 {
            return Err(AsmilError::config("n_classes", "must be at least 2"));
        }
        if self.embed_dim == Some(0) {
            return Err(AsmilError::config(
                "embed_dim",
                "must be at least 1 when set",
            ));
        }
        match self.architecture {
            Architecture::Abmil if self.hidden_dim == 0 => {
                Err(AsmilError::config("hidden_dim", "must be at least 1"))
            }
            Architecture::Asmil if self.n_tokens == 0 => {
                Err(AsmilError::config("n_tokens", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub config: ModelConfig,
    entries: Vec<(String, DenseMatrix)>,
}

/// Gradients aligned with a [`ParamSet`]'s entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<DenseMatrix>);

impl ParamGrads {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(DenseMatrix::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(DenseMatrix::max_abs).fold(0.0, f64::max)
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    DenseMatrix::new(rows, cols, data).expect("sized by construction")
}

/// Draws a fresh parameter set. Weights are uniform in `±1/√fan_in`, FEAT
/// tokens are `0.02·N(0, 1)`, CLS and biases start at zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = config.input_dim;
    let e = config.token_dim();
    let mut entries = Vec::new();
    if let Some(embed) = config.embed_dim {
        entries.push((
            EMBED_WEIGHT.to_string(),
            uniform_matrix(&mut rng, d_in, embed),
        ));
        entries.push((EMBED_BIAS.to_string(), DenseMatrix::zeros(1, embed)));
    }
    match config.architecture {
        Architecture::Abmil => {
            let d = config.hidden_dim;
            entries.push((SCORER_V.to_string(), uniform_matrix(&mut rng, e, d)));
            entries.push((SCORER_U.to_string(), uniform_matrix(&mut rng, e, d)));
            entries.push((SCORER_W.to_string(), uniform_matrix(&mut rng, d, 1)));
        }
        Architecture::Asmil => {
            let n = config.n_tokens;
            let tokens = (0..n * e)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.02 * z
                })
                .collect::<Vec<f64>>();
            entries.push((FEAT_TOKENS.to_string(), DenseMatrix::new(n, e, tokens)?));
            entries.push((STAGE1_QUERY.to_string(), uniform_matrix(&mut rng, e, e)));
            entries.push((STAGE1_KEY.to_string(), uniform_matrix(&mut rng, e, e)));
        }
    }
    if config.online_attention == OnlineAttention::Mixed {
        entries.push((MIX_XI.to_string(), DenseMatrix::scalar(0.0)));
    }
    if config.architecture == Architecture::Asmil {
        entries.push((STAGE2_QUERY.to_string(), uniform_matrix(&mut rng, e, e)));
        entries.push((STAGE2_KEY.to_string(), uniform_matrix(&mut rng, e, e)));
        entries.push((CLS_TOKEN.to_string(), DenseMatrix::zeros(1, e)));
    }
    entries.push((
        HEAD_WEIGHT.to_string(),
        uniform_matrix(&mut rng, e, config.n_classes),
    ));
    entries.push((
        HEAD_BIAS.to_string(),
        DenseMatrix::zeros(1, config.n_classes),
    ));
    Ok(ParamSet {
        config: config.clone(),
        entries,
    })
}

impl ParamSet {
    pub fn new(config: ModelConfig, entries: Vec<(String, DenseMatrix)>) -> Self {
        Self { config, entries }
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix> {
        self.entries.iter_mut().map(|(_, m)| m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// Copy of the `attn.*` entries, i.e. what the anchor mirrors.
    pub fn attention_subset(&self) -> ParamSet {
        ParamSet {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(ATTENTION_PREFIX))
                .cloned()
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.is_finite())
    }

    pub fn zeros_like(&self) -> ParamGrads {
        ParamGrads(
            self.entries
                .iter()
                .map(|(_, m)| DenseMatrix::zeros(m.rows(), m.cols()))
                .collect(),
        )
    }

    /// Records every entry as a tape leaf.
    pub fn bind(&self, tape: &mut GradTape) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(n, m)| (n.clone(), tape.leaf(m.clone())))
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamSet`], in entry order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.try_var(name)
            .ok_or_else(|| AsmilError::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }

    /// Collects the gradient of every bound entry.
    pub fn gradients(&self, grads: &crate::tape::Gradients) -> ParamGrads {
        ParamGrads(self.vars.iter().map(|(_, v)| grads.wrt(*v)).collect())
    }
}

/// Which FEAT tokens survive into the aggregation stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropMask {
    keep: Vec<bool>,
    kept_count: usize,
}

impl DropMask {
    pub fn all(n: usize) -> Self {
        Self {
            keep: vec![true; n],
            kept_count: n,
        }
    }

    pub fn from_keep(keep: Vec<bool>) -> Result<Self> {
        let kept_count = keep.iter().filter(|&&k| k).count();
        if kept_count == 0 {
            return Err(AsmilError::contract("drop mask keeps no tokens"));
        }
        Ok(Self { keep, kept_count })
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }
}

/// Keeps each of `n` tokens independently with probability `1 − rate`. If
/// every token is dropped, one uniformly chosen token is kept.
pub fn token_drop_mask(n: usize, rate: f64, rng: &mut impl Rng) -> Result<DropMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(AsmilError::domain(format!(
            "drop rate must lie in [0, 1), got {rate}"
        )));
    }
    if n == 0 {
        return Err(AsmilError::domain("cannot mask zero tokens"));
    }
    let mut keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= rate).collect();
    if keep.iter().all(|k| !k) {
        keep[rng.random_range(0..n)] = true;
    }
    DropMask::from_keep(keep)
}

/// Values produced by one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardRecord {
    /// One score row per query (1 for ABMIL, `N` for ASMIL), `M` columns.
    pub scores: DenseMatrix,
    /// Attention rows matching `scores`; for ASMIL these are pre-drop.
    pub attention: DenseMatrix,
    pub bag_embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Tape handles for a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TapeForward {
    pub scores: Var,
    pub attention: Var,
    pub bag_embedding: Var,
    pub logits: Var,
}

fn check_bag(bag: &Bag, config: &ModelConfig) -> Result<()> {
    if bag.dim() != config.input_dim {
        return Err(AsmilError::shape(format!(
            "bag `{}` has {} features, model expects {}",
            bag.id,
            bag.dim(),
            config.input_dim
        )));
    }
    if bag.n_instances() == 0 {
        return Err(AsmilError::shape(format!("bag `{}` is empty", bag.id)));
    }
    Ok(())
}

/// Instance embeddings and raw attention scores. Only `attn.*` entries of
/// `bound` are read, so this runs unchanged on anchor parameters.
pub fn attention_scores(
    tape: &mut GradTape,
    features: Var,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<(Var, Var)> {
    let embedded = match config.embed_dim {
        Some(_) => {
            let w = bound.var(EMBED_WEIGHT)?;
            let b = bound.var(EMBED_BIAS)?;
            let x = tape.matmul(features, w)?;
            let x = tape.add_row(x, b)?;
            tape.relu(x)
        }
        None => features,
    };
    let scores = match config.architecture {
        Architecture::Abmil => {
            let v = bound.var(SCORER_V)?;
            let u = bound.var(SCORER_U)?;
            let w = bound.var(SCORER_W)?;
            let a = tape.matmul(embedded, v)?;
            let a = tape.tanh(a);
            let g = tape.matmul(embedded, u)?;
            let g = tape.sigmoid(g);
            let gated = tape.mul(a, g)?;
            let z = tape.matmul(gated, w)?;
            tape.transpose(z)
        }
        Architecture::Asmil => {
            let tokens = bound.var(FEAT_TOKENS)?;
            let wq = bound.var(STAGE1_QUERY)?;
            let wk = bound.var(STAGE1_KEY)?;
            let q = tape.matmul(tokens, wq)?;
            let k = tape.matmul(embedded, wk)?;
            let kt = tape.transpose(k);
            let s = tape.matmul(q, kt)?;
            tape.scale(s, 1.0 / (config.token_dim() as f64).sqrt())
        }
    };
    Ok((embedded, scores))
}

/// Full online forward pass recorded on `tape`.
pub fn forward_on_tape(
    tape: &mut GradTape,
    features: Var,
    bound: &BoundParams,
    config: &ModelConfig,
    mask: Option<&DropMask>,
) -> Result<TapeForward> {
    let (embedded, scores) = attention_scores(tape, features, bound, config)?;
    let xi = bound.try_var(MIX_XI);
    let attention = config.online_attention.map().apply_rows(tape, scores, xi)?;
    let bag_embedding = match config.architecture {
        Architecture::Abmil => tape.matmul(attention, embedded)?,
        Architecture::Asmil => {
            let updated = tape.matmul(attention, embedded)?;
            let kept = match mask {
                Some(m) => {
                    if m.len() != config.n_tokens {
                        return Err(AsmilError::shape(format!(
                            "drop mask covers {} tokens, model has {}",
                            m.len(),
                            config.n_tokens
                        )));
                    }
                    if m.kept_count() == 0 {
                        return Err(AsmilError::contract("drop mask keeps no tokens"));
                    }
                    if m.kept_count() == config.n_tokens {
                        updated
                    } else {
                        tape.select_rows(updated, &m.kept_indices())?
                    }
                }
                None => updated,
            };
            let cls = bound.var(CLS_TOKEN)?;
            let tokens = tape.vstack(cls, kept)?;
            let wq = bound.var(STAGE2_QUERY)?;
            let wk = bound.var(STAGE2_KEY)?;
            let q = tape.matmul(cls, wq)?;
            let k = tape.matmul(tokens, wk)?;
            let kt = tape.transpose(k);
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, 1.0 / (config.token_dim() as f64).sqrt());
            let weights = tape.softmax_rows(s, 1.0)?;
            tape.matmul(weights, tokens)?
        }
    };
    let head_w = bound.var(HEAD_WEIGHT)?;
    let head_b = bound.var(HEAD_BIAS)?;
    let logits = tape.matmul(bag_embedding, head_w)?;
    let logits = tape.add_row(logits, head_b)?;
    Ok(TapeForward {
        scores,
        attention,
        bag_embedding,
        logits,
    })
}

/// Forward pass for either architecture. `mask = None` is inference.
pub fn forward(bag: &Bag, params: &ParamSet, mask: Option<&DropMask>) -> Result<ForwardRecord> {
    check_bag(bag, &params.config)?;
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape);
    let features = tape.leaf(bag.features.clone());
    let out = forward_on_tape(&mut tape, features, &bound, &params.config, mask)?;
    Ok(ForwardRecord {
        scores: tape.value(out.scores).clone(),
        attention: tape.value(out.attention).clone(),
        bag_embedding: tape.value(out.bag_embedding).data().to_vec(),
        logits: tape.value(out.logits).data().to_vec(),
    })
}

pub fn abmil_forward(bag: &Bag, params: &ParamSet) -> Result<ForwardRecord> {
    if params.config.architecture != Architecture::Abmil {
        return Err(AsmilError::contract("abmil_forward needs ABMIL parameters"));
    }
    forward(bag, params, None)
}

pub fn asmil_forward(
    bag: &Bag,
    params: &ParamSet,
    mask: Option<&DropMask>,
) -> Result<ForwardRecord> {
    if params.config.architecture != Architecture::Asmil {
        return Err(AsmilError::contract("asmil_forward needs ASMIL parameters"));
    }
    forward(bag, params, mask)
}

/// Bag-level cross entropy `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    attention::cross_entropy_slice(logits, label)
}
