//! Latent-query attention blocks with triadic Q/K/V modulation, the matched
//! standard Transformer block, input embeddings and the classifier head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::modulation::ModulationKind;
use crate::params::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Hyperparameters of a stack of attention blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Co4BlockConfig {
    pub embed_dim: usize,
    pub latents: usize,
    pub heads: usize,
    pub layers: usize,
    pub modulation: ModulationKind,
    pub dropout_p: f64,
    pub use_positional: bool,
    pub num_classes: usize,
}

impl Default for Co4BlockConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            latents: 8,
            heads: 1,
            layers: 1,
            modulation: ModulationKind::Cooperation,
            dropout_p: 0.1,
            use_positional: true,
            num_classes: 10,
        }
    }
}

impl Co4BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("latents", self.latents),
            ("heads", self.heads),
            ("layers", self.layers),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(param_err(format!("{name} must be positive")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(param_err(format!(
                "heads={} must divide embed_dim={}",
                self.heads, self.embed_dim
            )));
        }
        if self.embed_dim < 2 {
            return Err(param_err("embed_dim must be at least 2 for layer norm"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(param_err(format!("dropout_p={} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Standard,
    Co4,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Standard => "standard",
            Arch::Co4 => "co4",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Arch::Standard),
            "co4" => Ok(Arch::Co4),
            other => Err(param_err(format!("unknown arch `{other}`"))),
        }
    }
}

/// What the embedding layer consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSpec {
    /// `num_patches` flattened patches of length `patch_dim`.
    Patches { patch_dim: usize, num_patches: usize },
    /// `seq_len` token ids below `vocab`.
    Tokens { vocab: usize, seq_len: usize },
}

impl InputSpec {
    pub fn seq_len(&self) -> usize {
        match *self {
            InputSpec::Patches { num_patches, .. } => num_patches,
            InputSpec::Tokens { seq_len, .. } => seq_len,
        }
    }
}

#[derive(Clone, Debug)]
pub enum ModelInput<T> {
    Patches(Tensor<T>),
    Tokens(Vec<usize>),
}

/// Training mode carries the dropout RNG; evaluation mode disables dropout.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

// ---------------------------------------------------------------------------
// Triadic modulation on plain tensors
// ---------------------------------------------------------------------------

/// Modulated questions, clues and hypotheses for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct TriadicOutput<T> {
    /// `L_q × E_h`, one row per latent.
    pub q_m: Tensor<T>,
    /// `N × E_h`, averaged over latents.
    pub k_m: Tensor<T>,
    /// `N × E_h`, averaged over latents.
    pub v_m: Tensor<T>,
}

/// Two-stage triadic modulation of latent questions `q`, clues `k` and
/// hypotheses `v`.
///
/// Stage one, per latent `l` and token `n`:
/// `K_m⁽ˡ⁾[n] = mod(K[n], (Q[l] + V[n]) / 2)` and
/// `Q_m[l] = mean_n mod(Q[l], (K[n] + V[n]) / 2)`.
/// Stage two: `V_m⁽ˡ⁾[n] = mod(V[n], (Q_m[l] + K_m⁽ˡ⁾[n]) / 2)`.
/// `K_m` and `V_m` are the means of the per-latent sets over `l`.
pub fn triadic_modulate<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    kind: ModulationKind,
) -> Result<TriadicOutput<T>> {
    let (lq, d) = q.dims2();
    let (n, dk) = k.dims2();
    if k.shape() != v.shape() || dk != d {
        return Err(Error::Dimension {
            op: "triadic_modulate",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let half = T::of(0.5);
    let mean = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&x, &y)| (x + y) * half).collect() };
    let row_mod = |r: &[T], c: &[T]| -> Vec<T> { r.iter().zip(c).map(|(&x, &y)| kind.eval(x, y)).collect() };

    // Sum then divide: a mean of values in [0, 6] stays in [0, 6] after rounding.
    let (nf, lf) = (T::of(n as f64), T::of(lq as f64));
    let mut q_m = vec![T::zero(); lq * d];
    let mut k_m = vec![T::zero(); n * d];
    let mut v_m = vec![T::zero(); n * d];
    for l in 0..lq {
        let ql = q.row(l);
        let qm_row = &mut q_m[l * d..(l + 1) * d];
        let mut k_sets = Vec::with_capacity(n);
        for t in 0..n {
            k_sets.push(row_mod(k.row(t), &mean(ql, v.row(t))));
            let qt = row_mod(ql, &mean(k.row(t), v.row(t)));
            qm_row.iter_mut().zip(qt).for_each(|(a, b)| *a += b);
        }
        qm_row.iter_mut().for_each(|a| *a /= nf);
        let qm_row = qm_row.to_vec();
        for (t, km_lt) in k_sets.iter().enumerate() {
            let vm_lt = row_mod(v.row(t), &mean(&qm_row, km_lt));
            for j in 0..d {
                k_m[t * d + j] += km_lt[j];
                v_m[t * d + j] += vm_lt[j];
            }
        }
    }
    k_m.iter_mut().chain(v_m.iter_mut()).for_each(|a| *a /= lf);
    Ok(TriadicOutput {
        q_m: Tensor::new(vec![lq, d], q_m)?,
        k_m: Tensor::new(vec![n, d], k_m)?,
        v_m: Tensor::new(vec![n, d], v_m)?,
    })
}

/// Attention weights `softmax(Q·Kᵀ / sqrt(E_h))`, shape `L_q × N`.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let scale = T::one() / T::of(q.cols() as f64).sqrt();
    Ok(q.matmul_nt(k)?.scale(scale)?.softmax_rows())
}

/// Scaled dot-product attention of `q` over the rows of `k`/`v`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    attention_weights(q, k)?.matmul(v)
}

// ---------------------------------------------------------------------------
// Graph versions
// ---------------------------------------------------------------------------

/// [`triadic_modulate`] on graph variables. All `L_q·N` (latent, token) pairs
/// are laid out as stacked rows, so each stage is one modulation call of
/// `L_q·N·E_h` elements.
pub fn triadic_modulate_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    kind: ModulationKind,
) -> Result<(Var, Var, Var)> {
    let lq = g.value(q).rows();
    let n = g.value(k).rows();
    let half = T::of(0.5);
    // row l·N + n of each stacked tensor pairs latent l with token n
    let k_t = g.tile_rows(k, lq)?;
    let v_t = g.tile_rows(v, lq)?;
    let q_r = g.repeat_rows(q, n)?;

    let ctx = g.add(q_r, v_t)?;
    let ctx = g.scale(ctx, half)?;
    let k_sets = g.modulate(kind, k_t, ctx)?;

    let ctx = g.add(k_t, v_t)?;
    let ctx = g.scale(ctx, half)?;
    let q_pairs = g.modulate(kind, q_r, ctx)?;
    let q_m = g.mean_groups(q_pairs, n)?;

    let q_mr = g.repeat_rows(q_m, n)?;
    let ctx = g.add(q_mr, k_sets)?;
    let ctx = g.scale(ctx, half)?;
    let v_sets = g.modulate(kind, v_t, ctx)?;

    let k_m = g.mean_tiles(k_sets, lq)?;
    let v_m = g.mean_tiles(v_sets, lq)?;
    Ok((q_m, k_m, v_m))
}

pub fn attention_graph<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let scale = T::one() / T::of(g.value(q).cols() as f64).sqrt();
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, scale)?;
    let w = g.softmax_rows(scores)?;
    g.matmul(w, v)
}

fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    norm_gain: ParamId,
    norm_bias: ParamId,
}

#[derive(Clone, Debug)]
struct ModelIds {
    embed_w: ParamId,
    embed_b: Option<ParamId>,
    positional: Option<ParamId>,
    latents: Option<ParamId>,
    layers: Vec<LayerIds>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Embedding, a stack of Co⁴ or standard blocks, and a classifier head.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: Co4BlockConfig,
    pub arch: Arch,
    pub input: InputSpec,
    params: ParamSet<T>,
    ids: ModelIds,
}

fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-a..a))).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| T::of(normal.sample(rng))).collect())
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: Co4BlockConfig, arch: Arch, input: InputSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = cfg.embed_dim;
        let mut p = ParamSet::new();

        let (embed_w, embed_b) = match input {
            InputSpec::Patches { patch_dim, .. } => (
                p.push("embed.weight", glorot(&mut rng, patch_dim, e)),
                Some(p.push("embed.bias", Tensor::zeros(&[e]))),
            ),
            InputSpec::Tokens { vocab, .. } => {
                (p.push("embed.weight", glorot(&mut rng, vocab, e)), None)
            }
        };
        let positional = cfg
            .use_positional
            .then(|| p.push("embed.positional", gaussian(&mut rng, &[input.seq_len(), e], 0.02)));
        let latents = (arch == Arch::Co4)
            .then(|| p.push("latents", gaussian(&mut rng, &[cfg.latents, e], 0.02)));

        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut lin = |p: &mut ParamSet<T>, name: &str| {
                (
                    p.push(format!("layers.{i}.{name}.weight"), glorot(&mut rng, e, e)),
                    p.push(format!("layers.{i}.{name}.bias"), Tensor::zeros(&[e])),
                )
            };
            let (q_w, q_b) = lin(&mut p, "q");
            let (k_w, k_b) = lin(&mut p, "k");
            let (v_w, v_b) = lin(&mut p, "v");
            layers.push(LayerIds {
                q_w,
                q_b,
                k_w,
                k_b,
                v_w,
                v_b,
                norm_gain: p.push(format!("layers.{i}.norm.gain"), Tensor::full(&[e], T::one())),
                norm_bias: p.push(format!("layers.{i}.norm.bias"), Tensor::zeros(&[e])),
            });
        }
        let head_w = p.push("head.weight", glorot(&mut rng, e, cfg.num_classes));
        let head_b = p.push("head.bias", Tensor::zeros(&[cfg.num_classes]));

        Ok(Self {
            cfg,
            arch,
            input,
            params: p,
            ids: ModelIds {
                embed_w,
                embed_b,
                positional,
                latents,
                layers,
                head_w,
                head_b,
            },
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter count of one attention block (projections and norm).
    pub fn layer_parameters(&self) -> usize {
        let l = &self.ids.layers[0];
        [l.q_w, l.q_b, l.k_w, l.k_b, l.v_w, l.v_b, l.norm_gain, l.norm_bias]
            .iter()
            .map(|&id| self.params[id].numel())
            .sum()
    }

    /// Embeds patches: linear → ReLU → dropout, plus positional embedding.
    pub fn embed_patches(&self, g: &mut Graph<'_, T>, b: &Bound, patches: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let embed_b = self
            .ids
            .embed_b
            .ok_or_else(|| param_err("model does not take patch input"))?;
        g.set_scope("embedding");
        let h = linear(g, patches, b[self.ids.embed_w], b[embed_b])?;
        let h = g.relu(h)?;
        let h = self.dropout(g, h, mode)?;
        self.add_positional(g, b, h)
    }

    /// Embeds token ids by table lookup, dropout, plus positional embedding.
    pub fn embed_tokens(&self, g: &mut Graph<'_, T>, b: &Bound, ids: &[usize], mode: &mut Mode<'_>) -> Result<Var> {
        let h = g.gather_rows(b[self.ids.embed_w], ids)?;
        let h = self.dropout(g, h, mode)?;
        self.add_positional(g, b, h)
    }

    fn add_positional(&self, g: &mut Graph<'_, T>, b: &Bound, h: Var) -> Result<Var> {
        match self.ids.positional {
            Some(pos) => g.add(h, b[pos]),
            None => Ok(h),
        }
    }

    fn dropout(&self, g: &mut Graph<'_, T>, h: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let p = self.cfg.dropout_p;
        match mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = T::of(1.0 / (1.0 - p));
                let shape = g.value(h).shape().to_vec();
                let n = g.value(h).numel();
                let mask: Vec<T> = (0..n)
                    .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                    .collect();
                let mask = g.constant(Tensor::from_parts(shape, mask));
                g.mul(h, mask)
            }
            _ => Ok(h),
        }
    }

    /// One Co⁴ block: project latents to Q and tokens to K/V, run triadic
    /// modulation and attention per head, then `layer_norm(latents + attended)`.
    pub fn co4_layer(&self, g: &mut Graph<'_, T>, b: &Bound, layer: usize, latents: Var, tokens: Var) -> Result<Var> {
        let ids = self.layer_ids(layer)?;
        g.set_scope("latent_projection");
        let q = linear(g, latents, b[ids.q_w], b[ids.q_b])?;
        g.set_scope("token_projection");
        let k = linear(g, tokens, b[ids.k_w], b[ids.k_b])?;
        let v = linear(g, tokens, b[ids.v_w], b[ids.v_b])?;
        let attended = self.per_head(g, q, k, v, |g, qh, kh, vh| {
            let (q_m, k_m, v_m) = triadic_modulate_graph(g, qh, kh, vh, self.cfg.modulation)?;
            g.set_scope("attention");
            attention_graph(g, q_m, k_m, v_m)
        })?;
        let sum = g.add(latents, attended)?;
        g.layer_norm(sum, b[ids.norm_gain], b[ids.norm_bias], T::of(LAYER_NORM_EPS))
    }

    /// Baseline block: Q/K/V projections of `x`, multi-head self-attention,
    /// then `layer_norm(x + attended)`.
    pub fn standard_layer(&self, g: &mut Graph<'_, T>, b: &Bound, layer: usize, x: Var) -> Result<Var> {
        let ids = self.layer_ids(layer)?;
        g.set_scope("token_projection");
        let q = linear(g, x, b[ids.q_w], b[ids.q_b])?;
        let k = linear(g, x, b[ids.k_w], b[ids.k_b])?;
        let v = linear(g, x, b[ids.v_w], b[ids.v_b])?;
        let attended = self.per_head(g, q, k, v, |g, qh, kh, vh| {
            g.set_scope("attention");
            attention_graph(g, qh, kh, vh)
        })?;
        let sum = g.add(x, attended)?;
        g.layer_norm(sum, b[ids.norm_gain], b[ids.norm_bias], T::of(LAYER_NORM_EPS))
    }

    fn layer_ids(&self, layer: usize) -> Result<LayerIds> {
        self.ids
            .layers
            .get(layer)
            .copied()
            .ok_or_else(|| param_err(format!("layer {layer} out of range")))
    }

    fn per_head<'p>(
        &self,
        g: &mut Graph<'p, T>,
        q: Var,
        k: Var,
        v: Var,
        mut f: impl FnMut(&mut Graph<'p, T>, Var, Var, Var) -> Result<Var>,
    ) -> Result<Var> {
        let h = self.cfg.heads;
        if h == 1 {
            return f(g, q, k, v);
        }
        let d = self.cfg.head_dim();
        let mut outs = Vec::with_capacity(h);
        for i in 0..h {
            let qh = g.slice_cols(q, i * d, d)?;
            let kh = g.slice_cols(k, i * d, d)?;
            let vh = g.slice_cols(v, i * d, d)?;
            outs.push(f(g, qh, kh, vh)?);
        }
        g.concat_cols(&outs)
    }

    /// Mean-pools rows and maps them to class logits (`1 × num_classes`).
    pub fn classify(&self, g: &mut Graph<'_, T>, b: &Bound, x: Var) -> Result<Var> {
        g.set_scope("head");
        let pooled = g.mean_rows(x)?;
        linear(g, pooled, b[self.ids.head_w], b[self.ids.head_b])
    }

    /// Runs the block stack and head on already-embedded tokens (`N × E`).
    pub fn forward_embedded(&self, g: &mut Graph<'_, T>, b: &Bound, tokens: Var) -> Result<Var> {
        let mut x = match (self.arch, self.ids.latents) {
            (Arch::Co4, Some(latents)) => b[latents],
            _ => tokens,
        };
        for layer in 0..self.cfg.layers {
            x = match self.arch {
                Arch::Co4 => self.co4_layer(g, b, layer, x, tokens)?,
                Arch::Standard => self.standard_layer(g, b, layer, x)?,
            };
        }
        self.classify(g, b, x)
    }

    /// Full forward pass to logits.
    pub fn forward(&self, g: &mut Graph<'_, T>, b: &Bound, input: &ModelInput<T>, mode: &mut Mode<'_>) -> Result<Var> {
        let tokens = match input {
            ModelInput::Patches(p) => {
                let pv = g.constant(p.clone());
                self.embed_patches(g, b, pv, mode)?
            }
            ModelInput::Tokens(ids) => self.embed_tokens(g, b, ids, mode)?,
        };
        self.forward_embedded(g, b, tokens)
    }

    /// Evaluation-mode logits.
    pub fn predict(&self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let logits = self.forward(&mut g, &b, input, &mut Mode::Eval)?;
        Ok(g.value(logits).clone())
    }
}

/// Plain-tensor Co⁴ attention for one head with an explicit modulation kind,
/// or unmodulated attention when `kind` is `None`.
pub fn modulated_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    kind: Option<ModulationKind>,
) -> Result<Tensor<T>> {
    match kind {
        Some(kind) => {
            let t = triadic_modulate(q, k, v, kind)?;
            attention(&t.q_m, &t.k_m, &t.v_m)
        }
        None => attention(q, k, v),
    }
}
