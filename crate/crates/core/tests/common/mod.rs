//! Finite-difference and invariance probes shared by the integration suites.
#![allow(dead_code)]

use co4::block::{attention_weights, triadic_modulate};
use co4::rl::{gaussian_genome, Encoder, PiPolicy, SensoryObs};
use co4::{
    Arch, Co4BlockConfig, Graph, InputSpec, Model, ModelInput, Mode, ModulationKind, Result, Tensor,
    Var,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradients smaller than this are compared in absolute terms; central
/// differences at h = 1e-5 carry ~1e-10 of rounding noise.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-scale..scale)).unwrap()
}

/// Five-point central difference of a scalar function.
pub fn derivative(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

/// Worst relative error of the analytic partials of `kind` at one random
/// point at least `margin` from any kink.
pub fn modulation_case(rng: &mut ChaCha8Rng, kind: ModulationKind, margin: f64) -> f64 {
    let (r, c) = loop {
        let r: f64 = rng.gen_range(-3.0..3.0);
        let c: f64 = rng.gen_range(-3.0..3.0);
        if kind.kink_distance(r, c).is_none_or(|d| d >= margin) {
            break (r, c);
        }
    };
    let (dr, dc) = kind.partials(r, c);
    let nr = derivative(|x| kind.eval(x, c), r, 1e-4);
    let nc = derivative(|x| kind.eval(r, x), c, 1e-4);
    rel_err(dr, nr).max(rel_err(dc, nc))
}

/// Analytic-versus-numeric gradient comparison for a loss built from
/// trainable leaves. Returns the worst relative error and the kink margin.
pub fn graph_check(
    params: &[Tensor<f64>],
    build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> (f64, Option<f64>) {
    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars).unwrap();
    let margin = g.kink_margin();
    let grads = g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    let mut ps = params.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| Tensor::zeros(params[i].shape()));
        for j in 0..params[i].numel() {
            let base = params[i].data()[j];
            let numeric = derivative(
                |x| {
                    let mut d = params[i].data().to_vec();
                    d[j] = x;
                    ps[i] = Tensor::new(params[i].shape().to_vec(), d).unwrap();
                    eval(&ps)
                },
                base,
                1e-5,
            );
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
        ps[i] = params[i].clone();
    }
    (worst, margin)
}

/// One random small graph exercising a seed-chosen subset of operations,
/// resampled until every kink is at least `margin` away. At most 200
/// trainable scalars.
pub fn small_graph_case(seed: u64, margin: f64) -> f64 {
    let mut r = rng(seed);
    let kind = ModulationKind::ALL[(seed % 5) as usize];
    loop {
        let (m, k, n) = (r.gen_range(2..5), r.gen_range(2..6), r.gen_range(2..6));
        let params = vec![
            rand_tensor(&mut r, m, k, 1.5),
            rand_tensor(&mut r, k, n, 1.0),
            Tensor::from_fn(&[n], |_| r.gen_range(-0.5..0.5)).unwrap(),
            rand_tensor(&mut r, m, n, 1.0),
            Tensor::from_fn(&[n], |_| r.gen_range(0.5..1.5)).unwrap(),
        ];
        let label = r.gen_range(0..n);
        let template = seed % 3;
        let (err, kink) = graph_check(&params, |g, p| {
            let h = g.matmul(p[0], p[1])?;
            let h = g.add_row(h, p[2])?;
            match template {
                0 => {
                    let a = g.modulate(kind, h, p[3])?;
                    let a = g.relu6(a)?;
                    let t = g.tanh(p[3])?;
                    let s = g.mul(a, t)?;
                    let s = g.layer_norm(s, p[4], p[2], 1e-5)?;
                    let s = g.square(s)?;
                    g.sum_all(s)
                }
                1 => {
                    let at = g.matmul_nt(h, p[3])?;
                    let at = g.scale(at, 0.5)?;
                    let w = g.softmax_rows(at)?;
                    let o = g.matmul(w, p[3])?;
                    let o = g.sub(o, h)?;
                    let o = g.abs(o)?;
                    let pooled = g.mean_rows(o)?;
                    g.cross_entropy(pooled, &[label])
                }
                _ => {
                    let e = g.exp(p[3])?;
                    let e = g.scale(e, 0.1)?;
                    let x = g.add(h, e)?;
                    let x = g.relu(x)?;
                    let t = g.transpose(x)?;
                    let t = g.transpose(t)?;
                    let tiled = g.tile_rows(t, 2)?;
                    let rep = g.repeat_rows(p[3], 2)?;
                    let mixed = g.mul(tiled, rep)?;
                    let a = g.mean_tiles(mixed, 2)?;
                    let b = g.mean_groups(mixed, 2)?;
                    let cat = g.concat_cols(&[a, b])?;
                    let sl = g.slice_cols(cat, 1, n)?;
                    let gathered = g.gather_rows(sl, &[1, 0, 1])?;
                    g.cross_entropy(gathered, &[label, 0, label])
                }
            }
        });
        if kink.is_none_or(|d| d >= margin) {
            return err;
        }
    }
}

pub fn tiny_model(seed: u64) -> (Model<f64>, ModelInput<f64>, usize) {
    let mut r = rng(seed);
    let arch = if seed % 2 == 0 { Arch::Co4 } else { Arch::Standard };
    let cfg = Co4BlockConfig {
        embed_dim: 8,
        latents: 2,
        heads: [1, 2][(seed / 2 % 2) as usize],
        layers: 1,
        modulation: ModulationKind::ALL[(seed % 5) as usize],
        dropout_p: 0.0,
        use_positional: r.gen_bool(0.5),
        num_classes: 3,
    };
    let input = InputSpec::Patches {
        patch_dim: 3,
        num_patches: 4,
    };
    let model = Model::new(cfg, arch, input, seed).unwrap();
    let x = ModelInput::Patches(rand_tensor(&mut r, 4, 3, 2.0));
    (model, x, r.gen_range(0..3))
}

fn model_loss(model: &Model<f64>, x: &ModelInput<f64>, label: usize) -> f64 {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let logits = model.forward(&mut g, &b, x, &mut Mode::Eval).unwrap();
    let loss = g.cross_entropy(logits, &[label]).unwrap();
    g.value(loss).item().unwrap()
}

/// End-to-end gradient check of a tiny model (E=8, L_q=2, N=4, one layer).
/// Returns `None` when the sampled point lies within `margin` of a kink.
pub fn tiny_model_case(seed: u64, margin: f64) -> Option<f64> {
    let (mut model, x, label) = tiny_model(seed);
    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let logits = model.forward(&mut g, &b, &x, &mut Mode::Eval).unwrap();
    let loss = g.cross_entropy(logits, &[label]).unwrap();
    if g.kink_margin().is_some_and(|d| d < margin) {
        return None;
    }
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = b
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(v, t)| grads.slice(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let base = model.params().tensors()[i].data().to_vec();
        for j in 0..base.len() {
            let numeric = derivative(
                |v| {
                    let mut d = base.clone();
                    d[j] = v;
                    model.params_mut().set_data(i, d).unwrap();
                    model_loss(&model, &x, label)
                },
                base[j],
                1e-5,
            );
            worst = worst.max(rel_err(a[j], numeric));
        }
        model.params_mut().set_data(i, base).unwrap();
    }
    Some(worst)
}

/// Max abs difference of a Co⁴ stack's logits under a random token order,
/// positional embeddings off.
pub fn co4_permutation_diff(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(2..12);
    let cfg = Co4BlockConfig {
        embed_dim: 8,
        latents: r.gen_range(1..5),
        heads: [1, 2, 4][r.gen_range(0..3)],
        layers: r.gen_range(1..3),
        modulation: ModulationKind::ALL[r.gen_range(0..5)],
        dropout_p: 0.1,
        use_positional: false,
        num_classes: 3,
    };
    let model = Model::<f64>::new(cfg, Arch::Co4, InputSpec::Patches { patch_dim: 5, num_patches: n }, seed).unwrap();
    let x = rand_tensor(&mut r, n, 5, 1.0);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let xp = x.select_rows(&perm).unwrap();
    let a = model.predict(&ModelInput::Patches(x)).unwrap();
    let b = model.predict(&ModelInput::Patches(xp)).unwrap();
    a.max_abs_diff(&b)
}

/// Max abs difference of the sensory message under a random sensor shuffle,
/// relative to the message magnitude once it exceeds 1. The exponential
/// transfer functions reach ~1e9, where reordering a sum costs ~1e-7.
pub fn pi_permutation_diff(seed: u64) -> f64 {
    let mut r = rng(seed);
    let encoder = [Encoder::Standard, Encoder::Co4, Encoder::TM1, Encoder::TM2, Encoder::TM3, Encoder::TM4]
        [(seed % 6) as usize];
    let policy = PiPolicy::cartpole(encoder);
    let genome = gaussian_genome(seed ^ 0xA5A5, r.gen_range(0.1..1.0));
    let components: Vec<f64> = (0..4).map(|_| r.gen_range(-2.4..2.4)).collect();
    let mut shuffled = components.clone();
    shuffled.shuffle(&mut r);
    let prev_action = r.gen_range(-1.0..1.0);
    let a = policy
        .pi_encode(&SensoryObs { components, prev_action }, &genome)
        .unwrap();
    let b = policy
        .pi_encode(&SensoryObs { components: shuffled, prev_action }, &genome)
        .unwrap();
    let scale = a.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    a.max_abs_diff(&b) / scale
}

/// Triadic outputs and attention weights for a random single-head problem.
pub fn triadic_case(seed: u64, kind: ModulationKind) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let (lq, n, e) = (r.gen_range(1..6), r.gen_range(1..10), r.gen_range(1..8));
    let q = rand_tensor(&mut r, lq, e, 3.0);
    let k = rand_tensor(&mut r, n, e, 3.0);
    let v = rand_tensor(&mut r, n, e, 3.0);
    let t = triadic_modulate(&q, &k, &v, kind).unwrap();
    let w = attention_weights(&t.q_m, &t.k_m).unwrap();
    (t.q_m, t.k_m, t.v_m, w)
}

/// Raw CIFAR-10 record bytes for a pixel function `(channel, y, x) -> u8`.
pub fn cifar_record(label: u8, px: impl Fn(usize, usize, usize) -> u8) -> Vec<u8> {
    let mut rec = vec![label];
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                rec.push(px(c, y, x));
            }
        }
    }
    rec
}

/// Writes `data_batch_1.bin` with `count` noisy images whose dominant
/// channel and stripe orientation encode the label.
pub fn write_cifar_fixture(dir: &std::path::Path, count: usize, seed: u64) {
    let mut r = rng(seed);
    let mut bytes = Vec::with_capacity(count * 3073);
    for i in 0..count {
        let label = (i % 10) as u8;
        let noise: Vec<u8> = (0..3072).map(|_| r.gen_range(0..40)).collect();
        bytes.extend(cifar_record(label, |c, y, x| {
            let base = if c == label as usize % 3 { 150 } else { 40 };
            let stripe = if (if label < 5 { y } else { x } / 4) % 2 == 0 { 60 } else { 0 };
            base + stripe + noise[c * 1024 + y * 32 + x]
        }));
    }
    std::fs::write(dir.join("data_batch_1.bin"), bytes).unwrap();
}
