//! Closed-form multiply-accumulate models for the standard and Co⁴ blocks,
//! and an instrumented counter that checks them term by term.
//!
//! Conventions: only matmul MACs count toward the dominant terms; bias
//! additions are excluded; modulation, softmax and layer-norm work is
//! itemized separately as the elementwise extra (α).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::block::{Arch, Co4BlockConfig, InputSpec, Model};
use crate::error::{param_err, Result};
use crate::graph::Graph;
use crate::modulation::ModulationKind;
use crate::tensor::Tensor;

pub const CONVENTIONS: &str =
    "dominant terms count matmul multiply-accumulates only; bias additions excluded; \
     modulation/softmax/layer-norm element counts reported as elementwise_extra";

fn check_positive(vals: &[(&str, u64)]) -> Result<()> {
    match vals.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(param_err(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

/// `layers · (P·E² + P²·E)`
pub fn macs_standard(p: u64, e: u64, layers: u64) -> Result<u64> {
    check_positive(&[("P", p), ("E", e), ("layers", layers)])?;
    Ok(layers * (p * e * e + p * p * e))
}

/// `layers · (L_q·E² + P·E² + L_q·P·E)`
pub fn macs_co4(p: u64, e: u64, layers: u64, latents: u64) -> Result<u64> {
    check_positive(&[("P", p), ("E", e), ("layers", layers), ("L_q", latents)])?;
    Ok(layers * (latents * e * e + p * e * e + latents * p * e))
}

/// One closed-form term and how often the implemented block layout incurs it.
#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct TermReport {
    pub formula: &'static str,
    /// Value of the closed-form term summed over layers.
    pub closed_form: u64,
    /// Number of matmuls of that size per layer in this implementation.
    pub multiplicity: u64,
    /// `multiplicity · closed_form`
    pub expected: u64,
    pub measured: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MacReport {
    pub arch: Arch,
    pub n: u64,
    pub e: u64,
    pub layers: u64,
    pub latents: u64,
    pub heads: u64,
    pub closed_form: u64,
    pub measured: Option<u64>,
    pub elementwise_extra: Option<u64>,
    pub breakdown: BTreeMap<String, TermReport>,
    pub elementwise: BTreeMap<String, u64>,
    pub conventions: &'static str,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct MacQuery {
    pub arch: Arch,
    pub n: u64,
    pub e: u64,
    pub layers: u64,
    pub latents: u64,
    pub heads: u64,
}

impl MacQuery {
    pub fn co4(n: u64, e: u64, layers: u64, latents: u64) -> Self {
        Self {
            arch: Arch::Co4,
            n,
            e,
            layers,
            latents,
            heads: 1,
        }
    }

    pub fn standard(n: u64, e: u64, layers: u64) -> Self {
        Self {
            arch: Arch::Standard,
            n,
            e,
            layers,
            latents: 1,
            heads: 1,
        }
    }
}

/// Closed-form report without measurement.
pub fn closed_form_report(q: MacQuery) -> Result<MacReport> {
    let MacQuery {
        arch,
        n,
        e,
        layers,
        latents,
        heads,
    } = q;
    let mut breakdown = BTreeMap::new();
    let mut term = |name: &str, formula: &'static str, value: u64, mult: u64| {
        breakdown.insert(
            name.to_string(),
            TermReport {
                formula,
                closed_form: layers * value,
                multiplicity: mult,
                expected: layers * value * mult,
                measured: None,
            },
        );
    };
    let mut warnings = Vec::new();
    let closed_form = match arch {
        Arch::Standard => {
            term("token_projection", "P·E²", n * e * e, 3);
            term("attention", "P²·E", n * n * e, 2);
            macs_standard(n, e, layers)?
        }
        Arch::Co4 => {
            if latents > n {
                warnings.push(format!("L_q={latents} exceeds P={n}; the linear-cost regime assumes L_q ≪ P"));
            }
            term("latent_projection", "L_q·E²", latents * e * e, 1);
            term("token_projection", "P·E²", n * e * e, 2);
            term("attention", "L_q·P·E", latents * n * e, 2);
            macs_co4(n, e, layers, latents)?
        }
    };
    Ok(MacReport {
        arch,
        n,
        e,
        layers,
        latents,
        heads,
        closed_form,
        measured: None,
        elementwise_extra: None,
        breakdown,
        elementwise: BTreeMap::new(),
        conventions: CONVENTIONS,
        warnings,
    })
}

/// Runs an instrumented forward pass of the block stack on random tokens and
/// fills in measured counts next to the closed form.
pub fn measure(q: MacQuery, seed: u64) -> Result<MacReport> {
    let mut report = closed_form_report(q)?;
    let cfg = Co4BlockConfig {
        embed_dim: q.e as usize,
        latents: q.latents as usize,
        heads: q.heads as usize,
        layers: q.layers as usize,
        modulation: ModulationKind::Cooperation,
        dropout_p: 0.0,
        use_positional: false,
        num_classes: 1,
    };
    let input = InputSpec::Patches {
        patch_dim: 1,
        num_patches: q.n as usize,
    };
    let model = Model::<f64>::new(cfg, q.arch, input, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let tokens = Tensor::from_fn(&[q.n as usize, q.e as usize], |_| rng.gen_range(-1.0..1.0))?;

    let mut g = Graph::instrumented();
    let b = model.params().bind(&mut g);
    let tv = g.constant(tokens);
    model.forward_embedded(&mut g, &b, tv)?;
    let counter = g.counter()?;

    let mut dominant = 0;
    for (name, term) in report.breakdown.iter_mut() {
        let m = counter.matmul_macs.get(name).copied().unwrap_or(0);
        term.measured = Some(m);
        dominant += m;
    }
    for (scope, &m) in &counter.matmul_macs {
        if !report.breakdown.contains_key(scope) {
            report.elementwise.insert(format!("excluded_matmul:{scope}"), m);
        }
    }
    let extra: u64 = counter.elementwise.values().sum();
    report.elementwise.extend(counter.elementwise.clone());
    report.measured = Some(dominant);
    report.elementwise_extra = Some(extra);
    Ok(report)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}
