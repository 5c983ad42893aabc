//! Modulatory transfer functions combining a driving input `R` with a
//! contextual input `C`, and grid sampling of their value and gradient fields.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{relu6, relu6_grad, same_shape, Tensor};

/// Exponent arguments `R·C` are clamped to this magnitude in TM1, TM3 and TM4.
pub const EXP_GUARD: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModulationKind {
    /// `relu6(R² + 2R + C(1 + |R|))`
    Cooperation,
    /// `½R(1 + exp(RC))`
    TM1,
    /// `R + RC`
    TM2,
    /// `R(1 + tanh(RC))`
    TM3,
    /// `R·2^(RC)`
    TM4,
}

impl ModulationKind {
    pub const ALL: [ModulationKind; 5] = [
        ModulationKind::Cooperation,
        ModulationKind::TM1,
        ModulationKind::TM2,
        ModulationKind::TM3,
        ModulationKind::TM4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModulationKind::Cooperation => "cooperation",
            ModulationKind::TM1 => "tm1",
            ModulationKind::TM2 => "tm2",
            ModulationKind::TM3 => "tm3",
            ModulationKind::TM4 => "tm4",
        }
    }

    #[inline]
    pub fn eval<T: Scalar>(self, r: T, c: T) -> T {
        let half = T::of(0.5);
        match self {
            ModulationKind::Cooperation => relu6(cooperation_pre(r, c)),
            ModulationKind::TM1 => half * r * (T::one() + guarded(r * c).exp()),
            ModulationKind::TM2 => r + r * c,
            ModulationKind::TM3 => r * (T::one() + guarded(r * c).tanh()),
            ModulationKind::TM4 => r * guarded(r * c).exp2(),
        }
    }

    /// Partial derivatives `(∂/∂R, ∂/∂C)`.
    ///
    /// Subgradient 0 at relu6 kinks, `d|R|/dR = 0` at `R = 0`, and zero
    /// derivative through the exponent guard once `|RC|` exceeds it.
    #[inline]
    pub fn partials<T: Scalar>(self, r: T, c: T) -> (T, T) {
        let one = T::one();
        let half = T::of(0.5);
        let rc = r * c;
        let live = if rc.abs() <= T::of(EXP_GUARD) { one } else { T::zero() };
        match self {
            ModulationKind::Cooperation => {
                let g = relu6_grad(cooperation_pre(r, c));
                let dr = T::of(2.0) * r + T::of(2.0) + c * sign0(r);
                (g * dr, g * (one + r.abs()))
            }
            ModulationKind::TM1 => {
                let e = guarded(rc).exp();
                (half * (one + e) + half * r * e * c * live, half * r * e * r * live)
            }
            ModulationKind::TM2 => (one + c, r),
            ModulationKind::TM3 => {
                let t = guarded(rc).tanh();
                let sech2 = (one - t * t) * live;
                (one + t + r * c * sech2, r * r * sech2)
            }
            ModulationKind::TM4 => {
                let p = guarded(rc).exp2();
                let ln2 = T::of(std::f64::consts::LN_2);
                (p + r * ln2 * p * c * live, r * ln2 * p * r * live)
            }
        }
    }

    /// Distance of `(R, C)` from the nearest point where this function is
    /// not differentiable, or `None` for the smooth transfer functions.
    pub fn kink_distance<T: Scalar>(self, r: T, c: T) -> Option<T> {
        match self {
            ModulationKind::Cooperation => {
                let pre = cooperation_pre(r, c);
                let d = pre.abs().min((pre - T::of(6.0)).abs()).min(r.abs());
                Some(d)
            }
            _ => None,
        }
    }
}

impl fmt::Display for ModulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cooperation" | "co4" => Ok(ModulationKind::Cooperation),
            "tm1" => Ok(ModulationKind::TM1),
            "tm2" => Ok(ModulationKind::TM2),
            "tm3" => Ok(ModulationKind::TM3),
            "tm4" => Ok(ModulationKind::TM4),
            other => Err(param_err(format!("unknown modulation kind `{other}`"))),
        }
    }
}

#[inline]
fn cooperation_pre<T: Scalar>(r: T, c: T) -> T {
    r * r + T::of(2.0) * r + c * (T::one() + r.abs())
}

#[inline]
fn guarded<T: Scalar>(x: T) -> T {
    let g = T::of(EXP_GUARD);
    x.max(-g).min(g)
}

#[inline]
fn sign0<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Elementwise Cooperation modulation of `r` by context `c`.
pub fn cooperate<T: Scalar>(r: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    transfer(ModulationKind::Cooperation, r, c)
}

pub fn transfer<T: Scalar>(kind: ModulationKind, r: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("modulate", r, c)?;
    let data: Vec<T> = r
        .data()
        .iter()
        .zip(c.data())
        .map(|(&a, &b)| kind.eval(a, b))
        .collect();
    Tensor::new(r.shape().to_vec(), data).map_err(|_| Error::NonFinite("modulate"))
}

/// Value and central-difference partials of a modulation function sampled on
/// an evenly spaced `R × C` grid. Matrices are indexed `[r_index][c_index]`.
#[derive(Clone, Debug)]
pub struct FieldGrid {
    pub kind: ModulationKind,
    pub r_axis: Vec<f64>,
    pub c_axis: Vec<f64>,
    pub value: Tensor<f64>,
    pub dvalue_dr: Tensor<f64>,
    pub dvalue_dc: Tensor<f64>,
}

pub fn sample_field(
    kind: ModulationKind,
    r_min: f64,
    r_max: f64,
    c_min: f64,
    c_max: f64,
    steps: usize,
) -> Result<FieldGrid> {
    if steps < 2 {
        return Err(param_err("field needs at least 2 steps per axis"));
    }
    if !(r_max > r_min) || !(c_max > c_min) {
        return Err(param_err(format!(
            "degenerate range R=[{r_min}, {r_max}] C=[{c_min}, {c_max}]"
        )));
    }
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        (0..steps)
            .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let r_axis = axis(r_min, r_max);
    let c_axis = axis(c_min, c_max);
    let hr = (r_max - r_min) / (steps - 1) as f64;
    let hc = (c_max - c_min) / (steps - 1) as f64;

    let mut value = Vec::with_capacity(steps * steps);
    let mut dr = Vec::with_capacity(steps * steps);
    let mut dc = Vec::with_capacity(steps * steps);
    for &r in &r_axis {
        for &c in &c_axis {
            value.push(kind.eval(r, c));
            dr.push((kind.eval(r + hr, c) - kind.eval(r - hr, c)) / (2.0 * hr));
            dc.push((kind.eval(r, c + hc) - kind.eval(r, c - hc)) / (2.0 * hc));
        }
    }
    let shape = vec![steps, steps];
    Ok(FieldGrid {
        kind,
        r_axis,
        c_axis,
        value: Tensor::new(shape.clone(), value)?,
        dvalue_dr: Tensor::new(shape.clone(), dr)?,
        dvalue_dc: Tensor::new(shape, dc)?,
    })
}

impl FieldGrid {
    /// Writes one row per grid point with columns `R, C, value, dR, dC`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["R", "C", "value", "dR", "dC"])?;
        for (i, r) in self.r_axis.iter().enumerate() {
            for (j, c) in self.c_axis.iter().enumerate() {
                w.write_record([
                    r.to_string(),
                    c.to_string(),
                    self.value.at(i, j).to_string(),
                    self.dvalue_dr.at(i, j).to_string(),
                    self.dvalue_dc.at(i, j).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ModulationKind::*;

    #[test]
    fn cooperation_examples() {
        assert_eq!(Cooperation.eval(0.0, 0.0), 0.0);
        assert_eq!(Cooperation.eval(-1.0, 4.0), 6.0);
        assert_eq!(Cooperation.eval(1.0, 0.0), 3.0);
        assert_eq!(Cooperation.eval(-1.0, 0.0), 0.0);
    }

    #[test]
    fn transfer_examples() {
        assert_eq!(TM1.eval(1.0, 0.0), 1.0);
        assert_eq!(TM2.eval(2.0, 3.0), 8.0);
        assert_eq!(TM4.eval(2.0, 1.0), 8.0);
        for kind in [TM1, TM2, TM3, TM4] {
            for c in [-5.0, -0.3, 0.0, 2.0, 100.0] {
                assert_eq!(kind.eval(0.0, c), 0.0, "{kind} at C={c}");
            }
        }
    }

    #[test]
    fn guard_keeps_values_finite() {
        for kind in [TM1, TM3, TM4] {
            let v = kind.eval(50.0f64, 50.0);
            assert!(v.is_finite());
            let (dr, dc) = kind.partials(50.0f64, 50.0);
            assert!(dr.is_finite() && dc.is_finite());
        }
    }

    #[test]
    fn tensor_shape_mismatch() {
        let r = Tensor::<f64>::zeros(&[2, 2]);
        let c = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(cooperate(&r, &c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn field_examples() {
        let g = sample_field(Cooperation, -1.0, 1.0, -1.0, 1.0, 3).unwrap();
        assert_eq!(g.value.shape(), &[3, 3]);
        assert_eq!(g.value.at(1, 1), 0.0);

        let g = sample_field(TM2, -2.0, 2.0, -3.0, 1.0, 9).unwrap();
        for (i, r) in g.r_axis.iter().enumerate() {
            for (j, c) in g.c_axis.iter().enumerate() {
                assert_eq!(g.value.at(i, j), r * (1.0 + c));
            }
        }
        assert!(sample_field(Cooperation, 1.0, 1.0, 0.0, 1.0, 5).is_err());
        assert!(sample_field(Cooperation, 0.0, 1.0, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn parse_kinds() {
        for k in ModulationKind::ALL {
            assert_eq!(k.name().parse::<ModulationKind>().unwrap(), k);
        }
        assert!("tm5".parse::<ModulationKind>().is_err());
    }

    #[test]
    fn csv_header() {
        let g = sample_field(Cooperation, -1.0, 1.0, -1.0, 1.0, 2).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("R,C,value,dR,dC\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
