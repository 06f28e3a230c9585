use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::InversionError;
use crate::backend::Latent;

/// Form of the color-style term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsVariant {
    /// `‖c − s‖² − ‖c_gt − s‖²`
    Literal,
    /// `|‖c − s‖² − ‖c_gt − s‖²|`
    Absolute,
}

/// Loss values of one step. Regularizers are `None` when their token is
/// inactive at the sampled timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub l_r: f64,
    pub l_cs: Option<f64>,
    pub l_o: Option<f64>,
    pub l_inv: f64,
}

fn check_dims(vs: &[&Array1<f64>]) -> Result<(), InversionError> {
    let d = vs[0].len();
    for v in vs {
        if v.len() != d {
            return Err(InversionError::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    Ok(())
}

fn sq(v: &Array1<f64>) -> f64 {
    v.dot(v)
}

/// Mean squared error over every element of every batch item.
pub fn reconstruction_loss(noise: &[Latent], pred: &[Latent]) -> Result<f64, InversionError> {
    if noise.len() != pred.len() || noise.is_empty() {
        return Err(InversionError::InvalidConfig("noise and prediction batches differ".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (e, p) in noise.iter().zip(pred) {
        if e.shape() != p.shape() {
            return Err(InversionError::DimensionMismatch {
                expected: e.len(),
                got: p.len(),
            });
        }
        total += e.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n += e.len();
    }
    Ok(total / n as f64)
}

fn cs_inner(c: &Array1<f64>, s: &Array1<f64>, c_gt: &Array1<f64>) -> f64 {
    sq(&(c - s)) - sq(&(c_gt - s))
}

pub fn color_style_loss(
    c: &Array1<f64>,
    s: &Array1<f64>,
    c_gt: &Array1<f64>,
    variant: CsVariant,
) -> Result<f64, InversionError> {
    check_dims(&[c, s, c_gt])?;
    let f = cs_inner(c, s, c_gt);
    Ok(match variant {
        CsVariant::Literal => f,
        CsVariant::Absolute => f.abs(),
    })
}

/// `∂L_CS/∂c`; the absolute variant uses `sign(0) = 0`.
pub fn color_style_grad(
    c: &Array1<f64>,
    s: &Array1<f64>,
    c_gt: &Array1<f64>,
    variant: CsVariant,
) -> Result<Array1<f64>, InversionError> {
    check_dims(&[c, s, c_gt])?;
    let g = (c - s) * 2.0;
    Ok(match variant {
        CsVariant::Literal => g,
        CsVariant::Absolute => {
            let f = cs_inner(c, s, c_gt);
            let sign = if f > 0.0 {
                1.0
            } else if f < 0.0 {
                -1.0
            } else {
                0.0
            };
            g * sign
        }
    })
}

pub fn object_loss(o: &Array1<f64>, o_gt: &Array1<f64>) -> Result<f64, InversionError> {
    check_dims(&[o, o_gt])?;
    Ok(sq(&(o - o_gt)))
}

pub fn object_grad(o: &Array1<f64>, o_gt: &Array1<f64>) -> Result<Array1<f64>, InversionError> {
    check_dims(&[o, o_gt])?;
    Ok((o - o_gt) * 2.0)
}

/// Inputs to the regularizers; `c` and `o` are `Some` only when the token
/// is active.
#[derive(Debug, Clone, Copy)]
pub struct RegularizerInputs<'a> {
    pub c: Option<&'a Array1<f64>>,
    pub o: Option<&'a Array1<f64>>,
    pub style: &'a Array1<f64>,
    pub c_gt: &'a Array1<f64>,
    pub o_gt: &'a Array1<f64>,
}

/// `L_inv = L_R + λ_CS·L_CS + λ_O·L_O` with inactive terms omitted.
pub fn compute_losses(
    noise: &[Latent],
    pred: &[Latent],
    reg: Option<RegularizerInputs<'_>>,
    lambda_cs: f64,
    lambda_o: f64,
    variant: CsVariant,
) -> Result<Losses, InversionError> {
    let l_r = reconstruction_loss(noise, pred)?;
    let (mut l_cs, mut l_o) = (None, None);
    if let Some(r) = reg {
        if let Some(c) = r.c {
            l_cs = Some(color_style_loss(c, r.style, r.c_gt, variant)?);
        }
        if let Some(o) = r.o {
            l_o = Some(object_loss(o, r.o_gt)?);
        }
    }
    let l_inv = l_r + lambda_cs * l_cs.unwrap_or(0.0) + lambda_o * l_o.unwrap_or(0.0);
    Ok(Losses { l_r, l_cs, l_o, l_inv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn color_style_cancels_at_ground_truth() {
        let c = array![0.3, -0.1, 0.7];
        let s = array![1.0, 0.0, 0.2];
        for v in [CsVariant::Literal, CsVariant::Absolute] {
            assert_eq!(color_style_loss(&c, &s, &c, v).unwrap(), 0.0);
        }
        assert_eq!(object_loss(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn color_style_small_case() {
        let c = array![1.0, 0.0];
        let s = array![0.0, 0.0];
        let c_gt = array![0.0, 1.0];
        assert_eq!(color_style_loss(&c, &s, &c_gt, CsVariant::Literal).unwrap(), 0.0);
        let c2 = array![2.0, 0.0];
        assert_eq!(color_style_loss(&c2, &s, &c_gt, CsVariant::Literal).unwrap(), 3.0);
        let c3 = array![0.5, 0.0];
        assert_eq!(color_style_loss(&c3, &s, &c_gt, CsVariant::Literal).unwrap(), -0.75);
        assert_eq!(color_style_loss(&c3, &s, &c_gt, CsVariant::Absolute).unwrap(), 0.75);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        assert!(object_loss(&array![1.0], &array![1.0, 2.0]).is_err());
    }

    #[test]
    fn inactive_terms_are_omitted() {
        let z = Latent::zeros((1, 2, 2));
        let p = Latent::from_elem((1, 2, 2), 0.5);
        let l = compute_losses(&[z], &[p], None, 0.1, 0.1, CsVariant::Absolute).unwrap();
        assert_eq!(l.l_r, 0.25);
        assert_eq!(l.l_inv, 0.25);
        assert!(l.l_cs.is_none() && l.l_o.is_none());
    }
}
