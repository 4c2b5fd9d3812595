use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{clamped_ln, Tape, Var};

/// Generator objective variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GLossMode {
    /// `mean ln(1 - D(G(z)))`, minimized.
    Saturating,
    /// `-mean ln D(G(z))`, minimized.
    #[default]
    NonSaturating,
}

impl GLossMode {
    pub fn name(self) -> &'static str {
        match self {
            GLossMode::Saturating => "saturating",
            GLossMode::NonSaturating => "non_saturating",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "saturating" => Some(GLossMode::Saturating),
            "non_saturating" | "non-saturating" => Some(GLossMode::NonSaturating),
            _ => None,
        }
    }
}

fn mean_ln(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += clamped_ln(v);
        n += 1;
    }
    s / n as f64
}

fn non_empty(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        Err(Error::EmptyBatch)
    } else {
        Ok(())
    }
}

/// `-[mean ln D(real) + mean ln(1 - D(fake))]`.
pub fn d_loss_value(p_real: &[f64], p_fake: &[f64]) -> Result<f64> {
    non_empty(p_real)?;
    non_empty(p_fake)?;
    Ok(-(mean_ln(p_real.iter().copied()) + mean_ln(p_fake.iter().map(|p| 1.0 - p))))
}

pub fn g_loss_value(p_fake: &[f64], mode: GLossMode) -> Result<f64> {
    non_empty(p_fake)?;
    Ok(match mode {
        GLossMode::Saturating => mean_ln(p_fake.iter().map(|p| 1.0 - p)),
        GLossMode::NonSaturating => -mean_ln(p_fake.iter().copied()),
    })
}

fn check_targets(probs_shape: &[usize], targets: &[f64]) -> Result<usize> {
    let (n, k) = match probs_shape {
        [n, k] if *n > 0 && *k > 0 => (*n, *k),
        [0, _] => return Err(Error::EmptyBatch),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "ce_soft",
                left: probs_shape.to_vec(),
                right: vec![],
            })
        }
    };
    if targets.len() != n * k {
        return Err(Error::ShapeMismatch {
            op: "ce_soft",
            left: probs_shape.to_vec(),
            right: vec![targets.len()],
        });
    }
    for (row, t) in targets.chunks(k).enumerate() {
        let sum: f64 = t.iter().sum();
        if sum.is_nan() || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::MalformedTarget { row, sum });
        }
    }
    Ok(k)
}

/// Soft-target cross-entropy `-(1/N) Σ_i Σ_c t_ic ln p_ic` over an `N×k`
/// probability matrix; every target row must sum to one within `1e-6`.
pub fn ce_soft_value(probs: &[f64], shape: [usize; 2], targets: &[f64]) -> Result<f64> {
    check_targets(&shape, targets)?;
    if probs.len() != shape[0] * shape[1] {
        return Err(Error::ValueCount {
            shape: shape.to_vec(),
            expected: shape[0] * shape[1],
            actual: probs.len(),
        });
    }
    let total: f64 = probs.iter().zip(targets).map(|(p, t)| t * clamped_ln(*p)).sum();
    Ok(-total / shape[0] as f64)
}

/// Records [`d_loss_value`] on the tape.
pub fn d_loss(tape: &mut Tape, p_real: Var, p_fake: Var) -> Result<Var> {
    non_empty(tape.value(p_real))?;
    non_empty(tape.value(p_fake))?;
    let lr = tape.log(p_real);
    let real = tape.mean(lr);
    let nf = tape.neg(p_fake);
    let one_minus = tape.add_scalar(nf, 1.0);
    let lf = tape.log(one_minus);
    let fake = tape.mean(lf);
    let total = tape.add(real, fake)?;
    Ok(tape.neg(total))
}

/// Records [`g_loss_value`] on the tape.
pub fn g_loss(tape: &mut Tape, p_fake: Var, mode: GLossMode) -> Result<Var> {
    non_empty(tape.value(p_fake))?;
    Ok(match mode {
        GLossMode::Saturating => {
            let nf = tape.neg(p_fake);
            let one_minus = tape.add_scalar(nf, 1.0);
            let l = tape.log(one_minus);
            tape.mean(l)
        }
        GLossMode::NonSaturating => {
            let l = tape.log(p_fake);
            let m = tape.mean(l);
            tape.neg(m)
        }
    })
}

/// Records [`ce_soft_value`] on the tape.
pub fn ce_soft(tape: &mut Tape, probs: Var, targets: &[f64]) -> Result<Var> {
    let shape: Vec<usize> = tape.shape(probs).to_vec();
    check_targets(&shape, targets)?;
    let n = shape[0] as f64;
    let t = tape.constant_from(&shape, targets.to_vec())?;
    let lp = tape.log(probs);
    let weighted = tape.mul(t, lp)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, -1.0 / n))
}
