//! The self-supervised objective.
//!
//! Training never sees a clean image: the only anchor is that the composed
//! components must reproduce the degraded observation, and five regularisers
//! push the decomposition toward the physically meaningful one:
//!
//! * reconstruction — composed patches match the captured patches (MSE);
//! * contrast — a haze-free radiance has per-pixel saturation close to
//!   brightness;
//! * colour constancy — the restored radiance is gray-world balanced;
//! * KL — the light estimator's latent stays near a standard normal;
//! * transmission consistency — backscatter falls off exponentially with a
//!   per-channel rate, so log-ratios between channels are spatially constant;
//! * light smoothness — the background light varies slowly, measured as the
//!   mean variance inside a sliding window.
//!
//! All patch losses take `[3, h, w]` tensors (the decode-head layout) and
//! reduce by means over elements rather than sums, which keeps the loss
//! weights independent of patch size and batch size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::UwError;
use crate::formation::EPSILON_T;
use crate::Result;

/// Floor of the brightness denominator in the saturation computation.
pub const EPSILON_S: f64 = 1e-6;

/// Side of the sliding window used by the light-smoothness loss.
pub const SMOOTH_WINDOW: usize = 7;

/// Weights of the six loss terms.
///
/// `glob` defaults to 0.1; raising it to 1.0 trades reconstruction
/// sharpness for a smoother background-light map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub con: f64,
    pub col: f64,
    pub kl: f64,
    pub trans: f64,
    pub glob: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            con: 0.1,
            col: 1.0,
            kl: 1.0,
            trans: 0.1,
            glob: 0.1,
        }
    }
}

impl LossWeights {
    /// Checks every weight is finite and nonnegative.
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !w.is_finite() || w < 0.0 {
                return Err(UwError::InvalidConfig(format!(
                    "loss weight {name} = {w} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("rec", self.rec),
            ("con", self.con),
            ("col", self.col),
            ("kl", self.kl),
            ("trans", self.trans),
            ("glob", self.glob),
        ]
    }
}

/// Unweighted values of the six terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub rec: f64,
    pub con: f64,
    pub col: f64,
    pub kl: f64,
    pub trans: f64,
    pub glob: f64,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("rec", self.rec),
            ("con", self.con),
            ("col", self.col),
            ("kl", self.kl),
            ("trans", self.trans),
            ("glob", self.glob),
        ]
    }
}

/// Per-step record of the six unweighted terms and their weighted total,
/// serialized as one line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub con: f64,
    pub col: f64,
    pub kl: f64,
    pub trans: f64,
    pub glob: f64,
    pub total: f64,
}

/// Largest negative value a term may take before it is treated as a bug
/// rather than floating-point dust (each term is nonnegative analytically).
const TERM_DUST: f64 = 1e-12;

/// Combines unweighted terms into a [`LossReport`].
///
/// Terms are checked for NaN and for impossible (beyond rounding error)
/// negative values; tiny negative dust is clamped to zero so every reported
/// term is nonnegative and `total` equals the weighted sum of the reported
/// terms exactly.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let mut clean = [0.0; 6];
    for (slot, (name, t)) in clean.iter_mut().zip(terms.named()) {
        if t.is_nan() {
            return Err(UwError::Numeric(format!("loss term {name} is NaN")));
        }
        if !t.is_finite() {
            return Err(UwError::Numeric(format!("loss term {name} is {t}")));
        }
        if t < -TERM_DUST {
            return Err(UwError::Numeric(format!(
                "loss term {name} = {t} is negative beyond rounding error"
            )));
        }
        *slot = t.max(0.0);
    }
    let [rec, con, col, kl, trans, glob] = clean;
    let total = weights.rec * rec
        + weights.con * con
        + weights.col * col
        + weights.kl * kl
        + weights.trans * trans
        + weights.glob * glob;
    Ok(LossReport {
        rec,
        con,
        col,
        kl,
        trans,
        glob,
        total,
    })
}

/// The six terms as tape nodes, ready to be weighted into one objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTermVars {
    pub rec: Var,
    pub con: Var,
    pub col: Var,
    pub kl: Var,
    pub trans: Var,
    pub glob: Var,
}

/// Weighted total on the tape plus the matching report.
///
/// The returned [`Var`] is the differentiable objective (built from the raw
/// term nodes); the report clamps sub-rounding-error negatives to zero, so
/// the two totals agree to well under 1e-9.
pub fn total_on_tape(
    tape: &mut Tape,
    terms: &LossTermVars,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let values = LossTerms {
        rec: tape.scalar(terms.rec),
        con: tape.scalar(terms.con),
        col: tape.scalar(terms.col),
        kl: tape.scalar(terms.kl),
        trans: tape.scalar(terms.trans),
        glob: tape.scalar(terms.glob),
    };
    let report = total_loss(&values, weights)?;
    let pairs = [
        (terms.rec, weights.rec),
        (terms.con, weights.con),
        (terms.col, weights.col),
        (terms.kl, weights.kl),
        (terms.trans, weights.trans),
        (terms.glob, weights.glob),
    ];
    let mut total: Option<Var> = None;
    for (term, lambda) in pairs {
        let weighted = tape.scale(term, lambda);
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted),
        });
    }
    Ok((total.expect("six terms"), report))
}

/// Checks a patch node is `[3, h, w]` and returns `(h, w)`.
fn expect_patch(tape: &Tape, v: Var, what: &str) -> Result<(usize, usize)> {
    let s = tape.value(v).shape().to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(UwError::Shape(format!(
            "{what} must be [3, h, w], got {s:?}"
        )));
    }
    Ok((s[1], s[2]))
}

/// Mean squared error between composed patches and their observed targets.
pub fn reconstruction_loss(tape: &mut Tape, pred: &[Var], target: &[Var]) -> Result<Var> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(UwError::Shape(format!(
            "reconstruction loss needs matching nonempty batches, got {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (&p, &t) in pred.iter().zip(target) {
        let (ps, ts) = (tape.value(p).shape().to_vec(), tape.value(t).shape().to_vec());
        if ps != ts {
            return Err(UwError::Shape(format!(
                "prediction {ps:?} does not match target {ts:?}"
            )));
        }
        count += tape.value(p).len();
        let d = tape.sub(p, t);
        let sq = tape.mul(d, d);
        let s = tape.sum(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s),
        });
    }
    Ok(tape.scale(acc.expect("nonempty batch"), 1.0 / count as f64))
}

/// Mean squared gap between per-pixel brightness and saturation of the
/// restored radiance; haze shows up as bright, unsaturated pixels.
///
/// Brightness is `V = max(R, G, B)`; saturation is
/// `S = (V - min(R, G, B)) / max(V, EPSILON_S)`.
pub fn contrast_loss(tape: &mut Tape, radiance: &[Var]) -> Result<Var> {
    if radiance.is_empty() {
        return Err(UwError::Shape("contrast loss: empty patch batch".into()));
    }
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for &j in radiance {
        let (h, w) = expect_patch(tape, j, "radiance patch")?;
        count += h * w;
        let v = tape.channel_max(j);
        let mn = tape.channel_min(j);
        let chroma = tape.sub(v, mn);
        let denom = tape.clamp(v, EPSILON_S, f64::INFINITY);
        let s = tape.div(chroma, denom);
        let gap = tape.sub(v, s);
        let sq = tape.mul(gap, gap);
        let total = tape.sum(sq);
        acc = Some(match acc {
            None => total,
            Some(a) => tape.add(a, total),
        });
    }
    Ok(tape.scale(acc.expect("nonempty batch"), 1.0 / count as f64))
}

/// Gray-world colour constancy: squared deviation of each channel's mean
/// (over the whole batch) from 0.5, summed over the three channels.
pub fn color_constancy_loss(tape: &mut Tape, radiance: &[Var]) -> Result<Var> {
    if radiance.is_empty() {
        return Err(UwError::Shape(
            "color constancy loss: empty patch batch".into(),
        ));
    }
    let mut acc: Option<Var> = None;
    let mut pixels = 0usize;
    for &j in radiance {
        let (h, w) = expect_patch(tape, j, "radiance patch")?;
        pixels += h * w;
        let cm = tape.channel_mean(j);
        let cs = tape.scale(cm, (h * w) as f64);
        acc = Some(match acc {
            None => cs,
            Some(a) => tape.add(a, cs),
        });
    }
    let mean = tape.scale(acc.expect("nonempty batch"), 1.0 / pixels as f64);
    let centered = tape.add_const(mean, -0.5);
    let sq = tape.mul(centered, centered);
    Ok(tape.sum(sq))
}

/// KL divergence of the latent Gaussian from the standard normal,
/// `1/2 * sum(exp(log_var) + mu^2 - 1 - log_var)` over latent dimensions.
pub fn kl_loss(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var> {
    let (ms, ls) = (
        tape.value(mu).shape().to_vec(),
        tape.value(log_var).shape().to_vec(),
    );
    if ms != ls {
        return Err(UwError::Shape(format!(
            "latent statistics disagree: mu {ms:?} vs log_var {ls:?}"
        )));
    }
    let var = tape.exp(log_var);
    let mu2 = tape.mul(mu, mu);
    let s = tape.add(var, mu2);
    let s = tape.add_const(s, -1.0);
    let s = tape.sub(s, log_var);
    let total = tape.sum(s);
    Ok(tape.scale(total, 0.5))
}

/// The three channel pairs whose backscatter log-ratios must be constant.
const CHANNEL_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Penalises spatial variation of between-channel log-backscatter ratios.
///
/// For an exponential backscatter `T_B^c = exp(-beta_c z)` the per-pixel
/// ratio `log T^c1 / log T^c2` is the constant `beta_c1 / beta_c2`, so any
/// variance is a deviation from water-like behaviour.  The ratio's mean is
/// taken per patch; the squared deviations are averaged over all pixels of
/// the batch and summed over the three pairs.  Log arguments are clamped to
/// `[EPSILON_T, 1 - EPSILON_T]` to keep every ratio finite.
pub fn transmission_consistency_loss(tape: &mut Tape, t_b: &[Var]) -> Result<Var> {
    if t_b.is_empty() {
        return Err(UwError::Shape(
            "transmission consistency loss: empty patch batch".into(),
        ));
    }
    let mut pair_sums: [Option<Var>; 3] = [None; 3];
    let mut pixels = 0usize;
    for &t in t_b {
        let (h, w) = expect_patch(tape, t, "backscatter patch")?;
        pixels += h * w;
        let clamped = tape.clamp(t, EPSILON_T, 1.0 - EPSILON_T);
        let logs = tape.ln(clamped);
        let flat = tape.reshape(logs, &[3, h * w]);
        for (slot, &(c1, c2)) in pair_sums.iter_mut().zip(&CHANNEL_PAIRS) {
            let top = tape.select_rows(flat, &[c1]);
            let bottom = tape.select_rows(flat, &[c2]);
            let ratio = tape.div(top, bottom);
            let mean = tape.mean(ratio);
            let dev = tape.sub_scalar(ratio, mean);
            let sq = tape.mul(dev, dev);
            let s = tape.sum(sq);
            *slot = Some(match *slot {
                None => s,
                Some(a) => tape.add(a, s),
            });
        }
    }
    let mut total: Option<Var> = None;
    for slot in pair_sums {
        let pair_mean = tape.scale(slot.expect("nonempty batch"), 1.0 / pixels as f64);
        total = Some(match total {
            None => pair_mean,
            Some(a) => tape.add(a, pair_mean),
        });
    }
    Ok(total.expect("three pairs"))
}

/// Mean local variance of the background-light map: for every pixel and
/// channel, the variance of the surrounding [`SMOOTH_WINDOW`]-sided window
/// (mirror-padded at the borders), averaged over the whole map.
///
/// The variance is formed as `E[x^2] - E[x]^2` and passed through a
/// rectifier to absorb the tiny negative rounding residue a constant window
/// would otherwise produce; at such points the true gradient is zero as
/// well, so the rectifier does not disturb optimization.
pub fn light_smoothness_loss(tape: &mut Tape, a: Var) -> Result<Var> {
    let s = tape.value(a).shape().to_vec();
    if s.len() != 3 {
        return Err(UwError::Shape(format!(
            "light map must be [c, h, w], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    if h < SMOOTH_WINDOW || w < SMOOTH_WINDOW {
        return Err(UwError::Shape(format!(
            "light map {h}x{w} is smaller than the {SMOOTH_WINDOW}x{SMOOTH_WINDOW} window"
        )));
    }
    let pad = SMOOTH_WINDOW / 2;
    let padded = tape.reflect_pad(a, pad);
    let mean = tape.box_mean(padded, SMOOTH_WINDOW);
    let squared = tape.mul(padded, padded);
    let mean_sq = tape.box_mean(squared, SMOOTH_WINDOW);
    let mean2 = tape.mul(mean, mean);
    let var = tape.sub(mean_sq, mean2);
    let var = tape.relu(var);
    Ok(tape.mean(var))
}
