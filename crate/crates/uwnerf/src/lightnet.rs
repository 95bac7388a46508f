//! Variational background-light estimator.
//!
//! The global background light `A` of the formation model is independent of
//! the rendered content, so it is not decoded from ray features.  Instead
//! the source image whose optical axis lies closest to the target view is
//! pushed through a small variational encoder/decoder: four stride-2
//! convolutions summarise the image into a latent Gaussian, a sample from
//! that Gaussian (its mean at evaluation time) is decoded back up to a
//! full-resolution colour map, and a final sigmoid keeps the map inside
//! `[0, 1]`.  The latent statistics feed the KL regulariser, and the
//! smoothness pressure on `A` comes from the global-consistency loss rather
//! than from the architecture.

use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dataset::Pose;
use crate::error::UwError;
use crate::formation::BackgroundLight;
use crate::geometry::nearness;
use crate::nn::{self, BoundParams, ParamStore};
use crate::Result;

/// Layer widths of the background-light estimator.
///
/// The encoder applies one stride-2 convolution per entry of
/// `encoder_widths`, so input sides must be divisible by
/// 2^4 = 16; the decoder mirrors this with one x2 upsampling per entry of
/// `decoder_widths` plus a final x2 ahead of the colour projection.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VaeConfig {
    pub encoder_widths: [usize; 4],
    pub latent_dim: usize,
    pub decoder_widths: [usize; 3],
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            encoder_widths: [16, 32, 64, 128],
            latent_dim: 100,
            decoder_widths: [128, 64, 32],
        }
    }
}

/// Side-length divisor imposed by the four stride-2 encoder stages.
pub const SIZE_DIVISOR: usize = 16;

impl VaeConfig {
    /// Checks the widths are usable (everything positive).
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(UwError::InvalidConfig(
                "light estimator latent dimension must be >= 1".into(),
            ));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(UwError::InvalidConfig(
                "light estimator layer widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Whether the latent is sampled (training) or fixed at its mean (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightMode {
    Train,
    Eval,
}

/// Tape-resident background-light estimate: the decoded map plus the latent
/// statistics, all carrying gradients.
#[derive(Debug, Clone, Copy)]
pub struct BackgroundLightVars {
    /// Decoded ambient colour map, `[3, H, W]`, values in `[0, 1]`.
    pub a: Var,
    /// Latent mean, `[1, latent_dim]`.
    pub mu: Var,
    /// Latent log-variance, `[1, latent_dim]`.
    pub log_var: Var,
    /// Latent the map was decoded from (`mu` in eval mode), `[1, latent_dim]`.
    pub z: Var,
}

/// Registers the estimator's parameters under the `lightnet.` prefix.
pub fn init_lightnet(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &VaeConfig) -> Result<()> {
    cfg.validate()?;
    let mut in_ch = 3;
    for (i, &w) in cfg.encoder_widths.iter().enumerate() {
        nn::init_conv(store, rng, &format!("lightnet.enc{}", i + 1), in_ch, w, 3, 1.0);
        in_ch = w;
    }
    nn::init_linear(store, rng, "lightnet.mu", in_ch, cfg.latent_dim);
    nn::init_linear(store, rng, "lightnet.logvar", in_ch, cfg.latent_dim);
    nn::init_linear(store, rng, "lightnet.seed", cfg.latent_dim, cfg.decoder_widths[0]);
    let mut dec_in = cfg.decoder_widths[0];
    for (i, &w) in cfg.decoder_widths.iter().enumerate() {
        nn::init_conv(store, rng, &format!("lightnet.dec{}", i + 1), dec_in, w, 3, 1.0);
        dec_in = w;
    }
    nn::init_conv(store, rng, "lightnet.proj", dec_in, 3, 3, 1.0);
    Ok(())
}

/// Picks the source whose optical axis is closest to the target's,
/// tie-broken by camera-center distance and then by position in the list.
pub fn select_nearest_source<'a, T>(target: &Pose, sources: &'a [(Pose, T)]) -> Result<&'a T> {
    let best = sources
        .iter()
        .enumerate()
        .min_by(|(ia, (pa, _)), (ib, (pb, _))| {
            let (sa, sb) = (nearness(target, pa), nearness(target, pb));
            sa.partial_cmp(&sb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        })
        .ok_or_else(|| UwError::Render("no source views to estimate light from".into()))?;
    Ok(&best.1 .1)
}

/// Core VAE pass; `noise` of shape `[1, latent_dim]` selects training-style
/// sampling (`z = mu + sigma * noise`), `None` decodes from the mean.
fn run_vae(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &VaeConfig,
    image: &Array3<f64>,
    noise: Option<ArrayD<f64>>,
) -> Result<BackgroundLightVars> {
    cfg.validate()?;
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(UwError::Shape(format!(
            "light estimator expects a 3-channel image, got {c}"
        )));
    }
    if h == 0 || w == 0 || h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
        return Err(UwError::Shape(format!(
            "light estimator needs sides divisible by {SIZE_DIVISOR}, got {h}x{w}"
        )));
    }

    // Encoder: four stride-2 convolutions, then a spatial average into one
    // descriptor row for the two latent projections.
    let mut x = tape.leaf(nn::hwc_to_chw(image));
    for i in 1..=cfg.encoder_widths.len() {
        x = nn::conv(tape, bound, &format!("lightnet.enc{i}"), x, 2, 1);
        x = tape.relu(x);
    }
    let pooled = tape.channel_mean(x);
    let last_width = *cfg.encoder_widths.last().expect("widths fixed at 4");
    let row = tape.reshape(pooled, &[1, last_width]);
    let mu = nn::linear(tape, bound, "lightnet.mu", row);
    let log_var = nn::linear(tape, bound, "lightnet.logvar", row);

    // Reparameterised latent: z = mu + exp(log_var / 2) * eta.
    let z = match noise {
        None => mu,
        Some(eta) => {
            if eta.shape() != [1, cfg.latent_dim] {
                return Err(UwError::Shape(format!(
                    "latent noise shape {:?} != [1, {}]",
                    eta.shape(),
                    cfg.latent_dim
                )));
            }
            let half = tape.scale(log_var, 0.5);
            let sigma = tape.exp(half);
            let eta = tape.leaf(eta);
            let scaled = tape.mul(sigma, eta);
            tape.add(mu, scaled)
        }
    };

    // Decoder: broadcast the projected latent into a low-resolution seed,
    // then alternate x2 upsampling with 3x3 convolutions.
    let (h16, w16) = (h / SIZE_DIVISOR, w / SIZE_DIVISOR);
    let seed_row = nn::linear(tape, bound, "lightnet.seed", z);
    let tiled = tape.repeat_rows(seed_row, h16 * w16);
    let tiled_t = tape.transpose(tiled);
    let mut y = tape.reshape(tiled_t, &[cfg.decoder_widths[0], h16, w16]);
    for i in 1..=cfg.decoder_widths.len() {
        y = tape.upsample2(y);
        y = nn::conv(tape, bound, &format!("lightnet.dec{i}"), y, 1, 1);
        y = tape.relu(y);
    }
    y = tape.upsample2(y);
    y = nn::conv(tape, bound, "lightnet.proj", y, 1, 1);
    let a = tape.sigmoid(y);

    Ok(BackgroundLightVars { a, mu, log_var, z })
}

/// Estimates the background light on an existing tape so gradients reach
/// both the estimator's parameters and the KL term's latent statistics.
///
/// The image must be `H x W x 3` with both sides divisible by
/// [`SIZE_DIVISOR`]; in [`LightMode::Train`] the latent is sampled with
/// standard-normal noise drawn from `rng`.
pub fn estimate_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &VaeConfig,
    image: &Array3<f64>,
    mode: LightMode,
    rng: &mut impl Rng,
) -> Result<BackgroundLightVars> {
    let noise = match mode {
        LightMode::Eval => None,
        LightMode::Train => {
            let mut eta = ArrayD::zeros(IxDyn(&[1, cfg.latent_dim]));
            for v in eta.iter_mut() {
                *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            Some(eta)
        }
    };
    run_vae(tape, bound, cfg, image, noise)
}

/// Convenience wrapper producing a plain [`BackgroundLight`] (no gradient
/// bookkeeping), validated before it is returned.
pub fn estimate_background_light(
    store: &ParamStore,
    cfg: &VaeConfig,
    image: &Array3<f64>,
    mode: LightMode,
    rng: &mut impl Rng,
) -> Result<BackgroundLight> {
    let mut tape = Tape::new(false);
    let bound = store.bind(&mut tape);
    let vars = estimate_on_tape(&mut tape, &bound, cfg, image, mode, rng)?;
    let flatten = |v: Var, tape: &Tape| -> Array1<f64> {
        Array1::from_iter(tape.value(v).iter().copied())
    };
    let light = BackgroundLight {
        a: nn::chw_to_hwc(tape.value(vars.a)),
        mu: flatten(vars.mu, &tape),
        log_var: flatten(vars.log_var, &tape),
        z: flatten(vars.z, &tape),
    };
    light.validate()?;
    Ok(light)
}
