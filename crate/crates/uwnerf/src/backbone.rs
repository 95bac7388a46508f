//! Per-source-view convolutional feature extraction.
//!
//! A U-Net-style network encodes each source image to 1/16 resolution and
//! decodes back up through two upsampling stages with skip connections,
//! producing a feature grid at 1/4 of the image resolution.  The source
//! RGB (average-pooled to the same resolution) is concatenated onto the
//! last three channels so attention over epipolar samples can see raw
//! colors directly.  Two encoders share this layout: a ResNet34-style
//! `Full` stack for real scenes and a three-stage `Tiny` stack that keeps
//! gradient-check and end-to-end tests desk-sized.

use nalgebra::Vector2;
use ndarray::{Array1, Array3};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::nn::{chw_to_hwc, concat_channels, conv, hwc_to_chw, init_conv, BoundParams, ParamStore};
use crate::{Result, UwError};

/// Every encoder reduces to 1/16 resolution before decoding.
pub const ENCODER_STRIDE: usize = 16;
/// Two decoder upsampling stages bring the grid to 1/4 resolution.
pub const GRID_STRIDE: usize = 4;

/// Encoder capacity: `Full` is the real-scene network, `Tiny` a narrow
/// three-stage stand-in with identical interface used by fast tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EncoderDepth {
    Full,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub encoder_depth: EncoderDepth,
    /// Channel count of the decoder output (RGB adds 3 more).
    pub feature_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            encoder_depth: EncoderDepth::Full,
            feature_width: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_width < 4 {
            return Err(UwError::InvalidConfig(format!(
                "feature_width must be at least 4, got {}",
                self.feature_width
            )));
        }
        Ok(())
    }

    /// Channels of the produced grid: learned features plus RGB.
    pub fn d_feat(&self) -> usize {
        self.feature_width + 3
    }
}

/// Features of one source view on a regular grid.  Grid node `(gy, gx)`
/// sits at image pixel `stride*g + (stride-1)/2` (pixel centers), i.e. the
/// center of the stride-sized cell it summarizes.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    /// `[H', W', d_feat]` feature array.
    pub data: Array3<f64>,
    /// Image pixels per grid cell.
    pub stride: usize,
    /// Index of the source view this grid came from.
    pub source_id: usize,
}

/// Registers all backbone weights under `backbone.`.
pub fn init_backbone(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &BackboneConfig) {
    match config.encoder_depth {
        EncoderDepth::Tiny => {
            init_conv(store, rng, "backbone.tiny.enc1", 3, 8, 3, 1.0);
            init_conv(store, rng, "backbone.tiny.enc2", 8, 16, 3, 1.0);
            init_conv(store, rng, "backbone.tiny.enc3", 16, 16, 3, 1.0);
            init_conv(store, rng, "backbone.tiny.dec1", 32, 16, 3, 1.0);
            init_conv(store, rng, "backbone.tiny.dec2", 24, config.feature_width, 3, 1.0);
        }
        EncoderDepth::Full => {
            init_conv(store, rng, "backbone.full.conv1", 3, 64, 7, 1.0);
            let layers: [(usize, usize, usize); 3] = [(3, 64, 64), (4, 64, 128), (6, 128, 256)];
            for (li, &(blocks, in_ch, out_ch)) in layers.iter().enumerate() {
                for b in 0..blocks {
                    let prefix = format!("backbone.full.layer{}.block{b}", li + 1);
                    let bin = if b == 0 { in_ch } else { out_ch };
                    init_conv(store, rng, &format!("{prefix}.conv1"), bin, out_ch, 3, 1.0);
                    // Quiet second conv keeps each residual branch close to
                    // the identity at initialization (no normalization
                    // layers to rein the stack in otherwise).
                    init_conv(store, rng, &format!("{prefix}.conv2"), out_ch, out_ch, 3, 0.1);
                    if bin != out_ch {
                        init_conv(store, rng, &format!("{prefix}.down"), bin, out_ch, 1, 1.0);
                    }
                }
            }
            init_conv(store, rng, "backbone.full.dec1", 256 + 128, 128, 3, 1.0);
            init_conv(store, rng, "backbone.full.dec2", 128 + 64, config.feature_width, 3, 1.0);
        }
    }
}

/// One pre-activation-free residual block: `relu(shortcut + conv2(relu(conv1(x))))`.
fn residual_block(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    stride: usize,
    has_down: bool,
) -> Var {
    let h = conv(tape, bound, &format!("{prefix}.conv1"), x, stride, 1);
    let h = tape.relu(h);
    let h = conv(tape, bound, &format!("{prefix}.conv2"), h, 1, 1);
    let shortcut = if has_down {
        conv(tape, bound, &format!("{prefix}.down"), x, stride, 0)
    } else {
        x
    };
    let sum = tape.add(h, shortcut);
    tape.relu(sum)
}

/// Tape-native feature extraction from a `[3, H, W]` image tensor to a
/// `[d_feat, H/4, W/4]` grid; used directly by the training path.
pub fn extract_features_on_tape(
    tape: &mut Tape,
    image: Var,
    bound: &BoundParams,
    config: &BackboneConfig,
) -> Result<Var> {
    config.validate()?;
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(UwError::Shape(format!(
            "expected a [3, H, W] image tensor, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
        return Err(UwError::Shape(format!(
            "image size {h}x{w} is not divisible by the encoder stride \
             {ENCODER_STRIDE}; pad the image first"
        )));
    }

    let features = match config.encoder_depth {
        EncoderDepth::Tiny => {
            let stem = tape.avg_pool(image, 2); // /2
            let e1 = conv(tape, bound, "backbone.tiny.enc1", stem, 2, 1); // /4
            let e1 = tape.relu(e1);
            let e2 = conv(tape, bound, "backbone.tiny.enc2", e1, 2, 1); // /8
            let e2 = tape.relu(e2);
            let e3 = conv(tape, bound, "backbone.tiny.enc3", e2, 2, 1); // /16
            let e3 = tape.relu(e3);
            let up1 = tape.upsample2(e3); // /8
            let cat1 = concat_channels(tape, &[up1, e2]);
            let d1 = conv(tape, bound, "backbone.tiny.dec1", cat1, 1, 1);
            let d1 = tape.relu(d1);
            let up2 = tape.upsample2(d1); // /4
            let cat2 = concat_channels(tape, &[up2, e1]);
            conv(tape, bound, "backbone.tiny.dec2", cat2, 1, 1)
        }
        EncoderDepth::Full => {
            let c1 = conv(tape, bound, "backbone.full.conv1", image, 2, 3); // /2
            let c1 = tape.relu(c1);
            let mut x = tape.avg_pool(c1, 2); // /4
            let mut skips = Vec::new();
            let layers: [(usize, usize, usize); 3] = [(3, 64, 64), (4, 64, 128), (6, 128, 256)];
            for (li, &(blocks, in_ch, out_ch)) in layers.iter().enumerate() {
                for b in 0..blocks {
                    let prefix = format!("backbone.full.layer{}.block{b}", li + 1);
                    let first = b == 0;
                    let stride = if first && li > 0 { 2 } else { 1 };
                    let has_down = first && in_ch != out_ch;
                    x = residual_block(tape, bound, &prefix, x, stride, has_down);
                }
                skips.push(x);
            }
            // skips = [/4 with 64ch, /8 with 128ch, /16 with 256ch]
            let up1 = tape.upsample2(skips[2]); // /8
            let cat1 = concat_channels(tape, &[up1, skips[1]]);
            let d1 = conv(tape, bound, "backbone.full.dec1", cat1, 1, 1);
            let d1 = tape.relu(d1);
            let up2 = tape.upsample2(d1); // /4
            let cat2 = concat_channels(tape, &[up2, skips[0]]);
            conv(tape, bound, "backbone.full.dec2", cat2, 1, 1)
        }
    };
    let rgb = tape.avg_pool(image, GRID_STRIDE);
    Ok(concat_channels(tape, &[features, rgb]))
}

/// Extracts the feature grid of one source image (`[H, W, 3]` in `[0,1]`)
/// outside any training tape.
pub fn extract_features(
    image: &Array3<f64>,
    store: &ParamStore,
    config: &BackboneConfig,
    source_id: usize,
) -> Result<FeatureGrid> {
    let mut tape = Tape::new(false);
    let bound = store.bind(&mut tape);
    let leaf = tape.leaf(hwc_to_chw(image));
    let out = extract_features_on_tape(&mut tape, leaf, &bound, config)?;
    let data = chw_to_hwc(tape.value(out));
    if data.iter().any(|v| !v.is_finite()) {
        return Err(UwError::Render(
            "feature extraction produced a non-finite value".into(),
        ));
    }
    Ok(FeatureGrid {
        data,
        stride: GRID_STRIDE,
        source_id,
    })
}

/// Converts an image-pixel coordinate to continuous grid coordinates.
pub fn pixel_to_grid(stride: usize, z: Vector2<f64>) -> (f64, f64) {
    let off = (stride - 1) as f64 / 2.0;
    let s = stride as f64;
    ((z.x - off) / s, (z.y - off) / s)
}

/// Bilinearly interpolates the grid at an image-pixel position.  Positions
/// landing outside the grid are clamped to the border and flagged invalid
/// (`false`) so downstream attention can mask them out.
pub fn bilinear_sample(grid: &FeatureGrid, z: Vector2<f64>) -> (Array1<f64>, bool) {
    let (gh, gw, d) = grid.data.dim();
    let (gx, gy) = pixel_to_grid(grid.stride, z);
    let valid = gx >= 0.0 && gx <= (gw - 1) as f64 && gy >= 0.0 && gy <= (gh - 1) as f64;
    let cx = gx.clamp(0.0, (gw - 1) as f64);
    let cy = gy.clamp(0.0, (gh - 1) as f64);
    let x0 = (cx.floor() as usize).min(gw - 1);
    let y0 = (cy.floor() as usize).min(gh - 1);
    let x1 = (x0 + 1).min(gw - 1);
    let y1 = (y0 + 1).min(gh - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let mut out = Array1::<f64>::zeros(d);
    for c in 0..d {
        out[c] = (1.0 - fy) * ((1.0 - fx) * grid.data[[y0, x0, c]] + fx * grid.data[[y0, x1, c]])
            + fy * ((1.0 - fx) * grid.data[[y1, x0, c]] + fx * grid.data[[y1, x1, c]]);
    }
    (out, valid)
}
