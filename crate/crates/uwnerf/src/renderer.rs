//! The transformer renderer.
//!
//! One ray is traced per image patch.  Along the ray, `M` sample points
//! gather per-source epipolar features from the backbone grids; a stack of
//! alternating blocks refines the per-point tokens — a *view* block
//! cross-attends each point over its source-view bucket, a *ray* block
//! self-attends along the ray — and the tokens are mean-pooled into a
//! single ray feature.  Three convolutional heads decode that feature into
//! the raw (pre-activation) scene radiance and the two transmission maps of
//! an image patch.
//!
//! A classical quadrature compositor ([`volume_render_reference`]) is kept
//! alongside as the density-based baseline and as an independent check on
//! sampling code.

use nalgebra::Vector2;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionStats, Tape, Var};
use crate::backbone::{pixel_to_grid, GRID_STRIDE};
use crate::dataset::Camera;
use crate::error::UwError;
use crate::Result;
use crate::geometry::{pixel_to_ray, project, sample_along_ray};
use crate::nn::{
    init_layer_norm, init_linear, layer_norm, linear, normal, BoundParams, ParamStore,
};

/// Depth gap assigned to the final ray sample, standing in for "to
/// infinity" in the quadrature.
pub const FINAL_DELTA: f64 = 1e10;

/// Shape of the token pipeline.  `depth` counts (view, ray) block pairs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    /// Token width of every block.
    pub dim: usize,
    /// Heads of the view cross-attention; only 1 is supported.
    pub view_heads: usize,
    /// Heads of the ray self-attention.
    pub ray_heads: usize,
    /// Hidden width of the feed-forward sublayers.
    pub ff_hidden: usize,
    /// Number of (view, ray) block pairs.
    pub depth: usize,
    /// Ray samples per rendered patch.
    pub samples_per_ray: usize,
    /// Side length of the square patch decoded per ray.
    pub patch_size: usize,
    /// Adds a learned per-sample-index embedding to the tokens.  Disable to
    /// make the pipeline symmetric under sample reordering (used by tests).
    pub position_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            dim: 64,
            view_heads: 1,
            ray_heads: 4,
            ff_hidden: 256,
            depth: 4,
            samples_per_ray: 192,
            patch_size: 4,
            position_encoding: true,
        }
    }
}

impl TransformerConfig {
    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ff_hidden == 0 || self.samples_per_ray == 0 {
            return Err(UwError::InvalidConfig(
                "transformer: dim, ff_hidden and samples_per_ray must be positive".into(),
            ));
        }
        if self.view_heads != 1 {
            return Err(UwError::InvalidConfig(format!(
                "transformer: only single-headed view attention is supported, got {}",
                self.view_heads
            )));
        }
        if self.ray_heads == 0 || self.dim % self.ray_heads != 0 {
            return Err(UwError::InvalidConfig(format!(
                "transformer: dim {} not divisible into {} ray heads",
                self.dim, self.ray_heads
            )));
        }
        if self.depth == 0 {
            return Err(UwError::InvalidConfig("transformer: depth must be >= 1".into()));
        }
        if !matches!(self.patch_size, 2 | 4 | 8) {
            return Err(UwError::InvalidConfig(format!(
                "transformer: patch size must be 2, 4 or 8, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Number of upsample-and-convolve stages each decode head needs to
    /// grow a 1x1 seed to `patch_size`.
    pub fn decode_stages(&self) -> usize {
        self.patch_size.ilog2() as usize
    }

    /// Channel widths along a decode head: the seed starts at `dim` and
    /// halves per stage, floored at 4.
    fn decode_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.dim];
        for _ in 0..self.decode_stages() {
            widths.push((widths.last().unwrap() / 2).max(4));
        }
        widths
    }
}

/// The three decode head names, in a fixed order.
const DECODE_HEADS: [&str; 3] = ["radiance", "direct", "backscatter"];

/// Registers every renderer parameter under the `gnt.` prefix.  `d_feat` is
/// the backbone feature width the epipolar samples carry.
pub fn init_renderer(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &TransformerConfig,
    d_feat: usize,
) -> Result<()> {
    cfg.validate()?;
    if d_feat == 0 {
        return Err(UwError::InvalidConfig("renderer: d_feat must be positive".into()));
    }
    init_linear(store, rng, "gnt.dir", 3, cfg.dim);
    init_linear(store, rng, "gnt.init", d_feat + cfg.dim, cfg.dim);
    if cfg.position_encoding {
        store.insert(
            "gnt.pos.embed",
            normal(rng, &[cfg.samples_per_ray, cfg.dim], 0.02),
        );
    }
    for b in 0..cfg.depth {
        let view = format!("gnt.view{b}");
        init_layer_norm(store, &format!("{view}.ln1"), cfg.dim);
        init_linear(store, rng, &format!("{view}.q"), cfg.dim, cfg.dim);
        init_linear(store, rng, &format!("{view}.k"), d_feat, cfg.dim);
        init_linear(store, rng, &format!("{view}.v"), d_feat, cfg.dim);
        init_linear(store, rng, &format!("{view}.out"), cfg.dim, cfg.dim);
        init_layer_norm(store, &format!("{view}.ln2"), cfg.dim);
        init_linear(store, rng, &format!("{view}.ff1"), cfg.dim, cfg.ff_hidden);
        init_linear(store, rng, &format!("{view}.ff2"), cfg.ff_hidden, cfg.dim);
        let ray = format!("gnt.ray{b}");
        init_layer_norm(store, &format!("{ray}.ln1"), cfg.dim);
        init_linear(store, rng, &format!("{ray}.q"), cfg.dim, cfg.dim);
        init_linear(store, rng, &format!("{ray}.k"), cfg.dim, cfg.dim);
        init_linear(store, rng, &format!("{ray}.v"), cfg.dim, cfg.dim);
        init_linear(store, rng, &format!("{ray}.out"), cfg.dim, cfg.dim);
        init_layer_norm(store, &format!("{ray}.ln2"), cfg.dim);
        init_linear(store, rng, &format!("{ray}.ff1"), cfg.dim, cfg.ff_hidden);
        init_linear(store, rng, &format!("{ray}.ff2"), cfg.ff_hidden, cfg.dim);
    }
    init_linear(store, rng, "gnt.pool", cfg.dim, cfg.dim);
    let widths = cfg.decode_widths();
    for head in DECODE_HEADS {
        for s in 0..cfg.decode_stages() {
            crate::nn::init_conv(
                store,
                rng,
                &format!("gnt.decode.{head}.stage{s}"),
                widths[s],
                widths[s + 1],
                3,
                1.0,
            );
        }
        crate::nn::init_conv(
            store,
            rng,
            &format!("gnt.decode.{head}.proj"),
            *widths.last().unwrap(),
            3,
            3,
            1.0,
        );
    }
    Ok(())
}

/// Standalone masked scaled-dot-product attention, the reference contract
/// the fused tape ops follow.  `queries` is `[Q, d]`, `keys` `[K, d]`,
/// `values` `[K, dv]`; `masked[q][k] = true` excludes key `k` from query
/// `q`'s softmax.  `heads` must divide both `d` and `dv`.  Returns the
/// attended rows `[Q, dv]` and the softmax matrices `[heads, Q, K]` (masked
/// entries exactly zero).  A query with every key masked is an error: it
/// has no epipolar evidence at all.
pub fn attention(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    masked: &Array2<bool>,
    heads: usize,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (nq, d) = queries.dim();
    let (nk, dk) = keys.dim();
    let (nv, dv) = values.dim();
    if dk != d {
        return Err(UwError::Shape(format!(
            "attention: query width {d} vs key width {dk}"
        )));
    }
    if nv != nk {
        return Err(UwError::Shape(format!(
            "attention: {nk} keys vs {nv} values"
        )));
    }
    if masked.dim() != (nq, nk) {
        return Err(UwError::Shape(format!(
            "attention: mask {:?} does not cover {nq} queries x {nk} keys",
            masked.dim()
        )));
    }
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(UwError::Shape(format!(
            "attention: widths {d}/{dv} not divisible into {heads} heads"
        )));
    }
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::<f64>::zeros((nq, dv));
    let mut probs = Array3::<f64>::zeros((heads, nq, nk));
    for q in 0..nq {
        if (0..nk).all(|k| masked[[q, k]]) {
            return Err(UwError::Render(format!(
                "attention: query {q} has every key masked"
            )));
        }
    }
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (vlo, vhi) = (h * dvh, (h + 1) * dvh);
        for q in 0..nq {
            let mut logits = vec![f64::NEG_INFINITY; nk];
            for k in 0..nk {
                if masked[[q, k]] {
                    continue;
                }
                let mut dot = 0.0;
                for c in lo..hi {
                    dot += queries[[q, c]] * keys[[k, c]];
                }
                logits[k] = scale * dot;
            }
            let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..nk {
                if !masked[[q, k]] {
                    let e = (logits[k] - peak).exp();
                    probs[[h, q, k]] = e;
                    z += e;
                }
            }
            for k in 0..nk {
                probs[[h, q, k]] /= z;
                let p = probs[[h, q, k]];
                if p == 0.0 {
                    continue;
                }
                for c in vlo..vhi {
                    out[[q, c]] += p * values[[k, c]];
                }
            }
        }
    }
    Ok((out, probs))
}

/// One view block: each token cross-attends over its bucket of per-source
/// epipolar features, then passes through a feed-forward sublayer.  Both
/// sublayers pre-normalize and add a residual.
fn view_block(
    tape: &mut Tape,
    bound: &BoundParams,
    b: usize,
    h: Var,
    feats: Var,
    valid: &Array2<bool>,
    audit: &mut Vec<AttentionStats>,
) -> Var {
    let name = format!("gnt.view{b}");
    let nq = layer_norm(tape, bound, &format!("{name}.ln1"), h);
    let q = linear(tape, bound, &format!("{name}.q"), nq);
    let k = linear(tape, bound, &format!("{name}.k"), feats);
    let v = linear(tape, bound, &format!("{name}.v"), feats);
    let (attn, stats) = tape.grouped_cross_attention(q, k, v, valid);
    audit.push(stats);
    let o = linear(tape, bound, &format!("{name}.out"), attn);
    let h = tape.add(h, o);
    let nf = layer_norm(tape, bound, &format!("{name}.ln2"), h);
    let f = linear(tape, bound, &format!("{name}.ff1"), nf);
    let f = tape.relu(f);
    let f = linear(tape, bound, &format!("{name}.ff2"), f);
    tape.add(h, f)
}

/// One ray block: self-attention over the `M` sample tokens followed by a
/// feed-forward sublayer, both pre-normalized with residuals.
fn ray_block(
    tape: &mut Tape,
    bound: &BoundParams,
    heads: usize,
    b: usize,
    h: Var,
    audit: &mut Vec<AttentionStats>,
) -> Var {
    let name = format!("gnt.ray{b}");
    let nq = layer_norm(tape, bound, &format!("{name}.ln1"), h);
    let q = linear(tape, bound, &format!("{name}.q"), nq);
    let k = linear(tape, bound, &format!("{name}.k"), nq);
    let v = linear(tape, bound, &format!("{name}.v"), nq);
    let (attn, stats) = tape.multi_head_self_attention(q, k, v, heads);
    audit.push(stats);
    let o = linear(tape, bound, &format!("{name}.out"), attn);
    let h = tape.add(h, o);
    let nf = layer_norm(tape, bound, &format!("{name}.ln2"), h);
    let f = linear(tape, bound, &format!("{name}.ff1"), nf);
    let f = tape.relu(f);
    let f = linear(tape, bound, &format!("{name}.ff2"), f);
    tape.add(h, f)
}

/// Fuses bucketed epipolar features into one ray-wide feature vector.
///
/// `feats` is `[M * N, d_feat]` with the bucket of sample `m` in rows
/// `m * N ..= m * N + N - 1`; `valid[m][n]` marks whether source `n`
/// actually saw sample `m`.  The initial token of each sample is a learned
/// projection of its masked bucket mean concatenated with a projection of
/// the unit ray direction; a learned per-sample embedding is added when
/// position encoding is on.  Returns the `[1, dim]` ray feature and the
/// softmax matrices of every attention layer, in block order (view, ray,
/// view, ray, ...).
pub fn aggregate_ray_feature(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &TransformerConfig,
    feats: Var,
    valid: &Array2<bool>,
    direction: [f64; 3],
) -> Result<(Var, Vec<AttentionStats>)> {
    cfg.validate()?;
    let m = cfg.samples_per_ray;
    let n = valid.ncols();
    if valid.nrows() != m {
        return Err(UwError::Shape(format!(
            "aggregate: mask has {} rows for {m} samples",
            valid.nrows()
        )));
    }
    let fshape = tape.value(feats).shape().to_vec();
    if fshape.len() != 2 || fshape[0] != m * n {
        return Err(UwError::Shape(format!(
            "aggregate: features {fshape:?} do not bucket {m} samples x {n} sources"
        )));
    }
    if !valid.iter().any(|&v| v) {
        return Err(UwError::Render(
            "aggregate: no source view sees any ray sample".into(),
        ));
    }

    let mean_f = tape.masked_group_mean(feats, valid);
    let dir_leaf = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 3]), direction.to_vec()).unwrap());
    let dir_enc = linear(tape, bound, "gnt.dir", dir_leaf);
    let dir_rep = tape.repeat_rows(dir_enc, m);
    let joined = tape.concat_cols(mean_f, dir_rep);
    let mut h = linear(tape, bound, "gnt.init", joined);
    if cfg.position_encoding {
        let pos = bound.var("gnt.pos.embed");
        h = tape.add(h, pos);
    }
    let mut audit = Vec::with_capacity(2 * cfg.depth);
    for b in 0..cfg.depth {
        h = view_block(tape, bound, b, h, feats, valid, &mut audit);
        h = ray_block(tape, bound, cfg.ray_heads, b, h, &mut audit);
    }
    let pooled = tape.mean_rows(h);
    let ray_feat = linear(tape, bound, "gnt.pool", pooled);
    Ok((ray_feat, audit))
}

/// Decodes a `[1, dim]` ray feature into the three raw patch heads, each
/// `[3, p, p]` and unconstrained; the formation layer maps them into range.
/// Each head reshapes the feature to a 1x1 seed, then repeats
/// upsample-convolve-rectify until the patch side is reached, ending in a
/// three-channel projection.
pub fn decode_patch(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &TransformerConfig,
    ray_feat: Var,
) -> Result<[Var; 3]> {
    cfg.validate()?;
    let shape = tape.value(ray_feat).shape().to_vec();
    if shape != [1, cfg.dim] {
        return Err(UwError::Shape(format!(
            "decode: ray feature {shape:?}, expected [1, {}]",
            cfg.dim
        )));
    }
    let seed = tape.reshape(ray_feat, &[cfg.dim, 1, 1]);
    let mut heads = Vec::with_capacity(3);
    for head in DECODE_HEADS {
        let mut x = seed;
        for s in 0..cfg.decode_stages() {
            x = tape.upsample2(x);
            x = crate::nn::conv(tape, bound, &format!("gnt.decode.{head}.stage{s}"), x, 1, 1);
            x = tape.relu(x);
        }
        x = crate::nn::conv(tape, bound, &format!("gnt.decode.{head}.proj"), x, 1, 1);
        heads.push(x);
    }
    Ok([heads[0], heads[1], heads[2]])
}

/// A source view the renderer can gather epipolar features from: its
/// camera and its backbone feature grid (`[d_feat, Hg, Wg]`) living on the
/// same tape as the render.
#[derive(Debug, Clone)]
pub struct SourceTokens {
    pub camera: Camera,
    pub features: Var,
}

/// Everything one patch render produces: the three raw decode heads
/// (`[3, p, p]` each, pre-activation), the attention softmax matrices for
/// auditing, and the sample depths along the ray.
#[derive(Debug, Clone)]
pub struct PatchRaw {
    pub raw_radiance: Var,
    pub raw_direct: Var,
    pub raw_backscatter: Var,
    pub attention: Vec<AttentionStats>,
    pub depths: Vec<f64>,
}

/// Pixel at the center of patch `(py, px)` on the non-overlapping stride-p
/// tiling: patches cover `[p*px, p*px + p) x [p*py, p*py + p)`.
pub fn patch_center(py: usize, px: usize, p: usize) -> Vector2<f64> {
    let off = (p - 1) as f64 / 2.0;
    Vector2::new((px * p) as f64 + off, (py * p) as f64 + off)
}

/// Renders one patch of the target view: traces the patch-center ray,
/// samples `M` points between `near` and `far` (stratified when asked),
/// gathers clamped bilinear features from every source grid, and runs the
/// token pipeline plus decode heads.
///
/// A sample/source pair is valid when the sample projects in front of the
/// source camera and inside its pixel rectangle; everything else is masked
/// out of the attention.  The render fails only when *no* pair is valid —
/// the patch is invisible to every source.
pub fn render_patch_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &TransformerConfig,
    target: &Camera,
    patch: (usize, usize),
    sources: &[SourceTokens],
    near: f64,
    far: f64,
    stratified: bool,
    rng: &mut impl Rng,
) -> Result<PatchRaw> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(UwError::Render("render: no source views".into()));
    }
    let p = cfg.patch_size;
    let (py, px) = patch;
    let (w, h) = (target.intrinsics.width, target.intrinsics.height);
    if (px + 1) * p > w || (py + 1) * p > h {
        return Err(UwError::Render(format!(
            "render: patch ({py}, {px}) of size {p} exceeds the {w}x{h} target"
        )));
    }
    let m = cfg.samples_per_ray;
    let n = sources.len();
    let ray = pixel_to_ray(target, patch_center(py, px, p))?;
    let samples = sample_along_ray(&ray, near, far, m, stratified, rng)?;

    // Gather per-source feature rows (source-major), then interleave into
    // sample-major buckets for the grouped attention.
    let mut valid = Array2::<bool>::from_elem((m, n), false);
    let mut per_source = Vec::with_capacity(n);
    for (si, src) in sources.iter().enumerate() {
        let gshape = tape.value(src.features).shape().to_vec();
        if gshape.len() != 3 {
            return Err(UwError::Shape(format!(
                "render: source {si} features {gshape:?}, expected [d, Hg, Wg]"
            )));
        }
        let mut coords = Vec::with_capacity(m);
        for (mi, pos) in samples.positions.iter().enumerate() {
            let proj = project(&src.camera, *pos);
            valid[[mi, si]] = proj.in_front && proj.in_image(&src.camera);
            coords.push(pixel_to_grid(GRID_STRIDE, proj.pixel));
        }
        per_source.push(tape.bilinear_gather(src.features, &coords));
    }
    let stacked = tape.concat_rows(&per_source);
    let interleave: Vec<usize> = (0..m * n).map(|r| (r % n) * m + r / n).collect();
    let feats = tape.select_rows(stacked, &interleave);

    let dir = ray.direction;
    let (ray_feat, attention) =
        aggregate_ray_feature(tape, bound, cfg, feats, &valid, [dir.x, dir.y, dir.z])?;
    let [raw_radiance, raw_direct, raw_backscatter] = decode_patch(tape, bound, cfg, ray_feat)?;
    Ok(PatchRaw {
        raw_radiance,
        raw_direct,
        raw_backscatter,
        attention,
        depths: samples.depths,
    })
}

/// Classical emission-absorption quadrature along one ray: given per-sample
/// colors `[M, 3]`, non-negative densities and sorted depths, returns the
/// composited color and the per-sample weights.  Gaps are
/// `delta_j = t_{j+1} - t_j` with [`FINAL_DELTA`] after the last sample;
/// opacity `alpha_j = 1 - exp(-sigma_j delta_j)`; weights
/// `w_j = alpha_j * prod_{i<j} (1 - alpha_i)`, so that
/// `sum w_j = 1 - exp(-sum sigma_j delta_j)`.
pub fn volume_render_reference(
    colors: &Array2<f64>,
    sigmas: &[f64],
    depths: &[f64],
) -> Result<([f64; 3], Vec<f64>)> {
    let m = sigmas.len();
    if m == 0 {
        return Err(UwError::Render("volume render: no samples".into()));
    }
    if colors.dim() != (m, 3) {
        return Err(UwError::Shape(format!(
            "volume render: colors {:?} for {m} samples",
            colors.dim()
        )));
    }
    if depths.len() != m {
        return Err(UwError::Shape(format!(
            "volume render: {} depths for {m} samples",
            depths.len()
        )));
    }
    for (j, &s) in sigmas.iter().enumerate() {
        if !(s >= 0.0) {
            return Err(UwError::Render(format!(
                "volume render: density {s} at sample {j} is negative or NaN"
            )));
        }
    }
    for j in 1..m {
        if !(depths[j] >= depths[j - 1]) {
            return Err(UwError::Render(format!(
                "volume render: depths not sorted at sample {j}"
            )));
        }
    }
    let mut weights = Vec::with_capacity(m);
    let mut transmittance = 1.0;
    let mut color = [0.0f64; 3];
    for j in 0..m {
        let delta = if j + 1 < m { depths[j + 1] - depths[j] } else { FINAL_DELTA };
        let alpha = 1.0 - (-sigmas[j] * delta).exp();
        let w = alpha * transmittance;
        weights.push(w);
        for c in 0..3 {
            color[c] += w * colors[[j, c]];
        }
        transmittance *= 1.0 - alpha;
    }
    Ok((color, weights))
}
