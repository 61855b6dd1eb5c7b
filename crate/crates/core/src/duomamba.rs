//! Two-stream DuoMamba block, the L-block point cloud encoder, and analytic
//! parameter / FLOPs accounting.
//!
//! A block reads
//!
//! ```text
//! Z_in = LayerNorm(Z_prev)          Z   = SiLU(gate(Z_in))
//! H'   = sort_a(proj_h(Z_in))       H'' = SiLU(Conv1D(H'))
//! T'   = sort_b(proj_t(Z_in))       T'' = SiLU(Conv1D(T'))
//! H    = unsort_a(S6(H'')) ⊙ Z      T   = unsort_b(S6(T'')) ⊙ Z
//! Z_out = Z_prev + out(H + T)
//! ```

use crate::curves::{sort_by_curve, CurveKind, Permutation, DEFAULT_BITS};
use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::nn::{silu, silu_grad, DepthwiseConv1d, LayerNorm, LayerNormCache, Linear};
use crate::ssm::{selective_scan, selective_scan_backward, selective_scan_cached, S6Params, ScanCache};
use crate::tensor::Tensor;
use crate::tokenizer::{MiniPointNet, PatchSet, PointNetCache, TokenSequence, POINTNET_HIDDEN, POINT_FEATURES};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const EXPAND: usize = 2;
pub const STANDARD_CONV_WIDTH: usize = 5;
pub const CAUSAL_CONV_WIDTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvMode {
    /// Width 5, symmetric padding: mixes both directions along the curve.
    Standard,
    /// Width 4, left padding only.
    Causal,
    /// No convolution; the SiLU is kept.
    None,
}

impl ConvMode {
    /// `(width, left padding)`, or `None` without a convolution.
    pub fn geometry(self) -> Option<(usize, usize)> {
        match self {
            ConvMode::Standard => Some((STANDARD_CONV_WIDTH, STANDARD_CONV_WIDTH / 2)),
            ConvMode::Causal => Some((CAUSAL_CONV_WIDTH, CAUSAL_CONV_WIDTH - 1)),
            ConvMode::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub l_blocks: usize,
    pub c_dim: usize,
    pub s_tokens: usize,
    pub k_neighbors: usize,
    pub n_state: usize,
    pub curve_a: CurveKind,
    pub curve_b: CurveKind,
    pub conv_mode: ConvMode,
    pub embed_dim: usize,
    #[serde(default = "default_true")]
    pub d_skip: bool,
    /// Adds an affine embedding of each patch center to its token.
    #[serde(default = "default_true")]
    pub pos_embed: bool,
    #[serde(default)]
    pub allow_shared_curve: bool,
    #[serde(default = "default_bits")]
    pub curve_bits: u32,
}

fn default_true() -> bool {
    true
}

fn default_bits() -> u32 {
    DEFAULT_BITS
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            l_blocks: 6,
            c_dim: 256,
            s_tokens: 128,
            k_neighbors: 32,
            n_state: 16,
            curve_a: CurveKind::Hilbert,
            curve_b: CurveKind::TransHilbert,
            conv_mode: ConvMode::Standard,
            embed_dim: 32,
            d_skip: true,
            pos_embed: true,
            allow_shared_curve: false,
            curve_bits: DEFAULT_BITS,
        }
    }

    /// Full-size model matching the published parameter budget (~29M).
    ///
    /// The depth is not published; 20 blocks at width 384 with a 1280-wide
    /// output (the text/image embedding width) lands at 29.0M.
    pub fn paper() -> Self {
        EncoderConfig {
            l_blocks: 20,
            c_dim: 384,
            s_tokens: 512,
            k_neighbors: 32,
            embed_dim: 1280,
            ..Self::desk()
        }
    }

    /// Small model for fast end-to-end runs.
    pub fn toy() -> Self {
        EncoderConfig {
            l_blocks: 2,
            c_dim: 64,
            s_tokens: 64,
            k_neighbors: 16,
            n_state: 8,
            ..Self::desk()
        }
    }

    pub fn inner_dim(&self) -> usize {
        EXPAND * self.c_dim
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::InvalidConfig(format!("{name}: {msg}")));
        if self.c_dim == 0 {
            return field("c_dim", "must be at least 1");
        }
        if self.s_tokens == 0 {
            return field("s_tokens", "must be at least 1");
        }
        if self.k_neighbors == 0 {
            return field("k_neighbors", "must be at least 1");
        }
        if self.n_state == 0 {
            return field("n_state", "must be at least 1");
        }
        if self.embed_dim == 0 {
            return field("embed_dim", "must be at least 1");
        }
        if !(1..=crate::curves::MAX_BITS).contains(&self.curve_bits) {
            return field("curve_bits", "must be in [1, 16]");
        }
        if self.curve_a == self.curve_b && !self.allow_shared_curve {
            return field(
                "curve_b",
                "both streams use the same ordering; set allow_shared_curve for this ablation",
            );
        }
        Ok(())
    }

    /// The five component ablations: `(label, config)`.
    pub fn component_ablations(&self) -> Vec<(&'static str, EncoderConfig)> {
        let with = |a, b, conv, shared| EncoderConfig {
            curve_a: a,
            curve_b: b,
            conv_mode: conv,
            allow_shared_curve: shared,
            ..self.clone()
        };
        use CurveKind::*;
        vec![
            ("i-fps-causal", with(Fps, Fps, ConvMode::Causal, true)),
            ("ii-hilbert-only", with(Hilbert, Hilbert, ConvMode::Standard, true)),
            ("iii-trans-hilbert-only", with(TransHilbert, TransHilbert, ConvMode::Standard, true)),
            ("iv-no-conv", with(Hilbert, TransHilbert, ConvMode::None, false)),
            ("v-full", with(Hilbert, TransHilbert, ConvMode::Standard, false)),
        ]
    }

    /// The four stream orderings: `(label, config)`.
    pub fn ordering_ablations(&self) -> Vec<(&'static str, EncoderConfig)> {
        let with = |a, b, shared| EncoderConfig {
            curve_a: a,
            curve_b: b,
            allow_shared_curve: shared,
            ..self.clone()
        };
        use CurveKind::*;
        vec![
            ("fps", with(Fps, Fps, true)),
            ("morton-trans-morton", with(Morton, TransMorton, false)),
            ("hilbert-morton", with(Hilbert, Morton, false)),
            ("hilbert-trans-hilbert", with(Hilbert, TransHilbert, false)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DuoMambaBlockParams {
    pub norm: LayerNorm,
    pub gate_proj: Linear,
    pub branch_proj_h: Linear,
    pub branch_proj_t: Linear,
    pub conv_h: Option<DepthwiseConv1d>,
    pub conv_t: Option<DepthwiseConv1d>,
    pub s6_h: S6Params,
    pub s6_t: S6Params,
    pub out_proj: Linear,
}

impl_parameters!(DuoMambaBlockParams {
    norm,
    gate_proj,
    branch_proj_h,
    branch_proj_t,
    conv_h,
    conv_t,
    s6_h,
    s6_t,
    out_proj
});

struct StreamCache {
    sorted: Tensor,
    pre_act: Tensor,
    scan: ScanCache,
    unsorted: Tensor,
}

pub struct BlockCache {
    norm: LayerNormCache,
    z_in: Tensor,
    gate_pre: Tensor,
    gate: Tensor,
    h: StreamCache,
    t: StreamCache,
    mixed: Tensor,
}

impl DuoMambaBlockParams {
    pub fn new<R: Rng + ?Sized>(c_dim: usize, n_state: usize, conv: ConvMode, d_skip: bool, rng: &mut R) -> Self {
        let ci = EXPAND * c_dim;
        let conv_layer = |rng: &mut R| conv.geometry().map(|(w, pad)| DepthwiseConv1d::new(ci, w, pad, rng));
        DuoMambaBlockParams {
            norm: LayerNorm::new(c_dim),
            gate_proj: Linear::new(c_dim, ci, true, rng),
            branch_proj_h: Linear::new(c_dim, ci, true, rng),
            branch_proj_t: Linear::new(c_dim, ci, true, rng),
            conv_h: conv_layer(rng),
            conv_t: conv_layer(rng),
            s6_h: S6Params::new(ci, n_state, d_skip, rng),
            s6_t: S6Params::new(ci, n_state, d_skip, rng),
            out_proj: Linear::new(ci, c_dim, true, rng),
        }
    }

    pub fn c_dim(&self) -> usize {
        self.out_proj.d_out()
    }

    pub fn forward(&self, z_prev: &Tensor, perm_h: &Permutation, perm_t: &Permutation) -> Result<Tensor> {
        self.forward_impl(z_prev, perm_h, perm_t, false).map(|(y, _)| y)
    }

    pub fn forward_cached(
        &self,
        z_prev: &Tensor,
        perm_h: &Permutation,
        perm_t: &Permutation,
    ) -> Result<(Tensor, BlockCache)> {
        self.forward_impl(z_prev, perm_h, perm_t, true)
            .map(|(y, c)| (y, c.expect("cache requested")))
    }

    fn stream(
        &self,
        z_in: &Tensor,
        gate: &Tensor,
        proj: &Linear,
        conv: &Option<DepthwiseConv1d>,
        s6: &S6Params,
        perm: &Permutation,
        keep: bool,
    ) -> Result<(Tensor, Option<StreamCache>)> {
        let sorted = proj.forward(z_in)?.gather_rows(perm.forward());
        let pre_act = match conv {
            Some(c) => c.forward(&sorted),
            None => sorted.clone(),
        };
        let act = pre_act.map(silu);
        let (y, scan) = if keep {
            let (y, c) = selective_scan_cached(&act, s6)?;
            (y, Some(c))
        } else {
            (selective_scan(&act, s6)?, None)
        };
        let unsorted = y.scatter_rows(perm.forward());
        let mut out = unsorted.clone();
        for (o, g) in out.data_mut().iter_mut().zip(gate.data()) {
            *o *= g;
        }
        let cache = scan.map(|scan| StreamCache {
            sorted,
            pre_act,
            scan,
            unsorted,
        });
        Ok((out, cache))
    }

    fn forward_impl(
        &self,
        z_prev: &Tensor,
        perm_h: &Permutation,
        perm_t: &Permutation,
        keep: bool,
    ) -> Result<(Tensor, Option<BlockCache>)> {
        let (s, c) = (z_prev.rows(), z_prev.cols());
        if c != self.c_dim() || z_prev.shape().len() != 2 {
            return Err(Error::shape(format!(
                "block expects [_, {}], got {:?}",
                self.c_dim(),
                z_prev.shape()
            )));
        }
        if perm_h.len() != s || perm_t.len() != s {
            return Err(Error::shape(format!(
                "permutation sizes ({}, {}) do not match {s} tokens",
                perm_h.len(),
                perm_t.len()
            )));
        }
        let (z_in, norm) = self.norm.forward(z_prev);
        let gate_pre = self.gate_proj.forward(&z_in)?;
        let gate = gate_pre.map(silu);
        let (mut mixed, hc) = self.stream(&z_in, &gate, &self.branch_proj_h, &self.conv_h, &self.s6_h, perm_h, keep)?;
        let (t_out, tc) = self.stream(&z_in, &gate, &self.branch_proj_t, &self.conv_t, &self.s6_t, perm_t, keep)?;
        mixed.add_assign(&t_out);
        let mut out = self.out_proj.forward(&mixed)?;
        out.add_assign(z_prev);
        let cache = match (hc, tc) {
            (Some(h), Some(t)) => Some(BlockCache {
                norm,
                z_in,
                gate_pre,
                gate,
                h,
                t,
                mixed,
            }),
            _ => None,
        };
        Ok((out, cache))
    }

    #[allow(clippy::too_many_arguments)]
    fn stream_backward(
        d_mixed: &Tensor,
        cache: &StreamCache,
        gate: &Tensor,
        z_in: &Tensor,
        perm: &Permutation,
        proj: (&Linear, &mut Linear),
        conv: (&Option<DepthwiseConv1d>, &mut Option<DepthwiseConv1d>),
        s6: (&S6Params, &mut S6Params),
        d_gate: &mut Tensor,
        d_z_in: &mut Tensor,
    ) {
        let mut d_unsorted = d_mixed.clone();
        for ((du, g), (dg, u)) in d_unsorted
            .data_mut()
            .iter_mut()
            .zip(gate.data())
            .zip(d_gate.data_mut().iter_mut().zip(cache.unsorted.data()))
        {
            *dg += *du * u;
            *du *= g;
        }
        let d_y = d_unsorted.gather_rows(perm.forward());
        let mut d_pre = selective_scan_backward(s6.0, &cache.scan, &d_y, s6.1);
        for (d, &a) in d_pre.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *d *= silu_grad(a);
        }
        let d_sorted = match (conv.0, conv.1) {
            (Some(c), Some(g)) => c.backward(&cache.sorted, &d_pre, g),
            _ => d_pre,
        };
        let d_proj = d_sorted.scatter_rows(perm.forward());
        d_z_in.add_assign(&proj.0.backward(z_in, &d_proj, proj.1));
    }

    /// Accumulates parameter gradients and returns `dL/dz_prev`.
    pub fn backward(
        &self,
        cache: &BlockCache,
        perm_h: &Permutation,
        perm_t: &Permutation,
        d_out: &Tensor,
        grad: &mut DuoMambaBlockParams,
    ) -> Tensor {
        let d_mixed = self.out_proj.backward(&cache.mixed, d_out, &mut grad.out_proj);
        let mut d_gate = cache.gate.zeros_like();
        let mut d_z_in = cache.z_in.zeros_like();
        Self::stream_backward(
            &d_mixed,
            &cache.h,
            &cache.gate,
            &cache.z_in,
            perm_h,
            (&self.branch_proj_h, &mut grad.branch_proj_h),
            (&self.conv_h, &mut grad.conv_h),
            (&self.s6_h, &mut grad.s6_h),
            &mut d_gate,
            &mut d_z_in,
        );
        Self::stream_backward(
            &d_mixed,
            &cache.t,
            &cache.gate,
            &cache.z_in,
            perm_t,
            (&self.branch_proj_t, &mut grad.branch_proj_t),
            (&self.conv_t, &mut grad.conv_t),
            (&self.s6_t, &mut grad.s6_t),
            &mut d_gate,
            &mut d_z_in,
        );
        for (d, &a) in d_gate.data_mut().iter_mut().zip(cache.gate_pre.data()) {
            *d *= silu_grad(a);
        }
        d_z_in.add_assign(&self.gate_proj.backward(&cache.z_in, &d_gate, &mut grad.gate_proj));
        let mut d_prev = self.norm.backward(&cache.norm, &d_z_in, &mut grad.norm);
        d_prev.add_assign(d_out);
        d_prev
    }
}

/// Tokenizer, block stack and output head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub tokenizer: MiniPointNet,
    pub pos_embed: Option<Linear>,
    pub blocks: Vec<DuoMambaBlockParams>,
    pub head: Linear,
}

impl_parameters!(EncoderParams { tokenizer, pos_embed, blocks, head });

pub struct EncoderCache {
    tokenizer: PointNetCache,
    centers: Tensor,
    perm_a: Permutation,
    perm_b: Permutation,
    blocks: Vec<BlockCache>,
    last: Tensor,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tokenizer = MiniPointNet::new(config.c_dim, rng);
        let blocks = (0..config.l_blocks)
            .map(|_| DuoMambaBlockParams::new(config.c_dim, config.n_state, config.conv_mode, config.d_skip, rng))
            .collect();
        let head = Linear::new(config.c_dim, config.embed_dim, true, rng);
        let pos_embed = config.pos_embed.then(|| Linear::new(3, config.c_dim, true, rng));
        Ok(EncoderParams {
            tokenizer,
            pos_embed,
            blocks,
            head,
        })
    }

    /// Verifies that the parameter shapes agree with `config`.
    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        let c = config.c_dim;
        let ci = config.inner_dim();
        let bad = |what: &str| Err(Error::shape(format!("parameters do not match config: {what}")));
        if self.tokenizer.c_dim() != c {
            return bad("tokenizer width");
        }
        if self.blocks.len() != config.l_blocks {
            return bad("number of blocks");
        }
        match &self.pos_embed {
            Some(p) if !config.pos_embed || p.d_in() != 3 || p.d_out() != c => return bad("position embedding"),
            None if config.pos_embed => return bad("position embedding"),
            _ => {}
        }
        for b in &self.blocks {
            if b.c_dim() != c || b.gate_proj.d_out() != ci || b.s6_h.channels() != ci || b.s6_h.n_state() != config.n_state
            {
                return bad("block widths");
            }
            let conv_ok = |conv: &Option<DepthwiseConv1d>| match (conv, config.conv_mode.geometry()) {
                (None, None) => true,
                (Some(k), Some((w, pad))) => k.width() == w && k.pad_left == pad,
                _ => false,
            };
            if !conv_ok(&b.conv_h) || !conv_ok(&b.conv_t) {
                return bad("convolution mode");
            }
        }
        if self.head.d_in() != c || self.head.d_out() != config.embed_dim {
            return bad("head");
        }
        Ok(())
    }
}

fn centers_tensor(centers: &[[f64; 3]]) -> Tensor {
    Tensor::from_vec(&[centers.len(), 3], centers.iter().flatten().copied().collect()).expect("rows of three")
}

/// Tokens plus the embedded centers when the position embedding is on.
fn embed_positions(tokens: Tensor, centers: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    match &params.pos_embed {
        Some(p) => {
            let mut z = tokens;
            z.add_assign(&p.forward(centers)?);
            Ok(z)
        }
        None => Ok(tokens),
    }
}

fn stream_permutations(centers: &[[f64; 3]], config: &EncoderConfig) -> Result<(Permutation, Permutation)> {
    Ok((
        sort_by_curve(centers, config.curve_a, config.curve_bits)?,
        sort_by_curve(centers, config.curve_b, config.curve_bits)?,
    ))
}

/// Runs the block stack and head on a token sequence, returning `z^P`
/// (not normalized).
pub fn encoder_forward(tokens: &TokenSequence, config: &EncoderConfig, params: &EncoderParams) -> Result<Vec<f64>> {
    params.check(config)?;
    if tokens.tokens.cols() != config.c_dim || tokens.tokens.rows() != config.s_tokens {
        return Err(Error::shape(format!(
            "tokens are {:?}, config expects [{}, {}]",
            tokens.tokens.shape(),
            config.s_tokens,
            config.c_dim
        )));
    }
    let (pa, pb) = stream_permutations(&tokens.centers, config)?;
    let mut z = embed_positions(tokens.tokens.clone(), &centers_tensor(&tokens.centers), params)?;
    for block in &params.blocks {
        z = block.forward(&z, &pa, &pb)?;
    }
    let out = params.head.forward(&z)?;
    let zp = out.mean_rows();
    if zp.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            step: 0,
            msg: "non-finite point embedding".into(),
        });
    }
    Ok(zp)
}

/// Tokenizes `patches` and encodes them.
pub fn embed_patches(patches: &PatchSet, config: &EncoderConfig, params: &EncoderParams) -> Result<Vec<f64>> {
    let tokens = params.tokenizer.forward(patches)?;
    encoder_forward(&tokens, config, params)
}

pub fn embed_patches_cached(
    patches: &PatchSet,
    config: &EncoderConfig,
    params: &EncoderParams,
) -> Result<(Vec<f64>, EncoderCache)> {
    params.check(config)?;
    if patches.len() != config.s_tokens {
        return Err(Error::shape(format!(
            "{} patches, config expects {}",
            patches.len(),
            config.s_tokens
        )));
    }
    let (tokens, tok_cache) = params.tokenizer.forward_cached(patches)?;
    let (pa, pb) = stream_permutations(&tokens.centers, config)?;
    let centers = centers_tensor(&tokens.centers);
    let mut z = embed_positions(tokens.tokens, &centers, params)?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (next, cache) = block.forward_cached(&z, &pa, &pb)?;
        caches.push(cache);
        z = next;
    }
    let zp = params.head.forward(&z)?.mean_rows();
    if zp.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            step: 0,
            msg: "non-finite point embedding".into(),
        });
    }
    Ok((
        zp,
        EncoderCache {
            tokenizer: tok_cache,
            centers,
            perm_a: pa,
            perm_b: pb,
            blocks: caches,
            last: z,
        },
    ))
}

/// Accumulates gradients of all encoder parameters given `dL/dz^P`.
pub fn encoder_backward(params: &EncoderParams, cache: &EncoderCache, d_zp: &[f64], grad: &mut EncoderParams) {
    let s = cache.last.rows();
    let mut d_out = Tensor::zeros(&[s, d_zp.len()]);
    for i in 0..s {
        for (d, g) in d_out.row_mut(i).iter_mut().zip(d_zp) {
            *d = g / s as f64;
        }
    }
    let mut dz = params.head.backward(&cache.last, &d_out, &mut grad.head);
    for (i, block) in params.blocks.iter().enumerate().rev() {
        dz = block.backward(&cache.blocks[i], &cache.perm_a, &cache.perm_b, &dz, &mut grad.blocks[i]);
    }
    if let (Some(p), Some(g)) = (&params.pos_embed, &mut grad.pos_embed) {
        p.backward(&cache.centers, &dz, g);
    }
    params.tokenizer.backward(&cache.tokenizer, &dz, &mut grad.tokenizer);
}

fn linear_params(d_in: usize, d_out: usize, bias: bool) -> usize {
    d_in * d_out + if bias { d_out } else { 0 }
}

fn s6_params(ch: usize, n: usize, d_skip: bool) -> usize {
    let r = S6Params::dt_rank(ch);
    ch * n + 2 * linear_params(ch, n, true) + linear_params(ch, r, false) + linear_params(r, ch, true) + if d_skip { ch } else { 0 }
}

/// Closed-form parameter count of tokenizer, blocks and head.
pub fn count_params(config: &EncoderConfig) -> usize {
    let c = config.c_dim;
    let ci = config.inner_dim();
    let tokenizer = linear_params(POINT_FEATURES, POINTNET_HIDDEN, true)
        + linear_params(POINTNET_HIDDEN, c, true)
        + linear_params(c, c, true);
    let conv = config.conv_mode.geometry().map_or(0, |(w, _)| ci * w + ci);
    let block = 2 * c
        + 3 * linear_params(c, ci, true)
        + 2 * conv
        + 2 * s6_params(ci, config.n_state, config.d_skip)
        + linear_params(ci, c, true);
    let pos = if config.pos_embed { linear_params(3, c, true) } else { 0 };
    tokenizer + pos + config.l_blocks * block + linear_params(c, config.embed_dim, true)
}

/// Cost of one recurrence update per (channel, state): `Δ·A`, `exp`,
/// `ā·h`, `Δ·B`, `·x`, the add, and the multiply-add of `⟨C, h⟩`.
pub const SCAN_FLOPS_PER_STATE: u64 = 8;
/// Mean, variance, normalize, gain and bias per channel.
pub const LAYER_NORM_FLOPS_PER_CHANNEL: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub tokenizer: u64,
    pub blocks: u64,
    pub head: u64,
    pub total: u64,
}

fn affine(d_in: usize, d_out: usize) -> u64 {
    2 * d_in as u64 * d_out as u64
}

fn tokenizer_flops(config: &EncoderConfig, s: u64) -> u64 {
    let c = config.c_dim;
    let per_point = affine(POINT_FEATURES, POINTNET_HIDDEN) + affine(POINTNET_HIDDEN, c);
    let pos = if config.pos_embed { affine(3, c) + c as u64 } else { 0 };
    s * (config.k_neighbors as u64 * per_point + affine(c, c) + pos)
}

fn head_flops(config: &EncoderConfig, s: u64) -> u64 {
    s * (affine(config.c_dim, config.embed_dim) + config.embed_dim as u64)
}

fn breakdown(tokenizer: u64, blocks: u64, head: u64) -> FlopsBreakdown {
    FlopsBreakdown {
        tokenizer,
        blocks,
        head,
        total: tokenizer + blocks + head,
    }
}

/// Analytic forward FLOPs of the encoder at `s_tokens` tokens. Affine maps
/// cost `2·in·out` per token, depthwise convolutions `2·w` per channel per
/// token, and the scan [`SCAN_FLOPS_PER_STATE`] per channel and state.
pub fn count_flops(config: &EncoderConfig, s_tokens: usize) -> FlopsBreakdown {
    let s = s_tokens as u64;
    let c = config.c_dim;
    let ci = config.inner_dim();
    let (ci64, n) = (ci as u64, config.n_state as u64);
    let r = S6Params::dt_rank(ci);
    let conv = config.conv_mode.geometry().map_or(0, |(w, _)| 2 * w as u64 * ci64);
    let s6 = 2 * affine(ci, config.n_state)
        + affine(ci, r)
        + affine(r, ci)
        + SCAN_FLOPS_PER_STATE * ci64 * n
        + if config.d_skip { 2 * ci64 } else { 0 };
    let per_token = LAYER_NORM_FLOPS_PER_CHANNEL * c as u64
        + 3 * affine(c, ci)
        + 2 * (conv + s6 + ci64)
        + ci64
        + affine(ci, c)
        + c as u64;
    breakdown(
        tokenizer_flops(config, s),
        config.l_blocks as u64 * s * per_token,
        head_flops(config, s),
    )
}

/// Attention-equivalent model at the same `L, C`: each block costs
/// `4·S²·C + 8·S·C²` (QKV and output projections plus the score and value
/// products). Tokenizer and head are shared with [`count_flops`].
pub fn attention_flops(config: &EncoderConfig, s_tokens: usize) -> FlopsBreakdown {
    let (s, c) = (s_tokens as u64, config.c_dim as u64);
    breakdown(
        tokenizer_flops(config, s),
        config.l_blocks as u64 * (4 * s * s * c + 8 * s * c * c),
        head_flops(config, s),
    )
}

/// Like [`attention_flops`] but with a 4x-wide MLP per block
/// (`16·S·C²` more), i.e. a full Transformer encoder layer.
pub fn transformer_flops(config: &EncoderConfig, s_tokens: usize) -> FlopsBreakdown {
    let (s, c) = (s_tokens as u64, config.c_dim as u64);
    let att = attention_flops(config, s_tokens);
    breakdown(att.tokenizer, att.blocks + config.l_blocks as u64 * 16 * s * c * c, att.head)
}
