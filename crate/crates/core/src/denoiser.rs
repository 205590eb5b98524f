//! Conditional denoising U-Net.
//!
//! The network predicts the noise component of a noisy segmentation mask.
//! Conditioning is concatenated along the channel axis in a fixed order:
//! image modalities first, then (depending on the variant) the inter map,
//! then the intra map, and the noisy mask always last. Timestep information
//! enters through a sinusoidal embedding, a two-layer MLP, and a learned
//! per-channel shift inside every residual block.
//!
//! The final convolution is zero-initialized, so an untrained network
//! predicts exactly zero noise; training starts from a loss equal to the
//! second moment of the targets.

use crate::nn::embed::timestep_embedding;
use crate::nn::layers::{
    norm_group_count, silu_backward, silu_forward, Conv2d, ConvTranspose2d, GroupNorm,
    GroupNormCache, Linear,
};
use crate::nn::{ParamStore, Scalar};
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("variant requires the {0} map but none was provided")]
    MissingFeature(&'static str),
    #[error("variant does not use the {0} map but one was provided")]
    UnexpectedFeature(&'static str),
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("unknown conditioning variant {0:?} (expected mini, light, or full)")]
    UnknownVariant(String),
    #[error("timestep {0} is invalid; timesteps are 1-based")]
    InvalidTimestep(usize),
}

/// How much guidance the denoiser sees beyond the raw image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningVariant {
    /// Modalities only.
    Mini,
    /// Modalities plus the inter map.
    Light,
    /// Modalities plus inter and intra maps.
    Full,
}

impl ConditioningVariant {
    pub fn extra_channels(self) -> usize {
        match self {
            ConditioningVariant::Mini => 0,
            ConditioningVariant::Light => 1,
            ConditioningVariant::Full => 2,
        }
    }

    pub fn wants_inter(self) -> bool {
        matches!(self, ConditioningVariant::Light | ConditioningVariant::Full)
    }

    pub fn wants_intra(self) -> bool {
        matches!(self, ConditioningVariant::Full)
    }
}

impl std::fmt::Display for ConditioningVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConditioningVariant::Mini => write!(f, "mini"),
            ConditioningVariant::Light => write!(f, "light"),
            ConditioningVariant::Full => write!(f, "full"),
        }
    }
}

impl std::str::FromStr for ConditioningVariant {
    type Err = DenoiserError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mini" => Ok(ConditioningVariant::Mini),
            "light" => Ok(ConditioningVariant::Light),
            "full" => Ok(ConditioningVariant::Full),
            other => Err(DenoiserError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Image modality channels (the `C` of the dataset).
    pub modalities: usize,
    pub height: usize,
    pub width: usize,
    pub variant: ConditioningVariant,
    /// Channel width at the finest resolution.
    pub base_width: usize,
    /// Resolution levels; `depth - 1` downsamplings happen between them.
    pub depth: usize,
    /// Residual blocks per level (on each of the down and up paths).
    pub res_blocks: usize,
    /// Sinusoidal embedding size; must be even.
    pub time_embed_dim: usize,
    /// Preferred group count for the normalization layers.
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            modalities: 4,
            height: 256,
            width: 256,
            variant: ConditioningVariant::Full,
            base_width: 64,
            depth: 4,
            res_blocks: 2,
            time_embed_dim: 128,
            groups: 8,
        }
    }
}

impl DenoiserConfig {
    /// Total input channels: modalities, variant extras, noisy mask.
    pub fn in_channels(&self) -> usize {
        self.modalities + self.variant.extra_channels() + 1
    }

    /// Channel width at resolution level `r`; capped at 8x the base so very
    /// deep configs stay affordable.
    pub fn level_width(&self, r: usize) -> usize {
        self.base_width << r.min(3)
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.modalities == 0 {
            return Err(DenoiserError::InvalidConfig("modalities must be >= 1".into()));
        }
        if self.base_width == 0 || self.depth == 0 || self.res_blocks == 0 {
            return Err(DenoiserError::InvalidConfig(
                "base_width, depth, and res_blocks must be >= 1".into(),
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(DenoiserError::InvalidConfig(
                "time_embed_dim must be even and >= 2".into(),
            ));
        }
        if self.groups == 0 {
            return Err(DenoiserError::InvalidConfig("groups must be >= 1".into()));
        }
        let down = 1usize << (self.depth - 1);
        if self.height % down != 0 || self.width % down != 0 || self.height < down || self.width < down
        {
            return Err(DenoiserError::InvalidConfig(format!(
                "spatial dims {}x{} must be divisible by {down} for {} levels",
                self.height, self.width, self.depth
            )));
        }
        Ok(())
    }
}

/// Conditioning inputs for a batch, kept separate so the channel-assembly
/// convention lives in exactly one place ([`ConditioningPack::assemble`]).
#[derive(Debug, Clone)]
pub struct ConditioningPack<T> {
    /// (n, C, H, W) image modalities.
    pub modalities: Array4<T>,
    /// (n, H, W) inter map; required by the light and full variants.
    pub inter: Option<Array3<T>>,
    /// (n, H, W) intra map; required by the full variant.
    pub intra: Option<Array3<T>>,
}

impl<T: Scalar> ConditioningPack<T> {
    pub fn plain(modalities: Array4<T>) -> Self {
        Self {
            modalities,
            inter: None,
            intra: None,
        }
    }

    /// Stacks the network input: modalities, then inter (light/full), then
    /// intra (full), then the noisy mask last.
    pub fn assemble(
        &self,
        variant: ConditioningVariant,
        noisy: &Array4<T>,
    ) -> Result<Array4<T>, DenoiserError> {
        let (n, c, h, w) = self.modalities.dim();
        let check3 = |m: &Array3<T>, what: &'static str| -> Result<(), DenoiserError> {
            if m.dim() != (n, h, w) {
                return Err(DenoiserError::ShapeMismatch {
                    expected: vec![n, h, w],
                    got: m.shape().to_vec(),
                });
            }
            if m.iter().any(|v| !v.as_f64().is_finite()) {
                return Err(DenoiserError::NonFiniteInput(what));
            }
            Ok(())
        };

        if noisy.dim() != (n, 1, h, w) {
            return Err(DenoiserError::ShapeMismatch {
                expected: vec![n, 1, h, w],
                got: noisy.shape().to_vec(),
            });
        }
        if self.modalities.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(DenoiserError::NonFiniteInput("modalities"));
        }
        if noisy.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(DenoiserError::NonFiniteInput("noisy mask"));
        }
        match (&self.inter, variant.wants_inter()) {
            (None, true) => return Err(DenoiserError::MissingFeature("inter")),
            (Some(_), false) => return Err(DenoiserError::UnexpectedFeature("inter")),
            _ => {}
        }
        match (&self.intra, variant.wants_intra()) {
            (None, true) => return Err(DenoiserError::MissingFeature("intra")),
            (Some(_), false) => return Err(DenoiserError::UnexpectedFeature("intra")),
            _ => {}
        }

        let total = c + variant.extra_channels() + 1;
        let mut x = Array4::<T>::zeros((n, total, h, w));
        x.slice_mut(s![.., ..c, .., ..]).assign(&self.modalities);
        let mut at = c;
        if let Some(inter) = &self.inter {
            check3(inter, "inter map")?;
            x.slice_mut(s![.., at, .., ..]).assign(inter);
            at += 1;
        }
        if let Some(intra) = &self.intra {
            check3(intra, "intra map")?;
            x.slice_mut(s![.., at, .., ..]).assign(intra);
            at += 1;
        }
        x.slice_mut(s![.., at, .., ..])
            .assign(&noisy.index_axis(Axis(1), 0));
        Ok(x)
    }
}

// ---------------------------------------------------------------------------
// Residual block

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    out_w: usize,
}

struct ResBlockTape<T> {
    x: Array4<T>,
    n1: GroupNormCache<T>,
    a1: Array4<T>,
    h1: Array4<T>,
    n2: GroupNormCache<T>,
    a2: Array4<T>,
    h2: Array4<T>,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_w: usize,
        out_w: usize,
        t_dim: usize,
        groups: usize,
    ) -> Self {
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), in_w, norm_group_count(in_w, groups));
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), in_w, out_w, 3, 1, 1);
        let time_proj = Linear::new(store, rng, &format!("{name}.time"), t_dim, out_w);
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), out_w, norm_group_count(out_w, groups));
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), out_w, out_w, 3, 1, 1);
        let skip = (in_w != out_w)
            .then(|| Conv2d::new(store, rng, &format!("{name}.skip"), in_w, out_w, 1, 1, 0));
        Self {
            norm1,
            conv1,
            time_proj,
            norm2,
            conv2,
            skip,
            out_w,
        }
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        t_silu: &Array2<T>,
    ) -> (Array4<T>, ResBlockTape<T>) {
        let (a1, n1) = self.norm1.forward(store, x);
        let h1 = silu_forward(&a1);
        let mut z = self.conv1.forward(store, &h1);
        let tadd = self.time_proj.forward(store, t_silu); // (n, out_w)
        for si in 0..z.dim().0 {
            for ch in 0..self.out_w {
                let shift = tadd[[si, ch]];
                z.slice_mut(s![si, ch, .., ..]).mapv_inplace(|v| v + shift);
            }
        }
        let (a2, n2) = self.norm2.forward(store, &z);
        let h2 = silu_forward(&a2);
        let z2 = self.conv2.forward(store, &h2);
        let sk = match &self.skip {
            Some(c) => c.forward(store, x),
            None => x.clone(),
        };
        let y = z2 + sk;
        (
            y,
            ResBlockTape {
                x: x.clone(),
                n1,
                a1,
                h1,
                n2,
                a2,
                h2,
            },
        )
    }

    /// Returns (input gradient, gradient w.r.t. the shared silu'd time
    /// vector).
    fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &ResBlockTape<T>,
        t_silu: &Array2<T>,
        dy: &Array4<T>,
    ) -> (Array4<T>, Array2<T>) {
        let dh2 = self.conv2.backward(store, &tape.h2, dy);
        let da2 = silu_backward(&tape.a2, &dh2);
        let dz = self.norm2.backward(store, &tape.n2, &da2);

        let (n, _, _, _) = dz.dim();
        let mut dtadd = Array2::<T>::zeros((n, self.out_w));
        for si in 0..n {
            for ch in 0..self.out_w {
                dtadd[[si, ch]] = dz.slice(s![si, ch, .., ..]).sum();
            }
        }
        let dt_silu = self.time_proj.backward(store, t_silu, &dtadd);

        let dh1 = self.conv1.backward(store, &tape.h1, &dz);
        let da1 = silu_backward(&tape.a1, &dh1);
        let mut dx = self.norm1.backward(store, &tape.n1, &da1);
        match &self.skip {
            Some(c) => dx = dx + c.backward(store, &tape.x, dy),
            None => dx = dx + dy,
        }
        (dx, dt_silu)
    }
}

// ---------------------------------------------------------------------------
// The U-Net

/// Activation tape from a training-mode forward pass; opaque to callers.
pub struct NetTape<T> {
    x: Array4<T>,
    ts_embed: Array2<T>,
    tz1: Array2<T>,
    ts1: Array2<T>,
    t_vec: Array2<T>,
    t_silu: Array2<T>,
    down_tapes: Vec<Vec<ResBlockTape<T>>>,
    down_pre: Vec<Array4<T>>,
    mid_tapes: Vec<ResBlockTape<T>>,
    up_deconv_in: Vec<Array4<T>>,
    up_tapes: Vec<Vec<ResBlockTape<T>>>,
    head_n: GroupNormCache<T>,
    head_a: Array4<T>,
    head_h: Array4<T>,
}

pub struct Denoiser<T> {
    cfg: DenoiserConfig,
    store: ParamStore<T>,
    time_lin1: Linear,
    time_lin2: Linear,
    stem: Conv2d,
    down_blocks: Vec<Vec<ResBlock>>,
    down_samplers: Vec<Conv2d>,
    mid_blocks: Vec<ResBlock>,
    up_samplers: Vec<ConvTranspose2d>,
    up_blocks: Vec<Vec<ResBlock>>,
    head_norm: GroupNorm,
    head_conv: Conv2d,
}

impl<T: Scalar> Denoiser<T> {
    pub fn build(cfg: &DenoiserConfig, seed: u64) -> Result<Self, DenoiserError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_dim = cfg.time_embed_dim;

        let time_lin1 = Linear::new(&mut store, &mut rng, "time1", t_dim, t_dim);
        let time_lin2 = Linear::new(&mut store, &mut rng, "time2", t_dim, t_dim);
        let stem = Conv2d::new(&mut store, &mut rng, "stem", cfg.in_channels(), cfg.level_width(0), 3, 1, 1);

        let mut down_blocks = Vec::with_capacity(cfg.depth);
        let mut down_samplers = Vec::with_capacity(cfg.depth.saturating_sub(1));
        for r in 0..cfg.depth {
            let w = cfg.level_width(r);
            let blocks = (0..cfg.res_blocks)
                .map(|b| ResBlock::new(&mut store, &mut rng, &format!("down{r}.block{b}"), w, w, t_dim, cfg.groups))
                .collect();
            down_blocks.push(blocks);
            if r + 1 < cfg.depth {
                down_samplers.push(Conv2d::new(
                    &mut store,
                    &mut rng,
                    &format!("down{r}.down"),
                    w,
                    cfg.level_width(r + 1),
                    3,
                    2,
                    1,
                ));
            }
        }

        let wm = cfg.level_width(cfg.depth - 1);
        let mid_blocks = vec![
            ResBlock::new(&mut store, &mut rng, "mid0", wm, wm, t_dim, cfg.groups),
            ResBlock::new(&mut store, &mut rng, "mid1", wm, wm, t_dim, cfg.groups),
        ];

        // application order: coarsest target level first
        let mut up_samplers = Vec::with_capacity(cfg.depth.saturating_sub(1));
        let mut up_blocks = Vec::with_capacity(cfg.depth.saturating_sub(1));
        for r in (0..cfg.depth - 1).rev() {
            let w = cfg.level_width(r);
            up_samplers.push(ConvTranspose2d::new(
                &mut store,
                &mut rng,
                &format!("up{r}.deconv"),
                cfg.level_width(r + 1),
                w,
                4,
                2,
                1,
            ));
            let blocks: Vec<ResBlock> = (0..cfg.res_blocks)
                .map(|b| {
                    let in_w = if b == 0 { 2 * w } else { w };
                    ResBlock::new(&mut store, &mut rng, &format!("up{r}.block{b}"), in_w, w, t_dim, cfg.groups)
                })
                .collect();
            up_blocks.push(blocks);
        }

        let w0 = cfg.level_width(0);
        let head_norm = GroupNorm::new(&mut store, "head.norm", w0, norm_group_count(w0, cfg.groups));
        let head_conv = Conv2d::new_zeroed(&mut store, "head.conv", w0, 1, 3, 1, 1);

        Ok(Self {
            cfg: cfg.clone(),
            store,
            time_lin1,
            time_lin2,
            stem,
            down_blocks,
            down_samplers,
            mid_blocks,
            up_samplers,
            up_blocks,
            head_norm,
            head_conv,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn check_raw_input(&self, x: &Array4<T>, ts: &[usize]) -> Result<(), DenoiserError> {
        let (n, c, h, w) = x.dim();
        if (c, h, w) != (self.cfg.in_channels(), self.cfg.height, self.cfg.width) {
            return Err(DenoiserError::ShapeMismatch {
                expected: vec![self.cfg.in_channels(), self.cfg.height, self.cfg.width],
                got: vec![c, h, w],
            });
        }
        if ts.len() != n {
            return Err(DenoiserError::ShapeMismatch {
                expected: vec![n],
                got: vec![ts.len()],
            });
        }
        if let Some(&bad) = ts.iter().find(|&&t| t == 0) {
            return Err(DenoiserError::InvalidTimestep(bad));
        }
        Ok(())
    }

    /// Forward pass over an already-assembled input, keeping the tape.
    pub fn forward_train(
        &self,
        x: &Array4<T>,
        ts: &[usize],
    ) -> Result<(Array4<T>, NetTape<T>), DenoiserError> {
        self.check_raw_input(x, ts)?;
        let t_dim = self.cfg.time_embed_dim;
        let ts_embed: Array2<T> = timestep_embedding(ts, t_dim);
        let tz1 = self.time_lin1.forward(&self.store, &ts_embed);
        let ts1 = silu_forward(&tz1);
        let t_vec = self.time_lin2.forward(&self.store, &ts1);
        let t_silu = silu_forward(&t_vec);

        let mut cur = self.stem.forward(&self.store, x);
        let mut down_tapes = Vec::with_capacity(self.cfg.depth);
        let mut down_pre = Vec::with_capacity(self.down_samplers.len());
        for r in 0..self.cfg.depth {
            let mut tapes = Vec::with_capacity(self.cfg.res_blocks);
            for b in &self.down_blocks[r] {
                let (y, tape) = b.forward(&self.store, &cur, &t_silu);
                cur = y;
                tapes.push(tape);
            }
            down_tapes.push(tapes);
            if r + 1 < self.cfg.depth {
                down_pre.push(cur.clone());
                cur = self.down_samplers[r].forward(&self.store, &cur);
            }
        }

        let mut mid_tapes = Vec::with_capacity(2);
        for b in &self.mid_blocks {
            let (y, tape) = b.forward(&self.store, &cur, &t_silu);
            cur = y;
            mid_tapes.push(tape);
        }

        let mut up_deconv_in = Vec::with_capacity(self.up_samplers.len());
        let mut up_tapes = Vec::with_capacity(self.up_samplers.len());
        for (i, up) in self.up_samplers.iter().enumerate() {
            let r = self.cfg.depth - 2 - i;
            up_deconv_in.push(cur.clone());
            let upsampled = up.forward(&self.store, &cur);
            // concatenate can return a non-standard layout; the layers
            // require contiguous standard-order data
            cur = ndarray::concatenate(Axis(1), &[upsampled.view(), down_pre[r].view()])
                .expect("concat shapes agree")
                .as_standard_layout()
                .into_owned();
            let mut tapes = Vec::with_capacity(self.cfg.res_blocks);
            for b in &self.up_blocks[i] {
                let (y, tape) = b.forward(&self.store, &cur, &t_silu);
                cur = y;
                tapes.push(tape);
            }
            up_tapes.push(tapes);
        }

        let (head_a, head_n) = self.head_norm.forward(&self.store, &cur);
        let head_h = silu_forward(&head_a);
        let out = self.head_conv.forward(&self.store, &head_h);

        Ok((
            out,
            NetTape {
                x: x.clone(),
                ts_embed,
                tz1,
                ts1,
                t_vec,
                t_silu,
                down_tapes,
                down_pre,
                mid_tapes,
                up_deconv_in,
                up_tapes,
                head_n,
                head_a,
                head_h,
            },
        ))
    }

    /// Accumulates parameter gradients for the given output gradient.
    pub fn backward(&mut self, tape: &NetTape<T>, dy: &Array4<T>) {
        let n = dy.dim().0;
        let t_dim = self.cfg.time_embed_dim;
        let mut dt_silu = Array2::<T>::zeros((n, t_dim));

        let dh = self.head_conv.backward(&mut self.store, &tape.head_h, dy);
        let da = silu_backward(&tape.head_a, &dh);
        let mut d = self.head_norm.backward(&mut self.store, &tape.head_n, &da);

        let mut dskip: Vec<Option<Array4<T>>> = vec![None; self.down_samplers.len()];
        for i in (0..self.up_samplers.len()).rev() {
            let r = self.cfg.depth - 2 - i;
            for (b, t) in self.up_blocks[i].iter().zip(&tape.up_tapes[i]).rev() {
                let (dx, dts) = b.backward(&mut self.store, t, &tape.t_silu, &d);
                d = dx;
                dt_silu = dt_silu + dts;
            }
            let w = self.cfg.level_width(r);
            let d_main = d.slice(s![.., ..w, .., ..]).to_owned();
            dskip[r] = Some(d.slice(s![.., w.., .., ..]).to_owned());
            d = self.up_samplers[i].backward(&mut self.store, &tape.up_deconv_in[i], &d_main);
        }

        for (b, t) in self.mid_blocks.iter().zip(&tape.mid_tapes).rev() {
            let (dx, dts) = b.backward(&mut self.store, t, &tape.t_silu, &d);
            d = dx;
            dt_silu = dt_silu + dts;
        }

        for r in (0..self.cfg.depth).rev() {
            if r + 1 < self.cfg.depth {
                d = self.down_samplers[r].backward(&mut self.store, &tape.down_pre[r], &d);
                if let Some(ds) = dskip[r].take() {
                    d = d + ds;
                }
            }
            for (b, t) in self.down_blocks[r].iter().zip(&tape.down_tapes[r]).rev() {
                let (dx, dts) = b.backward(&mut self.store, t, &tape.t_silu, &d);
                d = dx;
                dt_silu = dt_silu + dts;
            }
        }
        let _ = self.stem.backward(&mut self.store, &tape.x, &d);

        let d_tvec = silu_backward(&tape.t_vec, &dt_silu);
        let ds1 = self.time_lin2.backward(&mut self.store, &tape.ts1, &d_tvec);
        let dz1 = silu_backward(&tape.tz1, &ds1);
        let _ = self.time_lin1.backward(&mut self.store, &tape.ts_embed, &dz1);
    }

    /// Inference: assemble the conditioning, validate it, predict the noise.
    pub fn predict_noise(
        &self,
        pack: &ConditioningPack<T>,
        noisy: &Array4<T>,
        ts: &[usize],
    ) -> Result<Array4<T>, DenoiserError> {
        let x = pack.assemble(self.cfg.variant, noisy)?;
        let (out, _) = self.forward_train(&x, ts)?;
        Ok(out)
    }
}

impl Denoiser<f32> {
    /// Digest of all parameters; see [`crate::nn::ParamStore::fingerprint`].
    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint()
    }
}

/// Anything that can predict the noise in a noisy mask given conditioning:
/// the trained network in production, closed-form oracles in tests.
pub trait NoiseModel<T: Scalar> {
    fn variant(&self) -> ConditioningVariant;

    fn predict(
        &self,
        pack: &ConditioningPack<T>,
        noisy: &Array4<T>,
        ts: &[usize],
    ) -> Result<Array4<T>, DenoiserError>;
}

impl<T: Scalar> NoiseModel<T> for Denoiser<T> {
    fn variant(&self) -> ConditioningVariant {
        self.cfg.variant
    }

    fn predict(
        &self,
        pack: &ConditioningPack<T>,
        noisy: &Array4<T>,
        ts: &[usize],
    ) -> Result<Array4<T>, DenoiserError> {
        self.predict_noise(pack, noisy, ts)
    }
}
