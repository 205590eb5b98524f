//! The reconstruction autoencoder used by both ensembles: a strided
//! convolutional encoder, a small fully connected bottleneck, and a
//! transposed-convolution decoder mirroring the encoder. ReLU between
//! layers, linear output, no normalization layers.

use crate::nn::layers::{relu_backward, relu_forward, Conv2d, ConvTranspose2d, Linear};
use crate::nn::{ParamStore, Scalar};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match configured {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Architecture hyperparameters. The layer counts follow the reference
/// design: one strided conv per entry of `widths` (each halving H and W),
/// `fc_layers` fully connected bottleneck layers, and a mirrored stack of
/// transposed convs. Spatial dims must divide evenly through the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub widths: Vec<usize>,
    pub fc_layers: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            height: 256,
            width: 256,
            latent_dim: 128,
            widths: vec![32, 64, 128, 256],
            fc_layers: 3,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 {
            return Err(ModelError::InvalidConfig("in_channels must be >= 1".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(ModelError::InvalidConfig(
                "widths must be nonempty and positive".into(),
            ));
        }
        if self.latent_dim == 0 {
            return Err(ModelError::InvalidConfig("latent_dim must be >= 1".into()));
        }
        if self.fc_layers < 2 {
            return Err(ModelError::InvalidConfig(
                "need at least 2 bottleneck layers (encode + decode)".into(),
            ));
        }
        let down = 1usize << self.widths.len();
        if self.height % down != 0 || self.width % down != 0 || self.height < down || self.width < down
        {
            return Err(ModelError::InvalidConfig(format!(
                "spatial dims {}x{} must be divisible by {down} (one halving per conv layer)",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Spatial size at the bottleneck.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let down = 1usize << self.widths.len();
        (self.height / down, self.width / down)
    }

    fn enc_dim(&self) -> usize {
        let (bh, bw) = self.bottleneck_hw();
        self.widths.last().unwrap() * bh * bw
    }
}

/// Activation tape from a training-mode forward pass.
pub struct AeTape<T> {
    conv_in: Vec<Array4<T>>,
    conv_z: Vec<Array4<T>>,
    fc_in: Vec<Array2<T>>,
    fc_z: Vec<Array2<T>>,
    dec_in: Vec<Array4<T>>,
    dec_z: Vec<Array4<T>>,
}

#[derive(Debug, Clone)]
pub struct Autoencoder<T> {
    cfg: AutoencoderConfig,
    store: ParamStore<T>,
    enc: Vec<Conv2d>,
    fc: Vec<Linear>,
    dec: Vec<ConvTranspose2d>,
}

impl<T: Scalar> Autoencoder<T> {
    /// Deterministic construction: the same seed always yields the same
    /// initial parameters.
    pub fn build(cfg: &AutoencoderConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut enc = Vec::with_capacity(cfg.widths.len());
        let mut in_ch = cfg.in_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            enc.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("enc{i}"),
                in_ch,
                w,
                3,
                2,
                1,
            ));
            in_ch = w;
        }

        let enc_dim = cfg.enc_dim();
        let mut fc = Vec::with_capacity(cfg.fc_layers);
        for i in 0..cfg.fc_layers {
            let (fin, fout) = if cfg.fc_layers == 2 {
                // degenerate two-layer bottleneck: straight down and back up
                if i == 0 {
                    (enc_dim, cfg.latent_dim)
                } else {
                    (cfg.latent_dim, enc_dim)
                }
            } else if i == 0 {
                (enc_dim, cfg.latent_dim)
            } else if i == cfg.fc_layers - 1 {
                (cfg.latent_dim, enc_dim)
            } else {
                (cfg.latent_dim, cfg.latent_dim)
            };
            fc.push(Linear::new(&mut store, &mut rng, &format!("fc{i}"), fin, fout));
        }

        let mut dec = Vec::with_capacity(cfg.widths.len());
        for i in (0..cfg.widths.len()).rev() {
            let out_ch = if i == 0 {
                cfg.in_channels
            } else {
                cfg.widths[i - 1]
            };
            dec.push(ConvTranspose2d::new(
                &mut store,
                &mut rng,
                &format!("dec{i}"),
                cfg.widths[i],
                out_ch,
                4,
                2,
                1,
            ));
        }

        Ok(Self {
            cfg: cfg.clone(),
            store,
            enc,
            fc,
            dec,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn check_input(&self, x: &Array4<T>) -> Result<(), ModelError> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != (self.cfg.in_channels, self.cfg.height, self.cfg.width) {
            return Err(ModelError::ShapeMismatch {
                expected: vec![self.cfg.in_channels, self.cfg.height, self.cfg.width],
                got: vec![c, h, w],
            });
        }
        Ok(())
    }

    /// Inference forward pass (no tape).
    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>, ModelError> {
        Ok(self.forward_train(x)?.0)
    }

    /// Forward pass that keeps every intermediate needed by [`Self::backward`].
    pub fn forward_train(&self, x: &Array4<T>) -> Result<(Array4<T>, AeTape<T>), ModelError> {
        self.check_input(x)?;
        let n = x.dim().0;
        let mut tape = AeTape {
            conv_in: Vec::with_capacity(self.enc.len()),
            conv_z: Vec::with_capacity(self.enc.len()),
            fc_in: Vec::with_capacity(self.fc.len()),
            fc_z: Vec::with_capacity(self.fc.len()),
            dec_in: Vec::with_capacity(self.dec.len()),
            dec_z: Vec::with_capacity(self.dec.len()),
        };

        let mut cur = x.clone();
        for conv in &self.enc {
            let z = conv.forward(&self.store, &cur);
            tape.conv_in.push(std::mem::replace(&mut cur, relu_forward(&z)));
            tape.conv_z.push(z);
        }

        let enc_dim = self.cfg.enc_dim();
        let mut flat = cur
            .into_shape_with_order((n, enc_dim))
            .expect("contiguous activations");
        for lin in &self.fc {
            let z = lin.forward(&self.store, &flat);
            tape.fc_in.push(std::mem::replace(&mut flat, relu_forward(&z)));
            tape.fc_z.push(z);
        }

        let (bh, bw) = self.cfg.bottleneck_hw();
        let mut cur = flat
            .into_shape_with_order((n, *self.cfg.widths.last().unwrap(), bh, bw))
            .expect("contiguous activations");
        let last = self.dec.len() - 1;
        for (i, deconv) in self.dec.iter().enumerate() {
            let z = deconv.forward(&self.store, &cur);
            let next = if i == last { z.clone() } else { relu_forward(&z) };
            tape.dec_in.push(std::mem::replace(&mut cur, next));
            tape.dec_z.push(z);
        }
        Ok((cur, tape))
    }

    /// Accumulates parameter gradients for the given output gradient.
    pub fn backward(&mut self, tape: &AeTape<T>, dy: &Array4<T>) {
        let n = dy.dim().0;
        let last = self.dec.len() - 1;
        let mut d4 = dy.clone();
        for (i, deconv) in self.dec.iter().enumerate().rev() {
            let dz = if i == last {
                d4
            } else {
                relu_backward(&tape.dec_z[i], &d4)
            };
            d4 = deconv.backward(&mut self.store, &tape.dec_in[i], &dz);
        }

        let mut d2 = d4
            .into_shape_with_order((n, self.cfg.enc_dim()))
            .expect("contiguous gradients");
        for (i, lin) in self.fc.iter().enumerate().rev() {
            let dz = relu_backward(&tape.fc_z[i], &d2);
            d2 = lin.backward(&mut self.store, &tape.fc_in[i], &dz);
        }

        let (bh, bw) = self.cfg.bottleneck_hw();
        let mut d4 = d2
            .into_shape_with_order((n, *self.cfg.widths.last().unwrap(), bh, bw))
            .expect("contiguous gradients");
        debug_assert_eq!(d4.dim().1, self.enc.last().unwrap().out_ch);
        for (i, conv) in self.enc.iter().enumerate().rev() {
            let dz = relu_backward(&tape.conv_z[i], &d4);
            d4 = conv.backward(&mut self.store, &tape.conv_in[i], &dz);
        }
    }

    /// Reconstructs a single C×H×W image.
    pub fn reconstruct(&self, b: &Array3<T>) -> Result<Array3<T>, ModelError> {
        let x = b
            .clone()
            .insert_axis(Axis(0))
            .into_dimensionality()
            .expect("3d plus batch axis is 4d");
        let y = self.forward(&x)?;
        Ok(y.index_axis(Axis(0), 0).to_owned())
    }
}
