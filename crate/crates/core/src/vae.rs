//! Variational autoencoder mapping [3, side, side] images to
//! [latent_channels, side/4, side/4] codes and back.
//!
//! The encoder produces a mean and log-variance head; the pipeline's
//! deterministic `encode` uses the mean only. The sampling branch exists
//! solely inside VAE pretraining (reparameterized, seeded).

use alloc::format;

use crate::error::{Error, Result};
use crate::nn::{self, Graph, ParamStore};
use crate::rng::Rng;
use crate::synthworld::Image;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeConfig {
    pub image_side: usize,
    pub latent_channels: usize,
    /// Encoder channel width after the first downsampling conv; the second
    /// stage doubles it.
    pub base_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            image_side: 32,
            latent_channels: 4,
            base_channels: 16,
        }
    }
}

impl VaeConfig {
    pub fn latent_side(&self) -> usize {
        self.image_side / 4
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_side(), self.latent_side()]
    }
}

/// Parameter layout and forward passes; weights live in a [`ParamStore`]
/// under the `vae.` prefix.
#[derive(Debug, Clone, Copy)]
pub struct Vae {
    pub cfg: VaeConfig,
}

impl Vae {
    pub fn new(cfg: VaeConfig) -> Self {
        Vae { cfg }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let b = self.cfg.base_channels;
        let zc = self.cfg.latent_channels;
        nn::init_conv(store, rng, "vae.enc.conv1", 3, b, 3);
        nn::init_conv(store, rng, "vae.enc.conv2", b, 2 * b, 3);
        nn::init_conv(store, rng, "vae.enc.conv3", 2 * b, 2 * b, 3);
        nn::init_conv(store, rng, "vae.enc.mean", 2 * b, zc, 3);
        nn::init_conv(store, rng, "vae.enc.logvar", 2 * b, zc, 3);
        nn::init_conv(store, rng, "vae.dec.conv1", zc, 2 * b, 3);
        nn::init_conv(store, rng, "vae.dec.conv2", 2 * b, 2 * b, 3);
        nn::init_conv(store, rng, "vae.dec.conv3", 2 * b, b, 3);
        nn::init_conv(store, rng, "vae.dec.out", b, 3, 3);
    }

    pub fn check_image_shape(&self, t: &Tensor) -> Result<()> {
        let s = self.cfg.image_side;
        if t.shape() != [3, s, s] {
            return Err(Error::ShapeMismatch {
                context: "vae_encode",
                expected: format!("[3, {s}, {s}]"),
                got: t.shape_string(),
            });
        }
        Ok(())
    }

    pub fn check_latent_shape(&self, t: &Tensor) -> Result<()> {
        let expected = self.cfg.latent_shape();
        if t.shape() != expected {
            return Err(Error::ShapeMismatch {
                context: "vae_decode",
                expected: format!("{expected:?}"),
                got: t.shape_string(),
            });
        }
        Ok(())
    }

    /// Encoder trunk to (mean, logvar) heads.
    pub fn encode_moments_graph(&self, g: &mut Graph<'_>, x: Var) -> (Var, Var) {
        let h = nn::conv(g, "vae.enc.conv1", x, 2, 1);
        let h = g.tape.silu(h);
        let h = nn::conv(g, "vae.enc.conv2", h, 2, 1);
        let h = g.tape.silu(h);
        let h = nn::conv(g, "vae.enc.conv3", h, 1, 1);
        let h = g.tape.silu(h);
        let mean = nn::conv(g, "vae.enc.mean", h, 1, 1);
        let logvar = nn::conv(g, "vae.enc.logvar", h, 1, 1);
        (mean, logvar)
    }

    /// Decoder from latent to a sigmoid-squashed image in [0, 1].
    pub fn decode_graph(&self, g: &mut Graph<'_>, z: Var) -> Var {
        let h = nn::conv(g, "vae.dec.conv1", z, 1, 1);
        let h = g.tape.silu(h);
        let h = g.tape.upsample2x(h);
        let h = nn::conv(g, "vae.dec.conv2", h, 1, 1);
        let h = g.tape.silu(h);
        let h = g.tape.upsample2x(h);
        let h = nn::conv(g, "vae.dec.conv3", h, 1, 1);
        let h = g.tape.silu(h);
        let h = nn::conv(g, "vae.dec.out", h, 1, 1);
        g.tape.sigmoid(h)
    }

    /// Deterministic encode: the posterior mean.
    pub fn encode_mean(&self, store: &ParamStore, image: &Image) -> Result<Tensor> {
        self.check_image_shape(&image.planes)?;
        let mut g = Graph::new(store);
        let x = g.leaf(image.planes.clone());
        let (mean, _) = self.encode_moments_graph(&mut g, x);
        let out = g.value(mean).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite(
                "vae_encode produced non-finite latent".into(),
            ));
        }
        Ok(out)
    }

    pub fn decode(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        self.check_latent_shape(z)?;
        let mut g = Graph::new(store);
        let zv = g.leaf(z.clone());
        let img = self.decode_graph(&mut g, zv);
        Ok(g.value(img).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{render_scene, Color, SceneSpec, Shape};

    fn tiny_vae() -> (Vae, ParamStore) {
        let vae = Vae::new(VaeConfig {
            image_side: 16,
            latent_channels: 2,
            base_channels: 4,
        });
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        vae.init_params(&mut store, &mut rng);
        (vae, store)
    }

    fn test_image(side: usize) -> Image {
        render_scene(
            &SceneSpec {
                shape: Shape::Square,
                color: Color::Blue,
                position: (0.5, 0.5),
                scale: 0.4,
                background: 0.6,
                seed: 1,
            },
            side,
        )
        .unwrap()
    }

    #[test]
    fn encode_is_deterministic() {
        let (vae, store) = tiny_vae();
        let img = test_image(16);
        let a = vae.encode_mean(&store, &img).unwrap();
        let b = vae.encode_mean(&store, &img).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[2, 4, 4]);
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let (vae, store) = tiny_vae();
        let img = test_image(32);
        assert!(matches!(
            vae.encode_mean(&store, &img),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn all_zero_image_gives_finite_latent() {
        let (vae, store) = tiny_vae();
        let img = Image::from_tensor(Tensor::zeros(&[3, 16, 16])).unwrap();
        let z = vae.encode_mean(&store, &img).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn decode_bounds_hold_for_extreme_latents() {
        let (vae, store) = tiny_vae();
        let mut rng = Rng::new(3);
        for _ in 0..3 {
            let z = Tensor::new(
                (0..2 * 4 * 4).map(|_| rng.uniform_in(-10.0, 10.0)).collect(),
                &[2, 4, 4],
            );
            let img = vae.decode(&store, &z).unwrap();
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn decode_shape_validation() {
        let (vae, store) = tiny_vae();
        let z = Tensor::zeros(&[2, 5, 5]);
        assert!(matches!(
            vae.decode(&store, &z),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
