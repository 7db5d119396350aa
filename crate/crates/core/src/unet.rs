//! Conditional U-Net over latents: two resolutions, residual blocks with
//! timestep injection, and one cross-attention block per resolution reading
//! the projected prompt embedding as a single context token.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{self, Graph, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnetConfig {
    pub latent_channels: usize,
    pub latent_side: usize,
    /// Channels at the full latent resolution.
    pub base_channels: usize,
    /// Channels at the downsampled resolution.
    pub mid_channels: usize,
    pub time_embed_dim: usize,
    /// Width of the conditioning token (the dual encoder's embedding dim).
    pub context_dim: usize,
    pub norm_groups: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            latent_channels: 4,
            latent_side: 8,
            base_channels: 32,
            mid_channels: 64,
            time_embed_dim: 64,
            context_dim: 64,
            norm_groups: 8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Unet {
    pub cfg: UnetConfig,
}

impl Unet {
    pub fn new(cfg: UnetConfig) -> Self {
        Unet { cfg }
    }

    fn init_res_block(store: &mut ParamStore, rng: &mut Rng, prefix: &str, c: usize, temb: usize) {
        nn::init_norm(store, &format!("{prefix}.norm1"), c);
        nn::init_conv(store, rng, &format!("{prefix}.conv1"), c, c, 3);
        nn::init_linear(store, rng, &format!("{prefix}.emb"), temb, c);
        nn::init_norm(store, &format!("{prefix}.norm2"), c);
        nn::init_conv(store, rng, &format!("{prefix}.conv2"), c, c, 3);
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let c = &self.cfg;
        nn::init_linear(store, rng, "unet.temb.l1", c.time_embed_dim, c.time_embed_dim);
        nn::init_linear(store, rng, "unet.temb.l2", c.time_embed_dim, c.time_embed_dim);
        nn::init_conv(store, rng, "unet.conv_in", c.latent_channels, c.base_channels, 3);
        Self::init_res_block(store, rng, "unet.down0", c.base_channels, c.time_embed_dim);
        nn::init_cross_attention(store, rng, "unet.attn0", c.base_channels, c.context_dim);
        nn::init_conv(store, rng, "unet.downsample", c.base_channels, c.mid_channels, 3);
        Self::init_res_block(store, rng, "unet.down1", c.mid_channels, c.time_embed_dim);
        nn::init_cross_attention(store, rng, "unet.attn1", c.mid_channels, c.context_dim);
        Self::init_res_block(store, rng, "unet.mid", c.mid_channels, c.time_embed_dim);
        nn::init_conv(
            store,
            rng,
            "unet.fuse",
            c.mid_channels + c.base_channels,
            c.base_channels,
            3,
        );
        Self::init_res_block(store, rng, "unet.up0", c.base_channels, c.time_embed_dim);
        nn::init_norm(store, "unet.out_norm", c.base_channels);
        nn::init_conv(store, rng, "unet.conv_out", c.base_channels, c.latent_channels, 3);
    }

    /// Sinusoidal timestep features, computed off-tape (t carries no grad).
    pub fn time_features(&self, t: usize) -> Tensor {
        let dim = self.cfg.time_embed_dim;
        let half = dim / 2;
        let mut data = Vec::with_capacity(dim);
        for i in 0..half {
            let freq = libm::exp(-libm::log(10000.0) * i as f64 / half as f64);
            data.push(libm::sin(t as f64 * freq));
        }
        for i in 0..half {
            let freq = libm::exp(-libm::log(10000.0) * i as f64 / half as f64);
            data.push(libm::cos(t as f64 * freq));
        }
        Tensor::new(data, &[1, dim])
    }

    fn res_block(
        g: &mut Graph<'_>,
        prefix: &str,
        x: Var,
        temb: Var,
        groups: usize,
    ) -> Var {
        let h = nn::group_norm(g, &format!("{prefix}.norm1"), x, groups);
        let h = g.tape.silu(h);
        let h = nn::conv(g, &format!("{prefix}.conv1"), h, 1, 1);

        // Per-channel shift from the time embedding.
        let emb = g.tape.silu(temb);
        let shift_row = nn::linear(g, &format!("{prefix}.emb"), emb); // [1, c]
        let c = g.value(shift_row).shape()[1];
        let shift = g.tape.reshape(shift_row, &[c]);
        let h = g.tape.add_chan(h, shift);

        let h = nn::group_norm(g, &format!("{prefix}.norm2"), h, groups);
        let h = g.tape.silu(h);
        let h = nn::conv(g, &format!("{prefix}.conv2"), h, 1, 1);
        g.tape.add(x, h)
    }

    /// Noise prediction for a latent at timestep `t` under a conditioning
    /// token `cond` of shape [1, context_dim].
    pub fn forward_graph(&self, g: &mut Graph<'_>, z_t: Var, t: usize, cond: Var) -> Var {
        let groups = self.cfg.norm_groups;
        let tf = self.time_features(t);
        let tf = g.leaf(tf);
        let temb = nn::linear(g, "unet.temb.l1", tf);
        let temb = g.tape.silu(temb);
        let temb = nn::linear(g, "unet.temb.l2", temb);

        let h0 = nn::conv(g, "unet.conv_in", z_t, 1, 1);
        let h0 = Self::res_block(g, "unet.down0", h0, temb, groups);
        let h0 = nn::cross_attention(g, "unet.attn0", h0, cond, groups);

        let h1 = nn::conv(g, "unet.downsample", h0, 2, 1);
        let h1 = Self::res_block(g, "unet.down1", h1, temb, groups);
        let h1 = nn::cross_attention(g, "unet.attn1", h1, cond, groups);

        let m = Self::res_block(g, "unet.mid", h1, temb, groups);

        let u = g.tape.upsample2x(m);
        // Channel concat with the skip connection.
        let (cu, ch) = (
            g.value(u).shape()[0],
            g.value(h0).shape()[0],
        );
        let side = self.cfg.latent_side;
        let u_flat = g.tape.reshape(u, &[cu, side * side]);
        let h0_flat = g.tape.reshape(h0, &[ch, side * side]);
        let cat = g.tape.concat_rows(&[u_flat, h0_flat]);
        let cat = g.tape.reshape(cat, &[cu + ch, side, side]);
        let u = nn::conv(g, "unet.fuse", cat, 1, 1);
        let u = Self::res_block(g, "unet.up0", u, temb, groups);

        let out = nn::group_norm(g, "unet.out_norm", u, groups);
        let out = g.tape.silu(out);
        nn::conv(g, "unet.conv_out", out, 1, 1)
    }

    pub fn check_latent_shape(&self, t: &Tensor) -> Result<()> {
        let c = &self.cfg;
        let expected = [c.latent_channels, c.latent_side, c.latent_side];
        if t.shape() != expected {
            return Err(Error::ShapeMismatch {
                context: "unet_predict",
                expected: format!("{expected:?}"),
                got: t.shape_string(),
            });
        }
        Ok(())
    }

    pub fn check_cond_shape(&self, cond: &Tensor) -> Result<()> {
        if cond.numel() != self.cfg.context_dim {
            return Err(Error::ShapeMismatch {
                context: "unet_predict",
                expected: format!("[{}]", self.cfg.context_dim),
                got: cond.shape_string(),
            });
        }
        Ok(())
    }

    /// Plain (no-gradient) noise prediction.
    pub fn predict(
        &self,
        store: &ParamStore,
        z_t: &Tensor,
        t: usize,
        timesteps: usize,
        cond: &Tensor,
    ) -> Result<Tensor> {
        self.check_latent_shape(z_t)?;
        self.check_cond_shape(cond)?;
        if t >= timesteps {
            return Err(Error::validation(format!(
                "timestep {t} out of range 0..{timesteps}"
            )));
        }
        let mut g = Graph::new(store);
        let z = g.leaf(z_t.clone());
        let c = g.leaf(cond.reshaped(&[1, self.cfg.context_dim]));
        let eps = self.forward_graph(&mut g, z, t, c);
        Ok(g.value(eps).clone())
    }
}

/// Eq. 3 noise-prediction objective: mean squared error between prediction
/// and the true noise.
pub fn ddpm_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    eps_hat.check_same_shape(eps, "ddpm_loss")?;
    Ok(eps_hat.mse(eps))
}

/// String list of every U-Net parameter name for a config (layout contract).
pub fn parameter_names(cfg: &UnetConfig) -> Vec<String> {
    let unet = Unet::new(*cfg);
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    unet.init_params(&mut store, &mut rng);
    store.names().map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Unet, ParamStore) {
        let cfg = UnetConfig {
            latent_channels: 2,
            latent_side: 4,
            base_channels: 8,
            mid_channels: 16,
            time_embed_dim: 8,
            context_dim: 6,
            norm_groups: 2,
        };
        let unet = Unet::new(cfg);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        unet.init_params(&mut store, &mut rng);
        (unet, store)
    }

    #[test]
    fn output_shape_matches_input() {
        let (unet, store) = tiny();
        let mut rng = Rng::new(1);
        let z = Tensor::randn(&mut rng, 1.0, &[2, 4, 4]);
        let cond = Tensor::randn(&mut rng, 1.0, &[6]);
        let eps = unet.predict(&store, &z, 3, 10, &cond).unwrap();
        assert_eq!(eps.shape(), z.shape());
        assert!(eps.is_finite());
    }

    #[test]
    fn conditioning_is_not_degenerate() {
        let (unet, store) = tiny();
        let mut rng = Rng::new(2);
        let z = Tensor::randn(&mut rng, 1.0, &[2, 4, 4]);
        let c1 = Tensor::randn(&mut rng, 1.0, &[6]);
        let c2 = Tensor::randn(&mut rng, 1.0, &[6]);
        let e1 = unet.predict(&store, &z, 0, 10, &c1).unwrap();
        let e2 = unet.predict(&store, &z, 0, 10, &c2).unwrap();
        let diff: f64 = e1
            .data()
            .iter()
            .zip(e2.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(diff > 0.0, "changing cond must change the prediction");
    }

    #[test]
    fn shape_and_timestep_validation() {
        let (unet, store) = tiny();
        let z_bad = Tensor::zeros(&[2, 3, 3]);
        let cond = Tensor::zeros(&[6]);
        assert!(unet.predict(&store, &z_bad, 0, 10, &cond).is_err());
        let z = Tensor::zeros(&[2, 4, 4]);
        let cond_bad = Tensor::zeros(&[5]);
        assert!(unet.predict(&store, &z, 0, 10, &cond_bad).is_err());
        assert!(unet.predict(&store, &z, 10, 10, &cond).is_err());
    }

    #[test]
    fn ddpm_loss_hand_oracle() {
        let a = Tensor::new(alloc::vec![1.0, 0.0], &[2]);
        let b = Tensor::zeros(&[2]);
        assert_eq!(ddpm_loss(&a, &b).unwrap(), 0.5);
        assert_eq!(ddpm_loss(&a, &a).unwrap(), 0.0);
        // Symmetry.
        assert_eq!(ddpm_loss(&a, &b).unwrap(), ddpm_loss(&b, &a).unwrap());
        // Shape mismatch.
        assert!(ddpm_loss(&a, &Tensor::zeros(&[3])).is_err());
    }

    /// Gradient of mean(eps_hat) with respect to the conditioning token must
    /// match central finite differences.
    #[test]
    fn gradient_with_respect_to_cond() {
        let (unet, store) = tiny();
        let mut rng = Rng::new(3);
        let z = Tensor::randn(&mut rng, 1.0, &[2, 4, 4]);
        let cond = Tensor::randn(&mut rng, 1.0, &[1, 6]);

        let mut g = Graph::new(&store);
        let zv = g.leaf(z.clone());
        let cv = g.leaf(cond.clone());
        let eps = unet.forward_graph(&mut g, zv, 2, cv);
        let root = g.tape.mean(eps);
        let (_, raw) = g.backward(root);
        let analytic = raw.get(cv).unwrap().clone();

        let eval = |c: &Tensor| -> f64 {
            let mut g = Graph::new(&store);
            let zv = g.leaf(z.clone());
            let cv = g.leaf(c.clone());
            let eps = unet.forward_graph(&mut g, zv, 2, cv);
            let root = g.tape.mean(eps);
            g.value(root).item()
        };

        let h = 1e-5;
        for j in 0..cond.numel() {
            let mut plus = cond.clone();
            plus.data_mut()[j] += h;
            let mut minus = cond.clone();
            minus.data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let scale = a.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (a - numeric).abs() / scale < 1e-4,
                "cond[{j}]: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
