//! Tiny conditional UNet noise predictor.
//!
//! Three resolution levels (default widths 32/64/128), two 3x3 conv +
//! SiLU units per level, 2x average-pool down / nearest-neighbor-up skips.
//! A sinusoidal timestep embedding and a learned lighting embedding
//! (flattened lighting map -> two-layer MLP) are summed and injected per
//! block as an additive per-channel bias. Forward and reverse passes are
//! written out by hand over a flat parameter vector.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::ops::*;
use crate::nn::{randn, Scalar, Tensor3};

/// Architecture hyperparameters. The parameter vector layout is a pure
/// function of this config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub widths: [usize; 3],
    pub emb_dim: usize,
    pub light_hidden: usize,
    /// Lighting maps are area-resampled to this edge length before the MLP.
    pub light_size: usize,
}

impl UNetConfig {
    /// The full-size model: about 1.5M parameters.
    pub fn standard() -> Self {
        Self {
            in_ch: 7,
            out_ch: 3,
            widths: [32, 64, 128],
            emb_dim: 64,
            light_hidden: 320,
            light_size: 32,
        }
    }

    /// A few-thousand-parameter model for f64 gradient checking.
    pub fn tiny() -> Self {
        Self {
            in_ch: 7,
            out_ch: 3,
            widths: [2, 3, 4],
            emb_dim: 6,
            light_hidden: 2,
            light_size: 2,
        }
    }

    pub fn light_len(&self) -> usize {
        self.light_size * self.light_size * 3
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    c_in: usize,
    c_out: usize,
    conv1_w: Range<usize>,
    conv1_b: Range<usize>,
    emb_w: Range<usize>,
    emb_b: Range<usize>,
    conv2_w: Range<usize>,
    conv2_b: Range<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    light_w1: Range<usize>,
    light_b1: Range<usize>,
    light_w2: Range<usize>,
    light_b2: Range<usize>,
    blocks: [BlockLayout; 5],
    final_w: Range<usize>,
    final_b: Range<usize>,
    n_params: usize,
}

/// The UNet: a config plus the derived parameter layout. Parameters live in
/// caller-owned flat vectors.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    layout: Layout,
}

fn block_layout(cursor: &mut usize, c_in: usize, c_out: usize, emb: usize) -> BlockLayout {
    let mut take = |len: usize| -> Range<usize> {
        let r = *cursor..*cursor + len;
        *cursor += len;
        r
    };
    BlockLayout {
        c_in,
        c_out,
        conv1_w: take(c_out * c_in * 9),
        conv1_b: take(c_out),
        emb_w: take(c_out * emb),
        emb_b: take(c_out),
        conv2_w: take(c_out * c_out * 9),
        conv2_b: take(c_out),
    }
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Self {
        assert!(cfg.emb_dim % 2 == 0, "emb_dim must be even");
        let [c0, c1, c2] = cfg.widths;
        let mut cursor = 0usize;
        let mut take = |len: usize| -> Range<usize> {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let light_w1 = take(cfg.light_hidden * cfg.light_len());
        let light_b1 = take(cfg.light_hidden);
        let light_w2 = take(cfg.emb_dim * cfg.light_hidden);
        let light_b2 = take(cfg.emb_dim);
        let blocks = [
            block_layout(&mut cursor, cfg.in_ch, c0, cfg.emb_dim),
            block_layout(&mut cursor, c0, c1, cfg.emb_dim),
            block_layout(&mut cursor, c1, c2, cfg.emb_dim),
            block_layout(&mut cursor, c2 + c1, c1, cfg.emb_dim),
            block_layout(&mut cursor, c1 + c0, c0, cfg.emb_dim),
        ];
        let mut take = |len: usize| -> Range<usize> {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let final_w = take(cfg.out_ch * c0 * 9);
        let final_b = take(cfg.out_ch);
        let layout = Layout {
            light_w1,
            light_b1,
            light_w2,
            light_b2,
            blocks,
            final_w,
            final_b,
            n_params: cursor,
        };
        Self { cfg, layout }
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    /// He-normal initialization; the final conv starts near zero so the
    /// untrained predictor is close to the zero map.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut p = vec![T::zero(); self.n_params()];
        let mut fill = |range: &Range<usize>, std: f64, p: &mut Vec<T>| {
            for i in range.clone() {
                p[i] = T::from_f64(randn(&mut rng) * std);
            }
        };
        let l = &self.layout;
        fill(&l.light_w1, (2.0 / self.cfg.light_len() as f64).sqrt(), &mut p);
        fill(
            &l.light_w2,
            (2.0 / self.cfg.light_hidden as f64).sqrt(),
            &mut p,
        );
        for b in &l.blocks {
            fill(&b.conv1_w, (2.0 / (b.c_in * 9) as f64).sqrt(), &mut p);
            fill(&b.emb_w, (2.0 / self.cfg.emb_dim as f64).sqrt(), &mut p);
            fill(&b.conv2_w, (2.0 / (b.c_out * 9) as f64).sqrt(), &mut p);
        }
        fill(
            &l.final_w,
            0.1 * (2.0 / (self.cfg.widths[0] * 9) as f64).sqrt(),
            &mut p,
        );
        p
    }

    /// Standard sinusoidal embedding of an integer timestep.
    pub fn timestep_embedding<T: Scalar>(&self, t: usize) -> Vec<T> {
        let half = self.cfg.emb_dim / 2;
        let mut out = vec![T::zero(); self.cfg.emb_dim];
        for i in 0..half {
            let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[i] = T::from_f64(arg.sin());
            out[half + i] = T::from_f64(arg.cos());
        }
        out
    }

    /// Full forward pass. `local` is the concatenated conditioning stack
    /// (noisy image, condition image, mask), `light` the flattened lighting
    /// input of length [`UNetConfig::light_len`].
    pub fn forward<T: Scalar>(
        &self,
        params: &[T],
        local: &Tensor3<T>,
        light: &[T],
        t: usize,
    ) -> Cache<T> {
        assert_eq!(params.len(), self.n_params());
        assert_eq!(local.ch, self.cfg.in_ch, "local channel mismatch");
        assert_eq!(light.len(), self.cfg.light_len(), "lighting length mismatch");
        assert!(
            local.h % 4 == 0 && local.w % 4 == 0,
            "resolution must be divisible by 4"
        );
        let l = &self.layout;

        // Lighting embedding: two-layer MLP over the flattened lighting map.
        let pre1 = linear(
            light,
            &params[l.light_w1.clone()],
            &params[l.light_b1.clone()],
            self.cfg.light_hidden,
        );
        let hid = silu_vec(&pre1);
        let lemb = linear(
            &hid,
            &params[l.light_w2.clone()],
            &params[l.light_b2.clone()],
            self.cfg.emb_dim,
        );
        let temb = self.timestep_embedding::<T>(t);
        let emb: Vec<T> = temb.iter().zip(&lemb).map(|(&a, &b)| a + b).collect();

        let enc0 = self.block_forward(params, 0, local.clone(), &emb);
        let p0 = avg_pool2(&enc0.a2);
        let enc1 = self.block_forward(params, 1, p0, &emb);
        let p1 = avg_pool2(&enc1.a2);
        let enc2 = self.block_forward(params, 2, p1, &emb);
        let u1 = upsample_nearest2(&enc2.a2);
        let cat1 = concat_channels(&u1, &enc1.a2);
        let dec1 = self.block_forward(params, 3, cat1, &emb);
        let u0 = upsample_nearest2(&dec1.a2);
        let cat0 = concat_channels(&u0, &enc0.a2);
        let dec0 = self.block_forward(params, 4, cat0, &emb);
        let out = conv3x3(
            &dec0.a2,
            &params[l.final_w.clone()],
            &params[l.final_b.clone()],
            self.cfg.out_ch,
        );

        Cache {
            light_in: light.to_vec(),
            light_pre1: pre1,
            light_hid: hid,
            emb,
            enc0,
            enc1,
            enc2,
            dec1,
            dec0,
            out,
        }
    }

    fn block_forward<T: Scalar>(
        &self,
        params: &[T],
        idx: usize,
        x: Tensor3<T>,
        emb: &[T],
    ) -> BlockCache<T> {
        let b = &self.layout.blocks[idx];
        let mut h1 = conv3x3(
            &x,
            &params[b.conv1_w.clone()],
            &params[b.conv1_b.clone()],
            b.c_out,
        );
        let shift = linear(
            emb,
            &params[b.emb_w.clone()],
            &params[b.emb_b.clone()],
            b.c_out,
        );
        add_channel_bias(&mut h1, &shift);
        let a1 = silu(&h1);
        let h2 = conv3x3(
            &a1,
            &params[b.conv2_w.clone()],
            &params[b.conv2_b.clone()],
            b.c_out,
        );
        let a2 = silu(&h2);
        BlockCache { x, h1, a1, h2, a2 }
    }

    /// Reverse-mode pass: gradient of a scalar loss with respect to every
    /// parameter, given `d_out = dLoss/d(output)`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &Cache<T>,
        d_out: &Tensor3<T>,
    ) -> Vec<T> {
        let l = &self.layout;
        let mut grads = vec![T::zero(); self.n_params()];

        // Final conv.
        let d_dec0a2 = {
            let (gw, gb) = (l.final_w.clone(), l.final_b.clone());
            let mut dw = vec![T::zero(); gw.len()];
            let mut db = vec![T::zero(); gb.len()];
            let d = conv3x3_backward(&cache.dec0.a2, &params[gw.clone()], d_out, &mut dw, &mut db);
            grads[gw].copy_from_slice(&dw);
            grads[gb].copy_from_slice(&db);
            d
        };

        let mut d_emb = vec![T::zero(); self.cfg.emb_dim];
        let emb = &cache.emb;

        let d_cat0 =
            self.block_backward(params, 4, &cache.dec0, emb, &d_dec0a2, &mut grads, &mut d_emb);
        let (d_u0, d_e0_skip) = split_channels(&d_cat0, self.cfg.widths[1]);
        let d_dec1a2 = upsample_nearest2_backward(&d_u0);
        let d_cat1 =
            self.block_backward(params, 3, &cache.dec1, emb, &d_dec1a2, &mut grads, &mut d_emb);
        let (d_u1, d_e1_skip) = split_channels(&d_cat1, self.cfg.widths[2]);
        let d_enc2a2 = upsample_nearest2_backward(&d_u1);
        let d_p1 =
            self.block_backward(params, 2, &cache.enc2, emb, &d_enc2a2, &mut grads, &mut d_emb);
        let mut d_enc1a2 = avg_pool2_backward(&d_p1, cache.enc1.a2.h, cache.enc1.a2.w);
        for (a, b) in d_enc1a2.data.iter_mut().zip(&d_e1_skip.data) {
            *a = *a + *b;
        }
        let d_p0 =
            self.block_backward(params, 1, &cache.enc1, emb, &d_enc1a2, &mut grads, &mut d_emb);
        let mut d_enc0a2 = avg_pool2_backward(&d_p0, cache.enc0.a2.h, cache.enc0.a2.w);
        for (a, b) in d_enc0a2.data.iter_mut().zip(&d_e0_skip.data) {
            *a = *a + *b;
        }
        let _d_input =
            self.block_backward(params, 0, &cache.enc0, emb, &d_enc0a2, &mut grads, &mut d_emb);

        // Lighting MLP (the timestep embedding has no parameters).
        {
            let mut dw2 = vec![T::zero(); l.light_w2.len()];
            let mut db2 = vec![T::zero(); l.light_b2.len()];
            let d_hid = linear_backward(
                &cache.light_hid,
                &params[l.light_w2.clone()],
                &d_emb,
                &mut dw2,
                &mut db2,
            );
            grads[l.light_w2.clone()].copy_from_slice(&dw2);
            grads[l.light_b2.clone()].copy_from_slice(&db2);
            let d_pre1 = silu_vec_backward(&cache.light_pre1, &d_hid);
            let mut dw1 = vec![T::zero(); l.light_w1.len()];
            let mut db1 = vec![T::zero(); l.light_b1.len()];
            let _ = linear_backward(
                &cache.light_in,
                &params[l.light_w1.clone()],
                &d_pre1,
                &mut dw1,
                &mut db1,
            );
            grads[l.light_w1.clone()].copy_from_slice(&dw1);
            grads[l.light_b1.clone()].copy_from_slice(&db1);
        }
        grads
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward<T: Scalar>(
        &self,
        params: &[T],
        idx: usize,
        cache: &BlockCache<T>,
        emb: &[T],
        d_a2: &Tensor3<T>,
        grads: &mut [T],
        d_emb: &mut [T],
    ) -> Tensor3<T> {
        let b = &self.layout.blocks[idx];
        let d_h2 = silu_backward(&cache.h2, d_a2);
        let d_a1 = {
            let mut dw = vec![T::zero(); b.conv2_w.len()];
            let mut db = vec![T::zero(); b.conv2_b.len()];
            let d = conv3x3_backward(&cache.a1, &params[b.conv2_w.clone()], &d_h2, &mut dw, &mut db);
            grads[b.conv2_w.clone()].copy_from_slice(&dw);
            grads[b.conv2_b.clone()].copy_from_slice(&db);
            d
        };
        let d_h1 = silu_backward(&cache.h1, &d_a1);
        // FiLM shift: per-channel sums feed the embedding projection.
        let d_shift = channel_bias_grad(&d_h1);
        {
            let mut dw = vec![T::zero(); b.emb_w.len()];
            let mut db = vec![T::zero(); b.emb_b.len()];
            let d_emb_part =
                linear_backward(emb, &params[b.emb_w.clone()], &d_shift, &mut dw, &mut db);
            grads[b.emb_w.clone()].copy_from_slice(&dw);
            grads[b.emb_b.clone()].copy_from_slice(&db);
            for (a, g) in d_emb.iter_mut().zip(&d_emb_part) {
                *a = *a + *g;
            }
        }
        let mut dw = vec![T::zero(); b.conv1_w.len()];
        let mut db = vec![T::zero(); b.conv1_b.len()];
        let d_x = conv3x3_backward(&cache.x, &params[b.conv1_w.clone()], &d_h1, &mut dw, &mut db);
        grads[b.conv1_w.clone()].copy_from_slice(&dw);
        grads[b.conv1_b.clone()].copy_from_slice(&db);
        d_x
    }

    /// Names the first stage holding non-finite values, if any.
    pub fn first_non_finite_stage<T: Scalar>(&self, cache: &Cache<T>) -> Option<&'static str> {
        let stages: [(&'static str, bool); 7] = [
            (
                "lighting_mlp",
                cache.light_pre1.iter().any(|v| !v.is_finite())
                    || cache.emb.iter().any(|v| !v.is_finite()),
            ),
            ("enc0", cache.enc0.a2.has_non_finite()),
            ("enc1", cache.enc1.a2.has_non_finite()),
            ("enc2", cache.enc2.a2.has_non_finite()),
            ("dec1", cache.dec1.a2.has_non_finite()),
            ("dec0", cache.dec0.a2.has_non_finite()),
            ("final_conv", cache.out.has_non_finite()),
        ];
        stages.iter().find(|(_, bad)| *bad).map(|(name, _)| *name)
    }
}

/// Per-block cached activations.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    pub x: Tensor3<T>,
    pub h1: Tensor3<T>,
    pub a1: Tensor3<T>,
    pub h2: Tensor3<T>,
    pub a2: Tensor3<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    pub light_in: Vec<T>,
    pub light_pre1: Vec<T>,
    pub light_hid: Vec<T>,
    pub emb: Vec<T>,
    pub enc0: BlockCache<T>,
    pub enc1: BlockCache<T>,
    pub enc2: BlockCache<T>,
    pub dec1: BlockCache<T>,
    pub dec0: BlockCache<T>,
    pub out: Tensor3<T>,
}
