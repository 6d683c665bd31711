//! Encoder–decoder 3D denoiser used as noise estimator, pattern estimator and
//! the tissue projection branch.
//!
//! Layout, for widths `[w0, w1, ..]`:
//!
//! ```text
//! stem: conv(in -> w0) at full resolution
//! block i: avg-pool 2x -> conv(w_{i-1} -> w_i) -> residual units (FiLM on t)
//! [bottleneck self-attention]
//! up i (deepest first): silu -> conv(w_i -> w_{i-1}) -> nearest 2x -> + skip
//! head: silu -> conv(w0 -> out), zero-initialized
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool, avg_pool_backward, pool_factors, silu, silu_backward, upsample, upsample_backward,
    Attention, AttentionCache, Conv, Film,
};
use super::params::ParamLayout;
use super::tensor::Tensor;
use super::{time_embed, Network};
use crate::error::{Error, Result};

const K3: [usize; 3] = [3, 3, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserArch {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width per encoder block; each block halves the resolution.
    pub widths: Vec<usize>,
    pub res_units: usize,
    pub attention: bool,
    /// Sinusoidal embedding width; 0 disables time conditioning.
    pub time_embed_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            widths: vec![8, 16, 32],
            res_units: 1,
            attention: false,
            time_embed_dim: 16,
        }
    }
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("denoiser needs at least one input and output channel".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid denoiser widths {:?}", self.widths)));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResUnit {
    conv_a: Conv,
    film: Option<Film>,
    conv_b: Conv,
}

#[derive(Debug, Clone)]
struct Block {
    down: Conv,
    units: Vec<ResUnit>,
}

#[derive(Debug, Clone)]
pub struct DenoiserNet {
    arch: DenoiserArch,
    layout: ParamLayout,
    params: Vec<f64>,
    stem: Conv,
    blocks: Vec<Block>,
    attn: Option<Attention>,
    ups: Vec<Conv>,
    head: Conv,
}

struct UnitCache {
    x: Tensor,
    a_in: Tensor,
    a_out: Tensor,
    coef: Vec<f64>,
    f_out: Tensor,
    b_in: Tensor,
}

struct LevelCache {
    factors: [usize; 3],
    pooled: Tensor,
    units: Vec<UnitCache>,
}

struct UpCache {
    dec_in: Tensor,
    s: Tensor,
    u_dims: [usize; 3],
}

pub struct DenoiserCache {
    input: Tensor,
    temb: Vec<f64>,
    stem_out: Tensor,
    levels: Vec<LevelCache>,
    attn: Option<(Tensor, AttentionCache)>,
    ups: Vec<UpCache>,
    head_in: Tensor,
    head_s: Tensor,
}

impl DenoiserNet {
    /// Seeded initialization; the head is zeroed so the initial output is 0.
    pub fn new(arch: &DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut layout = ParamLayout::default();
        let w0 = arch.widths[0];
        let stem = Conv::new(&mut layout, "stem", arch.in_channels, w0, K3);
        let mut blocks = Vec::new();
        let mut prev = w0;
        for (i, &w) in arch.widths.iter().enumerate() {
            let down = Conv::new(&mut layout, &format!("block{i}.down"), prev, w, K3);
            let units = (0..arch.res_units)
                .map(|u| {
                    let name = format!("block{i}.unit{u}");
                    ResUnit {
                        conv_a: Conv::new(&mut layout, &format!("{name}.conv_a"), w, w, K3),
                        film: (arch.time_embed_dim > 0).then(|| {
                            Film::new(&mut layout, &format!("{name}.film"), arch.time_embed_dim, w)
                        }),
                        conv_b: Conv::new(&mut layout, &format!("{name}.conv_b"), w, w, K3),
                    }
                })
                .collect();
            blocks.push(Block { down, units });
            prev = w;
        }
        let attn = arch
            .attention
            .then(|| Attention::new(&mut layout, "attn", *arch.widths.last().unwrap()));
        let ups = arch
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let to = if i == 0 { w0 } else { arch.widths[i - 1] };
                Conv::new(&mut layout, &format!("up{i}"), w, to, K3)
            })
            .collect();
        let head = Conv::new(&mut layout, "head", w0, arch.out_channels, K3);

        let mut net = Self {
            arch: arch.clone(),
            params: vec![0.0; layout.len()],
            layout,
            stem,
            blocks,
            attn,
            ups,
            head,
        };
        net.reinitialize(seed);
        Ok(net)
    }

    fn reinitialize(&mut self, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = &mut self.params;
        self.stem.init(p, &mut rng, 1.0);
        for b in &self.blocks {
            b.down.init(p, &mut rng, 1.0);
            for u in &b.units {
                u.conv_a.init(p, &mut rng, 1.0);
                if let Some(f) = &u.film {
                    f.proj.init(p, &mut rng, 0.0);
                }
                u.conv_b.init(p, &mut rng, 0.5);
            }
        }
        if let Some(a) = &self.attn {
            a.init(p, &mut rng);
        }
        for u in &self.ups {
            u.init(p, &mut rng, 1.0);
        }
        self.head.zero(p);
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    fn unit_forward(&self, unit: &ResUnit, x: Tensor, temb: &[f64]) -> (Tensor, UnitCache) {
        let p = &self.params;
        let a_in = silu(&x);
        let a_out = unit.conv_a.forward(p, &a_in);
        let (coef, f_out) = match &unit.film {
            Some(f) => {
                let coef = f.coefficients(p, temb);
                let out = f.forward(&coef, &a_out);
                (coef, out)
            }
            None => (Vec::new(), a_out.clone()),
        };
        let b_in = silu(&f_out);
        let mut y = unit.conv_b.forward(p, &b_in);
        y.add_assign(&x);
        (
            y,
            UnitCache {
                x,
                a_in,
                a_out,
                coef,
                f_out,
                b_in,
            },
        )
    }

    fn unit_backward(&self, unit: &ResUnit, c: &UnitCache, temb: &[f64], gy: Tensor, g: &mut [f64]) -> Tensor {
        let p = &self.params;
        let g_b_in = unit.conv_b.backward(p, &c.b_in, &gy, g, true).unwrap();
        let g_f = silu_backward(&c.f_out, &g_b_in);
        let g_a = match &unit.film {
            Some(f) => f.backward(&c.coef, temb, &c.a_out, &g_f, g),
            None => g_f,
        };
        let g_a_in = unit.conv_a.backward(p, &c.a_in, &g_a, g, true).unwrap();
        let mut gx = silu_backward(&c.x, &g_a_in);
        gx.add_assign(&gy);
        gx
    }
}

impl Network for DenoiserNet {
    type Cache = DenoiserCache;

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn in_channels(&self) -> usize {
        self.arch.in_channels
    }

    fn forward_cached(&self, x: &Tensor, t: f64) -> Result<(Tensor, DenoiserCache)> {
        if x.c != self.arch.in_channels {
            return Err(Error::DimMismatch(format!(
                "denoiser expects {} input channels, got {}",
                self.arch.in_channels, x.c
            )));
        }
        if x.voxels() == 0 {
            return Err(Error::DimMismatch("empty input volume".into()));
        }
        let p = &self.params;
        let temb = if self.arch.time_embed_dim > 0 {
            time_embed(t, self.arch.time_embed_dim)?
        } else {
            Vec::new()
        };
        let stem_out = self.stem.forward(p, x);
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut enc: Vec<Tensor> = Vec::with_capacity(self.blocks.len());
        let mut h = stem_out.clone();
        for block in &self.blocks {
            let factors = pool_factors(h.dims, [true; 3]);
            let pooled = avg_pool(&h, factors);
            let mut d = block.down.forward(p, &pooled);
            let mut units = Vec::with_capacity(block.units.len());
            for unit in &block.units {
                let (y, c) = self.unit_forward(unit, d, &temb);
                units.push(c);
                d = y;
            }
            levels.push(LevelCache {
                factors,
                pooled,
                units,
            });
            enc.push(d.clone());
            h = d;
        }
        let (mut dec, attn) = match &self.attn {
            Some(a) => {
                let (y, c) = a.forward(p, &h);
                (y, Some((h, c)))
            }
            None => (h, None),
        };
        let mut ups = Vec::with_capacity(self.ups.len());
        for i in (0..self.blocks.len()).rev() {
            let s = silu(&dec);
            let u = self.ups[i].forward(p, &s);
            let skip = if i == 0 { &stem_out } else { &enc[i - 1] };
            let mut next = upsample(&u, levels[i].factors, skip.dims);
            next.add_assign(skip);
            ups.push(UpCache {
                dec_in: dec,
                s,
                u_dims: u.dims,
            });
            dec = next;
        }
        ups.reverse();
        let head_s = silu(&dec);
        let out = self.head.forward(p, &head_s);
        Ok((
            out,
            DenoiserCache {
                input: x.clone(),
                temb,
                stem_out,
                levels,
                attn,
                ups,
                head_in: dec,
                head_s,
            },
        ))
    }

    fn backward(&self, c: &DenoiserCache, gy: &Tensor, g: &mut [f64], need_input: bool) -> Option<Tensor> {
        let p = &self.params;
        let n_blocks = self.blocks.len();
        let g_head_s = self.head.backward(p, &c.head_s, gy, g, true).unwrap();
        let mut g_dec = silu_backward(&c.head_in, &g_head_s);

        let mut g_enc: Vec<Option<Tensor>> = (0..n_blocks).map(|_| None).collect();
        let mut g_stem: Option<Tensor> = None;
        let accumulate = |slot: &mut Option<Tensor>, v: &Tensor| match slot {
            Some(t) => t.add_assign(v),
            None => *slot = Some(v.clone()),
        };
        for i in 0..n_blocks {
            if i == 0 {
                accumulate(&mut g_stem, &g_dec);
            } else {
                accumulate(&mut g_enc[i - 1], &g_dec);
            }
            let uc = &c.ups[i];
            let g_u = upsample_backward(uc.u_dims, c.levels[i].factors, &g_dec);
            let g_s = self.ups[i].backward(p, &uc.s, &g_u, g, true).unwrap();
            g_dec = silu_backward(&uc.dec_in, &g_s);
        }
        let g_top = match (&self.attn, &c.attn) {
            (Some(a), Some((x, ac))) => a.backward(p, x, ac, &g_dec, g),
            _ => g_dec,
        };
        accumulate(&mut g_enc[n_blocks - 1], &g_top);

        for i in (0..n_blocks).rev() {
            let block = &self.blocks[i];
            let lc = &c.levels[i];
            let mut gd = g_enc[i].take().expect("every encoder level receives gradient");
            for (unit, uc) in block.units.iter().zip(&lc.units).rev() {
                gd = self.unit_backward(unit, uc, &c.temb, gd, g);
            }
            let g_pooled = block.down.backward(p, &lc.pooled, &gd, g, true).unwrap();
            let in_dims = if i == 0 {
                c.stem_out.dims
            } else {
                c.levels[i - 1].pooled.dims
            };
            let g_in = avg_pool_backward(in_dims, lc.factors, &g_pooled);
            if i == 0 {
                accumulate(&mut g_stem, &g_in);
            } else {
                accumulate(&mut g_enc[i - 1], &g_in);
            }
        }
        let g_stem = g_stem.expect("stem receives gradient");
        self.stem.backward(p, &c.input, &g_stem, g, need_input)
    }
}
