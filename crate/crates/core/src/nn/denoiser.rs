use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use super::NnError;
use crate::frame::{BevFrame, CHANNELS};
use crate::mask::MaskField;
use crate::sim::Action;

pub const WEIGHTS_MAGIC: &[u8; 6] = b"PIWMWT";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdmParams {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmParams {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            p_mean: -0.4,
            p_std: 1.2,
        }
    }
}

impl EdmParams {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.sigma_data > 0.0) || !(self.p_std >= 0.0) || !self.p_mean.is_finite() {
            return Err(NnError::Config(format!("invalid EDM parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioning {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_noise: f64,
}

pub fn edm_precondition(sigma: f64, sigma_data: f64) -> Result<Preconditioning, NnError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(NnError::Sigma(sigma));
    }
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Ok(Preconditioning {
        c_in: 1.0 / s2.sqrt(),
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_noise: sigma.ln() / 4.0,
    })
}

/// Sinusoidal features of `c_noise`: `dim/2` cosines then `dim/2` sines with
/// geometrically spaced frequencies from 1 to 100.
pub fn noise_embedding(c_noise: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let f = if half > 1 {
            100f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out[k] = (c_noise * f).cos();
        out[half + k] = (c_noise * f).sin();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub history_len: usize,
    pub base_width: usize,
    pub embed_dim: usize,
    pub groups: usize,
    pub mask_channels: usize,
    pub action_vocab: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            history_len: 4,
            base_width: 16,
            embed_dim: 64,
            groups: 4,
            mask_channels: 1,
            action_vocab: Action::COUNT,
        }
    }
}

impl DenoiserConfig {
    pub fn in_channels(&self) -> usize {
        CHANNELS * (self.history_len + 1) + self.mask_channels
    }

    pub fn widths(&self) -> (usize, usize) {
        (self.base_width, 2 * self.base_width)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let (w0, _) = self.widths();
        if self.history_len == 0 {
            return Err(NnError::Config("history_len must be at least 1".into()));
        }
        if self.mask_channels > 1 {
            return Err(NnError::Config("at most one mask channel".into()));
        }
        if self.groups == 0 || w0 == 0 || w0 % self.groups != 0 {
            return Err(NnError::Config(format!(
                "base_width {w0} must be a positive multiple of groups {}",
                self.groups
            )));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(NnError::Config("embed_dim must be even and at least 2".into()));
        }
        if self.action_vocab == 0 {
            return Err(NnError::Config("action_vocab must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (w0, w1) = self.widths();
        let e = self.embed_dim;
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        let conv = |v: &mut Vec<_>, name: &str, cout: usize, cin: usize| {
            v.push((format!("{name}.w"), vec![cout, cin, 3, 3]));
            v.push((format!("{name}.b"), vec![cout]));
        };
        let norm = |v: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize| {
            v.push((format!("{name}.gn.g"), vec![c]));
            v.push((format!("{name}.gn.b"), vec![c]));
            v.push((format!("{name}.film.w"), vec![2 * c, e]));
            v.push((format!("{name}.film.b"), vec![2 * c]));
        };
        v.push(("emb.action".into(), vec![self.history_len * self.action_vocab, e]));
        v.push(("emb.proj.w".into(), vec![e, e]));
        v.push(("emb.proj.b".into(), vec![e]));
        conv(&mut v, "stem", w0, self.in_channels());
        norm(&mut v, "res0", w0);
        conv(&mut v, "res0.conv", w0, w0);
        conv(&mut v, "down", w1, w0);
        norm(&mut v, "res1", w1);
        conv(&mut v, "res1.conv", w1, w1);
        conv(&mut v, "up", w0, w1);
        conv(&mut v, "merge", w0, 2 * w0);
        norm(&mut v, "out", w0);
        conv(&mut v, "out.conv", CHANNELS, w0);
        v
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// One batch of conditioning and noisy inputs.
#[derive(Debug, Clone)]
pub struct DenoiserInput<T> {
    /// `(B, 3, H, W)`.
    pub x_noisy: Tensor<T>,
    /// `(B, 3L, H, W)`, oldest frame first.
    pub context: Tensor<T>,
    /// `(B, 1, H, W)` when the model has a mask channel.
    pub mask: Option<Tensor<T>>,
    /// `B * L` action codes, oldest first.
    pub actions: Vec<usize>,
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub sigma_data: f64,
    pub params: Vec<(String, Tensor<f32>)>,
}

struct P {
    emb_action: Var,
    emb_w: Var,
    emb_b: Var,
    rest: Vec<Var>,
}

impl Denoiser {
    /// Deterministic initialisation from `seed`. Modulation projections and the
    /// output convolution start at zero.
    pub fn new(config: DenoiserConfig, sigma_data: f64, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        if !(sigma_data > 0.0) {
            return Err(NnError::Config("sigma_data must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".gn.g") {
                vec![1.0; n]
            } else if name.ends_with(".b") || name.starts_with("out.conv") || name.contains(".film.") {
                vec![0.0; n]
            } else if name == "emb.action" {
                (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (3.0 / fan_in as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self {
            config,
            sigma_data,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Pushes every parameter into `g`, trainable or constant.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| {
                let t = t.cast::<T>();
                if trainable {
                    g.param(t)
                } else {
                    g.input(t)
                }
            })
            .collect()
    }

    /// Records the preconditioned forward pass and returns the `x̂⁰` node.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        input: &DenoiserInput<T>,
    ) -> Result<Var, NnError> {
        let cfg = &self.config;
        let (b, c, h, w) = input.x_noisy.dims4();
        if c != CHANNELS {
            return Err(NnError::Shape(format!("x_noisy has {c} channels")));
        }
        let l = cfg.history_len;
        if input.context.shape != [b, CHANNELS * l, h, w] {
            return Err(NnError::Shape(format!(
                "context shape {:?}, expected {:?}",
                input.context.shape,
                [b, CHANNELS * l, h, w]
            )));
        }
        match (&input.mask, cfg.mask_channels) {
            (None, 1) => return Err(NnError::MissingMask),
            (Some(_), 0) => return Err(NnError::UnexpectedMask),
            (Some(m), _) if m.shape != [b, 1, h, w] => {
                return Err(NnError::Shape(format!("mask shape {:?}", m.shape)));
            }
            _ => {}
        }
        if input.sigmas.len() != b || input.actions.len() != b * l {
            return Err(NnError::Shape("sigmas/actions do not match batch".into()));
        }
        if input.actions.iter().any(|a| *a >= cfg.action_vocab) {
            return Err(NnError::Shape("action code out of range".into()));
        }
        if params.len() != self.params.len() {
            return Err(NnError::Shape("parameter binding mismatch".into()));
        }

        let pre: Vec<Preconditioning> = input
            .sigmas
            .iter()
            .map(|s| edm_precondition(*s, self.sigma_data))
            .collect::<Result<_, _>>()?;

        // Network input: c_in * x | context | mask.
        let cin = cfg.in_channels();
        let hw = h * w;
        let mut xin = Tensor::<T>::zeros(&[b, cin, h, w]);
        for bi in 0..b {
            let dst = &mut xin.data[bi * cin * hw..(bi + 1) * cin * hw];
            let ci = T::of(pre[bi].c_in);
            for (d, s) in dst[..CHANNELS * hw]
                .iter_mut()
                .zip(&input.x_noisy.data[bi * CHANNELS * hw..(bi + 1) * CHANNELS * hw])
            {
                *d = *s * ci;
            }
            let ctx = CHANNELS * l * hw;
            dst[CHANNELS * hw..CHANNELS * hw + ctx]
                .copy_from_slice(&input.context.data[bi * ctx..(bi + 1) * ctx]);
            if let Some(m) = &input.mask {
                dst[CHANNELS * hw + ctx..].copy_from_slice(&m.data[bi * hw..(bi + 1) * hw]);
            }
        }

        let e = cfg.embed_dim;
        let mut emb = Tensor::<T>::zeros(&[b, e]);
        for bi in 0..b {
            for (k, v) in noise_embedding(pre[bi].c_noise, e).into_iter().enumerate() {
                emb.data[bi * e + k] = T::of(v);
            }
        }
        let idx: Vec<usize> = (0..b * l)
            .map(|j| (j % l) * cfg.action_vocab + input.actions[j])
            .collect();

        let p = P {
            emb_action: params[0],
            emb_w: params[1],
            emb_b: params[2],
            rest: params[3..].to_vec(),
        };
        let mut it = p.rest.iter().copied();
        let mut next = || it.next().expect("layout length checked");

        let act = g.embed_sum(p.emb_action, idx, l)?;
        let cond = g.add_const(act, &emb)?;
        let cond = g.linear(cond, p.emb_w, p.emb_b)?;
        let cond = g.silu(cond);

        let groups = cfg.groups;
        let modulate = |g: &mut Graph<T>, x: Var, next: &mut dyn FnMut() -> Var| -> Result<Var, NnError> {
            let (gg, gb, fw, fb) = (next(), next(), next(), next());
            let y = g.group_norm(x, gg, gb, groups)?;
            let ss = g.linear(cond, fw, fb)?;
            let y = g.film(y, ss)?;
            Ok(g.silu(y))
        };

        let x = g.input(xin);
        let (sw, sb) = (next(), next());
        let h0 = g.conv3x3(x, sw, sb)?;
        let r = modulate(g, h0, &mut next)?;
        let (cw, cb) = (next(), next());
        let r = g.conv3x3(r, cw, cb)?;
        let h0 = g.add(h0, r)?;

        let p1 = g.avgpool2(h0)?;
        let (dw, db) = (next(), next());
        let h1 = g.conv3x3(p1, dw, db)?;
        let r = modulate(g, h1, &mut next)?;
        let (cw, cb) = (next(), next());
        let r = g.conv3x3(r, cw, cb)?;
        let h1 = g.add(h1, r)?;
        let (uw, ub) = (next(), next());
        let u = g.conv3x3(h1, uw, ub)?;
        let u = g.upsample2(u);

        let cat = g.concat(u, h0)?;
        let (mw, mb) = (next(), next());
        let d = g.conv3x3(cat, mw, mb)?;
        let d = modulate(g, d, &mut next)?;
        let (ow, ob) = (next(), next());
        let f = g.conv3x3(d, ow, ob)?;

        let c_out: Vec<T> = pre.iter().map(|p| T::of(p.c_out)).collect();
        let f = g.scale_sample(f, c_out)?;
        let mut skip = input.x_noisy.clone();
        for (i, v) in skip.data.iter_mut().enumerate() {
            *v *= T::of(pre[i / (CHANNELS * hw)].c_skip);
        }
        g.add_const(f, &skip)
    }

    /// Single-sample `x̂⁰` in inference mode.
    pub fn denoise(
        &self,
        x_noisy: &BevFrame,
        sigma: f64,
        context: &[BevFrame],
        actions: &[Action],
        mask: Option<&MaskField>,
    ) -> Result<BevFrame, NnError> {
        let l = self.config.history_len;
        if context.len() != l || actions.len() != l {
            return Err(NnError::Shape(format!(
                "expected {l} context frames and actions, got {} and {}",
                context.len(),
                actions.len()
            )));
        }
        let (h, w) = (x_noisy.h, x_noisy.w);
        let mut ctx = Vec::with_capacity(CHANNELS * l * h * w);
        for f in context {
            if (f.h, f.w) != (h, w) {
                return Err(NnError::Shape(format!("context frame {}x{} vs {h}x{w}", f.h, f.w)));
            }
            ctx.extend_from_slice(&f.data);
        }
        let mask = match mask {
            Some(m) if (m.h, m.w) != (h, w) => {
                return Err(NnError::Shape(format!("mask {}x{} vs frame {h}x{w}", m.h, m.w)))
            }
            Some(m) => Some(Tensor::from_vec(&[1, 1, h, w], m.values.clone())?),
            None => None,
        };
        let input = DenoiserInput {
            x_noisy: Tensor::from_vec(&[1, CHANNELS, h, w], x_noisy.data.clone())?,
            context: Tensor::from_vec(&[1, CHANNELS * l, h, w], ctx)?,
            mask,
            actions: actions.iter().map(|a| a.index()).collect(),
            sigmas: vec![sigma],
        };
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let out = self.forward(&mut g, &params, &input)?;
        let data = g.into_value(out).data;
        Ok(BevFrame { h, w, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for v in [c.history_len, c.base_width, c.embed_dim, c.groups] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(c.mask_channels as u8);
        out.extend_from_slice(&(c.action_vocab as u32).to_le_bytes());
        out.extend_from_slice(&(self.sigma_data as f32).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != WEIGHTS_MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let config = DenoiserConfig {
            history_len: r.u32()? as usize,
            base_width: r.u32()? as usize,
            embed_dim: r.u32()? as usize,
            groups: r.u32()? as usize,
            mask_channels: r.take(1)?[0] as usize,
            action_vocab: r.u32()? as usize,
        };
        let sigma_data = f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64;
        config
            .validate()
            .map_err(|e| NnError::Format(format!("embedded config: {e}")))?;
        let layout = config.layout();
        let count = r.u32()? as usize;
        if count != layout.len() {
            return Err(NnError::Format(format!(
                "{count} tensors, layout needs {}",
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for (want_name, want_shape) in layout {
            let n = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| NnError::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if name != want_name || shape != want_shape {
                return Err(NnError::Format(format!(
                    "tensor {name} {shape:?}, expected {want_name} {want_shape:?}"
                )));
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(NnError::Format("trailing bytes".into()));
        }
        Ok(Self {
            config,
            sigma_data,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Loads weights and checks them against the caller's expected config.
    pub fn load_expecting(path: &Path, expected: &DenoiserConfig) -> Result<Self, NnError> {
        let m = Self::load(path)?;
        if &m.config != expected {
            return Err(NnError::ConfigMismatch(format!(
                "file has {:?}, expected {:?}",
                m.config, expected
            )));
        }
        Ok(m)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
