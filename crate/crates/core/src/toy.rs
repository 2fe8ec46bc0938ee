//! Angle versus magnitude reconstruction with a small convolutional
//! autoencoder.
//!
//! The network is trained with ordinary inner-product convolutions. At test
//! time every convolution can be swapped for one of two factors of the inner
//! product `w·p = ‖w‖‖p‖·cos θ`: the magnitude `‖w‖‖p‖` or the angle `cos θ`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{Adam, AdamConfig, ParamId, Parameter, ParamStore};
use crate::rng::{self, Stream};
use crate::tensor::{gemm, im2col, ConvGeom, ResizeMode, Tensor};

pub const ANGLE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Inner,
    Magnitude,
    Angle,
}

impl ActMode {
    pub const ALL: [ActMode; 3] = [ActMode::Inner, ActMode::Magnitude, ActMode::Angle];

    pub fn as_str(self) -> &'static str {
        match self {
            ActMode::Inner => "inner",
            ActMode::Magnitude => "magnitude",
            ActMode::Angle => "angle",
        }
    }
}

impl fmt::Display for ActMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(ActMode::Inner),
            "magnitude" => Ok(ActMode::Magnitude),
            "angle" => Ok(ActMode::Angle),
            _ => Err(Error::Usage(format!("unknown activation mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub widths: [usize; 3],
    pub kernel: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            widths: [16, 32, 64],
            kernel: 3,
            epochs: 200,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Three stride-2 convolutions down, three nearest-upsample + convolution
/// stages up. No biases, so every layer is a pure inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAutoencoder {
    pub store: ParamStore,
    pub kernel: usize,
    layers: Vec<ParamId>,
}

impl ToyAutoencoder {
    pub fn new(widths: [usize; 3], kernel: usize, seed: u64) -> Result<Self> {
        if widths.contains(&0) || kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "toy widths {widths:?} must be positive and kernel {kernel} odd"
            )));
        }
        let chans = [3, widths[0], widths[1], widths[2], widths[1], widths[0], 3];
        let mut r = rng::stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for i in 0..6 {
            let (cin, cout) = (chans[i], chans[i + 1]);
            let fan_in = cin * kernel * kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..cout * fan_in).map(|_| std * rng::normal(&mut r)).collect();
            let w = Tensor::new(vec![cout, cin, kernel, kernel], data)?;
            let name = if i < 3 { format!("enc{}", i + 1) } else { format!("dec{}", i - 2) };
            layers.push(store.add(Parameter::new(name, w, true)));
        }
        Ok(ToyAutoencoder { store, kernel, layers })
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = x.chw()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "toy autoencoder needs 3×H×W with H, W multiples of 8, got {:?}",
                x.shape()
            )));
        }
        Ok((h, w))
    }

    /// Differentiable inner-product forward.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pad = self.kernel / 2;
        let mut h = x;
        for (i, &id) in self.layers.iter().enumerate() {
            let w = g.param(&self.store, id);
            if i >= 3 {
                let s = g.shape(h).to_vec();
                h = g.resize(h, s[1] * 2, s[2] * 2, ResizeMode::Nearest)?;
            }
            let stride = if i < 3 { 2 } else { 1 };
            h = g.conv2d(h, w, stride, pad)?;
            if i < 5 {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass with every convolution evaluated in `mode`.
    pub fn reconstruct(&self, x: &Tensor, mode: ActMode) -> Result<Tensor> {
        self.check_input(x)?;
        let pad = self.kernel / 2;
        let mut h = x.clone();
        for (i, &id) in self.layers.iter().enumerate() {
            if i >= 3 {
                let (_, hh, ww) = h.chw()?;
                h = crate::tensor::resize(&h, hh * 2, ww * 2, ResizeMode::Nearest)?;
            }
            let stride = if i < 3 { 2 } else { 1 };
            h = conv_mode(&h, &self.store.get(id).value, stride, pad, mode)?;
            if i < 5 {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }
}

/// Convolution where each output is `w·p`, `‖w‖‖p‖` or `w·p/max(‖w‖‖p‖, ε)`
/// for kernel `w` and receptive-field patch `p`.
pub fn conv_mode(x: &Tensor, kernels: &Tensor, stride: usize, pad: usize, mode: ActMode) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (o, kc, k) = crate::tensor::kernel_dims(kernels)?;
    if kc != c {
        return Err(Error::Dimension(format!("kernel expects {kc} channels, input has {c}")));
    }
    let geom = ConvGeom::new(c, h, w, k, stride, pad)?;
    let cols = im2col(x.data(), &geom);
    let (p, l) = (geom.patch_len(), geom.out_len());
    let mut out = vec![0.0; o * l];
    gemm(o, p, l, kernels.data(), false, &cols, false, &mut out, false);
    if mode != ActMode::Inner {
        let wn: Vec<f64> = kernels.data().chunks_exact(p).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut pn = vec![0.0; l];
        for row in cols.chunks_exact(l) {
            pn.iter_mut().zip(row).for_each(|(a, v)| *a += v * v);
        }
        pn.iter_mut().for_each(|v| *v = v.sqrt());
        for (oc, row) in out.chunks_exact_mut(l).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mag = wn[oc] * pn[j];
                *v = match mode {
                    ActMode::Magnitude => mag,
                    _ => *v / mag.max(ANGLE_EPS),
                };
            }
        }
    }
    Tensor::new(vec![o, geom.out_h, geom.out_w], out)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Trains by per-image Adam steps on the MSE reconstruction loss; returns
/// the mean loss of every epoch.
pub fn train_autoencoder(data: &[Tensor], cfg: &ToyConfig) -> Result<(ToyAutoencoder, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Usage("toy training set is empty".into()));
    }
    let mut model = ToyAutoencoder::new(cfg.widths, cfg.kernel, cfg.seed)?;
    for x in data {
        model.check_input(x)?;
    }
    let mut opt = Adam::new(&model.store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for x in data {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = model.forward(&mut g, xv)?;
            let diff = g.sub(y, xv)?;
            let sq = g.square(diff);
            let loss = g.mean(sq);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric { step: opt.steps_taken(), msg: "toy reconstruction loss".into() });
            }
            total += lv;
            g.backward(loss)?;
            g.accumulate_into(&mut model.store);
            opt.step(&mut model.store)?;
        }
        curve.push(total / data.len() as f64);
    }
    Ok((model, curve))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeErrors {
    pub inner: f64,
    pub magnitude: f64,
    pub angle: f64,
}

impl ModeErrors {
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\nmse_inner,{:.9}\nmse_magnitude,{:.9}\nmse_angle,{:.9}\n",
            self.inner, self.magnitude, self.angle
        )
    }
}

/// Mean reconstruction MSE per mode over `heldout`; images are processed in
/// parallel.
pub fn compare_modes(model: &ToyAutoencoder, heldout: &[Tensor], exec: Exec) -> Result<ModeErrors> {
    if heldout.is_empty() {
        return Err(Error::Usage("held-out set is empty".into()));
    }
    let per = exec.try_map_range(heldout.len(), |i| {
        let x = &heldout[i];
        let mut e = [0.0; 3];
        for (slot, mode) in e.iter_mut().zip(ActMode::ALL) {
            *slot = mse(&model.reconstruct(x, mode)?, x);
        }
        Ok::<_, Error>(e)
    })?;
    let n = per.len() as f64;
    let sum = |j: usize| per.iter().map(|e| e[j]).sum::<f64>() / n;
    Ok(ModeErrors { inner: sum(0), magnitude: sum(1), angle: sum(2) })
}

/// Input, magnitude and angle reconstructions side by side, clamped to
/// `[0,1]`.
pub fn triptych(model: &ToyAutoencoder, x: &Tensor) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    let panels = [x.clone(), model.reconstruct(x, ActMode::Magnitude)?, model.reconstruct(x, ActMode::Angle)?];
    let tw = 3 * w;
    let mut out = vec![0.0; 3 * h * tw];
    for (pi, panel) in panels.iter().enumerate() {
        let d = panel.data();
        for c in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    out[(c * h + y) * tw + pi * w + xx] = d[(c * h + y) * w + xx].clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(vec![3, h, tw], out)
}

pub fn save_triptych(path: &Path, model: &ToyAutoencoder, x: &Tensor) -> Result<()> {
    crate::pnm::write_ppm(path, &triptych(model, x)?)
}
