//! A small fully convolutional segmentation network.
//!
//! ```text
//! x ─ enc1 (3×3) ─ relu ─┬───────────────────────────────┐
//!                        └ enc2 (2×2, stride 2) ─ relu ─ enc3 (3×3) ─ relu ─ up×2 ─ + ─ head (1×1) ─ logits
//! ```
//!
//! Input height and width must be even because of the stride-2 stage.

use crate::adapter::{self, AdaptedLayer, Injection, LayerKind, OrthReduction, PlacementSpec};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::rng::{self, Stream};
use crate::synth::SegSample;
use crate::tensor::{ResizeMode, Tensor};

pub const LAYER_NAMES: [&str; 4] = ["enc1", "enc2", "enc3", "head"];

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub layers: Vec<AdaptedLayer>,
    pub store: ParamStore,
    pub width: usize,
    pub classes: usize,
}

fn layer_kind(name: &str) -> LayerKind {
    match name {
        "enc1" | "enc3" => LayerKind::Conv { size: 3, stride: 1, pad: 1 },
        "enc2" => LayerKind::Conv { size: 2, stride: 2, pad: 0 },
        _ => LayerKind::Conv { size: 1, stride: 1, pad: 0 },
    }
}

fn layer_shape(name: &str, width: usize, classes: usize) -> [usize; 4] {
    match name {
        "enc1" => [width, 3, 3, 3],
        "enc2" => [width, width, 2, 2],
        "enc3" => [width, width, 3, 3],
        _ => [classes, width, 1, 1],
    }
}

impl SegNet {
    /// He-normal weights and zero biases drawn from the `init` stream.
    pub fn new(width: usize, classes: usize, seed: u64) -> Result<Self> {
        if width == 0 || classes < 2 {
            return Err(Error::Config(format!(
                "network width {width} / classes {classes} invalid"
            )));
        }
        let mut r = rng::stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for name in LAYER_NAMES {
            let shape = layer_shape(name, width, classes);
            let fan_in = shape[1] * shape[2] * shape[3];
            let std = (2.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let w = Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng::normal(&mut r)).collect())?;
            let b = Tensor::zeros(&[shape[0]]);
            layers.push(AdaptedLayer::register(&mut store, name, layer_kind(name), w, Some(b))?);
        }
        Ok(SegNet {
            layers,
            store,
            width,
            classes,
        })
    }

    /// Rebuilds a network from named tensors (`<layer>.weight`, `.bias`,
    /// and optionally `.lora_a` / `.lora_b`).
    pub fn from_named(tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |n: &str| tensors.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone());
        let need = |n: &str| find(n).ok_or_else(|| Error::Config(format!("checkpoint lacks `{n}`")));
        let enc1 = need("enc1.weight")?;
        let head = need("head.weight")?;
        let width = enc1.shape()[0];
        let classes = head.shape()[0];
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut adapted = false;
        for name in LAYER_NAMES {
            let w = need(&format!("{name}.weight"))?;
            if w.shape() != layer_shape(name, width, classes) {
                return Err(Error::Dimension(format!(
                    "`{name}.weight` has shape {:?}, expected {:?}",
                    w.shape(),
                    layer_shape(name, width, classes)
                )));
            }
            let b = find(&format!("{name}.bias"));
            layers.push(AdaptedLayer::register(&mut store, name, layer_kind(name), w, b)?);
        }
        for layer in &mut layers {
            let a = find(&format!("{}.lora_a", layer.name));
            let b = find(&format!("{}.lora_b", layer.name));
            match (a, b) {
                (Some(a), Some(b)) => {
                    let (d, k) = layer.matrix_dims(&store);
                    let r = a.shape()[0];
                    if a.shape() != [r, k] || b.shape() != [d, r] {
                        return Err(Error::Dimension(format!(
                            "adapter of `{}` has shapes {:?}/{:?}",
                            layer.name,
                            a.shape(),
                            b.shape()
                        )));
                    }
                    let ia = store.add(crate::nn::Parameter::new(format!("{}.lora_a", layer.name), a, true));
                    let ib = store.add(crate::nn::Parameter::new(format!("{}.lora_b", layer.name), b, true));
                    layer.adapter = Some(adapter::AdapterSlot { a: ia, b: ib, rank: r });
                    adapted = true;
                }
                (None, None) => {}
                _ => return Err(Error::Config(format!("adapter of `{}` is incomplete", layer.name))),
            }
        }
        if adapted {
            let ids: Vec<_> = store.iter().map(|(i, p)| (i, p.name.contains(".lora_"))).collect();
            for (id, live) in ids {
                store.get_mut(id).trainable = live;
            }
        }
        Ok(SegNet {
            layers,
            store,
            width,
            classes,
        })
    }

    /// Named tensors in store order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, p)| {
                let mut t = p.value.clone();
                t.grad = None;
                (p.name.clone(), t)
            })
            .collect()
    }

    pub fn has_adapters(&self) -> bool {
        self.layers.iter().any(|l| l.adapter.is_some())
    }

    /// Parameter count of the plain (adapter-free) network.
    pub fn base_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.contains(".lora_"))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (c, h, w) = g.value(x).chw()?;
        if c != 3 {
            return Err(Error::Dimension(format!("network expects 3 channels, got {c}")));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("network input {h}×{w} must have even extents")));
        }
        let h1 = self.layers[0].forward(g, &self.store, x)?;
        let h1 = g.relu(h1);
        let h2 = self.layers[1].forward(g, &self.store, h1)?;
        let h2 = g.relu(h2);
        let h3 = self.layers[2].forward(g, &self.store, h2)?;
        let h3 = g.relu(h3);
        let up = g.resize(h3, h, w, ResizeMode::Nearest)?;
        let fused = g.add(h1, up)?;
        self.layers[3].forward(g, &self.store, fused)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::softmax_axis(&self.logits(x)?, 0)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        Ok(self.logits(x)?.argmax_channels()?.into_iter().map(|c| c as u8).collect())
    }

    pub fn inject(&mut self, placement: &PlacementSpec, rank: usize, sigma: f64, seed: u64) -> Result<Injection> {
        adapter::inject_adapters(&mut self.layers, &mut self.store, placement, rank, sigma, seed)
    }

    pub fn orth_loss(&self, g: &mut Graph, reduction: OrthReduction) -> Result<Var> {
        adapter::total_orth_loss(g, &self.layers, &self.store, reduction)
    }

    /// Folds every adapter into its base weight.
    pub fn merged(&self) -> Result<SegNet> {
        let (layers, store) = adapter::merge_layers(&self.layers, &self.store)?;
        Ok(SegNet {
            layers,
            store,
            width: self.width,
            classes: self.classes,
        })
    }
}

/// Mean over pixels of `−Σ_c target·log(probs + eps)`; `target` is constant.
pub fn soft_cross_entropy(g: &mut Graph, probs: Var, target: &Tensor, eps: f64) -> Result<Var> {
    let (_, h, w) = g.value(probs).chw()?;
    let shifted = g.add_scalar(probs, eps);
    let logp = g.log(shifted);
    let weighted = g.mul_const(logp, target)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / (h * w) as f64))
}

/// One-hot `K×H×W` encoding of a label map.
pub fn one_hot(ids: &[u8], k: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[k, h, w]);
    for (p, &c) in ids.iter().enumerate() {
        if c as usize >= k {
            return Err(Error::Data(format!("label {c} outside [0, {k})")));
        }
        t.data_mut()[c as usize * h * w + p] = 1.0;
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Supervised cross-entropy training on clean samples; returns the mean
/// loss of every epoch. Samples are visited in a seeded shuffled order.
pub fn pretrain(net: &mut SegNet, data: &[SegSample], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Usage("pretraining set is empty".into()));
    }
    let mut opt = Adam::new(&net.store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut r = rng::substream(cfg.seed, "pretrain-order", &[]);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut r);
        let mut total = 0.0;
        for &i in &order {
            let s = &data[i];
            let (_, h, w) = s.image.chw()?;
            let target = one_hot(&s.label.ids, net.classes, h, w)?;
            let mut g = Graph::new();
            let x = g.constant(s.image.clone());
            let logits = net.forward(&mut g, x)?;
            let probs = g.softmax(logits, 0)?;
            let loss = soft_cross_entropy(&mut g, probs, &target, 1e-12)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric { step: opt.steps_taken(), msg: "pretraining loss".into() });
            }
            total += lv;
            g.backward(loss)?;
            g.accumulate_into(&mut net.store);
            opt.step(&mut net.store)?;
        }
        curve.push(total / data.len() as f64);
    }
    Ok(curve)
}

/// mIoU of `net` over clean samples, evaluated in parallel.
pub fn evaluate_clean(net: &SegNet, data: &[SegSample], exec: Exec) -> Result<f64> {
    let mats = exec.try_map_range(data.len(), |i| {
        let mut cm = crate::metrics::ConfusionMatrix::new(net.classes);
        cm.update(&net.predict(&data[i].image)?, &data[i].label.ids)?;
        Ok::<_, Error>(cm)
    })?;
    let mut total = crate::metrics::ConfusionMatrix::new(net.classes);
    for m in &mats {
        total.merge(m)?;
    }
    total.miou()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_scene;

    #[test]
    fn forward_shapes_and_determinism() {
        let net = SegNet::new(6, 4, 1).unwrap();
        let x = gen_scene(0, 16, 20, 4).unwrap().image;
        let y = net.logits(&x).unwrap();
        assert_eq!(y.shape(), &[4, 16, 20]);
        assert_eq!(y, SegNet::new(6, 4, 1).unwrap().logits(&x).unwrap());
        let odd = Tensor::zeros(&[3, 17, 20]);
        assert!(matches!(net.logits(&odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn named_round_trip() {
        let mut net = SegNet::new(4, 3, 2).unwrap();
        net.inject(&PlacementSpec::new(["enc*"]), 2, 0.02, 0).unwrap();
        let back = SegNet::from_named(&net.named_tensors()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn lr_zero_pretraining_is_a_no_op() {
        let mut net = SegNet::new(4, 3, 3).unwrap();
        let before = net.clone();
        let data: Vec<_> = (0..2).map(|s| gen_scene(s, 16, 16, 3).unwrap()).collect();
        pretrain(&mut net, &data, &PretrainConfig { epochs: 1, lr: 0.0, seed: 0 }).unwrap();
        for ((_, a), (_, b)) in net.named_tensors().iter().zip(before.named_tensors().iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(matches!(
            pretrain(&mut net, &[], &PretrainConfig { epochs: 1, lr: 0.1, seed: 0 }),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn pretraining_reduces_loss() {
        let mut net = SegNet::new(6, 3, 4).unwrap();
        let data: Vec<_> = (0..4).map(|s| gen_scene(s, 16, 16, 3).unwrap()).collect();
        let curve = pretrain(&mut net, &data, &PretrainConfig { epochs: 6, lr: 1e-2, seed: 0 }).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
    }
}
