//! Low-rank adapters on frozen weights, the soft orthogonality penalty on
//! their product, injection by layer-name pattern and lossless merging.
//!
//! A weight `W₀ ∈ ℝ^{d×k}` gains a trainable pair `B ∈ ℝ^{d×r}`,
//! `A ∈ ℝ^{r×k}` and the layer computes `W₀x + B(Ax)`. `A` starts Gaussian
//! and `B` starts at zero, so a fresh adapter is an exact no-op.
//! Convolution kernels `F×C×k×k` are treated as `F × (C·k·k)` matrices.

use glob::Pattern;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Parameter};
use crate::rng::{self, StreamRng};
use crate::tensor::{self, Tensor};

/// Standalone adapter factors, as produced by [`adapter_init`].
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    /// `r×k`
    pub a: Tensor,
    /// `d×r`
    pub b: Tensor,
}

impl LowRankAdapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `ΔW = BA` as a `d×k` matrix.
    pub fn delta(&self) -> Tensor {
        tensor::matmul(&self.b, &self.a).expect("adapter factors are conformable")
    }
}

/// Draws `A ~ N(0, σ²)` from `rng` and sets `B = 0`.
pub fn adapter_init(d: usize, k: usize, r: usize, sigma: f64, rng: &mut StreamRng) -> Result<LowRankAdapter> {
    if r == 0 || r > d.min(k) {
        return Err(Error::Config(format!(
            "adapter rank {r} outside 1..={} for a {d}×{k} weight",
            d.min(k)
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("adapter init sigma must be > 0, got {sigma}")));
    }
    let a = (0..r * k).map(|_| sigma * rng::normal(rng)).collect();
    Ok(LowRankAdapter {
        a: Tensor::new(vec![r, k], a)?,
        b: Tensor::zeros(&[d, r]),
    })
}

/// How the entries of `(BA)ᵀ(BA) − I` are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrthReduction {
    /// Mean of squared entries.
    #[default]
    Mean,
    /// Sum of squared entries.
    Sum,
    /// Frobenius norm (square root of the sum).
    Norm,
}

/// Orthogonality penalty of one adapter given its factor nodes.
pub fn orth_loss_var(g: &mut Graph, a: Var, b: Var, reduction: OrthReduction) -> Result<Var> {
    let delta = g.matmul(b, a)?;
    let delta_t = g.transpose(delta)?;
    let gram = g.matmul(delta_t, delta)?;
    let k = g.shape(gram)[0];
    let eye = g.constant(Tensor::eye(k));
    let diff = g.sub(gram, eye)?;
    let sq = g.square(diff);
    Ok(match reduction {
        OrthReduction::Mean => g.mean(sq),
        OrthReduction::Sum => g.sum(sq),
        OrthReduction::Norm => {
            let s = g.sum(sq);
            g.sqrt(s)
        }
    })
}

/// Mean-squared orthogonality penalty of a standalone adapter.
pub fn orth_loss(adapter: &LowRankAdapter) -> Result<f64> {
    let mut g = Graph::no_grad();
    let a = g.constant(adapter.a.clone());
    let b = g.constant(adapter.b.clone());
    let l = orth_loss_var(&mut g, a, b, OrthReduction::Mean)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterSlot {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// `x` is `k×n` (columns are inputs), output `d×n`.
    Linear,
    /// `x` is `C×H×W`, kernels `F×C×size×size`.
    Conv { size: usize, stride: usize, pad: usize },
}

/// A frozen weight (plus optional frozen bias) that may carry an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<AdapterSlot>,
}

impl AdaptedLayer {
    /// Registers a new layer's weight (and bias) in `store`.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        kind: LayerKind,
        weight: Tensor,
        bias: Option<Tensor>,
    ) -> Result<Self> {
        match (kind, weight.shape()) {
            (LayerKind::Linear, [_, _]) => {}
            (LayerKind::Conv { size, .. }, [_, _, kh, kw]) if *kh == size && *kw == size => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "weight {:?} does not fit layer kind {kind:?}",
                    weight.shape()
                )))
            }
        }
        if let Some(b) = &bias {
            if b.len() != weight.shape()[0] {
                return Err(Error::Dimension(format!("bias length {} for layer `{name}`", b.len())));
            }
        }
        let weight = store.add(Parameter::new(format!("{name}.weight"), weight, true));
        let bias = bias.map(|b| store.add(Parameter::new(format!("{name}.bias"), b, true)));
        Ok(AdaptedLayer {
            name: name.to_string(),
            kind,
            weight,
            bias,
            adapter: None,
        })
    }

    /// `(d, k)` of the weight viewed as a matrix.
    pub fn matrix_dims(&self, store: &ParamStore) -> (usize, usize) {
        let s = store.get(self.weight).value.shape();
        (s[0], s[1..].iter().product())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let (d, k) = self.matrix_dims(store);
        let mut y = match self.kind {
            LayerKind::Linear => {
                if g.shape(x)[0] != k {
                    return Err(Error::Dimension(format!(
                        "layer `{}` expects {k} inputs, got {:?}",
                        self.name,
                        g.shape(x)
                    )));
                }
                let base = g.matmul(w, x)?;
                match self.adapter {
                    Some(s) => {
                        let a = g.param(store, s.a);
                        let b = g.param(store, s.b);
                        let ax = g.matmul(a, x)?;
                        let bax = g.matmul(b, ax)?;
                        g.add(base, bax)?
                    }
                    None => base,
                }
            }
            LayerKind::Conv { size, stride, pad } => {
                let base = g.conv2d(x, w, stride, pad)?;
                match self.adapter {
                    Some(s) => {
                        let c = k / (size * size);
                        let a = g.param(store, s.a);
                        let b = g.param(store, s.b);
                        let a4 = g.reshape(a, &[s.rank, c, size, size])?;
                        let b4 = g.reshape(b, &[d, s.rank, 1, 1])?;
                        let ax = g.conv2d(x, a4, stride, pad)?;
                        let bax = g.conv2d(ax, b4, 1, 0)?;
                        g.add(base, bax)?
                    }
                    None => base,
                }
            }
        };
        if let Some(bid) = self.bias {
            let b = g.param(store, bid);
            y = match self.kind {
                LayerKind::Linear => {
                    let n = g.shape(y)[1];
                    let y3 = g.reshape(y, &[d, n, 1])?;
                    let yb = g.channel_bias(y3, b)?;
                    g.reshape(yb, &[d, n])?
                }
                LayerKind::Conv { .. } => g.channel_bias(y, b)?,
            };
        }
        Ok(y)
    }

    /// Single-vector forward `W₀x + B(Ax) (+ bias)` for a linear layer.
    pub fn forward_vec(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if self.kind != LayerKind::Linear {
            return Err(Error::Usage(format!("`{}` is not a linear layer", self.name)));
        }
        let n = x.len();
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone().reshape(vec![n, 1])?);
        let y = self.forward(&mut g, store, xv)?;
        let y = g.value(y).clone();
        let d = y.len();
        y.reshape(vec![d])
    }

    /// `W₀ + BA` in the weight's own shape.
    pub fn merged_weight(&self, store: &ParamStore) -> Result<Tensor> {
        let w0 = &store.get(self.weight).value;
        let Some(s) = self.adapter else {
            return Ok(strip_grad(w0));
        };
        let delta = tensor::matmul(&store.get(s.b).value, &store.get(s.a).value)?;
        let data = w0.data().iter().zip(delta.data()).map(|(w, d)| w + d).collect();
        Tensor::new(w0.shape().to_vec(), data)
    }

    pub fn adapter_factors(&self, store: &ParamStore) -> Option<LowRankAdapter> {
        self.adapter.map(|s| LowRankAdapter {
            a: strip_grad(&store.get(s.a).value),
            b: strip_grad(&store.get(s.b).value),
        })
    }
}

fn strip_grad(t: &Tensor) -> Tensor {
    let mut t = t.clone();
    t.grad = None;
    t
}

/// Which layers receive adapters, as glob patterns over layer names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementSpec {
    pub patterns: Vec<String>,
}

impl PlacementSpec {
    pub fn new<S: Into<String>>(patterns: impl IntoIterator<Item = S>) -> Self {
        PlacementSpec {
            patterns: patterns.into_iter().map(Into::into).collect(),
        }
    }

    pub fn all() -> Self {
        Self::new(["*"])
    }

    /// Indices of matched layers; every pattern must match at least one.
    pub fn resolve(&self, layers: &[AdaptedLayer]) -> Result<Vec<usize>> {
        if self.patterns.is_empty() {
            return Err(Error::Config("adapter placement is empty".into()));
        }
        let mut hit = vec![false; layers.len()];
        for pat in &self.patterns {
            let p = Pattern::new(pat)
                .map_err(|e| Error::Config(format!("bad placement pattern `{pat}`: {e}")))?;
            let mut any = false;
            for (i, l) in layers.iter().enumerate() {
                if p.matches(&l.name) {
                    hit[i] = true;
                    any = true;
                }
            }
            if !any {
                return Err(Error::Config(format!("placement pattern `{pat}` matches no layer")));
            }
        }
        Ok((0..layers.len()).filter(|&i| hit[i]).collect())
    }
}

/// Summary returned by [`inject_adapters`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub layers: Vec<String>,
    /// Rank actually used per layer: `min(rank, d, k)`.
    pub ranks: Vec<usize>,
    pub trainable: usize,
}

/// Wraps every matched layer with a fresh adapter and freezes everything else.
///
/// A requested rank above `min(d, k)` is clamped to that bound per layer.
pub fn inject_adapters(
    layers: &mut [AdaptedLayer],
    store: &mut ParamStore,
    placement: &PlacementSpec,
    rank: usize,
    sigma: f64,
    seed: u64,
) -> Result<Injection> {
    if rank == 0 {
        return Err(Error::Config("adapter rank must be ≥ 1".into()));
    }
    let targets = placement.resolve(layers)?;
    if let Some(l) = targets.iter().map(|&i| &layers[i]).find(|l| l.adapter.is_some()) {
        return Err(Error::Usage(format!("layer `{}` already has an adapter", l.name)));
    }
    store.freeze_all();
    let mut report = Injection {
        layers: Vec::new(),
        ranks: Vec::new(),
        trainable: 0,
    };
    for i in targets {
        let layer = &mut layers[i];
        let (d, k) = layer.matrix_dims(store);
        let r = rank.min(d).min(k);
        let mut rng = rng::substream(seed, "adapter-init", &[i as u64]);
        let fresh = adapter_init(d, k, r, sigma, &mut rng)?;
        let a = store.add(Parameter::new(format!("{}.lora_a", layer.name), fresh.a, true));
        let b = store.add(Parameter::new(format!("{}.lora_b", layer.name), fresh.b, true));
        layer.adapter = Some(AdapterSlot { a, b, rank: r });
        report.layers.push(layer.name.clone());
        report.ranks.push(r);
    }
    report.trainable = store.trainable_numel();
    Ok(report)
}

/// Sum of per-adapter orthogonality penalties (λ is applied by the caller).
pub fn total_orth_loss(
    g: &mut Graph,
    layers: &[AdaptedLayer],
    store: &ParamStore,
    reduction: OrthReduction,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in layers.iter().filter_map(|l| l.adapter) {
        let a = g.param(store, s.a);
        let b = g.param(store, s.b);
        let l = orth_loss_var(g, a, b, reduction)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Usage("model has no adapters".into()))
}

/// Rebuilds `layers` over a new store in which every adapter has been
/// folded into its base weight. Parameter order of the base model is kept.
pub fn merge_layers(layers: &[AdaptedLayer], store: &ParamStore) -> Result<(Vec<AdaptedLayer>, ParamStore)> {
    if layers.iter().all(|l| l.adapter.is_none()) {
        return Err(Error::Usage("nothing to merge: model has no adapters".into()));
    }
    let mut out = ParamStore::new();
    let mut merged = Vec::with_capacity(layers.len());
    for l in layers {
        let w = l.merged_weight(store)?;
        let bias = l.bias.map(|b| strip_grad(&store.get(b).value));
        let mut nl = AdaptedLayer::register(&mut out, &l.name, l.kind, w, bias)?;
        nl.adapter = None;
        merged.push(nl);
    }
    out.freeze_all();
    Ok((merged, out))
}
