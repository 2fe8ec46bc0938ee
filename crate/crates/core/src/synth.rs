//! Synthetic segmentation scenes, procedural weather-like corruptions and
//! continual target streams.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm::{self, LabelMap};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `3×H×W` in `[0,1]`.
    pub image: Tensor,
    pub label: LabelMap,
}

impl SegSample {
    pub fn save(&self, image_path: &Path, label_path: &Path) -> Result<()> {
        pnm::write_ppm(image_path, &self.image)?;
        pnm::write_pgm(label_path, &self.label)
    }

    pub fn load(image_path: &Path, label_path: &Path) -> Result<Self> {
        let image = pnm::read_ppm(image_path)?;
        let label = pnm::read_pgm(label_path)?;
        let (_, h, w) = image.chw()?;
        if (label.height, label.width) != (h, w) {
            return Err(Error::Dimension(format!(
                "{} is {h}×{w} but {} is {}×{}",
                image_path.display(),
                label_path.display(),
                label.height,
                label.width
            )));
        }
        Ok(SegSample { image, label })
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Canonical class colours: class 0 is a muted background, the rest are
/// evenly spaced saturated hues.
pub fn palette(k: usize) -> Vec<[f64; 3]> {
    let mut p = vec![[0.42, 0.44, 0.48]];
    for c in 1..k {
        p.push(hsv_to_rgb((c - 1) as f64 / (k - 1) as f64, 0.85, 0.9));
    }
    p
}

const COLOR_JITTER: f64 = 0.06;

/// Background gradient plus 3–6 class-coloured rectangles, discs and stripes.
pub fn gen_scene(seed: u64, h: usize, w: usize, k: usize) -> Result<SegSample> {
    if k < 2 || k > 255 {
        return Err(Error::Config(format!("class count {k} outside 2..=255")));
    }
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("scene {h}×{w} smaller than 16×16")));
    }
    let mut r = rng::stream(seed, Stream::Data);
    let pal = palette(k);
    let hw = h * w;
    let mut img = vec![0.0; 3 * hw];
    let mut ids = vec![0u8; hw];

    let angle = r.gen::<f64>() * std::f64::consts::TAU;
    let (ca, sa) = (angle.cos(), angle.sin());
    let amp = 0.08 + 0.06 * r.gen::<f64>();
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 / w as f64 - 0.5) * ca + (y as f64 / h as f64 - 0.5) * sa;
            for ch in 0..3 {
                img[ch * hw + y * w + x] = (pal[0][ch] + amp * u).clamp(0.0, 1.0);
            }
        }
    }

    let n_shapes = r.gen_range(3..=6);
    for _ in 0..n_shapes {
        let class = r.gen_range(1..k);
        let mut color = pal[class];
        for c in &mut color {
            *c = (*c + COLOR_JITTER * (2.0 * r.gen::<f64>() - 1.0)).clamp(0.0, 1.0);
        }
        let cy = r.gen::<f64>() * h as f64;
        let cx = r.gen::<f64>() * w as f64;
        let size = (0.12 + 0.2 * r.gen::<f64>()) * h.min(w) as f64;
        let shape = r.gen_range(0..3);
        let aspect = 0.6 + 0.8 * r.gen::<f64>();
        let tilt = r.gen::<f64>() * std::f64::consts::PI;
        let period = 4.0 + 4.0 * r.gen::<f64>();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let inside = match shape {
                    0 => dy.abs() <= size * aspect && dx.abs() <= size / aspect,
                    1 => dy * dy + dx * dx <= size * size,
                    _ => {
                        let along = dx * tilt.cos() + dy * tilt.sin();
                        let across = -dx * tilt.sin() + dy * tilt.cos();
                        along.abs() <= 1.6 * size
                            && across.abs() <= 0.9 * size
                            && (across / period).rem_euclid(2.0) < 1.0
                    }
                };
                if inside {
                    let p = y * w + x;
                    ids[p] = class as u8;
                    for ch in 0..3 {
                        img[ch * hw + p] = color[ch];
                    }
                }
            }
        }
    }
    Ok(SegSample {
        image: Tensor::new(vec![3, h, w], img)?,
        label: LabelMap::new(h, w, ids)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Fog,
    Dark,
    Noise,
    Blur,
}

impl CorruptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::Fog => "fog",
            CorruptionKind::Dark => "dark",
            CorruptionKind::Noise => "noise",
            CorruptionKind::Blur => "blur",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fog" => CorruptionKind::Fog,
            "dark" => CorruptionKind::Dark,
            "noise" => CorruptionKind::Noise,
            "blur" => CorruptionKind::Blur,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub seed: u64,
}

/// Spatially smooth fog density in `[0.55, 1]`, a sum of two random
/// low-frequency plane waves.
pub fn fog_field(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, Stream::Corruption);
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let a = r.gen::<f64>() * std::f64::consts::TAU;
            let f = 1.0 + 2.0 * r.gen::<f64>();
            (a, f, r.gen::<f64>() * std::f64::consts::TAU)
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let s: f64 = waves
                .iter()
                .map(|&(a, f, ph)| (std::f64::consts::TAU * f * (u * a.cos() + v * a.sin()) + ph).sin())
                .sum::<f64>()
                / 2.0;
            out.push(0.775 + 0.225 * s);
        }
    }
    out
}

/// Convex blend toward white: `x' = (1 − w)·x + w` per pixel.
pub fn fog_blend(x: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    if weights.len() != h * w {
        return Err(Error::Dimension("fog weight field does not match image".into()));
    }
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for (v, &a) in plane.iter_mut().zip(weights) {
            *v = (1.0 - a) * *v + a;
        }
    }
    Ok(out)
}

fn box_blur(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xc = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                        s += src[yy * w + xc];
                    }
                }
                dst[y * w + xx] = s / 9.0;
            }
        }
    }
    out
}

/// Applies one corruption. Severity 0 returns the input unchanged.
///
/// * Fog: `fog_blend` with weights `severity·fog_field`.
/// * Dark: `(1 − 0.8s)·x^(1+1.5s)`.
/// * Noise: `x + N(0, (0.35s)²)`, clipped to `[0,1]`.
/// * Blur: `round(6s)` passes of a 3×3 edge-clamped box filter.
pub fn corrupt(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    let s = spec.severity;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Config(format!("severity {s} outside [0, 1]")));
    }
    let (c, h, w) = x.chw()?;
    let mut out = x.clone();
    out.grad = None;
    match spec.kind {
        CorruptionKind::Fog => {
            let field: Vec<f64> = fog_field(h, w, spec.seed).iter().map(|f| s * f).collect();
            return fog_blend(&out, &field);
        }
        CorruptionKind::Dark => {
            let (gain, gamma) = (1.0 - 0.8 * s, 1.0 + 1.5 * s);
            out.data_mut().iter_mut().for_each(|v| *v = gain * v.powf(gamma));
        }
        CorruptionKind::Noise => {
            let sigma = 0.35 * s;
            let mut r = rng::stream(spec.seed, Stream::Corruption);
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = (*v + sigma * rng::normal(&mut r)).clamp(0.0, 1.0));
        }
        CorruptionKind::Blur => {
            let passes = (6.0 * s).round() as usize;
            let mut d = out.data().to_vec();
            for _ in 0..passes {
                d = box_blur(&d, c, h, w);
            }
            out = Tensor::new(vec![c, h, w], d)?;
        }
    }
    Ok(out)
}

/// One target domain of the continual stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub kind: CorruptionKind,
    pub severity: f64,
}

impl DomainSpec {
    pub fn new(name: &str, kind: CorruptionKind, severity: f64) -> Self {
        DomainSpec {
            name: name.to_string(),
            kind,
            severity,
        }
    }
}

/// Fog / night / rain / snow stand-ins used by the default benchmark.
pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec::new("fog", CorruptionKind::Fog, 0.6),
        DomainSpec::new("night", CorruptionKind::Dark, 0.6),
        DomainSpec::new("rain", CorruptionKind::Noise, 0.6),
        DomainSpec::new("snow", CorruptionKind::Blur, 0.6),
    ]
}

/// The `n` cyclic rotations of a domain order.
pub fn cyclic_orders(domains: &[DomainSpec]) -> Vec<Vec<DomainSpec>> {
    (0..domains.len())
        .map(|s| domains.iter().cycle().skip(s).take(domains.len()).cloned().collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEntry {
    /// 1-based round.
    pub round: usize,
    pub domain: String,
    pub kind: CorruptionKind,
    pub severity: f64,
    /// Scene seed; also seeds the corruption.
    pub seed: u64,
    pub image_path: String,
    pub label_path: String,
}

impl StreamEntry {
    pub fn corruption(&self) -> CorruptionSpec {
        CorruptionSpec {
            kind: self.kind,
            severity: self.severity,
            seed: self.seed,
        }
    }

    /// Regenerates the corrupted sample procedurally.
    pub fn materialize(&self, h: usize, w: usize, k: usize) -> Result<SegSample> {
        let clean = gen_scene(self.seed, h, w, k)?;
        Ok(SegSample {
            image: corrupt(&clean.image, &self.corruption())?,
            label: clean.label,
        })
    }

    /// Identity of the sample for the once-only contract.
    pub fn key(&self) -> (usize, String, u64) {
        (self.round, self.domain.clone(), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainStream {
    pub entries: Vec<StreamEntry>,
    pub rounds: usize,
}

pub const MANIFEST_HEADER: &str = "round,domain,kind,severity,seed,image_path,label_path";

/// Scene seed for sample `idx` of `domain` in `round`; independent of
/// the position of the domain in the order.
pub fn scene_seed(master: u64, round: usize, domain: &str, idx: usize) -> u64 {
    rng::derive_seed(master, &format!("scene/{domain}"), &[round as u64, idx as u64])
}

pub fn build_stream(
    domains: &[DomainSpec],
    samples_per_domain: usize,
    rounds: usize,
    seed: u64,
) -> Result<DomainStream> {
    if domains.is_empty() {
        return Err(Error::Config("stream needs at least one domain".into()));
    }
    if rounds == 0 {
        return Err(Error::Config("stream needs at least one round".into()));
    }
    for (i, d) in domains.iter().enumerate() {
        if domains[..i].iter().any(|o| o.name == d.name) {
            return Err(Error::Config(format!("duplicate domain name `{}`", d.name)));
        }
        if d.name.is_empty() || d.name.contains([',', '/', '\n']) {
            return Err(Error::Config(format!("invalid domain name `{}`", d.name)));
        }
        if !(0.0..=1.0).contains(&d.severity) {
            return Err(Error::Config(format!("severity of `{}` outside [0, 1]", d.name)));
        }
    }
    let mut entries = Vec::with_capacity(domains.len() * samples_per_domain * rounds);
    for round in 1..=rounds {
        for d in domains {
            for idx in 0..samples_per_domain {
                let stem = format!("target/r{round}_{}_{idx:04}", d.name);
                entries.push(StreamEntry {
                    round,
                    domain: d.name.clone(),
                    kind: d.kind,
                    severity: d.severity,
                    seed: scene_seed(seed, round, &d.name, idx),
                    image_path: format!("{stem}.ppm"),
                    label_path: format!("{stem}.pgm"),
                });
            }
        }
    }
    Ok(DomainStream { entries, rounds })
}

impl DomainStream {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Domain names in first-appearance order.
    pub fn domain_order(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.domain) {
                out.push(e.domain.clone());
            }
        }
        out
    }

    pub fn to_manifest(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.round,
                e.domain,
                e.kind.as_str(),
                e.severity,
                e.seed,
                e.image_path,
                e.label_path
            );
        }
        s
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n');
        let mut offset = 0;
        let header = lines.next().unwrap_or("");
        if header.trim_end_matches(['\n', '\r']) != MANIFEST_HEADER {
            return Err(Error::format(0, "manifest header mismatch"));
        }
        offset += header.len();
        let mut entries = Vec::new();
        for line in lines {
            let body = line.trim_end_matches(['\n', '\r']);
            if body.is_empty() {
                offset += line.len();
                continue;
            }
            let f: Vec<&str> = body.split(',').collect();
            if f.len() != 7 {
                return Err(Error::format(offset, format!("expected 7 fields, found {}", f.len())));
            }
            let bad = |i: usize, what: &str| {
                let col: usize = f[..i].iter().map(|s| s.len() + 1).sum();
                Error::format(offset + col, format!("invalid {what} `{}`", f[i]))
            };
            let round: usize = f[0].parse().map_err(|_| bad(0, "round"))?;
            let kind = CorruptionKind::parse(f[2]).ok_or_else(|| bad(2, "corruption kind"))?;
            let severity: f64 = f[3].parse().map_err(|_| bad(3, "severity"))?;
            let seed: u64 = f[4].parse().map_err(|_| bad(4, "seed"))?;
            entries.push(StreamEntry {
                round,
                domain: f[1].to_string(),
                kind,
                severity,
                seed,
                image_path: f[5].to_string(),
                label_path: f[6].to_string(),
            });
            offset += line.len();
        }
        let rounds = entries.iter().map(|e| e.round).max().unwrap_or(0);
        Ok(DomainStream { entries, rounds })
    }
}
