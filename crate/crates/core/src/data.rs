//! Synthetic multi-domain image corpus.
//!
//! Every image is a class shape (bars, cross, ring, checker patch, diagonal
//! stripes) rendered into a binary mask and then painted with a domain
//! style: foreground/background palette, optional background texture,
//! contrast/brightness, and optional inversion. The mask of the `j`-th
//! sample of class `k` depends only on `(seed, k, j)`, so matched samples
//! share their geometry across domains and differ only in style.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["bars", "cross", "ring", "checker", "diagonal"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub per_domain: usize,
    pub image_size: usize,
    /// Ratio between the most and least frequent class within a domain; 1 is balanced.
    pub class_imbalance: f64,
    pub corpus_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_classes: 5,
            num_domains: 4,
            per_domain: 200,
            image_size: 32,
            class_imbalance: 1.0,
            corpus_seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={}, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.num_domains < 3 {
            return Err(Error::Config(format!(
                "need at least 3 domains (2 sources and a target), got {}",
                self.num_domains
            )));
        }
        if self.per_domain < self.num_classes {
            return Err(Error::Config(format!(
                "per_domain {} cannot cover {} classes",
                self.per_domain, self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} is too small", self.image_size)));
        }
        if !(self.class_imbalance >= 1.0) {
            return Err(Error::Config(format!("class_imbalance must be ≥ 1, got {}", self.class_imbalance)));
        }
        Ok(())
    }

    /// Samples per class within each domain.
    pub fn class_counts(&self) -> Vec<usize> {
        let k = self.num_classes;
        let raw: Vec<f64> = (0..k)
            .map(|c| self.class_imbalance.powf(-(c as f64) / (k - 1) as f64))
            .collect();
        let total: f64 = raw.iter().sum();
        let spare = self.per_domain - k;
        let props: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let mut counts = largest_remainder_simple(&props, spare);
        counts.iter_mut().for_each(|c| *c += 1);
        counts
    }
}

fn largest_remainder_simple(props: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Style applied to a rendered mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub foreground: [f32; 3],
    pub background: [f32; 3],
    pub texture_amplitude: f32,
    pub texture_frequency: f32,
    pub contrast: f32,
    pub brightness: f32,
    pub invert: bool,
}

impl DomainSpec {
    pub fn builtin(domain_id: usize, corpus_seed: u64) -> DomainSpec {
        let plain = |name: &str, fg, bg| DomainSpec {
            domain_id,
            name: name.to_string(),
            foreground: fg,
            background: bg,
            texture_amplitude: 0.0,
            texture_frequency: 0.0,
            contrast: 1.0,
            brightness: 0.0,
            invert: false,
        };
        match domain_id {
            0 => plain("photo", [0.55, 0.25, 0.15], [0.85, 0.8, 0.7]),
            1 => DomainSpec {
                texture_amplitude: 0.2,
                texture_frequency: 0.8,
                ..plain("texture", [0.95, 0.9, 0.3], [0.15, 0.3, 0.65])
            },
            2 => DomainSpec {
                contrast: 0.6,
                brightness: 0.1,
                ..plain("faded", [0.25, 0.6, 0.3], [0.45, 0.85, 0.45])
            },
            3 => DomainSpec {
                invert: true,
                ..plain("inverted", [0.1, 0.1, 0.15], [0.9, 0.9, 0.85])
            },
            _ => {
                let mut r = seed::stream(corpus_seed, &[0xd0, domain_id as u64]);
                let mut color = || std::array::from_fn(|_| r.random_range(0.0f32..1.0));
                let (fg, bg) = (color(), color());
                let mut d = plain(&format!("random{domain_id}"), fg, bg);
                d.texture_amplitude = r.random_range(0.0..0.2);
                d.texture_frequency = r.random_range(0.3..1.2);
                d.contrast = r.random_range(0.5..1.2);
                d.invert = r.random_bool(0.5);
                d
            }
        }
    }
}

/// Binary class mask for the `instance`-th sample of `class`.
pub fn render_mask(class: usize, instance: usize, size: usize, corpus_seed: u64) -> Vec<f32> {
    let mut r = seed::stream(corpus_seed, &[0x5a, class as u64, instance as u64]);
    let s = size as f32;
    let u = s / 32.0;
    let cx = s / 2.0 + r.random_range(-4.0..4.0) * u;
    let cy = s / 2.0 + r.random_range(-4.0..4.0) * u;
    let mut mask = vec![0.0f32; size * size];
    let inside: Box<dyn Fn(f32, f32) -> bool> = match class {
        0 => {
            let bars = r.random_range(2..=3) as f32;
            let width = r.random_range(2.0..4.0) * u;
            let gap = r.random_range(3.0..5.0) * u;
            let half_len = r.random_range(8.0..13.0) * u;
            let span = bars * width + (bars - 1.0) * gap;
            let x0 = cx - span / 2.0;
            Box::new(move |x, y| {
                let rel = x - x0;
                rel >= 0.0 && rel < span && rel % (width + gap) < width && (y - cy).abs() < half_len
            })
        }
        1 => {
            let arm = r.random_range(8.0..13.0) * u;
            let half_t = r.random_range(1.0..2.0) * u;
            Box::new(move |x, y| {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                (dx < half_t && dy < arm) || (dy < half_t && dx < arm)
            })
        }
        2 => {
            let radius = r.random_range(6.0..11.0) * u;
            let half_t = r.random_range(1.0..1.75) * u;
            Box::new(move |x, y| (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - radius).abs() < half_t)
        }
        3 => {
            let half = r.random_range(8.0..12.0) * u;
            let cell = r.random_range(3.0..6.0) * u;
            Box::new(move |x, y| {
                let (dx, dy) = (x - cx + half, y - cy + half);
                dx >= 0.0
                    && dy >= 0.0
                    && dx < 2.0 * half
                    && dy < 2.0 * half
                    && ((dx / cell).floor() as i64 + (dy / cell).floor() as i64) % 2 == 0
            })
        }
        _ => {
            let half_t = r.random_range(1.0..2.0) * u;
            let gap = r.random_range(6.0..9.0) * u;
            let reach = r.random_range(9.0..13.0) * u;
            Box::new(move |x, y| {
                let along = ((x - cx) + (y - cy)) / std::f32::consts::SQRT_2;
                let across = ((x - cx) - (y - cy)) / std::f32::consts::SQRT_2;
                along.abs() < reach && (across.abs() < half_t || (across.abs() - gap).abs() < half_t)
            })
        }
    };
    for y in 0..size {
        for x in 0..size {
            if inside(x as f32 + 0.5, y as f32 + 0.5) {
                mask[y * size + x] = 1.0;
            }
        }
    }
    mask
}

/// Paint a mask with a domain style. `r` supplies per-sample jitter and noise.
pub fn paint<R: Rng + ?Sized>(mask: &[f32], size: usize, domain: &DomainSpec, r: &mut R) -> Vec<f32> {
    let jitter = Normal::new(0.0f32, 0.04).expect("valid normal");
    let noise = Normal::new(0.0f32, 0.02).expect("valid normal");
    let brightness = domain.brightness + jitter.sample(r);
    let contrast = domain.contrast * (1.0 + jitter.sample(r));
    let phase = r.random_range(0.0..std::f32::consts::TAU);
    let angle = r.random_range(0.0..std::f32::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut out = vec![0.0f32; 3 * size * size];
    for c in 0..3 {
        let (fg, bg) = (domain.foreground[c], domain.background[c]);
        for y in 0..size {
            for x in 0..size {
                let p = y * size + x;
                let m = mask[p];
                let tex = domain.texture_amplitude
                    * (domain.texture_frequency * (x as f32 * ca + y as f32 * sa) + phase).sin();
                let base = bg + tex + m * (fg - bg - tex);
                let mut v = (base - 0.5) * contrast + 0.5 + brightness + noise.sample(r);
                if domain.invert {
                    v = 1.0 - v;
                }
                out[c * size * size + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub domains_spec: Vec<DomainSpec>,
    /// `[N,3,S,S]` in `[0,1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    /// Within-class instance index; equal across domains for matched samples.
    pub instances: Vec<usize>,
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let size = spec.image_size;
    let counts = spec.class_counts();
    let domains_spec: Vec<DomainSpec> = (0..spec.num_domains)
        .map(|d| DomainSpec::builtin(d, spec.corpus_seed))
        .collect();
    let masks: Vec<Vec<Vec<f32>>> = counts
        .iter()
        .enumerate()
        .map(|(k, &n)| (0..n).map(|j| render_mask(k, j, size, spec.corpus_seed)).collect())
        .collect();
    let mut data = Vec::with_capacity(spec.num_domains * spec.per_domain * 3 * size * size);
    let (mut labels, mut domains, mut instances) = (Vec::new(), Vec::new(), Vec::new());
    for d in &domains_spec {
        let mut r = seed::stream(spec.corpus_seed, &[0xc0, d.domain_id as u64]);
        for (k, class_masks) in masks.iter().enumerate() {
            for (j, mask) in class_masks.iter().enumerate() {
                data.extend(paint(mask, size, d, &mut r));
                labels.push(k);
                domains.push(d.domain_id);
                instances.push(j);
            }
        }
    }
    let n = labels.len();
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        domains_spec,
        images: Tensor::new(vec![n, 3, size, size], data)?,
        labels,
        domains,
        instances,
    })
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.spec.num_domains
    }

    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domains[i] == domain).collect()
    }

    /// Images `[n,3,S,S]` and labels of the given samples, in order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("row gather"), labels)
    }

    /// Write images as a fixture file plus a JSON sidecar with labels and domains.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("images.f32"))?;
        self.images.write_fixture(std::io::BufWriter::new(f))?;
        let meta = serde_json::json!({
            "spec": self.spec,
            "domains_spec": self.domains_spec,
            "labels": self.labels,
            "domains": self.domains,
            "instances": self.instances,
        });
        std::fs::write(dir.join("corpus.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }
}
