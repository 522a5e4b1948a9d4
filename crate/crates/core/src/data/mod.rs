//! Multi-domain image datasets.
//!
//! [`generate`] renders procedural images whose class is the drawn shape
//! (the causal feature) and whose domain is the rendering style. Within
//! each domain, the shape colour also tracks the class with probability
//! `spurious_strength`, but the colour-to-class mapping differs per domain,
//! so a colour-reliant classifier does not transfer to a held-out domain.
//! [`format`] reads and writes the MLDG1 container.

pub mod format;
mod render;

pub use format::{load_dataset, save_dataset};
pub use render::{ShapeKind, Texture};

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSample {
    /// `3 × H × W`, channel-major.
    pub image: Vec<u8>,
    pub class_label: u16,
    pub domain_label: u16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub n_classes: u16,
    pub domain_names: Vec<String>,
    pub height: u32,
    pub width: u32,
    pub samples: Vec<DomainSample>,
    /// Set on training splits: the domain that must never appear in them.
    pub held_out: Option<u16>,
}

/// Rendering style of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    pub texture: Texture,
    /// Base background colour.
    pub background: [u8; 3],
    /// Per-pixel uniform noise amplitude as a fraction of full scale.
    pub noise: f64,
    /// Foreground/background contrast in (0, 1].
    pub contrast: f64,
}

impl DomainStyle {
    /// Built-in style for domain index `i`; the first four mimic the usual
    /// photo / art / cartoon / sketch split.
    pub fn builtin(i: usize) -> DomainStyle {
        let (texture, background, noise, contrast) = match i % 4 {
            0 => (Texture::Gradient, [110, 130, 150], 0.08, 1.0),
            1 => (Texture::Stripes, [180, 140, 90], 0.12, 0.85),
            2 => (Texture::Flat, [240, 230, 200], 0.0, 1.0),
            _ => (Texture::Checker, [200, 200, 200], 0.05, 0.7),
        };
        DomainStyle {
            name: domain_name(i),
            texture,
            background,
            noise,
            contrast,
        }
    }
}

/// Canonical name of domain `i`. MLDG1 files carry no names, so loaded
/// datasets are labelled with these.
pub fn domain_name(i: usize) -> String {
    match i {
        0 => "photo".into(),
        1 => "art".into(),
        2 => "cartoon".into(),
        3 => "sketch".into(),
        _ => format!("style{i}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub domains: Vec<DomainStyle>,
    pub samples_per_domain_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Probability that the shape takes its domain's class colour rather
    /// than a uniformly random palette colour.
    pub spurious_strength: f64,
}

pub const MIN_IMAGE_SIZE: usize = 16;
pub const DESK_PER_CELL: usize = 12;

impl SynthSpec {
    pub fn new(n_classes: usize, n_domains: usize, per_cell: usize, image_size: usize, seed: u64, spurious_strength: f64) -> Self {
        SynthSpec {
            n_classes,
            domains: (0..n_domains).map(DomainStyle::builtin).collect(),
            samples_per_domain_per_class: per_cell,
            image_size,
            seed,
            spurious_strength,
        }
    }

    /// The default synthetic benchmark: 5 shapes, the 4 built-in domains,
    /// 12 samples per cell at 32×32, spurious strength 0.8.
    pub fn desk(seed: u64) -> Self {
        SynthSpec::new(5, 4, DESK_PER_CELL, 32, seed, 0.8)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.image_size < MIN_IMAGE_SIZE {
            return bad(format!(
                "image size {} is below the {MIN_IMAGE_SIZE}px needed to render shapes",
                self.image_size
            ));
        }
        if !(2..=ShapeKind::ALL.len()).contains(&self.n_classes) {
            return bad(format!("n_classes must be in 2..={}", ShapeKind::ALL.len()));
        }
        if self.domains.is_empty() || self.domains.len() > u16::MAX as usize {
            return bad("need at least one domain".into());
        }
        if self.samples_per_domain_per_class == 0 {
            return bad("samples per cell must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return bad("spurious_strength must lie in [0, 1]".into());
        }
        for d in &self.domains {
            if !(d.contrast > 0.0 && d.contrast <= 1.0) || !(0.0..=1.0).contains(&d.noise) {
                return bad(format!("domain `{}` has contrast/noise out of range", d.name));
            }
        }
        Ok(())
    }
}

/// Renders the dataset described by `spec`; a pure function of the spec.
pub fn generate(spec: &SynthSpec) -> Result<DomainDataset> {
    generate_with_masks(spec).map(|(ds, _)| ds)
}

/// Like [`generate`], also returning each sample's binary shape mask
/// (`H × W`, row-major) in sample order.
pub fn generate_with_masks(spec: &SynthSpec) -> Result<(DomainDataset, Vec<Vec<bool>>)> {
    spec.validate()?;
    let size = spec.image_size;
    let per = spec.samples_per_domain_per_class;
    let mut samples = Vec::with_capacity(spec.domains.len() * spec.n_classes * per);
    let mut masks = Vec::with_capacity(samples.capacity());
    for (d, style) in spec.domains.iter().enumerate() {
        for c in 0..spec.n_classes {
            for i in 0..per {
                let index = ((d * spec.n_classes + c) * per + i) as u64;
                // Geometry and style use separate streams: the shape
                // distribution cannot depend on the domain.
                let mut geo_rng = Rng::derive(spec.seed, 2 * index);
                let mut style_rng = Rng::derive(spec.seed, 2 * index + 1);
                let shape = render::Placement::sample(&mut geo_rng, ShapeKind::ALL[c], size);
                let mask = shape.mask(size);
                let colour = render::shape_colour(&mut style_rng, c, d, spec.n_classes, spec.spurious_strength);
                let image = render::paint(&mut style_rng, style, &mask, colour, size);
                samples.push(DomainSample {
                    image,
                    class_label: c as u16,
                    domain_label: d as u16,
                });
                masks.push(mask);
            }
        }
    }
    let ds = DomainDataset {
        n_classes: spec.n_classes as u16,
        domain_names: spec.domains.iter().map(|d| d.name.clone()).collect(),
        height: size as u32,
        width: size as u32,
        samples,
        held_out: None,
    };
    Ok((ds, masks))
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn domain_index(&self, name: &str) -> Result<u16> {
        self.domain_names
            .iter()
            .position(|n| n == name)
            .map(|i| i as u16)
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown domain `{name}` (have: {})",
                    self.domain_names.join(", ")
                ))
            })
    }

    /// `counts[domain][class]`.
    pub fn cell_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.n_classes as usize]; self.n_domains()];
        for s in &self.samples {
            counts[s.domain_label as usize][s.class_label as usize] += 1;
        }
        counts
    }

    /// Images at `indices` as a `(b, 3, H, W)` tensor mapped from
    /// `[0, 255]` to `[-1, 1]` via `(v/255 − 0.5) / 0.5`.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let (h, w) = (self.height as usize, self.width as usize);
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for &i in indices {
            data.extend(self.samples[i].image.iter().map(|&v| pixel_to_input(v)));
        }
        Tensor::new(data, &[indices.len(), 3, h, w])
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].class_label as usize).collect()
    }

    pub fn check_labels(&self) -> Result<()> {
        let (h, w) = (self.height as usize, self.width as usize);
        for (i, s) in self.samples.iter().enumerate() {
            if s.class_label >= self.n_classes || s.domain_label as usize >= self.n_domains() {
                return Err(Error::Input(format!("sample {i} has out-of-range labels")));
            }
            if s.image.len() != 3 * h * w {
                return Err(Error::Input(format!("sample {i} has {} pixels", s.image.len())));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn pixel_to_input(v: u8) -> Real {
    ((v as f64 / 255.0 - 0.5) / 0.5) as Real
}

/// Leave-one-domain-out split: `test` is every sample of `target`, `train`
/// everything else (tagged with `held_out = target`).
pub fn split_leave_one_out(ds: &DomainDataset, target: &str) -> Result<(DomainDataset, DomainDataset)> {
    let t = ds.domain_index(target)?;
    let (test, train): (Vec<_>, Vec<_>) = ds.samples.iter().cloned().partition(|s| s.domain_label == t);
    let with = |samples, held_out| DomainDataset {
        samples,
        held_out,
        ..ds.clone_header()
    };
    Ok((with(train, Some(t)), with(test, None)))
}

impl DomainDataset {
    fn clone_header(&self) -> DomainDataset {
        DomainDataset {
            n_classes: self.n_classes,
            domain_names: self.domain_names.clone(),
            height: self.height,
            width: self.width,
            samples: Vec::new(),
            held_out: self.held_out,
        }
    }
}
