//! Input-gradient saliency maps and their PGM rendering.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{write_atomic, MultiLevelAttentionNet};
use crate::{Error, Real, Result, Tensor};

/// Quantity whose input gradient is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Cross-entropy at the chosen class.
    #[default]
    Loss,
    /// The chosen class's raw logit.
    Score,
}

/// How the three colour channels collapse to one value per pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for Reduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Reduce::Max),
            "mean" => Ok(Reduce::Mean),
            _ => Err(Error::Usage(format!("unknown reduction `{s}` (max, mean)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyOptions {
    pub objective: Objective,
    pub reduce: Reduce,
    /// Multiplies the objective before differentiation.
    pub scale: f64,
}

impl Default for SaliencyOptions {
    fn default() -> Self {
        SaliencyOptions {
            objective: Objective::Loss,
            reduce: Reduce::Max,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width`, all `>= 0`.
    pub values: Vec<f64>,
    pub sample_id: Option<usize>,
    pub class: usize,
    pub min: f64,
    pub max: f64,
}

/// Scalar whose input gradient is the saliency signal, for a batch of one.
pub fn objective(net: &MultiLevelAttentionNet, x: &Tensor, class: usize, opts: &SaliencyOptions) -> Result<Tensor> {
    let k = net.config().n_classes;
    if class >= k {
        return Err(Error::Input(format!("class {class} out of range for {k} classes")));
    }
    let logits = net.forward(x)?;
    let value = match opts.objective {
        Objective::Loss => logits.cross_entropy(&[class])?,
        Objective::Score => {
            let mut pick = vec![0.0 as Real; k];
            pick[class] = 1.0;
            logits.mul(&Tensor::new(pick, &[1, k])?)?.sum()
        }
    };
    Ok(value.scale(opts.scale as Real))
}

/// Raw gradient of [`objective`] with respect to a `(3, H, W)` image,
/// same layout as the image.
pub fn input_gradient(
    net: &MultiLevelAttentionNet,
    image: &Tensor,
    class: usize,
    opts: &SaliencyOptions,
) -> Result<Vec<Real>> {
    let input = net.config().input;
    let shape = [input.channels, input.height, input.width];
    if image.shape() != shape {
        return Err(Error::dim("saliency image", image.shape(), &shape));
    }
    let x = Tensor::parameter(image.data().to_vec(), &[1, input.channels, input.height, input.width])?;
    Ok(objective(net, &x, class, opts)?.gradients(&[&x])?.remove(0))
}

/// Input gradient reduced over channels by absolute value. Parameters are
/// read, never written.
pub fn compute_saliency(
    net: &MultiLevelAttentionNet,
    image: &Tensor,
    class: usize,
    opts: &SaliencyOptions,
) -> Result<SaliencyMap> {
    let grad = input_gradient(net, image, class, opts)?;
    let input = net.config().input;
    let plane = input.height * input.width;
    let values: Vec<f64> = (0..plane)
        .map(|p| {
            let mags = (0..input.channels).map(|c| (grad[c * plane + p] as f64).abs());
            match opts.reduce {
                Reduce::Max => mags.fold(0.0, f64::max),
                Reduce::Mean => mags.sum::<f64>() / input.channels as f64,
            }
        })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite saliency value".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SaliencyMap {
        height: input.height,
        width: input.width,
        values,
        sample_id: None,
        class,
        min,
        max,
    })
}

impl SaliencyMap {
    /// 8-bit pixels, dark = salient: `255 − round(255·(v − min)/(max − min))`,
    /// all 255 for a constant map.
    pub fn to_gray(&self) -> Vec<u8> {
        let range = self.max - self.min;
        self.values
            .iter()
            .map(|&v| {
                if range > 0.0 {
                    255 - (255.0 * (v - self.min) / range).round() as u8
                } else {
                    255
                }
            })
            .collect()
    }
}

/// Binary PGM (`P5`, maxval 255) bytes.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(map: &SaliencyMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pgm(map.width, map.height, &map.to_gray()))
}

/// Parses a binary PGM with maxval 255 into `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    Ok((w, h, data.to_vec()))
}

/// Sidecar written next to each PGM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub sample_id: Option<usize>,
    pub class: usize,
    pub objective: Objective,
    pub reduce: Reduce,
    pub width: usize,
    pub height: usize,
    pub raw_min: f64,
    pub raw_max: f64,
}

pub fn write_sidecar(map: &SaliencyMap, opts: &SaliencyOptions, path: &Path) -> Result<()> {
    let sidecar = SaliencySidecar {
        sample_id: map.sample_id,
        class: map.class,
        objective: opts.objective,
        reduce: opts.reduce,
        width: map.width,
        height: map.height,
        raw_min: map.min,
        raw_max: map.max,
    };
    let mut bytes = serde_json::to_vec_pretty(&sidecar)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_sidecar(path: &Path) -> Result<SaliencySidecar> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
