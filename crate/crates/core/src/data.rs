//! Labeled image sets: IDX files and procedurally generated classes.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{seeded, substream};
use crate::tensor::Tensor;

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

/// Images `[N, C, H, W]` with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return shape_err(format!("{} labels for images {:?}", labels.len(), images.shape()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Argument(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.sample_shape();
        let n = c * h * w;
        Tensor::new(vec![c, h, w], self.images.data()[i * n..(i + 1) * n].to_vec()).expect("sample shape")
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let n = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let x = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// A new dataset of the samples at `indices`, relabeled through `relabel`
    /// when given.
    pub fn subset(&self, indices: &[usize], relabel: Option<(&dyn Fn(usize) -> usize, usize)>) -> Result<Dataset> {
        let (x, y) = self.batch(indices);
        match relabel {
            Some((f, classes)) => Dataset::new(x, y.into_iter().map(f).collect(), classes),
            None => Dataset::new(x, y, self.classes),
        }
    }

    /// Sample indices grouped by label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Split off the samples whose label is in `classes`, keeping labels.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx, None)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parse an IDX byte stream. Image files (3-D) become `[N, H, W]` with bytes
/// scaled to `[0, 1]`; label files (1-D) keep raw byte values.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::Format(format!("{} bytes is too short for an IDX header", bytes.len())))?;
    let (ndim, scale) = match magic {
        IDX_IMAGES => (3, 255.0),
        IDX_LABELS => (1, 1.0),
        other => return Err(Error::Format(format!("unsupported IDX magic 0x{other:08x}"))),
    };
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let v = be_u32(bytes, 4 + 4 * d)
            .ok_or_else(|| Error::Format(format!("IDX header truncated in dimension {d}")))?;
        dims.push(v as usize);
    }
    let header = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(Error::Format(format!(
            "IDX payload has {actual} bytes, header declares {expected}"
        )));
    }
    let data = bytes[header..].iter().map(|&b| b as f64 / scale).collect();
    Tensor::new(dims, data)
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    parse_idx(&fs::read(path).map_err(|e| Error::io_at(e, path))?)
}

/// Encode `t` as IDX: `[N, H, W]` as an image file (values in `[0, 1]`
/// rounded to bytes), `[N]` as a label file (values must be bytes).
pub fn encode_idx(t: &Tensor) -> Result<Vec<u8>> {
    let (magic, scale) = match t.ndim() {
        3 => (IDX_IMAGES, 255.0),
        1 => (IDX_LABELS, 1.0),
        n => return Err(Error::Argument(format!("IDX supports 1-D labels or 3-D images, got {n}-D"))),
    };
    let mut out = magic.to_be_bytes().to_vec();
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in t.data() {
        let b = (v * scale).round();
        if !(0.0..=255.0).contains(&b) {
            return Err(Error::Argument(format!("value {v} does not fit an unsigned byte")));
        }
        out.push(b as u8);
    }
    Ok(out)
}

pub fn write_idx(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_idx(t)?)?;
    Ok(())
}

/// Pair an IDX image file with its label file.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let x = load_idx(images)?;
    let y = load_idx(labels)?;
    if x.ndim() != 3 || y.ndim() != 1 {
        return Err(Error::Format("expected a 3-D image file and a 1-D label file".into()));
    }
    let labels: Vec<usize> = y.data().iter().map(|&v| v as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let s = x.shape().to_vec();
    Dataset::new(x.into_reshape(&[s[0], 1, s[1], s[2]])?, labels, classes)
}

/// Procedural image classes.
///
/// Class `c` uses pattern family `c mod 3` (oriented stripes, a Gaussian blob,
/// a radial grating), with orientation, position and frequency spread over
/// the classes, and a per-class channel tint. Each image then gets a uniform
/// random phase/position offset in `[-jitter, jitter]` and additive Gaussian
/// pixel noise of std `noise`. With `noise = 0` and `jitter = 0` all images
/// of a class are identical; distinct classes have distinct noiseless
/// templates, so the task is separable up to the noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn one() -> usize {
    1
}
fn default_size() -> usize {
    12
}
fn default_noise() -> f64 {
    0.1
}
fn default_jitter() -> f64 {
    0.5
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize) -> Self {
        SynthSpec { classes, per_class, channels: 1, size: default_size(), noise: default_noise(), jitter: default_jitter() }
    }
}

fn template(class: usize, classes: usize, size: usize, shift: f64) -> Vec<f64> {
    let t = class as f64 / classes as f64;
    let s = size as f64;
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 / s, j as f64 / s);
            let v = match class % 3 {
                0 => {
                    let th = PI * t;
                    let freq = 2.0 + (class / 3) as f64;
                    0.5 + 0.5 * (2.0 * PI * freq * (x * th.cos() + y * th.sin()) + shift).sin()
                }
                1 => {
                    let (cy, cx) = (0.3 + 0.4 * t + 0.1 * shift, 0.7 - 0.4 * t + 0.1 * shift);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    (-d2 / 0.02).exp()
                }
                _ => {
                    let r = ((y - 0.5).powi(2) + (x - 0.5).powi(2)).sqrt();
                    let freq = 3.0 + 2.0 * t + (class / 3) as f64;
                    0.5 + 0.5 * (2.0 * PI * freq * r + shift).cos()
                }
            };
            out.push(v);
        }
    }
    out
}

/// Generate `spec.per_class` images of each class, ordered class by class.
/// Every pixel depends only on `(seed, class, index)`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class == 0 || spec.channels == 0 || spec.size < 2 {
        return Err(Error::Argument(format!(
            "synthetic data needs ≥ 2 classes, ≥ 1 image per class, ≥ 1 channel and side ≥ 2, got {spec:?}"
        )));
    }
    if !(spec.noise >= 0.0 && spec.jitter >= 0.0) || !spec.noise.is_finite() || !spec.jitter.is_finite() {
        return Err(Error::Argument("noise and jitter must be finite and non-negative".into()));
    }
    let (c, s) = (spec.channels, spec.size);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        let tint: Vec<f64> = (0..c).map(|ch| 0.75 + 0.25 * ((class + 2 * ch) as f64).cos()).collect();
        for k in 0..spec.per_class {
            let mut rng = substream(seed, (class * spec.per_class + k) as u64);
            let shift = if spec.jitter > 0.0 { rng.random_range(-spec.jitter..=spec.jitter) } else { 0.0 };
            let base = template(class, spec.classes, s, shift);
            for t in &tint {
                for v in &base {
                    let e: f64 = rng.sample(StandardNormal);
                    data.push(t * v + spec.noise * e);
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, c, s, s], data)?, labels, spec.classes)
}

/// Shuffle and split into `(train, test)` with `test_fraction` of each
/// class held out.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Argument(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut rng = seeded(seed);
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for mut idx in data.by_class() {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * test_fraction).round() as usize;
        te.extend_from_slice(&idx[..k]);
        tr.extend_from_slice(&idx[k..]);
    }
    Ok((data.subset(&tr, None)?, data.subset(&te, None)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_label_example() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 2, 7, 2];
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[2]);
        assert_eq!(t.data(), &[7.0, 2.0]);
    }

    #[test]
    fn idx_errors() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend(vec![0u8; 16]);
        match parse_idx(&bytes) {
            Err(Error::Format(m)) => assert!(m.contains("16") && m.contains('8'), "{m}"),
            other => panic!("{other:?}"),
        }
        match parse_idx(&[0, 0, 9, 9, 0, 0, 0, 0]) {
            Err(Error::Format(m)) => assert!(m.contains("0x00000909"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx(&[0, 0]), Err(Error::Format(_))));
    }

    #[test]
    fn idx_round_trip() {
        let img = Tensor::from_fn(&[3, 2, 4], |i| ((i * 37) % 256) as f64 / 255.0);
        let back = parse_idx(&encode_idx(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let lab = Tensor::from_vec(vec![0.0, 9.0, 3.0]);
        assert_eq!(parse_idx(&encode_idx(&lab).unwrap()).unwrap(), lab);
        let dir = tempfile::tempdir().unwrap();
        write_idx(dir.path().join("x.idx"), &img).unwrap();
        write_idx(dir.path().join("y.idx"), &lab).unwrap();
        let ds = load_idx_dataset(dir.path().join("x.idx"), dir.path().join("y.idx")).unwrap();
        assert_eq!(ds.sample_shape(), [1, 2, 4]);
        assert_eq!(ds.classes, 10);
    }

    #[test]
    fn synth_is_deterministic_and_noiseless_classes_are_constant() {
        let spec = SynthSpec { classes: 4, per_class: 5, channels: 2, size: 8, noise: 0.2, jitter: 0.3 };
        let a = synth_dataset(&spec, 11).unwrap();
        let b = synth_dataset(&spec, 11).unwrap();
        assert!(a.images.data().iter().zip(b.images.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(synth_dataset(&spec, 12).unwrap().images, a.images);
        let clean = SynthSpec { noise: 0.0, jitter: 0.0, ..spec };
        let d = synth_dataset(&clean, 3).unwrap();
        for class in d.by_class() {
            let first = d.image(class[0]);
            for &i in &class[1..] {
                assert_eq!(d.image(i), first);
            }
        }
        let t: Vec<Tensor> = d.by_class().iter().map(|c| d.image(c[0])).collect();
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                assert!(t[i].max_abs_diff(&t[j]) > 0.1);
            }
        }
    }

    #[test]
    fn synth_rejects_bad_specs() {
        assert!(matches!(synth_dataset(&SynthSpec::new(1, 5), 0), Err(Error::Argument(_))));
        assert!(matches!(synth_dataset(&SynthSpec::new(3, 0), 0), Err(Error::Argument(_))));
        let neg = SynthSpec { noise: -1.0, ..SynthSpec::new(2, 2) };
        assert!(synth_dataset(&neg, 0).is_err());
    }

    #[test]
    fn split_keeps_every_sample_once() {
        let d = synth_dataset(&SynthSpec::new(3, 10), 1).unwrap();
        let (tr, te) = split(&d, 0.3, 2).unwrap();
        assert_eq!(tr.len() + te.len(), 30);
        assert_eq!(te.len(), 9);
        assert_eq!(tr.by_class().iter().map(Vec::len).collect::<Vec<_>>(), vec![7, 7, 7]);
    }
}
