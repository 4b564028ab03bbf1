//! Datasets, the `ppds` container, binary PPM images and offline augmentation.
//!
//! `ppds` layout (little-endian):
//!
//! ```text
//! "PPDS" | u32 version = 1 | u32 N | u32 K | u32 H | u32 W
//! N × ( u32 label | H·W·3 bytes RGB, row-major )
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PPDS_MAGIC: &[u8; 4] = b"PPDS";
pub const PPDS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labelled `H × W × 3` images with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        let ds = Dataset {
            images,
            labels,
            class_names,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::InvalidDataset("dataset has no images".into()));
        }
        if self.images.len() != self.labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let shape = self.images[0].shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::InvalidDataset(format!(
                "images must be H x W x 3, got {shape:?}"
            )));
        }
        if let Some(i) = self.images.iter().position(|im| im.shape() != shape) {
            return Err(Error::InvalidDataset(format!(
                "image {i} has extents {:?}, expected {shape:?}",
                self.images[i].shape()
            )));
        }
        if let Some(i) = self
            .labels
            .iter()
            .position(|&l| l >= self.class_names.len())
        {
            return Err(Error::InvalidDataset(format!(
                "label {} of image {i} is out of range for {} classes",
                self.labels[i],
                self.class_names.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(height, width)` shared by every image.
    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1])
    }

    /// Number of images per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }

    /// The same images in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.subset(&idx)
    }
}

fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

/// Pixel value in `[0, 1]` to a byte, rounding half up.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn from_byte(b: u8) -> f64 {
    f64::from(b) / 255.0
}

pub fn encode_ppds(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let (h, w) = ds.image_size();
    let mut out = Vec::with_capacity(24 + ds.len() * (4 + h * w * 3) + 4);
    out.extend_from_slice(PPDS_MAGIC);
    for v in [
        PPDS_VERSION,
        ds.len() as u32,
        ds.num_classes() as u32,
        h as u32,
        w as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        out.extend_from_slice(&(label as u32).to_le_bytes());
        out.extend(img.data().iter().map(|&v| to_byte(v)));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_ppds(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != PPDS_MAGIC {
        return Err(Error::parse(0, "bad magic, expected PPDS"));
    }
    let version = r.u32("version")?;
    if version != PPDS_VERSION {
        return Err(Error::parse(
            4,
            format!("unsupported ppds version {version}"),
        ));
    }
    let n = r.u32("image count")? as usize;
    let k = r.u32("class count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if n == 0 || k == 0 || h == 0 || w == 0 {
        return Err(Error::parse(
            8,
            "image count, class count and extents must be positive",
        ));
    }
    let record = 4 + h * w * 3;
    let expected = 24 + n * record + 4;
    if bytes.len() != expected {
        return Err(Error::parse(
            bytes.len().min(expected),
            format!(
                "declared payload needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let label = r.u32("label")? as usize;
        if label >= k {
            return Err(Error::parse(
                at,
                format!("label {label} out of range for {k} classes"),
            ));
        }
        let px = r.take(h * w * 3, "pixels")?;
        images.push(Tensor::new(
            vec![h, w, 3],
            px.iter().map(|&b| from_byte(b)).collect(),
        )?);
        labels.push(label);
    }
    let crc_at = r.pos;
    let stored = r.u32("checksum")?;
    if crc32fast::hash(&bytes[..crc_at]) != stored {
        return Err(Error::parse(crc_at, "checksum mismatch"));
    }
    Dataset::new(images, labels, default_class_names(k), Split::Train)
}

pub fn write_ppds(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppds(ds)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Ppds,
    PpmTree,
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let path = path.as_ref();
    match format {
        DatasetFormat::Ppds => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_ppds(&bytes)
        }
        DatasetFormat::PpmTree => load_ppm_tree(path),
    }
}

/// One subdirectory per class (sorted by name), each holding `.ppm` files
/// (also sorted by name).
fn load_ppm_tree(root: &Path) -> Result<Dataset> {
    let mut classes: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (k, name) in classes.iter().enumerate() {
        let dir = root.join(name);
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        for f in files {
            images.push(read_ppm(&f)?);
            labels.push(k);
        }
    }
    Dataset::new(images, labels, classes, Split::Train)
}

/// Binary P6 encoding with maxval 255.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::InvalidShape(format!(
            "PPM needs an H x W x 3 image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::parse(0, "not a binary PPM (missing P6)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(pos, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[i] = text
            .parse()
            .map_err(|_| Error::parse(start, format!("{name} out of range")))?;
        if i == 0 && fields[0] == 0 || i == 1 && fields[1] == 0 {
            return Err(Error::parse(start, format!("{name} must be positive")));
        }
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(pos, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let need = w * h * 3;
    let have = bytes.len() - pos;
    if have != need {
        return Err(Error::parse(
            pos + have.min(need),
            format!("pixel payload has {have} bytes, header declares {need}"),
        ));
    }
    let scale = maxval as f64;
    let data = bytes[pos..]
        .iter()
        .map(|&b| {
            if maxval == 255 {
                from_byte(b)
            } else {
                (f64::from(b) / scale).min(1.0)
            }
        })
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Offline augmentation transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    /// Mirror left to right.
    Flip,
    /// Rotation by a uniform angle in [−15°, 15°], nearest-neighbour
    /// resampling, edge padding.
    Rotate,
    /// Random crop of 7/8 of each extent, rescaled back bilinearly.
    Crop,
}

impl std::str::FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip" => Ok(AugmentOp::Flip),
            "rotate" => Ok(AugmentOp::Rotate),
            "crop" => Ok(AugmentOp::Crop),
            other => Err(Error::InvalidArgument(format!(
                "unknown augmentation {other:?}"
            ))),
        }
    }
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let i = (y * w + x) * c;
            out.extend_from_slice(&src[i..i + c]);
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

pub fn rotate(img: &Tensor, degrees: f64) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse rotation maps the output pixel back into the source
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            let sy = (sy.round().max(0.0) as usize).min(h - 1);
            let sx = (sx.round().max(0.0) as usize).min(w - 1);
            let i = (sy * w + sx) * c;
            out.extend_from_slice(&src[i..i + c]);
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Bilinear resize of an `H × W × C` image with corner-aligned sampling.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let coord = |i: usize, out: usize, src: usize| -> f64 {
        if out <= 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (out - 1) as f64
        }
    };
    let src = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let fy = coord(y, out_h, h);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..out_w {
            let fx = coord(x, out_w, w);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out).expect("resized shape")
}

pub fn crop(img: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    img.window3(top, left, height, width)
}

fn random_crop(img: &Tensor, rng: &mut impl Rng) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (ch, cw) = ((h * 7 / 8).max(1), (w * 7 / 8).max(1));
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    let window = crop(img, top, left, ch, cw).expect("crop fits");
    resize_bilinear(&window, h, w)
}

/// Appends `copies` augmented variants of every image. Each variant applies
/// one transform drawn from `ops`; originals are left untouched at the front.
pub fn augment_offline(
    ds: &Dataset,
    ops: &[AugmentOp],
    copies: usize,
    seed: u64,
) -> Result<Dataset> {
    if copies > 0 && ops.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one augmentation op is required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        for _ in 0..copies {
            let op = ops[rng.gen_range(0..ops.len())];
            let aug = match op {
                AugmentOp::Flip => flip_horizontal(img),
                AugmentOp::Rotate => rotate(img, rng.gen_range(-15.0..=15.0)),
                AugmentOp::Crop => random_crop(img, &mut rng),
            };
            out.images.push(aug);
            out.labels.push(label);
        }
    }
    Ok(out)
}
