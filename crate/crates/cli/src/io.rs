//! PNG images, raw tensors, CSV tables and clip directories.
//!
//! Raw tensor layout, little-endian:
//!
//! ```text
//! magic    8 bytes  "DCLKTNSR"
//! version  u32      1
//! dtype    u8       1 = f64
//! ndim     u32
//! dims     ndim x u64
//! data     prod(dims) x f64
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dualcloak_core::model::SyntheticClip;
use dualcloak_core::optim::{AdamW, AdamWConfig};
use dualcloak_core::Tensor;
use serde::{Deserialize, Serialize};

pub const TENSOR_MAGIC: &[u8; 8] = b"DCLKTNSR";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

/// Read an 8-bit PNG as a `[3, H, W]` tensor in `[0, 1]`. Gray and alpha
/// channels are expanded or dropped; no gamma or ICC handling.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().with_context(|| format!("decoding {}", path.display()))?;
    let mut buf = vec![0; reader.output_buffer_size().context("image too large")?];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => bail!("{}: unsupported color type {other:?}", path.display()),
    };
    let px = &buf[..info.buffer_size()];
    Ok(Tensor::from_fn(vec![3, h, w], |k| {
        let (c, p) = (k / (h * w), k % (h * w));
        let src = if channels >= 3 { c } else { 0 };
        px[p * channels + src] as f64 / 255.0
    }))
}

/// Round-to-nearest 8-bit quantization of a `[3, H, W]` image.
pub fn quantize(x: &Tensor) -> Vec<u8> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut out = vec![0u8; 3 * h * w];
    for (k, v) in x.data().iter().enumerate() {
        let (c, p) = (k / (h * w), k % (h * w));
        out[p * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out
}

pub fn write_png(path: &Path, x: &Tensor) -> Result<()> {
    ensure!(x.ndim() == 3 && x.shape()[0] == 3, "PNG output needs a [3, H, W] image, got {:?}", x.shape());
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), x.shape()[2] as u32, x.shape()[1] as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&quantize(x))?;
    w.finish()?;
    Ok(())
}

pub fn encode_tensor(t: &Tensor, w: &mut impl Write) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F64])?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn decode_tensor(r: &mut impl Read) -> Result<Tensor> {
    let t = decode_one(r)?;
    let mut extra = [0u8; 1];
    ensure!(r.read(&mut extra)? == 0, "trailing bytes after tensor payload");
    Ok(t)
}

fn decode_one(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).context("truncated tensor header")?;
    ensure!(&magic == TENSOR_MAGIC, "not a raw tensor file (bad magic)");
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    ensure!(version == TENSOR_VERSION, "tensor format version {version} is not supported");
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    ensure!(dtype[0] == DTYPE_F64, "tensor dtype code {} is not supported", dtype[0]);
    r.read_exact(&mut b4)?;
    let ndim = u32::from_le_bytes(b4) as usize;
    ensure!((1..=8).contains(&ndim), "implausible tensor rank {ndim}");
    let mut shape = Vec::with_capacity(ndim);
    let mut b8 = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut b8)?;
        shape.push(usize::try_from(u64::from_le_bytes(b8))?);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= 1 << 28);
    let n = n.with_context(|| format!("tensor of shape {shape:?} is too large"))?;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).context("truncated tensor payload")?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    encode_tensor(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    decode_tensor(&mut BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

pub const OPTIMIZER_MAGIC: &[u8; 8] = b"DCLKOPTM";

/// AdamW state: magic, step u64, lr, beta1, beta2, eps, weight decay as f64,
/// slot count u32, then every first moment and every second moment as raw
/// tensors.
pub fn write_optimizer(path: &Path, opt: &AdamW) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    w.write_all(OPTIMIZER_MAGIC)?;
    w.write_all(&opt.step.to_le_bytes())?;
    let c = &opt.config;
    for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(opt.m.len() as u32).to_le_bytes())?;
    for t in opt.m.iter().chain(&opt.v) {
        encode_tensor(t, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_optimizer(path: &Path) -> Result<AdamW> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    ensure!(&magic == OPTIMIZER_MAGIC, "{}: not an optimizer state file", path.display());
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let step = u64::from_le_bytes(b8);
    let mut f = [0.0; 5];
    for v in f.iter_mut() {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    ensure!(n <= 4096, "implausible optimizer slot count {n}");
    // tensors are length-prefixed only by shape, so decode them one at a time
    let mut tensors = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        tensors.push(decode_one(&mut r)?);
    }
    ensure!(r.is_empty(), "trailing bytes after optimizer state");
    let v = tensors.split_off(n);
    Ok(AdamW { config: AdamWConfig { lr: f[0], beta1: f[1], beta2: f[2], eps: f[3], weight_decay: f[4] }, step, m: tensors, v })
}

/// A header row plus string cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_csv(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r.records().map(|rec| Ok(rec?.iter().map(String::from).collect())).collect::<Result<Vec<Vec<String>>>>()?;
    Ok(Table { header, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipIndex {
    pub frames: Vec<String>,
    pub label: usize,
    pub velocity: Option<(i32, i32)>,
}

pub const CLIP_INDEX: &str = "index.json";

/// One PNG per frame plus `index.json`.
pub fn write_clip(dir: &Path, clip: &SyntheticClip) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    let mut paths = Vec::new();
    for k in 0..clip.num_frames() {
        let name = format!("frame_{k:03}.png");
        let p = dir.join(&name);
        write_png(&p, &clip.frame(k))?;
        names.push(name);
        paths.push(p);
    }
    let index = ClipIndex { frames: names, label: clip.label, velocity: clip.velocity };
    let p = dir.join(CLIP_INDEX);
    fs::write(&p, serde_json::to_string_pretty(&index)? + "\n")?;
    paths.push(p);
    Ok(paths)
}

pub fn read_clip(dir: &Path) -> Result<SyntheticClip> {
    let index: ClipIndex = serde_json::from_str(&fs::read_to_string(dir.join(CLIP_INDEX))?)
        .with_context(|| format!("parsing {}", dir.join(CLIP_INDEX).display()))?;
    ensure!(!index.frames.is_empty(), "{}: clip has no frames", dir.display());
    let frames = index.frames.iter().map(|f| read_png(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    Ok(SyntheticClip { frames: Tensor::stack(&frames)?, label: index.label, velocity: index.velocity })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let x = Tensor::from_fn(vec![3, 5, 7], |k| ((k * 37) % 256) as f64 / 255.0);
        write_png(&p, &x).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(quantize(&back), quantize(&x));
        assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn tensor_round_trip_and_rejects() {
        let t = Tensor::from_fn(vec![2, 3, 4], |k| (k as f64).sin() * 1e-7);
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf).unwrap();
        let back = decode_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(decode_tensor(&mut bad.as_slice()).unwrap_err().to_string().contains("magic"));
        let mut bad = buf.clone();
        bad[8] = 2;
        assert!(decode_tensor(&mut bad.as_slice()).unwrap_err().to_string().contains("version"));
        assert!(decode_tensor(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn optimizer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("opt.state");
        let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, ..Default::default() }, &[vec![2, 3], vec![4]]);
        opt.step = 17;
        opt.m[0].data_mut()[1] = 0.25;
        opt.v[1].data_mut()[3] = 1e-9;
        write_optimizer(&p, &opt).unwrap();
        let back = read_optimizer(&p).unwrap();
        assert_eq!((back.step, back.config.lr), (17, 3e-3));
        assert_eq!((back.m, back.v), (opt.m, opt.v));
    }

    #[test]
    fn csv_quoting_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let mut t = Table::new(&["name", "value"]);
        t.push(vec!["a, \"quoted\" name".into(), fmt_f64(0.1)]);
        t.push(vec!["line\nbreak".into(), fmt_f64(-2.5e-300)]);
        write_csv(&p, &t).unwrap();
        assert_eq!(read_csv(&p).unwrap(), t);
    }

    #[test]
    fn clip_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = SyntheticClip {
            frames: Tensor::from_fn(vec![3, 3, 4, 4], |k| ((k * 11) % 256) as f64 / 255.0),
            label: 2,
            velocity: Some((1, -1)),
        };
        write_clip(dir.path(), &clip).unwrap();
        assert_eq!(read_clip(dir.path()).unwrap(), clip);
    }
}
