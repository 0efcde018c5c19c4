//! On-disk formats: FCDM rasters, 8-bit images, point lists and the benchmark
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fogbench::FogTier;

pub const FCDM_MAGIC: &[u8; 4] = b"FCDM";

/// Encodes an `[H, W]` map as FCDM bytes.
pub fn encode_fcdm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::invalid("encode_fcdm", format!("expected an [H, W] map, got {s:?}"))),
    };
    let h32 = u32::try_from(h).map_err(|_| Error::invalid("encode_fcdm", "height exceeds u32"))?;
    let w32 = u32::try_from(w).map_err(|_| Error::invalid("encode_fcdm", "width exceeds u32"))?;
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(FCDM_MAGIC);
    out.extend_from_slice(&h32.to_le_bytes());
    out.extend_from_slice(&w32.to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_fcdm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != FCDM_MAGIC {
        return Err(Error::format(path, "missing FCDM header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 8 * h * w {
        return Err(Error::format(path, format!("expected {} data bytes for {h}x{w}, found {}", 8 * h * w, body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&[h, w], data)
}

pub fn write_fcdm(path: &Path, map: &Tensor) -> Result<()> {
    write_bytes(path, &encode_fcdm(map)?)
}

pub fn read_fcdm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fcdm(&bytes, path)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rounds `[0, 1]` intensities to the nearest multiple of 1/255.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a `[3, H, W]` image as 8-bit RGB; the format follows the extension
/// (`.png`, `.ppm`).
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::invalid("save_image", format!("expected a [3, H, W] image, got {s:?}"))),
    };
    let d = img.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let k = y as usize * w + x as usize;
        *px = image::Rgb([quantize(d[k]), quantize(d[h * w + k]), quantize(d[2 * h * w + k])]);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads any 8-bit image as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let k = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + k] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// One `x y` pair per line.
pub fn write_points(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let text: String = points.iter().map(|(x, y)| format!("{x} {y}\n")).collect();
    write_bytes(path, text.as_bytes())
}

pub fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) => out.push((x, y)),
            _ => return Err(Error::format(path, format!("line {}: expected `x y`", n + 1))),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub tier: FogTier,
    pub beta: f64,
    /// Gray airlight shared by the three channels.
    pub a: f64,
    pub image: PathBuf,
    pub density: PathBuf,
    pub t: PathBuf,
}

impl ManifestEntry {
    /// Split name taken from the id prefix (`train-0007` → `train`).
    pub fn split(&self) -> &str {
        self.id.split('-').next().unwrap_or("")
    }
}

/// Writes entries with paths relative to the manifest's directory.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut text = String::from("# id tier beta A image density t\n");
    for e in entries {
        text.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            e.id,
            e.tier.name(),
            e.beta,
            e.a,
            rel(&e.image),
            rel(&e.density),
            rel(&e.t)
        ));
    }
    write_bytes(path, text.as_bytes())
}

/// Reads a manifest, resolving relative paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad(&format!("expected 7 fields, found {}", f.len())));
        }
        let tier = FogTier::parse(f[1]).ok_or_else(|| bad(&format!("unknown tier `{}`", f[1])))?;
        let beta = f[2].parse().map_err(|_| bad("invalid beta"))?;
        let a = f[3].parse().map_err(|_| bad("invalid A"))?;
        out.push(ManifestEntry {
            id: f[0].to_string(),
            tier,
            beta,
            a,
            image: base.join(f[4]),
            density: base.join(f[5]),
            t: base.join(f[6]),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn fcdm_layout_and_round_trip() {
        let map = Tensor::new(&[2, 3], vec![0.0, 1.5, -2.0, 1e-300, f64::MAX, 0.1]).unwrap();
        let bytes = encode_fcdm(&map).unwrap();
        assert_eq!(&bytes[..4], b"FCDM");
        assert_eq!(&bytes[4..12], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &0.0f64.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 48);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fcdm");
        write_fcdm(&p, &map).unwrap();
        let back = read_fcdm(&p).unwrap();
        assert_eq!(back, map);
        let p2 = dir.path().join("m2.fcdm");
        write_fcdm(&p2, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn fcdm_rejects_bad_input() {
        let p = Path::new("x.fcdm");
        assert!(decode_fcdm(b"FCDX\0\0\0\0\0\0\0\0", p).is_err());
        let mut bytes = encode_fcdm(&Tensor::zeros(&[2, 2])).unwrap();
        bytes.pop();
        assert!(matches!(decode_fcdm(&bytes, p), Err(Error::Format { .. })));
        assert!(encode_fcdm(&Tensor::zeros(&[3, 2, 2])).is_err());
        let err = read_fcdm(Path::new("/nonexistent/dir/a.fcdm")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/a.fcdm"));
    }

    #[test]
    fn image_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 5 * 4).map(|k| ((k * 37) % 256) as f64 / 255.0).collect();
        let img = Tensor::new(&[3, 5, 4], data).unwrap();
        for ext in ["png", "ppm"] {
            let p = dir.path().join(format!("a.{ext}"));
            save_image(&p, &img).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.shape(), &[3, 5, 4]);
            assert!(back.max_abs_diff(&img) < 1e-15);
        }
        assert!(load_image(&dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn points_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![(1.25, 3.5), (0.0, 63.999)];
        let p = dir.path().join("p.txt");
        write_points(&p, &pts).unwrap();
        assert_eq!(read_points(&p).unwrap(), pts);
        write_points(&p, &[]).unwrap();
        assert!(read_points(&p).unwrap().is_empty());

        let entry = ManifestEntry {
            id: "train-0007".into(),
            tier: FogTier::Severe,
            beta: 2.0,
            a: 0.8125,
            image: dir.path().join("items/train-0007.severe.png"),
            density: dir.path().join("scenes/train-0007.density.fcdm"),
            t: dir.path().join("items/train-0007.severe.t.fcdm"),
        };
        let m = dir.path().join("manifest.txt");
        write_manifest(&m, std::slice::from_ref(&entry)).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        assert!(text.contains("train-0007 severe 2 0.8125 items/train-0007.severe.png"));
        let back = read_manifest(&m).unwrap();
        assert_eq!(back, vec![entry]);
        assert_eq!(back[0].split(), "train");

        fs::write(&m, "a none 0 0.8 x y\n").unwrap();
        assert!(read_manifest(&m).unwrap_err().to_string().contains("line 1"));
    }

    proptest! {
        #[test]
        fn fcdm_round_trips_any_values(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f64> = (0..h * w).map(|k| f64::from_bits(seed.wrapping_mul(k as u64 + 1) >> 2)).collect();
            let map = Tensor::new(&[h, w], data).unwrap();
            let bytes = encode_fcdm(&map).unwrap();
            let back = decode_fcdm(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(encode_fcdm(&back).unwrap(), bytes);
        }
    }
}
