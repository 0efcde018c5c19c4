//! FCKP checkpoints: config snapshot, named parameter blobs, training step and
//! RNG state.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::write_bytes;
use crate::model::Model;

pub const FCKP_MAGIC: &[u8; 4] = b"FCKP";
pub const FCKP_VERSION: u32 = 1;
const STEP_BLOB: &str = "__step";
const RNG_BLOB: &str = "__rng";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub step: u64,
    pub rng: Option<ChaCha8Rng>,
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<f64> {
    let seed = rng.get_seed();
    let pos = rng.get_word_pos();
    let mut words: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    words.push(pos as u64);
    words.push((pos >> 64) as u64);
    words.push(rng.get_stream());
    words.into_iter().map(f64::from_bits).collect()
}

fn rng_from_words(words: &[f64]) -> Option<ChaCha8Rng> {
    use rand::SeedableRng;
    let w: Vec<u64> = words.iter().map(|v| v.to_bits()).collect();
    if w.len() != 7 {
        return None;
    }
    let mut seed = [0u8; 32];
    for (k, v) in w[..4].iter().enumerate() {
        seed[8 * k..8 * k + 8].copy_from_slice(&v.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[6]);
    rng.set_word_pos(w[4] as u128 | ((w[5] as u128) << 64));
    Some(rng)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("checkpoint", "length exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, rng: Option<&ChaCha8Rng>) -> Self {
        let store = &model.store;
        Self {
            config: model.config().clone(),
            params: store.ids().map(|id| (store.name(id).to_string(), store.tensor(id).clone().with_requires_grad(false))).collect(),
            step,
            rng: rng.cloned(),
        }
    }

    /// Rebuilds the model from the config and overwrites every parameter.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config)?;
        if model.store.len() != self.params.len() {
            return Err(Error::invalid(
                "checkpoint",
                format!("model has {} parameters, checkpoint {}", model.store.len(), self.params.len()),
            ));
        }
        for (name, t) in &self.params {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::invalid("checkpoint", format!("unknown parameter `{name}`")))?;
            if model.store.tensor(id).shape() != t.shape() {
                return Err(Error::shape("checkpoint", model.store.tensor(id).shape(), t.shape()));
            }
            model.store.set(id, t.data())?;
        }
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(FCKP_MAGIC);
        out.extend_from_slice(&FCKP_VERSION.to_le_bytes());
        let text = self.config.to_text();
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        for (name, t) in &self.params {
            if name.starts_with("__") {
                return Err(Error::invalid("checkpoint", format!("reserved parameter name `{name}`")));
            }
            put_blob(&mut out, name, t.shape(), t.data())?;
        }
        put_blob(&mut out, STEP_BLOB, &[1], &[f64::from_bits(self.step)])?;
        if let Some(rng) = &self.rng {
            put_blob(&mut out, RNG_BLOB, &[7], &rng_words(rng))?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != FCKP_MAGIC {
            return Err(Error::format(path, "missing FCKP header"));
        }
        let version = r.u32()?;
        if version != FCKP_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        let config = ModelConfig::from_text(text).map_err(|e| Error::format(path, e.to_string()))?;
        let mut params = Vec::new();
        let (mut step, mut rng) = (None, None);
        while r.pos < bytes.len() {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(8 * len)?;
            let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            match name.as_str() {
                STEP_BLOB if len == 1 => step = Some(data[0].to_bits()),
                RNG_BLOB => rng = Some(rng_from_words(&data).ok_or_else(|| Error::format(path, "malformed RNG state"))?),
                _ => params.push((name, Tensor::new(&shape, data).map_err(|e| Error::format(path, e.to_string()))?)),
            }
        }
        Ok(Self {
            config,
            params,
            step: step.ok_or_else(|| Error::format(path, "missing training step"))?,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::config::Variant;

    #[test]
    fn layout_starts_with_magic_version_and_config() {
        let model = Model::new(&ModelConfig::default()).unwrap();
        let bytes = Checkpoint::from_model(&model, 3, None).encode().unwrap();
        assert_eq!(&bytes[..4], b"FCKP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + n], ModelConfig::default().to_text().as_bytes());
    }

    #[test]
    fn save_load_save_is_byte_identical_and_restores_outputs() {
        let cfg = ModelConfig {
            variant: Variant::NoWgcn,
            seed: 4,
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: f64 = rng.gen();
        let ck = Checkpoint::from_model(&model, 1234, Some(&rng));
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.fckp"), dir.path().join("b.fckp"));
        ck.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back, ck);
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let mut r2 = back.rng.clone().unwrap();
        assert_eq!(r2.gen::<u64>(), rng.gen::<u64>());
        let img = Tensor::full(&[3, 64, 64], 0.4);
        assert_eq!(back.to_model().unwrap().predict(&img).unwrap(), model.predict(&img).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected_with_the_path() {
        let model = Model::new(&ModelConfig::default()).unwrap();
        let bytes = Checkpoint::from_model(&model, 0, None).encode().unwrap();
        let p = Path::new("/tmp/x.fckp");
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3], p).unwrap_err();
        assert!(err.to_string().contains("/tmp/x.fckp") && err.to_string().contains("truncated"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::decode(&bad, p).is_err());
        assert!(Checkpoint::decode(b"NOPE", p).is_err());

        let mut ck = Checkpoint::from_model(&model, 0, None);
        ck.params.pop();
        assert!(ck.to_model().is_err());
    }
}
