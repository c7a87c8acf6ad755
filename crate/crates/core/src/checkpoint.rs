//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic, format version, element width, config
//! digest, seed, parameter tensors with freeze state, per-stage mask logits
//! plus bit-packed thresholded masks, random-stream positions, optional
//! optimizer moments, and two small key/value maps for counters and scalar
//! metrics. Tensor elements are written as raw bit patterns, so a
//! round-trip is exact; files written at another element width or format
//! version are rejected, never reinterpreted.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskSet};
use crate::params::ParamStore;
use crate::rng::StreamState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MKLB";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct StageRecord<E> {
    pub mask: MaskSet<E>,
    pub bits: BinaryMask,
    pub steps_run: u64,
}

#[derive(Debug, Clone)]
pub struct OptimizerSnapshot<E> {
    pub step_count: u64,
    /// (name, first moment, second moment), insertion-ordered.
    pub moments: Vec<(String, Tensor<E>, Tensor<E>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<E> {
    pub config_digest: [u8; 32],
    pub seed: u64,
    pub params: ParamStore<E>,
    pub stages: Vec<StageRecord<E>>,
    pub rng_states: Vec<StreamState>,
    pub optimizer: Option<OptimizerSnapshot<E>>,
    pub counters: BTreeMap<String, u64>,
    pub metrics: BTreeMap<String, f64>,
}

impl<E: Element> Checkpoint<E> {
    pub fn new(config_digest: [u8; 32], seed: u64, params: ParamStore<E>) -> Self {
        Checkpoint {
            config_digest,
            seed,
            params,
            stages: Vec::new(),
            rng_states: Vec::new(),
            optimizer: None,
            counters: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord<E>> {
        self.stages.iter().find(|s| s.mask.stage == name)
    }

    pub fn verify_config_digest(&self, digest: [u8; 32]) -> Result<()> {
        if self.config_digest != digest {
            return Err(Error::Checkpoint(
                "checkpoint was produced under a different configuration".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u8(E::PRECISION.bits())?;
        w.write_all(&self.config_digest)?;
        w.write_u64::<LittleEndian>(self.seed)?;

        // parameters
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in self.params.iter() {
            write_string(&mut w, &p.name)?;
            w.write_u32::<LittleEndian>(p.layer as u32)?;
            w.write_u8(p.frozen as u8)?;
            match &p.frozen_elems {
                Some(mask) => {
                    w.write_u8(1)?;
                    write_bits(&mut w, mask)?;
                }
                None => w.write_u8(0)?,
            }
            write_tensor(&mut w, &p.tensor)?;
        }

        // stages
        w.write_u32::<LittleEndian>(self.stages.len() as u32)?;
        for stage in &self.stages {
            write_string(&mut w, &stage.mask.stage)?;
            w.write_f64::<LittleEndian>(stage.mask.temperature)?;
            w.write_u64::<LittleEndian>(stage.steps_run)?;
            let excluded: Vec<&String> = {
                let mut v: Vec<&String> = stage.mask.excluded().iter().collect();
                v.sort();
                v
            };
            w.write_u32::<LittleEndian>(excluded.len() as u32)?;
            for name in excluded {
                write_string(&mut w, name)?;
            }
            let logit_entries: Vec<_> = stage.mask.entries().collect();
            w.write_u32::<LittleEndian>(logit_entries.len() as u32)?;
            for (name, layer, logits) in &logit_entries {
                write_string(&mut w, name)?;
                w.write_u32::<LittleEndian>(*layer as u32)?;
                let fixed = stage.mask.fixed_bits(name);
                match fixed {
                    Some(bits) => {
                        w.write_u8(1)?;
                        write_bits(&mut w, bits)?;
                    }
                    None => w.write_u8(0)?,
                }
                write_tensor(&mut w, logits)?;
            }
            let bit_entries: Vec<_> = stage.bits.entries().collect();
            w.write_u32::<LittleEndian>(bit_entries.len() as u32)?;
            for (name, layer, bits) in &bit_entries {
                write_string(&mut w, name)?;
                w.write_u32::<LittleEndian>(*layer as u32)?;
                write_bits(&mut w, bits)?;
            }
        }

        // random streams
        w.write_u32::<LittleEndian>(self.rng_states.len() as u32)?;
        for s in &self.rng_states {
            w.write_u8(s.kind)?;
            w.write_u64::<LittleEndian>(s.salt)?;
            w.write_u64::<LittleEndian>(s.word_pos_hi)?;
            w.write_u64::<LittleEndian>(s.word_pos_lo)?;
        }

        // optimizer
        match &self.optimizer {
            Some(opt) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(opt.step_count)?;
                w.write_u32::<LittleEndian>(opt.moments.len() as u32)?;
                for (name, m, v) in &opt.moments {
                    write_string(&mut w, name)?;
                    write_tensor(&mut w, m)?;
                    write_tensor(&mut w, v)?;
                }
            }
            None => w.write_u8(0)?,
        }

        // counters and metrics
        w.write_u32::<LittleEndian>(self.counters.len() as u32)?;
        for (k, v) in &self.counters {
            write_string(&mut w, k)?;
            w.write_u64::<LittleEndian>(*v)?;
        }
        w.write_u32::<LittleEndian>(self.metrics.len() as u32)?;
        for (k, v) in &self.metrics {
            write_string(&mut w, k)?;
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint (bad magic {:02x?})",
                path.display(),
                magic
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} is not supported (expected {})",
                path.display(),
                version,
                FORMAT_VERSION
            )));
        }
        let bits = r.read_u8()?;
        if bits != E::PRECISION.bits() {
            return Err(Error::Checkpoint(format!(
                "{}: stored at {bits}-bit precision, asked to load as {}-bit",
                path.display(),
                E::PRECISION.bits()
            )));
        }
        let mut config_digest = [0u8; 32];
        r.read_exact(&mut config_digest)?;
        let seed = r.read_u64::<LittleEndian>()?;

        let n_params = r.read_u32::<LittleEndian>()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name = read_string(&mut r)?;
            let layer = r.read_u32::<LittleEndian>()? as usize;
            let frozen = r.read_u8()? != 0;
            let frozen_elems = if r.read_u8()? != 0 {
                Some(read_bits(&mut r)?)
            } else {
                None
            };
            let tensor = read_tensor::<E>(&mut r)?;
            params.insert(name.clone(), layer, tensor)?;
            let p = params.get_mut(&name).expect("just inserted");
            p.frozen = frozen;
            p.frozen_elems = frozen_elems;
        }

        let n_stages = r.read_u32::<LittleEndian>()? as usize;
        let mut stages = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            let stage_name = read_string(&mut r)?;
            let temperature = r.read_f64::<LittleEndian>()?;
            let steps_run = r.read_u64::<LittleEndian>()?;
            let n_excluded = r.read_u32::<LittleEndian>()? as usize;
            let mut excluded = HashSet::new();
            for _ in 0..n_excluded {
                excluded.insert(read_string(&mut r)?);
            }
            let n_logits = r.read_u32::<LittleEndian>()? as usize;
            let mut entries = Vec::with_capacity(n_logits);
            let mut fixed = HashMap::new();
            for _ in 0..n_logits {
                let name = read_string(&mut r)?;
                let layer = r.read_u32::<LittleEndian>()? as usize;
                if r.read_u8()? != 0 {
                    fixed.insert(name.clone(), read_bits(&mut r)?);
                }
                let logits = read_tensor::<E>(&mut r)?;
                entries.push((name, layer, logits));
            }
            let mask = MaskSet::from_entries(entries, excluded, fixed, temperature, stage_name)?;
            let n_bits = r.read_u32::<LittleEndian>()? as usize;
            let mut bit_entries = Vec::with_capacity(n_bits);
            for _ in 0..n_bits {
                let name = read_string(&mut r)?;
                let layer = r.read_u32::<LittleEndian>()? as usize;
                bit_entries.push((name, layer, read_bits(&mut r)?));
            }
            let bits = BinaryMask::new(bit_entries, mask.stage.clone());
            stages.push(StageRecord { mask, bits, steps_run });
        }

        let n_rng = r.read_u32::<LittleEndian>()? as usize;
        let mut rng_states = Vec::with_capacity(n_rng);
        for _ in 0..n_rng {
            rng_states.push(StreamState {
                kind: r.read_u8()?,
                salt: r.read_u64::<LittleEndian>()?,
                word_pos_hi: r.read_u64::<LittleEndian>()?,
                word_pos_lo: r.read_u64::<LittleEndian>()?,
            });
        }

        let optimizer = if r.read_u8()? != 0 {
            let step_count = r.read_u64::<LittleEndian>()?;
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut moments = Vec::with_capacity(n);
            for _ in 0..n {
                let name = read_string(&mut r)?;
                let m = read_tensor::<E>(&mut r)?;
                let v = read_tensor::<E>(&mut r)?;
                moments.push((name, m, v));
            }
            Some(OptimizerSnapshot { step_count, moments })
        } else {
            None
        };

        let mut counters = BTreeMap::new();
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let k = read_string(&mut r)?;
            counters.insert(k, r.read_u64::<LittleEndian>()?);
        }
        let mut metrics = BTreeMap::new();
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let k = read_string(&mut r)?;
            metrics.insert(k, r.read_f64::<LittleEndian>()?);
        }

        Ok(Checkpoint {
            config_digest,
            seed,
            params,
            stages,
            rng_states,
            optimizer,
            counters,
            metrics,
        })
    }
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8 in name".into()))
}

fn write_tensor<E: Element, W: Write>(w: &mut W, t: &Tensor<E>) -> Result<()> {
    w.write_u8(t.shape().len() as u8)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    match E::PRECISION.bits() {
        32 => {
            for &x in t.data() {
                w.write_u32::<LittleEndian>(x.to_bits_u64() as u32)?;
            }
        }
        _ => {
            for &x in t.data() {
                w.write_u64::<LittleEndian>(x.to_bits_u64())?;
            }
        }
    }
    Ok(())
}

fn read_tensor<E: Element>(r: &mut impl Read) -> Result<Tensor<E>> {
    let rank = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match E::PRECISION.bits() {
        32 => {
            for _ in 0..numel {
                data.push(E::from_bits_u64(r.read_u32::<LittleEndian>()? as u64));
            }
        }
        _ => {
            for _ in 0..numel {
                data.push(E::from_bits_u64(r.read_u64::<LittleEndian>()?));
            }
        }
    }
    Tensor::new(shape, data)
}

/// Bit-packed bools, least significant bit first.
fn write_bits<W: Write>(w: &mut W, bits: &[bool]) -> Result<()> {
    w.write_u64::<LittleEndian>(bits.len() as u64)?;
    let mut byte = 0u8;
    for (i, &b) in bits.iter().enumerate() {
        if b {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            w.write_u8(byte)?;
            byte = 0;
        }
    }
    if bits.len() % 8 != 0 {
        w.write_u8(byte)?;
    }
    Ok(())
}

fn read_bits<R: Read>(r: &mut R) -> Result<Vec<bool>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let n_bytes = len.div_ceil(8);
    let mut bytes = vec![0u8; n_bytes];
    r.read_exact(&mut bytes)?;
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 != 0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedPool, StreamKind};

    fn sample_checkpoint() -> Checkpoint<f32> {
        let pool = SeedPool::new(42);
        let mut rng = pool.stream(StreamKind::WeightsInit, 0);
        let mut params = ParamStore::new();
        params
            .insert(
                "layer0.weight",
                0,
                Tensor::new(vec![3, 5], (0..15).map(|_| rng.uniform_symmetric(1.0) as f32).collect()).unwrap(),
            )
            .unwrap();
        params.insert("layer0.bias", 0, Tensor::zeros(&[5])).unwrap();
        params.get_mut("layer0.weight").unwrap().frozen = true;
        params.get_mut("layer0.bias").unwrap().frozen_elems =
            Some(vec![true, false, true, false, true]);

        let mut mask = MaskSet::init(&params, 0.9, &[], "full").unwrap();
        mask.fix_bits("layer0.bias", vec![true, true, false, false, true]).unwrap();
        let bits = mask.threshold();

        let mut ckpt = Checkpoint::new([7u8; 32], 42, params);
        ckpt.stages.push(StageRecord { mask, bits, steps_run: 123 });
        let mut stream = pool.stream(StreamKind::MaskSample, 1);
        for _ in 0..10 {
            stream.uniform();
        }
        ckpt.rng_states.push(stream.state());
        ckpt.optimizer = Some(OptimizerSnapshot {
            step_count: 9,
            moments: vec![(
                "layer0.weight".into(),
                Tensor::filled(&[3, 5], 0.25f32),
                Tensor::filled(&[3, 5], 1e-3f32),
            )],
        });
        ckpt.counters.insert("weight_steps".into(), 500);
        ckpt.metrics.insert("accuracy/none/all".into(), 0.993);
        ckpt
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.mklb");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded: Checkpoint<f32> = Checkpoint::load(&path).unwrap();

        assert_eq!(loaded.config_digest, ckpt.config_digest);
        assert_eq!(loaded.seed, ckpt.seed);
        assert_eq!(loaded.params.snapshot_bits(), ckpt.params.snapshot_bits());
        let (orig, back) = (ckpt.params.get("layer0.bias").unwrap(), loaded.params.get("layer0.bias").unwrap());
        assert_eq!(orig.frozen_elems, back.frozen_elems);
        assert_eq!(orig.frozen, back.frozen);

        let (s0, l0) = (&ckpt.stages[0], &loaded.stages[0]);
        assert_eq!(s0.steps_run, l0.steps_run);
        assert_eq!(s0.mask.stage, l0.mask.stage);
        assert!(s0
            .mask
            .logits("layer0.weight")
            .unwrap()
            .bitwise_eq(l0.mask.logits("layer0.weight").unwrap()));
        assert_eq!(s0.mask.fixed_bits("layer0.bias"), l0.mask.fixed_bits("layer0.bias"));
        assert_eq!(s0.bits, l0.bits);
        assert_eq!(ckpt.rng_states, loaded.rng_states);
        let (o, lo) = (ckpt.optimizer.as_ref().unwrap(), loaded.optimizer.as_ref().unwrap());
        assert_eq!(o.step_count, lo.step_count);
        assert!(o.moments[0].1.bitwise_eq(&lo.moments[0].1));
        assert_eq!(ckpt.counters, loaded.counters);
        assert_eq!(ckpt.metrics, loaded.metrics);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.mklb");
        sample_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::<f32>::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.mklb");
        sample_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // little-endian version field
        std::fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::<f32>::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn other_precision_is_rejected_not_reinterpreted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.mklb");
        sample_checkpoint().save(&path).unwrap();
        let err = Checkpoint::<f64>::load(&path).unwrap_err();
        assert!(err.to_string().contains("precision"), "{err}");
    }

    #[test]
    fn digest_mismatch_is_detected() {
        let ckpt = sample_checkpoint();
        assert!(ckpt.verify_config_digest([7u8; 32]).is_ok());
        assert!(ckpt.verify_config_digest([8u8; 32]).is_err());
    }

    #[test]
    fn bit_packing_roundtrip() {
        let mut buf = Vec::new();
        let bits: Vec<bool> = (0..37).map(|i| i % 3 == 0).collect();
        write_bits(&mut buf, &bits).unwrap();
        assert_eq!(buf.len(), 8 + 5); // length header + ceil(37/8)
        let back = read_bits(&mut buf.as_slice()).unwrap();
        assert_eq!(back, bits);
    }
}
