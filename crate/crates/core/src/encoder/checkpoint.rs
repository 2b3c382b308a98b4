//! Versioned binary checkpoints.
//!
//! Layout: magic `C2M1`, version byte, length-prefixed UTF-8 config echo,
//! step counter, head class counts, then named parameter tensors as
//! 32-bit little-endian values, optimizer state, and an optional teacher
//! section (EMA parameters, online codebooks, dead counters, frozen flag).
//! Checkpoints contain no timestamps, so identical runs produce identical
//! bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::config::{encoder_config_from_flat, FlatConfig};
use crate::error::{Error, Result};
use crate::targets::online::TeacherState;

use super::adam::AdamState;
use super::params::{EncoderParams, HeadSpec};
use super::EncoderState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C2M1";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct TeacherCheckpoint {
    pub params: EncoderParams<f32>,
    pub clustered_layers: Vec<usize>,
    pub codebook_size: usize,
    pub codebooks: Vec<Array2<f32>>,
    pub dead_counters: Vec<Vec<u32>>,
    pub frozen: bool,
}

impl TeacherCheckpoint {
    pub fn from_state(teacher: &TeacherState<f32>) -> Self {
        Self {
            params: teacher.params.clone(),
            clustered_layers: teacher.clustered_layers.clone(),
            codebook_size: teacher.codebook_size,
            codebooks: teacher.codebooks.clone(),
            dead_counters: teacher.dead_counters.clone(),
            frozen: teacher.frozen,
        }
    }

    pub fn into_state(self) -> TeacherState<f32> {
        TeacherState {
            params: self.params,
            clustered_layers: self.clustered_layers,
            codebook_size: self.codebook_size,
            codebooks: self.codebooks,
            dead_counters: self.dead_counters,
            frozen: self.frozen,
            unmasked_forwards: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Flat config text the run was started with.
    pub config_text: String,
    pub step: u64,
    pub head_class_counts: Vec<usize>,
    pub params: EncoderParams<f32>,
    pub adam: AdamState<f32>,
    pub teacher: Option<TeacherCheckpoint>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> Result<String> {
        Ok(FlatConfig::parse_text(&self.config_text, "<checkpoint>")?.sha256_hex())
    }

    /// Rebuilds an encoder state; the embedded config echo supplies the
    /// architecture.
    pub fn to_encoder_state(&self) -> Result<EncoderState<f32>> {
        let flat = FlatConfig::parse_text(&self.config_text, "<checkpoint>")?;
        let config = encoder_config_from_flat(&flat)?;
        let head_spec = HeadSpec {
            class_counts: self.head_class_counts.clone(),
        };
        let mut state = EncoderState::init(config, head_spec)?;
        check_same_shapes(&state.params, &self.params)?;
        state.params = self.params.clone();
        state.opt = self.adam.clone();
        Ok(state)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        write_bytes(&mut w, self.config_text.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.head_class_counts.len() as u32).to_le_bytes())?;
        for &classes in &self.head_class_counts {
            w.write_all(&(classes as u32).to_le_bytes())?;
        }
        write_params(&mut w, &self.params)?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        write_tensor_list(&mut w, &self.adam.m)?;
        write_tensor_list(&mut w, &self.adam.v)?;
        match &self.teacher {
            None => w.write_all(&[0u8])?,
            Some(teacher) => {
                w.write_all(&[1u8])?;
                write_params(&mut w, &teacher.params)?;
                w.write_all(&(teacher.clustered_layers.len() as u32).to_le_bytes())?;
                for &l in &teacher.clustered_layers {
                    w.write_all(&(l as u32).to_le_bytes())?;
                }
                w.write_all(&(teacher.codebook_size as u32).to_le_bytes())?;
                write_tensor_list(&mut w, &teacher.codebooks)?;
                w.write_all(&(teacher.dead_counters.len() as u32).to_le_bytes())?;
                for counters in &teacher.dead_counters {
                    w.write_all(&(counters.len() as u32).to_le_bytes())?;
                    for &v in counters {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                w.write_all(&[teacher.frozen as u8])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadHeader("not a checkpoint file".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != CHECKPOINT_VERSION {
            return Err(Error::BadHeader(format!(
                "unsupported checkpoint version {}",
                version[0]
            )));
        }
        let config_text = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::BadHeader("config echo is not UTF-8".into()))?;
        let step = read_u64(&mut r)?;
        let n_heads = read_u32(&mut r)? as usize;
        let mut head_class_counts = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            head_class_counts.push(read_u32(&mut r)? as usize);
        }

        let flat = FlatConfig::parse_text(&config_text, "<checkpoint>")?;
        let config = encoder_config_from_flat(&flat)?;
        let head_spec = HeadSpec {
            class_counts: head_class_counts.clone(),
        };
        let template = EncoderParams::<f32>::init(&config, &head_spec);
        let params = read_params(&mut r, &template)?;
        let adam_step = read_u64(&mut r)?;
        let m = read_tensor_list(&mut r)?;
        let v = read_tensor_list(&mut r)?;
        let adam = AdamState {
            step: adam_step,
            m,
            v,
        };

        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let teacher = if flag[0] == 1 {
            let tparams = read_params(&mut r, &template)?;
            let n_layers = read_u32(&mut r)? as usize;
            let mut clustered_layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                clustered_layers.push(read_u32(&mut r)? as usize);
            }
            let codebook_size = read_u32(&mut r)? as usize;
            let codebooks = read_tensor_list(&mut r)?;
            let n_counter_sets = read_u32(&mut r)? as usize;
            let mut dead_counters = Vec::with_capacity(n_counter_sets);
            for _ in 0..n_counter_sets {
                let len = read_u32(&mut r)? as usize;
                let mut counters = Vec::with_capacity(len);
                for _ in 0..len {
                    counters.push(read_u32(&mut r)?);
                }
                dead_counters.push(counters);
            }
            let mut fr = [0u8; 1];
            r.read_exact(&mut fr)?;
            Some(TeacherCheckpoint {
                params: tparams,
                clustered_layers,
                codebook_size,
                codebooks,
                dead_counters,
                frozen: fr[0] == 1,
            })
        } else {
            None
        };

        Ok(Self {
            config_text,
            step,
            head_class_counts,
            params,
            adam,
            teacher,
        })
    }
}

/// SHA-256 of a file's bytes, hex-encoded. Used for provenance records.
pub fn file_sha256<P: AsRef<Path>>(path: P) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn check_same_shapes(a: &EncoderParams<f32>, b: &EncoderParams<f32>) -> Result<()> {
    let at = a.tensors();
    let bt = b.tensors();
    if at.len() != bt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tensors vs {}",
            at.len(),
            bt.len()
        )));
    }
    for ((an, av), (bn, bv)) in at.iter().zip(bt.iter()) {
        if an != bn || av.dim() != bv.dim() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {an} {:?} vs {bn} {:?}",
                av.dim(),
                bv.dim()
            )));
        }
    }
    Ok(())
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_tensor<W: Write>(w: &mut W, name: &str, tensor: &Array2<f32>) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&(tensor.nrows() as u32).to_le_bytes())?;
    w.write_all(&(tensor.ncols() as u32).to_le_bytes())?;
    for &v in tensor.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Array2<f32>)> {
    let mut len16 = [0u8; 2];
    r.read_exact(&mut len16)?;
    let mut name = vec![0u8; u16::from_le_bytes(len16) as usize];
    r.read_exact(&mut name)?;
    let name =
        String::from_utf8(name).map_err(|_| Error::BadHeader("tensor name not UTF-8".into()))?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut vals = vec![0f32; rows * cols];
    let mut buf = [0u8; 4];
    for v in vals.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Ok((
        name,
        Array2::from_shape_vec((rows, cols), vals).expect("read shape"),
    ))
}

fn write_params<W: Write>(w: &mut W, params: &EncoderParams<f32>) -> Result<()> {
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        write_tensor(w, &name, tensor)?;
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R, template: &EncoderParams<f32>) -> Result<EncoderParams<f32>> {
    let count = read_u32(r)? as usize;
    let mut out = template.zeros_like();
    let mut mine = out.tensors_mut();
    if count != mine.len() {
        return Err(Error::BadHeader(format!(
            "checkpoint has {count} tensors, architecture needs {}",
            mine.len()
        )));
    }
    for (name, slot) in mine.iter_mut() {
        let (got_name, tensor) = read_tensor(r)?;
        if got_name != *name {
            return Err(Error::BadHeader(format!(
                "tensor order mismatch: {got_name} vs {name}"
            )));
        }
        if tensor.dim() != slot.dim() {
            return Err(Error::BadHeader(format!(
                "tensor {name}: shape {:?} vs {:?}",
                tensor.dim(),
                slot.dim()
            )));
        }
        **slot = tensor;
    }
    drop(mine);
    Ok(out)
}

fn write_tensor_list<W: Write>(w: &mut W, tensors: &[Array2<f32>]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for tensor in tensors {
        write_tensor(w, "t", tensor)?;
    }
    Ok(())
}

fn read_tensor_list<R: Read>(r: &mut R) -> Result<Vec<Array2<f32>>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(read_tensor(r)?.1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::encoder_config_to_flat;
    use crate::encoder::EncoderConfig;

    fn config_text(config: &EncoderConfig) -> String {
        let mut flat = FlatConfig::new();
        encoder_config_to_flat(config, &mut flat);
        flat.to_text()
    }

    #[test]
    fn roundtrip_without_teacher() {
        let config = EncoderConfig {
            codebook_sizes: vec![8, 8],
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 32,
            max_positions: 64,
            temperature: 0.1,
            quantizer_dropout_prob: 0.25,
            seed: 3,
        };
        let state = EncoderState::<f32>::init(
            config.clone(),
            HeadSpec {
                class_counts: vec![8, 8],
            },
        )
        .unwrap();
        let ckpt = Checkpoint {
            config_text: config_text(&config),
            step: 42,
            head_class_counts: vec![8, 8],
            params: state.params.clone(),
            adam: state.opt.clone(),
            teacher: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.c2m");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 42);
        for ((_, a), (_, b)) in back.params.tensors().iter().zip(state.params.tensors()) {
            assert_eq!(*a, &b);
        }
        let rebuilt = back.to_encoder_state().unwrap();
        assert_eq!(rebuilt.config, config);
        // Saving again produces identical bytes.
        let path2 = dir.path().join("m2.c2m");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn roundtrip_with_teacher() {
        let config = EncoderConfig {
            codebook_sizes: vec![4],
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 16,
            max_positions: 32,
            temperature: 0.1,
            quantizer_dropout_prob: 0.0,
            seed: 6,
        };
        let state = EncoderState::<f32>::init(
            config.clone(),
            HeadSpec {
                class_counts: vec![4],
            },
        )
        .unwrap();
        let mut teacher =
            TeacherState::from_student(&state, vec![1, 2], 3).unwrap();
        teacher.codebooks = vec![
            Array2::from_shape_fn((3, 8), |(r, c)| (r + c) as f32),
            Array2::from_shape_fn((3, 8), |(r, c)| (r * c) as f32),
        ];
        teacher.dead_counters = vec![vec![1, 0, 7], vec![0, 0, 999]];
        teacher.frozen = true;
        let ckpt = Checkpoint {
            config_text: config_text(&config),
            step: 7,
            head_class_counts: vec![4],
            params: state.params.clone(),
            adam: state.opt.clone(),
            teacher: Some(TeacherCheckpoint::from_state(&teacher)),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.c2m");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let t = back.teacher.unwrap();
        assert_eq!(t.clustered_layers, vec![1, 2]);
        assert_eq!(t.codebook_size, 3);
        assert_eq!(t.codebooks, teacher.codebooks);
        assert_eq!(t.dead_counters, teacher.dead_counters);
        assert!(t.frozen);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"XXXX123").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::BadHeader(_))));
    }
}
