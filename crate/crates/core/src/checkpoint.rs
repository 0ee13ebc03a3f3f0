//! Versioned binary checkpoints.
//!
//! Layout: 8-byte ASCII magic `EGRUCKPT`, format version (u32 LE), header
//! length (u64 LE), a UTF-8 JSON header (model config, tensor directory
//! with name/shape/dtype/byte-offset, mask directory, vocabulary content
//! hash, train step), then the payload: tensors as f32 LE row-major in
//! directory order, followed by masks as packed LSB-first bitfields.
//!
//! Saving is deterministic: the header is serialized from plain structs in
//! field order and tensor bytes are copied verbatim, so save→load→save is
//! byte-identical. Masked weight positions are written as exact 0.0.

use std::fs;
use std::path::Path;

use crate::lm::{LmConfig, LmModel};
use crate::prune::PruneMasks;
use crate::train::OptimState;

pub const MAGIC: &[u8; 8] = b"EGRUCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct MaskEntry {
    slot: usize,
    name: String,
    /// Byte offset into the payload.
    offset: u64,
    bits: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: LmConfig,
    tensors: Vec<TensorEntry>,
    masks: Vec<MaskEntry>,
    vocab_hash: u64,
    train_step: u64,
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LmModel<f32>,
    pub opt: OptimState,
    pub masks: PruneMasks,
    pub vocab_hash: u64,
}

fn pack_bits(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &b) in mask.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], bits: usize) -> Vec<bool> {
    (0..bits).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn save_checkpoint(
    path: &Path,
    model: &LmModel<f32>,
    opt: &OptimState,
    masks: &PruneMasks,
    vocab_hash: u64,
) -> Result<(), CkptError> {
    let metas = model.cfg.slot_metas();
    let slots = model.slots();
    assert_eq!(opt.m.len(), slots.len(), "optimizer state must match the model");

    let mut payload: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push_tensor = |payload: &mut Vec<u8>,
                           name: String,
                           shape: Vec<usize>,
                           data: &[f32],
                           mask: Option<&Vec<bool>>| {
        let offset = payload.len() as u64;
        for (i, &v) in data.iter().enumerate() {
            let v = match mask {
                Some(m) if !m[i] => 0.0f32,
                _ => v,
            };
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry { name, shape, dtype: "f32".into(), offset });
    };

    for (s, meta) in metas.iter().enumerate() {
        let mask = masks.per_slot[s].as_ref();
        push_tensor(&mut payload, meta.name.clone(), vec![meta.rows, meta.cols], slots[s], mask);
    }
    for (prefix, moments) in [("opt.m", &opt.m), ("opt.v", &opt.v)] {
        for (s, meta) in metas.iter().enumerate() {
            push_tensor(
                &mut payload,
                format!("{prefix}.{}", meta.name),
                vec![meta.rows, meta.cols],
                &moments[s],
                None,
            );
        }
    }

    let mut mask_dir = Vec::new();
    for (s, meta) in metas.iter().enumerate() {
        if let Some(m) = &masks.per_slot[s] {
            let offset = payload.len() as u64;
            payload.extend_from_slice(&pack_bits(m));
            mask_dir.push(MaskEntry {
                slot: s,
                name: meta.name.clone(),
                offset,
                bits: m.len() as u64,
            });
        }
    }

    let header = Header {
        config: model.cfg.clone(),
        tensors,
        masks: mask_dir,
        vocab_hash,
        train_step: opt.step,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CkptError::Corrupt(format!("header: {e}")))?;

    let mut out = Vec::with_capacity(20 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|source| CkptError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CkptError> {
    let bytes = fs::read(path)
        .map_err(|source| CkptError::Io { path: path.display().to_string(), source })?;
    let corrupt = |d: &str| CkptError::Corrupt(d.to_string());

    if bytes.len() < 20 {
        return Err(corrupt("file shorter than the fixed preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CkptError::Version { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20 + header_len;
    if bytes.len() < payload_start {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| CkptError::Corrupt(format!("header does not parse: {e}")))?;
    let payload = &bytes[payload_start..];

    header.config.validate().map_err(|e| CkptError::Corrupt(format!("stored config: {e}")))?;
    let metas = header.config.slot_metas();
    if header.tensors.len() != 3 * metas.len() {
        return Err(corrupt("tensor directory does not match the stored config"));
    }

    let read_tensor = |entry: &TensorEntry, meta: &crate::lm::SlotMeta| -> Result<Vec<f32>, CkptError> {
        if entry.shape != vec![meta.rows, meta.cols] || entry.dtype != "f32" {
            return Err(corrupt(&format!("tensor {} has unexpected shape or dtype", entry.name)));
        }
        let start = entry.offset as usize;
        let end = start + meta.len() * 4;
        let slice = payload
            .get(start..end)
            .ok_or_else(|| corrupt(&format!("truncated payload at tensor {}", entry.name)))?;
        Ok(slice.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    };

    let mut model = LmModel::<f32>::zeros(&header.config);
    let mut opt = OptimState {
        step: header.train_step,
        m: Vec::with_capacity(metas.len()),
        v: Vec::with_capacity(metas.len()),
    };
    {
        let mut slots = model.slots_mut();
        for (s, meta) in metas.iter().enumerate() {
            if header.tensors[s].name != meta.name {
                return Err(corrupt(&format!(
                    "tensor {} where {} was expected",
                    header.tensors[s].name, meta.name
                )));
            }
            *slots[s] = read_tensor(&header.tensors[s], meta)?;
        }
    }
    for (block, out) in [(1, &mut opt.m), (2, &mut opt.v)] {
        for (s, meta) in metas.iter().enumerate() {
            out.push(read_tensor(&header.tensors[block * metas.len() + s], meta)?);
        }
    }

    let mut masks = PruneMasks { per_slot: vec![None; metas.len()] };
    let mut payload_end = header
        .tensors
        .last()
        .map(|t| t.offset as usize + metas.last().unwrap().len() * 4)
        .unwrap_or(0);
    for entry in &header.masks {
        if entry.slot >= metas.len() {
            return Err(corrupt("mask entry points at a slot outside the model"));
        }
        let n = entry.bits as usize;
        if n != metas[entry.slot].len() {
            return Err(corrupt(&format!("mask for {} has wrong bit count", entry.name)));
        }
        let start = entry.offset as usize;
        let end = start + n.div_ceil(8);
        let slice = payload
            .get(start..end)
            .ok_or_else(|| corrupt(&format!("truncated payload at mask {}", entry.name)))?;
        masks.per_slot[entry.slot] = Some(unpack_bits(slice, n));
        payload_end = payload_end.max(end);
    }
    if payload.len() != payload_end {
        return Err(corrupt("payload size does not match the directory"));
    }

    Ok(Checkpoint { model, opt, masks, vocab_hash: header.vocab_hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::egru::StepMode;
    use crate::lm::CellKind;
    use crate::prune::apply_prune_step;
    use crate::rng::Rng;
    use crate::train::evaluate;

    fn cfg() -> LmConfig {
        LmConfig {
            vocab_size: 19,
            embed_dim: 6,
            hidden_dims: vec![8, 6],
            cell: CellKind::Egru,
            mode: StepMode::Event,
            dropout_p: 0.0,
            dropconnect_p: 0.0,
            train_theta: true,
            surrogate_lambda: 0.3,
            surrogate_epsilon: 1.0,
        }
    }

    fn fixture() -> (LmModel<f32>, OptimState, PruneMasks) {
        let cfg = cfg();
        let mut model = LmModel::init(&cfg, &Rng::new(41));
        let mut opt = OptimState::zeros_for(&model);
        let mut r = Rng::new(42);
        for mo in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            mo.iter_mut().for_each(|x| *x = r.uniform(-0.5, 0.5));
        }
        opt.step = 1234;
        let mut masks = PruneMasks::unpruned(&cfg);
        apply_prune_step(&mut model, Some(&mut opt), &mut masks, 0.4).unwrap();
        (model, opt, masks)
    }

    fn stream(n: usize) -> Vec<u32> {
        let mut r = Rng::new(7);
        (0..n).map(|_| r.index(19) as u32).collect()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (model, opt, masks) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        save_checkpoint(&a, &model, &opt, &masks, 0xfeed_beef).unwrap();
        let ck = load_checkpoint(&a).unwrap();
        save_checkpoint(&b, &ck.model, &ck.opt, &ck.masks, ck.vocab_hash).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn reloaded_model_evaluates_bit_identically() {
        let (model, opt, masks) = fixture();
        let ids = stream(300);
        let before = evaluate(&model, &ids);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_checkpoint(&p, &model, &opt, &masks, 1).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        let after = evaluate(&ck.model, &ids);
        assert_eq!(before.mean_nll.to_bits(), after.mean_nll.to_bits());
        assert_eq!(ck.opt.step, 1234);
        assert_eq!(ck.masks.per_slot, masks.per_slot);
        assert_eq!(ck.vocab_hash, 1);
    }

    #[test]
    fn masked_positions_are_written_as_exact_zero() {
        let (mut model, opt, masks) = fixture();
        // poison a pruned-away position in memory; the file must still hold 0.0
        let mut poisoned = None;
        {
            let mut slots = model.slots_mut();
            'outer: for (s, m) in masks.per_slot.iter().enumerate() {
                if let Some(m) = m {
                    if let Some(i) = m.iter().position(|&keep| !keep) {
                        slots[s][i] = 3.5;
                        poisoned = Some((s, i));
                        break 'outer;
                    }
                }
            }
        }
        let (s, i) = poisoned.expect("fixture prunes something");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_checkpoint(&p, &model, &opt, &masks, 0).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.model.slots()[s][i], 0.0);
    }

    #[test]
    fn wrong_magic_version_and_truncation_are_rejected() {
        let (model, opt, masks) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_checkpoint(&p, &model, &opt, &masks, 0).unwrap();
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CkptError::BadMagic)));

        let mut bad = good.clone();
        bad[8] = VERSION as u8 + 1;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CkptError::Version { found }) if found == VERSION + 1));

        fs::write(&p, &good[..good.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CkptError::Corrupt(_))));

        let mut bad = good.clone();
        bad.push(0);
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CkptError::Corrupt(_))), "trailing bytes");

        fs::write(&p, b"EGRU").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CkptError::Corrupt(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let e = load_checkpoint(Path::new("/nonexistent/ckpt.bin")).unwrap_err();
        assert!(matches!(e, CkptError::Io { .. }));
        assert!(e.to_string().contains("/nonexistent/ckpt.bin"));
    }

    #[test]
    fn bit_packing_round_trips_lsb_first() {
        let mask: Vec<bool> = (0..19).map(|i| i % 3 == 0).collect();
        let packed = pack_bits(&mask);
        assert_eq!(packed.len(), 3);
        // bit 0 of byte 0 is element 0
        assert_eq!(packed[0] & 1, 1);
        assert_eq!(unpack_bits(&packed, 19), mask);
    }
}
