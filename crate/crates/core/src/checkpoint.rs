//! Binary checkpoint container.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FSQ1"
//! 4       4     format version (u32) = 1
//! 8       8     total file length in bytes, CRC included (u64)
//! 16      4     config block length L (u32)
//! 20      L     config block, UTF-8 JSON: {"model", "channel_means", "label_names"}
//! ..      4     tensor count T (u32)
//! ..            T tensor records:
//!                 name length (u32), UTF-8 name,
//!                 ndim (u32), dims (u32 each),
//!                 payload (f32 each, row-major)
//! ..      4     history block length H (u32)
//! ..      H     history block, UTF-8 JSON array of epoch metrics
//! ..      4     CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! The CRC guards against accidental corruption only; it is not a security
//! measure.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::History;

pub const MAGIC: &[u8; 4] = b"FSQ1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const CRC_LEN: usize = 4;

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    channel_means: [f32; 3],
    label_names: Vec<String>,
}

/// Everything a checkpoint holds.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub history: History,
    pub channel_means: [f32; 3],
    pub label_names: Vec<String>,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8], what: &str) -> Result<()> {
    put_u32(out, bytes.len(), what)?;
    out.extend_from_slice(bytes);
    Ok(())
}

pub fn encode_checkpoint(
    model: &Model,
    history: &History,
    channel_means: [f32; 3],
    label_names: &[String],
) -> Result<Vec<u8>> {
    if label_names.len() != model.config().num_classes {
        return Err(Error::Compat(format!(
            "{} label names for a {}-class model",
            label_names.len(),
            model.config().num_classes
        )));
    }
    let mut out = Vec::with_capacity(4 * model.parameter_count() + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&[0; 8]); // total length, patched below

    let config = ConfigBlock {
        model: model.config().clone(),
        channel_means,
        label_names: label_names.to_vec(),
    };
    put_block(&mut out, &serde_json::to_vec(&config)?, "config length")?;

    put_u32(&mut out, model.parameters().len(), "tensor count")?;
    for p in model.parameters() {
        put_block(&mut out, p.name.as_bytes(), "name length")?;
        put_u32(&mut out, p.value.dims().len(), "rank")?;
        for &d in p.value.dims() {
            put_u32(&mut out, d, "dimension")?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    put_block(&mut out, &serde_json::to_vec(history)?, "history length")?;

    let total = (out.len() + CRC_LEN) as u64;
    out[8..16].copy_from_slice(&total.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(
    model: &Model,
    history: &History,
    channel_means: [f32; 3],
    label_names: &[String],
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(model, history, channel_means, label_names)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!("{} has no file name", path.display()))))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::Io(e)
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of data reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn block(&mut self, what: &str) -> Result<&'a [u8]> {
        let len = self.u32(what)?;
        self.take(len, what)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (this reader handles {FORMAT_VERSION})"
        )));
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if declared != bytes.len() as u64 {
        return Err(Error::Corrupt(format!(
            "header declares {declared} bytes, file has {}",
            bytes.len()
        )));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }

    let mut r = Reader {
        bytes: body,
        pos: HEADER_LEN,
    };
    let config: ConfigBlock =
        serde_json::from_slice(r.block("config block")?).map_err(|e| Error::Format(format!("config block: {e}")))?;
    if config.label_names.len() != config.model.num_classes {
        return Err(Error::Compat(format!(
            "{} label names for a {}-class model",
            config.label_names.len(),
            config.model.num_classes
        )));
    }
    let mut model = Model::zeroed(config.model).map_err(|e| Error::Compat(e.to_string()))?;

    let count = r.u32("tensor count")?;
    if count != model.parameters().len() {
        return Err(Error::Compat(format!(
            "checkpoint has {count} tensors, config implies {}",
            model.parameters().len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name = std::str::from_utf8(r.block("tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("tensor {name:?} appears twice")));
        }
        let rank = r.u32("rank")?;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(Error::Format(format!("tensor {name:?} has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name:?} dims overflow")))?;
        let payload = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("payload size overflow".into()))?,
            "tensor payload",
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::from_vec(&dims, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
        model
            .set_param(&name, tensor)
            .map_err(|e| Error::Compat(e.to_string()))?;
    }

    let history: History =
        serde_json::from_slice(r.block("history block")?).map_err(|e| Error::Format(format!("history block: {e}")))?;
    let history = History::from_epochs(history.epochs().to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model,
        history,
        channel_means: config.channel_means,
        label_names: config.label_names,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochMetrics;

    fn sample() -> (Model, History, Vec<String>) {
        let model = Model::build(ModelConfig::tiny(3), 5).unwrap();
        let history = History::from_epochs(vec![EpochMetrics {
            epoch: 1,
            train_loss: 1.25,
            train_accuracy: 0.5,
            val_accuracy: 0.4,
            wall_time: 0.0,
        }])
        .unwrap();
        (model, history, vec!["a".into(), "b".into(), "c".into()])
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, history, labels) = sample();
        let means = [0.1, 0.2, 0.3];
        let bytes = encode_checkpoint(&model, &history, means, &labels).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.history, history);
        assert_eq!(ck.label_names, labels);
        assert_eq!(ck.channel_means.map(f32::to_bits), means.map(f32::to_bits));
        assert_eq!(ck.model.config(), model.config());
        for (a, b) in model.parameters().iter().zip(ck.model.parameters()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(
            encode_checkpoint(&ck.model, &ck.history, ck.channel_means, &ck.label_names).unwrap(),
            bytes
        );
    }

    #[test]
    fn header_layout() {
        let (model, history, labels) = sample();
        let bytes = encode_checkpoint(&model, &history, [0.0; 3], &labels).unwrap();
        assert_eq!(&bytes[..4], b"FSQ1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &(bytes.len() as u64).to_le_bytes());
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        assert_eq!(&bytes[bytes.len() - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn detects_corruption_and_version() {
        let (model, history, labels) = sample();
        let bytes = encode_checkpoint(&model, &history, [0.0; 3], &labels).unwrap();

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x01;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Corrupt(_))));

        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&future), Err(Error::Format(_))));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(Error::Format(_))));

        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt(_))
        ));
        assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_label_count_mismatch() {
        let (model, history, _) = sample();
        let r = encode_checkpoint(&model, &history, [0.0; 3], &["x".into()]);
        assert!(matches!(r, Err(Error::Compat(_))));
    }

    #[test]
    fn atomic_save_leaves_no_temp_files() {
        let (model, history, labels) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fsq");
        save_checkpoint(&model, &history, [0.0; 3], &labels, &path).unwrap();
        save_checkpoint(&model, &history, [0.0; 3], &labels, &path).unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("m.fsq")]);

        let missing = dir.path().join("no/such/dir/m.fsq");
        assert!(matches!(
            save_checkpoint(&model, &history, [0.0; 3], &labels, &missing),
            Err(Error::Io(_))
        ));
        assert!(!missing.exists());
    }
}
