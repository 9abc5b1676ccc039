//! Binary file formats. All integers are little-endian; reals are 32-bit
//! IEEE-754 little-endian.
//!
//! Feature file (`SAFM`, version 1):
//!
//! ```text
//! magic "SAFM" | version u16 | count u32
//! per record: frame_id u32 | class_id u32 | condition_id u32
//!             | appearance block | semantic block
//! block:      C u32 | H u32 | W u32 | C·H·W f32 (channel-major, row-major)
//! ```
//!
//! Embedding files reuse this container: the appearance block holds the
//! embedding as `len×1×1` and the semantic block is empty (`0×1×1`).
//!
//! Checkpoint (`SACK`, version 1):
//!
//! ```text
//! magic "SACK" | version u16 | architecture digest [32]u8 | step u64
//! | config_len u32 | model config JSON | param count u32
//! per param: name_len u32 | name (UTF-8) | rank u32 | dims u32 × rank | f32 × Π dims
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Embedding, Model};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"SAFM";
pub const FEATURE_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SACK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A `C×H×W` block as stored on disk. Unlike [`Tensor`], `C` may be 0.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::InvalidArgument(format!(
                "{channels}×{height}×{width} map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn empty() -> Self {
        Self {
            channels: 0,
            height: 1,
            width: 1,
            data: Vec::new(),
        }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = match t.shape() {
            [c, h, w] => (*c, *h, *w),
            [n] => (*n, 1, 1),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "cannot store a tensor of shape {other:?} as a feature map"
                )))
            }
        };
        Self::new(c, h, w, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub frame_id: u32,
    pub class_id: u32,
    pub condition_id: u32,
    pub appearance: FeatureMap,
    pub semantic: FeatureMap,
}

impl FeatureRecord {
    /// Record wrapping an embedding in the feature container.
    pub fn from_embedding(e: &Embedding, class_id: u32, condition_id: u32) -> Self {
        Self {
            frame_id: e.source_id,
            class_id,
            condition_id,
            appearance: FeatureMap {
                channels: e.values.len(),
                height: 1,
                width: 1,
                data: e.values.clone(),
            },
            semantic: FeatureMap::empty(),
        }
    }

    pub fn to_embedding(&self) -> Embedding {
        Embedding {
            source_id: self.frame_id,
            values: self.appearance.data.clone(),
        }
    }
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_map(buf: &mut Vec<u8>, m: &FeatureMap) -> Result<()> {
    put_u32(buf, m.channels)?;
    put_u32(buf, m.height)?;
    put_u32(buf, m.width)?;
    put_f32s(buf, &m.data);
    Ok(())
}

pub fn encode_features(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    put_u32(&mut buf, records.len())?;
    for r in records {
        buf.extend_from_slice(&r.frame_id.to_le_bytes());
        buf.extend_from_slice(&r.class_id.to_le_bytes());
        buf.extend_from_slice(&r.condition_id.to_le_bytes());
        put_map(&mut buf, &r.appearance)?;
        put_map(&mut buf, &r.semantic)?;
    }
    Ok(buf)
}

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .map_or_else(|| self.fail(format!("{what}: size overflow")), Ok)?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4], version: u16) -> Result<()> {
        let at = self.pos;
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::Format {
                offset: at as u64,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        let at = self.pos;
        let v = self.u16("version")?;
        if v != version {
            return Err(Error::Format {
                offset: at as u64,
                message: format!("unsupported version {v}, expected {version}"),
            });
        }
        Ok(())
    }

    fn map(&mut self) -> Result<FeatureMap> {
        let c = self.u32("channel count")? as usize;
        let h = self.u32("height")? as usize;
        let w = self.u32("width")? as usize;
        let n = c
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .map_or_else(|| self.fail("map size overflow"), Ok)?;
        let data = self.f32s(n, "map values")?;
        Ok(FeatureMap {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC, FEATURE_VERSION)?;
    let count = r.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let frame_id = r.u32("frame_id")?;
        let class_id = r.u32("class_id")?;
        let condition_id = r.u32("condition_id")?;
        let appearance = r.map()?;
        let semantic = r.map()?;
        out.push(FeatureRecord {
            frame_id,
            class_id,
            condition_id,
            appearance,
            semantic,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_features(records: &[FeatureRecord], path: &Path) -> Result<()> {
    write_atomic(path, &encode_features(records)?)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    decode_features(&fs::read(path)?)
}

/// A model snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub step: u64,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, step: u64) -> Self {
        Self {
            model_config: model.config.clone(),
            step,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        Model::from_params(self.model_config, self.params)
    }

    pub fn digest(&self) -> String {
        self.model_config.architecture_digest()
    }

    /// Fails if `config` describes a different architecture.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let (ours, theirs) = (self.digest(), config.architecture_digest());
        if ours != theirs {
            return Err(Error::DigestMismatch {
                checkpoint: ours,
                config: theirs,
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.model_config)?;
        buf.extend_from_slice(&Sha256::digest(&json));
        buf.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut buf, json.len())?;
        buf.extend_from_slice(&json);
        put_u32(&mut buf, self.params.len())?;
        for p in self.params.iter() {
            put_u32(&mut buf, p.name.len())?;
            buf.extend_from_slice(p.name.as_bytes());
            put_u32(&mut buf, p.value.shape().len())?;
            for &d in p.value.shape() {
                put_u32(&mut buf, d)?;
            }
            put_f32s(&mut buf, p.value.data());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let digest = r.take(32, "architecture digest")?.to_vec();
        let step = r.u64("step")?;
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let json = r.take(len, "model config")?;
        if Sha256::digest(json).as_slice() != digest.as_slice() {
            return Err(Error::Format {
                offset: at as u64,
                message: "model config does not match the stored digest".into(),
            });
        }
        let model_config: ModelConfig = serde_json::from_slice(json).map_err(|e| Error::Format {
            offset: at as u64,
            message: format!("bad model config: {e}"),
        })?;
        let count = r.u32("parameter count")? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
                .map_err(|_| Error::Format {
                    offset: at as u64,
                    message: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(n) = n else { return r.fail("parameter size overflow") };
            let at = r.pos;
            let values = r.f32s(n, "parameter values")?;
            let tensor = Tensor::new(shape, values).map_err(|e| Error::Format {
                offset: at as u64,
                message: e.to_string(),
            })?;
            params.register(name, tensor).map_err(|e| Error::Format {
                offset: at as u64,
                message: e.to_string(),
            })?;
        }
        r.finish()?;
        Ok(Self {
            model_config,
            step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Provenance written next to every CLI output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub architecture_digest: String,
    pub seed: u64,
    pub feature_format_version: u16,
    pub checkpoint_format_version: u16,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &crate::config::RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config_digest: config.digest(),
            architecture_digest: config.model.architecture_digest(),
            seed: config.seed,
            feature_format_version: FEATURE_VERSION,
            checkpoint_format_version: CHECKPOINT_VERSION,
            config: serde_json::to_value(config).expect("config serializes"),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(frame: u32) -> FeatureRecord {
        FeatureRecord {
            frame_id: frame,
            class_id: frame / 2,
            condition_id: frame % 2,
            appearance: FeatureMap::new(2, 1, 2, vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap(),
            semantic: FeatureMap::new(1, 1, 2, vec![0.5, -0.0]).unwrap(),
        }
    }

    #[test]
    fn empty_file_is_valid() {
        let bytes = encode_features(&[]).unwrap();
        assert_eq!(bytes, b"SAFM\x01\x00\x00\x00\x00\x00");
        assert!(decode_features(&bytes).unwrap().is_empty());
    }

    #[test]
    fn layout_is_exact() {
        let bytes = encode_features(&[record(3)]).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 4 + 12 + (12 + 16) + (12 + 8));
        assert_eq!(&bytes[10..14], &3u32.to_le_bytes());
        assert_eq!(&bytes[22..26], &2u32.to_le_bytes());
        assert_eq!(&bytes[34..38], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_features(&[record(0), record(1)]).unwrap();
        let cut = bytes.len() - 5;
        match decode_features(&bytes[..cut]) {
            Err(Error::Format { offset, message }) => {
                assert!(offset <= cut as u64 && offset > 10, "{offset}");
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_features(&[record(0)]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode_features(&[record(0)]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_features(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_features(&[record(0)]).unwrap();
        bytes.push(0);
        assert!(decode_features(&bytes).is_err());
    }

    #[test]
    fn embedding_records_round_trip() {
        let e = Embedding {
            source_id: 42,
            values: vec![0.5, -1.0, 2.0],
        };
        let rec = FeatureRecord::from_embedding(&e, 7, 1);
        let back = decode_features(&encode_features(&[rec]).unwrap()).unwrap();
        assert_eq!(back[0].to_embedding(), e);
        assert_eq!(back[0].semantic.channels, 0);
    }
}
