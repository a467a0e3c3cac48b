//! Binary point-cloud sequences and checkpoints. Everything is
//! little-endian; values are `f32` on disk and `f64` in memory.
//!
//! Frame file (`frame_%06d.pcsq`):
//!
//! ```text
//! "PCSQ" | version u16 = 1 | frame_index u32 | pose 16×f64 row-major
//!        | N u32 | N × (x, y, z, intensity) as 4×f32
//! ```
//!
//! Checkpoint (`.tmck`):
//!
//! ```text
//! "TMCK" | version u16 = 1 | config_len u32 | config TOML bytes
//!        | param table | moment table | step u64
//!        | rng seed [u8; 32] | rng stream u64 | rng word_pos u128
//! table  = count u32, then per tensor:
//!          name_len u32 | name bytes | rank u32 | rank × u32 dims | f32 data
//! ```
//!
//! The moment table stores `<name>/m` and `<name>/v` for every parameter.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{PointFrame, Pose, SceneTemplate};
use crate::params::{Moments, ParamStore};
use crate::tensor::Tensor;

pub const FRAME_MAGIC: &[u8; 4] = b"PCSQ";
pub const FRAME_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMCK";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const SEQUENCE_META: &str = "sequence.meta";

const FRAME_HEADER: usize = 4 + 2 + 4 + 16 * 8 + 4;

pub fn frame_file_name(index: u32) -> String {
    format!("frame_{index:06}.pcsq")
}

pub fn encode_frame(frame: &PointFrame) -> Result<Vec<u8>> {
    let n = u32::try_from(frame.len())
        .map_err(|_| Error::InvalidArgument(format!("{} points exceed u32", frame.len())))?;
    let mut buf = Vec::with_capacity(FRAME_HEADER + frame.len() * 16);
    buf.extend_from_slice(FRAME_MAGIC);
    buf.write_u16::<LittleEndian>(FRAME_VERSION).expect("vec write");
    buf.write_u32::<LittleEndian>(frame.timestamp_index).expect("vec write");
    for v in frame.pose.matrix {
        buf.write_f64::<LittleEndian>(v).expect("vec write");
    }
    buf.write_u32::<LittleEndian>(n).expect("vec write");
    for (p, i) in frame.points.iter().zip(&frame.intensity) {
        for v in [p[0], p[1], p[2], *i] {
            buf.write_f32::<LittleEndian>(v as f32).expect("vec write");
        }
    }
    Ok(buf)
}

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    fn err(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            self.err(
                self.pos,
                format!(
                    "truncated {what}: expected {} bytes, file has {}",
                    self.pos.saturating_add(n),
                    self.buf.len()
                ),
            )
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2, what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(LittleEndian::read_u128(self.take(16, what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8, what)?))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(self.err(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        Ok(())
    }

    fn version(&mut self, want: u16) -> Result<()> {
        let at = self.pos;
        let v = self.u16("version")?;
        if v != want {
            return Err(self.err(at, format!("unsupported version {v}, this build reads version {want}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode_frame(buf: &[u8], path: &Path) -> Result<PointFrame> {
    let mut r = Reader::new(buf, path);
    r.magic(FRAME_MAGIC)?;
    r.version(FRAME_VERSION)?;
    let index = r.u32("frame index")?;
    let mut matrix = [0.0; 16];
    for v in &mut matrix {
        *v = r.f64("pose")?;
    }
    let n = r.u32("point count")? as usize;
    let body = r.take(n * 16, "point data")?;
    r.finish()?;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in body.chunks_exact(16) {
        let v = |k: usize| LittleEndian::read_f32(&rec[4 * k..4 * k + 4]) as f64;
        points.push([v(0), v(1), v(2)]);
        intensity.push(v(3));
    }
    let pose = Pose { matrix };
    pose.validate().map_err(|e| r.err(10, e.to_string()))?;
    PointFrame::new(index, points, intensity, pose).map_err(|e| r.err(FRAME_HEADER, e.to_string()))
}

pub fn write_frame(path: &Path, frame: &PointFrame) -> Result<()> {
    fs::write(path, encode_frame(frame)?).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<PointFrame> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&buf, path)
}

/// Contents of `sequence.meta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub frames: usize,
    pub sigma: f64,
    pub sequence_index: usize,
    /// Generator recipe, for synthetic sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SceneTemplate>,
}

pub fn write_sequence(dir: &Path, frames: &[PointFrame], meta: &SequenceMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if meta.frames != frames.len() {
        return Err(Error::InvalidArgument(format!(
            "meta lists {} frames, {} given",
            meta.frames,
            frames.len()
        )));
    }
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(frame_file_name(i as u32)), f)?;
    }
    let text = toml::to_string(meta).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(SEQUENCE_META);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_sequence(dir: &Path) -> Result<(Vec<PointFrame>, SequenceMeta)> {
    let meta_path = dir.join(SEQUENCE_META);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SequenceMeta = toml::from_str(&text).map_err(|e| Error::Format {
        path: meta_path.clone(),
        offset: 0,
        detail: e.to_string(),
    })?;
    let frames = (0..meta.frames)
        .map(|i| read_frame(&dir.join(frame_file_name(i as u32))))
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, meta))
}

/// A dataset directory holds one `seq_NNNN` directory per sequence.
pub fn sequence_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("seq_{index:04}"))
}

pub fn read_dataset(root: &Path) -> Result<Vec<Vec<PointFrame>>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seq_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format {
            path: root.to_path_buf(),
            offset: 0,
            detail: "no seq_* directories".into(),
        });
    }
    dirs.iter().map(|d| read_sequence(d).map(|(f, _)| f)).collect()
}

/// Serializable state of a [`ChaCha8Rng`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training or to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub rng: RngState,
}

fn write_table<'a>(buf: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (String, &'a Tensor)>) {
    buf.write_u32::<LittleEndian>(entries.len() as u32).expect("vec write");
    for (name, t) in entries {
        buf.write_u32::<LittleEndian>(name.len() as u32).expect("vec write");
        buf.extend_from_slice(name.as_bytes());
        buf.write_u32::<LittleEndian>(t.shape().len() as u32).expect("vec write");
        for &d in t.shape() {
            buf.write_u32::<LittleEndian>(d as u32).expect("vec write");
        }
        for &v in t.data() {
            buf.write_f32::<LittleEndian>(v as f32).expect("vec write");
        }
    }
}

fn read_table(r: &mut Reader<'_>, what: &str) -> Result<BTreeMap<String, Tensor>> {
    let count = r.u32(what)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let body = r.take(n * 4, "tensor data")?;
        let data = body
            .chunks_exact(4)
            .map(|c| LittleEndian::read_f32(c) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.err(at, e.to_string()))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(r.err(at, format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u16::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
    let cfg = ck.config.to_toml();
    buf.write_u32::<LittleEndian>(cfg.len() as u32).expect("vec write");
    buf.extend_from_slice(cfg.as_bytes());
    write_table(&mut buf, ck.params.params.iter().map(|(k, t)| (k.clone(), t)));
    let moments: Vec<(String, &Tensor)> = ck
        .params
        .moments
        .iter()
        .flat_map(|(k, m)| [(format!("{k}/m"), &m.m), (format!("{k}/v"), &m.v)])
        .collect();
    write_table(&mut buf, moments.into_iter());
    buf.write_u64::<LittleEndian>(ck.params.step).expect("vec write");
    buf.extend_from_slice(&ck.rng.seed);
    buf.write_u64::<LittleEndian>(ck.rng.stream).expect("vec write");
    buf.write_u128::<LittleEndian>(ck.rng.word_pos).expect("vec write");
    buf
}

pub fn decode_checkpoint(buf: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(buf, path);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| r.err(at, "config is not UTF-8"))?;
    let config = RunConfig::from_toml_str(text, &[]).map_err(|e| r.err(at, e.to_string()))?;
    let params = read_table(&mut r, "parameter count")?;
    let table_at = r.pos;
    let mut moment_table = read_table(&mut r, "moment count")?;
    let step = r.u64("step")?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32, "rng seed")?);
    let stream = r.u64("rng stream")?;
    let word_pos = r.u128("rng position")?;
    r.finish()?;

    let mut moments = BTreeMap::new();
    for (name, t) in &params {
        let m = moment_table.remove(&format!("{name}/m"));
        let v = moment_table.remove(&format!("{name}/v"));
        match (m, v) {
            (Some(m), Some(v)) if m.shape() == t.shape() && v.shape() == t.shape() => {
                moments.insert(name.clone(), Moments { m, v });
            }
            _ => return Err(r.err(table_at, format!("missing or misshapen moments for `{name}`"))),
        }
    }
    if let Some(extra) = moment_table.keys().next() {
        return Err(r.err(table_at, format!("moment `{extra}` has no parameter")));
    }
    Ok(Checkpoint {
        config,
        params: ParamStore {
            params,
            moments,
            step,
        },
        rng: RngState {
            seed,
            stream,
            word_pos,
        },
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf, path)
}

/// Error unless `store` holds exactly the tensor names and shapes of
/// `expected`.
pub fn check_param_names(store: &ParamStore, expected: &ParamStore) -> Result<()> {
    let have: BTreeSet<&str> = store.names().collect();
    let want: BTreeSet<&str> = expected.names().collect();
    let extra: Vec<&str> = have.difference(&want).copied().collect();
    let missing: Vec<&str> = want.difference(&have).copied().collect();
    if !extra.is_empty() || !missing.is_empty() {
        return Err(Error::Integrity(format!(
            "checkpoint parameters do not match the model: extra {extra:?}, missing {missing:?}"
        )));
    }
    for (name, t) in expected.iter() {
        let got = store.get(name).expect("names checked");
        if got.shape() != t.shape() {
            return Err(Error::Integrity(format!(
                "parameter `{name}` has shape {:?}, model expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}
