//! Per-frame feature extraction and the `SLRF` feature file format.
//!
//! Layout (all integers little-endian):
//!
//! | field          | type            |
//! |----------------|-----------------|
//! | magic          | `b"SLRF"`       |
//! | version        | u32 (= 1)       |
//! | frames `F`     | u32             |
//! | dim `D`        | u32             |
//! | classes `C`    | u32             |
//! | scene count    | u64             |
//!
//! followed, per scene, by `class_id: u32`, `path_len: u16`, the UTF-8 path,
//! `begin_frame: u64`, `frame_count: u64` and `F * D` row-major `f32` values.
//! Labels live in a JSON sidecar `<file>.labels.json` mapping class id to text.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::{FramePlan, SceneRecord};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SLRF";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 28;

/// `F x D` matrix of single-precision backbone activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "feature matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged feature rows"));
        }
        let n = rows.len();
        Self::new(n, cols, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows reordered so that row `k` of the result is row `order[k]` of `self`.
    pub fn permute_rows(&self, order: &[usize]) -> Self {
        let data = order.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Self {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Identifies the scene a feature sequence was sampled from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneKey {
    pub video_path: String,
    pub begin_frame: u64,
    pub frame_count: u64,
}

impl From<&SceneRecord> for SceneKey {
    fn from(r: &SceneRecord) -> Self {
        Self {
            video_path: r.video_path.clone(),
            begin_frame: r.begin_frame,
            frame_count: r.frame_count,
        }
    }
}

impl std::fmt::Display for SceneKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}+{}", self.video_path, self.begin_frame, self.frame_count)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub scene: SceneKey,
    pub class_id: usize,
    pub data: FeatureMatrix,
}

/// All scenes of one episode, sharing `F`, `D` and the label set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub frames: usize,
    pub dim: usize,
    pub labels: Vec<String>,
    pub sequences: Vec<FeatureSequence>,
}

impl FeatureDataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for s in &self.sequences {
            counts[s.class_id] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.data.rows() != self.frames || s.data.cols() != self.dim {
                return Err(Error::invalid(format!(
                    "sequence {i} is {}x{}, dataset is {}x{}",
                    s.data.rows(),
                    s.data.cols(),
                    self.frames,
                    self.dim
                )));
            }
            if s.class_id >= self.labels.len() {
                return Err(Error::invalid(format!("sequence {i} has class {} >= C", s.class_id)));
            }
            if !s.data.is_finite() {
                return Err(Error::invalid(format!("sequence {i} has non-finite features")));
            }
        }
        Ok(())
    }
}

/// Placeholder labels used when no sidecar is available.
pub fn default_labels(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("class_{c}")).collect()
}

// ---------------------------------------------------------------------------
// Backbones

/// Where per-frame features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSpec {
    /// Deterministic keyed-hash stand-in for a pretrained network.
    Mock { dim: usize, seed: u64 },
    /// Precomputed `SLRF` file, looked up by scene.
    File { path: PathBuf },
}

impl BackboneSpec {
    /// Parses `mock` or `file:<path>`; `mock` takes its dimension and seed
    /// from the arguments.
    pub fn parse(text: &str, mock_dim: usize, seed: u64) -> Result<Self> {
        if text == "mock" {
            Ok(Self::Mock { dim: mock_dim, seed })
        } else if let Some(path) = text.strip_prefix("file:") {
            Ok(Self::File { path: path.into() })
        } else {
            Err(Error::invalid(format!(
                "unknown backbone `{text}`, expected `mock` or `file:<path>`"
            )))
        }
    }

    pub fn open(&self) -> Result<Backbone> {
        match self {
            Self::Mock { dim, seed } => {
                if *dim == 0 {
                    return Err(Error::invalid("backbone dimension must be at least 1"));
                }
                Ok(Backbone::Mock { dim: *dim, seed: *seed })
            }
            Self::File { path } => Ok(Backbone::File(FeatureFileIndex::open(path)?)),
        }
    }
}

/// An opened backbone ready to produce features.
#[derive(Debug)]
pub enum Backbone {
    Mock { dim: usize, seed: u64 },
    File(FeatureFileIndex),
}

impl Backbone {
    pub fn dim(&self) -> usize {
        match self {
            Self::Mock { dim, .. } => *dim,
            Self::File(index) => index.header.dim,
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mock backbone activation vector for one frame, entries in `[0, 1)`.
///
/// Integer-only construction, so the output is identical on every platform.
pub fn mock_features(video_path: &str, frame: u64, dim: usize, seed: u64) -> Vec<f32> {
    let frame_key = mix(mix(seed ^ fnv1a(video_path.as_bytes())) ^ frame);
    (0..dim as u64)
        .map(|col| {
            let h = mix(frame_key ^ col.wrapping_mul(0xd6e8_feb8_6659_fd93));
            // 24 bits fit an f32 mantissa exactly, keeping the value below 1.
            (h >> 40) as f32 / (1u32 << 24) as f32
        })
        .collect()
}

/// Builds the `F x D` input for one scene: row `k` holds the features of
/// frame `plan.indices[k]`.
pub fn assemble_input(
    record: &SceneRecord,
    class_id: usize,
    plan: &FramePlan,
    backbone: &mut Backbone,
) -> Result<FeatureSequence> {
    let key = SceneKey::from(record);
    let data = match backbone {
        Backbone::Mock { dim, seed } => {
            let values = plan
                .indices
                .iter()
                .flat_map(|&i| mock_features(&record.video_path, i, *dim, *seed))
                .collect();
            FeatureMatrix::new(plan.len(), *dim, values)?
        }
        Backbone::File(index) => {
            let block = index.fetch(&key)?;
            if block.rows() != plan.len() {
                return Err(Error::invalid(format!(
                    "feature file stores {} frames per scene, plan has {}",
                    block.rows(),
                    plan.len()
                )));
            }
            block
        }
    };
    Ok(FeatureSequence {
        scene: key,
        class_id,
        data,
    })
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub scenes: u64,
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: self.offset,
                message: format!("truncated payload while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0; 2];
        self.read_bytes(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0; 4];
        self.read_bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0; 8];
        self.read_bytes(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn at_eof(&mut self) -> Result<bool> {
        let mut b = [0; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// Streaming reader: yields one scene at a time.
pub struct FeatureFileReader<R> {
    reader: CountingReader<R>,
    header: FeatureFileHeader,
    remaining: u64,
}

impl<R: Read> FeatureFileReader<R> {
    pub fn new(source: R) -> Result<Self> {
        let mut reader = CountingReader {
            inner: source,
            offset: 0,
        };
        let mut magic = [0; 4];
        reader.read_bytes(&mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"SLRF\""),
            });
        }
        let version = reader.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            });
        }
        let frames = reader.u32("F")? as usize;
        let dim = reader.u32("D")? as usize;
        let classes = reader.u32("C")? as usize;
        if frames == 0 || dim == 0 || classes == 0 {
            return Err(Error::Format {
                offset: 8,
                message: format!("degenerate dimensions F={frames} D={dim} C={classes}"),
            });
        }
        let scenes = reader.u64("scene count")?;
        Ok(Self {
            reader,
            header: FeatureFileHeader {
                frames,
                dim,
                classes,
                scenes,
            },
            remaining: scenes,
        })
    }

    pub fn header(&self) -> FeatureFileHeader {
        self.header
    }

    fn read_scene_meta(&mut self) -> Result<(usize, SceneKey)> {
        let start = self.reader.offset;
        let class_id = self.reader.u32("class id")? as usize;
        if class_id >= self.header.classes {
            return Err(Error::Format {
                offset: start,
                message: format!("class id {class_id} >= C = {}", self.header.classes),
            });
        }
        let path_len = self.reader.u16("path length")? as usize;
        let path_offset = self.reader.offset;
        let mut path = vec![0; path_len];
        self.reader.read_bytes(&mut path, "video path")?;
        let video_path = String::from_utf8(path).map_err(|_| Error::Format {
            offset: path_offset,
            message: "video path is not UTF-8".into(),
        })?;
        let begin_frame = self.reader.u64("begin frame")?;
        let frame_count = self.reader.u64("frame count")?;
        Ok((
            class_id,
            SceneKey {
                video_path,
                begin_frame,
                frame_count,
            },
        ))
    }

    fn read_block(&mut self) -> Result<FeatureMatrix> {
        let n = self.header.frames * self.header.dim;
        let start = self.reader.offset;
        let mut raw = vec![0u8; n * 4];
        self.reader.read_bytes(&mut raw, "feature block")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: start + 4 * i as u64,
                message: "non-finite feature value".into(),
            });
        }
        FeatureMatrix::new(self.header.frames, self.header.dim, data)
    }

    pub fn next_sequence(&mut self) -> Result<Option<FeatureSequence>> {
        if self.remaining == 0 {
            return Ok(None);
        }
        let (class_id, scene) = self.read_scene_meta()?;
        let data = self.read_block()?;
        self.remaining -= 1;
        Ok(Some(FeatureSequence {
            scene,
            class_id,
            data,
        }))
    }

    /// Errors if bytes follow the last declared scene.
    pub fn finish(mut self) -> Result<()> {
        if self.remaining > 0 {
            return Err(Error::Format {
                offset: self.reader.offset,
                message: format!("{} declared scene(s) not read", self.remaining),
            });
        }
        if !self.reader.at_eof()? {
            return Err(Error::Format {
                offset: self.reader.offset,
                message: "trailing bytes after last scene".into(),
            });
        }
        Ok(())
    }
}

/// Streaming writer; the scene count is fixed up front.
pub struct FeatureFileWriter<W: Write> {
    sink: W,
    header: FeatureFileHeader,
    written: u64,
    offset: u64,
}

impl<W: Write> FeatureFileWriter<W> {
    pub fn new(mut sink: W, header: FeatureFileHeader) -> Result<Self> {
        if header.frames == 0 || header.dim == 0 || header.classes == 0 {
            return Err(Error::invalid("F, D and C must all be at least 1"));
        }
        let to_u32 = |v: usize, name: &str| {
            u32::try_from(v).map_err(|_| Error::invalid(format!("{name} = {v} does not fit in u32")))
        };
        sink.write_all(&MAGIC)?;
        sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
        sink.write_all(&to_u32(header.frames, "F")?.to_le_bytes())?;
        sink.write_all(&to_u32(header.dim, "D")?.to_le_bytes())?;
        sink.write_all(&to_u32(header.classes, "C")?.to_le_bytes())?;
        sink.write_all(&header.scenes.to_le_bytes())?;
        Ok(Self {
            sink,
            header,
            written: 0,
            offset: HEADER_LEN,
        })
    }

    pub fn write_sequence(&mut self, seq: &FeatureSequence) -> Result<()> {
        let fail = |offset, message: String| Error::Format { offset, message };
        if self.written == self.header.scenes {
            return Err(fail(self.offset, "more scenes than declared in header".into()));
        }
        if seq.data.rows() != self.header.frames || seq.data.cols() != self.header.dim {
            return Err(fail(
                self.offset,
                format!(
                    "sequence is {}x{}, header declares {}x{}",
                    seq.data.rows(),
                    seq.data.cols(),
                    self.header.frames,
                    self.header.dim
                ),
            ));
        }
        if seq.class_id >= self.header.classes {
            return Err(fail(self.offset, format!("class id {} >= C", seq.class_id)));
        }
        if !seq.data.is_finite() {
            return Err(fail(self.offset, "non-finite feature value".into()));
        }
        let path = seq.scene.video_path.as_bytes();
        let path_len = u16::try_from(path.len())
            .map_err(|_| fail(self.offset, "video path longer than 65535 bytes".into()))?;

        self.sink.write_all(&(seq.class_id as u32).to_le_bytes())?;
        self.sink.write_all(&path_len.to_le_bytes())?;
        self.sink.write_all(path)?;
        self.sink.write_all(&seq.scene.begin_frame.to_le_bytes())?;
        self.sink.write_all(&seq.scene.frame_count.to_le_bytes())?;
        let mut block = Vec::with_capacity(seq.data.as_slice().len() * 4);
        for v in seq.data.as_slice() {
            block.extend_from_slice(&v.to_le_bytes());
        }
        self.sink.write_all(&block)?;

        self.offset += 4 + 2 + path.len() as u64 + 16 + block.len() as u64;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.scenes {
            return Err(Error::Format {
                offset: self.offset,
                message: format!(
                    "header declares {} scenes but {} were written",
                    self.header.scenes, self.written
                ),
            });
        }
        self.sink.flush()?;
        Ok(self.sink)
    }
}

pub fn write_feature_file<W: Write>(dataset: &FeatureDataset, sink: W) -> Result<W> {
    dataset.validate()?;
    let header = FeatureFileHeader {
        frames: dataset.frames,
        dim: dataset.dim,
        classes: dataset.num_classes(),
        scenes: dataset.sequences.len() as u64,
    };
    let mut writer = FeatureFileWriter::new(sink, header)?;
    for seq in &dataset.sequences {
        writer.write_sequence(seq)?;
    }
    writer.finish()
}

/// Reads a whole feature file. Labels are placeholders; see [`load_dataset`].
pub fn read_feature_file<R: Read>(source: R) -> Result<FeatureDataset> {
    let mut reader = FeatureFileReader::new(source)?;
    let header = reader.header();
    let mut sequences = Vec::new();
    while let Some(seq) = reader.next_sequence()? {
        sequences.push(seq);
    }
    reader.finish()?;
    Ok(FeatureDataset {
        frames: header.frames,
        dim: header.dim,
        labels: default_labels(header.classes),
        sequences,
    })
}

pub fn labels_sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".labels.json");
    PathBuf::from(name)
}

pub fn write_labels_sidecar(path: &Path, labels: &[String]) -> Result<()> {
    // Keys in numeric order, so "10" follows "9".
    let mut out = String::from("{\n");
    for (i, label) in labels.iter().enumerate() {
        let sep = if i + 1 == labels.len() { "" } else { "," };
        out.push_str(&format!("  \"{i}\": {}{sep}\n", serde_json::to_string(label)?));
    }
    out.push_str("}\n");
    std::fs::write(labels_sidecar_path(path), out)?;
    Ok(())
}

pub fn read_labels_sidecar(path: &Path, classes: usize) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(labels_sidecar_path(path))?;
    let map: HashMap<String, String> = serde_json::from_str(&text)?;
    (0..classes)
        .map(|c| {
            map.get(&c.to_string()).cloned().ok_or_else(|| {
                Error::invalid(format!("labels sidecar for {} lacks class {c}", path.display()))
            })
        })
        .collect()
}

/// Writes the binary file and its labels sidecar.
pub fn save_dataset(path: &Path, dataset: &FeatureDataset) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_feature_file(dataset, file)?;
    write_labels_sidecar(path, &dataset.labels)
}

/// Reads a feature file, taking labels from the sidecar when it exists.
pub fn load_dataset(path: &Path) -> Result<FeatureDataset> {
    let mut dataset = read_feature_file(BufReader::new(File::open(path)?))?;
    if labels_sidecar_path(path).exists() {
        dataset.labels = read_labels_sidecar(path, dataset.labels.len())?;
    }
    Ok(dataset)
}

/// Scene-to-offset index over a feature file; blocks are read on demand.
#[derive(Debug)]
pub struct FeatureFileIndex {
    path: PathBuf,
    header: FeatureFileHeader,
    offsets: HashMap<SceneKey, u64>,
    file: File,
}

impl FeatureFileIndex {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut reader = FeatureFileReader::new(BufReader::new(file.try_clone()?))?;
        let header = reader.header();
        let block_len = (header.frames * header.dim * 4) as u64;
        let mut offsets = HashMap::new();
        for _ in 0..header.scenes {
            let (_, key) = reader.read_scene_meta()?;
            offsets.insert(key, reader.reader.offset);
            // Skip the block without materialising it.
            let skipped = io::copy(&mut (&mut reader.reader.inner).take(block_len), &mut io::sink())?;
            if skipped != block_len {
                return Err(Error::Format {
                    offset: reader.reader.offset + skipped,
                    message: "truncated payload while reading feature block".into(),
                });
            }
            reader.reader.offset += block_len;
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            offsets,
            file,
        })
    }

    pub fn header(&self) -> FeatureFileHeader {
        self.header
    }

    pub fn fetch(&mut self, key: &SceneKey) -> Result<FeatureMatrix> {
        let offset = *self
            .offsets
            .get(key)
            .ok_or_else(|| Error::Lookup(format!("{key} (in {})", self.path.display())))?;
        self.file.seek(SeekFrom::Start(offset))?;
        let mut reader = FeatureFileReader {
            reader: CountingReader {
                inner: BufReader::new(&mut self.file),
                offset,
            },
            header: self.header,
            remaining: 1,
        };
        reader.read_block()
    }
}
