//! FSEQ feature-sequence container.
//!
//! ```text
//! header   "FSEQ" | version u32 = 1 | num_classes u32 | count u32
//! record   label u32 | group u32 | layers u32 | frames u32 | channels u32
//!          | layers*frames*channels f32 values, layer-major then frame
//! ```
//!
//! Integers and floats are little-endian.

use std::path::Path;

use crate::error::{FormatError, Result};

pub const MAGIC: [u8; 4] = *b"FSEQ";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;
pub const RECORD_HEADER_BYTES: usize = 20;

/// One labelled utterance: `layers x frames x channels` features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub label: u32,
    pub group: u32,
    pub layers: usize,
    pub frames: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureSequence {
    pub fn frame(&self, layer: usize, t: usize) -> &[f32] {
        &self.data[(layer * self.frames + t) * self.channels..][..self.channels]
    }

    /// Keeps the first `max_frames` frames of every layer.
    pub fn truncate(&mut self, max_frames: usize) {
        if self.frames <= max_frames {
            return;
        }
        let keep = max_frames * self.channels;
        let plane = self.frames * self.channels;
        self.data = (0..self.layers)
            .flat_map(|l| self.data[l * plane..][..keep].iter().copied())
            .collect();
        self.frames = max_frames;
    }

    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_BYTES + 4 * self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: u32,
    pub records: Vec<FeatureSequence>,
}

impl Dataset {
    pub fn new(num_classes: u32, records: Vec<FeatureSequence>) -> Self {
        Dataset {
            num_classes,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes as usize];
        for r in &self.records {
            counts[r.label as usize] += 1;
        }
        counts
    }

    /// Sorted distinct group ids.
    pub fn groups(&self) -> Vec<u32> {
        let mut g: Vec<u32> = self.records.iter().map(|r| r.group).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    pub fn truncate(&mut self, max_frames: usize) {
        self.records.iter_mut().for_each(|r| r.truncate(max_frames));
    }

    /// Byte offset of every record in the encoded file.
    pub fn offsets(&self) -> Vec<u64> {
        let mut at = HEADER_BYTES as u64;
        self.records
            .iter()
            .map(|r| {
                let o = at;
                at += r.encoded_len() as u64;
                o
            })
            .collect()
    }
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| FormatError::Malformed(format!("{what} {v} exceeds u32")).into())
}

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let total: usize = HEADER_BYTES + ds.records.iter().map(|r| r.encoded_len()).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&MAGIC);
    for v in [VERSION, ds.num_classes, u32_field(ds.records.len(), "record count")?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, r) in ds.records.iter().enumerate() {
        validate_record(i, r, ds.num_classes)?;
        let dims = [
            r.label,
            r.group,
            u32_field(r.layers, "layers")?,
            u32_field(r.frames, "frames")?,
            u32_field(r.channels, "channels")?,
        ];
        for v in dims {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn validate_record(i: usize, r: &FeatureSequence, num_classes: u32) -> Result<()> {
    if r.label >= num_classes {
        return Err(FormatError::LabelOutOfRange {
            record: i,
            label: r.label,
            num_classes,
        }
        .into());
    }
    if r.layers == 0 || r.frames == 0 || r.channels == 0 {
        return Err(FormatError::EmptyDimension {
            record: i,
            layers: r.layers,
            frames: r.frames,
            channels: r.channels,
        }
        .into());
    }
    if r.data.len() != r.layers * r.frames * r.channels {
        return Err(FormatError::Malformed(format!(
            "record {i}: {} values for {}x{}x{}",
            r.data.len(),
            r.layers,
            r.frames,
            r.channels
        ))
        .into());
    }
    if let Some(index) = r.data.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite { record: i, index }.into());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    let magic = rd.take(4)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        }
        .into());
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version).into());
    }
    let num_classes = rd.u32()?;
    let count = rd.u32()? as usize;
    // Every record needs at least its header, so this bounds the allocation.
    let mut records = Vec::with_capacity(count.min(bytes.len() / RECORD_HEADER_BYTES));
    for i in 0..count {
        let label = rd.u32()?;
        let group = rd.u32()?;
        let layers = rd.u32()? as usize;
        let frames = rd.u32()? as usize;
        let channels = rd.u32()? as usize;
        if label >= num_classes {
            return Err(FormatError::LabelOutOfRange {
                record: i,
                label,
                num_classes,
            }
            .into());
        }
        if layers == 0 || frames == 0 || channels == 0 {
            return Err(FormatError::EmptyDimension {
                record: i,
                layers,
                frames,
                channels,
            }
            .into());
        }
        let n = layers
            .checked_mul(frames)
            .and_then(|v| v.checked_mul(channels))
            .filter(|v| v.checked_mul(4).is_some())
            .ok_or_else(|| FormatError::Malformed(format!("record {i}: dimensions overflow")))?;
        let raw = rd.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { record: i, index }.into());
        }
        records.push(FeatureSequence {
            label,
            group,
            layers,
            frames,
            channels,
            data,
        });
    }
    if rd.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - rd.pos).into());
    }
    Ok(Dataset {
        num_classes,
        records,
    })
}

pub fn write_fseq(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode(ds)?)?;
    Ok(())
}

pub fn read_fseq(path: &Path) -> Result<Dataset> {
    decode(&std::fs::read(path)?)
}
