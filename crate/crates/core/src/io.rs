//! On-disk formats: DVOL1 volumes, parameter checkpoints, run manifests.
//!
//! Both binary formats are a single JSON header line terminated by `\n`
//! followed by a raw little-endian payload. Volumes store f32, checkpoints
//! store f64 so a reloaded model is bit-identical to the one that was saved.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::AdaptConfig;
use crate::error::{Error, Result};
use crate::grid::{Dims, Geometry, ScalarVolume, Spacing, VectorField};
use crate::predictor::{Architecture, PredictorParams};

pub const VOL_MAGIC: &str = "DVOL1";
pub const CHECKPOINT_MAGIC: &str = "SVFCKPT1";

/// Refuse to scan further than this for the header newline.
const MAX_HEADER: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolHeader {
    pub magic: String,
    pub dims: Dims,
    pub spacing: Spacing,
    pub channels: usize,
    pub dtype: String,
    pub byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl VolHeader {
    fn new(geom: &Geometry, channels: usize) -> Self {
        Self {
            magic: VOL_MAGIC.into(),
            dims: geom.dims,
            spacing: geom.spacing,
            channels,
            dtype: "f32".into(),
            byte_order: "little".into(),
            name: None,
            provenance: None,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.dims.iter().product::<usize>() * self.channels * 4
    }
}

/// Either kind of volume a DVOL1 file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Field(VectorField),
}

impl Volume {
    pub fn geometry(&self) -> &Geometry {
        match self {
            Volume::Scalar(v) => v.geometry(),
            Volume::Field(f) => f.geometry(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Volume::Scalar(_) => 1,
            Volume::Field(_) => 3,
        }
    }

    fn data(&self) -> &[f64] {
        match self {
            Volume::Scalar(v) => v.data(),
            Volume::Field(f) => f.data(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            Volume::Scalar(v) => Ok(v),
            Volume::Field(_) => Err(Error::Format("expected 1 channel, found 3".into())),
        }
    }

    pub fn into_field(self) -> Result<VectorField> {
        match self {
            Volume::Field(f) => Ok(f),
            Volume::Scalar(_) => Err(Error::Format("expected 3 channels, found 1".into())),
        }
    }
}

impl From<ScalarVolume> for Volume {
    fn from(v: ScalarVolume) -> Self {
        Volume::Scalar(v)
    }
}

impl From<VectorField> for Volume {
    fn from(f: VectorField) -> Self {
        Volume::Field(f)
    }
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let limit = bytes.len().min(MAX_HEADER);
    let nl = bytes[..limit]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("no header line".into()))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

fn header_line<T: Serialize>(header: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    Ok(out)
}

/// Serialize to the DVOL1 byte layout. Values are narrowed to f32.
pub fn encode_vol(vol: &Volume, name: Option<&str>) -> Result<Vec<u8>> {
    let mut header = VolHeader::new(vol.geometry(), vol.channels());
    header.name = name.map(str::to_owned);
    let mut out = header_line(&header)?;
    out.reserve(header.payload_bytes());
    for &v in vol.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_vol(bytes: &[u8]) -> Result<(VolHeader, Volume)> {
    let (head, payload) = split_header(bytes)?;
    let probe: serde_json::Value =
        serde_json::from_slice(head).map_err(|e| Error::Format(e.to_string()))?;
    let magic = probe.get("magic").and_then(|m| m.as_str()).unwrap_or("");
    if magic != VOL_MAGIC {
        return Err(Error::BadMagic(magic.to_owned()));
    }
    let header: VolHeader = serde_json::from_value(probe).map_err(|e| Error::Format(e.to_string()))?;
    if header.dtype != "f32" || header.byte_order != "little" {
        return Err(Error::Format(format!(
            "unsupported payload {} / {}",
            header.dtype, header.byte_order
        )));
    }
    if header.channels != 1 && header.channels != 3 {
        return Err(Error::Format(format!("channels must be 1 or 3, got {}", header.channels)));
    }
    let geom = Geometry::new(header.dims, header.spacing)?;
    let expected = header.payload_bytes();
    if payload.len() != expected {
        return Err(Error::PayloadLengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let vol = if header.channels == 1 {
        Volume::Scalar(ScalarVolume::new(geom, data)?)
    } else {
        Volume::Field(VectorField::new(geom, data)?)
    };
    Ok((header, vol))
}

pub fn write_vol(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let name = path.as_ref().file_stem().and_then(|s| s.to_str());
    fs::write(path.as_ref(), encode_vol(vol, name)?)?;
    Ok(())
}

pub fn read_vol(path: impl AsRef<Path>) -> Result<Volume> {
    Ok(decode_vol(&fs::read(path)?)?.1)
}

pub fn write_scalar(path: impl AsRef<Path>, vol: &ScalarVolume) -> Result<()> {
    write_vol(path, &Volume::Scalar(vol.clone()))
}

pub fn write_field(path: impl AsRef<Path>, field: &VectorField) -> Result<()> {
    write_vol(path, &Volume::Field(field.clone()))
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    read_vol(path)?.into_scalar()
}

pub fn read_field(path: impl AsRef<Path>) -> Result<VectorField> {
    read_vol(path)?.into_field()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    architecture: Architecture,
    dropout: f64,
    lineage: Vec<u64>,
    block_lengths: Vec<usize>,
}

pub fn encode_checkpoint(params: &PredictorParams) -> Result<Vec<u8>> {
    let blocks = params.blocks();
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        architecture: params.architecture().clone(),
        dropout: params.dropout(),
        lineage: params.lineage().to_vec(),
        block_lengths: blocks.iter().map(|b| b.len()).collect(),
    };
    let mut out = header_line(&header)?;
    for b in blocks {
        for &v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PredictorParams> {
    let (head, payload) = split_header(bytes)?;
    let probe: serde_json::Value =
        serde_json::from_slice(head).map_err(|e| Error::Format(e.to_string()))?;
    let magic = probe.get("magic").and_then(|m| m.as_str()).unwrap_or("");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic.to_owned()));
    }
    let header: CheckpointHeader =
        serde_json::from_value(probe).map_err(|e| Error::Format(e.to_string()))?;
    let expected = header.block_lengths.iter().sum::<usize>() * 8;
    if payload.len() != expected {
        return Err(Error::PayloadLengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let blocks = header
        .block_lengths
        .iter()
        .map(|&n| values.by_ref().take(n).collect())
        .collect();
    PredictorParams::from_blocks(header.architecture, header.dropout, header.lineage, blocks)
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &PredictorParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<PredictorParams> {
    decode_checkpoint(&fs::read(path)?)
}

/// Everything needed to replay a CLI invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Full argument vector after the program name, as given.
    pub argv: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<AdaptConfig>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv,
            config: None,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
