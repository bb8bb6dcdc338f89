//! Binary checkpoint format (`.stck`), little-endian throughout:
//!
//! ```text
//! magic "STCK" | version u32 | header_len u32 | header JSON
//! repeated until EOF:
//!   name_len u16 | name utf-8 | rank u8 | dims u32 × rank | values f32 × Π dims
//! ```
//!
//! The JSON header holds the [`StarConfig`] and, optionally, everything needed
//! to turn raw frames into model inputs again.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StarConfig, StarModel};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::keyframes::{ExternalFeatureSpec, KeyframeConfig, MinMaxScaler};
use crate::series::read_exact_or;
use crate::tensor::{ParamStore, Tensor};

pub const STCK_MAGIC: [u8; 4] = *b"STCK";
pub const STCK_VERSION: u32 = 1;

/// Preprocessing state a trained model depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineMeta {
    pub grid: GridSpec,
    pub keyframes: KeyframeConfig,
    pub external: ExternalFeatureSpec,
    pub scaler: MinMaxScaler,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: StarConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pipeline: Option<PipelineMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: StarModel<f32>,
    pub pipeline: Option<PipelineMeta>,
}

pub fn write_checkpoint<W: Write>(
    model: &StarModel<f32>,
    pipeline: Option<&PipelineMeta>,
    mut sink: W,
) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        model: model.config().clone(),
        pipeline: pipeline.cloned(),
    })?;
    sink.write_all(&STCK_MAGIC)?;
    sink.write_all(&STCK_VERSION.to_le_bytes())?;
    sink.write_all(&(header.len() as u32).to_le_bytes())?;
    sink.write_all(&header)?;
    for (name, tensor) in model.params().iter() {
        sink.write_all(&(name.len() as u16).to_le_bytes())?;
        sink.write_all(name.as_bytes())?;
        sink.write_all(&[tensor.rank() as u8])?;
        for &d in tensor.shape() {
            sink.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            sink.write_all(&v.to_le_bytes())?;
        }
    }
    sink.flush()?;
    Ok(())
}

pub fn save_checkpoint(
    model: &StarModel<f32>,
    pipeline: Option<&PipelineMeta>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_checkpoint(model, pipeline, BufWriter::new(File::create(path)?))
}

fn read_u32<R: Read>(r: &mut R, context: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record's name length, or `None` on a clean end of stream.
fn read_name_len<R: Read>(r: &mut R) -> Result<Option<u16>> {
    let mut b = [0u8; 2];
    let mut got = 0;
    while got < 2 {
        match r.read(&mut b[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(Error::Truncated {
                    context: "record name length".into(),
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(u16::from_le_bytes(b)))
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut source, &mut magic, "magic")?;
    if magic != STCK_MAGIC {
        return Err(Error::BadMagic {
            expected: STCK_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut source, "version")?;
    if version != STCK_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: STCK_VERSION,
        });
    }
    let header_len = read_u32(&mut source, "header length")? as usize;
    let mut header = vec![0u8; header_len];
    read_exact_or(&mut source, &mut header, "header")?;
    let header: Header = serde_json::from_slice(&header)?;
    header.model.validate()?;

    let layout = header.model.layout();
    let expected: HashMap<&str, &[usize]> =
        layout.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    let mut found: HashMap<String, Tensor<f32>> = HashMap::new();

    while let Some(name_len) = read_name_len(&mut source)? {
        let mut name = vec![0u8; name_len as usize];
        read_exact_or(&mut source, &mut name, "record name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Corrupt("record name is not valid UTF-8".into()))?;
        if found.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let want = *expected
            .get(name.as_str())
            .ok_or_else(|| Error::Corrupt(format!("unexpected parameter {name:?}")))?;

        let mut rank = [0u8; 1];
        read_exact_or(&mut source, &mut rank, "record rank")?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u32(&mut source, "record dims")? as usize);
        }
        if dims != want {
            return Err(Error::shape(
                "load_checkpoint",
                format!("parameter {name:?} stored as {dims:?}, model expects {want:?}"),
            ));
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; 4 * n];
        read_exact_or(&mut source, &mut raw, &format!("values of {name:?}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        found.insert(name, Tensor::new(dims, data)?);
    }

    let mut params = ParamStore::new();
    for (name, _) in &layout {
        let tensor = found.remove(name).ok_or_else(|| Error::Truncated {
            context: format!("parameter {name:?} missing"),
        })?;
        params.insert(name.clone(), tensor)?;
    }
    Ok(Checkpoint {
        model: StarModel::from_params(header.model, params)?,
        pipeline: header.pipeline,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
