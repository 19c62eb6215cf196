//! Model files: one JSON header line, then the parameter tensors as
//! STEN blobs in [`Parameters::NAMES`] order. Checkpoints append the
//! optimizer's first- and second-moment blobs in the same order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Parameters, PredictorConfig, PredictorModel};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_blob, write_tensor_blob, TensorBlob};
use crate::training::OptimizerState;

pub const MODEL_FORMAT: &str = "seenough-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub config: PredictorConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Value>,
    /// Optimizer step count; present only in checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_step: Option<u64>,
}

fn entries(params: &Parameters<f32>) -> Vec<TensorEntry> {
    Parameters::<f32>::NAMES
        .iter()
        .zip(params.tensors())
        .map(|(name, p)| TensorEntry {
            name: name.to_string(),
            dims: p.dims.clone(),
        })
        .collect()
}

fn write_params<W: Write>(params: &Parameters<f32>, sink: &mut W) -> Result<()> {
    for p in params.tensors() {
        write_tensor_blob(&TensorBlob::new(p.dims.clone(), p.data.clone())?, sink)?;
    }
    Ok(())
}

fn read_params<R: Read>(config: &PredictorConfig, source: &mut R, section: &str) -> Result<Parameters<f32>> {
    let mut params = Parameters::<f32>::shaped(config);
    for (name, p) in Parameters::<f32>::NAMES.iter().zip(params.tensors_mut()) {
        let label = if section.is_empty() {
            name.to_string()
        } else {
            format!("{section}.{name}")
        };
        let blob = read_tensor_blob(source).map_err(|e| Error::CorruptBlob {
            name: label.clone(),
            source: Box::new(e),
        })?;
        if blob.dims() != p.dims.as_slice() {
            return Err(Error::ConfigMismatch(format!(
                "{label}: blob dims {:?}, config expects {:?}",
                blob.dims(),
                p.dims
            )));
        }
        p.data = blob.into_parts().1;
    }
    Ok(params)
}

fn write_file(
    path: &Path,
    model: &PredictorModel<f32>,
    provenance: Option<Value>,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        config: model.config.clone(),
        tensors: entries(&model.params),
        provenance,
        optimizer_step: optimizer.map(|o| o.step),
    };
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut sink = BufWriter::new(file);
    serde_json::to_writer(&mut sink, &header)?;
    sink.write_all(b"\n")?;
    write_params(&model.params, &mut sink)?;
    if let Some(o) = optimizer {
        write_params(&o.first, &mut sink)?;
        write_params(&o.second, &mut sink)?;
    }
    sink.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

fn read_header<R: BufRead>(source: &mut R) -> Result<ModelHeader> {
    let mut line = Vec::new();
    source.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::ModelFormat("missing header line".into()));
    }
    let header: ModelHeader =
        serde_json::from_slice(&line).map_err(|e| Error::ModelFormat(format!("unreadable header: {e}")))?;
    if header.format != MODEL_FORMAT {
        return Err(Error::ModelFormat(format!("format {:?}, expected {MODEL_FORMAT:?}", header.format)));
    }
    if header.version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {}", header.version)));
    }
    header.config.validate()?;
    let expected = entries(&Parameters::shaped(&header.config));
    if header.tensors.len() != expected.len() {
        return Err(Error::ConfigMismatch(format!(
            "header lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (got, want) in header.tensors.iter().zip(&expected) {
        if got.name != want.name || got.dims != want.dims {
            return Err(Error::ConfigMismatch(format!(
                "tensor {} {:?} does not match config ({} {:?})",
                got.name, got.dims, want.name, want.dims
            )));
        }
    }
    Ok(header)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io_at(path, e))?))
}

pub fn save_model(path: impl AsRef<Path>, model: &PredictorModel<f32>, provenance: Option<Value>) -> Result<()> {
    write_file(path.as_ref(), model, provenance, None)
}

/// Loads a model (or the model part of a checkpoint) and its header.
pub fn load_model(path: impl AsRef<Path>) -> Result<(PredictorModel<f32>, ModelHeader)> {
    let mut source = open(path.as_ref())?;
    let header = read_header(&mut source)?;
    let params = read_params(&header.config, &mut source, "")?;
    Ok((
        PredictorModel {
            config: header.config.clone(),
            params,
        },
        header,
    ))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &PredictorModel<f32>,
    optimizer: &OptimizerState,
    provenance: Option<Value>,
) -> Result<()> {
    write_file(path.as_ref(), model, provenance, Some(optimizer))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PredictorModel<f32>, OptimizerState, ModelHeader)> {
    let mut source = open(path.as_ref())?;
    let header = read_header(&mut source)?;
    let step = header
        .optimizer_step
        .ok_or_else(|| Error::ModelFormat("file has no optimizer state".into()))?;
    let params = read_params(&header.config, &mut source, "")?;
    let first = read_params(&header.config, &mut source, "adam_m")?;
    let second = read_params(&header.config, &mut source, "adam_v")?;
    Ok((
        PredictorModel {
            config: header.config.clone(),
            params,
        },
        OptimizerState { step, first, second },
        header,
    ))
}
