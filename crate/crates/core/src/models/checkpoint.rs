//! Parameter files in the safetensors layout.

use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{ModelError, Tables};
use crate::embeddings::load_embeddings;
use crate::nn::{ParamSet, Tensor};

const PARAMS_FILE: &str = "params.safetensors";
const TRAIN_TABLE: &str = "embeddings.vec";
const PREDICT_TABLE: &str = "inference_embeddings.vec";

/// Write tensors as little-endian f64. Single-row tensors are stored as
/// 1-D arrays.
pub(crate) fn write_safetensors<'a, I>(path: &Path, tensors: I) -> Result<(), ModelError>
where
    I: IntoIterator<Item = (String, &'a Tensor)>,
{
    let owned: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(name, t)| {
            let shape = if t.rows == 1 { vec![t.cols] } else { vec![t.rows, t.cols] };
            let bytes = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name, shape, bytes)
        })
        .collect();
    let views: Vec<(String, TensorView<'_>)> = owned
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(Dtype::F64, shape.clone(), bytes).expect("consistent view");
            (name.clone(), view)
        })
        .collect();
    let bytes = safetensors::serialize(views, &None)
        .map_err(|e| ModelError::checkpoint(path, e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| ModelError::io(path, e))
}

/// Read every tensor as f64. Accepts F32 and F64 storage.
pub(crate) fn read_safetensors(path: &Path) -> Result<Vec<(String, Tensor)>, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ModelError::checkpoint(path, e.to_string()))?;
    let mut out = Vec::new();
    let mut names: Vec<String> = st.names().into_iter().cloned().collect();
    names.sort();
    for name in names {
        let view = st
            .tensor(&name)
            .map_err(|e| ModelError::checkpoint(path, e.to_string()))?;
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => {
                return Err(ModelError::checkpoint(
                    path,
                    format!("tensor {name} has unsupported dtype {other:?}"),
                ))
            }
        };
        let (rows, cols) = match view.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [] => (1, 1),
            s => {
                return Err(ModelError::checkpoint(
                    path,
                    format!("tensor {name} has unsupported rank {}", s.len()),
                ))
            }
        };
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(out)
}

pub(crate) fn save_vector_model(dir: &Path, params: &ParamSet, tables: &Tables) -> Result<(), ModelError> {
    write_safetensors(
        &dir.join(PARAMS_FILE),
        params.iter().map(|(_, name, t)| (name.to_string(), t)),
    )?;
    tables.train.save(&dir.join(TRAIN_TABLE))?;
    let predict = dir.join(PREDICT_TABLE);
    match &tables.predict {
        Some(t) => t.save(&predict)?,
        None => {
            if predict.exists() {
                std::fs::remove_file(&predict).map_err(|e| ModelError::io(&predict, e))?;
            }
        }
    }
    Ok(())
}

pub(crate) fn load_vector_model(dir: &Path) -> Result<(ParamSet, Tables), ModelError> {
    let mut params = ParamSet::new();
    for (name, t) in read_safetensors(&dir.join(PARAMS_FILE))? {
        params.insert(name, t);
    }
    let mut tables = Tables::new(load_embeddings(&dir.join(TRAIN_TABLE), None)?);
    let predict = dir.join(PREDICT_TABLE);
    if predict.exists() {
        tables.predict = Some(load_embeddings(&predict, None)?);
    }
    Ok((params, tables))
}
