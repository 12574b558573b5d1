//! Named-tensor files in the safetensors layout.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::params::{ParamKind, ParamStore};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

fn to_bytes<F: Float>(t: &Tensor<F>) -> (Dtype, Vec<u8>) {
    match F::DTYPE {
        "f64" => (
            Dtype::F64,
            t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            t.data()
                .iter()
                .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
                .collect(),
        ),
    }
}

fn from_view<F: Float>(name: &str, view: &TensorView<'_>) -> Result<Tensor<F>> {
    let data: Vec<F> = match view.dtype() {
        Dtype::F32 => view
            .data()
            .chunks_exact(4)
            .map(|b| F::cast(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|b| F::cast(f64::from_le_bytes(b.try_into().unwrap())))
            .collect(),
        other => {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has unsupported dtype {other:?}"
            )))
        }
    };
    Ok(Tensor::new(view.shape().to_vec(), data))
}

/// Serialises named tensors plus string metadata. Output bytes depend only on
/// the inputs, so save -> load -> save is byte-identical.
pub fn save_tensors<F: Float>(
    path: &Path,
    tensors: &[(String, Tensor<F>)],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let encoded: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let (dtype, bytes) = to_bytes(t);
            (name.clone(), dtype, t.shape().to_vec(), bytes)
        })
        .collect();
    let mut views = Vec::with_capacity(encoded.len());
    for (name, dtype, shape, bytes) in &encoded {
        let view = TensorView::new(*dtype, shape.clone(), bytes)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        views.push((name.as_str(), view));
    }
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    let bytes = safetensors::serialize(views, &Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub type LoadedTensors<F> = (BTreeMap<String, Tensor<F>>, BTreeMap<String, String>);

pub fn load_tensors<F: Float>(path: &Path) -> Result<LoadedTensors<F>> {
    load_tensors_where(path, |_| true)
}

/// Like [`load_tensors`] but decodes only the tensors whose name passes `keep`,
/// so unrelated entries (integer counters, other heads) are never touched.
pub fn load_tensors_where<F: Float>(path: &Path, keep: impl Fn(&str) -> bool) -> Result<LoadedTensors<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if !keep(&name) {
            continue;
        }
        out.insert(name.clone(), from_view(&name, &view)?);
    }
    Ok((out, metadata))
}

/// Entries of `store` under `prefix`, keyed by their full parameter path.
pub fn collect_prefixed<F: Float>(store: &ParamStore<F>, prefix: &str) -> Vec<(String, Tensor<F>)> {
    store
        .with_prefix(prefix)
        .map(|(_, e)| (e.name.clone(), e.value.clone()))
        .collect()
}

/// Copies every tensor under `prefix` from `tensors` into `store`.
///
/// Missing keys and shape mismatches are errors; extra keys in the file are
/// ignored so exports carrying unused heads still load.
pub fn assign_prefixed<F: Float>(
    store: &mut ParamStore<F>,
    prefix: &str,
    tensors: &BTreeMap<String, Tensor<F>>,
    include_buffers: bool,
) -> Result<usize> {
    let targets: Vec<_> = store
        .with_prefix(prefix)
        .filter(|(_, e)| include_buffers || e.kind == ParamKind::Trainable)
        .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec()))
        .collect();
    let mut loaded = 0;
    for (id, name, shape) in targets {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        store.set(id, t.clone());
        loaded += 1;
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "3".to_string());
        let tensors = vec![
            ("b.x".to_string(), Tensor::<f32>::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0])),
            ("a.y".to_string(), Tensor::<f32>::new(vec![3], vec![0.1, 0.2, 0.3])),
        ];
        let p1 = dir.path().join("one.ckpt");
        save_tensors(&p1, &tensors, &meta).unwrap();
        let (loaded, meta2) = load_tensors::<f32>(&p1).unwrap();
        assert_eq!(meta2, meta);
        let again: Vec<_> = loaded.into_iter().collect();
        let p2 = dir.path().join("two.ckpt");
        save_tensors(&p2, &again, &meta2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn assign_reports_missing_and_mismatched() {
        let mut store = ParamStore::<f32>::new();
        store.register("enc.w", ParamKind::Trainable, Tensor::zeros(&[2, 3]));
        let mut file = BTreeMap::new();
        let err = assign_prefixed(&mut store, "enc.", &file, true).unwrap_err();
        assert!(err.to_string().contains("missing tensor `enc.w`"));
        file.insert("enc.w".to_string(), Tensor::zeros(&[3, 2]));
        let err = assign_prefixed(&mut store, "enc.", &file, true).unwrap_err();
        assert!(err.to_string().contains("shape"));
        file.insert("enc.w".to_string(), Tensor::full(&[2, 3], 1.0));
        file.insert("head.extra".to_string(), Tensor::zeros(&[1]));
        assert_eq!(assign_prefixed(&mut store, "enc.", &file, true).unwrap(), 1);
    }
}
