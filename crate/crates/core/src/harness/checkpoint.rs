//! Training state in a single safetensors file.
//!
//! Tensors are stored under `param/`, `adam_m/` and `adam_v/`; scalars and
//! the serialized config live in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    /// First epoch that has not been run yet.
    pub next_epoch: usize,
    pub global_step: u64,
    pub adam_step: u64,
    pub best_f1: f64,
    pub best_epoch: Option<usize>,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            Dtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn view_to_tensor(name: &str, view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let dev = Device::Cpu;
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
    };
    Ok(t)
}

fn meta<'a>(m: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
}

fn meta_num<T: std::str::FromStr>(m: &HashMap<String, String>, key: &str) -> Result<T> {
    meta(m, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad metadata `{key}`")))
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut owned = Vec::new();
        for (group, map) in [("param", &self.params), ("adam_m", &self.adam_m), ("adam_v", &self.adam_v)] {
            for (name, t) in map {
                let (dtype, bytes) = tensor_bytes(t)?;
                owned.push((format!("{group}/{name}"), dtype, t.dims().to_vec(), bytes));
            }
        }
        let views = owned
            .iter()
            .map(|(name, dtype, shape, bytes)| {
                TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut metadata = HashMap::from([
            ("config".to_string(), self.config_text.clone()),
            ("next_epoch".to_string(), self.next_epoch.to_string()),
            ("global_step".to_string(), self.global_step.to_string()),
            ("adam_step".to_string(), self.adam_step.to_string()),
            // Debug formatting of f64 round-trips exactly.
            ("best_f1".to_string(), format!("{:?}", self.best_f1)),
        ]);
        if let Some(e) = self.best_epoch {
            metadata.insert("best_epoch".to_string(), e.to_string());
        }
        let bytes = safetensors::serialize(views, Some(metadata))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let m = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut ck = Checkpoint {
            config_text: meta(&m, "config")?.to_string(),
            next_epoch: meta_num(&m, "next_epoch")?,
            global_step: meta_num(&m, "global_step")?,
            adam_step: meta_num(&m, "adam_step")?,
            best_f1: meta_num(&m, "best_f1")?,
            best_epoch: m.contains_key("best_epoch").then(|| meta_num(&m, "best_epoch")).transpose()?,
            params: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
        };
        for (full, view) in st.tensors() {
            let (group, name) = full
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{full}`")))?;
            let target = match group {
                "param" => &mut ck.params,
                "adam_m" => &mut ck.adam_m,
                "adam_v" => &mut ck.adam_v,
                _ => return Err(Error::Checkpoint(format!("unexpected tensor `{full}`"))),
            };
            target.insert(name.to_string(), view_to_tensor(&full, &view)?);
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(&[[0.1f32, -2.5e-7], [3.0, f32::MIN_POSITIVE]], &Device::Cpu).unwrap();
        let ck = Checkpoint {
            config_text: "seed = 3\n".into(),
            next_epoch: 4,
            global_step: 17,
            adam_step: 17,
            best_f1: 0.1 + 0.2,
            best_epoch: Some(2),
            params: BTreeMap::from([("a.weight".to_string(), t.clone())]),
            adam_m: BTreeMap::from([("a.weight".to_string(), t.clone())]),
            adam_v: BTreeMap::from([("a.weight".to_string(), t.clone())]),
        };
        let path = dir.path().join("ck.safetensors");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!((back.best_f1, back.best_epoch), (0.1 + 0.2, Some(2)));
        assert_eq!((back.next_epoch, back.global_step, back.config_text.as_str()), (4, 17, "seed = 3\n"));
        let a = back.params["a.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, t.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
}
