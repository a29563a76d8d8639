//! safetensors checkpoints holding parameters, buffers, optimizer moments and
//! the training position.
//!
//! Tensor names are prefixed `param/`, `buffer/`, `adam_m/` and `adam_v/`.
//! String metadata carries the model fingerprint, the step and epoch counters
//! and any caller-supplied entries.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::ArrayD;

use csicount_nn::weights::{serialize, tensor_from_view, TensorFile};
use csicount_nn::{Param, ParamVisitor};

use super::optim::AdamW;
use crate::error::io_err;
use crate::model::Model;
use crate::{Error, Result, Scalar};

pub const META_FINGERPRINT: &str = "fingerprint";
const META_STEP: &str = "step";
const META_EPOCH: &str = "epoch";
const META_ADAM_T: &str = "adam_t";

/// Position in the schedule and free-form metadata read back from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    /// Optimizer steps completed.
    pub step: usize,
    pub epoch: usize,
    pub extra: BTreeMap<String, String>,
}

struct Collect<T> {
    tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> ParamVisitor<T> for Collect<T> {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        self.tensors.insert(format!("param/{name}"), p.value.clone());
    }

    fn buffer(&mut self, name: &str, b: &mut ArrayD<T>) {
        self.tensors.insert(format!("buffer/{name}"), b.clone());
    }
}

pub fn checkpoint_bytes<T: Scalar>(
    model: &mut Model<T>,
    optimizer: Option<&AdamW<T>>,
    step: usize,
    epoch: usize,
    extra: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut c = Collect { tensors: BTreeMap::new() };
    model.visit(&mut c);
    let mut meta: HashMap<String, String> = extra.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    meta.insert(META_FINGERPRINT.into(), model.fingerprint());
    meta.insert(META_STEP.into(), step.to_string());
    meta.insert(META_EPOCH.into(), epoch.to_string());
    if let Some(opt) = optimizer {
        meta.insert(META_ADAM_T.into(), opt.t.to_string());
        for (name, (m, v)) in &opt.moments {
            c.tensors.insert(format!("adam_m/{name}"), m.clone());
            c.tensors.insert(format!("adam_v/{name}"), v.clone());
        }
    }
    Ok(serialize(&c.tensors, Some(meta))?)
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &mut Model<T>,
    optimizer: Option<&AdamW<T>>,
    step: usize,
    epoch: usize,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, optimizer, step, epoch, extra)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads only the metadata.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let file = TensorFile::open(path)?;
    meta_of(&file, path)
}

fn meta_of(file: &TensorFile, path: &Path) -> Result<CheckpointMeta> {
    let mut extra = file.metadata()?;
    let bad = |m: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let fingerprint = extra.remove(META_FINGERPRINT).ok_or_else(|| bad("no fingerprint"))?;
    let step = extra
        .remove(META_STEP)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("no step counter"))?;
    let epoch = extra
        .remove(META_EPOCH)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("no epoch counter"))?;
    Ok(CheckpointMeta {
        fingerprint,
        step,
        epoch,
        extra,
    })
}

struct Restore<'a> {
    file: &'a TensorFile,
    tensors: safetensors::SafeTensors<'a>,
    error: Option<Error>,
}

impl Restore<'_> {
    fn fetch<T: Scalar>(&mut self, key: &str, shape: &[usize]) -> Option<ArrayD<T>> {
        if self.error.is_some() {
            return None;
        }
        let result = self
            .tensors
            .tensor(key)
            .map_err(|_| format!("missing tensor `{key}`"))
            .and_then(|view| {
                if view.shape() != shape {
                    Err(format!("tensor `{key}` has shape {:?}, expected {shape:?}", view.shape()))
                } else {
                    tensor_from_view::<T>(key, &view).map_err(|e| e.to_string())
                }
            });
        match result {
            Ok(a) => Some(a),
            Err(message) => {
                self.error = Some(Error::Checkpoint {
                    path: self.file.path.clone().into(),
                    message,
                });
                None
            }
        }
    }
}

impl<T: Scalar> ParamVisitor<T> for Restore<'_> {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        if let Some(v) = self.fetch(&format!("param/{name}"), p.value.shape()) {
            p.value = v;
        }
    }

    fn buffer(&mut self, name: &str, b: &mut ArrayD<T>) {
        if let Some(v) = self.fetch(&format!("buffer/{name}"), b.shape()) {
            *b = v;
        }
    }
}

/// Restores `model` (and `optimizer`, when given) from bytes.
pub fn restore_from_bytes<T: Scalar>(
    path: &Path,
    bytes: Vec<u8>,
    model: &mut Model<T>,
    optimizer: Option<&mut AdamW<T>>,
) -> Result<CheckpointMeta> {
    let file = TensorFile::from_bytes(path.display().to_string(), bytes);
    let meta = meta_of(&file, path)?;
    if meta.fingerprint != model.fingerprint() {
        return Err(Error::Fingerprint {
            path: path.to_path_buf(),
            expected: model.fingerprint(),
            found: meta.fingerprint,
        });
    }
    let mut restore = Restore {
        tensors: file.parse()?,
        file: &file,
        error: None,
    };
    model.visit(&mut restore);
    if let Some(opt) = optimizer {
        let names: Vec<String> = restore
            .tensors
            .names()
            .into_iter()
            .filter_map(|n| n.strip_prefix("adam_m/").map(str::to_string))
            .collect();
        opt.moments.clear();
        for name in names {
            let shape = restore.tensors.tensor(&format!("adam_m/{name}")).map(|v| v.shape().to_vec());
            let Ok(shape) = shape else { continue };
            let m = restore.fetch::<T>(&format!("adam_m/{name}"), &shape);
            let v = restore.fetch::<T>(&format!("adam_v/{name}"), &shape);
            if let (Some(m), Some(v)) = (m, v) {
                opt.moments.insert(name, (m, v));
            }
        }
        opt.t = file
            .metadata()?
            .get(META_ADAM_T)
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
    }
    match restore.error {
        Some(e) => Err(e),
        None => Ok(meta),
    }
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    model: &mut Model<T>,
    optimizer: Option<&mut AdamW<T>>,
) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    restore_from_bytes(path, bytes, model, optimizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelStrategy, ModelSpec, Task};
    use csicount_nn::BackboneKind;

    fn model(task: Task, seed: u64) -> Model<f32> {
        Model::new(ModelSpec {
            task,
            backbone: BackboneKind::MobilenetV3Small,
            pretrained: false,
            weights: None,
            channel_strategy: ChannelStrategy::LearnedProjection,
            init_seed: seed,
        })
        .unwrap()
    }

    struct Flat(Vec<f32>);

    impl ParamVisitor<f32> for Flat {
        fn param(&mut self, _: &str, p: &mut Param<f32>) {
            self.0.extend(p.value.iter());
        }

        fn buffer(&mut self, _: &str, b: &mut ArrayD<f32>) {
            self.0.extend(b.iter());
        }
    }

    fn flat(m: &mut Model<f32>) -> Vec<f32> {
        let mut f = Flat(Vec::new());
        m.visit(&mut f);
        f.0
    }

    #[test]
    fn round_trip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let mut a = model(Task::IdentityAgnostic, 1);
        let mut opt = AdamW::<f32>::new(0.01);
        opt.t = 7;
        opt.moments.insert("head.bias".into(), (ArrayD::from_elem(vec![9], 0.5), ArrayD::from_elem(vec![9], 0.25)));
        let extra = BTreeMap::from([("note".to_string(), "x".to_string())]);
        save_checkpoint(&path, &mut a, Some(&opt), 42, 3, &extra).unwrap();

        let mut b = model(Task::IdentityAgnostic, 2);
        assert_ne!(flat(&mut a), flat(&mut b));
        let mut restored = AdamW::<f32>::new(0.01);
        let meta = load_checkpoint(&path, &mut b, Some(&mut restored)).unwrap();
        assert_eq!(flat(&mut a), flat(&mut b));
        assert_eq!((meta.step, meta.epoch), (42, 3));
        assert_eq!(meta.extra.get("note").map(String::as_str), Some("x"));
        assert_eq!(restored, opt);
        assert_eq!(read_meta(&path).unwrap().step, 42);
    }

    #[test]
    fn other_task_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        save_checkpoint(&path, &mut model(Task::IdentityAgnostic, 1), None, 0, 0, &BTreeMap::new()).unwrap();
        let err = load_checkpoint(&path, &mut model(Task::IdentityDependent, 1), None).unwrap_err();
        assert!(matches!(err, Error::Fingerprint { .. }), "{err}");
    }
}
