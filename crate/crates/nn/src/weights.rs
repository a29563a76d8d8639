//! safetensors import/export of named tensors.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::{Backbone, Dtype, NnError, Param, ParamVisitor, Result, Scalar};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Serializes tensors (in `T`'s dtype) plus string metadata.
pub fn serialize<T: Scalar>(
    tensors: &BTreeMap<String, ArrayD<T>>,
    metadata: Option<std::collections::HashMap<String, String>>,
) -> Result<Vec<u8>> {
    let dtype = match T::DTYPE {
        Dtype::F32 => StDtype::F32,
        Dtype::F64 => StDtype::F64,
    };
    let mut buffers = Vec::with_capacity(tensors.len());
    for (name, array) in tensors {
        let standard = array.as_standard_layout();
        let mut bytes = Vec::new();
        T::write_le(standard.as_slice().expect("standard layout"), &mut bytes);
        buffers.push((name.clone(), array.shape().to_vec(), bytes));
    }
    let views: Vec<(String, TensorView<'_>)> = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(dtype, shape.clone(), bytes).expect("consistent tensor view");
            (name.clone(), view)
        })
        .collect();
    safetensors::serialize(views, metadata).map_err(|e| NnError::Format {
        path: "<memory>".into(),
        checksum: String::new(),
        message: e.to_string(),
    })
}

/// Converts a stored tensor (f32 or f64) into `T`.
pub fn tensor_from_view<T: Scalar>(name: &str, view: &TensorView<'_>) -> Result<ArrayD<T>> {
    let data: Vec<T> = match view.dtype() {
        StDtype::F32 => f32::read_le(view.data()).into_iter().map(|v| T::lit(v as f64)).collect(),
        StDtype::F64 => f64::read_le(view.data()).into_iter().map(T::lit).collect(),
        other => {
            return Err(NnError::Dtype {
                name: name.to_string(),
                dtype: format!("{other:?}"),
            })
        }
    };
    Ok(ArrayD::from_shape_vec(IxDyn(view.shape()), data).expect("safetensors shape matches data"))
}

/// Parsed safetensors file kept alongside its checksum for error context.
pub struct TensorFile {
    pub path: String,
    pub checksum: String,
    bytes: Vec<u8>,
}

impl TensorFile {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Ok(Self::from_bytes(path.display().to_string(), bytes))
    }

    pub fn from_bytes(path: String, bytes: Vec<u8>) -> Self {
        let checksum = sha256_hex(&bytes);
        TensorFile { path, checksum, bytes }
    }

    pub fn parse(&self) -> Result<SafeTensors<'_>> {
        SafeTensors::deserialize(&self.bytes).map_err(|e| self.format_error(e.to_string()))
    }

    pub fn metadata(&self) -> Result<BTreeMap<String, String>> {
        let (_, meta) = SafeTensors::read_metadata(&self.bytes).map_err(|e| self.format_error(e.to_string()))?;
        Ok(meta
            .metadata()
            .clone()
            .map(|m| m.into_iter().collect())
            .unwrap_or_default())
    }

    pub fn format_error(&self, message: String) -> NnError {
        NnError::Format {
            path: self.path.clone(),
            checksum: self.checksum.clone(),
            message,
        }
    }
}

/// Copies matching tensors from `file` into every visited parameter and buffer.
///
/// Shapes must match exactly, except that a stored `out×in` linear weight may
/// fill an `out×in×1×1` pointwise convolution.
pub struct Loader<'a> {
    pub file: &'a TensorFile,
    pub tensors: SafeTensors<'a>,
    pub prefix: String,
    pub used: HashSet<String>,
    pub error: Option<NnError>,
}

impl<'a> Loader<'a> {
    pub fn new(file: &'a TensorFile, prefix: &str) -> Result<Self> {
        Ok(Loader {
            tensors: file.parse()?,
            file,
            prefix: prefix.to_string(),
            used: HashSet::new(),
            error: None,
        })
    }

    fn fetch<T: Scalar>(&mut self, name: &str, expected: &[usize]) -> Option<ArrayD<T>> {
        if self.error.is_some() {
            return None;
        }
        let key = format!("{}{}", self.prefix, name);
        let view = match self.tensors.tensor(&key) {
            Ok(v) => v,
            Err(_) => {
                self.error = Some(NnError::MissingTensor {
                    path: self.file.path.clone(),
                    checksum: self.file.checksum.clone(),
                    name: key,
                });
                return None;
            }
        };
        let compatible = view.shape() == expected || squeezed(view.shape()) == squeezed(expected);
        if !compatible {
            self.error = Some(NnError::ShapeMismatch {
                name: key,
                expected: expected.to_vec(),
                actual: view.shape().to_vec(),
                checksum: self.file.checksum.clone(),
            });
            return None;
        }
        match tensor_from_view::<T>(&key, &view) {
            Ok(a) => {
                self.used.insert(key);
                Some(a.into_shape_with_order(IxDyn(expected)).expect("element count checked"))
            }
            Err(e) => {
                self.error = Some(e);
                None
            }
        }
    }

    pub fn finish(self) -> Result<HashSet<String>> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.used),
        }
    }
}

fn squeezed(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    while s.len() > 2 && s.last() == Some(&1) {
        s.pop();
    }
    s
}

impl<T: Scalar> ParamVisitor<T> for Loader<'_> {
    fn param(&mut self, name: &str, param: &mut Param<T>) {
        if let Some(v) = self.fetch::<T>(name, &param.value.shape().to_vec()) {
            param.value = v;
        }
    }

    fn buffer(&mut self, name: &str, buffer: &mut ArrayD<T>) {
        if let Some(v) = self.fetch::<T>(name, &buffer.shape().to_vec()) {
            *buffer = v;
        }
    }
}

/// Loads a torchvision `state_dict` exported to safetensors into `backbone`.
///
/// Classifier weights (`fc.*`, `classifier.*` beyond what the trunk keeps) and
/// `num_batches_tracked` counters are ignored; any other unused tensor is an
/// error. Returns the file's sha256.
pub fn load_pretrained<T: Scalar>(backbone: &mut Backbone<T>, path: &Path) -> Result<String> {
    let file = TensorFile::open(path)?;
    let mut loader = Loader::new(&file, "")?;
    backbone.visit("", &mut loader);
    let names: Vec<String> = loader.tensors.names().into_iter().map(str::to_string).collect();
    let used = loader.finish()?;
    let unused: Vec<String> = names
        .into_iter()
        .filter(|n| !used.contains(n))
        .filter(|n| !(n.ends_with("num_batches_tracked") || n.starts_with("fc.") || n.starts_with("classifier.")))
        .collect();
    if !unused.is_empty() {
        return Err(NnError::UnusedTensors {
            path: file.path.clone(),
            checksum: file.checksum.clone(),
            names: unused,
        });
    }
    Ok(file.checksum)
}
