//! Feature parity with torchvision's reference implementations.
//!
//! `fixtures/torchvision_parity.py` fills every state_dict tensor from a closed
//! form and records the pooled features of a fixed 64×64 input; the same
//! pattern is applied here by parameter name, so a pass also proves the names
//! line up with torchvision checkpoints.

use std::collections::{BTreeMap, BTreeSet};

use csicount_nn::{Backbone, BackboneKind, Mode, Param, ParamVisitor};
use ndarray::{Array4, ArrayD};

fn pattern(name: &str, shape: &[usize]) -> Vec<f64> {
    let phase = name.bytes().map(|b| b as u64).sum::<u64>() as f64 * 0.01;
    let leaf = name.rsplit('.').next().unwrap();
    let n: usize = shape.iter().product();
    (0..n)
        .map(|j| {
            let s = (0.1 * j as f64 + phase).sin();
            match leaf {
                "running_mean" => 0.1 * s,
                "running_var" => 1.0 + 0.5 * s.abs(),
                "layer_scale" => 0.5 + 0.1 * s,
                _ if shape.len() >= 2 => {
                    let fan_in = shape[1] * shape[2..].iter().product::<usize>();
                    s / (fan_in as f64).sqrt()
                }
                "weight" => 1.0 + 0.1 * s,
                _ => 0.1 * s,
            }
        })
        .collect()
}

/// Applies the pattern by name. The ConvNeXt pointwise linears are `out×in`
/// in torchvision and `out×in×1×1` here; the pattern only depends on fan-in,
/// which agrees.
struct Fill(BTreeSet<String>);

impl Fill {
    fn fill(&mut self, name: &str, target: &mut ArrayD<f64>) {
        let values = pattern(name, target.shape());
        *target = ArrayD::from_shape_vec(target.shape().to_vec(), values).unwrap();
        self.0.insert(name.to_string());
    }
}

impl ParamVisitor<f64> for Fill {
    fn param(&mut self, name: &str, param: &mut Param<f64>) {
        self.fill(name, &mut param.value);
    }

    fn buffer(&mut self, name: &str, buffer: &mut ArrayD<f64>) {
        self.fill(name, buffer);
    }
}

#[test]
fn pooled_features_match_torchvision() {
    let fixture: serde_json::Value =
        serde_json::from_str(include_str!("fixtures/torchvision_parity.json")).unwrap();
    let x = Array4::from_shape_vec(
        (1, 3, 64, 64),
        (0..3 * 64 * 64).map(|j| (0.05 * j as f64).sin()).collect(),
    )
    .unwrap();
    for kind in BackboneKind::ALL {
        let entry = &fixture[kind.as_str()];
        let mut backbone = Backbone::<f64>::new(kind, 0);
        let mut fill = Fill(BTreeSet::new());
        backbone.visit("", &mut fill);
        let expected_names: BTreeSet<String> = entry["names"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        assert_eq!(fill.0, expected_names, "{kind}: parameter names differ from torchvision");

        let z = backbone.forward(x.clone(), Mode::Infer);
        let expected: Vec<f64> = entry["features"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(z.dim(), (1, kind.feature_dim()));
        let worst = z
            .iter()
            .zip(expected.iter())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "{kind}: worst relative deviation {worst:e}");
    }
}

#[test]
fn loader_round_trips_a_torchvision_style_file() {
    use csicount_nn::weights::{load_pretrained, serialize};

    let kind = BackboneKind::MobilenetV3Small;
    let mut source = Backbone::<f32>::new(kind, 11);
    struct Collect(BTreeMap<String, ArrayD<f32>>);
    impl ParamVisitor<f32> for Collect {
        fn param(&mut self, name: &str, p: &mut Param<f32>) {
            self.0.insert(name.to_string(), p.value.clone());
        }
        fn buffer(&mut self, name: &str, b: &mut ArrayD<f32>) {
            self.0.insert(name.to_string(), b.clone());
        }
    }
    let mut tensors = Collect(BTreeMap::new());
    source.visit("", &mut tensors);
    let reference = tensors.0.clone();
    // classifier and counters are present in real checkpoints and must be skipped
    tensors.0.insert("classifier.0.weight".into(), ArrayD::zeros(vec![1024, 576]));
    tensors.0.insert("features.0.1.num_batches_tracked".into(), ArrayD::zeros(vec![]));
    let bytes = serialize(&tensors.0, None).unwrap();
    let dir = std::env::temp_dir().join(format!("csicount-nn-loader-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("mobilenet.safetensors");
    std::fs::write(&path, &bytes).unwrap();

    let mut target = Backbone::<f32>::new(kind, 12);
    let checksum = load_pretrained(&mut target, &path).unwrap();
    assert_eq!(checksum.len(), 64);
    let mut loaded = Collect(BTreeMap::new());
    target.visit("", &mut loaded);
    assert_eq!(loaded.0, reference);

    // a trunk tensor missing from the file names itself in the error
    let mut partial = reference.clone();
    partial.remove("features.1.block.0.0.weight");
    std::fs::write(&path, serialize(&partial, None).unwrap()).unwrap();
    let err = load_pretrained(&mut Backbone::<f32>::new(kind, 12), &path).unwrap_err();
    assert!(err.to_string().contains("features.1.block.0.0.weight"), "{err}");
    std::fs::remove_dir_all(&dir).ok();
}
