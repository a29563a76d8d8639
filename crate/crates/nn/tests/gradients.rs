//! Central finite-difference checks of every backward pass, in f64.

use std::collections::BTreeMap;

use csicount_nn::layers::{
    Activation, ActivationKind, BatchNorm2d, ChannelLayerNorm, Conv2d, GlobalAvgPool, Linear, MaxPool2d,
};
use csicount_nn::{init::Init, Backbone, BackboneKind, Mode, Module, Param, ParamVisitor};
use ndarray::{Array2, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;

fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.random_range(-1.5..1.5))
}

struct GradSnapshot(BTreeMap<String, ArrayD<f64>>);

impl ParamVisitor<f64> for GradSnapshot {
    fn param(&mut self, name: &str, param: &mut Param<f64>) {
        self.0.insert(name.to_string(), param.grad.clone());
    }
}

struct ZeroGrad;

impl ParamVisitor<f64> for ZeroGrad {
    fn param(&mut self, _name: &str, param: &mut Param<f64>) {
        param.zero_grad();
    }
}

struct ScaleUp;

impl ParamVisitor<f64> for ScaleUp {
    fn param(&mut self, name: &str, param: &mut Param<f64>) {
        if name.ends_with("layer_scale") {
            param.value.fill(0.5);
        }
    }
}

struct Nudge<'a> {
    name: &'a str,
    index: usize,
    delta: f64,
}

impl ParamVisitor<f64> for Nudge<'_> {
    fn param(&mut self, name: &str, param: &mut Param<f64>) {
        if name == self.name {
            let slot = param.value.iter_mut().nth(self.index).expect("index in range");
            *slot += self.delta;
        }
    }
}

fn close(analytic: f64, numeric: f64, tol: f64) -> bool {
    (analytic - numeric).abs() <= tol * analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks d(Σ y∘r)/dx and d(Σ y∘r)/dθ at randomly sampled coordinates.
fn check<M, F>(module: &mut M, x: Array4<f64>, mode: Mode, forward: F, samples: usize, max_tensors: usize, tol: f64, seed: u64)
where
    M: ?Sized,
    F: Fn(&mut M, Array4<f64>, Mode) -> Array4<f64>,
    M: GradModule,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = forward(module, x.clone(), mode);
    let r = Array4::from_shape_simple_fn(y.raw_dim(), || rng.random_range(-1.0..1.0));
    module.visit_all(&mut ZeroGrad);
    let dx = module.backward_all(r.clone());
    let mut grads = GradSnapshot(BTreeMap::new());
    module.visit_all(&mut grads);

    let loss = |m: &mut M, input: Array4<f64>| -> f64 { (forward(m, input, mode) * &r).sum() };

    for _ in 0..samples {
        let idx = rng.random_range(0..x.len());
        let mut xp = x.clone();
        *xp.iter_mut().nth(idx).unwrap() += EPS;
        let mut xm = x.clone();
        *xm.iter_mut().nth(idx).unwrap() -= EPS;
        let numeric = (loss(module, xp) - loss(module, xm)) / (2.0 * EPS);
        let analytic = *dx.iter().nth(idx).unwrap();
        assert!(close(analytic, numeric, tol), "input[{idx}]: analytic {analytic} vs numeric {numeric}");
    }

    let mut names: Vec<&String> = grads.0.keys().collect();
    while names.len() > max_tensors {
        names.remove(rng.random_range(0..names.len()));
    }
    for name in names {
        let grad = &grads.0[name];
        for _ in 0..samples.min(grad.len()) {
            let idx = rng.random_range(0..grad.len());
            module.visit_all(&mut Nudge { name, index: idx, delta: EPS });
            let lp = loss(module, x.clone());
            module.visit_all(&mut Nudge { name, index: idx, delta: -2.0 * EPS });
            let lm = loss(module, x.clone());
            module.visit_all(&mut Nudge { name, index: idx, delta: EPS });
            let numeric = (lp - lm) / (2.0 * EPS);
            let analytic = *grad.iter().nth(idx).unwrap();
            assert!(close(analytic, numeric, tol), "{name}[{idx}]: analytic {analytic} vs numeric {numeric}");
        }
    }
}

trait GradModule {
    fn visit_all(&mut self, v: &mut dyn ParamVisitor<f64>);
    fn backward_all(&mut self, g: Array4<f64>) -> Array4<f64>;
}

impl<M: Module<f64>> GradModule for M {
    fn visit_all(&mut self, v: &mut dyn ParamVisitor<f64>) {
        self.visit("", v);
    }

    fn backward_all(&mut self, g: Array4<f64>) -> Array4<f64> {
        self.backward(g)
    }
}

fn check_module<M: Module<f64>>(module: &mut M, x: Array4<f64>, mode: Mode, seed: u64) {
    check(module, x, mode, |m, x, mode| m.forward(x, mode), 12, usize::MAX, 1e-5, seed);
}

fn randomized_conv(init: &mut Init, conv: Conv2d<f64>) -> Conv2d<f64> {
    conv.torch_default(init)
}

#[test]
fn dense_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut init = Init::new(1);
    let mut conv = randomized_conv(&mut init, Conv2d::new(3, 4, 3, 2, 1, 1, true));
    check_module(&mut conv, random4(&mut rng, (2, 3, 7, 6)), Mode::Eval, 10);
}

#[test]
fn pointwise_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut init = Init::new(2);
    let mut conv = randomized_conv(&mut init, Conv2d::new(5, 3, 1, 1, 0, 1, false));
    check_module(&mut conv, random4(&mut rng, (2, 5, 4, 4)), Mode::Eval, 11);
}

#[test]
fn grouped_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut init = Init::new(3);
    let mut conv = randomized_conv(&mut init, Conv2d::new(4, 6, 2, 2, 0, 2, true));
    check_module(&mut conv, random4(&mut rng, (2, 4, 6, 6)), Mode::Eval, 12);
}

#[test]
fn depthwise_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut init = Init::new(4);
    let mut conv = randomized_conv(&mut init, Conv2d::new(3, 3, 5, 2, 2, 3, true));
    check_module(&mut conv, random4(&mut rng, (2, 3, 7, 7)), Mode::Eval, 13);
}

#[test]
fn batch_norm_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bn = BatchNorm2d::<f64>::new(3, 1e-5, 0.1);
    bn.weight.value = ArrayD::from_shape_vec(vec![3], vec![0.5, -1.2, 2.0]).unwrap();
    bn.bias.value = ArrayD::from_shape_vec(vec![3], vec![0.1, 0.0, -0.3]).unwrap();
    check_module(&mut bn, random4(&mut rng, (3, 3, 2, 3)), Mode::Train { seed: 0 }, 14);
    check_module(&mut bn, random4(&mut rng, (3, 3, 2, 3)), Mode::Eval, 15);
}

#[test]
fn channel_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ln = ChannelLayerNorm::<f64>::new(5, 1e-6);
    ln.weight.value = ArrayD::from_shape_vec(vec![5], vec![0.5, -1.2, 2.0, 1.0, 0.3]).unwrap();
    check_module(&mut ln, random4(&mut rng, (2, 5, 3, 2)), Mode::Eval, 16);
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (i, kind) in [
        ActivationKind::Relu,
        ActivationKind::Gelu,
        ActivationKind::Hardswish,
        ActivationKind::Hardsigmoid,
    ]
    .into_iter()
    .enumerate()
    {
        let mut act = Activation::<f64>::new(kind);
        let x = random4(&mut rng, (2, 2, 3, 3)).mapv(|v| v * 3.0);
        check_module(&mut act, x, Mode::Eval, 20 + i as u64);
    }
}

#[test]
fn pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut max = MaxPool2d::<f64>::new(3, 2, 1);
    check_module(&mut max, random4(&mut rng, (2, 2, 7, 5)), Mode::Eval, 30);
    let mut avg = GlobalAvgPool::<f64>::default();
    check_module(&mut avg, random4(&mut rng, (2, 3, 4, 5)), Mode::Eval, 31);
}

#[test]
fn linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut init = Init::new(9);
    let mut lin = Linear::<f64>::new(4, 3).torch_default(&mut init);
    let x = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-1.0..1.0));
    let r = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
    let y = lin.forward(x.clone(), true);
    let dx = lin.backward(r.clone());
    let loss = |lin: &mut Linear<f64>, x: &Array2<f64>| (lin.forward(x.clone(), false) * &r).sum();
    assert_eq!(y.dim(), (5, 3));
    for idx in 0..x.len() {
        let mut xp = x.clone();
        *xp.iter_mut().nth(idx).unwrap() += EPS;
        let mut xm = x.clone();
        *xm.iter_mut().nth(idx).unwrap() -= EPS;
        let numeric = (loss(&mut lin, &xp) - loss(&mut lin, &xm)) / (2.0 * EPS);
        assert!(close(*dx.iter().nth(idx).unwrap(), numeric, 1e-5));
    }
    let dw = lin.weight.grad.clone();
    for idx in 0..dw.len() {
        *lin.weight.value.iter_mut().nth(idx).unwrap() += EPS;
        let lp = loss(&mut lin, &x);
        *lin.weight.value.iter_mut().nth(idx).unwrap() -= 2.0 * EPS;
        let lm = loss(&mut lin, &x);
        *lin.weight.value.iter_mut().nth(idx).unwrap() += EPS;
        assert!(close(*dw.iter().nth(idx).unwrap(), (lp - lm) / (2.0 * EPS), 1e-5));
    }
}

struct BackboneUnderTest(Backbone<f64>);

impl GradModule for BackboneUnderTest {
    fn visit_all(&mut self, v: &mut dyn ParamVisitor<f64>) {
        self.0.visit("", v);
    }

    fn backward_all(&mut self, g: Array4<f64>) -> Array4<f64> {
        let (n, d, _, _) = g.dim();
        self.0.backward(g.into_shape_with_order((n, d)).unwrap())
    }
}

fn backbone_forward(b: &mut BackboneUnderTest, x: Array4<f64>, mode: Mode) -> Array4<f64> {
    let z = b.0.forward(x, mode);
    let (n, d) = z.dim();
    z.into_shape_with_order((n, d, 1, 1)).unwrap()
}

#[test]
fn backbones_train_mode() {
    for (i, kind) in BackboneKind::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + i as u64);
        let mut b = BackboneUnderTest(Backbone::new(kind, 7));
        // the default 1e-6 layer scale leaves ConvNeXt gradients below FD noise
        b.visit_all(&mut ScaleUp);
        let x = random4(&mut rng, (2, 3, 32, 32));
        // Few coordinates per tensor: the nets have up to 28M parameters. Each
        // layer is checked at 1e-5 above; here thousands of ReLU kinks sit
        // within reach of the perturbation, so only wiring errors are targeted.
        check(&mut b, x, Mode::Train { seed: 3 }, backbone_forward, 2, 16, 1e-3, 50 + i as u64);
    }
}
