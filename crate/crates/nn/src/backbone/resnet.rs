use ndarray::Array4;

use crate::init::Init;
use crate::layers::{Activation, ActivationKind, BatchNorm2d, Conv2d, GlobalAvgPool, MaxPool2d, Sequential};
use crate::{join, Mode, Module, ParamVisitor, Scalar};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Activation<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    downsample: Option<Sequential<T>>,
    relu_out: Activation<T>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new(init: &mut Init, inplanes: usize, planes: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || inplanes != planes).then(|| {
            Sequential::new()
                .push(Conv2d::new(inplanes, planes, 1, stride, 0, 1, false).kaiming_fan_out(init))
                .push(BatchNorm2d::new(planes, EPS, MOMENTUM))
        });
        BasicBlock {
            conv1: Conv2d::new(inplanes, planes, 3, stride, 1, 1, false).kaiming_fan_out(init),
            bn1: BatchNorm2d::new(planes, EPS, MOMENTUM),
            relu1: Activation::new(ActivationKind::Relu),
            conv2: Conv2d::new(planes, planes, 3, 1, 1, 1, false).kaiming_fan_out(init),
            bn2: BatchNorm2d::new(planes, EPS, MOMENTUM),
            downsample,
            relu_out: Activation::new(ActivationKind::Relu),
        }
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let identity = match self.downsample.as_mut() {
            Some(ds) => ds.forward(x.clone(), mode),
            None => x.clone(),
        };
        let out = self.conv1.forward(x, mode);
        let out = self.bn1.forward(out, mode);
        let out = self.relu1.forward(out, mode);
        let out = self.conv2.forward(out, mode);
        let out = self.bn2.forward(out, mode);
        self.relu_out.forward(out + identity, mode)
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let grad = self.relu_out.backward(grad);
        let skip = match self.downsample.as_mut() {
            Some(ds) => ds.backward(grad.clone()),
            None => grad.clone(),
        };
        let g = self.bn2.backward(grad);
        let g = self.conv2.backward(g);
        let g = self.relu1.backward(g);
        let g = self.bn1.backward(g);
        self.conv1.backward(g) + skip
    }

    fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        self.conv1.visit(&join(prefix, "conv1"), visitor);
        self.bn1.visit(&join(prefix, "bn1"), visitor);
        self.conv2.visit(&join(prefix, "conv2"), visitor);
        self.bn2.visit(&join(prefix, "bn2"), visitor);
        if let Some(ds) = self.downsample.as_mut() {
            ds.visit(&join(prefix, "downsample"), visitor);
        }
    }
}

/// ResNet-18 trunk up to and including global average pooling (512 features).
pub(crate) fn resnet18<T: Scalar>(init: &mut Init) -> Sequential<T> {
    let mut net = Sequential::new()
        .push_named("conv1", Conv2d::new(3, 64, 7, 2, 3, 1, false).kaiming_fan_out(init))
        .push_named("bn1", BatchNorm2d::new(64, EPS, MOMENTUM))
        .push_anonymous(Activation::new(ActivationKind::Relu))
        .push_anonymous(MaxPool2d::new(3, 2, 1));
    let mut inplanes = 64;
    for (i, (planes, stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)].into_iter().enumerate() {
        let layer = Sequential::new()
            .push(BasicBlock::new(init, inplanes, planes, stride))
            .push(BasicBlock::new(init, planes, planes, 1));
        inplanes = planes;
        net = net.push_named(&format!("layer{}", i + 1), layer);
    }
    net.push_anonymous(GlobalAvgPool::default())
}
