//! Residual encoder/decoder blocks built from a strided 1x1 branch and a
//! conv + depthwise-separable branch.

use super::conv::{Conv2d, DepthwiseConv2d};
use super::ops::{max_pool2, max_pool2_backward, relu, relu_backward, upsample2, upsample2_backward};
use super::param::Param;
use crate::tensor::{Real, Tensor};

/// Halves the spatial size: `relu(conv1x1_s2(x)) + maxpool(relu(pw(dw(relu(conv3x3(x))))))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock<T> {
    shortcut: Conv2d<T>,
    conv: Conv2d<T>,
    depthwise: DepthwiseConv2d<T>,
    pointwise: Conv2d<T>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    shortcut: Tensor<T>,
    conv: Tensor<T>,
    depthwise: Tensor<T>,
    pointwise: Tensor<T>,
    pool_arg: Vec<u8>,
}

impl<T: Real> EncoderBlock<T> {
    pub fn new(name: &str, in_channels: usize, out_channels: usize) -> Self {
        EncoderBlock {
            shortcut: Conv2d::new(&format!("{name}.shortcut"), in_channels, out_channels, 1, 2),
            conv: Conv2d::new(&format!("{name}.conv"), in_channels, out_channels, 3, 1),
            depthwise: DepthwiseConv2d::new(&format!("{name}.depthwise"), out_channels),
            pointwise: Conv2d::new(&format!("{name}.pointwise"), out_channels, out_channels, 1, 1),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.shortcut.params();
        p.extend(self.conv.params());
        p.extend(self.depthwise.params());
        p.extend(self.pointwise.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.shortcut.params_mut();
        p.extend(self.conv.params_mut());
        p.extend(self.depthwise.params_mut());
        p.extend(self.pointwise.params_mut());
        p
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, EncoderTrace<T>) {
        let shortcut = relu(self.shortcut.forward(x));
        let conv = relu(self.conv.forward(x));
        let depthwise = self.depthwise.forward(&conv);
        let pointwise = relu(self.pointwise.forward(&depthwise));
        let (mut out, pool_arg) = max_pool2(&pointwise);
        out.add_assign(&shortcut);
        (
            out,
            EncoderTrace {
                shortcut,
                conv,
                depthwise,
                pointwise,
                pool_arg,
            },
        )
    }

    pub fn backward(&mut self, x: &Tensor<T>, trace: &EncoderTrace<T>, grad: &Tensor<T>) -> Tensor<T> {
        let g_short = relu_backward(&trace.shortcut, grad);
        let mut dx = self
            .shortcut
            .backward(x, &g_short, true)
            .expect("input grad requested");

        let g_pw = max_pool2_backward(grad, &trace.pool_arg, trace.pointwise.shape());
        let g_pw = relu_backward(&trace.pointwise, &g_pw);
        let g_dw = self
            .pointwise
            .backward(&trace.depthwise, &g_pw, true)
            .expect("input grad requested");
        let g_conv = self.depthwise.backward(&trace.conv, &g_dw);
        let g_conv = relu_backward(&trace.conv, &g_conv);
        let dx_main = self
            .conv
            .backward(x, &g_conv, true)
            .expect("input grad requested");
        dx.add_assign(&dx_main);
        dx
    }
}

/// Doubles the spatial size: `up(relu(conv1x1(x))) + up(relu(pw(dw(relu(conv3x3(x))))))`.
///
/// The 1x1 shortcut is evaluated before upsampling; nearest-neighbour
/// upsampling commutes with pointwise maps, so this equals upsample-then-conv
/// at a quarter of the cost.
#[derive(Clone, Debug)]
pub struct DecoderBlock<T> {
    shortcut: Conv2d<T>,
    conv: Conv2d<T>,
    depthwise: DepthwiseConv2d<T>,
    pointwise: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderTrace<T> {
    shortcut: Tensor<T>,
    conv: Tensor<T>,
    depthwise: Tensor<T>,
    pointwise: Tensor<T>,
}

impl<T: Real> DecoderBlock<T> {
    pub fn new(name: &str, in_channels: usize, out_channels: usize) -> Self {
        DecoderBlock {
            shortcut: Conv2d::new(&format!("{name}.shortcut"), in_channels, out_channels, 1, 1),
            conv: Conv2d::new(&format!("{name}.conv"), in_channels, out_channels, 3, 1),
            depthwise: DepthwiseConv2d::new(&format!("{name}.depthwise"), out_channels),
            pointwise: Conv2d::new(&format!("{name}.pointwise"), out_channels, out_channels, 1, 1),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.shortcut.params();
        p.extend(self.conv.params());
        p.extend(self.depthwise.params());
        p.extend(self.pointwise.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.shortcut.params_mut();
        p.extend(self.conv.params_mut());
        p.extend(self.depthwise.params_mut());
        p.extend(self.pointwise.params_mut());
        p
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, DecoderTrace<T>) {
        let shortcut = relu(self.shortcut.forward(x));
        let conv = relu(self.conv.forward(x));
        let depthwise = self.depthwise.forward(&conv);
        let pointwise = relu(self.pointwise.forward(&depthwise));
        let mut low = shortcut.clone();
        low.add_assign(&pointwise);
        (
            upsample2(&low),
            DecoderTrace {
                shortcut,
                conv,
                depthwise,
                pointwise,
            },
        )
    }

    pub fn backward(&mut self, x: &Tensor<T>, trace: &DecoderTrace<T>, grad: &Tensor<T>) -> Tensor<T> {
        let g_low = upsample2_backward(grad);
        let g_short = relu_backward(&trace.shortcut, &g_low);
        let mut dx = self
            .shortcut
            .backward(x, &g_short, true)
            .expect("input grad requested");

        let g_pw = relu_backward(&trace.pointwise, &g_low);
        let g_dw = self
            .pointwise
            .backward(&trace.depthwise, &g_pw, true)
            .expect("input grad requested");
        let g_conv = self.depthwise.backward(&trace.conv, &g_dw);
        let g_conv = relu_backward(&trace.conv, &g_conv);
        let dx_main = self
            .conv
            .backward(x, &g_conv, true)
            .expect("input grad requested");
        dx.add_assign(&dx_main);
        dx
    }
}
