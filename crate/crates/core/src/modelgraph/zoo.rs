//! Ready-made graphs: the VGG-16 conv stack, a ResNet stem, and a toy CNN
//! small enough to train on a laptop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Conv2d, LayerKind, Linear, ModelGraph};
use crate::error::Result;
use crate::linalg::Matrix2;
use crate::tensor::{DenseTensor, Kernel4};

/// He-normal conv layer, or all zeros when `rng` is `None`.
pub fn he_conv(
    d: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
    padding: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Conv2d> {
    let mut t = DenseTensor::zeros(vec![d, d, c_out, c_in])?;
    if let Some(rng) = rng {
        let normal = Normal::new(0.0, (2.0 / (d * d * c_in) as f64).sqrt()).expect("positive std");
        t.data_mut().iter_mut().for_each(|x| *x = normal.sample(rng));
    }
    Conv2d::new(Kernel4::new(t)?, Some(vec![0.0; c_out]), stride, padding)
}

/// He-normal fc layer, or all zeros when `rng` is `None`.
pub fn he_fc(l_in: usize, l_out: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Linear> {
    let mut w = Matrix2::zeros(l_in, l_out);
    if let Some(rng) = rng {
        let normal = Normal::new(0.0, (2.0 / l_in as f64).sqrt()).expect("positive std");
        w.as_mut_slice().iter_mut().for_each(|x| *x = normal.sample(rng));
    }
    Linear::new(w, Some(vec![0.0; l_out]))
}

/// The 13 conv layers of VGG-16 (`conv1`..`conv13`) with ReLUs and the five
/// 2×2 max-pools, over a square `hw`×`hw`×3 input. Weights are zero unless a
/// seed is given.
pub fn vgg16_convs(hw: usize, seed: Option<u64>) -> Result<ModelGraph> {
    const PLAN: [(usize, usize, bool); 13] = [
        (3, 64, false),
        (64, 64, true),
        (64, 128, false),
        (128, 128, true),
        (128, 256, false),
        (256, 256, false),
        (256, 256, true),
        (256, 512, false),
        (512, 512, false),
        (512, 512, true),
        (512, 512, false),
        (512, 512, false),
        (512, 512, true),
    ];
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let mut g = ModelGraph::new([hw, hw, 3])?;
    let mut pools = 0;
    for (i, &(c_in, c_out, pool)) in PLAN.iter().enumerate() {
        let conv = he_conv(3, c_in, c_out, 1, 1, rng.as_mut())?;
        g = g
            .with(&format!("conv{}", i + 1), LayerKind::Conv2d(conv))?
            .with(&format!("relu{}", i + 1), LayerKind::Relu)?;
        if pool {
            pools += 1;
            g = g.with(&format!("pool{pools}"), LayerKind::MaxPool2d { size: 2, stride: 2 })?;
        }
    }
    Ok(g)
}

/// ResNet stem: 7×7 stride-2 conv 3→64 with padding 3, then ReLU.
pub fn resnet_stem(hw: usize, seed: Option<u64>) -> Result<ModelGraph> {
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    ModelGraph::new([hw, hw, 3])?
        .with("conv1", LayerKind::Conv2d(he_conv(7, 3, 64, 2, 3, rng.as_mut())?))?
        .with("relu1", LayerKind::Relu)
}

/// Two strided 3×3 convs (1→32→128) and one fc layer for 28×28×1 inputs and
/// 10 classes; about 100k parameters.
pub fn toy_cnn(seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelGraph::new([28, 28, 1])?
        .with("conv1", LayerKind::Conv2d(he_conv(3, 1, 32, 2, 1, Some(&mut rng))?))?
        .with("relu1", LayerKind::Relu)?
        .with("conv2", LayerKind::Conv2d(he_conv(3, 32, 128, 2, 1, Some(&mut rng))?))?
        .with("relu2", LayerKind::Relu)?
        .with("flatten", LayerKind::Flatten)?
        .with("fc", LayerKind::Fc(he_fc(7 * 7 * 128, 10, Some(&mut rng))?))?
        .with("head", LayerKind::SoftmaxXentHead)
}
