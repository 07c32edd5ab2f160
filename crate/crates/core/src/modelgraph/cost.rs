//! Parameter and multiply-accumulate counts.
//!
//! One multiply-accumulate counts as one FLOP. A conv layer costs
//! `d²·(C_in/groups)·C_out·H'·W'`, an fc layer `l_in·l_out`; biases,
//! activations and pooling are free.

use serde::Serialize;

use super::{ActShape, LayerKind, ModelGraph};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerParams {
    pub name: String,
    pub weights: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub per_layer: Vec<LayerParams>,
    pub total_weights: usize,
    pub total_bias: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.total_weights + self.total_bias
    }

    /// Weight count of an original layer, summed over its group members if
    /// it was decomposed.
    pub fn layer_weights(&self, name: &str, g: &ModelGraph) -> usize {
        unit_members(name, g)
            .iter()
            .filter_map(|m| self.per_layer.iter().find(|p| &p.name == m))
            .map(|p| p.weights)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub name: String,
    pub input: ActShape,
    pub output: ActShape,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    pub per_layer: Vec<LayerFlops>,
    pub total: u64,
}

impl FlopCount {
    /// MACs of an original layer, summed over its group members if it was
    /// decomposed.
    pub fn layer_macs(&self, name: &str, g: &ModelGraph) -> u64 {
        unit_members(name, g)
            .iter()
            .filter_map(|m| self.per_layer.iter().find(|p| &p.name == m))
            .map(|p| p.macs)
            .sum()
    }
}

fn unit_members(name: &str, g: &ModelGraph) -> Vec<String> {
    match g.group(name) {
        Ok(group) => group.members.clone(),
        Err(_) => vec![name.to_string()],
    }
}

pub fn count_params(g: &ModelGraph) -> ParamCount {
    let per_layer: Vec<LayerParams> = g
        .layers()
        .iter()
        .map(|l| {
            let (weights, bias) = l
                .kind
                .params()
                .map_or((0, 0), |(w, b)| (w.len(), b.map_or(0, <[f64]>::len)));
            LayerParams {
                name: l.name.clone(),
                weights,
                bias,
            }
        })
        .collect();
    ParamCount {
        total_weights: per_layer.iter().map(|p| p.weights).sum(),
        total_bias: per_layer.iter().map(|p| p.bias).sum(),
        per_layer,
    }
}

/// MAC counts for an H×W×C input of the given shape.
pub fn count_flops(g: &ModelGraph, input_shape: [usize; 3]) -> Result<FlopCount> {
    let [h, w, c] = input_shape;
    let mut shape = ActShape::Spatial { h, w, c };
    let mut per_layer = Vec::with_capacity(g.layers().len());
    for layer in g.layers() {
        let out = super::layer_output_shape(layer, shape)?;
        let macs = match (&layer.kind, out) {
            (LayerKind::Conv2d(conv), ActShape::Spatial { h, w, .. }) => {
                let d = conv.d() as u64;
                d * d * conv.weight.c_in() as u64 * conv.c_out() as u64 * (h * w) as u64
            }
            (LayerKind::Fc(fc), _) => (fc.l_in() * fc.l_out()) as u64,
            _ => 0,
        };
        per_layer.push(LayerFlops {
            name: layer.name.clone(),
            input: shape,
            output: out,
            macs,
        });
        shape = out;
    }
    Ok(FlopCount {
        total: per_layer.iter().map(|p| p.macs).sum(),
        per_layer,
    })
}
