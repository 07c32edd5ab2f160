//! Sequential model representation and layer substitution.
//!
//! A [`ModelGraph`] is an ordered list of named layers over NHWC
//! activations. Factorizing a layer replaces it by a short run of smaller
//! layers, recorded as a [`DecomposedGroup`] named after the original layer:
//!
//! | scheme  | members                                                            |
//! |---------|--------------------------------------------------------------------|
//! | tucker2 | `name.in` 1×1 C_in→r_in, `name.core` d×d r_in→r_out, `name.out` 1×1 r_out→C_out |
//! | cpd3    | `name.in` 1×1 C_in→R, `name.core` depthwise d×d on R, `name.out` 1×1 R→C_out |
//! | svd     | `name.in` fc l_in→R, `name.out` fc R→l_out                        |
//!
//! The spatial member keeps the original stride and padding and the last
//! member carries the original bias, so the group computes the same affine
//! map as a layer holding the reconstructed weights.

mod cost;
pub mod zoo;

use serde::{Deserialize, Serialize};

use crate::decomp::{CPFactors, Ranks, SVDFactors, Scheme, Tucker2Factors};
use crate::error::{Error, Result};
use crate::linalg::Matrix2;
use crate::tensor::{DenseTensor, Kernel4};

pub use cost::{count_flops, count_params, FlopCount, ParamCount};

/// 2-D convolution over NHWC activations with a d×d×C_out×(C_in/groups)
/// kernel. Only dense (`groups == 1`) and depthwise (`groups == C_in ==
/// C_out`) forms are supported.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Kernel4,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(weight: Kernel4, bias: Option<Vec<f64>>, stride: usize, padding: usize) -> Result<Self> {
        let c = Self {
            weight,
            bias,
            stride,
            padding,
            groups: 1,
        };
        c.validate()?;
        Ok(c)
    }

    /// Depthwise convolution; `weight` is d×d×C×1.
    pub fn depthwise(weight: Kernel4, bias: Option<Vec<f64>>, stride: usize, padding: usize) -> Result<Self> {
        let c = Self {
            groups: weight.c_out(),
            weight,
            bias,
            stride,
            padding,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidShape("conv stride must be positive".into()));
        }
        let depthwise = self.groups > 1;
        if depthwise && (self.weight.c_in() != 1 || self.groups != self.weight.c_out()) {
            return Err(Error::UnsupportedLayer(format!(
                "grouped conv must be depthwise, got {} groups for a {}x{} kernel",
                self.groups,
                self.weight.c_out(),
                self.weight.c_in()
            )));
        }
        if self.groups == 0 {
            return Err(Error::InvalidShape("conv groups must be positive".into()));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.c_out() {
                return Err(Error::ShapeMismatch(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    self.c_out()
                )));
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.weight.d()
    }

    pub fn c_out(&self) -> usize {
        self.weight.c_out()
    }

    pub fn c_in(&self) -> usize {
        self.weight.c_in() * self.groups
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let d = self.d();
        if h + 2 * self.padding < d || w + 2 * self.padding < d {
            return Err(Error::ShapeMismatch(format!(
                "{h}x{w} input too small for a {d}x{d} kernel with padding {}",
                self.padding
            )));
        }
        Ok((
            (h + 2 * self.padding - d) / self.stride + 1,
            (w + 2 * self.padding - d) / self.stride + 1,
        ))
    }
}

/// Fully connected layer `y = x·W + b` with an l_in×l_out weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix2,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    pub fn new(weight: Matrix2, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "bias has {} entries for {} outputs",
                    b.len(),
                    weight.cols()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn l_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn l_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d(Conv2d),
    Fc(Linear),
    Relu,
    MaxPool2d { size: usize, stride: usize },
    Flatten,
    /// Marks the logits; the loss is softmax cross-entropy.
    SoftmaxXentHead,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(c) if c.is_depthwise() => "grouped_conv2d",
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Fc(_) => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::SoftmaxXentHead => "softmax_xent_head",
        }
    }

    /// Weight and bias buffers, for layers that have them.
    pub fn params(&self) -> Option<(&[f64], Option<&[f64]>)> {
        match self {
            LayerKind::Conv2d(c) => Some((c.weight.tensor().data(), c.bias.as_deref())),
            LayerKind::Fc(l) => Some((l.weight.as_slice(), l.bias.as_deref())),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut [f64], Option<&mut [f64]>)> {
        match self {
            LayerKind::Conv2d(c) => Some((c.weight.data_mut(), c.bias.as_deref_mut())),
            LayerKind::Fc(l) => Some((l.weight.as_mut_slice(), l.bias.as_deref_mut())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Activation shape of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat { n: usize },
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Spatial { h, w, c } => h * w * c,
            ActShape::Flat { n } => n,
        }
    }
}

impl std::fmt::Display for ActShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActShape::Spatial { h, w, c } => write!(f, "{h}x{w}x{c}"),
            ActShape::Flat { n } => write!(f, "{n}"),
        }
    }
}

/// Run of layers that replaced one original layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedGroup {
    /// Name of the layer that was factorized.
    pub name: String,
    pub scheme: Scheme,
    pub members: Vec<String>,
    pub ranks: Ranks,
    /// Tucker-2 only: whether the outer factors are known to be orthonormal.
    #[serde(default)]
    pub orthonormal: bool,
}

/// Factors of a decomposed group, in whichever scheme it uses.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupFactors {
    Tucker2(Tucker2Factors),
    Cpd3(CPFactors),
    Svd(SVDFactors),
}

impl GroupFactors {
    pub fn scheme(&self) -> Scheme {
        match self {
            GroupFactors::Tucker2(_) => Scheme::Tucker2,
            GroupFactors::Cpd3(_) => Scheme::Cpd3,
            GroupFactors::Svd(_) => Scheme::Svd,
        }
    }

    pub fn ranks(&self) -> Ranks {
        match self {
            GroupFactors::Tucker2(f) => Ranks::tucker2(f.rank()),
            GroupFactors::Cpd3(f) => Ranks::Cpd3 { rank: f.cp_rank() },
            GroupFactors::Svd(f) => Ranks::Svd { rank: f.rank() },
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            GroupFactors::Tucker2(f) => f.param_count(),
            GroupFactors::Cpd3(f) => f.param_count(),
            GroupFactors::Svd(f) => f.param_count(),
        }
    }
}

/// A top-level compressible entity: an original layer, or the group that
/// replaced it.
#[derive(Debug, Clone, PartialEq)]
pub enum Unit {
    Dense { name: String, index: usize },
    Group { name: String, index: usize },
}

impl Unit {
    pub fn name(&self) -> &str {
        match self {
            Unit::Dense { name, .. } | Unit::Group { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    groups: Vec<DecomposedGroup>,
}

impl ModelGraph {
    /// Empty graph over H×W×C inputs.
    pub fn new(input_shape: [usize; 3]) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::InvalidShape(format!("input shape {input_shape:?}")));
        }
        Ok(Self {
            input_shape,
            layers: Vec::new(),
            groups: Vec::new(),
        })
    }

    /// Assembles a graph from parts and checks it.
    pub fn from_parts(input_shape: [usize; 3], layers: Vec<Layer>, groups: Vec<DecomposedGroup>) -> Result<Self> {
        let g = Self {
            input_shape,
            layers,
            groups,
        };
        g.validate()?;
        Ok(g)
    }

    /// Appends a layer, rejecting duplicate names and shape errors.
    pub fn push(&mut self, layer: Layer) -> Result<()> {
        if self.layer_index(&layer.name).is_some() {
            return Err(Error::InvalidParameter(format!("duplicate layer name `{}`", layer.name)));
        }
        self.layers.push(layer);
        if let Err(e) = self.infer_shapes() {
            self.layers.pop();
            return Err(e);
        }
        Ok(())
    }

    /// Builder form of [`push`](Self::push).
    pub fn with(mut self, name: &str, kind: LayerKind) -> Result<Self> {
        self.push(Layer::new(name, kind))?;
        Ok(self)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_act(&self) -> ActShape {
        let [h, w, c] = self.input_shape;
        ActShape::Spatial { h, w, c }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn groups(&self) -> &[DecomposedGroup] {
        &self.groups
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Result<&Layer> {
        self.layer_index(name)
            .map(|i| &self.layers[i])
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn group(&self, name: &str) -> Result<&DecomposedGroup> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))
    }

    /// Group a layer belongs to, if any.
    pub fn group_of(&self, layer: &str) -> Option<&DecomposedGroup> {
        self.groups.iter().find(|g| g.members.iter().any(|m| m == layer))
    }

    /// Output shape of every layer, in order.
    pub fn infer_shapes(&self) -> Result<Vec<ActShape>> {
        let mut shape = self.input_act();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer_output_shape(layer, shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Input shape of every layer, in order.
    pub fn input_shapes(&self) -> Result<Vec<ActShape>> {
        let outs = self.infer_shapes()?;
        let mut ins = Vec::with_capacity(outs.len());
        ins.push(self.input_act());
        ins.extend_from_slice(&outs[..outs.len().saturating_sub(1)]);
        ins.truncate(outs.len());
        Ok(ins)
    }

    pub fn output_shape(&self) -> Result<ActShape> {
        Ok(self.infer_shapes()?.last().copied().unwrap_or(self.input_act()))
    }

    /// Checks names, shapes, and group consistency.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::InvalidShape(format!("input shape {:?}", self.input_shape)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|p| p.name == l.name) {
                return Err(Error::InvalidParameter(format!("duplicate layer name `{}`", l.name)));
            }
            if let LayerKind::Conv2d(c) = &l.kind {
                c.validate()?;
            }
        }
        self.infer_shapes()?;
        for (i, g) in self.groups.iter().enumerate() {
            if self.groups[..i].iter().any(|p| p.name == g.name) {
                return Err(Error::InvalidParameter(format!("duplicate group `{}`", g.name)));
            }
            let first = self
                .layer_index(&g.members[0])
                .ok_or_else(|| Error::UnknownLayer(g.members[0].clone()))?;
            for (k, m) in g.members.iter().enumerate() {
                if self.layers.get(first + k).map(|l| &l.name) != Some(m) {
                    return Err(Error::InvalidShape(format!(
                        "members of group `{}` are not contiguous",
                        g.name
                    )));
                }
            }
            let f = self.read_factors(g)?;
            if f.ranks() != g.ranks || f.scheme() != g.scheme {
                return Err(Error::ShapeMismatch(format!(
                    "group `{}` records {} but its members hold {}",
                    g.name,
                    g.ranks,
                    f.ranks()
                )));
            }
        }
        Ok(())
    }

    /// Original layers and groups in model order.
    pub fn units(&self) -> Vec<Unit> {
        let mut units = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            let name = &self.layers[i].name;
            if let Some((gi, g)) = self
                .groups
                .iter()
                .enumerate()
                .find(|(_, g)| g.members.first() == Some(name))
            {
                units.push(Unit::Group {
                    name: g.name.clone(),
                    index: gi,
                });
                i += g.members.len();
            } else {
                units.push(Unit::Dense {
                    name: name.clone(),
                    index: i,
                });
                i += 1;
            }
        }
        units
    }

    fn dense_target(&self, name: &str) -> Result<usize> {
        let idx = self.layer_index(name).ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        if self.group_of(name).is_some() || self.groups.iter().any(|g| g.name == name) {
            return Err(Error::AlreadyDecomposed(name.to_string()));
        }
        Ok(idx)
    }

    fn replace(&self, idx: usize, members: Vec<Layer>, group: DecomposedGroup) -> Result<ModelGraph> {
        let mut g = self.clone();
        g.layers.splice(idx..=idx, members);
        g.groups.push(group);
        g.validate()?;
        Ok(g)
    }

    /// Replaces a conv layer by its Tucker-2 group.
    pub fn substitute_conv_tucker2(&self, name: &str, f: &Tucker2Factors) -> Result<ModelGraph> {
        let idx = self.dense_target(name)?;
        let conv = as_dense_conv(&self.layers[idx])?;
        f.validate()?;
        if (f.d(), f.c_out(), f.c_in()) != (conv.d(), conv.c_out(), conv.c_in()) {
            return Err(Error::ShapeMismatch(format!(
                "factors of a {}x{} {}->{} kernel for a {}x{} {}->{} conv",
                f.d(),
                f.d(),
                f.c_in(),
                f.c_out(),
                conv.d(),
                conv.d(),
                conv.c_in(),
                conv.c_out()
            )));
        }
        let members = tucker2_members(name, f, conv)?;
        let group = DecomposedGroup {
            name: name.to_string(),
            scheme: Scheme::Tucker2,
            members: members.iter().map(|l| l.name.clone()).collect(),
            ranks: Ranks::tucker2(f.rank()),
            orthonormal: f.orthonormal,
        };
        self.replace(idx, members, group)
    }

    /// Replaces a conv layer by its CP group (depthwise middle layer).
    pub fn substitute_conv_cpd3(&self, name: &str, f: &CPFactors) -> Result<ModelGraph> {
        let idx = self.dense_target(name)?;
        let conv = as_dense_conv(&self.layers[idx])?;
        f.validate()?;
        if (f.d(), f.c_out(), f.c_in()) != (conv.d(), conv.c_out(), conv.c_in()) {
            return Err(Error::ShapeMismatch(format!(
                "CP factors for d={}, {}->{} applied to d={}, {}->{}",
                f.d(),
                f.c_in(),
                f.c_out(),
                conv.d(),
                conv.c_in(),
                conv.c_out()
            )));
        }
        let members = cp_members(name, f, conv)?;
        let group = DecomposedGroup {
            name: name.to_string(),
            scheme: Scheme::Cpd3,
            members: members.iter().map(|l| l.name.clone()).collect(),
            ranks: Ranks::Cpd3 { rank: f.cp_rank() },
            orthonormal: false,
        };
        self.replace(idx, members, group)
    }

    /// Replaces an fc layer by two fc layers.
    pub fn substitute_fc_svd(&self, name: &str, f: &SVDFactors) -> Result<ModelGraph> {
        let idx = self.dense_target(name)?;
        let LayerKind::Fc(fc) = &self.layers[idx].kind else {
            return Err(Error::UnsupportedLayer(format!("`{name}` is not an fc layer")));
        };
        if (f.l_in(), f.l_out()) != (fc.l_in(), fc.l_out()) {
            return Err(Error::ShapeMismatch(format!(
                "SVD factors for {}x{} applied to a {}x{} fc",
                f.l_in(),
                f.l_out(),
                fc.l_in(),
                fc.l_out()
            )));
        }
        let members = svd_members(name, f, fc.bias.clone())?;
        let group = DecomposedGroup {
            name: name.to_string(),
            scheme: Scheme::Svd,
            members: members.iter().map(|l| l.name.clone()).collect(),
            ranks: Ranks::Svd { rank: f.rank() },
            orthonormal: false,
        };
        self.replace(idx, members, group)
    }

    /// Dispatches to the substitution matching the factors' scheme.
    pub fn substitute(&self, name: &str, f: &GroupFactors) -> Result<ModelGraph> {
        match f {
            GroupFactors::Tucker2(f) => self.substitute_conv_tucker2(name, f),
            GroupFactors::Cpd3(f) => self.substitute_conv_cpd3(name, f),
            GroupFactors::Svd(f) => self.substitute_fc_svd(name, f),
        }
    }

    /// Current factors of a group, read back from its member weights.
    pub fn group_factors(&self, name: &str) -> Result<GroupFactors> {
        self.read_factors(self.group(name)?)
    }

    fn member(&self, name: &str) -> Result<&LayerKind> {
        Ok(&self.layer(name)?.kind)
    }

    fn read_factors(&self, g: &DecomposedGroup) -> Result<GroupFactors> {
        let want = if g.scheme == Scheme::Svd { 2 } else { 3 };
        if g.members.len() != want {
            return Err(Error::InvalidShape(format!(
                "group `{}` has {} members, expected {want}",
                g.name,
                g.members.len()
            )));
        }
        match g.scheme {
            Scheme::Tucker2 | Scheme::Cpd3 => {
                let first = member_conv(self.member(&g.members[0])?, &g.members[0])?;
                let core = member_conv(self.member(&g.members[1])?, &g.members[1])?;
                let last = member_conv(self.member(&g.members[2])?, &g.members[2])?;
                if first.d() != 1 || last.d() != 1 || first.is_depthwise() || last.is_depthwise() {
                    return Err(Error::InvalidShape(format!(
                        "outer members of `{}` must be dense 1x1 convs",
                        g.name
                    )));
                }
                let factor_in = pointwise_matrix(first).transpose();
                let factor_out = pointwise_matrix(last);
                if g.scheme == Scheme::Tucker2 {
                    if core.is_depthwise() {
                        return Err(Error::InvalidShape(format!("core of `{}` is depthwise", g.name)));
                    }
                    let f = Tucker2Factors::new(core.weight.tensor().clone(), factor_out, factor_in, g.orthonormal)?;
                    Ok(GroupFactors::Tucker2(f))
                } else {
                    if !core.is_depthwise() && core.c_out() != 1 {
                        return Err(Error::InvalidShape(format!("core of `{}` is not depthwise", g.name)));
                    }
                    let d2 = core.d() * core.d();
                    let spatial = Matrix2::from_col_major(d2, core.c_out(), core.weight.tensor().data().to_vec())?;
                    Ok(GroupFactors::Cpd3(CPFactors::new(spatial, factor_out, factor_in)?))
                }
            }
            Scheme::Svd => {
                let a = member_fc(self.member(&g.members[0])?, &g.members[0])?;
                let b = member_fc(self.member(&g.members[1])?, &g.members[1])?;
                Ok(GroupFactors::Svd(SVDFactors::new(a.weight.clone(), b.weight.clone())?))
            }
        }
    }

    /// Rewrites the members of a group with new factors of equal or lower
    /// ranks. The number of member layers never changes.
    pub fn update_group_weights(&self, name: &str, f: &GroupFactors) -> Result<ModelGraph> {
        let gi = self
            .groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))?;
        let group = &self.groups[gi];
        if f.scheme() != group.scheme {
            return Err(Error::ShapeMismatch(format!(
                "group `{name}` uses {} but got {} factors",
                group.scheme,
                f.scheme()
            )));
        }
        if !f.ranks().le(&group.ranks) {
            return Err(Error::RankIncrease(format!(
                "group `{name}`: {} exceeds current {}",
                f.ranks(),
                group.ranks
            )));
        }
        let start = self
            .layer_index(&group.members[0])
            .ok_or_else(|| Error::UnknownLayer(group.members[0].clone()))?;
        let members = match f {
            GroupFactors::Tucker2(t) => {
                let spatial = member_conv(&self.layers[start + 1].kind, &group.members[1])?;
                let last = member_conv(&self.layers[start + 2].kind, &group.members[2])?;
                let template = Conv2d {
                    bias: last.bias.clone(),
                    ..spatial.clone()
                };
                tucker2_members(name, t, &template)?
            }
            GroupFactors::Cpd3(c) => {
                let spatial = member_conv(&self.layers[start + 1].kind, &group.members[1])?;
                let last = member_conv(&self.layers[start + 2].kind, &group.members[2])?;
                let template = Conv2d {
                    bias: last.bias.clone(),
                    groups: 1,
                    ..spatial.clone()
                };
                cp_members(name, c, &template)?
            }
            GroupFactors::Svd(s) => {
                let last = member_fc(&self.layers[start + 1].kind, &group.members[1])?;
                svd_members(name, s, last.bias.clone())?
            }
        };
        let mut g = self.clone();
        let n = members.len();
        g.layers.splice(start..start + n, members);
        g.groups[gi].ranks = f.ranks();
        g.groups[gi].orthonormal = matches!(f, GroupFactors::Tucker2(t) if t.orthonormal);
        g.validate()?;
        Ok(g)
    }

    /// Marks every Tucker-2 group's factors as no longer orthonormal, as
    /// after training.
    pub fn clear_orthonormal(&mut self) {
        for g in &mut self.groups {
            g.orthonormal = false;
        }
    }

    /// Rounds every weight and bias to the nearest `f32`.
    pub fn round_weights_f32(&mut self) {
        for l in &mut self.layers {
            if let Some((w, b)) = l.kind.params_mut() {
                w.iter_mut().for_each(|x| *x = *x as f32 as f64);
                if let Some(b) = b {
                    b.iter_mut().for_each(|x| *x = *x as f32 as f64);
                }
            }
        }
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.kind.params())
            .map(|(w, b)| w.len() + b.map_or(0, <[f64]>::len))
            .sum()
    }
}

fn layer_output_shape(layer: &Layer, input: ActShape) -> Result<ActShape> {
    let mismatch = |what: &str| {
        Error::ShapeMismatch(format!(
            "layer `{}` ({}) expects {what}, got {input}",
            layer.name,
            layer.kind.name()
        ))
    };
    match (&layer.kind, input) {
        (LayerKind::Conv2d(c), ActShape::Spatial { h, w, c: ch }) => {
            if ch != c.c_in() {
                return Err(mismatch(&format!("{} input channels", c.c_in())));
            }
            let (ho, wo) = c.output_hw(h, w)?;
            Ok(ActShape::Spatial { h: ho, w: wo, c: c.c_out() })
        }
        (LayerKind::Conv2d(_), _) => Err(mismatch("a spatial input")),
        (LayerKind::Fc(fc), s) => {
            if !matches!(s, ActShape::Flat { .. }) || s.numel() != fc.l_in() {
                return Err(mismatch(&format!("a flat input of {}", fc.l_in())));
            }
            Ok(ActShape::Flat { n: fc.l_out() })
        }
        (LayerKind::Relu, s) => Ok(s),
        (LayerKind::MaxPool2d { size, stride }, ActShape::Spatial { h, w, c }) => {
            if *size == 0 || *stride == 0 || h < *size || w < *size {
                return Err(mismatch(&format!("at least {size}x{size} spatial extent")));
            }
            Ok(ActShape::Spatial {
                h: (h - size) / stride + 1,
                w: (w - size) / stride + 1,
                c,
            })
        }
        (LayerKind::MaxPool2d { .. }, _) => Err(mismatch("a spatial input")),
        (LayerKind::Flatten, s) => Ok(ActShape::Flat { n: s.numel() }),
        (LayerKind::SoftmaxXentHead, ActShape::Flat { n }) => Ok(ActShape::Flat { n }),
        (LayerKind::SoftmaxXentHead, _) => Err(mismatch("flat logits")),
    }
}

fn as_dense_conv(layer: &Layer) -> Result<&Conv2d> {
    match &layer.kind {
        LayerKind::Conv2d(c) if !c.is_depthwise() => Ok(c),
        other => Err(Error::UnsupportedLayer(format!(
            "`{}` is a {} layer, expected a dense conv",
            layer.name,
            other.name()
        ))),
    }
}

fn member_conv<'a>(kind: &'a LayerKind, name: &str) -> Result<&'a Conv2d> {
    match kind {
        LayerKind::Conv2d(c) => Ok(c),
        _ => Err(Error::InvalidShape(format!("group member `{name}` is not a conv"))),
    }
}

fn member_fc<'a>(kind: &'a LayerKind, name: &str) -> Result<&'a Linear> {
    match kind {
        LayerKind::Fc(l) => Ok(l),
        _ => Err(Error::InvalidShape(format!("group member `{name}` is not an fc layer"))),
    }
}

/// C_out×C_in matrix of a 1×1 conv; the kernel data is already in that
/// column-major order.
fn pointwise_matrix(c: &Conv2d) -> Matrix2 {
    Matrix2::from_col_major(c.c_out(), c.c_in(), c.weight.tensor().data().to_vec())
        .expect("1x1 kernel has c_out*c_in entries")
}

fn pointwise_conv(m: &Matrix2, bias: Option<Vec<f64>>) -> Result<Conv2d> {
    let k = Kernel4::new(DenseTensor::new(vec![1, 1, m.rows(), m.cols()], m.as_slice().to_vec())?)?;
    Conv2d::new(k, bias, 1, 0)
}

fn member_names(name: &str, n: usize) -> Vec<String> {
    if n == 2 {
        vec![format!("{name}.in"), format!("{name}.out")]
    } else {
        vec![format!("{name}.in"), format!("{name}.core"), format!("{name}.out")]
    }
}

fn tucker2_members(name: &str, f: &Tucker2Factors, conv: &Conv2d) -> Result<Vec<Layer>> {
    let names = member_names(name, 3);
    let first = pointwise_conv(&f.factor_in.transpose(), None)?;
    let core = Conv2d::new(Kernel4::new(f.core.clone())?, None, conv.stride, conv.padding)?;
    let last = pointwise_conv(&f.factor_out, conv.bias.clone())?;
    Ok(vec![
        Layer::new(&names[0], LayerKind::Conv2d(first)),
        Layer::new(&names[1], LayerKind::Conv2d(core)),
        Layer::new(&names[2], LayerKind::Conv2d(last)),
    ])
}

fn cp_members(name: &str, f: &CPFactors, conv: &Conv2d) -> Result<Vec<Layer>> {
    let names = member_names(name, 3);
    let (d, r) = (f.d(), f.cp_rank());
    let first = pointwise_conv(&f.factor_in.transpose(), None)?;
    let spatial = DenseTensor::new(vec![d, d, r, 1], f.factor_spatial.as_slice().to_vec())?;
    let core = Conv2d::depthwise(Kernel4::new(spatial)?, None, conv.stride, conv.padding)?;
    let last = pointwise_conv(&f.factor_out, conv.bias.clone())?;
    Ok(vec![
        Layer::new(&names[0], LayerKind::Conv2d(first)),
        Layer::new(&names[1], LayerKind::Conv2d(core)),
        Layer::new(&names[2], LayerKind::Conv2d(last)),
    ])
}

fn svd_members(name: &str, f: &SVDFactors, bias: Option<Vec<f64>>) -> Result<Vec<Layer>> {
    let names = member_names(name, 2);
    Ok(vec![
        Layer::new(&names[0], LayerKind::Fc(Linear::new(f.theta_in.clone(), None)?)),
        Layer::new(&names[1], LayerKind::Fc(Linear::new(f.theta_out.clone(), bias)?)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{
        cpd3_decompose, cpd3_reconstruct, svd_decompose, svd_reconstruct, tucker2_decompose, tucker2_reconstruct,
        tucker2_recompress, AlsOptions, MultilinearRank2,
    };
    use crate::testutil::{randn, randn_tensor};
    use crate::trainer::forward;

    fn conv_graph(d: usize, c_in: usize, c_out: usize, stride: usize, seed: u64) -> ModelGraph {
        let k = Kernel4::new(randn_tensor(vec![d, d, c_out, c_in], seed)).unwrap();
        let bias = randn(c_out, 1, seed + 1).into_vec();
        ModelGraph::new([9, 9, c_in])
            .unwrap()
            .with("conv", LayerKind::Conv2d(Conv2d::new(k, Some(bias), stride, d / 2).unwrap()))
            .unwrap()
    }

    fn random_input(g: &ModelGraph, n: usize, seed: u64) -> Vec<f64> {
        let len = n * g.input_act().numel();
        randn(len, 1, seed).into_vec()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn dense_kernel(g: &ModelGraph) -> &Kernel4 {
        match &g.layers()[0].kind {
            LayerKind::Conv2d(c) => &c.weight,
            _ => unreachable!(),
        }
    }

    fn with_kernel(g: &ModelGraph, k: Kernel4) -> ModelGraph {
        let mut h = g.clone();
        if let LayerKind::Conv2d(c) = &mut h.layers_mut()[0].kind {
            c.weight = k;
        }
        h
    }

    #[test]
    fn shape_examples() {
        let g = zoo::resnet_stem(224, None).unwrap();
        assert_eq!(g.infer_shapes().unwrap()[0], ActShape::Spatial { h: 112, w: 112, c: 64 });
        let pool = ModelGraph::new([224, 224, 3])
            .unwrap()
            .with("p", LayerKind::MaxPool2d { size: 2, stride: 2 })
            .unwrap();
        assert_eq!(pool.output_shape().unwrap(), ActShape::Spatial { h: 112, w: 112, c: 3 });
        let pw = conv_graph(1, 4, 6, 1, 0);
        assert_eq!(pw.output_shape().unwrap(), ActShape::Spatial { h: 9, w: 9, c: 6 });
    }

    #[test]
    fn incompatible_layer_is_rejected() {
        let mut g = conv_graph(3, 4, 6, 1, 0);
        let fc = Linear::new(Matrix2::zeros(5, 2), None).unwrap();
        assert!(g.push(Layer::new("fc", LayerKind::Fc(fc))).is_err());
        assert_eq!(g.layers().len(), 1);
        assert!(g.push(Layer::new("conv", LayerKind::Relu)).is_err());
    }

    #[test]
    fn tucker2_substitution_matches_reconstruction() {
        let g = conv_graph(3, 64, 64, 1, 1);
        let f = tucker2_decompose(dense_kernel(&g), MultilinearRank2::new(8, 8)).unwrap();
        let h = g.substitute_conv_tucker2("conv", &f).unwrap();
        assert_eq!(h.layers().len(), 3);
        let reference = with_kernel(&g, tucker2_reconstruct(&f).unwrap());
        let x = random_input(&g, 2, 3);
        let a = forward(&reference, &x, 2).unwrap();
        let b = forward(&h, &x, 2).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-10);
        assert_eq!(h.group_factors("conv").unwrap(), GroupFactors::Tucker2(f));
    }

    #[test]
    fn stride_goes_to_spatial_member() {
        let g = conv_graph(3, 6, 5, 2, 2);
        let f = tucker2_decompose(dense_kernel(&g), MultilinearRank2::new(5, 6)).unwrap();
        let h = g.substitute_conv_tucker2("conv", &f).unwrap();
        let strides: Vec<usize> = h
            .layers()
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv2d(c) => c.stride,
                _ => 0,
            })
            .collect();
        assert_eq!(strides, vec![1, 2, 1]);
        let x = random_input(&g, 3, 4);
        assert!(max_abs_diff(&forward(&g, &x, 3).unwrap(), &forward(&h, &x, 3).unwrap()) <= 1e-10);
    }

    #[test]
    fn cp_substitution_matches_reconstruction() {
        let g = conv_graph(3, 5, 7, 1, 5);
        for rank in [1, 4] {
            let f = cpd3_decompose(&crate::tensor::reshape_kernel(dense_kernel(&g)), rank, &AlsOptions::default())
                .unwrap()
                .factors;
            let h = g.substitute_conv_cpd3("conv", &f).unwrap();
            assert_eq!(count_params(&h).layer_weights("conv", &h), rank * (5 + 9 + 7));
            let reference = with_kernel(&g, cpd3_reconstruct(&f).unwrap().to_kernel4());
            let x = random_input(&g, 2, 6);
            assert!(max_abs_diff(&forward(&reference, &x, 2).unwrap(), &forward(&h, &x, 2).unwrap()) <= 1e-10);
        }
    }

    #[test]
    fn svd_substitution_matches_product() {
        let w = randn(128, 10, 7);
        let g = ModelGraph::new([1, 1, 128])
            .unwrap()
            .with("flat", LayerKind::Flatten)
            .unwrap()
            .with("fc", LayerKind::Fc(Linear::new(w.clone(), Some(vec![0.5; 10])).unwrap()))
            .unwrap();
        let f = svd_decompose(&w, 4).unwrap();
        let h = g.substitute_fc_svd("fc", &f).unwrap();
        let mut reference = g.clone();
        if let LayerKind::Fc(l) = &mut reference.layers_mut()[1].kind {
            l.weight = svd_reconstruct(&f).unwrap();
        }
        let x = random_input(&g, 5, 8);
        assert!(max_abs_diff(&forward(&reference, &x, 5).unwrap(), &forward(&h, &x, 5).unwrap()) <= 1e-10);
        assert_eq!(count_params(&h).layer_weights("fc", &h), 4 * 138);
    }

    #[test]
    fn double_substitution_is_rejected() {
        let g = conv_graph(3, 4, 4, 1, 9);
        let f = tucker2_decompose(dense_kernel(&g), MultilinearRank2::new(2, 2)).unwrap();
        let h = g.substitute_conv_tucker2("conv", &f).unwrap();
        assert!(matches!(h.substitute_conv_tucker2("conv", &f), Err(Error::AlreadyDecomposed(_)) | Err(Error::UnknownLayer(_))));
        assert!(matches!(h.substitute_conv_tucker2("conv.core", &f), Err(Error::AlreadyDecomposed(_))));
        assert!(g.substitute_conv_tucker2("missing", &f).is_err());
    }

    #[test]
    fn update_shrinks_members() {
        let g = conv_graph(3, 16, 16, 1, 10);
        let f = tucker2_decompose(dense_kernel(&g), MultilinearRank2::new(8, 8)).unwrap();
        let h = g.substitute_conv_tucker2("conv", &f).unwrap();
        assert_eq!(h.update_group_weights("conv", &GroupFactors::Tucker2(f.clone())).unwrap(), h);

        let smaller = tucker2_recompress(&f, MultilinearRank2::new(5, 3)).unwrap();
        let u = h.update_group_weights("conv", &GroupFactors::Tucker2(smaller)).unwrap();
        let shapes: Vec<(usize, usize, usize)> = u
            .layers()
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv2d(c) => (c.d(), c.c_in(), c.c_out()),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(shapes, vec![(1, 16, 3), (3, 3, 5), (1, 5, 16)]);
        assert_eq!(u.group("conv").unwrap().ranks, Ranks::Tucker2 { r_out: 5, r_in: 3 });
        assert_eq!(u.layers().len(), 3);
        assert!(matches!(
            u.update_group_weights("conv", &GroupFactors::Tucker2(f)),
            Err(Error::RankIncrease(_))
        ));
    }

    #[test]
    fn update_svd_and_units() {
        let w = randn(30, 20, 11);
        let g = ModelGraph::new([1, 1, 30])
            .unwrap()
            .with("flat", LayerKind::Flatten)
            .unwrap()
            .with("fc", LayerKind::Fc(Linear::new(w.clone(), None).unwrap()))
            .unwrap()
            .with("head", LayerKind::SoftmaxXentHead)
            .unwrap();
        let h = g.substitute_fc_svd("fc", &svd_decompose(&w, 10).unwrap()).unwrap();
        let u = h.update_group_weights("fc", &GroupFactors::Svd(svd_decompose(&w, 4).unwrap())).unwrap();
        assert_eq!(u.group("fc").unwrap().ranks, Ranks::Svd { rank: 4 });
        let names: Vec<_> = u.units().iter().map(|u| u.name().to_string()).collect();
        assert_eq!(names, vec!["flat", "fc", "head"]);
        assert!(matches!(u.units()[1], Unit::Group { .. }));
    }
}
