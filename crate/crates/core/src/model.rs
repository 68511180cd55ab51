use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Shape of one dense layer: `out_units x in_units` weights plus an optional
/// bias of length `out_units`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_units: usize,
    pub out_units: usize,
    pub has_bias: bool,
}

impl LayerShape {
    pub fn new(in_units: usize, out_units: usize) -> Self {
        LayerShape {
            in_units,
            out_units,
            has_bias: true,
        }
    }

    pub fn params(&self) -> usize {
        self.out_units * self.in_units + if self.has_bias { self.out_units } else { 0 }
    }
}

/// Ordered layer shapes of a whole network. Consecutive layers must chain:
/// `layer[l].out_units == layer[l+1].in_units`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape(pub Vec<LayerShape>);

impl ModelShape {
    /// Build an MLP shape `input -> hidden... -> classes`.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            layers.push(LayerShape::new(prev, h));
            prev = h;
        }
        layers.push(LayerShape::new(prev, classes));
        ModelShape(layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::ShapeMismatch("model has no layers".into()));
        }
        for l in &self.0 {
            if l.in_units == 0 || l.out_units == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "layer with zero dimension: {}x{}",
                    l.out_units, l.in_units
                )));
            }
        }
        for w in self.0.windows(2) {
            if w[0].out_units != w[1].in_units {
                return Err(Error::ShapeMismatch(format!(
                    "layer chain broken: out {} feeds in {}",
                    w[0].out_units, w[1].in_units
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.0.len()
    }

    pub fn input_dim(&self) -> usize {
        self.0[0].in_units
    }

    pub fn output_dim(&self) -> usize {
        self.0.last().unwrap().out_units
    }

    pub fn param_count(&self) -> usize {
        self.0.iter().map(|l| l.params()).sum()
    }
}

/// One dense layer. Weights are row-major: row `j` holds the incoming
/// weights of output unit `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub shape: LayerShape,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(shape: LayerShape) -> Self {
        Layer {
            shape,
            weights: vec![0.0; shape.out_units * shape.in_units],
            bias: vec![0.0; if shape.has_bias { shape.out_units } else { 0 }],
        }
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.shape.in_units + inp]
    }

    #[inline]
    pub fn weight_mut(&mut self, out: usize, inp: usize) -> &mut f64 {
        &mut self.weights[out * self.shape.in_units + inp]
    }

    pub fn row(&self, out: usize) -> &[f64] {
        let n = self.shape.in_units;
        &self.weights[out * n..(out + 1) * n]
    }
}

/// Dense layered model; holds the global model, a client's local model, or a
/// parameter delta, depending on context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredModel {
    pub layers: Vec<Layer>,
}

impl LayeredModel {
    pub fn zeros(shape: &ModelShape) -> Self {
        LayeredModel {
            layers: shape.0.iter().map(|&s| Layer::zeros(s)).collect(),
        }
    }

    /// Per-layer uniform init in +-1/sqrt(in_units); biases start at zero.
    pub fn init_uniform(shape: &ModelShape, seed: u64) -> Self {
        let mut model = Self::zeros(shape);
        let mut rng = rng::rng(seed, Stream::Init, 0, 0);
        for layer in &mut model.layers {
            let bound = 1.0 / (layer.shape.in_units as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..bound);
            }
        }
        model
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape(self.layers.iter().map(|l| l.shape).collect())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.shape.params()).sum()
    }

    pub fn same_shape(&self, other: &LayeredModel) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.shape == b.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.iter_params().all(|v| v.is_finite())
    }

    pub fn iter_params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn iter_params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// self <- self + alpha * other
    pub fn scaled_add(&mut self, alpha: f64, other: &LayeredModel) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.iter_params_mut().zip(other.iter_params()) {
            *a += alpha * b;
        }
    }

    /// Element-wise `self - other`.
    pub fn delta_from(&self, other: &LayeredModel) -> LayeredModel {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        for (a, b) in out.iter_params_mut().zip(other.iter_params()) {
            *a -= b;
        }
        out
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter_params().map(|v| v * v).sum()
    }
}

/// Per-layer kept-unit counts of a nested prefix sub-model. A sub-model
/// occupies the first `kept[l]` output units of every global layer; the
/// output layer is never shrunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubModelSpec {
    pub kept: Vec<usize>,
}

impl SubModelSpec {
    pub fn full(global: &ModelShape) -> Self {
        SubModelSpec {
            kept: global.0.iter().map(|l| l.out_units).collect(),
        }
    }

    /// Shrink hidden layers to `ceil(frac * width)` units; output untouched.
    pub fn scaled(global: &ModelShape, frac: f64) -> Self {
        let n = global.0.len();
        let kept = global
            .0
            .iter()
            .enumerate()
            .map(|(l, s)| {
                if l + 1 == n {
                    s.out_units
                } else {
                    ((s.out_units as f64 * frac).ceil() as usize).clamp(1, s.out_units)
                }
            })
            .collect();
        SubModelSpec { kept }
    }

    pub fn validate(&self, global: &ModelShape) -> Result<()> {
        if self.kept.len() != global.0.len() {
            return Err(Error::InvalidSpec(format!(
                "spec has {} layers, global has {}",
                self.kept.len(),
                global.0.len()
            )));
        }
        for (l, (&k, s)) in self.kept.iter().zip(&global.0).enumerate() {
            if k == 0 {
                return Err(Error::InvalidSpec(format!("layer {l} keeps zero units")));
            }
            if k > s.out_units {
                return Err(Error::InvalidSpec(format!(
                    "layer {l} requests width {k} on a {}-wide layer",
                    s.out_units
                )));
            }
        }
        let last = self.kept.len() - 1;
        if self.kept[last] != global.0[last].out_units {
            return Err(Error::InvalidSpec(format!(
                "output layer must stay full ({} != {})",
                self.kept[last], global.0[last].out_units
            )));
        }
        Ok(())
    }

    pub fn is_full(&self, global: &ModelShape) -> bool {
        self.kept
            .iter()
            .zip(&global.0)
            .all(|(&k, s)| k == s.out_units)
    }

    /// Shape of the sub-model induced by this spec.
    pub fn sub_shape(&self, global: &ModelShape) -> Result<ModelShape> {
        self.validate(global)?;
        let mut layers = Vec::with_capacity(self.kept.len());
        let mut prev_in = global.input_dim();
        for (&k, s) in self.kept.iter().zip(&global.0) {
            layers.push(LayerShape {
                in_units: prev_in,
                out_units: k,
                has_bias: s.has_bias,
            });
            prev_in = k;
        }
        Ok(ModelShape(layers))
    }
}

/// Total scalar parameters (weights + biases) of the sub-model.
pub fn param_count(spec: &SubModelSpec, global: &ModelShape) -> Result<usize> {
    Ok(spec.sub_shape(global)?.param_count())
}

/// Per-parameter boolean mask mirroring a model's layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMask {
    pub layers: Vec<LayerMask>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub weights: Vec<bool>,
    pub bias: Vec<bool>,
}

impl ParamMask {
    pub fn filled(shape: &ModelShape, value: bool) -> Self {
        ParamMask {
            layers: shape
                .0
                .iter()
                .map(|l| LayerMask {
                    weights: vec![value; l.out_units * l.in_units],
                    bias: vec![value; if l.has_bias { l.out_units } else { 0 }],
                })
                .collect(),
        }
    }

    pub fn ones(shape: &ModelShape) -> Self {
        Self::filled(shape, true)
    }

    pub fn count_ones(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weights.iter().filter(|&&b| b).count() + l.bias.iter().filter(|&&b| b).count()
            })
            .sum()
    }

    pub fn is_all_ones(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|&b| b) && l.bias.iter().all(|&b| b))
    }

    pub fn iter_bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }
}

/// Per-layer boolean vector over output units. A set bit keeps the unit's
/// whole incoming weight row plus its bias entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitMask {
    pub per_layer: Vec<Vec<bool>>,
}

impl UnitMask {
    pub fn all_selected(shape: &ModelShape) -> Self {
        UnitMask {
            per_layer: shape.0.iter().map(|l| vec![true; l.out_units]).collect(),
        }
    }

    pub fn selected_units(&self, layer: usize) -> usize {
        self.per_layer[layer].iter().filter(|&&b| b).count()
    }

    /// Debug-friendly bitmap form: one 0/1 list per layer.
    pub fn to_bitmaps(&self) -> Vec<Vec<u8>> {
        self.per_layer
            .iter()
            .map(|l| l.iter().map(|&b| b as u8).collect())
            .collect()
    }

    pub fn from_bitmaps(bitmaps: &[Vec<u8>]) -> Self {
        UnitMask {
            per_layer: bitmaps
                .iter()
                .map(|l| l.iter().map(|&b| b != 0).collect())
                .collect(),
        }
    }
}

/// Expand a unit mask into its induced parameter mask.
pub fn unit_mask_to_param_mask(mask: &UnitMask, shape: &ModelShape) -> Result<ParamMask> {
    if mask.per_layer.len() != shape.0.len() {
        return Err(Error::ShapeMismatch(format!(
            "unit mask has {} layers, shape has {}",
            mask.per_layer.len(),
            shape.0.len()
        )));
    }
    let mut out = ParamMask::filled(shape, false);
    for ((bits, layer), lm) in mask.per_layer.iter().zip(&shape.0).zip(&mut out.layers) {
        if bits.len() != layer.out_units {
            return Err(Error::ShapeMismatch(format!(
                "unit mask length {} vs {} units",
                bits.len(),
                layer.out_units
            )));
        }
        for (j, &keep) in bits.iter().enumerate() {
            if keep {
                let n = layer.in_units;
                lm.weights[j * n..(j + 1) * n].fill(true);
                if layer.has_bias {
                    lm.bias[j] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Map a sub-model into global coordinates. Returns the global-shaped model
/// holding the sub values in prefix positions and the occupancy mask.
pub fn embed(
    sub: &LayeredModel,
    spec: &SubModelSpec,
    global: &ModelShape,
) -> Result<(LayeredModel, ParamMask)> {
    let sub_shape = spec.sub_shape(global)?;
    if sub.shape() != sub_shape {
        return Err(Error::ShapeMismatch(
            "sub-model does not conform to its spec".into(),
        ));
    }
    let mut out = LayeredModel::zeros(global);
    let mut mask = ParamMask::filled(global, false);
    for (l, (sub_l, spec_l)) in sub.layers.iter().zip(&sub_shape.0).enumerate() {
        let gl = &mut out.layers[l];
        let ml = &mut mask.layers[l];
        let g_in = gl.shape.in_units;
        for j in 0..spec_l.out_units {
            for i in 0..spec_l.in_units {
                gl.weights[j * g_in + i] = sub_l.weight(j, i);
                ml.weights[j * g_in + i] = true;
            }
            if spec_l.has_bias {
                gl.bias[j] = sub_l.bias[j];
                ml.bias[j] = true;
            }
        }
    }
    Ok((out, mask))
}

/// Pull a sub-model back out of a global-shaped model (inverse of `embed`).
pub fn extract(global_model: &LayeredModel, spec: &SubModelSpec) -> Result<LayeredModel> {
    let global = global_model.shape();
    let sub_shape = spec.sub_shape(&global)?;
    let mut out = LayeredModel::zeros(&sub_shape);
    for (l, spec_l) in sub_shape.0.iter().enumerate() {
        let gl = &global_model.layers[l];
        let ol = &mut out.layers[l];
        for j in 0..spec_l.out_units {
            for i in 0..spec_l.in_units {
                *ol.weight_mut(j, i) = gl.weight(j, i);
            }
            if spec_l.has_bias {
                ol.bias[j] = gl.bias[j];
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layers: Vec<LayerShape>,
}

/// Write a model as a one-line JSON shape header followed by the flat
/// little-endian f64 parameter array (per layer: weights row-major, bias).
pub fn save_checkpoint(model: &LayeredModel, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        layers: model.shape().0,
    };
    let mut buf = serde_json::to_vec(&header).expect("header serializes");
    buf.push(b'\n');
    for v in model.iter_params() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<LayeredModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::ShapeMismatch("checkpoint missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::ShapeMismatch(format!("bad checkpoint header: {e}")))?;
    let shape = ModelShape(header.layers);
    shape.validate()?;
    let body = &bytes[nl + 1..];
    let expected = shape.param_count() * 8;
    if body.len() != expected {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            needed: expected,
            have: body.len(),
        });
    }
    let mut model = LayeredModel::zeros(&shape);
    let mut chunks = body.chunks_exact(8);
    for v in model.iter_params_mut() {
        let c = chunks.next().unwrap();
        *v = f64::from_le_bytes(c.try_into().unwrap());
    }
    Ok(model)
}
