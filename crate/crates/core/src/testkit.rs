//! Tiny hand-built ONNX graphs honoring the engine contracts, for tests and
//! demos without real model weights.
//!
//! The fake backbone average-pools each patch to its mean RGB colour and
//! optionally projects it to `feature_dim` channels; the token is the mean
//! over patches. The fake segmenter emits per-pixel brightness as alpha,
//! optionally scaled.

use std::path::Path;

use prost::Message;
use tract_onnx::pb;

use crate::catalog::Condition;
use crate::error::{Error, Result};
use crate::imaging::{save_png, ImageTensor};

const FLOAT: i32 = 1;
const INT64: i32 = 7;

#[derive(Debug, Clone)]
pub struct FakeBackbone {
    pub input_size: usize,
    pub patch_size: usize,
    /// 3 keeps raw mean colours; anything else adds a fixed projection.
    pub feature_dim: usize,
    pub token: bool,
}

impl Default for FakeBackbone {
    fn default() -> Self {
        Self {
            input_size: 336,
            patch_size: 14,
            feature_dim: 3,
            token: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FakeSegmenter {
    pub input_size: usize,
    pub scale: f32,
}

impl Default for FakeSegmenter {
    fn default() -> Self {
        Self {
            input_size: 336,
            scale: 1.0,
        }
    }
}

fn value_info(name: &str, dims: &[usize]) -> pb::ValueInfoProto {
    use pb::tensor_shape_proto::{dimension, Dimension};
    pb::ValueInfoProto {
        name: name.into(),
        r#type: Some(pb::TypeProto {
            value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                elem_type: FLOAT,
                shape: Some(pb::TensorShapeProto {
                    dim: dims
                        .iter()
                        .map(|&d| Dimension {
                            value: Some(dimension::Value::DimValue(d as i64)),
                            ..Default::default()
                        })
                        .collect(),
                }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn ints(name: &str, v: &[i64]) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: pb::attribute_proto::AttributeType::Ints as i32,
        ints: v.to_vec(),
        ..Default::default()
    }
}

fn int(name: &str, v: i64) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: pb::attribute_proto::AttributeType::Int as i32,
        i: v,
        ..Default::default()
    }
}

fn node(op: &str, inputs: &[&str], outputs: &[&str], attrs: Vec<pb::AttributeProto>) -> pb::NodeProto {
    pb::NodeProto {
        op_type: op.into(),
        name: format!("{op}_{}", outputs[0]),
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: outputs.iter().map(|s| s.to_string()).collect(),
        attribute: attrs,
        ..Default::default()
    }
}

fn f32_tensor(name: &str, dims: &[i64], data: &[f32]) -> pb::TensorProto {
    pb::TensorProto {
        name: name.into(),
        dims: dims.to_vec(),
        data_type: FLOAT,
        raw_data: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ..Default::default()
    }
}

fn i64_tensor(name: &str, data: &[i64]) -> pb::TensorProto {
    pb::TensorProto {
        name: name.into(),
        dims: vec![data.len() as i64],
        data_type: INT64,
        raw_data: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ..Default::default()
    }
}

fn model(graph: pb::GraphProto) -> Vec<u8> {
    pb::ModelProto {
        ir_version: 7,
        producer_name: "ffasim-testkit".into(),
        opset_import: vec![pb::OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        graph: Some(graph),
        ..Default::default()
    }
    .encode_to_vec()
}

/// Deterministic projection weights, `3 × dim`, row-major.
pub fn projection_weights(dim: usize) -> Vec<f32> {
    (0..3 * dim)
        .map(|i| {
            let (c, d) = (i / dim, i % dim);
            (((c + 1) * (d + 3)) % 7) as f32 / 7.0 - 0.3 + if c == d % 3 { 0.5 } else { 0.0 }
        })
        .collect()
}

impl FakeBackbone {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.patch_size as i64;
        let side = self.input_size / self.patch_size;
        let n = (side * side) as i64;
        let mut nodes = vec![
            node(
                "AveragePool",
                &["image"],
                &["pooled"],
                vec![ints("kernel_shape", &[p, p]), ints("strides", &[p, p])],
            ),
            node("Reshape", &["pooled", "flat_shape"], &["flat"], vec![]),
        ];
        let mut initializer = vec![i64_tensor("flat_shape", &[1, 3, n])];
        if self.feature_dim == 3 {
            nodes.push(node(
                "Transpose",
                &["flat"],
                &["patches"],
                vec![ints("perm", &[0, 2, 1])],
            ));
        } else {
            nodes.push(node(
                "Transpose",
                &["flat"],
                &["colours"],
                vec![ints("perm", &[0, 2, 1])],
            ));
            nodes.push(node("MatMul", &["colours", "proj"], &["patches"], vec![]));
            initializer.push(f32_tensor(
                "proj",
                &[3, self.feature_dim as i64],
                &projection_weights(self.feature_dim),
            ));
        }
        let mut outputs = vec![value_info("patches", &[1, side * side, self.feature_dim])];
        if self.token {
            nodes.push(node(
                "ReduceMean",
                &["patches"],
                &["token"],
                vec![ints("axes", &[1]), int("keepdims", 0)],
            ));
            outputs.push(value_info("token", &[1, self.feature_dim]));
        }
        model(pb::GraphProto {
            name: "fake_backbone".into(),
            node: nodes,
            initializer,
            input: vec![value_info("image", &[1, 3, self.input_size, self.input_size])],
            output: outputs,
            ..Default::default()
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }
}

impl FakeSegmenter {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.input_size;
        let mut nodes = vec![node(
            "ReduceMean",
            &["image"],
            &["brightness"],
            vec![ints("axes", &[1]), int("keepdims", 1)],
        )];
        nodes.push(node("Mul", &["brightness", "scale"], &["alpha"], vec![]));
        model(pb::GraphProto {
            name: "fake_segmenter".into(),
            node: nodes,
            initializer: vec![f32_tensor("scale", &[], &[self.scale])],
            input: vec![value_info("image", &[1, 3, s, s])],
            output: vec![value_info("alpha", &[1, 1, s, s])],
            ..Default::default()
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bright object colour for `(category, instance)`; channel mean stays above
/// one half so the fake segmenter marks it foreground.
pub fn object_colour(category: usize, instance: u32) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [250, 210, 60],
        [90, 230, 250],
        [250, 120, 200],
        [170, 250, 110],
        [255, 255, 255],
        [220, 160, 250],
        [250, 170, 120],
        [140, 200, 250],
    ];
    PALETTE[(category * 3 + instance as usize) % PALETTE.len()]
}

/// One synthetic photo: a coloured square on a dark textured background. The
/// square's placement, size and brightness vary with `view`.
pub fn synthetic_view(category: usize, instance: u32, view: usize, size: usize) -> ImageTensor {
    let colour = object_colour(category, instance);
    let gain = 1.0 - 0.04 * (view % 4) as f32;
    let side = size * (2 + view % 3) / 6;
    let x0 = (size - side) * (1 + view % 5) / 6;
    let y0 = (size - side) * (1 + (view / 5) % 5) / 6;
    ImageTensor::from_fn(size, size, |x, y| {
        if (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y) {
            colour.map(|c| (f32::from(c) * gain).round() as u8)
        } else {
            let t = ((x * 7 + y * 13 + view * 31) % 40) as u8;
            [t, t / 2 + 10, 30 - t / 2]
        }
    })
}

/// Writes `<root>/<category>/instance_<k>/<descriptor>.png` for every
/// category, instance `1..=instances` and condition. Returns the paths in
/// write order.
pub fn write_dataset(
    root: impl AsRef<Path>,
    categories: &[&str],
    instances: u32,
    conditions: &[Condition],
    size: usize,
) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for (c, cat) in categories.iter().enumerate() {
        for k in 1..=instances {
            let dir = root.as_ref().join(cat).join(format!("instance_{k}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (v, cond) in conditions.iter().enumerate() {
                let path = dir.join(format!("{}.png", cond.descriptor()));
                save_png(&synthetic_view(c, k, v, size), &path)?;
                paths.push(path);
            }
        }
    }
    Ok(paths)
}

/// The four in-the-wild conditions.
pub fn wild_conditions() -> Vec<Condition> {
    (0..4).map(|s| Condition::Wild { scene: s }).collect()
}
