//! Parameter and activation counting per layer, and the communication-volume
//! comparison between model parallelism and data parallelism.

use std::fmt;

use thiserror::Error;

use crate::model_spec::{ActShape, LayerDecl, ModelSpec};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("layer {layer}: extents must be positive")]
    ZeroExtent { layer: usize },
    #[error("layer {layer}: stride {stride} does not divide extent {extent}")]
    Stride { layer: usize, extent: u64, stride: u64 },
    #[error("empty layer list")]
    Empty,
    #[error("batch size and node count must be >= 1")]
    BadScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecKind {
    Convolution,
    FullyConnected,
}

/// Counting description of one weighted layer.
///
/// `x` is the spatial extent of the previous layer's activations; it is
/// ignored by fully-connected layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: SpecKind,
    pub n1: u64,
    pub n2: u64,
    pub x: (u64, u64),
    pub window: (u64, u64),
    pub stride: (u64, u64),
}

impl LayerSpec {
    pub fn conv(n1: u64, n2: u64, x: (u64, u64), window: (u64, u64), stride: (u64, u64)) -> Self {
        LayerSpec {
            kind: SpecKind::Convolution,
            n1,
            n2,
            x,
            window,
            stride,
        }
    }

    pub fn fc(n1: u64, n2: u64) -> Self {
        LayerSpec {
            kind: SpecKind::FullyConnected,
            n1,
            n2,
            x: (1, 1),
            window: (1, 1),
            stride: (1, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCost {
    /// Weights only.
    pub parameters: u64,
    pub biases: u64,
    pub activations: u64,
}

pub fn count_layer(spec: &LayerSpec) -> Result<LayerCost, TopologyError> {
    count_at(spec, 0)
}

fn count_at(s: &LayerSpec, layer: usize) -> Result<LayerCost, TopologyError> {
    if s.n1 == 0 || s.n2 == 0 {
        return Err(TopologyError::ZeroExtent { layer });
    }
    match s.kind {
        SpecKind::FullyConnected => Ok(LayerCost {
            parameters: s.n1 * s.n2,
            biases: s.n2,
            activations: s.n2,
        }),
        SpecKind::Convolution => {
            let all = [s.x.0, s.x.1, s.window.0, s.window.1, s.stride.0, s.stride.1];
            if all.contains(&0) {
                return Err(TopologyError::ZeroExtent { layer });
            }
            for (extent, stride) in [(s.x.0, s.stride.0), (s.x.1, s.stride.1)] {
                if extent % stride != 0 {
                    return Err(TopologyError::Stride { layer, extent, stride });
                }
            }
            Ok(LayerCost {
                parameters: s.window.0 * s.window.1 * s.n1 * s.n2,
                biases: s.n2,
                activations: (s.x.0 / s.stride.0) * (s.x.1 / s.stride.1) * s.n2,
            })
        }
    }
}

/// Weighted layers of a model file in counting form. A fully-connected
/// layer's `n1` is the total activation count of whatever precedes it.
pub fn specs_from_model(model: &ModelSpec) -> Vec<LayerSpec> {
    let shapes = model.shapes().expect("ModelSpec validated at parse");
    let mut out = Vec::new();
    for (decl, input) in model.layers.iter().zip(&shapes) {
        match *decl {
            LayerDecl::FullyConnected { out: n2 } => out.push(LayerSpec::fc(input.features() as u64, n2 as u64)),
            LayerDecl::Convolution { window, out: n2, stride } => {
                let ActShape::Image { h, w, c } = *input else {
                    unreachable!("validated image input")
                };
                out.push(LayerSpec::conv(
                    c as u64,
                    n2 as u64,
                    (h as u64, w as u64),
                    (window.0 as u64, window.1 as u64),
                    (stride.0 as u64, stride.1 as u64),
                ));
            }
            LayerDecl::Relu | LayerDecl::Softmax => {}
        }
    }
    out
}

/// The five convolution and three fully-connected layers of AlexNet at their
/// customary extents (pooling folded into the next layer's input size).
pub fn alexnet() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(3, 96, (224, 224), (11, 11), (4, 4)),
        LayerSpec::conv(96, 256, (27, 27), (5, 5), (1, 1)),
        LayerSpec::conv(256, 384, (13, 13), (3, 3), (1, 1)),
        LayerSpec::conv(384, 384, (13, 13), (3, 3), (1, 1)),
        LayerSpec::conv(384, 256, (13, 13), (3, 3), (1, 1)),
        LayerSpec::fc(6 * 6 * 256, 4096),
        LayerSpec::fc(4096, 4096),
        LayerSpec::fc(4096, 1000),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dominance {
    Parameters,
    Activations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub index: usize,
    pub spec: LayerSpec,
    pub cost: LayerCost,
    pub dominated_by: Dominance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelismReport {
    pub batch: u64,
    pub nodes: u64,
    pub layers: Vec<LayerReport>,
    pub total_weights: u64,
    pub total_biases: u64,
    pub total_activations: u64,
    /// Activations exchanged per batch when layers are split across nodes.
    pub model_parallel_comm: u64,
    /// Parameter elements moved by a tree allreduce of the full gradient.
    pub data_parallel_comm: f64,
    /// Samples each node processes per batch.
    pub per_node_compute: f64,
}

impl ParallelismReport {
    /// Weights plus biases; equals the length of the network's parameter vector.
    pub fn total_parameters(&self) -> u64 {
        self.total_weights + self.total_biases
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,n1,n2,parameters,biases,activations,dominated_by\n");
        for l in &self.layers {
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                l.index,
                kind_name(l.spec.kind),
                l.spec.n1,
                l.spec.n2,
                l.cost.parameters,
                l.cost.biases,
                l.cost.activations,
                dominance_name(l.dominated_by)
            );
        }
        s
    }
}

fn kind_name(k: SpecKind) -> &'static str {
    match k {
        SpecKind::Convolution => "conv",
        SpecKind::FullyConnected => "fc",
    }
}

fn dominance_name(d: Dominance) -> &'static str {
    match d {
        Dominance::Parameters => "parameters",
        Dominance::Activations => "activations",
    }
}

impl fmt::Display for ParallelismReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>5} {:>5} {:>8} {:>8} {:>14} {:>14} {:>12}",
            "layer", "kind", "n1", "n2", "parameters", "activations", "dominated"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:>5} {:>5} {:>8} {:>8} {:>14} {:>14} {:>12}",
                l.index,
                kind_name(l.spec.kind),
                l.spec.n1,
                l.spec.n2,
                l.cost.parameters,
                l.cost.activations,
                dominance_name(l.dominated_by)
            )?;
        }
        writeln!(
            f,
            "total: {} weights + {} biases = {} parameters, {} activations",
            self.total_weights,
            self.total_biases,
            self.total_parameters(),
            self.total_activations
        )?;
        writeln!(f, "batch {} on {} nodes", self.batch, self.nodes)?;
        writeln!(f, "model-parallel communication: {}", self.model_parallel_comm)?;
        writeln!(f, "data-parallel communication:  {:.0}", self.data_parallel_comm)?;
        write!(f, "data-parallel samples per node: {}", self.per_node_compute)
    }
}

pub fn compare_parallelism(specs: &[LayerSpec], batch: u64, nodes: u64) -> Result<ParallelismReport, TopologyError> {
    if specs.is_empty() {
        return Err(TopologyError::Empty);
    }
    if batch == 0 || nodes == 0 {
        return Err(TopologyError::BadScale);
    }
    let mut layers = Vec::with_capacity(specs.len());
    for (index, spec) in specs.iter().enumerate() {
        let cost = count_at(spec, index)?;
        let dominated_by = if cost.parameters > cost.activations {
            Dominance::Parameters
        } else {
            Dominance::Activations
        };
        layers.push(LayerReport {
            index,
            spec: *spec,
            cost,
            dominated_by,
        });
    }
    let total_weights = layers.iter().map(|l| l.cost.parameters).sum();
    let total_biases = layers.iter().map(|l| l.cost.biases).sum();
    let total_activations: u64 = layers.iter().map(|l| l.cost.activations).sum();
    let mut report = ParallelismReport {
        batch,
        nodes,
        layers,
        total_weights,
        total_biases,
        total_activations,
        model_parallel_comm: total_activations * batch,
        data_parallel_comm: 0.0,
        per_node_compute: batch as f64 / nodes as f64,
    };
    report.data_parallel_comm = report.total_parameters() as f64 * (nodes as f64).log2();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alexnet_fixtures() {
        let first = count_layer(&alexnet()[0]).unwrap();
        assert_eq!((first.parameters, first.activations), (34_848, 301_056));
        let last = count_layer(&alexnet()[7]).unwrap();
        assert_eq!((last.parameters, last.activations), (4_096_000, 1_000));
        assert_eq!(last.biases, 1_000);
    }

    #[test]
    fn window_covering_image() {
        // the formula gives x1*x2 activations for unit stride; no spatial collapse
        let c = count_layer(&LayerSpec::conv(1, 1, (9, 9), (9, 9), (1, 1))).unwrap();
        assert_eq!(c.parameters, 81);
        assert_eq!(c.activations, 81);
    }

    #[test]
    fn stride_must_divide() {
        let e = count_layer(&LayerSpec::conv(3, 8, (10, 10), (3, 3), (3, 3))).unwrap_err();
        assert_eq!(
            e,
            TopologyError::Stride {
                layer: 0,
                extent: 10,
                stride: 3
            }
        );
    }

    #[test]
    fn single_node_has_no_data_parallel_traffic() {
        let r = compare_parallelism(&alexnet(), 128, 1).unwrap();
        assert_eq!(r.data_parallel_comm, 0.0);
        assert_eq!(r.per_node_compute, 128.0);
    }

    #[test]
    fn dominance_flags_and_batch_linearity() {
        let a = compare_parallelism(&alexnet(), 64, 16).unwrap();
        assert_eq!(a.layers[0].dominated_by, Dominance::Activations);
        assert_eq!(a.layers[7].dominated_by, Dominance::Parameters);
        let b = compare_parallelism(&alexnet(), 128, 16).unwrap();
        assert_eq!(b.model_parallel_comm, 2 * a.model_parallel_comm);
        assert_eq!(b.data_parallel_comm, a.data_parallel_comm);
        assert_eq!(a.data_parallel_comm, a.total_parameters() as f64 * 4.0);
    }

    #[test]
    fn fc_after_conv_uses_total_activations() {
        let m = ModelSpec::parse("input 8 8 2\nconv 3 3 4 stride 2 2\nrelu\nfc 10\nsoftmax\n").unwrap();
        let s = specs_from_model(&m);
        assert_eq!(s[1], LayerSpec::fc(4 * 4 * 4, 10));
    }
}
