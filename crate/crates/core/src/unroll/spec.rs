//! Network descriptors and their plain-text form.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layers::{conv_out_len, pool_out_len};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        name: String,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dense {
        name: String,
        out_dim: usize,
    },
    Relu {
        negative_slope: f64,
    },
    /// Re-weights the current feature maps with the emphasis vector produced
    /// by the named feedback head.
    Emphasis {
        head: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub name: String,
    /// Convolution whose output channels the head re-weights.
    pub target_layer: String,
}

/// Where emphasis layers go relative to the pooling that follows a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmphasisPlacement {
    BeforePool,
    AfterPool,
}

impl std::str::FromStr for EmphasisPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "before_pool" => Ok(Self::BeforePool),
            "after_pool" => Ok(Self::AfterPool),
            other => Err(Error::Config(format!(
                "emphasis placement must be before_pool or after_pool, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for EmphasisPlacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BeforePool => "before_pool",
            Self::AfterPool => "after_pool",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of one input sample.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub heads: Vec<HeadSpec>,
    pub classes: usize,
    /// Rethinking iterations `T ≥ 1`.
    pub iterations: usize,
}

/// Resolved per-layer shape information.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerShapes {
    /// Per-sample `(c, h, w)` after each layer.
    pub outputs: Vec<(usize, usize, usize)>,
    /// Channel count for each head, in `heads` order.
    pub head_channels: Vec<usize>,
}

impl NetworkSpec {
    /// LeNet from the MNIST-background-image experiment: two 5×5 convolutions
    /// (20 and 50 channels) with 2×2/2 max-pooling, a 500-unit hidden layer
    /// and a 10-way output.
    pub fn lenet(relu_after_conv: bool, fc_negative_slope: f64) -> Self {
        let conv = |name: &str, oc| LayerSpec::Conv {
            name: name.into(),
            out_channels: oc,
            kernel: (5, 5),
            stride: 1,
            padding: 0,
        };
        let pool = LayerSpec::MaxPool { window: 2, stride: 2 };
        let relu = LayerSpec::Relu { negative_slope: 0.0 };
        let mut layers = vec![conv("conv1", 20)];
        if relu_after_conv {
            layers.push(relu.clone());
        }
        layers.push(pool.clone());
        layers.push(conv("conv2", 50));
        if relu_after_conv {
            layers.push(relu);
        }
        layers.push(pool);
        layers.push(LayerSpec::Dense { name: "fc1".into(), out_dim: 500 });
        layers.push(LayerSpec::Relu { negative_slope: fc_negative_slope });
        layers.push(LayerSpec::Dense { name: "fc2".into(), out_dim: 10 });
        NetworkSpec {
            input: (1, 28, 28),
            layers,
            heads: Vec::new(),
            classes: 10,
            iterations: 1,
        }
    }

    /// Small network for gradient checks: 1×8×8 input, two 3-channel
    /// convolutions, every layer type, one feedback head per convolution.
    pub fn tiny(classes: usize, iterations: usize) -> Self {
        NetworkSpec {
            input: (1, 8, 8),
            layers: vec![
                LayerSpec::Conv { name: "conv1".into(), out_channels: 3, kernel: (3, 3), stride: 1, padding: 0 },
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Conv { name: "conv2".into(), out_channels: 3, kernel: (2, 2), stride: 1, padding: 0 },
                LayerSpec::Relu { negative_slope: 0.1 },
                LayerSpec::Dense { name: "fc1".into(), out_dim: 8 },
                LayerSpec::Relu { negative_slope: 0.0 },
                LayerSpec::Dense { name: "fc2".into(), out_dim: classes },
            ],
            heads: Vec::new(),
            classes,
            iterations: 1,
        }
        .with_rethinking(EmphasisPlacement::BeforePool, iterations)
    }

    /// Smallest network that exercises every layer kind: a 1×4×4 input and
    /// two 2-channel convolutions, each with a head.
    pub fn micro(classes: usize, iterations: usize) -> Self {
        NetworkSpec {
            input: (1, 4, 4),
            layers: vec![
                LayerSpec::Conv { name: "conv1".into(), out_channels: 2, kernel: (2, 2), stride: 1, padding: 0 },
                LayerSpec::MaxPool { window: 2, stride: 1 },
                LayerSpec::Conv { name: "conv2".into(), out_channels: 2, kernel: (2, 2), stride: 1, padding: 1 },
                LayerSpec::Relu { negative_slope: 0.2 },
                LayerSpec::Dense { name: "fc1".into(), out_dim: classes },
            ],
            heads: Vec::new(),
            classes,
            iterations: 1,
        }
        .with_rethinking(EmphasisPlacement::BeforePool, iterations)
    }

    /// Two 3-channel 5×5 convolutions for 28×28 inputs; used for the
    /// synthetic overfitting checks.
    pub fn tiny28(classes: usize, iterations: usize) -> Self {
        let conv = |name: &str| LayerSpec::Conv {
            name: name.into(),
            out_channels: 3,
            kernel: (5, 5),
            stride: 1,
            padding: 0,
        };
        NetworkSpec {
            input: (1, 28, 28),
            layers: vec![
                conv("conv1"),
                LayerSpec::MaxPool { window: 2, stride: 2 },
                conv("conv2"),
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Dense { name: "fc1".into(), out_dim: 16 },
                LayerSpec::Relu { negative_slope: 0.0 },
                LayerSpec::Dense { name: "fc2".into(), out_dim: classes },
            ],
            heads: Vec::new(),
            classes,
            iterations: 1,
        }
        .with_rethinking(EmphasisPlacement::BeforePool, iterations)
    }

    pub fn is_rethinking(&self) -> bool {
        !self.heads.is_empty()
    }

    /// The same network with every emphasis layer and feedback head removed
    /// and `T = 1`.
    pub fn baseline(&self) -> Self {
        NetworkSpec {
            layers: self
                .layers
                .iter()
                .filter(|l| !matches!(l, LayerSpec::Emphasis { .. }))
                .cloned()
                .collect(),
            heads: Vec::new(),
            iterations: 1,
            ..self.clone()
        }
    }

    /// Attaches one feedback head and emphasis layer to every convolution.
    /// Existing heads are dropped first. Heads are named `fb_<conv>`.
    pub fn with_rethinking(&self, placement: EmphasisPlacement, iterations: usize) -> Self {
        let base = self.baseline();
        let mut layers = Vec::with_capacity(base.layers.len() + 4);
        let mut heads = Vec::new();
        let mut pending: Option<String> = None;
        for layer in &base.layers {
            if let (Some(head), LayerSpec::Conv { .. } | LayerSpec::Dense { .. }) = (&pending, layer) {
                layers.push(LayerSpec::Emphasis { head: head.clone() });
                pending = None;
            }
            layers.push(layer.clone());
            match layer {
                LayerSpec::Conv { name, .. } => {
                    let head = format!("fb_{name}");
                    heads.push(HeadSpec { name: head.clone(), target_layer: name.clone() });
                    match placement {
                        EmphasisPlacement::BeforePool => layers.push(LayerSpec::Emphasis { head }),
                        EmphasisPlacement::AfterPool => pending = Some(head),
                    }
                }
                LayerSpec::MaxPool { .. } => {
                    if let Some(head) = pending.take() {
                        layers.push(LayerSpec::Emphasis { head });
                    }
                }
                _ => {}
            }
        }
        if let Some(head) = pending {
            layers.push(LayerSpec::Emphasis { head });
        }
        NetworkSpec {
            layers,
            heads,
            iterations,
            ..base
        }
    }

    /// Checks structural invariants and resolves every layer's output shape.
    pub fn resolve(&self) -> Result<LayerShapes> {
        if self.iterations == 0 {
            return Err(Error::Config("rethinking iterations T must be ≥ 1".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("class count must be ≥ 1".into()));
        }
        let (c0, h0, w0) = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::Config("input dimensions must be ≥ 1".into()));
        }

        let mut names = HashSet::new();
        let mut conv_channels: HashMap<&str, usize> = HashMap::new();
        let mut last_conv: Option<&str> = None;
        let mut marker_targets: HashMap<&str, &str> = HashMap::new();
        let mut outputs = Vec::with_capacity(self.layers.len());
        let (mut c, mut h, mut w) = self.input;

        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { name, out_channels, kernel, stride, padding } => {
                    if !names.insert(name.as_str()) {
                        return Err(Error::Config(format!("duplicate layer name {name}")));
                    }
                    if *out_channels == 0 || *stride == 0 {
                        return Err(Error::Config(format!("conv {name}: zero channels or stride")));
                    }
                    h = conv_out_len(h, kernel.0, *stride, *padding)?;
                    w = conv_out_len(w, kernel.1, *stride, *padding)?;
                    c = *out_channels;
                    conv_channels.insert(name, c);
                    last_conv = Some(name);
                }
                LayerSpec::MaxPool { window, stride } => {
                    h = pool_out_len(h, *window, *stride)?;
                    w = pool_out_len(w, *window, *stride)?;
                }
                LayerSpec::Dense { name, out_dim } => {
                    if !names.insert(name.as_str()) {
                        return Err(Error::Config(format!("duplicate layer name {name}")));
                    }
                    if *out_dim == 0 {
                        return Err(Error::Config(format!("dense {name}: zero outputs")));
                    }
                    c = *out_dim;
                    h = 1;
                    w = 1;
                    last_conv = None;
                }
                LayerSpec::Relu { negative_slope } => {
                    if !(0.0..1.0).contains(negative_slope) {
                        return Err(Error::Config(format!(
                            "relu negative slope {negative_slope} outside [0, 1)"
                        )));
                    }
                }
                LayerSpec::Emphasis { head } => {
                    let target = last_conv.ok_or_else(|| {
                        Error::Config(format!("emphasis layer for {head} does not follow a convolution"))
                    })?;
                    if marker_targets.insert(head, target).is_some() {
                        return Err(Error::Config(format!("head {head} has more than one emphasis layer")));
                    }
                }
            }
            outputs.push((c, h, w));
        }

        match self.layers.last() {
            Some(LayerSpec::Dense { out_dim, .. }) if *out_dim == self.classes => {}
            _ => {
                return Err(Error::Config(format!(
                    "network must end in a dense layer with {} outputs",
                    self.classes
                )))
            }
        }

        let mut head_channels = Vec::with_capacity(self.heads.len());
        let mut head_names = HashSet::new();
        for head in &self.heads {
            if !head_names.insert(head.name.as_str()) {
                return Err(Error::Config(format!("duplicate head {}", head.name)));
            }
            let marker_target = marker_targets.get(head.name.as_str()).ok_or_else(|| {
                Error::Config(format!("head {} has no emphasis layer", head.name))
            })?;
            if *marker_target != head.target_layer {
                return Err(Error::Config(format!(
                    "head {} targets {} but its emphasis layer follows {}",
                    head.name, head.target_layer, marker_target
                )));
            }
            head_channels.push(conv_channels[head.target_layer.as_str()]);
        }
        if let Some(orphan) = marker_targets.keys().find(|h| !head_names.contains(*h)) {
            return Err(Error::Config(format!("emphasis layer refers to unknown head {orphan}")));
        }

        Ok(LayerShapes { outputs, head_channels })
    }

    /// Line-oriented text form stored in checkpoints.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (c, h, w) = self.input;
        writeln!(s, "input {c} {h} {w}").unwrap();
        writeln!(s, "classes {}", self.classes).unwrap();
        writeln!(s, "iterations {}", self.iterations).unwrap();
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { name, out_channels, kernel, stride, padding } => writeln!(
                    s,
                    "conv {name} {out_channels} {} {} {stride} {padding}",
                    kernel.0, kernel.1
                ),
                LayerSpec::MaxPool { window, stride } => writeln!(s, "pool {window} {stride}"),
                LayerSpec::Dense { name, out_dim } => writeln!(s, "dense {name} {out_dim}"),
                LayerSpec::Relu { negative_slope } => writeln!(s, "relu {negative_slope:?}"),
                LayerSpec::Emphasis { head } => writeln!(s, "emphasis {head}"),
            }
            .unwrap();
        }
        for head in &self.heads {
            writeln!(s, "head {} {}", head.name, head.target_layer).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = NetworkSpec {
            input: (0, 0, 0),
            layers: Vec::new(),
            heads: Vec::new(),
            classes: 0,
            iterations: 0,
        };
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Checkpoint(format!("network line {}: {line:?}", lineno + 1));
            let num = |i: usize| -> Result<usize> {
                fields.get(i).and_then(|f| f.parse().ok()).ok_or_else(bad)
            };
            let name = |i: usize| -> Result<String> {
                fields.get(i).map(|s| s.to_string()).ok_or_else(bad)
            };
            match fields.first().copied() {
                None => continue,
                Some("input") => spec.input = (num(1)?, num(2)?, num(3)?),
                Some("classes") => spec.classes = num(1)?,
                Some("iterations") => spec.iterations = num(1)?,
                Some("conv") => spec.layers.push(LayerSpec::Conv {
                    name: name(1)?,
                    out_channels: num(2)?,
                    kernel: (num(3)?, num(4)?),
                    stride: num(5)?,
                    padding: num(6)?,
                }),
                Some("pool") => spec.layers.push(LayerSpec::MaxPool { window: num(1)?, stride: num(2)? }),
                Some("dense") => spec.layers.push(LayerSpec::Dense { name: name(1)?, out_dim: num(2)? }),
                Some("relu") => spec.layers.push(LayerSpec::Relu {
                    negative_slope: fields.get(1).and_then(|f| f.parse().ok()).ok_or_else(bad)?,
                }),
                Some("emphasis") => spec.layers.push(LayerSpec::Emphasis { head: name(1)? }),
                Some("head") => spec.heads.push(HeadSpec { name: name(1)?, target_layer: name(2)? }),
                Some(_) => return Err(bad()),
            }
        }
        spec.resolve()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_layer_shapes() {
        let spec = NetworkSpec::lenet(false, 0.0);
        let shapes = spec.resolve().unwrap();
        assert_eq!(
            shapes.outputs,
            vec![(20, 24, 24), (20, 12, 12), (50, 8, 8), (50, 4, 4), (500, 1, 1), (500, 1, 1), (10, 1, 1)]
        );
    }

    #[test]
    fn rethinking_attaches_one_head_per_conv() {
        let lr = NetworkSpec::lenet(false, 0.0).with_rethinking(EmphasisPlacement::BeforePool, 2);
        assert_eq!(lr.heads.len(), 2);
        assert_eq!(lr.resolve().unwrap().head_channels, vec![20, 50]);
        assert_eq!(lr.layers[1], LayerSpec::Emphasis { head: "fb_conv1".into() });
        assert_eq!(lr.baseline(), NetworkSpec::lenet(false, 0.0));

        let after = NetworkSpec::lenet(true, 0.0).with_rethinking(EmphasisPlacement::AfterPool, 2);
        // conv1, relu, pool, emphasis
        assert_eq!(after.layers[3], LayerSpec::Emphasis { head: "fb_conv1".into() });
        after.resolve().unwrap();
    }

    #[test]
    fn tiny_resolves() {
        let spec = NetworkSpec::tiny(5, 3);
        let shapes = spec.resolve().unwrap();
        assert_eq!(shapes.head_channels, vec![3, 3]);
        assert_eq!(spec.iterations, 3);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = NetworkSpec::tiny(4, 2);
        spec.iterations = 0;
        assert!(spec.resolve().is_err());

        let mut spec = NetworkSpec::tiny(4, 2);
        spec.heads.pop();
        assert!(spec.resolve().is_err());

        let mut spec = NetworkSpec::tiny(4, 2);
        spec.heads[0].target_layer = "conv2".into();
        assert!(spec.resolve().is_err());

        let mut spec = NetworkSpec::tiny(4, 2);
        spec.classes = 7;
        assert!(spec.resolve().is_err());

        let mut spec = NetworkSpec::lenet(false, 0.0);
        spec.input = (1, 10, 10);
        assert!(spec.resolve().is_err());
    }

    #[test]
    fn text_round_trip() {
        for spec in [
            NetworkSpec::lenet(true, 0.01).with_rethinking(EmphasisPlacement::AfterPool, 3),
            NetworkSpec::tiny(5, 2),
            NetworkSpec::lenet(false, 0.0),
        ] {
            assert_eq!(NetworkSpec::from_text(&spec.to_text()).unwrap(), spec);
        }
    }
}
