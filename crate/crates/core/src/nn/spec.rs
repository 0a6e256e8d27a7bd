use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NnError;

/// Direction an axis LSTM scans a feature map in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Along x, one sequence per row.
    X,
    /// Along y, one sequence per column.
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        /// (height, width)
        kernel: [usize; 2],
        padding: [usize; 2],
        stride: [usize; 2],
    },
    Relu,
    Sigmoid,
    BatchNorm2d {
        channels: usize,
    },
    MaxPool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    /// `[B, C, H, W]` → `[B, W, C·H]`: one frame per column.
    CollapseHeight,
    /// Bidirectional LSTM over a frame sequence; output is `2·hidden` wide.
    BiLstm {
        input: usize,
        hidden: usize,
    },
    /// Bidirectional LSTM run along one axis of a feature map; output has
    /// `2·hidden` channels.
    AxisLstm {
        axis: Axis,
        input: usize,
        hidden: usize,
    },
    Dropout {
        p: f32,
    },
    Linear {
        input: usize,
        output: usize,
    },
    LogSoftmax,
}

/// Activation shape without the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Seq { t: usize, f: usize },
}

impl LayerSpec {
    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::CollapseHeight => "collapse_height",
            LayerSpec::BiLstm { .. } => "bilstm",
            LayerSpec::AxisLstm { .. } => "axis_lstm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::LogSoftmax => "log_softmax",
        }
    }

    /// Output shape for a given input shape, or why they don't fit.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, String> {
        use LayerSpec::*;
        match (*self, input) {
            (
                Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                    stride,
                },
                Shape::Map { c, h, w },
            ) => {
                if c != in_channels {
                    return Err(format!("expects {in_channels} channels, got {c}"));
                }
                let span_h = h + 2 * padding[0];
                let span_w = w + 2 * padding[1];
                if span_h < kernel[0] || span_w < kernel[1] {
                    return Err(format!("input {h}x{w} smaller than kernel {kernel:?}"));
                }
                Ok(Shape::Map {
                    c: out_channels,
                    h: (span_h - kernel[0]) / stride[0] + 1,
                    w: (span_w - kernel[1]) / stride[1] + 1,
                })
            }
            (Relu | Sigmoid | Dropout { .. }, s) => Ok(s),
            (BatchNorm2d { channels }, Shape::Map { c, h, w }) => {
                if c != channels {
                    return Err(format!("expects {channels} channels, got {c}"));
                }
                Ok(Shape::Map { c, h, w })
            }
            (MaxPool2d { kernel, stride }, Shape::Map { c, h, w }) => {
                if h < kernel[0] || w < kernel[1] {
                    return Err(format!("input {h}x{w} smaller than pool {kernel:?}"));
                }
                Ok(Shape::Map {
                    c,
                    h: (h - kernel[0]) / stride[0] + 1,
                    w: (w - kernel[1]) / stride[1] + 1,
                })
            }
            (CollapseHeight, Shape::Map { c, h, w }) => Ok(Shape::Seq { t: w, f: c * h }),
            (BiLstm { input, hidden }, Shape::Seq { t, f }) => {
                if f != input {
                    return Err(format!("expects {input} features, got {f}"));
                }
                Ok(Shape::Seq { t, f: 2 * hidden })
            }
            (AxisLstm { input, hidden, .. }, Shape::Map { c, h, w }) => {
                if c != input {
                    return Err(format!("expects {input} channels, got {c}"));
                }
                Ok(Shape::Map {
                    c: 2 * hidden,
                    h,
                    w,
                })
            }
            (Linear { input, output }, Shape::Seq { t, f }) => {
                if f != input {
                    return Err(format!("expects {input} features, got {f}"));
                }
                Ok(Shape::Seq { t, f: output })
            }
            (LogSoftmax, s @ Shape::Seq { .. }) => Ok(s),
            (_, s) => Err(format!("cannot take input of shape {s:?}")),
        }
    }

    /// Trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel[0] * kernel[1] + out_channels,
            LayerSpec::BatchNorm2d { channels } => 2 * channels,
            LayerSpec::BiLstm { input, hidden } | LayerSpec::AxisLstm { input, hidden, .. } => {
                2 * (4 * hidden * (input + hidden) + 4 * hidden)
            }
            LayerSpec::Linear { input, output } => input * output + output,
            _ => 0,
        }
    }
}

/// Ordered layer list plus the input it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_channels: usize,
    /// Fixed input height, when the model requires one.
    pub input_height: Option<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Shape after every layer, naming the first layer that rejects its input.
    pub fn shapes(&self, height: usize, width: usize) -> Result<Vec<Shape>, NnError> {
        if let Some(h) = self.input_height {
            if h != height {
                return Err(NnError::Shape(format!(
                    "model {} expects input height {h}, got {height}",
                    self.name
                )));
            }
        }
        let mut shape = Shape::Map {
            c: self.input_channels,
            h: height,
            w: width,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(shape).map_err(|m| {
                NnError::Shape(format!("layer {i} ({}): {m}", layer.name()))
            })?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn output_shape(&self, height: usize, width: usize) -> Result<Shape, NnError> {
        Ok(*self
            .shapes(height, width)?
            .last()
            .unwrap_or(&Shape::Map {
                c: self.input_channels,
                h: height,
                w: width,
            }))
    }

    /// Number of output frames a sequence model yields for an input width.
    pub fn frames_for_width(&self, width: usize) -> Result<usize, NnError> {
        let height = self.input_height.unwrap_or(1);
        match self.output_shape(height, width)? {
            Shape::Seq { t, .. } => Ok(t),
            Shape::Map { .. } => Err(NnError::Shape("model does not output a sequence".into())),
        }
    }

    /// Smallest input width that yields at least one frame.
    pub fn min_width(&self) -> usize {
        (1..4096)
            .find(|&w| self.frames_for_width(w).map(|t| t >= 1).unwrap_or(false))
            .unwrap_or(4096)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::parameter_count).sum()
    }

    /// Hex SHA-256 prefix of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&json)[..16])
    }

    /// Number of output classes of a sequence model (last linear layer).
    pub fn output_classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::Linear { output, .. } => Some(*output),
            _ => None,
        })
    }
}

/// Size knobs of the CNN+LSTM recognizer. [`RecognizerConfig::fiducial`] is
/// the full-size reference model; smaller settings keep the same topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub input_height: usize,
    pub conv_channels: [usize; 4],
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub dropout: f32,
}

impl RecognizerConfig {
    pub fn fiducial() -> Self {
        RecognizerConfig {
            input_height: 128,
            conv_channels: [32, 32, 64, 64],
            lstm_hidden: 512,
            lstm_layers: 3,
            dropout: 0.3,
        }
    }

    /// A narrow variant for quick experiments on small inputs.
    pub fn small() -> Self {
        RecognizerConfig {
            input_height: 32,
            conv_channels: [8, 16, 16, 32],
            lstm_hidden: 128,
            lstm_layers: 2,
            dropout: 0.1,
        }
    }
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig::fiducial()
    }
}

/// Conv kernels and paddings of the four blocks, as (height, width).
const BLOCKS: [([usize; 2], [usize; 2]); 4] = [
    ([4, 16], [1, 7]),
    ([4, 16], [1, 7]),
    ([3, 8], [1, 3]),
    ([3, 8], [1, 3]),
];

/// The reference recognizer for `n_char` characters (plus blank).
pub fn build_fiducial_model(n_char: usize) -> ModelSpec {
    build_recognizer(&RecognizerConfig::fiducial(), n_char)
}

/// Four conv blocks (conv, ReLU, batch norm, 2×2 pool on the first three),
/// stacked bidirectional LSTMs with dropout between them, a linear layer to
/// `n_char + 1` classes and a per-frame log-softmax.
pub fn build_recognizer(cfg: &RecognizerConfig, n_char: usize) -> ModelSpec {
    let mut layers = Vec::new();
    let mut in_ch = 1;
    let mut h = cfg.input_height;
    for (i, ((kernel, padding), &out_ch)) in BLOCKS.iter().zip(&cfg.conv_channels).enumerate() {
        layers.push(LayerSpec::Conv2d {
            in_channels: in_ch,
            out_channels: out_ch,
            kernel: *kernel,
            padding: *padding,
            stride: [1, 1],
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::BatchNorm2d { channels: out_ch });
        h = h + 2 * padding[0] - kernel[0] + 1;
        if i < 3 {
            layers.push(LayerSpec::MaxPool2d {
                kernel: [2, 2],
                stride: [2, 2],
            });
            h /= 2;
        }
        in_ch = out_ch;
    }
    layers.push(LayerSpec::CollapseHeight);
    let mut features = in_ch * h;
    for i in 0..cfg.lstm_layers {
        if i > 0 && cfg.dropout > 0.0 {
            layers.push(LayerSpec::Dropout { p: cfg.dropout });
        }
        layers.push(LayerSpec::BiLstm {
            input: features,
            hidden: cfg.lstm_hidden,
        });
        features = 2 * cfg.lstm_hidden;
    }
    layers.push(LayerSpec::Linear {
        input: features,
        output: n_char + 1,
    });
    layers.push(LayerSpec::LogSoftmax);
    ModelSpec {
        name: "cnn-lstm".into(),
        input_channels: 1,
        input_height: Some(cfg.input_height),
        layers,
    }
}

/// Width page images are resized to before segmentation.
pub const SEGMENTATION_WIDTH: usize = 1800;

/// Baseline segmentation network: five convolutions, an LSTM along y and one
/// along x, a 1×1 bottleneck, another y/x LSTM pair, and a 1×1 convolution to
/// three sigmoid heatmaps (starts, baselines, ends) at 1/4 resolution.
pub fn build_segmentation_model() -> ModelSpec {
    let conv = |i, o, k: usize, s| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: [k, k],
        padding: [k / 2, k / 2],
        stride: [s, s],
    };
    let layers = vec![
        conv(3, 16, 7, 2),
        LayerSpec::Relu,
        LayerSpec::BatchNorm2d { channels: 16 },
        conv(16, 32, 3, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2d {
            kernel: [2, 2],
            stride: [2, 2],
        },
        conv(32, 32, 3, 1),
        LayerSpec::Relu,
        conv(32, 64, 3, 1),
        LayerSpec::Relu,
        conv(64, 64, 3, 1),
        LayerSpec::Relu,
        LayerSpec::AxisLstm {
            axis: Axis::Y,
            input: 64,
            hidden: 16,
        },
        LayerSpec::AxisLstm {
            axis: Axis::X,
            input: 32,
            hidden: 16,
        },
        conv(32, 32, 1, 1),
        LayerSpec::Relu,
        LayerSpec::AxisLstm {
            axis: Axis::Y,
            input: 32,
            hidden: 16,
        },
        LayerSpec::AxisLstm {
            axis: Axis::X,
            input: 32,
            hidden: 16,
        },
        conv(32, 3, 1, 1),
        LayerSpec::Sigmoid,
    ];
    ModelSpec {
        name: "baseline-seg".into(),
        input_channels: 3,
        input_height: None,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fiducial_feature_height() {
        let spec = build_fiducial_model(80);
        let shapes = spec.shapes(128, 1000).unwrap();
        let collapse = spec
            .layers
            .iter()
            .position(|l| *l == LayerSpec::CollapseHeight)
            .unwrap();
        assert_eq!(shapes[collapse - 1], Shape::Map { c: 64, h: 15, w: 123 });
        assert_eq!(shapes[collapse], Shape::Seq { t: 123, f: 960 });
        assert!(matches!(
            spec.layers[collapse + 1],
            LayerSpec::BiLstm { input: 960, hidden: 512 }
        ));
    }

    #[test]
    fn frame_count_recurrence() {
        let spec = build_fiducial_model(10);
        for w in [64usize, 100, 333, 1000, 2047] {
            let mut x = w;
            for (k, p) in [(16, 7), (16, 7), (8, 3)] {
                x = (x + 2 * p - k + 1) / 2;
            }
            x = x + 2 * 3 - 8 + 1;
            assert_eq!(spec.frames_for_width(w).unwrap(), x, "width {w}");
        }
        assert_eq!(spec.frames_for_width(1000).unwrap(), 123);
    }

    #[test]
    fn fiducial_parameter_count() {
        for n in [50, 80, 120] {
            let count = build_fiducial_model(n).parameter_count();
            assert!((18_000_000..=20_000_000).contains(&count), "{count}");
        }
    }

    #[test]
    fn wrong_height_names_layer() {
        let spec = build_fiducial_model(10);
        assert!(spec.shapes(64, 100).is_err());
        let mut bad = spec.clone();
        bad.layers[2] = LayerSpec::BatchNorm2d { channels: 7 };
        let err = bad.shapes(128, 100).unwrap_err().to_string();
        assert!(err.contains("layer 2 (batchnorm2d)"), "{err}");
    }

    #[test]
    fn segmentation_outputs_three_maps() {
        let spec = build_segmentation_model();
        assert_eq!(
            spec.output_shape(400, SEGMENTATION_WIDTH).unwrap(),
            Shape::Map { c: 3, h: 100, w: 450 }
        );
    }

    #[test]
    fn hash_tracks_content() {
        let a = build_fiducial_model(10);
        let b = build_fiducial_model(11);
        assert_eq!(a.hash(), build_fiducial_model(10).hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn small_variant_shapes() {
        let spec = build_recognizer(&RecognizerConfig::small(), 20);
        assert!(spec.frames_for_width(160).unwrap() >= 15);
        assert!(spec.min_width() > 1);
    }
}
