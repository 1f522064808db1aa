use super::NnError;

/// Side length of every convolution kernel.
pub const KERNEL: usize = 3;

/// One layer of a sequential network.
///
/// Convolutions are always 3×3, stride 1, zero padding 1, so they preserve the
/// spatial size. Pooling is 2×2 with stride 2 (odd trailing rows/columns are
/// dropped).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool2d,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// `(weight shape, bias shape)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => Some((
                vec![out_channels, in_channels, KERNEL, KERNEL],
                vec![out_channels],
            )),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` used by the Glorot-uniform initializer.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => Some((
                in_channels * KERNEL * KERNEL,
                out_channels * KERNEL * KERNEL,
            )),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((in_features, out_features)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => match input {
                [c, h, w] if *c == in_channels => Ok(vec![out_channels, *h, *w]),
                _ => Err(format!("conv expects [{in_channels}, H, W], got {input:?}")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(format!("max-pool expects [C, H>=2, W>=2], got {input:?}")),
            },
            LayerSpec::Flatten => input
                .iter()
                .try_fold(1usize, |n, &d| n.checked_mul(d))
                .map(|n| vec![n])
                .ok_or_else(|| format!("flatten of {input:?} overflows")),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => match input {
                [f] if *f == in_features => Ok(vec![out_features]),
                _ => Err(format!("dense expects [{in_features}], got {input:?}")),
            },
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }
}

/// A shape-checked run of layers.
///
/// `first_index` is the position of the first layer within the full model, so
/// parameter keys of a partial stack (one side of a split) keep their
/// full-model indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerStack {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    first_index: usize,
    shapes: Vec<Vec<usize>>,
}

impl LayerStack {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        first_index: usize,
    ) -> Result<Self, NnError> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(NnError::Config(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            current = layer
                .output_shape(&current)
                .map_err(|e| NnError::Config(format!("layer {}: {e}", first_index + i)))?;
            shapes.push(current.clone());
        }
        Ok(Self {
            input_shape,
            layers,
            first_index,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes
            .last()
            .map(Vec::as_slice)
            .unwrap_or(&self.input_shape)
    }

    /// Per-sample output shape of each layer.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn first_index(&self) -> usize {
        self.first_index
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Full-model indices of the parameterized layers.
    pub fn param_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| self.first_index + i)
            .collect()
    }

    pub fn layer(&self, global_index: usize) -> Option<&LayerSpec> {
        global_index
            .checked_sub(self.first_index)
            .and_then(|i| self.layers.get(i))
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv2d { .. }))
            .count()
    }

    /// Splits at local position `cut` into `[0, cut)` and `[cut, len)`.
    pub fn split_at(&self, cut: usize) -> Result<(LayerStack, LayerStack), NnError> {
        if cut > self.layers.len() {
            return Err(NnError::Config(format!(
                "cut {cut} beyond {} layers",
                self.layers.len()
            )));
        }
        let head = LayerStack::new(
            self.input_shape.clone(),
            self.layers[..cut].to_vec(),
            self.first_index,
        )?;
        let tail = LayerStack::new(
            head.output_shape().to_vec(),
            self.layers[cut..].to_vec(),
            self.first_index + cut,
        )?;
        Ok((head, tail))
    }

    /// Inverse of [`LayerStack::split_at`].
    pub fn concat(head: &LayerStack, tail: &LayerStack) -> Result<LayerStack, NnError> {
        if head.first_index + head.len() != tail.first_index {
            return Err(NnError::Config("stacks are not adjacent".into()));
        }
        if head.output_shape() != tail.input_shape() {
            return Err(NnError::Config(format!(
                "head output {:?} does not feed tail input {:?}",
                head.output_shape(),
                tail.input_shape()
            )));
        }
        let mut layers = head.layers.clone();
        layers.extend_from_slice(&tail.layers);
        LayerStack::new(head.input_shape.clone(), layers, head.first_index)
    }
}

/// A complete classifier: a stack starting at layer 0 whose final layer is a
/// dense layer producing `num_classes` logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    stack: LayerStack,
    num_classes: usize,
}

/// Channel widths of the reduced VGG-style model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiniVggWidths {
    pub conv: [usize; 3],
    pub hidden: usize,
}

impl Default for MiniVggWidths {
    fn default() -> Self {
        Self {
            conv: [16, 32, 32],
            hidden: 128,
        }
    }
}

impl ModelSpec {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        num_classes: usize,
    ) -> Result<Self, NnError> {
        if num_classes == 0 {
            return Err(NnError::Config("num_classes must be positive".into()));
        }
        match layers.last() {
            Some(LayerSpec::Dense { out_features, .. }) if *out_features == num_classes => {}
            _ => {
                return Err(NnError::Config(format!(
                    "final layer must be dense with {num_classes} outputs"
                )))
            }
        }
        let stack = LayerStack::new(input_shape, layers, 0)?;
        Ok(Self { stack, num_classes })
    }

    /// Conv(3→16)-ReLU-Pool, Conv(16→32)-ReLU-Pool, Conv(32→32)-ReLU,
    /// Flatten, Dense(→128)-ReLU, Dense(128→classes), with configurable widths.
    pub fn mini_vgg(
        input: [usize; 3],
        num_classes: usize,
        widths: MiniVggWidths,
    ) -> Result<Self, NnError> {
        let [c, h, w] = input;
        let [c1, c2, c3] = widths.conv;
        let flat = c3 * (h / 2 / 2) * (w / 2 / 2);
        let layers = vec![
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: c1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d,
            LayerSpec::Conv2d {
                in_channels: c1,
                out_channels: c2,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d,
            LayerSpec::Conv2d {
                in_channels: c2,
                out_channels: c3,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: flat,
                out_features: widths.hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                in_features: widths.hidden,
                out_features: num_classes,
            },
        ];
        Self::new(input.to_vec(), layers, num_classes)
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }

    pub fn layers(&self) -> &[LayerSpec] {
        self.stack.layers()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.stack.input_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn conv_count(&self) -> usize {
        self.stack.conv_count()
    }
}
