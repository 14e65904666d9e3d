use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvOpts, Graph, Var};
use crate::tensor::Tensor;

use super::params::{NetworkParams, ParamVars};

/// Candidate operator families.
///
/// `Zero` is not a fusion operator in its own right; it is the usual
/// "no connection" candidate of differentiable search and is what lets a
/// search prune an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperatorKind {
    ChannelAttention,
    SpatialAttention,
    DilatedConv,
    ResidualBlock,
    DenseBlock,
    SeparableConv,
    SkipConnect,
    Zero,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 8] = [
        OperatorKind::ChannelAttention,
        OperatorKind::SpatialAttention,
        OperatorKind::DilatedConv,
        OperatorKind::ResidualBlock,
        OperatorKind::DenseBlock,
        OperatorKind::SeparableConv,
        OperatorKind::SkipConnect,
        OperatorKind::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::ChannelAttention => "channel-attention",
            OperatorKind::SpatialAttention => "spatial-attention",
            OperatorKind::DilatedConv => "dilated-conv",
            OperatorKind::ResidualBlock => "residual-block",
            OperatorKind::DenseBlock => "dense-block",
            OperatorKind::SeparableConv => "separable-conv",
            OperatorKind::SkipConnect => "skip-connect",
            OperatorKind::Zero => "zero",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown operator kind `{name}`")))
    }

    /// Kinds that take a kernel size.
    pub fn is_convolutional(self) -> bool {
        matches!(
            self,
            OperatorKind::DilatedConv
                | OperatorKind::ResidualBlock
                | OperatorKind::DenseBlock
                | OperatorKind::SeparableConv
        )
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Kernel of the 2-channel convolution inside spatial attention.
pub const SPATIAL_ATTENTION_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorSpec {
    pub id: String,
    pub kind: OperatorKind,
    pub kernel: Option<usize>,
    pub channels_in: usize,
    pub channels_out: usize,
}

impl OperatorSpec {
    pub fn new(
        id: impl Into<String>,
        kind: OperatorKind,
        kernel: Option<usize>,
        channels: usize,
    ) -> Result<Self> {
        let id = id.into();
        if channels == 0 {
            return Err(Error::Config(format!(
                "operator `{id}`: channel count must be positive"
            )));
        }
        match (kind.is_convolutional(), kernel) {
            (true, Some(3 | 5)) | (false, None) => {}
            (true, Some(k)) => {
                return Err(Error::Config(format!(
                    "operator `{id}`: kernel {k} not in {{3, 5}}"
                )))
            }
            (true, None) => {
                return Err(Error::Config(format!(
                    "operator `{id}`: {kind} needs a kernel size"
                )))
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!(
                    "operator `{id}`: {kind} takes no kernel size"
                )))
            }
        }
        Ok(Self {
            id,
            kind,
            kernel,
            channels_in: channels,
            channels_out: channels,
        })
    }

    /// Resolves the built-in ids `3-RB`, `5-DC`, `CA`, `SA`, `skip`, `zero`, ...
    pub fn builtin(id: &str, channels: usize) -> Result<Self> {
        let (kind, kernel) = match id {
            "CA" => (OperatorKind::ChannelAttention, None),
            "SA" => (OperatorKind::SpatialAttention, None),
            "skip" => (OperatorKind::SkipConnect, None),
            "zero" => (OperatorKind::Zero, None),
            _ => {
                let unknown = || Error::Config(format!("unknown operator id `{id}`"));
                let (k, family) = id.split_once('-').ok_or_else(unknown)?;
                let kernel: usize = k.parse().map_err(|_| unknown())?;
                let kind = match family {
                    "DC" => OperatorKind::DilatedConv,
                    "RB" => OperatorKind::ResidualBlock,
                    "DB" => OperatorKind::DenseBlock,
                    "SC" => OperatorKind::SeparableConv,
                    _ => return Err(unknown()),
                };
                (kind, Some(kernel))
            }
        };
        Self::new(id, kind, kernel, channels)
    }

    /// `(name, shape)` of every parameter tensor, biases included.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = self.channels_in;
        let k = self.kernel.unwrap_or(0);
        match self.kind {
            OperatorKind::ChannelAttention => {
                let r = channel_attention_hidden(c);
                vec![
                    ("fc1.w", vec![r, c, 1, 1]),
                    ("fc1.b", vec![r]),
                    ("fc2.w", vec![c, r, 1, 1]),
                    ("fc2.b", vec![c]),
                ]
            }
            OperatorKind::SpatialAttention => {
                let s = SPATIAL_ATTENTION_KERNEL;
                vec![("conv.w", vec![1, 2, s, s]), ("conv.b", vec![1])]
            }
            OperatorKind::DilatedConv => vec![("conv.w", vec![c, c, k, k]), ("conv.b", vec![c])],
            OperatorKind::ResidualBlock => vec![
                ("conv1.w", vec![c, c, k, k]),
                ("conv1.b", vec![c]),
                ("conv2.w", vec![c, c, k, k]),
                ("conv2.b", vec![c]),
            ],
            OperatorKind::DenseBlock => vec![
                ("conv1.w", vec![c, c, k, k]),
                ("conv1.b", vec![c]),
                ("conv2.w", vec![c, 2 * c, k, k]),
                ("conv2.b", vec![c]),
                ("fuse.w", vec![c, 3 * c, 1, 1]),
                ("fuse.b", vec![c]),
            ],
            OperatorKind::SeparableConv => vec![
                ("depthwise.w", vec![c, 1, k, k]),
                ("depthwise.b", vec![c]),
                ("pointwise.w", vec![c, c, 1, 1]),
                ("pointwise.b", vec![c]),
            ],
            OperatorKind::SkipConnect | OperatorKind::Zero => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

fn channel_attention_hidden(channels: usize) -> usize {
    (channels / 4).max(1)
}

/// Kaiming-uniform weights (ReLU gain), zero biases.
pub(crate) fn init_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    if shape.len() == 1 {
        return Tensor::zeros(shape.to_vec());
    }
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape.to_vec(), bound, rng)
}

/// An operator bound to its parameter indices.
#[derive(Debug, Clone)]
pub struct BoundOperator {
    pub spec: OperatorSpec,
    params: Vec<usize>,
}

impl BoundOperator {
    pub(crate) fn allocate<R: Rng + ?Sized>(
        spec: OperatorSpec,
        prefix: &str,
        params: &mut NetworkParams,
        rng: &mut R,
    ) -> Result<Self> {
        let mut indices = Vec::new();
        for (name, shape) in spec.param_shapes() {
            let full = format!("{prefix}.{}.{name}", spec.id);
            indices.push(params.insert(full, init_tensor(&shape, rng))?);
        }
        Ok(Self {
            spec,
            params: indices,
        })
    }

    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var> {
        let p = |i: usize| pv.get(self.params[i]);
        let k = self.spec.kernel.unwrap_or(1);
        match self.spec.kind {
            OperatorKind::SkipConnect => Ok(x),
            OperatorKind::Zero => Ok(g.scale(x, 0.0)),
            OperatorKind::ChannelAttention => {
                let pooled = g.global_avg_pool(x)?;
                let hidden = g.conv2d(pooled, p(0), Some(p(1)), ConvOpts::same(1, 1))?;
                let hidden = g.relu(hidden);
                let gate = g.conv2d(hidden, p(2), Some(p(3)), ConvOpts::same(1, 1))?;
                let gate = g.sigmoid(gate);
                g.mul_broadcast(x, gate)
            }
            OperatorKind::SpatialAttention => {
                let mean = g.channel_mean(x)?;
                let max = g.channel_max(x)?;
                let stats = g.concat(&[mean, max])?;
                let logits = g.conv2d(
                    stats,
                    p(0),
                    Some(p(1)),
                    ConvOpts::same(SPATIAL_ATTENTION_KERNEL, 1),
                )?;
                let gate = g.sigmoid(logits);
                g.mul_broadcast(x, gate)
            }
            OperatorKind::DilatedConv => {
                let y = g.conv2d(x, p(0), Some(p(1)), ConvOpts::same(k, 2))?;
                Ok(g.relu(y))
            }
            OperatorKind::ResidualBlock => {
                let y = g.conv2d(x, p(0), Some(p(1)), ConvOpts::same(k, 1))?;
                let y = g.relu(y);
                let y = g.conv2d(y, p(2), Some(p(3)), ConvOpts::same(k, 1))?;
                g.add(x, y)
            }
            OperatorKind::DenseBlock => {
                let y1 = g.conv2d(x, p(0), Some(p(1)), ConvOpts::same(k, 1))?;
                let y1 = g.relu(y1);
                let cat1 = g.concat(&[x, y1])?;
                let y2 = g.conv2d(cat1, p(2), Some(p(3)), ConvOpts::same(k, 1))?;
                let y2 = g.relu(y2);
                let cat2 = g.concat(&[x, y1, y2])?;
                g.conv2d(cat2, p(4), Some(p(5)), ConvOpts::same(1, 1))
            }
            OperatorKind::SeparableConv => {
                let channels = self.spec.channels_in;
                let dw = ConvOpts {
                    groups: channels,
                    ..ConvOpts::same(k, 1)
                };
                let y = g.conv2d(x, p(0), Some(p(1)), dw)?;
                let y = g.conv2d(y, p(2), Some(p(3)), ConvOpts::same(1, 1))?;
                Ok(g.relu(y))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtin_ids_resolve() {
        let rb = OperatorSpec::builtin("3-RB", 4).unwrap();
        assert_eq!((rb.kind, rb.kernel), (OperatorKind::ResidualBlock, Some(3)));
        let sc = OperatorSpec::builtin("5-SC", 4).unwrap();
        assert_eq!((sc.kind, sc.kernel), (OperatorKind::SeparableConv, Some(5)));
        assert_eq!(OperatorSpec::builtin("SA", 4).unwrap().kernel, None);
        for bad in ["7-RB", "3-XX", "RB", "foo"] {
            let err = OperatorSpec::builtin(bad, 4).unwrap_err().to_string();
            assert!(err.contains(bad), "{err}");
        }
    }

    #[test]
    fn kernel_only_for_convolutional_kinds() {
        assert!(OperatorSpec::new("s", OperatorKind::SkipConnect, Some(3), 4).is_err());
        assert!(OperatorSpec::new("d", OperatorKind::DilatedConv, None, 4).is_err());
        assert_eq!(
            OperatorSpec::new("s", OperatorKind::SkipConnect, None, 4)
                .unwrap()
                .param_count(),
            0
        );
    }

    #[test]
    fn every_operator_preserves_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in [
            "CA", "SA", "3-DC", "5-DC", "3-RB", "5-RB", "3-DB", "5-DB", "3-SC", "5-SC", "skip",
            "zero",
        ] {
            let spec = OperatorSpec::builtin(id, 4).unwrap();
            let mut params = NetworkParams::new();
            let op = BoundOperator::allocate(spec.clone(), "t", &mut params, &mut rng).unwrap();
            assert_eq!(params.numel(), spec.param_count(), "{id}");
            let mut g = Graph::new();
            let pv = params.register(&mut g);
            let x = g.leaf(Tensor::uniform(vec![2, 4, 7, 9], 1.0, &mut rng));
            let y = op.forward(&mut g, &pv, x).unwrap();
            assert_eq!(g.shape(y), &[2, 4, 7, 9], "{id}");
        }
    }
}
