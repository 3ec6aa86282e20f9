use candle_core::Tensor;

use super::config::BackboneConfig;
use super::layers::{ChannelAffine, Conv2d};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: Conv2d,
    reduce_norm: ChannelAffine,
    spatial: Conv2d,
    spatial_norm: ChannelAffine,
    expand: Conv2d,
    expand_norm: ChannelAffine,
    shortcut: Option<(Conv2d, ChannelAffine)>,
}

impl Bottleneck {
    fn new(store: &mut ParamStore, name: &str, input: usize, width: usize, stride: usize) -> Result<Self> {
        let out = width * 4;
        let shortcut = if stride != 1 || input != out {
            Some((
                Conv2d::new(store, &format!("{name}.shortcut"), input, out, 1, stride, 0, false)?,
                ChannelAffine::new(store, &format!("{name}.shortcut_norm"), out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            reduce: Conv2d::new(store, &format!("{name}.reduce"), input, width, 1, 1, 0, false)?,
            reduce_norm: ChannelAffine::new(store, &format!("{name}.reduce_norm"), width)?,
            spatial: Conv2d::new(store, &format!("{name}.spatial"), width, width, 3, stride, 1, false)?,
            spatial_norm: ChannelAffine::new(store, &format!("{name}.spatial_norm"), width)?,
            expand: Conv2d::new(store, &format!("{name}.expand"), width, out, 1, 1, 0, false)?,
            expand_norm: ChannelAffine::new(store, &format!("{name}.expand_norm"), out)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.reduce_norm.forward(&self.reduce.forward(x)?)?.relu()?;
        let y = self.spatial_norm.forward(&self.spatial.forward(&y)?)?.relu()?;
        let y = self.expand_norm.forward(&self.expand.forward(&y)?)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Plain(Conv2d),
    Residual {
        stem: Option<(Conv2d, ChannelAffine)>,
        blocks: Vec<Bottleneck>,
    },
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Stage::Plain(conv) => Ok(conv.forward(x)?.relu()?),
            Stage::Residual { stem, blocks } => {
                let mut y = match stem {
                    Some((conv, norm)) => {
                        let y = norm.forward(&conv.forward(x)?)?.relu()?;
                        // 3x3/2 max pool with one cell of padding; inputs are >= 0
                        y.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?
                    }
                    None => x.clone(),
                };
                for b in blocks {
                    y = b.forward(&y)?;
                }
                Ok(y)
            }
        }
    }
}

/// Convolutional feature extractor organised in stages.
#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<Stage>,
}

impl Backbone {
    /// Builds the first `stages` stages of the configured network.
    pub fn new(store: &mut ParamStore, name: &str, config: &BackboneConfig, stages: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(stages);
        match config {
            BackboneConfig::Plain { channels, strides } => {
                let mut input = 3;
                for (i, (&c, &s)) in channels.iter().zip(strides).take(stages).enumerate() {
                    out.push(Stage::Plain(Conv2d::new(
                        store,
                        &format!("{name}.stage{}", i + 1),
                        input,
                        c,
                        3,
                        s,
                        1,
                        true,
                    )?));
                    input = c;
                }
            }
            BackboneConfig::Resnet50 => {
                let layers = [3, 4, 6, 3];
                let widths = [64, 128, 256, 512];
                let mut input = 64;
                for i in 0..stages.min(4) {
                    let prefix = format!("{name}.stage{}", i + 1);
                    let stem = if i == 0 {
                        Some((
                            Conv2d::new(store, &format!("{prefix}.stem"), 3, 64, 7, 2, 3, false)?,
                            ChannelAffine::new(store, &format!("{prefix}.stem_norm"), 64)?,
                        ))
                    } else {
                        None
                    };
                    let mut blocks = Vec::new();
                    for b in 0..layers[i] {
                        let stride = if b == 0 && i > 0 { 2 } else { 1 };
                        blocks.push(Bottleneck::new(store, &format!("{prefix}.block{b}"), input, widths[i], stride)?);
                        input = widths[i] * 4;
                    }
                    out.push(Stage::Residual { stem, blocks });
                }
            }
        }
        Ok(Self { stages: out })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// `(B, 3, S, S)` images to `(B, C, S / stride, S / stride)` features.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.stages.iter().try_fold(images.clone(), |x, s| s.forward(&x))
    }
}
