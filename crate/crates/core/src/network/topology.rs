use std::fmt;
use std::str::FromStr;

use super::NetworkError;
use crate::ops::window_output_len;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    FullyConnected,
}

/// Max-pool applied (after ReLU) when this layer's maps feed the next layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub num_maps: usize,
    pub pool_after: Option<PoolSpec>,
    pub routing: bool,
}

impl LayerSpec {
    pub fn conv(num_maps: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv {
                kernel: (kernel, kernel),
                stride,
                padding,
            },
            num_maps,
            pool_after: None,
            routing: false,
        }
    }

    pub fn fc(num_maps: usize) -> Self {
        LayerSpec {
            kind: LayerKind::FullyConnected,
            num_maps,
            pool_after: None,
            routing: false,
        }
    }

    pub fn pooled(mut self, window: usize, stride: usize) -> Self {
        self.pool_after = Some(PoolSpec { window, stride });
        self
    }

    pub fn with_routing(mut self, routing: bool) -> Self {
        self.routing = routing;
        self
    }
}

/// Layer descriptors render as e.g. `conv:8 k=3x3 s=1 p=1 pool=2/2 route` or `fc:4`.
impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Conv {
                kernel: (kh, kw),
                stride,
                padding,
            } => write!(f, "conv:{} k={kh}x{kw} s={stride} p={padding}", self.num_maps)?,
            LayerKind::FullyConnected => write!(f, "fc:{}", self.num_maps)?,
        }
        if let Some(p) = self.pool_after {
            write!(f, " pool={}/{}", p.window, p.stride)?;
        }
        if self.routing {
            write!(f, " route")?;
        }
        Ok(())
    }
}

impl FromStr for LayerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut tokens = s.split_whitespace();
        let head = tokens.next().ok_or("empty layer descriptor")?;
        let (kind, maps) = head
            .split_once(':')
            .ok_or_else(|| format!("expected `conv:<maps>` or `fc:<maps>`, got `{head}`"))?;
        let num_maps = parse_usize("maps", maps)?;
        let mut spec = match kind {
            "conv" => LayerSpec::conv(num_maps, 1, 1, 0),
            "fc" => LayerSpec::fc(num_maps),
            other => return Err(format!("unknown layer kind `{other}`")),
        };
        for tok in tokens {
            if tok == "route" {
                spec.routing = true;
                continue;
            }
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| format!("unexpected token `{tok}`"))?;
            match (&mut spec.kind, key) {
                (LayerKind::Conv { kernel, .. }, "k") => {
                    *kernel = match value.split_once('x') {
                        Some((h, w)) => (parse_usize("k", h)?, parse_usize("k", w)?),
                        None => {
                            let k = parse_usize("k", value)?;
                            (k, k)
                        }
                    };
                }
                (LayerKind::Conv { stride, .. }, "s") => *stride = parse_usize("s", value)?,
                (LayerKind::Conv { padding, .. }, "p") => *padding = value
                    .parse()
                    .map_err(|_| format!("p: `{value}` is not a non-negative integer"))?,
                (LayerKind::Conv { .. }, "pool") => {
                    let (w, st) = value.split_once('/').unwrap_or((value, value));
                    spec.pool_after = Some(PoolSpec {
                        window: parse_usize("pool", w)?,
                        stride: parse_usize("pool", st)?,
                    });
                }
                (_, key) => return Err(format!("option `{key}` not valid for a {kind} layer")),
            }
        }
        Ok(spec)
    }
}

fn parse_usize(what: &str, s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("{what}: `{s}` is not a positive integer")),
    }
}

/// Spatial bookkeeping for one layer, derived from the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    /// Shape `(channels, h, w)` this layer reads.
    pub input: (usize, usize, usize),
    /// Shape `(maps, h, w)` of the retained response maps.
    pub output: (usize, usize, usize),
    /// Shape after ReLU and the optional pool, as seen by the next layer.
    pub forwarded: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkTopology {
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    /// When false, layers have no bias term.
    pub use_bias: bool,
}

impl NetworkTopology {
    pub fn new(input_shape: (usize, usize, usize), layers: Vec<LayerSpec>, num_classes: usize) -> Self {
        NetworkTopology {
            input_shape,
            layers,
            num_classes,
            use_bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.use_bias = false;
        self
    }

    /// Enables routing on every layer after the first whose width is at least
    /// `routing_classes`, and disables it elsewhere.
    pub fn with_default_routing(mut self, routing_classes: usize) -> Self {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.routing = i > 0 && layer.num_maps >= routing_classes;
        }
        self
    }

    /// Enables routing exactly on the given layer indices.
    pub fn with_routing_layers(mut self, indices: &[usize]) -> Self {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.routing = indices.contains(&i);
        }
        self
    }

    pub fn routing_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.routing)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks the whole shape chain and returns per-layer geometry.
    pub fn geometry(&self) -> Result<Vec<LayerGeometry>, NetworkError> {
        let (c0, h0, w0) = self.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(NetworkError::Topology(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        if self.num_classes == 0 {
            return Err(NetworkError::Topology("num_classes must be positive".into()));
        }
        let Some(last) = self.layers.last() else {
            return Err(NetworkError::Topology("topology has no layers".into()));
        };
        if last.num_maps != self.num_classes {
            return Err(NetworkError::Topology(format!(
                "final layer has {} maps but there are {} classes",
                last.num_maps, self.num_classes
            )));
        }

        let mut shape = self.input_shape;
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, spec) in self.layers.iter().enumerate() {
            let bad = |detail: String| NetworkError::Layer { layer, detail };
            if spec.num_maps == 0 {
                return Err(bad("num_maps must be at least 1".into()));
            }
            let input = shape;
            let output = match spec.kind {
                LayerKind::Conv {
                    kernel: (kh, kw),
                    stride,
                    padding,
                } => {
                    let oh = window_output_len(input.1, kh, stride, padding).ok_or_else(|| {
                        bad(format!(
                            "kernel height {kh} (stride {stride}, padding {padding}) does not fit input height {}",
                            input.1
                        ))
                    })?;
                    let ow = window_output_len(input.2, kw, stride, padding).ok_or_else(|| {
                        bad(format!(
                            "kernel width {kw} (stride {stride}, padding {padding}) does not fit input width {}",
                            input.2
                        ))
                    })?;
                    (spec.num_maps, oh, ow)
                }
                LayerKind::FullyConnected => (spec.num_maps, 1, 1),
            };
            let forwarded = match spec.pool_after {
                None => output,
                Some(PoolSpec { window, stride }) => {
                    if matches!(spec.kind, LayerKind::FullyConnected) {
                        return Err(bad("pooling after a fully-connected layer".into()));
                    }
                    let ph = window_output_len(output.1, window, stride, 0);
                    let pw = window_output_len(output.2, window, stride, 0);
                    match (ph, pw) {
                        (Some(ph), Some(pw)) => (output.0, ph, pw),
                        _ => {
                            return Err(bad(format!(
                                "pool window {window} exceeds response map {}x{}",
                                output.1, output.2
                            )))
                        }
                    }
                }
            };
            out.push(LayerGeometry {
                input,
                output,
                forwarded,
            });
            shape = forwarded;
        }
        let last_geom = out.last().expect("non-empty");
        if last_geom.output.1 != 1 || last_geom.output.2 != 1 {
            return Err(NetworkError::Layer {
                layer: out.len() - 1,
                detail: format!(
                    "final layer must produce 1x1 maps to serve as logits, got {}x{}",
                    last_geom.output.1, last_geom.output.2
                ),
            });
        }
        Ok(out)
    }

    /// `(filter_shape, bias_len)` per layer. Fully-connected weights are `D×M`.
    pub fn parameter_shapes(&self) -> Result<Vec<(Vec<usize>, usize)>, NetworkError> {
        let geometry = self.geometry()?;
        Ok(self
            .layers
            .iter()
            .zip(&geometry)
            .map(|(spec, g)| {
                let (c, h, w) = g.input;
                let filters = match spec.kind {
                    LayerKind::Conv { kernel: (kh, kw), .. } => vec![spec.num_maps, c, kh, kw],
                    LayerKind::FullyConnected => vec![c * h * w, spec.num_maps],
                };
                (filters, spec.num_maps)
            })
            .collect())
    }
}
