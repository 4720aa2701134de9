use std::fmt;

use crate::activation::Activation;
use crate::conv_layer::ConvShape;
use crate::error::{shape_err, Result};
use crate::layer::LayerSpec;

/// Ordered decoder layers, deepest first, plus the shared activation.
///
/// Levels number the representations: level 1 is the free latent code and
/// the data sits at level `K = layers + 1`. The layer at index `i` maps level
/// `i + 1` to level `i + 2`; violations are reported by the level a layer
/// produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    layers: Vec<LayerSpec>,
    activation: Activation,
}

impl Architecture {
    pub fn new(layers: Vec<LayerSpec>, activation: Activation) -> Self {
        Self { layers, activation }
    }

    /// Fully connected decoder through widths `d_1, …, d_K` (`d_K` = data).
    pub fn feedforward(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return shape_err("a feedforward decoder needs at least two widths");
        }
        let layers = dims
            .windows(2)
            .map(|w| LayerSpec::Feedforward {
                in_dim: w[0],
                out_dim: w[1],
            })
            .collect();
        Ok(Self::new(layers, activation))
    }

    /// Chain of conv-unpool layers starting from a `c × h × w` code; each
    /// entry is `(kernel, pre_shuffle_channels, unpool)`.
    pub fn conv(
        code: (usize, usize, usize),
        layers: &[(usize, usize, usize)],
        activation: Activation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return shape_err("a conv decoder needs at least one layer");
        }
        let (mut c, mut h, mut w) = code;
        let mut specs = Vec::with_capacity(layers.len());
        for &(k, m, u) in layers {
            let s = ConvShape::new(c, h, w, k, m, u)?;
            (c, h, w) = (s.out_channels(), s.out_height(), s.out_width());
            specs.push(LayerSpec::ConvUnpool(s));
        }
        Ok(Self::new(specs, activation))
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    /// Number of levels `K` including the code and the data.
    pub fn levels(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn code_len(&self) -> usize {
        self.layers.first().map_or(0, LayerSpec::in_len)
    }

    pub fn data_len(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::out_len)
    }

    /// Output shape `(channels, height, width)` of the last layer, when it is
    /// a conv layer.
    pub fn data_image_shape(&self) -> Option<(usize, usize, usize)> {
        match self.layers.last()? {
            LayerSpec::ConvUnpool(s) => Some((s.out_channels(), s.out_height(), s.out_width())),
            LayerSpec::Feedforward { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyArchitecture,
    NonInvertibleActivation,
    InvalidLayerShape,
    ShapeChainViolation,
    InverseFunnelViolation,
    DegenerateLayer,
    DeterminednessViolation,
    DatasetTooSmall,
    InsufficientWeightData,
}

impl ViolationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ViolationKind::EmptyArchitecture => "EmptyArchitecture",
            ViolationKind::NonInvertibleActivation => "NonInvertibleActivation",
            ViolationKind::InvalidLayerShape => "InvalidLayerShape",
            ViolationKind::ShapeChainViolation => "ShapeChainViolation",
            ViolationKind::InverseFunnelViolation => "InverseFunnelViolation",
            ViolationKind::DegenerateLayer => "DegenerateLayer",
            ViolationKind::DeterminednessViolation => "DeterminednessViolation",
            ViolationKind::DatasetTooSmall => "DatasetTooSmall",
            ViolationKind::InsufficientWeightData => "InsufficientWeightData",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    /// Level produced by the offending layer; 0 for architecture-wide issues.
    pub level: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "level {}: {} ({})",
            self.level,
            self.kind.name(),
            self.detail
        )
    }
}

/// One row of the solvability table.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub level: usize,
    pub name: &'static str,
    pub detail: String,
    pub holds: bool,
    /// The violation reported when the condition fails; `None` for advisory
    /// rows.
    pub violation: Option<ViolationKind>,
}

impl Condition {
    fn required(
        level: usize,
        name: &'static str,
        detail: String,
        holds: bool,
        kind: ViolationKind,
    ) -> Self {
        Self {
            level,
            name,
            detail,
            holds,
            violation: Some(kind),
        }
    }
}

/// Every solvability condition of `arch` trained on `n` datapoints.
pub fn conditions(arch: &Architecture, n: usize) -> Vec<Condition> {
    use ViolationKind::*;
    let mut out = Vec::new();
    if arch.layers.is_empty() {
        out.push(Condition::required(
            0,
            "non-empty",
            "no layers".into(),
            false,
            EmptyArchitecture,
        ));
        return out;
    }
    let slope = arch.activation.negative_slope();
    out.push(Condition::required(
        0,
        "invertible activation",
        format!("negative slope {slope} > 0"),
        arch.activation.is_invertible(),
        NonInvertibleActivation,
    ));

    for (i, spec) in arch.layers.iter().enumerate() {
        let level = i + 2;
        if let Some(next) = arch.layers.get(i + 1) {
            let (holds, detail) = match (spec, next) {
                (LayerSpec::ConvUnpool(a), LayerSpec::ConvUnpool(b)) => (
                    (a.out_channels(), a.out_height(), a.out_width())
                        == (b.in_channels, b.in_height, b.in_width),
                    format!(
                        "output {}x{}x{} feeds input {}x{}x{}",
                        a.out_channels(),
                        a.out_height(),
                        a.out_width(),
                        b.in_channels,
                        b.in_height,
                        b.in_width
                    ),
                ),
                _ => (
                    spec.out_len() == next.in_len(),
                    format!("output {} feeds input {}", spec.out_len(), next.in_len()),
                ),
            };
            out.push(Condition::required(
                level,
                "shape chain",
                detail,
                holds,
                ShapeChainViolation,
            ));
        }

        match spec {
            LayerSpec::Feedforward { in_dim, out_dim } => {
                out.push(Condition::required(
                    level,
                    "inverse funnel",
                    format!("d_in {in_dim} <= d_out {out_dim}"),
                    in_dim <= out_dim,
                    InverseFunnelViolation,
                ));
                out.push(Condition::required(
                    level,
                    "non-degenerate",
                    format!("d_in {in_dim} != d_out {out_dim}"),
                    in_dim != out_dim,
                    DegenerateLayer,
                ));
                out.push(Condition::required(
                    level,
                    "weight solve",
                    format!("d_in {in_dim} < N {n}"),
                    *in_dim < n,
                    DatasetTooSmall,
                ));
            }
            LayerSpec::ConvUnpool(s) => {
                if let Err(e) = s.check() {
                    out.push(Condition::required(
                        level,
                        "layer shape",
                        e.to_string(),
                        false,
                        InvalidLayerShape,
                    ));
                    continue;
                }
                out.push(Condition {
                    level,
                    name: "channel plan",
                    detail: format!(
                        "c_in {} <= c_out·u² {}",
                        s.in_channels, s.pre_shuffle_channels
                    ),
                    holds: s.channel_plan_ok(),
                    violation: None,
                });
                out.push(Condition::required(
                    level,
                    "latent determinedness",
                    format!("equations {} >= unknowns {}", s.out_len(), s.in_len()),
                    s.is_determined(),
                    DeterminednessViolation,
                ));
                out.push(Condition::required(
                    level,
                    "weight solve",
                    format!(
                        "kernel taps {} <= patches {}",
                        s.patch_len(),
                        spec.weight_equations(n)
                    ),
                    s.patch_len() <= spec.weight_equations(n),
                    InsufficientWeightData,
                ));
            }
        }
    }
    out
}

/// Every violated condition, in layer order. Empty means trainable.
pub fn validate_architecture(arch: &Architecture, n: usize) -> Vec<Violation> {
    conditions(arch, n)
        .into_iter()
        .filter(|c| !c.holds)
        .filter_map(|c| {
            c.violation.map(|kind| Violation {
                level: c.level,
                kind,
                detail: c.detail,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(v: &[Violation]) -> Vec<(usize, ViolationKind)> {
        v.iter().map(|x| (x.level, x.kind)).collect()
    }

    #[test]
    fn reference_feedforward_is_valid() {
        let arch = Architecture::feedforward(&[128, 256, 784], Activation::default()).unwrap();
        assert!(validate_architecture(&arch, 60_000).is_empty());
        assert_eq!(arch.levels(), 3);
    }

    #[test]
    fn narrowing_layer_is_flagged() {
        let arch = Architecture::feedforward(&[256, 128], Activation::default()).unwrap();
        assert_eq!(
            kinds(&validate_architecture(&arch, 1000)),
            vec![(2, ViolationKind::InverseFunnelViolation)]
        );
    }

    #[test]
    fn small_dataset_is_flagged() {
        let arch = Architecture::feedforward(&[64, 128, 784], Activation::default()).unwrap();
        assert_eq!(
            kinds(&validate_architecture(&arch, 100)),
            vec![(3, ViolationKind::DatasetTooSmall)]
        );
    }

    #[test]
    fn square_layer_is_degenerate() {
        let arch = Architecture::feedforward(&[8, 8, 16], Activation::default()).unwrap();
        assert_eq!(
            kinds(&validate_architecture(&arch, 100)),
            vec![(2, ViolationKind::DegenerateLayer)]
        );
    }

    #[test]
    fn relu_is_flagged() {
        let arch = Architecture::feedforward(&[4, 8], Activation::new(0.0).unwrap()).unwrap();
        assert_eq!(
            kinds(&validate_architecture(&arch, 100)),
            vec![(0, ViolationKind::NonInvertibleActivation)]
        );
    }

    #[test]
    fn conv_chain_and_determinedness() {
        let arch = Architecture::conv((4, 8, 8), &[(7, 4, 2)], Activation::default()).unwrap();
        assert!(validate_architecture(&arch, 2000).is_empty());
        assert_eq!(arch.data_image_shape(), Some((1, 28, 28)));

        let wide = Architecture::conv((16, 8, 8), &[(3, 1, 1)], Activation::default()).unwrap();
        assert_eq!(
            kinds(&validate_architecture(&wide, 2000)),
            vec![(2, ViolationKind::DeterminednessViolation)]
        );
    }

    #[test]
    fn broken_chain_is_flagged() {
        let a = ConvShape::new(1, 4, 4, 3, 4, 2).unwrap();
        let b = ConvShape::new(1, 10, 10, 3, 4, 2).unwrap();
        let arch = Architecture::new(
            vec![LayerSpec::ConvUnpool(a), LayerSpec::ConvUnpool(b)],
            Activation::default(),
        );
        assert_eq!(
            kinds(&validate_architecture(&arch, 100)),
            vec![(2, ViolationKind::ShapeChainViolation)]
        );
    }
}
