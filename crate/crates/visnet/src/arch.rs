//! Declarative architecture descriptor and exact parameter accounting.
//!
//! The full-scale network is never executed here; it is described as a flat
//! layer list per component and counting is a pure fold over that list.
//! Backbone convolutions are bias-free with a BN after each (the standard
//! residual-network convention); BN contributes its two affine vectors and
//! running statistics are not parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusionConfig;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("component {component} layer {index}: unknown layer kind {kind:?}")]
    UnknownLayerKind {
        component: String,
        index: usize,
        kind: String,
    },
    #[error("component {component} layer {index}: {message}")]
    InvalidLayer {
        component: String,
        index: usize,
        message: String,
    },
    #[error("reference check: spec has no component named {name:?}")]
    MissingComponent { name: String },
    #[error("architecture spec parse error: {0}")]
    Parse(#[from] toml::de::Error),
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn one() -> usize {
    1
}

fn is_false(v: &bool) -> bool {
    !*v
}

/// One countable layer. `kind` selects which fields matter:
/// `conv` uses c_in/c_out/kernel/bias, `affine` uses c_in/c_out/bias,
/// `bn` uses channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub c_in: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub c_out: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub kernel: usize,
    #[serde(default, skip_serializing_if = "is_false")]
    pub bias: bool,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub channels: usize,
}

impl LayerSpec {
    pub fn conv(c_in: usize, c_out: usize, kernel: usize, bias: bool) -> Self {
        LayerSpec {
            kind: "conv".into(),
            c_in,
            c_out,
            kernel,
            bias,
            channels: 0,
        }
    }

    pub fn affine(c_in: usize, c_out: usize, bias: bool) -> Self {
        LayerSpec {
            kind: "affine".into(),
            c_in,
            c_out,
            kernel: 1,
            bias,
            channels: 0,
        }
    }

    pub fn bn(channels: usize) -> Self {
        LayerSpec {
            kind: "bn".into(),
            c_in: 0,
            c_out: 0,
            kernel: 1,
            bias: false,
            channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub name: String,
    #[serde(default, rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    #[serde(default, rename = "component")]
    pub components: Vec<ComponentSpec>,
}

impl ArchSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, ArchError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }
}

fn count_layer(component: &str, index: usize, layer: &LayerSpec) -> Result<u64, ArchError> {
    let invalid = |message: String| ArchError::InvalidLayer {
        component: component.into(),
        index,
        message,
    };
    match layer.kind.as_str() {
        "conv" => {
            if layer.c_in == 0 || layer.c_out == 0 || layer.kernel == 0 {
                return Err(invalid(format!(
                    "conv needs positive c_in/c_out/kernel, got {}x{} k{}",
                    layer.c_in, layer.c_out, layer.kernel
                )));
            }
            let k2 = (layer.kernel * layer.kernel) as u64;
            let mut n = k2 * layer.c_in as u64 * layer.c_out as u64;
            if layer.bias {
                n += layer.c_out as u64;
            }
            Ok(n)
        }
        "affine" => {
            if layer.c_in == 0 || layer.c_out == 0 {
                return Err(invalid(format!(
                    "affine needs positive c_in/c_out, got {}x{}",
                    layer.c_in, layer.c_out
                )));
            }
            let mut n = layer.c_in as u64 * layer.c_out as u64;
            if layer.bias {
                n += layer.c_out as u64;
            }
            Ok(n)
        }
        "bn" => {
            if layer.channels == 0 {
                return Err(invalid("bn needs positive channels".into()));
            }
            Ok(2 * layer.channels as u64)
        }
        other => Err(ArchError::UnknownLayerKind {
            component: component.into(),
            index,
            kind: other.into(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountRow {
    pub component: String,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTable {
    pub rows: Vec<CountRow>,
    pub total: u64,
}

impl CountTable {
    pub fn get(&self, component: &str) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.component == component)
            .map(|r| r.params)
    }

    /// Aligned human-readable table with thousands separators.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.component.len())
            .chain(["total".len()].into_iter())
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>13}\n",
                r.component,
                group_digits(r.params)
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>13}\n",
            "total",
            group_digits(self.total)
        ));
        out
    }

    /// One `component=<name> params=<n>` line per row, stable for scripts.
    pub fn render_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!("component={} params={}\n", r.component, r.params));
        }
        out.push_str(&format!("component=total params={}\n", self.total));
        out
    }
}

pub fn group_digits(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Fold the spec into per-component parameter counts.
pub fn count_parameters(spec: &ArchSpec) -> Result<CountTable, ArchError> {
    let mut rows = Vec::with_capacity(spec.components.len());
    let mut total = 0u64;
    for comp in &spec.components {
        let mut sum = 0u64;
        for (i, layer) in comp.layers.iter().enumerate() {
            sum += count_layer(&comp.name, i, layer)?;
        }
        total += sum;
        rows.push(CountRow {
            component: comp.name.clone(),
            params: sum,
        });
    }
    Ok(CountTable { rows, total })
}

fn bottleneck(layers: &mut Vec<LayerSpec>, c_in: usize, mid: usize, downsample: bool) {
    let c_out = 4 * mid;
    layers.push(LayerSpec::conv(c_in, mid, 1, false));
    layers.push(LayerSpec::bn(mid));
    layers.push(LayerSpec::conv(mid, mid, 3, false));
    layers.push(LayerSpec::bn(mid));
    layers.push(LayerSpec::conv(mid, c_out, 1, false));
    layers.push(LayerSpec::bn(c_out));
    if downsample {
        layers.push(LayerSpec::conv(c_in, c_out, 1, false));
        layers.push(LayerSpec::bn(c_out));
    }
}

/// Stages 0-4 of the 50-layer residual backbone (stem plus four bottleneck
/// stages of 3/4/6/3 blocks), without any final classifier.
pub fn resnet50_component() -> ComponentSpec {
    let mut layers = vec![LayerSpec::conv(3, 64, 7, false), LayerSpec::bn(64)];
    let mut c_in = 64;
    for (mid, blocks) in [(64usize, 3usize), (128, 4), (256, 6), (512, 3)] {
        for b in 0..blocks {
            // The first block of each stage changes width, so it carries a
            // projection on the shortcut.
            bottleneck(&mut layers, c_in, mid, b == 0);
            c_in = 4 * mid;
        }
    }
    ComponentSpec {
        name: "backbone".into(),
        layers,
    }
}

pub fn fusion_component(cfg: &FusionConfig) -> ComponentSpec {
    let mut layers = Vec::new();
    for &c in &cfg.in_channels {
        layers.push(LayerSpec::conv(c, cfg.d, 1, cfg.projection_bias));
        layers.push(LayerSpec::bn(cfg.d));
    }
    layers.push(LayerSpec::affine(cfg.d, cfg.attn_hidden, true));
    layers.push(LayerSpec::affine(cfg.attn_hidden, 4, true));
    ComponentSpec {
        name: "fusion".into(),
        layers,
    }
}

pub fn semantic_head_component(d: usize) -> ComponentSpec {
    ComponentSpec {
        name: "semantic_head".into(),
        layers: vec![
            LayerSpec::affine(d, 1024, true),
            LayerSpec::bn(1024),
            LayerSpec::affine(1024, 512, true),
            LayerSpec::bn(512),
            LayerSpec::affine(512, 4, true),
        ],
    }
}

/// The complete model descriptor at full scale.
pub fn default_arch() -> ArchSpec {
    let fusion_cfg = FusionConfig::default();
    ArchSpec {
        components: vec![
            resnet50_component(),
            fusion_component(&fusion_cfg),
            semantic_head_component(fusion_cfg.d),
            ComponentSpec {
                name: "bn_neck".into(),
                layers: vec![LayerSpec::bn(fusion_cfg.d)],
            },
            ComponentSpec {
                name: "classifier".into(),
                layers: vec![LayerSpec::affine(fusion_cfg.d, 751, false)],
            },
        ],
    }
}

/// Published per-component totals for the full-scale model. The four `hard`
/// rows are independently derivable from the architecture and must match;
/// the fusion row is known not to match any parameterization of the stated
/// layout and is reported as a discrepancy, never a failure.
pub const REFERENCE_ROWS: [(&str, u64, bool); 5] = [
    ("backbone", 23_508_032, true),
    ("fusion", 4_733_444, false),
    ("semantic_head", 2_628_100, true),
    ("bn_neck", 4_096, true),
    ("classifier", 1_538_048, true),
];

pub const REFERENCE_TOTAL: u64 = 32_411_720;

#[derive(Debug, Clone)]
pub struct ReferenceCheck {
    pub component: String,
    pub expected: u64,
    pub actual: u64,
    pub matches: bool,
    /// Hard rows gate success; soft rows only report.
    pub hard: bool,
}

/// Compare a count table against the published totals. Every reference
/// component must be present in the table.
pub fn check_reference(table: &CountTable) -> Result<Vec<ReferenceCheck>, ArchError> {
    REFERENCE_ROWS
        .iter()
        .map(|&(name, expected, hard)| {
            let actual = table
                .get(name)
                .ok_or_else(|| ArchError::MissingComponent { name: name.into() })?;
            Ok(ReferenceCheck {
                component: name.into(),
                expected,
                actual,
                matches: actual == expected,
                hard,
            })
        })
        .collect()
}
