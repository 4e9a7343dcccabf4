//! Candidate operations: the catalog of every op name, the curated and
//! combined search spaces, and instantiation into differentiable layers.

use std::fmt;
use std::str::FromStr;

use icdarts_autograd::{Activation, Conv2dCfg, ParamId, ParamKind, PoolCfg, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discretize::{Slot, ZeroConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Layer, Seq};

pub const ZERO: &str = "zero";
pub const RANDOM: &str = "random";
pub const IDENTITY: &str = "identity";

/// Expansion of the MobileNetV2-style block; reduced from the usual 6 for desk scale.
pub const MBCONV_EXPANSION: usize = 3;

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Basic,
    Simple,
    Darts,
    Mbconv,
    Special,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSpec {
    pub name: String,
    pub category: Category,
    pub kernel: Option<usize>,
    pub expansion: Option<usize>,
    pub stride_capable: bool,
    /// Whether the op owns parameters when instantiated at stride 1.
    pub has_weights: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpaceId {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "combined")]
    Combined,
}

impl FromStr for SpaceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(SpaceId::One),
            "2" => Ok(SpaceId::Two),
            "3" => Ok(SpaceId::Three),
            "4" => Ok(SpaceId::Four),
            "combined" => Ok(SpaceId::Combined),
            other => Err(Error::config(format!("unknown search space `{other}`"))),
        }
    }
}

impl fmt::Display for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpaceId::One => "1",
            SpaceId::Two => "2",
            SpaceId::Three => "3",
            SpaceId::Four => "4",
            SpaceId::Combined => "combined",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Search,
    Evaluation,
    Retrain,
}

const STARRED: [&str; 3] = [IDENTITY, "max_pool_3", "avg_pool_3"];

fn curated(space: SpaceId) -> Vec<&'static str> {
    match space {
        SpaceId::One => {
            let mut v = vec!["conv_3", "conv_5", "dw_conv_3", "dw_conv_5", "relu", "leaky_relu", "batch_norm"];
            v.extend(STARRED);
            v
        }
        SpaceId::Two => {
            let mut v = vec!["min_conv_3", "min_conv_5", "std_conv_3", "std_conv_5", "fac_conv_7", "fac_conv_9"];
            v.extend(STARRED);
            v
        }
        SpaceId::Three => {
            let mut v = STARRED.to_vec();
            v.extend(["sep_conv_3", "sep_conv_5", "dil_conv_3", "dil_conv_5"]);
            v
        }
        SpaceId::Four => {
            let mut v = vec!["mbconv_3", "mbconv_v2_3_g1", "fused_mbconv_3_g1"];
            v.extend(STARRED);
            v
        }
        SpaceId::Combined => vec![
            "relu",
            "leaky_relu",
            "sigmoid",
            "tanh",
            "batch_norm",
            IDENTITY,
            "conv_3",
            "conv_5",
            "max_pool_3",
            "max_pool_5",
            "avg_pool_3",
            "avg_pool_5",
            "min_conv_3",
            "min_conv_5",
            "std_conv_3",
            "std_conv_5",
            "fac_conv_7",
            "fac_conv_9",
            "sep_conv_3",
            "sep_conv_5",
            "dil_conv_3",
            "dil_conv_5",
            "mbconv_3",
            "mbconv_5",
            "mbconv_v2_3_g1",
            "mbconv_v2_3_g4",
            "mbconv_v2_3_g6",
            "mbconv_v2_5_g1",
            "mbconv_v2_5_g4",
            "mbconv_v2_5_g6",
            "fused_mbconv_3_g1",
            "fused_mbconv_3_g4",
            "fused_mbconv_3_g6",
        ],
    }
}

/// Candidate list for a phase: the curated ops plus the special slot the
/// zero config assigns to that phase, appended last.
pub fn resolve_space(space: SpaceId, zero_config: ZeroConfig, phase: Phase) -> Vec<OpSpec> {
    let mut names: Vec<&str> = curated(space);
    match zero_config.slot(phase) {
        Slot::Zero => names.push(ZERO),
        Slot::Random => names.push(RANDOM),
        Slot::Absent => {}
    }
    names.into_iter().map(|n| op_spec(n).expect("catalog names resolve")).collect()
}

pub fn resolve_names(space: SpaceId, zero_config: ZeroConfig, phase: Phase) -> Vec<String> {
    resolve_space(space, zero_config, phase).into_iter().map(|s| s.name).collect()
}

/// The full master list used by the tournament (no special ops).
pub fn combined_space() -> Vec<OpSpec> {
    curated(SpaceId::Combined).into_iter().map(|n| op_spec(n).expect("catalog names resolve")).collect()
}

pub fn is_special(name: &str) -> bool {
    name == ZERO || name == RANDOM
}

/// Looks up an op by name.
pub fn op_spec(name: &str) -> Option<OpSpec> {
    let spec = |category, kernel: Option<usize>, expansion: Option<usize>, stride_capable, has_weights| OpSpec {
        name: name.to_string(),
        category,
        kernel,
        expansion,
        stride_capable,
        has_weights,
    };
    let kernel_of = |prefix: &str, allowed: &[usize]| {
        name.strip_prefix(prefix).and_then(|k| k.parse::<usize>().ok()).filter(|k| allowed.contains(k))
    };
    let s = match name {
        ZERO | RANDOM => spec(Category::Special, None, None, true, false),
        IDENTITY => spec(Category::Darts, None, None, false, false),
        "relu" | "leaky_relu" | "sigmoid" | "tanh" => spec(Category::Basic, None, None, false, false),
        "batch_norm" => spec(Category::Basic, None, None, false, true),
        _ => {
            if let Some(k) = kernel_of("max_pool_", &[3, 5]).or_else(|| kernel_of("avg_pool_", &[3, 5])) {
                spec(Category::Darts, Some(k), None, true, true)
            } else if let Some(k) = kernel_of("dw_conv_", &[3, 5]).or_else(|| kernel_of("conv_", &[3, 5])) {
                spec(Category::Basic, Some(k), None, true, true)
            } else if let Some(k) = kernel_of("min_conv_", &[3, 5])
                .or_else(|| kernel_of("std_conv_", &[3, 5]))
                .or_else(|| kernel_of("fac_conv_", &[7, 9]))
            {
                spec(Category::Simple, Some(k), None, true, true)
            } else if let Some(k) = kernel_of("sep_conv_", &[3, 5]).or_else(|| kernel_of("dil_conv_", &[3, 5])) {
                spec(Category::Darts, Some(k), None, true, true)
            } else if let Some(k) = kernel_of("mbconv_", &[3, 5]) {
                spec(Category::Mbconv, Some(k), Some(MBCONV_EXPANSION), true, true)
            } else if let Some((k, g)) = parse_kg(name, "mbconv_v2_", &[3, 5])
                .or_else(|| parse_kg(name, "fused_mbconv_", &[3]))
            {
                spec(Category::Mbconv, Some(k), Some(g), true, true)
            } else {
                return None;
            }
        }
    };
    Some(s)
}

fn parse_kg(name: &str, prefix: &str, kernels: &[usize]) -> Option<(usize, usize)> {
    let rest = name.strip_prefix(prefix)?;
    let (k, g) = rest.split_once("_g")?;
    let k: usize = k.parse().ok()?;
    let g: usize = g.parse().ok()?;
    (kernels.contains(&k) && [1, 4, 6].contains(&g)).then_some((k, g))
}

/// JSON listing (name, category, kernel, expansion) of a resolved space.
pub fn space_listing(specs: &[OpSpec]) -> serde_json::Value {
    serde_json::Value::Array(
        specs
            .iter()
            .map(|s| {
                serde_json::json!({
                    "name": s.name,
                    "category": s.category,
                    "kernel": s.kernel,
                    "expansion": s.expansion,
                })
            })
            .collect(),
    )
}

#[derive(Clone, Debug)]
enum Body {
    Identity,
    Zero,
    Random { high: f64 },
    Seq(Seq),
    /// `x + block(x)`.
    Residual(Seq),
}

/// An instantiated candidate op.
#[derive(Clone, Debug)]
pub struct Operation {
    pub spec: OpSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    params: Vec<ParamId>,
    body: Body,
}

impl Operation {
    /// Trainable parameters registered for this instance, in creation order.
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.body, Body::Identity)
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Var {
        match &self.body {
            Body::Identity => x,
            Body::Zero => {
                let shape = self.output_shape(ctx.tape.value(x).shape());
                ctx.tape.constant(Tensor::zeros(&shape))
            }
            Body::Random { high } => {
                let shape = self.output_shape(ctx.tape.value(x).shape());
                let rng = &mut *ctx.rng;
                let t = Tensor::from_fn(&shape, |_| F::of(rng.random::<f64>() * high));
                ctx.tape.constant(t)
            }
            Body::Seq(seq) => seq.forward(ctx, x),
            Body::Residual(seq) => {
                let y = seq.forward(ctx, x);
                ctx.tape.add(x, y)
            }
        }
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![input[0], self.out_channels, input[2] / self.stride, input[3] / self.stride]
    }
}

fn pad(k: usize) -> usize {
    k / 2
}

/// Builds the differentiable layer for `spec`, registering its parameters
/// under `prefix`.
pub fn instantiate<F: Scalar>(
    spec: &OpSpec,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    init: &mut Init<F>,
    prefix: &str,
    random_high: f64,
) -> Result<Operation> {
    if stride != 1 && stride != 2 {
        return Err(Error::config(format!("stride must be 1 or 2, got {stride}")));
    }
    if in_channels == 0 || out_channels == 0 {
        return Err(Error::config("channel counts must be positive"));
    }
    let (cin, cout, s) = (in_channels, out_channels, stride);
    let name = spec.name.as_str();
    let preserving = |what: &str| -> Result<()> {
        if cin != cout {
            return Err(Error::config(format!("{what} cannot map {cin} to {cout} channels")));
        }
        Ok(())
    };
    let before = init.store.len();
    let p = |part: &str| format!("{prefix}.{part}");
    let k = spec.kernel.unwrap_or(1);

    let body = match name {
        ZERO => Body::Zero,
        RANDOM => Body::Random { high: random_high },
        IDENTITY => {
            if s == 1 {
                preserving(name)?;
                Body::Identity
            } else {
                Body::Seq(Seq(vec![Layer::FactorizedReduce(init.factorized_reduce(&p("reduce"), cin, cout))]))
            }
        }
        "relu" | "leaky_relu" | "sigmoid" | "tanh" | "batch_norm" => {
            let mut layers = Vec::new();
            if s == 2 {
                layers.push(Layer::FactorizedReduce(init.factorized_reduce(&p("reduce"), cin, cout)));
            } else {
                preserving(name)?;
            }
            layers.push(match name {
                "relu" => Layer::Act(Activation::Relu),
                "leaky_relu" => Layer::Act(Activation::LeakyRelu(LEAKY_SLOPE)),
                "sigmoid" => Layer::Act(Activation::Sigmoid),
                "tanh" => Layer::Act(Activation::Tanh),
                _ => Layer::Bn(init.batch_norm(&p("bn"), cout)),
            });
            Body::Seq(Seq(layers))
        }
        _ if name.starts_with("max_pool_") || name.starts_with("avg_pool_") => {
            preserving(name)?;
            let cfg = PoolCfg::new(k, s, pad(k));
            let pool = if name.starts_with("max") { Layer::MaxPool(cfg) } else { Layer::AvgPool(cfg) };
            Body::Seq(Seq(vec![pool, Layer::Bn(init.batch_norm(&p("bn"), cout))]))
        }
        _ if name.starts_with("dw_conv_") => {
            preserving(name)?;
            let conv = init.conv(&p("conv"), cin, cout, (k, k), Conv2dCfg::new(s, pad(k)).grouped(cin));
            Body::Seq(Seq(vec![Layer::Conv(conv)]))
        }
        _ if name.starts_with("conv_") => {
            Body::Seq(Seq(vec![Layer::Conv(init.conv(&p("conv"), cin, cout, (k, k), Conv2dCfg::new(s, pad(k))))]))
        }
        _ if name.starts_with("min_conv_") => Body::Seq(Seq(vec![
            Layer::Conv(init.conv(&p("conv"), cin, cout, (k, k), Conv2dCfg::new(s, pad(k)))),
            Layer::Bn(init.batch_norm(&p("bn"), cout)),
        ])),
        _ if name.starts_with("std_conv_") => Body::Seq(Seq(vec![
            Layer::Act(Activation::Relu),
            Layer::Conv(init.conv(&p("conv"), cin, cout, (k, k), Conv2dCfg::new(s, pad(k)))),
            Layer::Bn(init.batch_norm(&p("bn"), cout)),
        ])),
        _ if name.starts_with("fac_conv_") => {
            let row = Conv2dCfg { stride: (1, s), padding: (0, pad(k)), dilation: (1, 1), groups: 1 };
            let col = Conv2dCfg { stride: (s, 1), padding: (pad(k), 0), dilation: (1, 1), groups: 1 };
            Body::Seq(Seq(vec![
                Layer::Act(Activation::Relu),
                Layer::Conv(init.conv(&p("conv_1xk"), cin, cout, (1, k), row)),
                Layer::Conv(init.conv(&p("conv_kx1"), cout, cout, (k, 1), col)),
                Layer::Bn(init.batch_norm(&p("bn"), cout)),
            ]))
        }
        _ if name.starts_with("sep_conv_") => {
            let dw = Conv2dCfg::new(s, pad(k)).grouped(cin);
            let dw1 = Conv2dCfg::new(1, pad(k)).grouped(cin);
            Body::Seq(Seq(vec![
                Layer::Act(Activation::Relu),
                Layer::Conv(init.conv(&p("dw0"), cin, cin, (k, k), dw)),
                Layer::Conv(init.conv(&p("pw0"), cin, cin, (1, 1), Conv2dCfg::new(1, 0))),
                Layer::Bn(init.batch_norm(&p("bn0"), cin)),
                Layer::Act(Activation::Relu),
                Layer::Conv(init.conv(&p("dw1"), cin, cin, (k, k), dw1)),
                Layer::Conv(init.conv(&p("pw1"), cin, cout, (1, 1), Conv2dCfg::new(1, 0))),
                Layer::Bn(init.batch_norm(&p("bn1"), cout)),
            ]))
        }
        _ if name.starts_with("dil_conv_") => {
            let dw = Conv2dCfg::new(s, k - 1).dilated(2).grouped(cin);
            Body::Seq(Seq(vec![
                Layer::Act(Activation::Relu),
                Layer::Conv(init.conv(&p("dw"), cin, cin, (k, k), dw)),
                Layer::Conv(init.conv(&p("pw"), cin, cout, (1, 1), Conv2dCfg::new(1, 0))),
                Layer::Bn(init.batch_norm(&p("bn"), cout)),
            ]))
        }
        _ if name.starts_with("mbconv_v2_") => {
            let g = spec.expansion.unwrap_or(1);
            let mid = cin * g;
            let mut layers = Vec::new();
            if g > 1 {
                layers.push(Layer::Conv(init.conv(&p("expand"), cin, mid, (1, 1), Conv2dCfg::new(1, 0))));
                layers.push(Layer::Bn(init.batch_norm(&p("expand_bn"), mid)));
                layers.push(Layer::Act(Activation::Swish));
            }
            layers.push(Layer::Conv(init.conv(&p("dw"), mid, mid, (k, k), Conv2dCfg::new(s, pad(k)).grouped(mid))));
            layers.push(Layer::Bn(init.batch_norm(&p("dw_bn"), mid)));
            layers.push(Layer::Act(Activation::Swish));
            layers.push(Layer::SqueezeExcite(init.squeeze_excite(&p("se"), mid, (cin / 4).max(1))));
            layers.push(Layer::Conv(init.conv(&p("project"), mid, cout, (1, 1), Conv2dCfg::new(1, 0))));
            layers.push(Layer::Bn(init.batch_norm(&p("project_bn"), cout)));
            residual_or_plain(layers, cin, cout, s)
        }
        _ if name.starts_with("fused_mbconv_") => {
            let g = spec.expansion.unwrap_or(1);
            let conv = Conv2dCfg::new(s, pad(k));
            let layers = if g == 1 {
                vec![
                    Layer::Conv(init.conv(&p("conv"), cin, cout, (k, k), conv)),
                    Layer::Bn(init.batch_norm(&p("bn"), cout)),
                    Layer::Act(Activation::Swish),
                ]
            } else {
                let mid = cin * g;
                vec![
                    Layer::Conv(init.conv(&p("conv"), cin, mid, (k, k), conv)),
                    Layer::Bn(init.batch_norm(&p("bn"), mid)),
                    Layer::Act(Activation::Swish),
                    Layer::Conv(init.conv(&p("project"), mid, cout, (1, 1), Conv2dCfg::new(1, 0))),
                    Layer::Bn(init.batch_norm(&p("project_bn"), cout)),
                ]
            };
            residual_or_plain(layers, cin, cout, s)
        }
        _ if name.starts_with("mbconv_") => {
            let mid = cin * spec.expansion.unwrap_or(MBCONV_EXPANSION);
            let layers = vec![
                Layer::Conv(init.conv(&p("expand"), cin, mid, (1, 1), Conv2dCfg::new(1, 0))),
                Layer::Bn(init.batch_norm(&p("expand_bn"), mid)),
                Layer::Act(Activation::Relu6),
                Layer::Conv(init.conv(&p("dw"), mid, mid, (k, k), Conv2dCfg::new(s, pad(k)).grouped(mid))),
                Layer::Bn(init.batch_norm(&p("dw_bn"), mid)),
                Layer::Act(Activation::Relu6),
                Layer::Conv(init.conv(&p("project"), mid, cout, (1, 1), Conv2dCfg::new(1, 0))),
                Layer::Bn(init.batch_norm(&p("project_bn"), cout)),
            ];
            residual_or_plain(layers, cin, cout, s)
        }
        other => return Err(Error::config(format!("unknown operation `{other}`"))),
    };
    let params = init
        .store
        .iter()
        .skip(before)
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, _)| id)
        .collect();
    Ok(Operation { spec: spec.clone(), in_channels, out_channels, stride, params, body })
}

fn residual_or_plain(layers: Vec<Layer>, cin: usize, cout: usize, stride: usize) -> Body {
    if stride == 1 && cin == cout {
        Body::Residual(Seq(layers))
    } else {
        Body::Seq(Seq(layers))
    }
}

/// Instantiates an op by name.
pub fn instantiate_named<F: Scalar>(
    name: &str,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    init: &mut Init<F>,
    prefix: &str,
    random_high: f64,
) -> Result<Operation> {
    let spec = op_spec(name).ok_or_else(|| Error::config(format!("unknown operation `{name}`")))?;
    instantiate(&spec, in_channels, out_channels, stride, init, prefix, random_high)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_resolves_every_listed_name() {
        for space in [SpaceId::One, SpaceId::Two, SpaceId::Three, SpaceId::Four, SpaceId::Combined] {
            for n in curated(space) {
                assert!(op_spec(n).is_some(), "{n}");
            }
        }
        assert!(op_spec("sep_conv_7").is_none());
        assert!(op_spec("mbconv_v2_3_g2").is_none());
        assert!(op_spec("fused_mbconv_5_g1").is_none());
    }

    #[test]
    fn kernel_and_expansion_presence() {
        for spec in combined_space() {
            let spatial = spec.name.contains("conv") || spec.name.contains("pool");
            assert_eq!(spec.kernel.is_some(), spatial, "{}", spec.name);
            assert_eq!(spec.expansion.is_some(), spec.category == Category::Mbconv, "{}", spec.name);
        }
    }

    #[test]
    fn combined_space_has_unique_names() {
        let names: Vec<String> = combined_space().into_iter().map(|s| s.name).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), 33);
    }

    #[test]
    fn space_ids_parse_and_print() {
        for s in ["1", "2", "3", "4", "combined"] {
            assert_eq!(s.parse::<SpaceId>().unwrap().to_string(), s);
        }
        assert!(matches!("5".parse::<SpaceId>(), Err(Error::Config(_))));
    }
}
