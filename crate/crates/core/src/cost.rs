//! FLOPS accounting: per-layer costs for a configurable layered backbone,
//! the pre-scan/full-inference split, the efficiency loss, and the derived
//! efficiency metrics reported by the CLI.
//!
//! Costs are modeled, not measured: each layer descriptor maps an input
//! spatial size to a FLOPS count, with a multiply–add counted as 2 FLOPS by
//! default (set `mac 1` in the table config for MAC counting).  Everything
//! downstream — the efficiency loss, per-run totals, speed-ups — is pure
//! arithmetic on these numbers, so the books always balance exactly.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("cost table line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("split index {lambda} outside 1..={layers}")]
    BadSplit { lambda: usize, layers: usize },
    #[error("cost table has no layers")]
    EmptyTable,
    #[error("layer {index} expects {expected} input channels, got {got}")]
    ChannelChain {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {index} collapses spatial dims {h}x{w} to nothing")]
    DimsCollapse { index: usize, h: usize, w: usize },
    #[error("layer {index} ({kind}) has non-positive cost")]
    ZeroCost { index: usize, kind: &'static str },
    #[error("top-1 accuracy must be positive to form a trade-off")]
    ZeroTop1,
    #[error("model cost must be positive to form a speed-up")]
    ZeroModelCost,
    #[error("cannot aggregate an empty set of runs")]
    EmptyRun,
    #[error("{status} frames charged both {a} and {b} FLOPS in one run")]
    MixedCharges { status: FrameStatus, a: f64, b: f64 },
    #[error("skipped frame charged {0} FLOPS; skips must be free")]
    SkipCharged(f64),
    #[error(
        "spatial budget violated: low-res + {k} crops cost {sampled} vs {full} for the full image"
    )]
    BudgetViolation { k: usize, sampled: f64, full: f64 },
}

/// How a frame was processed, for accounting purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameStatus {
    /// Whole pipeline ran: pre-scan plus everything after the split.
    Full,
    /// Only the first half, hallucinator, and skip policy ran.
    Prescan,
    /// Nothing ran; predictions and memory were carried forward.
    Skip,
}

impl fmt::Display for FrameStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameStatus::Full => "FULL",
            FrameStatus::Prescan => "PRESCAN",
            FrameStatus::Skip => "SKIP",
        })
    }
}

/// Multiply–add convention: 2 counts multiplies and adds separately.
pub const DEFAULT_MAC_FACTOR: f64 = 2.0;

/// FLOPS of a convolution producing `h_out x w_out`, counting each
/// multiply–add as 2: `2 * c_in * c_out * k^2 * h_out * w_out`.
pub fn conv_flops(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> f64 {
    conv_flops_mac(c_in, c_out, k, h_out, w_out, DEFAULT_MAC_FACTOR)
}

pub fn conv_flops_mac(
    c_in: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    mac: f64,
) -> f64 {
    mac * (c_in * c_out * k * k * h_out * w_out) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// Footprint self-attention: Q/K/V projections plus per-footprint
    /// compatibility, softmax, and value mixing.
    Attention { channels: usize, r: usize },
    /// Average pooling by `factor`; factor 0 pools globally to 1x1.
    Pool { factor: usize },
    /// Fully connected layer over the flattened feature map.
    Linear { c_in: usize, c_out: usize },
}

impl LayerKind {
    fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Attention { .. } => "attention",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Linear { .. } => "linear",
        }
    }
}

/// One layer's cost at a specific input size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCost {
    pub flops: f64,
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Ordered layer descriptors plus the index after which the network is cut
/// into its pre-scan half and the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCostTable {
    layers: Vec<LayerKind>,
    lambda: usize,
    mac: f64,
}

impl LayerCostTable {
    pub fn new(layers: Vec<LayerKind>, lambda: usize) -> Result<Self, CostError> {
        if layers.is_empty() {
            return Err(CostError::EmptyTable);
        }
        if lambda == 0 || lambda > layers.len() {
            return Err(CostError::BadSplit {
                lambda,
                layers: layers.len(),
            });
        }
        Ok(LayerCostTable {
            layers,
            lambda,
            mac: DEFAULT_MAC_FACTOR,
        })
    }

    pub fn with_mac(mut self, mac: f64) -> Self {
        self.mac = mac;
        self
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Parse the structured text format: one layer per line, in order.
    ///
    /// ```text
    /// # kind and its parameters, whitespace separated
    /// conv 3 8 5 2 2        # c_in c_out kernel stride pad
    /// attention 8 3         # channels footprint
    /// pool 0                # average-pool factor, 0 = global
    /// linear 16 3           # in out (input = flattened features)
    /// split 2               # layers 1..=2 form the pre-scan half
    /// mac 2                 # optional FLOPS-per-multiply-add override
    /// ```
    pub fn parse(text: &str) -> Result<Self, CostError> {
        let mut layers = Vec::new();
        let mut lambda = None;
        let mut mac = DEFAULT_MAC_FACTOR;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut parts = body.split_whitespace();
            let kind = parts.next().unwrap();
            let args: Vec<&str> = parts.collect();
            let nums = |want: usize| -> Result<Vec<usize>, CostError> {
                if args.len() != want {
                    return Err(CostError::Parse {
                        line,
                        msg: format!("{kind} takes {want} arguments, got {}", args.len()),
                    });
                }
                args.iter()
                    .map(|a| {
                        a.parse::<usize>().map_err(|_| CostError::Parse {
                            line,
                            msg: format!("bad number {a:?}"),
                        })
                    })
                    .collect()
            };
            match kind {
                "conv" => {
                    let v = nums(5)?;
                    if v[0] == 0 || v[1] == 0 || v[2] == 0 || v[3] == 0 {
                        return Err(CostError::Parse {
                            line,
                            msg: "conv dims and stride must be positive".into(),
                        });
                    }
                    layers.push(LayerKind::Conv {
                        c_in: v[0],
                        c_out: v[1],
                        k: v[2],
                        stride: v[3],
                        pad: v[4],
                    });
                }
                "attention" => {
                    let v = nums(2)?;
                    if v[0] == 0 || v[1] == 0 || v[1] % 2 == 0 {
                        return Err(CostError::Parse {
                            line,
                            msg: "attention needs positive channels and an odd footprint".into(),
                        });
                    }
                    layers.push(LayerKind::Attention {
                        channels: v[0],
                        r: v[1],
                    });
                }
                "pool" => {
                    let v = nums(1)?;
                    layers.push(LayerKind::Pool { factor: v[0] });
                }
                "linear" => {
                    let v = nums(2)?;
                    if v[0] == 0 || v[1] == 0 {
                        return Err(CostError::Parse {
                            line,
                            msg: "linear dims must be positive".into(),
                        });
                    }
                    layers.push(LayerKind::Linear {
                        c_in: v[0],
                        c_out: v[1],
                    });
                }
                "split" => {
                    let v = nums(1)?;
                    lambda = Some(v[0]);
                }
                "mac" => {
                    let v = nums(1)?;
                    if v[0] == 0 {
                        return Err(CostError::Parse {
                            line,
                            msg: "mac factor must be positive".into(),
                        });
                    }
                    mac = v[0] as f64;
                }
                other => {
                    return Err(CostError::Parse {
                        line,
                        msg: format!("unknown layer kind {other:?}"),
                    });
                }
            }
        }
        let lambda = lambda.ok_or(CostError::Parse {
            line: 0,
            msg: "missing `split` line".into(),
        })?;
        Ok(LayerCostTable::new(layers, lambda)?.with_mac(mac))
    }

    /// Cost and output geometry of every layer for a `c_in x h x w` input.
    pub fn profile(&self, c_in: usize, h: usize, w: usize) -> Result<Vec<LayerCost>, CostError> {
        let (mut c, mut h, mut w) = (c_in, h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let cost = match *layer {
                LayerKind::Conv {
                    c_in,
                    c_out,
                    k,
                    stride,
                    pad,
                } => {
                    if c_in != c {
                        return Err(CostError::ChannelChain {
                            index,
                            expected: c_in,
                            got: c,
                        });
                    }
                    if h + 2 * pad < k || w + 2 * pad < k {
                        return Err(CostError::DimsCollapse { index, h, w });
                    }
                    let ho = (h + 2 * pad - k) / stride + 1;
                    let wo = (w + 2 * pad - k) / stride + 1;
                    LayerCost {
                        flops: conv_flops_mac(c_in, c_out, k, ho, wo, self.mac),
                        c_out,
                        h_out: ho,
                        w_out: wo,
                    }
                }
                LayerKind::Attention { channels, r } => {
                    if channels != c {
                        return Err(CostError::ChannelChain {
                            index,
                            expected: channels,
                            got: c,
                        });
                    }
                    // Q/K/V projections plus, per footprint weight:
                    // one compatibility MAC, ~3 softmax ops, one mixing MAC.
                    let qkv = 3.0 * conv_flops_mac(c, c, 1, h, w, self.mac);
                    let footprint =
                        (2.0 * self.mac + 3.0) * (c * r * r * h * w) as f64;
                    LayerCost {
                        flops: qkv + footprint,
                        c_out: c,
                        h_out: h,
                        w_out: w,
                    }
                }
                LayerKind::Pool { factor } => {
                    let (ho, wo) = if factor == 0 {
                        (1, 1)
                    } else {
                        if h % factor != 0 || w % factor != 0 || h < factor || w < factor {
                            return Err(CostError::DimsCollapse { index, h, w });
                        }
                        (h / factor, w / factor)
                    };
                    LayerCost {
                        flops: (c * h * w) as f64,
                        c_out: c,
                        h_out: ho,
                        w_out: wo,
                    }
                }
                LayerKind::Linear { c_in, c_out } => {
                    if c_in != c * h * w {
                        return Err(CostError::ChannelChain {
                            index,
                            expected: c_in,
                            got: c * h * w,
                        });
                    }
                    LayerCost {
                        flops: self.mac * (c_in * c_out) as f64,
                        c_out,
                        h_out: 1,
                        w_out: 1,
                    }
                }
            };
            if !(cost.flops > 0.0) {
                return Err(CostError::ZeroCost {
                    index,
                    kind: layer.name(),
                });
            }
            c = cost.c_out;
            h = cost.h_out;
            w = cost.w_out;
            out.push(cost);
        }
        Ok(out)
    }

    /// Whole-table cost for a `c_in x h x w` input.
    pub fn total(&self, c_in: usize, h: usize, w: usize) -> Result<f64, CostError> {
        Ok(self.profile(c_in, h, w)?.iter().map(|l| l.flops).sum())
    }

    /// Costs of the pre-scan half (layers `1..=lambda`) and the rest.
    pub fn split(&self, c_in: usize, h: usize, w: usize) -> Result<(f64, f64), CostError> {
        let profile = self.profile(c_in, h, w)?;
        let first: f64 = profile[..self.lambda].iter().map(|l| l.flops).sum();
        let rest: f64 = profile[self.lambda..].iter().map(|l| l.flops).sum();
        Ok((first, rest))
    }
}

/// Total cost as a function of square input side, for complexity plots.
pub fn scaling_curve(
    table: &LayerCostTable,
    c_in: usize,
    sides: &[usize],
) -> Result<Vec<(usize, f64)>, CostError> {
    sides
        .iter()
        .map(|&n| Ok((n, table.total(c_in, n, n)?)))
        .collect()
}

/// The per-frame cost split between the cheap pre-scan pass and the rest of
/// the pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    /// First backbone half on the low-res view.
    pub first_half: f64,
    pub hallucinator: f64,
    pub skip_policy: f64,
    /// Second backbone half on the low-res view.
    pub second_half: f64,
    /// k full backbone passes at crop size.
    pub crops: f64,
    pub classifier: f64,
    /// first_half + hallucinator + skip_policy.
    pub o_pre: f64,
    /// second_half + crops + classifier.
    pub o_rest: f64,
    /// Exactly o_pre + o_rest.
    pub o_full: f64,
}

/// Assemble the pre-scan/rest decomposition for one frame: the low-res view
/// runs the backbone split at the table's cut point, each of the `k` crops
/// runs the whole backbone at crop size, and the hallucinator, skip policy,
/// and classifier contribute fixed costs.
#[allow(clippy::too_many_arguments)]
pub fn breakdown(
    table: &LayerCostTable,
    c_in: usize,
    low_dims: (usize, usize),
    crop_dims: (usize, usize),
    k: usize,
    hallucinator: f64,
    skip_policy: f64,
    classifier: f64,
) -> Result<CostBreakdown, CostError> {
    let (first_half, second_half) = table.split(c_in, low_dims.0, low_dims.1)?;
    let crop_cost = if k > 0 {
        k as f64 * table.total(c_in, crop_dims.0, crop_dims.1)?
    } else {
        0.0
    };
    let o_pre = first_half + hallucinator + skip_policy;
    let o_rest = second_half + crop_cost + classifier;
    Ok(CostBreakdown {
        first_half,
        hallucinator,
        skip_policy,
        second_half,
        crops: crop_cost,
        classifier,
        o_pre,
        o_rest,
        o_full: o_pre + o_rest,
    })
}

/// The compute the schedule actually spent: full frames pay `o_full`,
/// pre-scanned frames pay `o_pre`, skipped frames are free.  Normalization
/// divides by the all-full budget, landing in (0,1] with 1 exactly when
/// every frame ran fully.
pub fn efficiency_loss(
    n_full: usize,
    n_pre: usize,
    n_skip: usize,
    cb: &CostBreakdown,
    normalize: bool,
) -> f64 {
    let raw = n_full as f64 * cb.o_full + n_pre as f64 * cb.o_pre;
    if normalize {
        raw / ((n_full + n_pre + n_skip) as f64 * cb.o_full)
    } else {
        raw
    }
}

/// Compute spent per accuracy point: lower is a better deal.
pub fn tradeoff(avg_gflops: f64, top1_percent: f64) -> Result<f64, CostError> {
    if top1_percent <= 0.0 {
        return Err(CostError::ZeroTop1);
    }
    Ok(avg_gflops / top1_percent)
}

/// How many times cheaper the model runs than its reference.
pub fn speedup(reference: f64, model: f64) -> Result<f64, CostError> {
    if model <= 0.0 {
        return Err(CostError::ZeroModelCost);
    }
    Ok(reference / model)
}

/// Totals over one or more decision streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    pub n_full: usize,
    pub n_pre: usize,
    pub n_skip: usize,
    pub frames: usize,
    /// Exactly n_full * charge_full + n_pre * charge_pre.
    pub total_flops: f64,
    pub avg_flops: f64,
    pub pct_full: f64,
    pub pct_pre: f64,
    pub pct_skip: f64,
    /// FLOPS charged per full frame (0 when none occurred).
    pub charge_full: f64,
    /// FLOPS charged per pre-scanned frame (0 when none occurred).
    pub charge_pre: f64,
}

/// Tally decision streams of `(status, flops_charged)` pairs.  Charges must
/// be uniform within each status and zero for skips, which lets the total be
/// computed as `n_full * o_full + n_pre * o_pre` exactly — the same product
/// form as the raw efficiency loss, so accounting and loss always agree.
pub fn aggregate(streams: &[Vec<(FrameStatus, f64)>]) -> Result<RunStats, CostError> {
    let frames: usize = streams.iter().map(Vec::len).sum();
    if frames == 0 {
        return Err(CostError::EmptyRun);
    }
    let (mut n_full, mut n_pre, mut n_skip) = (0usize, 0usize, 0usize);
    let (mut charge_full, mut charge_pre) = (None, None);
    let note = |slot: &mut Option<f64>, status: FrameStatus, c: f64| {
        match *slot {
            None => {
                *slot = Some(c);
                Ok(())
            }
            Some(prev) if prev == c => Ok(()),
            Some(prev) => Err(CostError::MixedCharges {
                status,
                a: prev,
                b: c,
            }),
        }
    };
    for stream in streams {
        for &(status, charge) in stream {
            match status {
                FrameStatus::Full => {
                    n_full += 1;
                    note(&mut charge_full, status, charge)?;
                }
                FrameStatus::Prescan => {
                    n_pre += 1;
                    note(&mut charge_pre, status, charge)?;
                }
                FrameStatus::Skip => {
                    if charge != 0.0 {
                        return Err(CostError::SkipCharged(charge));
                    }
                    n_skip += 1;
                }
            }
        }
    }
    let charge_full = charge_full.unwrap_or(0.0);
    let charge_pre = charge_pre.unwrap_or(0.0);
    let total_flops = n_full as f64 * charge_full + n_pre as f64 * charge_pre;
    let pct = |n: usize| 100.0 * n as f64 / frames as f64;
    Ok(RunStats {
        n_full,
        n_pre,
        n_skip,
        frames,
        total_flops,
        avg_flops: total_flops / frames as f64,
        pct_full: pct(n_full),
        pct_pre: pct(n_pre),
        pct_skip: pct(n_skip),
        charge_full,
        charge_pre,
    })
}

/// The sampled views must be cheaper than processing the original frame:
/// `cost(low-res) + k * cost(crop) < cost(full)`.
pub fn check_spatial_budget(
    table: &LayerCostTable,
    c_in: usize,
    full_dims: (usize, usize),
    d: usize,
    crop_dims: (usize, usize),
    k: usize,
) -> Result<(), CostError> {
    let full = table.total(c_in, full_dims.0, full_dims.1)?;
    let low = table.total(c_in, full_dims.0 / d, full_dims.1 / d)?;
    let crop = table.total(c_in, crop_dims.0, crop_dims.1)?;
    let sampled = low + k as f64 * crop;
    if sampled < full {
        Ok(())
    } else {
        Err(CostError::BudgetViolation { k, sampled, full })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOY_TABLE: &str = "\
# toy backbone
conv 3 8 3 2 1
conv 8 8 3 2 1
attention 8 3
conv 8 16 3 1 1
pool 0
linear 16 3
split 2
";

    #[test]
    fn conv_flops_worked_examples() {
        assert_eq!(conv_flops(1, 1, 1, 1, 1), 2.0);
        assert_eq!(conv_flops(3, 8, 3, 4, 4), 6912.0);
        let base = conv_flops(4, 7, 3, 5, 9);
        assert_eq!(conv_flops(4, 7, 3, 10, 18), 4.0 * base);
        assert_eq!(conv_flops_mac(3, 8, 3, 4, 4, 1.0), 3456.0);
    }

    #[test]
    fn parse_round_trips_the_toy_table() {
        let table = LayerCostTable::parse(TOY_TABLE).unwrap();
        assert_eq!(table.len(), 6);
        assert_eq!(table.lambda(), 2);
        let profile = table.profile(3, 48, 48).unwrap();
        assert_eq!(
            (profile[0].h_out, profile[1].h_out, profile[4].h_out),
            (24, 12, 1)
        );
        assert_eq!(profile[5].c_out, 3);
    }

    #[test]
    fn parse_rejects_malformed_tables() {
        let kind = LayerCostTable::parse("deconv 1 2 3 4 5\nsplit 1");
        assert!(matches!(kind, Err(CostError::Parse { line: 1, .. })));
        let argc = LayerCostTable::parse("conv 3 8 3\nsplit 1");
        assert!(matches!(argc, Err(CostError::Parse { line: 1, .. })));
        let nosplit = LayerCostTable::parse("conv 3 8 3 1 1\n");
        assert!(matches!(nosplit, Err(CostError::Parse { .. })));
        let badsplit = LayerCostTable::parse("conv 3 8 3 1 1\nsplit 9");
        assert!(matches!(
            badsplit,
            Err(CostError::BadSplit { lambda: 9, layers: 1 })
        ));
        let badnum = LayerCostTable::parse("conv 3 8 three 1 1\nsplit 1");
        assert!(matches!(badnum, Err(CostError::Parse { line: 1, .. })));
    }

    #[test]
    fn chain_mismatches_are_rejected() {
        let table = LayerCostTable::parse("conv 3 8 3 1 1\nconv 4 8 3 1 1\nsplit 1").unwrap();
        assert!(matches!(
            table.total(3, 8, 8),
            Err(CostError::ChannelChain {
                index: 1,
                expected: 4,
                got: 8
            })
        ));
        let flat = LayerCostTable::parse("linear 99 3\nsplit 1").unwrap();
        assert!(matches!(
            flat.total(3, 2, 2),
            Err(CostError::ChannelChain { .. })
        ));
    }

    #[test]
    fn single_pointwise_conv_scales_with_n_squared() {
        let table = LayerCostTable::parse("conv 3 4 1 1 0\nsplit 1").unwrap();
        let curve = scaling_curve(&table, 3, &[4, 8, 16]).unwrap();
        let unit = curve[0].1 / 16.0;
        for &(n, c) in &curve {
            assert_eq!(c, unit * (n * n) as f64);
        }
    }

    #[test]
    fn reference_sides_are_strictly_ordered() {
        let table = LayerCostTable::parse(TOY_TABLE).unwrap();
        // GAP+linear need no divisibility; conv stride-2 handles any side.
        let curve = scaling_curve(&table, 3, &[64, 112, 224]).unwrap();
        assert!(curve[0].1 < curve[1].1, "cost(64) < cost(112)");
        assert!(curve[1].1 < curve[2].1, "cost(112) < cost(224)");
        // Monotone over a denser sweep too.
        let sides: Vec<usize> = (8..=64).step_by(4).collect();
        let dense = scaling_curve(&table, 3, &sides).unwrap();
        for pair in dense.windows(2) {
            assert!(pair[0].1 <= pair[1].1);
        }
    }

    #[test]
    fn three_layer_curve_matches_hand_sum() {
        let text = "conv 3 4 3 1 1\nconv 4 4 3 2 1\npool 0\nsplit 1";
        let table = LayerCostTable::parse(text).unwrap();
        for n in [8usize, 16, 32] {
            // conv1: same size; conv2: halves (n+2-3)/2+1 = n/2 for even n.
            let c1 = 2.0 * (3 * 4 * 9 * n * n) as f64;
            let half = (n + 2 - 3) / 2 + 1;
            let c2 = 2.0 * (4 * 4 * 9 * half * half) as f64;
            let c3 = (4 * half * half) as f64;
            assert_eq!(table.total(3, n, n).unwrap(), c1 + c2 + c3);
        }
    }

    fn toy_breakdown(k: usize) -> CostBreakdown {
        let table = LayerCostTable::parse(TOY_TABLE).unwrap();
        breakdown(&table, 3, (24, 24), (16, 16), k, 500.0, 300.0, 200.0).unwrap()
    }

    #[test]
    fn breakdown_components_assemble_exactly() {
        let cb = toy_breakdown(3);
        assert_eq!(cb.o_pre, cb.first_half + cb.hallucinator + cb.skip_policy);
        assert_eq!(cb.o_rest, cb.second_half + cb.crops + cb.classifier);
        assert_eq!(cb.o_full, cb.o_pre + cb.o_rest);
        assert!(cb.o_pre < cb.o_full);

        // k crops contribute k whole-backbone passes at crop size.
        let table = LayerCostTable::parse(TOY_TABLE).unwrap();
        let crop_cost = table.total(3, 16, 16).unwrap();
        let cb0 = toy_breakdown(0);
        assert_eq!(cb.o_rest - cb0.o_rest, 3.0 * crop_cost);
        assert_eq!(cb.o_pre, cb0.o_pre);
    }

    #[test]
    fn full_split_leaves_only_classifier_beyond_prescan() {
        let table = LayerCostTable::parse("conv 3 8 3 2 1\nconv 8 8 3 2 1\nsplit 2").unwrap();
        let cb = breakdown(&table, 3, (24, 24), (16, 16), 0, 0.0, 0.0, 42.0).unwrap();
        assert_eq!(cb.o_pre, table.total(3, 24, 24).unwrap());
        assert_eq!(cb.o_rest, 42.0);
    }

    #[test]
    fn whole_pipeline_sum_matches_o_full() {
        // Independent single-pass summation of every component.
        let cb = toy_breakdown(2);
        let flat = cb.first_half
            + cb.hallucinator
            + cb.skip_policy
            + cb.second_half
            + cb.crops
            + cb.classifier;
        assert_eq!(flat, cb.o_full);
    }

    fn fixed_cb(o_pre: f64, o_rest: f64) -> CostBreakdown {
        CostBreakdown {
            first_half: o_pre,
            hallucinator: 0.0,
            skip_policy: 0.0,
            second_half: o_rest,
            crops: 0.0,
            classifier: 0.0,
            o_pre,
            o_rest,
            o_full: o_pre + o_rest,
        }
    }

    #[test]
    fn efficiency_loss_arithmetic() {
        let cb = fixed_cb(4.0, 6.0);
        assert_eq!(efficiency_loss(0, 0, 5, &cb, false), 0.0);
        assert_eq!(efficiency_loss(3, 7, 0, &cb, false), 58.0);
        assert_eq!(efficiency_loss(9, 0, 0, &cb, true), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..100 {
            let n_full = rng.random_range(0..20usize);
            let n_pre = rng.random_range(0..20usize);
            let n_skip = rng.random_range(0..20usize);
            if n_full + n_pre + n_skip == 0 || n_full + n_pre == 0 {
                continue;
            }
            let l = efficiency_loss(n_full, n_pre, n_skip, &cb, true);
            assert!(l > 0.0 && l <= 1.0, "normalized loss {l} out of (0,1]");
            if n_pre + n_skip > 0 {
                assert!(l < 1.0);
            }
        }
    }

    #[test]
    fn tradeoff_matches_published_rows() {
        // Heavier-baseline row: 8.64 GFLOPS at 27.52% top-1.
        assert!((tradeoff(8.64, 27.52).unwrap() - 0.314).abs() <= 0.001);
        // Cheaper-competitor row: 4.62 GFLOPS at 28.32% top-1.
        assert!((tradeoff(4.62, 28.32).unwrap() - 0.163).abs() <= 0.001);
        assert_eq!(tradeoff(0.0, 5.0).unwrap(), 0.0);
        assert_eq!(tradeoff(3.0, 0.0), Err(CostError::ZeroTop1));
        // Monotone in cost, antitone in accuracy.
        assert!(tradeoff(5.0, 25.0).unwrap() < tradeoff(6.0, 25.0).unwrap());
        assert!(tradeoff(5.0, 26.0).unwrap() < tradeoff(5.0, 25.0).unwrap());
    }

    #[test]
    fn speedup_matches_published_rows() {
        // Per-frame averages: 5.80 vs 3.61 GFLOPS, published as 1.60x.
        assert!((speedup(5.80, 3.61).unwrap() - 1.60).abs() <= 0.02);
        // Whole-set totals: 139.14 vs 81.27 TFLOPS, published as 1.71x.
        assert!((speedup(139.14, 81.27).unwrap() - 1.71).abs() <= 0.01);
        assert_eq!(speedup(7.5, 7.5).unwrap(), 1.0);
        assert_eq!(speedup(1.0, 0.0), Err(CostError::ZeroModelCost));
    }

    #[test]
    fn aggregate_worked_examples() {
        let all_full = vec![vec![(FrameStatus::Full, 10.0); 10]];
        let s = aggregate(&all_full).unwrap();
        assert_eq!((s.total_flops, s.avg_flops), (100.0, 10.0));
        assert_eq!((s.pct_full, s.pct_pre, s.pct_skip), (100.0, 0.0, 0.0));

        let mixed = vec![vec![
            (FrameStatus::Full, 10.0),
            (FrameStatus::Prescan, 4.0),
            (FrameStatus::Skip, 0.0),
        ]];
        let s = aggregate(&mixed).unwrap();
        assert_eq!(s.total_flops, 14.0);
        assert_eq!(s.avg_flops, 14.0 / 3.0);
        assert_eq!((s.n_full, s.n_pre, s.n_skip), (1, 1, 1));
    }

    #[test]
    fn aggregate_matches_recount_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (o_full, o_pre) = (12.0, 5.0);
        for _ in 0..50 {
            let streams: Vec<Vec<(FrameStatus, f64)>> = (0..rng.random_range(1..4usize))
                .map(|_| {
                    (0..rng.random_range(1..12usize))
                        .map(|_| match rng.random_range(0..3u8) {
                            0 => (FrameStatus::Full, o_full),
                            1 => (FrameStatus::Prescan, o_pre),
                            _ => (FrameStatus::Skip, 0.0),
                        })
                        .collect()
                })
                .collect();
            let s = aggregate(&streams).unwrap();
            // Recount with plain loops and a running sum.
            let flat: Vec<_> = streams.iter().flatten().collect();
            let count = |st: FrameStatus| flat.iter().filter(|(s, _)| *s == st).count();
            let sum: f64 = flat.iter().map(|(_, c)| c).sum();
            assert_eq!(s.n_full, count(FrameStatus::Full));
            assert_eq!(s.n_pre, count(FrameStatus::Prescan));
            assert_eq!(s.n_skip, count(FrameStatus::Skip));
            assert_eq!(s.frames, flat.len());
            assert_eq!(s.total_flops, sum); // exact: charges are integers
            assert_eq!(
                s.total_flops,
                s.n_full as f64 * o_full + s.n_pre as f64 * o_pre
            );
            // Accounting equals the raw efficiency loss.
            let cb = fixed_cb(o_pre, o_full - o_pre);
            assert_eq!(
                s.total_flops,
                efficiency_loss(s.n_full, s.n_pre, s.n_skip, &cb, false)
            );
        }
    }

    #[test]
    fn aggregate_rejects_inconsistent_charges() {
        assert_eq!(aggregate(&[]), Err(CostError::EmptyRun));
        assert_eq!(aggregate(&[vec![]]), Err(CostError::EmptyRun));
        let mixed = vec![vec![(FrameStatus::Full, 10.0), (FrameStatus::Full, 11.0)]];
        assert!(matches!(
            aggregate(&mixed),
            Err(CostError::MixedCharges { .. })
        ));
        let paid_skip = vec![vec![(FrameStatus::Skip, 1.0)]];
        assert_eq!(aggregate(&paid_skip), Err(CostError::SkipCharged(1.0)));
    }

    #[test]
    fn spatial_budget_checks_the_sampling_discount() {
        let table = LayerCostTable::parse(TOY_TABLE).unwrap();
        check_spatial_budget(&table, 3, (48, 48), 2, (16, 16), 3).unwrap();
        let err = check_spatial_budget(&table, 3, (48, 48), 2, (16, 16), 100);
        assert!(matches!(err, Err(CostError::BudgetViolation { k: 100, .. })));
    }
}
