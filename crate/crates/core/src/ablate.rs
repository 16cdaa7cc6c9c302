//! One-axis sweeps over decoder design choices at toy scale.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::autograd::ResizeMode;
use crate::config::{FusionMode, RunConfig, UpsampleSize};
use crate::error::{Error, Result};
use crate::train::train_run;

pub const ABLATION_CSV_HEADER: &str = "value,ap50,loss";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Upsample,
    Layers,
    Kernel,
    Fusion,
    QueryShape,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Upsample,
        AblationAxis::Layers,
        AblationAxis::Kernel,
        AblationAxis::Fusion,
        AblationAxis::QueryShape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Upsample => "upsample",
            AblationAxis::Layers => "layers",
            AblationAxis::Kernel => "kernel",
            AblationAxis::Fusion => "fusion",
            AblationAxis::QueryShape => "query_shape",
        }
    }

    /// The configurations swept along this axis, labelled, derived from `base`.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        let m = &base.model;
        match self {
            AblationAxis::Upsample => {
                let (h, w) = (m.query_h(), m.query_w());
                vec![
                    (
                        "dynamic-bilinear".to_string(),
                        with(&|c| {
                            c.model.upsample_size = UpsampleSize::Dynamic;
                            c.model.upsample_mode = ResizeMode::Bilinear;
                        }),
                    ),
                    (
                        "dynamic-nearest".to_string(),
                        with(&|c| {
                            c.model.upsample_size = UpsampleSize::Dynamic;
                            c.model.upsample_mode = ResizeMode::Nearest;
                        }),
                    ),
                    (format!("fixed-{h}x{w}"), with(&|c| c.model.upsample_size = UpsampleSize::Fixed([h, w]))),
                    (
                        format!("fixed-{}x{}", 2 * h, 2 * w),
                        with(&|c| c.model.upsample_size = UpsampleSize::Fixed([2 * h, 2 * w])),
                    ),
                ]
            }
            AblationAxis::Layers => [1, 3, 6]
                .into_iter()
                .map(|l| (l.to_string(), with(&|c| c.model.decoder_layers = l)))
                .collect(),
            AblationAxis::Kernel => [5, 7, 9, 11]
                .into_iter()
                .map(|k| {
                    (
                        k.to_string(),
                        with(&|c| {
                            c.model.sim_kernel = k;
                            c.model.cim_kernel = k;
                        }),
                    )
                })
                .collect(),
            AblationAxis::Fusion => FusionMode::ALL
                .into_iter()
                .map(|f| (f.name().to_string(), with(&|c| c.model.fusion_mode = f)))
                .collect(),
            AblationAxis::QueryShape => {
                let n = m.num_queries;
                (1..=n)
                    .filter(|w| n % w == 0)
                    .map(|w| {
                        let h = n / w;
                        (format!("{w}x{h}"), with(&|c| c.model.query_shape = [w, h]))
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownAxis {
                axis: s.to_string(),
                valid: AblationAxis::ALL.map(AblationAxis::name).join(", "),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    /// Held-out AP50 after the last epoch (NaN with an empty held-out split).
    pub ap50: f64,
    /// Mean training loss over the last epoch.
    pub loss: f64,
}

/// Train once per axis value, all with the base config's seed.
pub fn run_ablation(
    base: &RunConfig,
    axis: AblationAxis,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let mut rows = Vec::new();
    for (value, cfg) in axis.variants(base) {
        cfg.validate()?;
        let out = train_run(&cfg, None, |_| {})?;
        let last = out
            .metrics
            .last()
            .ok_or_else(|| Error::Config("ablation needs train.epochs >= 1".into()))?;
        let row = AblationRow {
            value,
            ap50: last.ap50.unwrap_or(f64::NAN),
            loss: last.loss.total,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.value, r.ap50, r.loss);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(axis: AblationAxis) -> Vec<String> {
        axis.variants(&RunConfig::default()).into_iter().map(|(v, _)| v).collect()
    }

    #[test]
    fn axis_values() {
        assert_eq!(labels(AblationAxis::Fusion), ["add", "multiply", "concat_conv"]);
        assert_eq!(labels(AblationAxis::Kernel), ["5", "7", "9", "11"]);
        assert_eq!(labels(AblationAxis::Layers), ["1", "3", "6"]);
        assert_eq!(labels(AblationAxis::Upsample), ["dynamic-bilinear", "dynamic-nearest", "fixed-5x5", "fixed-10x10"]);
        assert_eq!(labels(AblationAxis::QueryShape), ["1x25", "5x5", "25x1"]);
    }

    #[test]
    fn variants_are_valid() {
        for axis in AblationAxis::ALL {
            for (v, c) in axis.variants(&RunConfig::default()) {
                c.validate().unwrap_or_else(|e| panic!("{axis} {v}: {e}"));
            }
        }
    }

    #[test]
    fn unknown_axis_lists_valid_ones() {
        let e = "depth".parse::<AblationAxis>().unwrap_err().to_string();
        for a in AblationAxis::ALL {
            assert!(e.contains(a.name()), "{e}");
        }
        assert_eq!("query_shape".parse::<AblationAxis>().unwrap(), AblationAxis::QueryShape);
    }
}
