//! Sweeps of one configuration axis, each entry a full pipeline run with the
//! shared seed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::run;
use crate::teachers::TeacherOracle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum AblationAxis {
    /// The full configuration followed by one run per disabled loss.
    Switches(Vec<String>),
    Threshold(Vec<f64>),
    Gamma(Vec<f64>),
    /// `(epsilon, zeta)` pairs.
    EpsZeta(Vec<(f64, f64)>),
    ClipWeight(Vec<f64>),
}

impl AblationAxis {
    /// Labelled configurations derived from `base`.
    pub fn configs(&self, base: &Config) -> Result<Vec<(String, Config)>> {
        let mut out = Vec::new();
        match self {
            AblationAxis::Switches(names) => {
                out.push(("full".to_string(), base.clone()));
                for n in names {
                    let mut c = base.clone();
                    c.switches.set(n, false)?;
                    out.push((format!("without-{n}"), c));
                }
            }
            AblationAxis::Threshold(v) => {
                for &t in v {
                    out.push((format!("threshold={t}"), Config { gu_threshold: t, ..base.clone() }));
                }
            }
            AblationAxis::Gamma(v) => {
                for &g in v {
                    out.push((format!("gamma={g}"), Config { gamma: g, ..base.clone() }));
                }
            }
            AblationAxis::EpsZeta(v) => {
                for &(e, z) in v {
                    out.push((
                        format!("epsilon={e},zeta={z}"),
                        Config {
                            epsilon: e,
                            zeta: z,
                            ..base.clone()
                        },
                    ));
                }
            }
            AblationAxis::ClipWeight(v) => {
                for &w in v {
                    out.push((
                        format!("clip_weight={w}"),
                        Config {
                            clip_weight: Some(w),
                            ..base.clone()
                        },
                    ));
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("ablation axis has no values".into()));
        }
        for (label, c) in &out {
            c.validate()
                .map_err(|e| Error::Config(format!("{label}: {e}")))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config: Config,
    pub stage_one_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub final_gu: f64,
    /// Largest per-epoch mean of the output-divergence and gradient terms.
    pub max_abs_od: f64,
    pub max_abs_wg: f64,
}

pub fn run_ablation_grid(
    base: &Config,
    axis: &AblationAxis,
    data: &Dataset,
    teacher_b: &TeacherOracle,
    teacher_c: &TeacherOracle,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in axis.configs(base)? {
        log::info!("ablation run {label}");
        let out = run(&cfg, data, teacher_b, teacher_c.clone(), &mut |_| {})?;
        let last = out
            .metrics
            .last()
            .ok_or_else(|| Error::DegenerateState("run produced no metrics".into()))?;
        let max_abs = |f: fn(&crate::pipeline::MetricsRecord) -> f64| {
            out.metrics.iter().map(|m| f(m).abs()).fold(0.0, f64::max)
        };
        rows.push(AblationRow {
            label,
            stage_one_accuracy: out.stage_one_accuracy,
            final_accuracy: out.final_accuracy,
            final_gu: last.gu_of_target,
            max_abs_od: max_abs(|m| m.losses.od),
            max_abs_wg: max_abs(|m| m.losses.wg),
            config: cfg,
        });
    }
    Ok(rows)
}

/// Whitespace-separated columns for gnuplot: index, label, final accuracy,
/// stage-one accuracy, final GU. Missing accuracies print as `NaN`.
pub fn rows_to_columns(rows: &[AblationRow]) -> String {
    let mut s = String::from("# index label final_accuracy stage_one_accuracy final_gu\n");
    let f = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x:.6}"));
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i} \"{}\" {} {} {:.6}",
            r.label,
            f(r.final_accuracy),
            f(r.stage_one_accuracy),
            r.final_gu
        );
    }
    s
}
