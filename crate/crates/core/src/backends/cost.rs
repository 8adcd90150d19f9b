//! Analytic prefill/decode latency model.
//!
//! Prefill of a context of `L` tokens costs `a2 * L^2 + a1 * L`. Chunk
//! prefills are packed onto `parallel_lanes` identical lanes with
//! longest-processing-time-first list scheduling; the prefill latency is the
//! makespan. Each decode step costs `d1 * max_k L_k`, plus a fixed fusion
//! overhead whenever more than one chunk is compiled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(token length, prefill seconds)` for 8-, 16- and 32-shot full-context
/// inference with LLaVA-OV-7B.
pub const MEASURED_PREFILL: [(f64, f64); 3] = [(23_318.0, 0.977), (44_027.0, 2.343), (84_959.0, 3.444)];

/// Decoding seconds for the same rows.
pub const MEASURED_DECODE: [(f64, f64); 3] = [(23_318.0, 0.027), (44_027.0, 0.033), (84_959.0, 0.035)];

/// Decode steps assumed per measured row when fitting `d1` (one answer token
/// plus end-of-sequence).
pub const MEASURED_DECODE_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// `a2`, seconds per squared token.
    pub prefill_quadratic: f64,
    /// `a1`, seconds per token.
    pub prefill_linear: f64,
    /// `d1`, seconds per context token per decode step.
    pub decode_per_token: f64,
    /// Seconds per decode step spent fusing chunk logits.
    pub compile_overhead: f64,
    pub parallel_lanes: usize,
}

impl Default for CostModel {
    /// Least-squares fit to [`MEASURED_PREFILL`] / [`MEASURED_DECODE`], see
    /// [`CostModel::fit_prefill`] and [`CostModel::fit_decode`].
    fn default() -> Self {
        Self {
            prefill_quadratic: 0.0,
            prefill_linear: 4.314_740_296_547_222e-5,
            decode_per_token: 2.606_170_264_224_627e-7,
            compile_overhead: 1e-3,
            parallel_lanes: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub total: f64,
    pub prefill: f64,
    pub decoding: f64,
}

/// Result of fitting the prefill polynomial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefillFit {
    /// Constrained to the admissible region `a2 >= 0, a1 >= 0`.
    pub quadratic: f64,
    pub linear: f64,
    /// Unconstrained ordinary least squares, for reference.
    pub ols_quadratic: f64,
    pub ols_linear: f64,
}

impl PrefillFit {
    pub fn predict(&self, tokens: f64) -> f64 {
        self.quadratic * tokens * tokens + self.linear * tokens
    }

    /// Largest `|predicted - observed| / observed` over `rows`.
    pub fn max_relative_error(&self, rows: &[(f64, f64)]) -> f64 {
        rows.iter()
            .map(|(l, t)| ((self.predict(*l) - t) / t).abs())
            .fold(0.0, f64::max)
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            self.prefill_quadratic,
            self.prefill_linear,
            self.decode_per_token,
            self.compile_overhead,
        ];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::invalid("cost coefficients must be finite and non-negative"));
        }
        if self.prefill_quadratic + self.prefill_linear <= 0.0 {
            return Err(Error::invalid("prefill cost must not vanish"));
        }
        if self.parallel_lanes == 0 {
            return Err(Error::invalid("parallel_lanes must be positive"));
        }
        Ok(())
    }

    pub fn prefill_cost(&self, tokens: usize) -> f64 {
        let l = tokens as f64;
        self.prefill_quadratic * l * l + self.prefill_linear * l
    }

    /// Per-step decode cost for chunk contexts of the given lengths.
    pub fn decode_step_cost(&self, prefill_lengths: &[usize]) -> f64 {
        let longest = prefill_lengths.iter().copied().max().unwrap_or(0) as f64;
        let fusion = if prefill_lengths.len() > 1 {
            self.compile_overhead
        } else {
            0.0
        };
        self.decode_per_token * longest + fusion
    }

    pub fn prefill_latency(&self, prefill_lengths: &[usize]) -> f64 {
        let costs: Vec<f64> = prefill_lengths.iter().map(|l| self.prefill_cost(*l)).collect();
        lpt_makespan(&costs, self.parallel_lanes)
    }

    pub fn simulate_latency(&self, prefill_lengths: &[usize], decode_steps: usize) -> Result<LatencyBreakdown> {
        self.validate()?;
        if prefill_lengths.is_empty() {
            return Err(Error::invalid("at least one chunk is required"));
        }
        let prefill = self.prefill_latency(prefill_lengths);
        let decoding = decode_steps as f64 * self.decode_step_cost(prefill_lengths);
        Ok(LatencyBreakdown {
            total: prefill + decoding,
            prefill,
            decoding,
        })
    }

    /// Least squares for `t = a2 L^2 + a1 L` (no intercept). When the
    /// unconstrained optimum leaves the admissible region, the best fit on
    /// the boundary is returned.
    pub fn fit_prefill(rows: &[(f64, f64)]) -> Result<PrefillFit> {
        if rows.len() < 2 {
            return Err(Error::invalid("need at least two rows to fit two coefficients"));
        }
        // work in units of 10k tokens for conditioning
        const SCALE: f64 = 1e4;
        let (mut s4, mut s3, mut s2, mut y2, mut y1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (l, t) in rows {
            let x = l / SCALE;
            s4 += x.powi(4);
            s3 += x.powi(3);
            s2 += x * x;
            y2 += x * x * t;
            y1 += x * t;
        }
        let det = s4 * s2 - s3 * s3;
        if det.abs() < 1e-12 * s4 * s2 {
            return Err(Error::invalid("prefill rows are degenerate"));
        }
        let ols_quadratic = (y2 * s2 - s3 * y1) / det;
        let ols_linear = (s4 * y1 - s3 * y2) / det;
        let (quadratic, linear) = if ols_quadratic >= 0.0 && ols_linear >= 0.0 {
            (ols_quadratic, ols_linear)
        } else {
            // best single-term fits; keep whichever leaves the smaller residual
            let linear_only = (0.0, y1 / s2);
            let quadratic_only = (y2 / s4, 0.0);
            let sse = |(q, l): (f64, f64)| -> f64 {
                rows.iter()
                    .map(|(len, t)| {
                        let x = len / SCALE;
                        (q * x * x + l * x - t).powi(2)
                    })
                    .sum()
            };
            if sse(linear_only) <= sse(quadratic_only) {
                linear_only
            } else {
                quadratic_only
            }
        };
        Ok(PrefillFit {
            quadratic: quadratic / (SCALE * SCALE),
            linear: linear / SCALE,
            ols_quadratic: ols_quadratic / (SCALE * SCALE),
            ols_linear: ols_linear / SCALE,
        })
    }

    /// Least squares through the origin for `t / steps = d1 L`.
    pub fn fit_decode(rows: &[(f64, f64)], steps: usize) -> Result<f64> {
        if rows.is_empty() || steps == 0 {
            return Err(Error::invalid("need rows and a positive step count"));
        }
        let num: f64 = rows.iter().map(|(l, t)| l * t / steps as f64).sum();
        let den: f64 = rows.iter().map(|(l, _)| l * l).sum();
        Ok(num / den)
    }
}

/// Makespan of longest-processing-time-first list scheduling on `lanes`
/// identical lanes. Ties go to the earlier job and the lower lane.
pub fn lpt_makespan(costs: &[f64], lanes: usize) -> f64 {
    let lanes = lanes.max(1);
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|a, b| costs[*b].total_cmp(&costs[*a]).then(a.cmp(b)));
    let mut load = vec![0.0f64; lanes.min(costs.len().max(1))];
    for j in order {
        let (lane, _) = load
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1).then(x.0.cmp(&y.0)))
            .unwrap();
        load[lane] += costs[j];
    }
    load.into_iter().fold(0.0, f64::max)
}
