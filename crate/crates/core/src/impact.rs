//! Chain from roof-age knowledge to CO₂ displaced by additional solar
//! deployment.
//!
//! Ages are integer years over a closed range. Buildings whose roof age lies
//! in a viable interval are worth marketing to; knowing roof age lets the
//! top-of-funnel spend on the rest be saved:
//!
//! ```text
//! cac_reduction        = top_of_funnel_share × (1 − viable_fraction)
//! total_cost_reduction = cac_share_of_cost × cac_reduction
//! capacity_increase    = elasticity × total_cost_reduction
//! annual_co2_mt        = 100 × capacity_increase × annual_co2_per_percent
//! total_co2_mt         = annual_co2_mt × horizon_years
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpactParams {
    pub roof_age_min: u32,
    pub roof_age_max: u32,
    /// Closed integer intervals `[lo, hi]`.
    pub viable_intervals: Vec<[u32; 2]>,
    /// Share of customer acquisition cost spent at the top of the funnel.
    pub top_of_funnel_share: f64,
    pub cac_share_of_cost: f64,
    pub cost_to_deployment_elasticity: f64,
    /// Mt CO₂ per year displaced per 1% increase in solar capacity.
    pub annual_co2_per_percent: f64,
    pub horizon_years: u32,
}

impl Default for ImpactParams {
    fn default() -> Self {
        ImpactParams {
            roof_age_min: 0,
            roof_age_max: 39,
            viable_intervals: vec![[0, 4], [25, 39]],
            top_of_funnel_share: 0.40,
            cac_share_of_cost: 0.10,
            cost_to_deployment_elasticity: 1.0,
            annual_co2_per_percent: 12.5,
            horizon_years: 30,
        }
    }
}

impl ImpactParams {
    /// Reads a top-of-funnel figure stated as a ratio to the rest of the
    /// funnel (`top / bottom`) as a share of the whole (`r / (1 + r)`).
    pub fn with_funnel_ratio(mut self, ratio: f64) -> Self {
        self.top_of_funnel_share = ratio / (1.0 + ratio);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("top_of_funnel_share", self.top_of_funnel_share),
            ("cac_share_of_cost", self.cac_share_of_cost),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is not a fraction"));
            }
        }
        if !(self.cost_to_deployment_elasticity >= 0.0) || !(self.annual_co2_per_percent >= 0.0) {
            return bad("elasticity and CO₂ per percent must be non-negative".into());
        }
        if self.horizon_years == 0 {
            return bad("horizon_years must be positive".into());
        }
        if self.roof_age_min > self.roof_age_max {
            return bad(format!("empty age range [{}, {}]", self.roof_age_min, self.roof_age_max));
        }
        for &[lo, hi] in &self.viable_intervals {
            if lo > hi || lo < self.roof_age_min || hi > self.roof_age_max {
                return bad(format!(
                    "viable interval [{lo}, {hi}] is not within [{}, {}]",
                    self.roof_age_min, self.roof_age_max
                ));
            }
        }
        let mut sorted = self.viable_intervals.clone();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[1][0] <= w[0][1] {
                return bad(format!("viable intervals {:?} and {:?} overlap", w[0], w[1]));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactResult {
    pub viable_fraction: f64,
    pub cac_reduction_fraction: f64,
    pub total_cost_reduction_fraction: f64,
    pub capacity_increase_fraction: f64,
    pub annual_co2_mt: f64,
    pub total_co2_mt: f64,
}

/// Integer ages in the viable intervals over integer ages in the full range.
pub fn viable_fraction(params: &ImpactParams) -> Result<f64> {
    params.validate()?;
    let viable: u32 = params.viable_intervals.iter().map(|[lo, hi]| hi - lo + 1).sum();
    Ok(viable as f64 / (params.roof_age_max - params.roof_age_min + 1) as f64)
}

pub fn compute_impact(params: &ImpactParams) -> Result<ImpactResult> {
    let viable = viable_fraction(params)?;
    let cac = params.top_of_funnel_share * (1.0 - viable);
    let total_cost = params.cac_share_of_cost * cac;
    let capacity = params.cost_to_deployment_elasticity * total_cost;
    let annual = capacity * 100.0 * params.annual_co2_per_percent;
    Ok(ImpactResult {
        viable_fraction: viable,
        cac_reduction_fraction: cac,
        total_cost_reduction_fraction: total_cost,
        capacity_increase_fraction: capacity,
        annual_co2_mt: annual,
        total_co2_mt: annual * params.horizon_years as f64,
    })
}

impl ImpactResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let rows = [
            ("viable fraction", format!("{:.4}", self.viable_fraction)),
            ("CAC reduction", format!("{:.4}", self.cac_reduction_fraction)),
            ("total cost reduction", format!("{:.4}", self.total_cost_reduction_fraction)),
            ("capacity increase", format!("{:.4}", self.capacity_increase_fraction)),
            ("annual CO2 (Mt/yr)", format!("{:.2}", self.annual_co2_mt)),
            ("total CO2 (Mt)", format!("{:.2}", self.total_co2_mt)),
        ];
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let v = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
        rows.iter().map(|(k, val)| format!("{k:<w$}  {val:>v$}\n")).collect()
    }
}
