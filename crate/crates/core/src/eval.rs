//! Survival metrics and attention diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionOutput, Modality};
use crate::numerics::BinaryMask;
use crate::survival::SurvivalRecord;

/// Whether patient `i` is known to fail before patient `j`.
fn precedes(a: &SurvivalRecord, b: &SurvivalRecord) -> bool {
    a.event && (a.time < b.time || (a.time == b.time && !b.event))
}

/// Harrell's concordance index. Risk ties count one half.
pub fn concordance_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if risks.len() != records.len() {
        return Err(Error::shape("concordance_index", records.len(), risks.len()));
    }
    let mut comparable = 0u64;
    // twice the concordance score, to stay in integers
    let mut score2 = 0u64;
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if i == j || !precedes(&records[i], &records[j]) {
                continue;
            }
            comparable += 1;
            if risks[i] > risks[j] {
                score2 += 2;
            } else if risks[i] == risks[j] {
                score2 += 1;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(score2 as f64 / (2 * comparable) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
}

/// Event times with their event and at-risk counts, ascending.
fn event_table(records: &[&SurvivalRecord]) -> Vec<(f64, usize, usize)> {
    let mut times: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
        .into_iter()
        .map(|t| {
            let d = records.iter().filter(|r| r.event && r.time == t).count();
            let n = records.iter().filter(|r| r.time >= t).count();
            (t, d, n)
        })
        .collect()
}

/// Product-limit estimate at each distinct event time.
pub fn km_curve(records: &[SurvivalRecord]) -> KmCurve {
    let refs: Vec<&SurvivalRecord> = records.iter().collect();
    let mut s = 1.0;
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
    };
    for (t, d, n) in event_table(&refs) {
        s *= 1.0 - d as f64 / n as f64;
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(n);
    }
    curve
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    libm::erfc((x / 2.0).sqrt())
}

/// Two-group log-rank test.
pub fn log_rank(group_a: &[SurvivalRecord], group_b: &[SurvivalRecord]) -> Result<LogRankResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::Invalid("log-rank needs two nonempty groups".into()));
    }
    let pooled: Vec<&SurvivalRecord> = group_a.iter().chain(group_b).collect();
    let table = event_table(&pooled);
    if table.is_empty() {
        return Err(Error::NoEvents);
    }
    let mut o_minus_e = 0.0;
    let mut var = 0.0;
    for (t, d, n) in table {
        let n_a = group_a.iter().filter(|r| r.time >= t).count() as f64;
        let d_a = group_a.iter().filter(|r| r.event && r.time == t).count() as f64;
        let (n, d) = (n as f64, d as f64);
        o_minus_e += d_a - d * n_a / n;
        if n > 1.0 {
            var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
        }
    }
    let statistic = if var > 0.0 { o_minus_e * o_minus_e / var } else { 0.0 };
    Ok(LogRankResult {
        statistic,
        p_value: chi2_1_sf(statistic),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskGroup {
    Low,
    High,
}

impl RiskGroup {
    pub fn name(self) -> &'static str {
        match self {
            RiskGroup::Low => "low",
            RiskGroup::High => "high",
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Risks strictly above the median are high, the rest low.
pub fn stratify_median(risks: &[f64]) -> Vec<RiskGroup> {
    let m = median(risks);
    risks
        .iter()
        .map(|&r| if r > m { RiskGroup::High } else { RiskGroup::Low })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub query: Modality,
    pub key: Modality,
    /// `(token name, dispersion)` sorted by descending dispersion.
    pub ranking: Vec<(String, f64)>,
}

/// Ranks the valid keys of `key` by the standard deviation of the attention
/// they receive from the valid queries of `query`.
pub fn cross_attention_summary(
    fused: &FusionOutput,
    validity: &[BinaryMask],
    key_names: &[String],
    query: Modality,
    key: Modality,
) -> Result<AttentionSummary> {
    let valid_rows = |m: Modality| -> Result<Vec<usize>> {
        let (off, len) = fused.span(m).ok_or(Error::BlockEmpty(m.name()))?;
        let k = fused.modalities.iter().position(|&x| x == m).expect("span found");
        let mask = validity.get(k).ok_or(Error::BlockEmpty(m.name()))?;
        let rows: Vec<usize> = (0..len).filter(|&i| mask.get(i)).map(|i| off + i).collect();
        if rows.is_empty() {
            return Err(Error::BlockEmpty(m.name()));
        }
        Ok(rows)
    };
    let queries = valid_rows(query)?;
    let keys = valid_rows(key)?;
    let (key_off, key_len) = fused.span(key).expect("checked");
    if key_names.len() != key_len {
        return Err(Error::shape("cross_attention_summary names", key_len, key_names.len()));
    }
    let mut ranking: Vec<(usize, f64)> = keys
        .iter()
        .map(|&c| {
            let col: Vec<f64> = queries.iter().map(|&r| fused.attention.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            (c - key_off, var.sqrt())
        })
        .collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(AttentionSummary {
        query,
        key,
        ranking: ranking.into_iter().map(|(i, s)| (key_names[i].clone(), s)).collect(),
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
