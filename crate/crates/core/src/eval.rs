//! Evaluation: pairwise accuracy, per-group reward statistics, a group
//! fairness summary (Jain's index over per-group mean positivized gaps),
//! best-of-N selection behaviour, and CSV/JSON report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocation::positivize;
use crate::datagen::{write_atomic, CandidatePool, PreferencePair, ScoredPair, World};
use crate::error::{Error, Result};
use crate::fairness::{jain_index, FairnessSpec};
use crate::models::RewardNet;

/// Anything that maps a feature vector to a scalar reward.
pub trait RewardScorer {
    fn score(&self, features: &[f64]) -> Result<f64>;
}

impl RewardScorer for RewardNet {
    fn score(&self, features: &[f64]) -> Result<f64> {
        self.forward(features)
    }
}

/// The generator's latent reward, used as an oracle model.
impl RewardScorer for World {
    fn score(&self, features: &[f64]) -> Result<f64> {
        let dim = self.config().feature_dim;
        if features.len() != dim {
            return Err(Error::Dimension {
                context: "oracle scorer input",
                expected: dim,
                actual: features.len(),
            });
        }
        Ok(self.true_reward(features))
    }
}

impl<F: Fn(&[f64]) -> f64> RewardScorer for F {
    fn score(&self, features: &[f64]) -> Result<f64> {
        Ok(self(features))
    }
}

pub fn score_pairs(model: &dyn RewardScorer, dataset: &[PreferencePair]) -> Result<Vec<ScoredPair>> {
    dataset
        .iter()
        .map(|p| {
            Ok(ScoredPair {
                group_id: p.group_id,
                chosen_score: model.score(&p.chosen_features)?,
                rejected_score: model.score(&p.rejected_features)?,
                chosen_length: Some(p.chosen_length),
            })
        })
        .collect()
}

fn tie_accuracy(scored: &[ScoredPair]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::invalid("dataset", "cannot evaluate an empty dataset"));
    }
    let hits: f64 = scored
        .iter()
        .map(|s| {
            let gap = s.chosen_score - s.rejected_score;
            if gap > 0.0 {
                1.0
            } else if gap == 0.0 {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(hits / scored.len() as f64)
}

/// Fraction of pairs ranked correctly; ties count one half.
pub fn pairwise_accuracy(model: &dyn RewardScorer, dataset: &[PreferencePair]) -> Result<f64> {
    tie_accuracy(&score_pairs(model, dataset)?)
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group_id: u32,
    pub n: usize,
    pub mean_gap: f64,
    pub std_gap: f64,
    /// Gap quantiles at [`QUANTILE_LEVELS`].
    pub quantiles: [f64; 5],
    pub mean_chosen_reward: f64,
    pub mean_rejected_reward: f64,
    pub mean_positivized_gap: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Statistics per group present in `scored`, in ascending group order.
/// Groups without pairs do not appear.
pub fn group_reward_stats(scored: &[ScoredPair], spec: &FairnessSpec) -> Result<Vec<GroupStats>> {
    let mut by_group: BTreeMap<u32, Vec<&ScoredPair>> = BTreeMap::new();
    for s in scored {
        by_group.entry(s.group_id).or_default().push(s);
    }
    by_group
        .into_iter()
        .map(|(group_id, pairs)| {
            let gaps: Vec<f64> = pairs.iter().map(|p| p.chosen_score - p.rejected_score).collect();
            let chosen: Vec<f64> = pairs.iter().map(|p| p.chosen_score).collect();
            let rejected: Vec<f64> = pairs.iter().map(|p| p.rejected_score).collect();
            let m = mean(&gaps);
            let var = gaps.iter().map(|g| (g - m) * (g - m)).sum::<f64>() / gaps.len() as f64;
            let mut sorted = gaps.clone();
            sorted.sort_by(f64::total_cmp);
            let quantiles = QUANTILE_LEVELS.map(|q| quantile(&sorted, q));
            let positive = positivize(&gaps, spec)?;
            Ok(GroupStats {
                group_id,
                n: gaps.len(),
                mean_gap: m,
                std_gap: var.sqrt(),
                quantiles,
                mean_chosen_reward: mean(&chosen),
                mean_rejected_reward: mean(&rejected),
                mean_positivized_gap: mean(positive.as_slice()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupFairness {
    pub index: f64,
    /// Set when fewer than two groups were present.
    pub degenerate: bool,
}

/// Jain's index over the per-group mean positivized gaps.
pub fn group_fairness_index(stats: &[GroupStats]) -> Result<GroupFairness> {
    if stats.is_empty() {
        return Err(Error::invalid("groups", "no groups present"));
    }
    if stats.len() == 1 {
        return Ok(GroupFairness {
            index: 1.0,
            degenerate: true,
        });
    }
    let means: Vec<f64> = stats.iter().map(|s| s.mean_positivized_gap).collect();
    Ok(GroupFairness {
        index: jain_index(&means)?,
        degenerate: false,
    })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation between chosen reward and chosen length, if lengths are known.
pub fn length_correlation(scored: &[ScoredPair]) -> Option<f64> {
    let (scores, lengths): (Vec<f64>, Vec<f64>) = scored
        .iter()
        .map(|s| s.chosen_length.map(|l| (s.chosen_score, l as f64)))
        .collect::<Option<Vec<_>>>()?
        .into_iter()
        .unzip();
    pearson(&scores, &lengths)
}

pub const EVAL_SCHEMA: &str = "fairpref-eval";
pub const BON_SCHEMA: &str = "fairpref-bon";
pub const REPORT_VERSION: u32 = 1;
/// How `group_fairness_index` is summarized.
pub const GROUP_FAIRNESS_LABEL: &str = "jain_over_group_mean_positivized_gaps";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub version: u32,
    pub n_pairs: usize,
    pub pairwise_accuracy: f64,
    pub group_fairness_index: f64,
    pub group_fairness_label: String,
    pub group_fairness_degenerate: bool,
    pub length_correlation: Option<f64>,
    pub per_group: Vec<GroupStats>,
}

/// Full report from already-scored pairs (model outputs or external scores).
pub fn report_from_scores(scored: &[ScoredPair], spec: &FairnessSpec) -> Result<EvalReport> {
    let accuracy = tie_accuracy(scored)?;
    let per_group = group_reward_stats(scored, spec)?;
    let fairness = group_fairness_index(&per_group)?;
    Ok(EvalReport {
        schema: EVAL_SCHEMA.into(),
        version: REPORT_VERSION,
        n_pairs: scored.len(),
        pairwise_accuracy: accuracy,
        group_fairness_index: fairness.index,
        group_fairness_label: GROUP_FAIRNESS_LABEL.into(),
        group_fairness_degenerate: fairness.degenerate,
        length_correlation: length_correlation(scored),
        per_group,
    })
}

pub fn evaluate_model(model: &dyn RewardScorer, dataset: &[PreferencePair], spec: &FairnessSpec) -> Result<EvalReport> {
    report_from_scores(&score_pairs(model, dataset)?, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonRow {
    pub n: usize,
    pub mean_true_reward: f64,
    /// Share of selections from each group id `0..num_groups`.
    pub group_shares: Vec<f64>,
    /// Natural-log entropy of `group_shares`.
    pub share_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonReport {
    pub schema: String,
    pub version: u32,
    pub num_pools: usize,
    pub rows: Vec<BonRow>,
}

pub fn entropy(shares: &[f64]) -> f64 {
    -shares.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Index of the highest-scoring candidate among the first `n`; ties keep the
/// lowest index.
pub fn select_best(scores: &[f64], n: usize) -> usize {
    let mut best = 0;
    for i in 1..n {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

/// Best-of-N selection over each pool for every `n` in `n_values`.
pub fn best_of_n(
    model: &dyn RewardScorer,
    pools: &[CandidatePool],
    n_values: &[usize],
    num_groups: usize,
) -> Result<BonReport> {
    if pools.is_empty() {
        return Err(Error::invalid("pools", "no candidate pools"));
    }
    let max_n = n_values.iter().copied().max().unwrap_or(0);
    if n_values.contains(&0) {
        return Err(Error::invalid("n_values", "n must be >= 1"));
    }
    let mut scores = Vec::with_capacity(pools.len());
    for (i, pool) in pools.iter().enumerate() {
        if pool.candidates.len() < max_n {
            return Err(Error::invalid(
                "pools",
                format!("pool {i} has {} candidates, need {max_n}", pool.candidates.len()),
            ));
        }
        let s: Vec<f64> = pool.candidates[..max_n]
            .iter()
            .map(|c| model.score(&c.features))
            .collect::<Result<_>>()?;
        scores.push(s);
    }
    let rows = n_values
        .iter()
        .map(|&n| {
            let mut counts = vec![0usize; num_groups];
            let mut reward = 0.0;
            for (pool, s) in pools.iter().zip(&scores) {
                let pick = &pool.candidates[select_best(s, n)];
                let g = pick.group_id as usize;
                if g >= num_groups {
                    return Err(Error::invalid("group_id", format!("{g} >= num_groups {num_groups}")));
                }
                counts[g] += 1;
                reward += pick.true_reward;
            }
            let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / pools.len() as f64).collect();
            Ok(BonRow {
                n,
                mean_true_reward: reward / pools.len() as f64,
                share_entropy: entropy(&shares),
                group_shares: shares,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BonReport {
        schema: BON_SCHEMA.into(),
        version: REPORT_VERSION,
        num_pools: pools.len(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::invalid("--format", format!("expected csv or json, got `{other}`"))),
        }
    }
}

/// A report with stable CSV and JSON encodings.
pub trait Report: Sized + Serialize + serde::de::DeserializeOwned {
    fn to_csv(&self) -> String;
    fn from_csv(text: &str) -> Result<Self>;

    fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => Ok(self.to_csv()),
            ReportFormat::Json => self.to_json(),
        }
    }
}

/// Write a report atomically in the requested format.
pub fn emit_report<R: Report>(report: &R, path: &Path, format: ReportFormat) -> Result<()> {
    write_atomic(path, report.render(format)?.as_bytes())
}

/// Header of the long-format evaluation CSV.
pub const EVAL_CSV_HEADER: &str = "metric,group_id,value";
/// Header of the best-of-N CSV.
pub const BON_CSV_HEADER: &str = "n,metric,group_id,value";

const GROUP_METRICS: [&str; 10] = [
    "mean_gap",
    "std_gap",
    "q05",
    "q25",
    "q50",
    "q75",
    "q95",
    "mean_chosen_reward",
    "mean_rejected_reward",
    "mean_positivized_gap",
];

fn csv_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: "<csv>".into(),
        line,
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| csv_err(line, format!("bad number `{s}`")))
}

impl Report for EvalReport {
    fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{EVAL_CSV_HEADER}");
        let _ = writeln!(out, "schema,,{}", self.schema);
        let _ = writeln!(out, "version,,{}", self.version);
        let _ = writeln!(out, "n_pairs,,{}", self.n_pairs);
        let _ = writeln!(out, "pairwise_accuracy,,{}", self.pairwise_accuracy);
        let _ = writeln!(out, "group_fairness_index,,{}", self.group_fairness_index);
        let _ = writeln!(out, "group_fairness_label,,{}", self.group_fairness_label);
        let _ = writeln!(out, "group_fairness_degenerate,,{}", self.group_fairness_degenerate);
        match self.length_correlation {
            Some(r) => {
                let _ = writeln!(out, "length_correlation,,{r}");
            }
            None => {
                let _ = writeln!(out, "length_correlation,,");
            }
        }
        for g in &self.per_group {
            let id = g.group_id;
            let values = [
                g.mean_gap,
                g.std_gap,
                g.quantiles[0],
                g.quantiles[1],
                g.quantiles[2],
                g.quantiles[3],
                g.quantiles[4],
                g.mean_chosen_reward,
                g.mean_rejected_reward,
                g.mean_positivized_gap,
            ];
            let _ = writeln!(out, "n,{id},{}", g.n);
            for (name, v) in GROUP_METRICS.iter().zip(values) {
                let _ = writeln!(out, "{name},{id},{v}");
            }
        }
        out
    }

    fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == EVAL_CSV_HEADER => {}
            _ => return Err(csv_err(1, "missing or unexpected header")),
        }
        let mut scalars: BTreeMap<String, String> = BTreeMap::new();
        let mut groups: BTreeMap<u32, BTreeMap<String, String>> = BTreeMap::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let mut parts = line.splitn(3, ',');
            let (Some(metric), Some(group), Some(value)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(csv_err(line_no, "expected 3 columns"));
            };
            if group.is_empty() {
                scalars.insert(metric.into(), value.into());
            } else {
                groups
                    .entry(parse_num(group, line_no)?)
                    .or_default()
                    .insert(metric.into(), value.into());
            }
        }
        let get = |k: &str| scalars.get(k).ok_or_else(|| csv_err(0, format!("missing `{k}`")));
        let per_group = groups
            .into_iter()
            .map(|(group_id, m)| {
                let f = |k: &str| -> Result<f64> {
                    parse_num(m.get(k).ok_or_else(|| csv_err(0, format!("group {group_id}: missing `{k}`")))?, 0)
                };
                Ok(GroupStats {
                    group_id,
                    n: parse_num(m.get("n").ok_or_else(|| csv_err(0, "missing group `n`"))?, 0)?,
                    mean_gap: f("mean_gap")?,
                    std_gap: f("std_gap")?,
                    quantiles: [f("q05")?, f("q25")?, f("q50")?, f("q75")?, f("q95")?],
                    mean_chosen_reward: f("mean_chosen_reward")?,
                    mean_rejected_reward: f("mean_rejected_reward")?,
                    mean_positivized_gap: f("mean_positivized_gap")?,
                })
            })
            .collect::<Result<_>>()?;
        let lc = get("length_correlation")?;
        Ok(EvalReport {
            schema: get("schema")?.clone(),
            version: parse_num(get("version")?, 0)?,
            n_pairs: parse_num(get("n_pairs")?, 0)?,
            pairwise_accuracy: parse_num(get("pairwise_accuracy")?, 0)?,
            group_fairness_index: parse_num(get("group_fairness_index")?, 0)?,
            group_fairness_label: get("group_fairness_label")?.clone(),
            group_fairness_degenerate: parse_num(get("group_fairness_degenerate")?, 0)?,
            length_correlation: if lc.is_empty() { None } else { Some(parse_num(lc, 0)?) },
            per_group,
        })
    }
}

impl Report for BonReport {
    fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{BON_CSV_HEADER}");
        let _ = writeln!(out, ",schema,,{}", self.schema);
        let _ = writeln!(out, ",version,,{}", self.version);
        let _ = writeln!(out, ",num_pools,,{}", self.num_pools);
        for r in &self.rows {
            let _ = writeln!(out, "{},mean_true_reward,,{}", r.n, r.mean_true_reward);
            let _ = writeln!(out, "{},share_entropy,,{}", r.n, r.share_entropy);
            for (g, s) in r.group_shares.iter().enumerate() {
                let _ = writeln!(out, "{},group_share,{g},{s}", r.n);
            }
        }
        out
    }

    fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == BON_CSV_HEADER => {}
            _ => return Err(csv_err(1, "missing or unexpected header")),
        }
        let mut report = BonReport {
            schema: String::new(),
            version: 0,
            num_pools: 0,
            rows: Vec::new(),
        };
        for (i, line) in lines {
            let line_no = i + 1;
            let cols: Vec<&str> = line.splitn(4, ',').collect();
            let [n, metric, group, value] = cols[..] else {
                return Err(csv_err(line_no, "expected 4 columns"));
            };
            if n.is_empty() {
                match metric {
                    "schema" => report.schema = value.into(),
                    "version" => report.version = parse_num(value, line_no)?,
                    "num_pools" => report.num_pools = parse_num(value, line_no)?,
                    other => return Err(csv_err(line_no, format!("unknown metric `{other}`"))),
                }
                continue;
            }
            let n: usize = parse_num(n, line_no)?;
            if report.rows.last().map(|r| r.n) != Some(n) {
                report.rows.push(BonRow {
                    n,
                    mean_true_reward: 0.0,
                    group_shares: Vec::new(),
                    share_entropy: 0.0,
                });
            }
            let row = report.rows.last_mut().expect("row pushed");
            match metric {
                "mean_true_reward" => row.mean_true_reward = parse_num(value, line_no)?,
                "share_entropy" => row.share_entropy = parse_num(value, line_no)?,
                "group_share" => {
                    let g: usize = parse_num(group, line_no)?;
                    if g != row.group_shares.len() {
                        return Err(csv_err(line_no, "group shares out of order"));
                    }
                    row.group_shares.push(parse_num(value, line_no)?);
                }
                other => return Err(csv_err(line_no, format!("unknown metric `{other}`"))),
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(group_id: u32, c: f64, r: f64) -> ScoredPair {
        ScoredPair {
            group_id,
            chosen_score: c,
            rejected_score: r,
            chosen_length: None,
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert!((quantile(&s, 0.05) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn group_fairness_cases() {
        let spec = FairnessSpec::default();
        let same = [sp(0, 1.0, 0.0), sp(1, 3.0, 2.0)];
        let stats = group_reward_stats(&same, &spec).unwrap();
        assert!((group_fairness_index(&stats).unwrap().index - 1.0).abs() < 1e-15);

        let mut a = stats[0].clone();
        let mut b = stats[1].clone();
        a.mean_positivized_gap = 1.0;
        b.mean_positivized_gap = 3.0;
        assert!((group_fairness_index(&[a.clone(), b]).unwrap().index - 0.8).abs() < 1e-12);

        let single = group_fairness_index(&[a]).unwrap();
        assert_eq!(single.index, 1.0);
        assert!(single.degenerate);
        assert!(group_fairness_index(&[]).is_err());
    }

    #[test]
    fn absent_groups_are_omitted() {
        let stats = group_reward_stats(&[sp(0, 1.0, 0.0), sp(3, 1.0, 0.5)], &FairnessSpec::default()).unwrap();
        assert_eq!(stats.iter().map(|s| s.group_id).collect::<Vec<_>>(), vec![0, 3]);
    }

    #[test]
    fn tie_rule() {
        assert_eq!(tie_accuracy(&[sp(0, 1.0, 1.0), sp(0, 2.0, 1.0)]).unwrap(), 0.75);
        assert!(tie_accuracy(&[]).is_err());
    }

    #[test]
    fn select_best_prefers_lowest_index_on_ties() {
        assert_eq!(select_best(&[1.0, 3.0, 3.0, 2.0], 4), 1);
        assert_eq!(select_best(&[1.0, 3.0, 3.0, 2.0], 1), 0);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn format_parsing() {
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
