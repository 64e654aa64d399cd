//! Synthetic preference worlds with controllable category and length bias,
//! plus the JSONL interchange format.
//!
//! A world draws a hidden weight vector `u` and gives each group its own
//! block of "quality" feature axes. Responses of group `g` vary with spread
//! `group_spreads[g]` on their own axes (and a small base spread elsewhere),
//! and carry the group's reward offset as a shift along group 0's quality
//! direction, so the offset is visible in feature space. The last feature is
//! a length channel `length / LENGTH_SCALE`. The latent reward is
//!
//! ```text
//! r*(y) = u . content(y) + length_bias_coeff * length(y)
//!       = u . noise(y) + offset[group] + length_bias_coeff * length(y)
//! ```
//!
//! Labels follow a Bradley-Terry draw at `preference_temperature`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::allocation::sigmoid;
use crate::error::{Error, Result};
use crate::models::{DpoPair, Prompt, PromptBank};

/// Schema version written to every JSONL record.
pub const SCHEMA_VERSION: u64 = 1;
/// Divisor mapping token counts onto the length feature channel.
pub const LENGTH_SCALE: f64 = 100.0;
/// Spread of a response on axes owned by other groups.
pub const BASE_SPREAD: f64 = 0.2;

const STREAM_WEIGHTS: u64 = 0;
const STREAM_PAIRS: u64 = 1;
const STREAM_POOLS: u64 = 2;
const STREAM_PROMPTS: u64 = 3;
const STREAM_HELDOUT: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_groups: usize,
    pub group_reward_offsets: Vec<f64>,
    pub group_spreads: Vec<f64>,
    pub group_mean_lengths: Vec<f64>,
    /// True-reward units per token.
    pub length_bias_coeff: f64,
    /// Total feature width, including the trailing length channel.
    pub feature_dim: usize,
    pub pairs_per_group: usize,
    /// 0 means noiseless labels.
    pub preference_temperature: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_groups: 2,
            group_reward_offsets: vec![0.0, -2.5],
            group_spreads: vec![1.0, 0.5],
            group_mean_lengths: vec![50.0, 50.0],
            length_bias_coeff: 0.0,
            feature_dim: 9,
            pairs_per_group: 5000,
            preference_temperature: 1.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.num_groups;
        if g == 0 {
            return Err(Error::invalid("world.num_groups", "must be >= 1"));
        }
        for (name, len) in [
            ("world.group_reward_offsets", self.group_reward_offsets.len()),
            ("world.group_spreads", self.group_spreads.len()),
            ("world.group_mean_lengths", self.group_mean_lengths.len()),
        ] {
            if len != g {
                return Err(Error::invalid(name, format!("length {len} != num_groups {g}")));
            }
        }
        if self.feature_dim < g + 1 {
            return Err(Error::invalid(
                "world.feature_dim",
                format!("must be >= num_groups + 1 = {}", g + 1),
            ));
        }
        if self.pairs_per_group == 0 {
            return Err(Error::invalid("world.pairs_per_group", "must be >= 1"));
        }
        if !(self.preference_temperature >= 0.0 && self.preference_temperature.is_finite()) {
            return Err(Error::invalid("world.preference_temperature", "must be finite and >= 0"));
        }
        if self.group_spreads.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("world.group_spreads", "entries must be > 0"));
        }
        if self.group_mean_lengths.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(Error::invalid("world.group_mean_lengths", "entries must be >= 0"));
        }
        if self.group_reward_offsets.iter().any(|o| !o.is_finite()) || !self.length_bias_coeff.is_finite() {
            return Err(Error::invalid("world.group_reward_offsets", "entries must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: u64,
    pub group_id: u32,
    pub chosen_features: Vec<f64>,
    pub rejected_features: Vec<f64>,
    pub chosen_length: u32,
    pub rejected_length: u32,
    /// Generator-side `r*(chosen) - r*(rejected)`; never serialized.
    #[serde(skip)]
    pub true_gap: Option<f64>,
    /// Unrecognized fields, carried through load/save untouched.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub group_id: u32,
    pub features: Vec<f64>,
    pub length: u32,
    pub true_reward: f64,
}

/// A best-of-N candidate pool, possibly mixing groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
}

/// Prompts with candidate sets and their labelled preference pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptWorld {
    pub bank: PromptBank,
    pub pairs: Vec<DpoPair>,
    pub true_rewards: Vec<Vec<f64>>,
}

/// A sampled world: config plus the hidden reward weights.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    config: WorldConfig,
    weights: Vec<f64>,
    shift_direction: Vec<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let g = config.num_groups;
        let content = config.feature_dim - 1;
        let mut rng = stream(config.seed, STREAM_WEIGHTS);
        let mut weights: Vec<f64> = (0..content).map(|_| rng.sample(StandardNormal)).collect();
        // Unit norm within each group's block of quality axes.
        for group in 0..g {
            let norm = (0..content)
                .filter(|j| j % g == group)
                .map(|j| weights[j] * weights[j])
                .sum::<f64>()
                .sqrt();
            for j in (0..content).filter(|j| j % g == group) {
                weights[j] /= norm;
            }
        }
        // Unit reward per unit shift: u . shift_direction = 1.
        let shift_direction = (0..content)
            .map(|j| if j % g == 0 { weights[j] } else { 0.0 })
            .collect();
        Ok(Self {
            config,
            weights,
            shift_direction,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Latent reward of a feature vector (length read from the length channel).
    pub fn true_reward(&self, features: &[f64]) -> f64 {
        let content = self.weights.len();
        let base: f64 = self.weights.iter().zip(&features[..content]).map(|(w, x)| w * x).sum();
        base + self.config.length_bias_coeff * LENGTH_SCALE * features[content]
    }

    fn true_reward_exact(&self, features: &[f64], length: u32) -> f64 {
        let content = self.weights.len();
        let base: f64 = self.weights.iter().zip(&features[..content]).map(|(w, x)| w * x).sum();
        base + self.config.length_bias_coeff * length as f64
    }

    fn sample_response(&self, group: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, u32) {
        let cfg = &self.config;
        let g = cfg.num_groups;
        let content = self.weights.len();
        let offset = cfg.group_reward_offsets[group];
        let mut x = Vec::with_capacity(cfg.feature_dim);
        for j in 0..content {
            let spread = if j % g == group { cfg.group_spreads[group] } else { BASE_SPREAD };
            let eps: f64 = rng.sample(StandardNormal);
            x.push(spread * eps + offset * self.shift_direction[j]);
        }
        let mean = cfg.group_mean_lengths[group];
        let length = if mean == 0.0 {
            0
        } else {
            let geo = Geometric::new(1.0 / (mean + 1.0)).expect("valid geometric parameter");
            geo.sample(rng).min(u32::MAX as u64) as u32
        };
        x.push(length as f64 / LENGTH_SCALE);
        (x, length)
    }

    /// Returns true if the first response should be labelled chosen.
    fn label_first(&self, gap: f64, rng: &mut ChaCha8Rng) -> bool {
        let t = self.config.preference_temperature;
        let u: f64 = rng.random();
        if t == 0.0 {
            gap >= 0.0
        } else {
            u < sigmoid(gap / t)
        }
    }

    pub fn candidate(&self, group: usize, rng: &mut ChaCha8Rng) -> Candidate {
        let (features, length) = self.sample_response(group, rng);
        let true_reward = self.true_reward_exact(&features, length);
        Candidate {
            group_id: group as u32,
            features,
            length,
            true_reward,
        }
    }

    /// Deterministic preference dataset: `pairs_per_group` pairs per group,
    /// interleaved across groups.
    pub fn generate_pairs(&self) -> Vec<PreferencePair> {
        self.pairs_from_stream(STREAM_PAIRS, self.config.pairs_per_group)
    }

    /// Pairs from the same world on an independent random stream, for
    /// held-out evaluation.
    pub fn generate_heldout_pairs(&self, pairs_per_group: usize) -> Vec<PreferencePair> {
        self.pairs_from_stream(STREAM_HELDOUT, pairs_per_group)
    }

    fn pairs_from_stream(&self, id: u64, pairs_per_group: usize) -> Vec<PreferencePair> {
        let cfg = &self.config;
        let mut rng = stream(cfg.seed, id);
        let mut out = Vec::with_capacity(pairs_per_group * cfg.num_groups);
        for _ in 0..pairs_per_group {
            for group in 0..cfg.num_groups {
                let (x1, l1) = self.sample_response(group, &mut rng);
                let (x2, l2) = self.sample_response(group, &mut rng);
                let gap = self.true_reward_exact(&x1, l1) - self.true_reward_exact(&x2, l2);
                let (c, cl, r, rl, tg) = if self.label_first(gap, &mut rng) {
                    (x1, l1, x2, l2, gap)
                } else {
                    (x2, l2, x1, l1, -gap)
                };
                out.push(PreferencePair {
                    pair_id: out.len() as u64,
                    group_id: group as u32,
                    chosen_features: c,
                    rejected_features: r,
                    chosen_length: cl,
                    rejected_length: rl,
                    true_gap: Some(tg),
                    extra: BTreeMap::new(),
                });
            }
        }
        out
    }

    /// Best-of-N pools whose candidates draw their group uniformly.
    pub fn generate_pools(&self, num_pools: usize, pool_size: usize) -> Vec<CandidatePool> {
        let mut rng = stream(self.config.seed, STREAM_POOLS);
        (0..num_pools)
            .map(|_| CandidatePool {
                candidates: (0..pool_size)
                    .map(|_| {
                        let group = rng.random_range(0..self.config.num_groups);
                        self.candidate(group, &mut rng)
                    })
                    .collect(),
            })
            .collect()
    }

    /// Prompts with `k` same-group candidates each and `pairs_per_prompt`
    /// labelled candidate pairs, `prompts_per_group` prompts per group.
    pub fn generate_prompt_world(
        &self,
        prompts_per_group: usize,
        k: usize,
        pairs_per_prompt: usize,
    ) -> Result<PromptWorld> {
        if k < 2 {
            return Err(Error::invalid("candidates_per_prompt", "must be >= 2"));
        }
        let mut rng = stream(self.config.seed, STREAM_PROMPTS);
        let mut bank = PromptBank::default();
        let mut pairs = Vec::new();
        let mut true_rewards = Vec::new();
        for _ in 0..prompts_per_group {
            for group in 0..self.config.num_groups {
                let cands: Vec<Candidate> = (0..k).map(|_| self.candidate(group, &mut rng)).collect();
                let prompt = bank.prompts.len();
                for _ in 0..pairs_per_prompt {
                    let a = rng.random_range(0..k);
                    let mut b = rng.random_range(0..k - 1);
                    if b >= a {
                        b += 1;
                    }
                    let gap = cands[a].true_reward - cands[b].true_reward;
                    let (chosen, rejected) = if self.label_first(gap, &mut rng) { (a, b) } else { (b, a) };
                    pairs.push(DpoPair {
                        prompt,
                        chosen,
                        rejected,
                        group_id: group as u32,
                    });
                }
                true_rewards.push(cands.iter().map(|c| c.true_reward).collect());
                bank.prompts.push(Prompt {
                    group_id: group as u32,
                    candidates: cands.into_iter().map(|c| c.features).collect(),
                });
            }
        }
        Ok(PromptWorld {
            bank,
            pairs,
            true_rewards,
        })
    }
}

/// Shortcut for `World::new(config)?.generate_pairs()`.
pub fn generate_world(config: &WorldConfig) -> Result<Vec<PreferencePair>> {
    Ok(World::new(config.clone())?.generate_pairs())
}

impl PromptBank {
    /// One two-candidate prompt per preference pair: `[chosen, rejected]`.
    pub fn from_pairs(pairs: &[PreferencePair]) -> (PromptBank, Vec<DpoPair>) {
        let bank = PromptBank {
            prompts: pairs
                .iter()
                .map(|p| Prompt {
                    group_id: p.group_id,
                    candidates: vec![p.chosen_features.clone(), p.rejected_features.clone()],
                })
                .collect(),
        };
        let dpo = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| DpoPair {
                prompt: i,
                chosen: 0,
                rejected: 1,
                group_id: p.group_id,
            })
            .collect();
        (bank, dpo)
    }
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", format!("{} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn to_record(pair: &PreferencePair) -> Result<Value> {
    let mut v = serde_json::to_value(pair)?;
    if let Value::Object(m) = &mut v {
        m.insert("v".into(), Value::from(SCHEMA_VERSION));
    }
    Ok(v)
}

pub fn to_jsonl(dataset: &[PreferencePair]) -> Result<String> {
    let mut out = String::new();
    for pair in dataset {
        out.push_str(&serde_json::to_string(&to_record(pair)?)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_jsonl(dataset: &[PreferencePair], path: &Path) -> Result<()> {
    write_atomic(path, to_jsonl(dataset)?.as_bytes())
}

/// Reads one JSON object per non-blank line, checking the schema version.
fn read_records(path: &Path) -> Result<Vec<(usize, Map<String, Value>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let Value::Object(mut map) = value else {
            return Err(parse_err("expected a JSON object".into()));
        };
        if let Some(v) = map.remove("v") {
            if v.as_u64() != Some(SCHEMA_VERSION) {
                return Err(parse_err(format!("unsupported schema version {v}")));
            }
        }
        out.push((line_no, map));
    }
    Ok(out)
}

fn take_field<T: serde::de::DeserializeOwned>(
    map: &mut Map<String, Value>,
    field: &str,
    path: &Path,
    line: usize,
) -> Result<T> {
    let v = map.remove(field).ok_or_else(|| Error::MissingField {
        path: path.to_path_buf(),
        line,
        field: field.into(),
    })?;
    serde_json::from_value(v).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("field `{field}`: {e}"),
    })
}

pub fn load_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    read_records(path)?
        .into_iter()
        .map(|(line, mut m)| {
            Ok(PreferencePair {
                pair_id: take_field(&mut m, "pair_id", path, line)?,
                group_id: take_field(&mut m, "group_id", path, line)?,
                chosen_features: take_field(&mut m, "chosen_features", path, line)?,
                rejected_features: take_field(&mut m, "rejected_features", path, line)?,
                chosen_length: take_field(&mut m, "chosen_length", path, line)?,
                rejected_length: take_field(&mut m, "rejected_length", path, line)?,
                true_gap: None,
                extra: m.into_iter().collect(),
            })
        })
        .collect()
}

/// An externally scored preference pair, as consumed by the audit path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub group_id: u32,
    pub chosen_score: f64,
    pub rejected_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_length: Option<u32>,
}

/// Loads `{group_id, chosen_score, rejected_score}` records; other fields
/// (apart from an optional `chosen_length`) are ignored.
pub fn load_scored_pairs(path: &Path) -> Result<Vec<ScoredPair>> {
    read_records(path)?
        .into_iter()
        .map(|(line, mut m)| {
            let chosen_length = match m.remove("chosen_length") {
                None | Some(Value::Null) => None,
                Some(v) => Some(serde_json::from_value(v).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("field `chosen_length`: {e}"),
                })?),
            };
            Ok(ScoredPair {
                group_id: take_field(&mut m, "group_id", path, line)?,
                chosen_score: take_field(&mut m, "chosen_score", path, line)?,
                rejected_score: take_field(&mut m, "rejected_score", path, line)?,
                chosen_length,
            })
        })
        .collect()
}

pub fn save_scored_pairs(pairs: &[ScoredPair], path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        let mut v = serde_json::to_value(p)?;
        if let Value::Object(m) = &mut v {
            m.insert("v".into(), Value::from(SCHEMA_VERSION));
        }
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
