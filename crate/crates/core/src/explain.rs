//! Shapley attribution of one prediction over grouped inputs: individual
//! note words, individual measured analytes, and the demographics.
//!
//! A group that is "absent" from a coalition is replaced by its baseline:
//! `[UNK]` for note tokens, unmeasured for analytes, unknown sex at the
//! training mean age for demographics.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::catalog::{self, N_ANALYTES};
use crate::model::{
    forward_from_parts, modality_tokens, text_attention_scores, text_rows, FusedRepresentation, Model, ModelInput,
};
use crate::params::DEMO_INPUT;
use crate::record::{Disease, PatientRecord, HORIZON_DAYS};
use crate::shapley::{exact_shapley, sampled_shapley, MAX_EXACT_PLAYERS};
use crate::vocab::{TokenSequence, EMPTY_ID, UNK_ID};
use crate::{Error, Prediction, Result};

/// Word groups individually attributed before the rest is pooled.
pub const MAX_TOKEN_GROUPS: usize = 12;
pub const DEFAULT_PERMUTATIONS: usize = 500;
pub const OTHER_TEXT: &str = "[OTHER-TEXT]";
pub const OTHER_LABS: &str = "[OTHER-LABS]";
pub const DEMOGRAPHICS: &str = "demographics";

const TEXT_CACHE_CAP: usize = 4096;
const SIDE_CACHE_CAP: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExplainTarget {
    Disease(Disease),
    /// Index into `HORIZON_DAYS`.
    Horizon(usize),
}

impl ExplainTarget {
    pub fn all() -> Vec<ExplainTarget> {
        Disease::ALL
            .iter()
            .map(|&d| ExplainTarget::Disease(d))
            .chain((0..HORIZON_DAYS.len()).map(ExplainTarget::Horizon))
            .collect()
    }

    pub fn value(self, pred: &Prediction) -> f64 {
        match self {
            ExplainTarget::Disease(d) => pred.risks.get(d),
            ExplainTarget::Horizon(j) => pred.horizons.p_onset_by[j],
        }
    }
}

impl fmt::Display for ExplainTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExplainTarget::Disease(d) => f.write_str(d.key()),
            ExplainTarget::Horizon(j) => write!(f, "horizon_{}", HORIZON_DAYS[*j]),
        }
    }
}

impl FromStr for ExplainTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(days) = s.strip_prefix("horizon_") {
            return HORIZON_DAYS
                .iter()
                .position(|h| h.to_string() == days)
                .map(ExplainTarget::Horizon)
                .ok_or_else(|| Error::invalid(format!("unknown horizon {s:?} (expected one of 90, 180, 270, 360)")));
        }
        s.parse::<Disease>().map(ExplainTarget::Disease)
    }
}

impl Serialize for ExplainTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExplainTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    TokenSpan,
    LabAnalyte,
    Demographic,
}

/// `indices` are token positions, analyte indices, or demographic input
/// slots, depending on `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    #[serde(rename = "group_name")]
    pub name: String,
    pub kind: GroupKind,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    #[serde(flatten)]
    pub group: FeatureGroup,
    /// Byte ranges of the group's words in the note (token groups only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spans: Vec<(usize, usize)>,
    pub phi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExplainMode {
    Exact,
    Sampled { permutations: usize, seed: u64 },
    /// Exact when every group fits under the enumeration cap, else sampled
    /// with the default budget.
    Auto,
}

impl FromStr for ExplainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(ExplainMode::Exact),
            "sampled" => Ok(ExplainMode::Sampled {
                permutations: DEFAULT_PERMUTATIONS,
                seed: 0,
            }),
            "auto" => Ok(ExplainMode::Auto),
            other => Err(Error::invalid(format!("unknown mode {other:?} (expected exact, sampled or auto)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub target: ExplainTarget,
    #[serde(rename = "baseline")]
    pub baseline_value: f64,
    pub prediction: f64,
    /// `"exact"` or `"sampled"`.
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutations: Option<usize>,
    /// Sorted by `|phi|`, largest first.
    pub attributions: Vec<Attribution>,
}

impl Explanation {
    pub fn phi_sum(&self) -> f64 {
        self.attributions.iter().map(|a| a.phi).sum()
    }

    pub fn find(&self, name: &str) -> Option<&Attribution> {
        self.attributions.iter().find(|a| a.group.name == name)
    }
}

fn head_mean_with_residual(heads: &[Array2<f64>]) -> Array2<f64> {
    let n = heads[0].nrows();
    let mut m = Array2::<f64>::eye(n) * 0.5;
    for h in heads {
        m.scaled_add(0.5 / heads.len() as f64, h);
    }
    m
}

/// Attention received by each note position, rolled out through both
/// attention layers: heads are averaged and each layer is mixed half-and-half
/// with the identity for its residual path; the fusion rows restricted to
/// the text columns are multiplied through the text layer and averaged over
/// query rows.
///
/// The fusion layer alone is a poor guide: the informative words reach the
/// fusion layer already spread over every text row by the text encoder.
pub fn token_attention(model: &Model, tokens: &[u32], fused: &FusedRepresentation) -> Result<Vec<f64>> {
    let l = tokens.len();
    if fused.attention_scores.is_empty() || fused.attention_scores[0].ncols() != l + 2 {
        return Err(Error::invalid("fusion attention does not match the token sequence"));
    }
    let text = head_mean_with_residual(&text_attention_scores(&model.params, tokens)?);
    let fusion = head_mean_with_residual(&fused.attention_scores);
    let rolled = fusion.slice(ndarray::s![.., ..l]).dot(&text);
    Ok(rolled
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty fusion sequence")
        .to_vec())
}

/// Candidate groups before budgeting: word types ranked by rolled-out
/// attention, measured analytes ranked by |z|.
struct Candidates {
    words: Vec<FeatureGroup>,
    analytes: Vec<FeatureGroup>,
}

fn candidates(model: &Model, record: &PatientRecord, seq: &TokenSequence, attention: &[f64]) -> Candidates {
    let mut by_id: HashMap<u32, (f64, Vec<usize>)> = HashMap::new();
    for (pos, &id) in seq.ids.iter().enumerate() {
        if id == UNK_ID || id == EMPTY_ID {
            continue;
        }
        let entry = by_id.entry(id).or_insert((f64::NEG_INFINITY, Vec::new()));
        entry.0 = entry.0.max(attention[pos]);
        entry.1.push(pos);
    }
    let mut ranked: Vec<(u32, f64, Vec<usize>)> = by_id.into_iter().map(|(id, (a, p))| (id, a, p)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2[0].cmp(&b.2[0])));

    let k = model.norm.n_analytes();
    let analyte_name = |i: usize| {
        if k == N_ANALYTES {
            catalog::name_of(i).to_string()
        } else {
            format!("lab_{i}")
        }
    };
    let mut analytes: Vec<(usize, f64)> = record
        .labs
        .measured()
        .map(|i| (i, model.norm.standardize(i, record.labs.get(i).expect("measured")).abs()))
        .collect();
    analytes.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let analytes: Vec<FeatureGroup> = analytes
        .into_iter()
        .map(|(i, _)| FeatureGroup {
            name: analyte_name(i),
            kind: GroupKind::LabAnalyte,
            indices: vec![i],
        })
        .collect();

    let words = ranked
        .into_iter()
        .map(|(id, _, positions)| {
            let word = model.vocab.token(id).unwrap_or("?").to_string();
            let name = if analytes.iter().any(|a| a.name == word) || word == DEMOGRAPHICS {
                format!("{word} (text)")
            } else {
                word
            };
            FeatureGroup {
                name,
                kind: GroupKind::TokenSpan,
                indices: positions,
            }
        })
        .collect();
    Candidates { words, analytes }
}

/// Keeps the first `keep` groups and pools the rest under `pool_name`.
fn keep_and_pool(groups: &[FeatureGroup], keep: usize, pool_name: &str, kind: GroupKind) -> Vec<FeatureGroup> {
    let keep = keep.min(groups.len());
    let mut out: Vec<FeatureGroup> = groups[..keep].to_vec();
    let mut rest: Vec<usize> = groups[keep..].iter().flat_map(|g| g.indices.iter().copied()).collect();
    if !rest.is_empty() {
        rest.sort_unstable();
        out.push(FeatureGroup {
            name: pool_name.to_string(),
            kind,
            indices: rest,
        });
    }
    out
}

fn group_count(words: usize, keep_words: usize, analytes: usize, keep_analytes: usize) -> usize {
    keep_words + usize::from(words > keep_words) + keep_analytes + usize::from(analytes > keep_analytes) + 1
}

/// Analyte groups, then demographics, then word groups. `cap` bounds the
/// total number of groups by alternately shrinking the larger of the word
/// and analyte sets (pooling the remainder).
fn assemble(c: &Candidates, cap: Option<usize>) -> Vec<FeatureGroup> {
    let (nw, na) = (c.words.len(), c.analytes.len());
    let mut kw = nw.min(MAX_TOKEN_GROUPS);
    let mut ka = na;
    if let Some(cap) = cap {
        while group_count(nw, kw, na, ka) > cap && kw + ka > 0 {
            if kw >= ka && kw > 0 {
                kw -= 1;
            } else {
                ka -= 1;
            }
        }
    }
    let mut groups = keep_and_pool(&c.analytes, ka, OTHER_LABS, GroupKind::LabAnalyte);
    groups.push(FeatureGroup {
        name: DEMOGRAPHICS.to_string(),
        kind: GroupKind::Demographic,
        indices: (0..DEMO_INPUT).collect(),
    });
    groups.extend(keep_and_pool(&c.words, kw, OTHER_TEXT, GroupKind::TokenSpan));
    groups
}

/// The coalition game for one record and target. Players before `n_side`
/// are analyte and demographic groups; the rest are word groups. Encoder
/// outputs are cached per sub-coalition of each side.
struct Game<'a> {
    model: &'a Model,
    target: ExplainTarget,
    groups: &'a [FeatureGroup],
    n_side: usize,
    full: ModelInput,
    baseline_demo: [f64; DEMO_INPUT],
    text_cache: HashMap<Vec<bool>, Array2<f64>>,
    side_cache: HashMap<Vec<bool>, (Array1<f64>, Array1<f64>)>,
    error: Option<Error>,
}

impl Game<'_> {
    fn ensure_side(&mut self, present: &[bool]) -> Result<()> {
        if self.side_cache.contains_key(present) {
            return Ok(());
        }
        let k = self.model.norm.n_analytes();
        let mut labs = self.full.labs.clone();
        let mut demo = self.full.demo;
        for (g, &on) in self.groups[..self.n_side].iter().zip(present) {
            if on {
                continue;
            }
            match g.kind {
                GroupKind::LabAnalyte => {
                    for &i in &g.indices {
                        labs[i] = 0.0;
                        labs[k + i] = 0.0;
                    }
                }
                GroupKind::Demographic => demo = self.baseline_demo,
                GroupKind::TokenSpan => unreachable!("word groups are not side players"),
            }
        }
        let out = modality_tokens(&self.model.params, &labs, &demo)?;
        if self.side_cache.len() >= SIDE_CACHE_CAP {
            self.side_cache.clear();
        }
        self.side_cache.insert(present.to_vec(), out);
        Ok(())
    }

    fn ensure_text(&mut self, present: &[bool]) -> Result<()> {
        if self.text_cache.contains_key(present) {
            return Ok(());
        }
        let mut tokens = self.full.tokens.clone();
        for (g, &on) in self.groups[self.n_side..].iter().zip(present) {
            if !on {
                for &pos in &g.indices {
                    tokens[pos] = UNK_ID;
                }
            }
        }
        let rows = text_rows(&self.model.params, &tokens)?;
        if self.text_cache.len() >= TEXT_CACHE_CAP {
            self.text_cache.clear();
        }
        self.text_cache.insert(present.to_vec(), rows);
        Ok(())
    }

    fn try_value(&mut self, coalition: &[bool]) -> Result<f64> {
        let (side, text) = coalition.split_at(self.n_side);
        self.ensure_side(side)?;
        self.ensure_text(text)?;
        let (lab, demo) = &self.side_cache[side];
        let rows = &self.text_cache[text];
        let pred = forward_from_parts(&self.model.params, rows, lab.view(), demo.view())?;
        Ok(self.target.value(&pred))
    }

    fn value(&mut self, coalition: &[bool]) -> f64 {
        match self.try_value(coalition) {
            Ok(v) => v,
            Err(e) => {
                self.error.get_or_insert(e);
                f64::NAN
            }
        }
    }
}

/// Feature groups for `record`, capped at `cap` groups when given.
pub fn feature_groups(model: &Model, record: &PatientRecord, cap: Option<usize>) -> Result<Vec<FeatureGroup>> {
    let seq = model.tokenize(&record.note);
    let pred = model.predict(record)?;
    let attention = token_attention(model, &seq.ids, &pred.fused)?;
    Ok(assemble(&candidates(model, record, &seq, &attention), cap))
}

pub fn explain_record(
    model: &Model,
    record: &PatientRecord,
    target: ExplainTarget,
    mode: ExplainMode,
) -> Result<Explanation> {
    if !model.is_trained() {
        return Err(Error::State("model has not been trained; explanations need a trained checkpoint".into()));
    }
    record.validate()?;
    let full = model.prepare(record)?;
    let seq = model.tokenize(&record.note);
    let pred = model.predict(record)?;
    let attention = token_attention(model, &seq.ids, &pred.fused)?;
    let cands = candidates(model, record, &seq, &attention);

    let uncapped = assemble(&cands, None);
    let (groups, mode) = match mode {
        ExplainMode::Exact => (assemble(&cands, Some(MAX_EXACT_PLAYERS)), mode),
        ExplainMode::Auto if uncapped.len() <= MAX_EXACT_PLAYERS => (uncapped, ExplainMode::Exact),
        ExplainMode::Auto => (
            uncapped,
            ExplainMode::Sampled {
                permutations: DEFAULT_PERMUTATIONS,
                seed: 0,
            },
        ),
        ExplainMode::Sampled { .. } => (uncapped, mode),
    };

    let n = groups.len();
    let n_side = groups.iter().take_while(|g| g.kind != GroupKind::TokenSpan).count();
    let mut game = Game {
        model,
        target,
        groups: &groups,
        n_side,
        full,
        baseline_demo: model.norm.baseline_demo(),
        text_cache: HashMap::new(),
        side_cache: HashMap::new(),
        error: None,
    };
    let baseline_value = game.value(&vec![false; n]);

    let (phi, stderr, mode_name, permutations) = match mode {
        ExplainMode::Sampled { permutations, seed } => {
            let s = sampled_shapley(n, |c| game.value(c), permutations, seed)?;
            let stderr = s.stderr.into_iter().map(Some).collect();
            (s.phi, stderr, "sampled", Some(s.permutations))
        }
        _ => (exact_shapley(n, |c| game.value(c))?, vec![None; n], "exact", None),
    };
    if let Some(e) = game.error.take() {
        return Err(e);
    }

    let mut attributions: Vec<Attribution> = groups
        .into_iter()
        .zip(phi)
        .zip(stderr)
        .map(|((group, phi), stderr)| {
            let spans = if group.kind == GroupKind::TokenSpan {
                group.indices.iter().map(|&p| seq.spans[p]).collect()
            } else {
                Vec::new()
            };
            Attribution {
                group,
                spans,
                phi,
                stderr,
            }
        })
        .collect();
    attributions.sort_by(|a, b| b.phi.abs().total_cmp(&a.phi.abs()));

    Ok(Explanation {
        target,
        baseline_value,
        prediction: target.value(&pred),
        mode: mode_name.to_string(),
        permutations,
        attributions,
    })
}
