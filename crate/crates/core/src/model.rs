//! Forward and reverse passes of the fusion network.
//!
//! Text pathway: token embedding + sinusoidal positions, one residual
//! multi-head self-attention block and one residual tanh feed-forward block.
//! Lab pathway: standardized values with a presence mask through two tanh
//! layers and a linear projection to one "lab token". Demographics project
//! linearly to one "demo token". Fusion runs one residual multi-head
//! self-attention over `[text rows; lab token; demo token]`, mean-pools, and
//! feeds two linear heads: three independent disease sigmoids and four
//! per-interval onset hazards composed into cumulative risk.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::loss::{self, ClassWeights};
use crate::params::{ModelConfig, ModelParams, DEMO_INPUT};
use crate::record::{Demographics, DiseaseLabels, HorizonRisks, LabPanel, PatientRecord, RiskScores, Sex};
use crate::vocab::{TokenSequence, Vocabulary};
use crate::{Error, Result};

/// Everything the network consumes for one patient, already tokenized and
/// standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<u32>,
    /// `2K` values: standardized analytes (0 where unmeasured) then the mask bits.
    pub labs: Vec<f64>,
    pub demo: [f64; DEMO_INPUT],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    pub pooled: Array1<f64>,
    /// One `(L+2) × (L+2)` row-stochastic matrix per head.
    pub attention_scores: Vec<Array2<f64>>,
}

impl FusedRepresentation {
    /// Mean attention each sequence position receives, averaged over heads
    /// and query rows.
    pub fn attention_received(&self) -> Vec<f64> {
        let rows = self.attention_scores.first().map_or(0, |a| a.nrows());
        let mut received = vec![0.0; rows];
        let denom = (self.attention_scores.len() * rows.max(1)) as f64;
        for a in &self.attention_scores {
            for (j, col) in a.columns().into_iter().enumerate() {
                received[j] += col.sum() / denom;
            }
        }
        received
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub risks: RiskScores,
    pub horizons: HorizonRisks,
    pub fused: FusedRepresentation,
}

/// Per-analyte standardization frozen from the training cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Analytes with (near) zero spread in training; they standardize to 0.
    pub constant: Vec<bool>,
    pub age_mean: f64,
}

impl NormStats {
    pub fn fit(records: &[PatientRecord], n_analytes: usize) -> Result<Self> {
        let mut means = vec![0.0; n_analytes];
        let mut stds = vec![1.0; n_analytes];
        let mut constant = vec![true; n_analytes];
        for k in 0..n_analytes {
            let mut vals = Vec::new();
            for r in records {
                if r.labs.len() != n_analytes {
                    return Err(Error::invalid(format!(
                        "patient {} has {} analytes, expected {n_analytes}",
                        r.patient_id,
                        r.labs.len()
                    )));
                }
                if let Some(v) = r.labs.get(k) {
                    vals.push(v);
                }
            }
            if vals.is_empty() {
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            means[k] = mean;
            if var.sqrt() > 1e-9 {
                stds[k] = var.sqrt();
                constant[k] = false;
            }
        }
        let age_mean = if records.is_empty() {
            50.0
        } else {
            records.iter().map(|r| r.demo.age as f64).sum::<f64>() / records.len() as f64
        };
        Ok(NormStats {
            means,
            stds,
            constant,
            age_mean,
        })
    }

    pub fn n_analytes(&self) -> usize {
        self.means.len()
    }

    pub fn standardize(&self, k: usize, value: f64) -> f64 {
        if self.constant[k] {
            0.0
        } else {
            (value - self.means[k]) / self.stds[k]
        }
    }

    /// `[standardized values (0 if unmeasured) | mask bits]`.
    pub fn lab_input(&self, labs: &LabPanel) -> Result<Vec<f64>> {
        let k = self.n_analytes();
        if labs.len() != k {
            return Err(Error::invalid(format!(
                "lab panel has {} analytes, model expects {k}",
                labs.len()
            )));
        }
        let mut x = vec![0.0; 2 * k];
        for i in labs.measured() {
            let v = labs.get(i).expect("measured");
            if !v.is_finite() {
                return Err(Error::invalid(format!("analyte {i} is not finite")));
            }
            x[i] = self.standardize(i, v);
            x[k + i] = 1.0;
        }
        Ok(x)
    }

    pub fn demo_input(demo: &Demographics) -> [f64; DEMO_INPUT] {
        let [f, m, u] = demo.sex.one_hot();
        [f, m, u, demo.age as f64 / 100.0]
    }

    /// Demographic input with sex unknown and age at the training mean.
    pub fn baseline_demo(&self) -> [f64; DEMO_INPUT] {
        let [f, m, u] = Sex::Unknown.one_hot();
        [f, m, u, self.age_mean / 100.0]
    }
}

/// A trained (or freshly initialized) network together with the vocabulary
/// and normalization it was fitted with. Immutable; share freely.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub norm: NormStats,
    pub vocab: Vocabulary,
    pub trained_epochs: usize,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn is_trained(&self) -> bool {
        self.trained_epochs > 0
    }

    pub fn tokenize(&self, note: &str) -> TokenSequence {
        self.vocab.tokenize(note, self.config().max_len)
    }

    pub fn prepare(&self, record: &PatientRecord) -> Result<ModelInput> {
        record.demo.validate()?;
        Ok(ModelInput {
            tokens: self.tokenize(&record.note).ids,
            labs: self.norm.lab_input(&record.labs)?,
            demo: NormStats::demo_input(&record.demo),
        })
    }

    pub fn predict(&self, record: &PatientRecord) -> Result<Prediction> {
        forward(&self.params, &self.prepare(record)?)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cumulative onset risk from per-interval hazards:
/// `p_j = 1 - Π_{k<=j} (1 - h_k)`.
pub fn cumulative_risk(hazards: [f64; 4]) -> [f64; 4] {
    let mut survival = 1.0;
    let mut p = [0.0; 4];
    for (k, h) in hazards.iter().enumerate() {
        survival *= 1.0 - h;
        p[k] = 1.0 - survival;
    }
    p
}

/// Standard sinusoidal position signal.
pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct AttentionWeights<'a> {
    wq: &'a Array2<f64>,
    wk: &'a Array2<f64>,
    wv: &'a Array2<f64>,
    wo: &'a Array2<f64>,
    heads: usize,
}

struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
}

struct AttentionGrads {
    dx: Array2<f64>,
    dwq: Array2<f64>,
    dwk: Array2<f64>,
    dwv: Array2<f64>,
    dwo: Array2<f64>,
}

/// Residual multi-head scaled dot-product self-attention:
/// `y = x + concat_h(softmax(Q_h K_hᵀ / √d_h) V_h) · Wo`.
fn attention_forward(x: Array2<f64>, w: &AttentionWeights<'_>) -> (Array2<f64>, AttentionCache) {
    let (n, d) = x.dim();
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.dot(w.wq);
    let k = x.dot(w.wk);
    let v = x.dot(w.wv);
    let mut context = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|s| s * scale);
        softmax_rows(&mut scores);
        context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let y = &x + &context.dot(w.wo);
    (
        y,
        AttentionCache {
            x,
            q,
            k,
            v,
            probs,
            context,
        },
    )
}

fn attention_backward(c: &AttentionCache, w: &AttentionWeights<'_>, dy: &Array2<f64>) -> AttentionGrads {
    let (n, d) = c.x.dim();
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dwo = c.context.t().dot(dy);
    let dcontext = dy.dot(&w.wo.t());
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for (h, a) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx = dcontext.slice(cols);
        let da = dctx.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx));
        // Row-wise softmax Jacobian: dS = A ⊙ (dA - rowsum(dA ⊙ A)).
        let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = a * &(&da - &row_dot) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let dx = dy + &dq.dot(&w.wq.t()) + &dk.dot(&w.wk.t()) + &dv.dot(&w.wv.t());
    AttentionGrads {
        dwq: c.x.t().dot(&dq),
        dwk: c.x.t().dot(&dk),
        dwv: c.x.t().dot(&dv),
        dwo,
        dx,
    }
}

fn text_attention(p: &ModelParams) -> AttentionWeights<'_> {
    AttentionWeights {
        wq: &p.text_wq,
        wk: &p.text_wk,
        wv: &p.text_wv,
        wo: &p.text_wo,
        heads: p.config.heads,
    }
}

fn fusion_attention(p: &ModelParams) -> AttentionWeights<'_> {
    AttentionWeights {
        wq: &p.fuse_wq,
        wk: &p.fuse_wk,
        wv: &p.fuse_wv,
        wo: &p.fuse_wo,
        heads: p.config.heads,
    }
}

struct TextCache {
    ids: Vec<u32>,
    attn: AttentionCache,
    x1: Array2<f64>,
    h1: Array2<f64>,
}

fn check_tokens(ids: &[u32], config: &ModelConfig) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::invalid("token sequence is empty"));
    }
    if ids.len() > config.max_len {
        return Err(Error::invalid(format!(
            "token sequence of length {} exceeds max_len {}",
            ids.len(),
            config.max_len
        )));
    }
    if let Some(bad) = ids.iter().find(|id| **id as usize >= config.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn text_forward(ids: &[u32], p: &ModelParams) -> Result<(Array2<f64>, TextCache)> {
    check_tokens(ids, &p.config)?;
    let d = p.config.d_model;
    let mut x0 = positional_encoding(ids.len(), d);
    for (mut row, id) in x0.rows_mut().into_iter().zip(ids) {
        row += &p.token_embedding.row(*id as usize);
    }
    let (x1, attn) = attention_forward(x0, &text_attention(p));
    let mut h1 = x1.dot(&p.text_ff_w1) + &p.text_ff_b1;
    h1.mapv_inplace(f64::tanh);
    let x2 = &x1 + &(h1.dot(&p.text_ff_w2) + &p.text_ff_b2);
    Ok((
        x2,
        TextCache {
            ids: ids.to_vec(),
            attn,
            x1,
            h1,
        },
    ))
}

fn text_backward(c: &TextCache, p: &ModelParams, dx2: &Array2<f64>, g: &mut ModelParams) {
    g.text_ff_w2 += &c.h1.t().dot(dx2);
    g.text_ff_b2 += &dx2.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dh1 = dx2.dot(&p.text_ff_w2.t());
    let du = dh1 * &c.h1.mapv(|h| 1.0 - h * h);
    g.text_ff_w1 += &c.x1.t().dot(&du);
    g.text_ff_b1 += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dx1 = dx2 + &du.dot(&p.text_ff_w1.t());

    let ag = attention_backward(&c.attn, &text_attention(p), &dx1);
    g.text_wq += &ag.dwq;
    g.text_wk += &ag.dwk;
    g.text_wv += &ag.dwv;
    g.text_wo += &ag.dwo;
    for (row, id) in ag.dx.rows().into_iter().zip(&c.ids) {
        let mut target = g.token_embedding.row_mut(*id as usize);
        target += &row;
    }
}

/// Encodes a token sequence into `L × d` contextual rows.
pub fn encode_text(seq: &TokenSequence, params: &ModelParams) -> Result<Array2<f64>> {
    Ok(text_forward(&seq.ids, params)?.0)
}

struct LabCache {
    x: Array2<f64>,
    a1: Array2<f64>,
    a2: Array2<f64>,
    demo_x: Array2<f64>,
}

fn lab_forward(x: Array2<f64>, demo_x: Array2<f64>, p: &ModelParams) -> (Array2<f64>, Array2<f64>, LabCache) {
    let mut a1 = x.dot(&p.lab_w1) + &p.lab_b1;
    a1.mapv_inplace(f64::tanh);
    let mut a2 = a1.dot(&p.lab_w2) + &p.lab_b2;
    a2.mapv_inplace(f64::tanh);
    let lab = a2.dot(&p.lab_w3) + &p.lab_b3;
    let demo = demo_x.dot(&p.demo_w) + &p.demo_b;
    (lab, demo, LabCache { x, a1, a2, demo_x })
}

fn lab_backward(c: &LabCache, p: &ModelParams, dlab: &Array2<f64>, ddemo: &Array2<f64>, g: &mut ModelParams) {
    g.demo_w += &c.demo_x.t().dot(ddemo);
    g.demo_b += &ddemo.sum_axis(Axis(0)).insert_axis(Axis(0));

    g.lab_w3 += &c.a2.t().dot(dlab);
    g.lab_b3 += &dlab.sum_axis(Axis(0)).insert_axis(Axis(0));
    let du2 = dlab.dot(&p.lab_w3.t()) * &c.a2.mapv(|a| 1.0 - a * a);
    g.lab_w2 += &c.a1.t().dot(&du2);
    g.lab_b2 += &du2.sum_axis(Axis(0)).insert_axis(Axis(0));
    let du1 = du2.dot(&p.lab_w2.t()) * &c.a1.mapv(|a| 1.0 - a * a);
    g.lab_w1 += &c.x.t().dot(&du1);
    g.lab_b1 += &du1.sum_axis(Axis(0)).insert_axis(Axis(0));
}

fn check_lab_batch(lab_inputs: &Array2<f64>, demo_inputs: &Array2<f64>, config: &ModelConfig) -> Result<()> {
    if lab_inputs.ncols() != config.lab_input() || demo_inputs.ncols() != DEMO_INPUT {
        return Err(Error::invalid(format!(
            "lab input width {} / demo width {} (expected {} / {DEMO_INPUT})",
            lab_inputs.ncols(),
            demo_inputs.ncols(),
            config.lab_input()
        )));
    }
    if lab_inputs.nrows() != demo_inputs.nrows() {
        return Err(Error::invalid("lab and demographic batches differ in length"));
    }
    if lab_inputs.iter().chain(demo_inputs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite lab or demographic input"));
    }
    Ok(())
}

/// Batched lab/demographic encoder: row `i` of each output is the lab token
/// and demographic token for row `i` of the inputs.
pub fn encode_lab_batch(
    lab_inputs: &Array2<f64>,
    demo_inputs: &Array2<f64>,
    params: &ModelParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_lab_batch(lab_inputs, demo_inputs, &params.config)?;
    let (lab, demo, _) = lab_forward(lab_inputs.clone(), demo_inputs.clone(), params);
    Ok((lab, demo))
}

/// Lab token and demographic token for a single patient.
pub fn encode_labs(
    labs: &LabPanel,
    demo: &Demographics,
    params: &ModelParams,
    norm: &NormStats,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let x = Array2::from_shape_vec((1, 2 * labs.len()), norm.lab_input(labs)?)
        .expect("lab input length is 2K");
    let dx = Array2::from_shape_vec((1, DEMO_INPUT), NormStats::demo_input(demo).to_vec())
        .expect("demo input width");
    let (lab, demo) = encode_lab_batch(&x, &dx, params)?;
    Ok((lab.row(0).to_owned(), demo.row(0).to_owned()))
}

fn fuse_forward(
    text: &Array2<f64>,
    lab_token: ArrayView1<'_, f64>,
    demo_token: ArrayView1<'_, f64>,
    p: &ModelParams,
) -> Result<(FusedRepresentation, AttentionCache)> {
    let d = p.config.d_model;
    if text.ncols() != d || lab_token.len() != d || demo_token.len() != d || text.nrows() == 0 {
        return Err(Error::invalid(format!(
            "fusion expects L x {d} text rows and {d}-dim tokens, got {:?}, {}, {}",
            text.dim(),
            lab_token.len(),
            demo_token.len()
        )));
    }
    let l = text.nrows();
    let mut seq = Array2::zeros((l + 2, d));
    seq.slice_mut(s![..l, ..]).assign(text);
    seq.row_mut(l).assign(&lab_token);
    seq.row_mut(l + 1).assign(&demo_token);
    let (z, cache) = attention_forward(seq, &fusion_attention(p));
    let pooled = z.mean_axis(Axis(0)).expect("non-empty sequence");
    Ok((
        FusedRepresentation {
            pooled,
            attention_scores: cache.probs.clone(),
        },
        cache,
    ))
}

/// Joint self-attention over `[text rows; lab token; demo token]`, mean-pooled.
pub fn fuse(
    text: &Array2<f64>,
    lab_token: &Array1<f64>,
    demo_token: &Array1<f64>,
    params: &ModelParams,
) -> Result<FusedRepresentation> {
    Ok(fuse_forward(text, lab_token.view(), demo_token.view(), params)?.0)
}

fn disease_logits(pooled: &Array1<f64>, p: &ModelParams) -> Array1<f64> {
    pooled.dot(&p.disease_w) + p.disease_b.row(0)
}

fn horizon_logits(pooled: &Array1<f64>, p: &ModelParams) -> Array1<f64> {
    pooled.dot(&p.horizon_w) + p.horizon_b.row(0)
}

pub fn predict_risks(fused: &FusedRepresentation, params: &ModelParams) -> RiskScores {
    let z = disease_logits(&fused.pooled, params);
    RiskScores::from_array([sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2])])
}

fn hazards(pooled: &Array1<f64>, p: &ModelParams) -> [f64; 4] {
    let z = horizon_logits(pooled, p);
    [sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2]), sigmoid(z[3])]
}

pub fn predict_horizons(fused: &FusedRepresentation, params: &ModelParams) -> HorizonRisks {
    HorizonRisks {
        p_onset_by: cumulative_risk(hazards(&fused.pooled, params)),
    }
}

fn input_matrices(input: &ModelInput, config: &ModelConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    let x = Array2::from_shape_vec((1, input.labs.len()), input.labs.clone())
        .expect("row vector");
    let dx = Array2::from_shape_vec((1, DEMO_INPUT), input.demo.to_vec()).expect("row vector");
    check_lab_batch(&x, &dx, config)?;
    Ok((x, dx))
}

/// Full inference for one prepared input.
pub fn forward(params: &ModelParams, input: &ModelInput) -> Result<Prediction> {
    let (text, _) = text_forward(&input.tokens, params)?;
    let (x, dx) = input_matrices(input, &params.config)?;
    let (lab, demo, _) = lab_forward(x, dx, params);
    forward_from_parts(params, &text, lab.row(0), demo.row(0))
}

/// Fusion and heads only, for callers that cache the modality encoders.
pub fn forward_from_parts(
    params: &ModelParams,
    text: &Array2<f64>,
    lab_token: ArrayView1<'_, f64>,
    demo_token: ArrayView1<'_, f64>,
) -> Result<Prediction> {
    let (fused, _) = fuse_forward(text, lab_token, demo_token, params)?;
    Ok(Prediction {
        risks: predict_risks(&fused, params),
        horizons: predict_horizons(&fused, params),
        fused,
    })
}

/// Text encoder output, exposed for callers that cache it.
pub fn text_rows(params: &ModelParams, tokens: &[u32]) -> Result<Array2<f64>> {
    Ok(text_forward(tokens, params)?.0)
}

/// Per-head attention of the text encoder's self-attention layer.
pub fn text_attention_scores(params: &ModelParams, tokens: &[u32]) -> Result<Vec<Array2<f64>>> {
    Ok(text_forward(tokens, params)?.1.attn.probs)
}

/// Lab and demographic tokens for one prepared input.
pub fn modality_tokens(params: &ModelParams, labs: &[f64], demo: &[f64; DEMO_INPUT]) -> Result<(Array1<f64>, Array1<f64>)> {
    let input = ModelInput {
        tokens: Vec::new(),
        labs: labs.to_vec(),
        demo: *demo,
    };
    let (x, dx) = input_matrices(&input, &params.config)?;
    let (lab, demo, _) = lab_forward(x, dx, params);
    Ok((lab.row(0).to_owned(), demo.row(0).to_owned()))
}

/// Supervision attached to one training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub labels: DiseaseLabels,
    pub onset_day: Option<u32>,
}

/// One supervised training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ModelInput,
    pub target: Target,
}

/// Loss and its exact gradient with respect to every parameter.
pub fn forward_backward(
    params: &ModelParams,
    input: &ModelInput,
    target: &Target,
    weights: &ClassWeights,
) -> Result<(f64, ModelParams)> {
    let (text, text_cache) = text_forward(&input.tokens, params)?;
    let (x, dx) = input_matrices(input, &params.config)?;
    let (lab, demo, lab_cache) = lab_forward(x, dx, params);
    let (fused, fuse_cache) = fuse_forward(&text, lab.row(0), demo.row(0), params)?;
    let pooled = &fused.pooled;

    let risks = predict_risks(&fused, params);
    let h = hazards(pooled, params);
    let horizons = HorizonRisks {
        p_onset_by: cumulative_risk(h),
    };
    let terms = loss::loss_terms(&risks, &horizons, &target.labels, target.onset_day, weights);

    let mut g = params.zeros_like();

    // Disease head: dL/dz = dL/dp · p(1-p).
    let p = risks.as_array();
    let dz_dis = Array1::from_shape_fn(3, |c| terms.d_risk[c] * p[c] * (1.0 - p[c]));
    // Horizon head: p_j = 1 - Π_{i<=j}(1-h_i), so dp_j/dh_k = Π_{i<=j, i!=k}(1-h_i) for k <= j.
    let mut dz_hor = Array1::zeros(4);
    for k in 0..4 {
        let mut dh = 0.0;
        for j in k..4 {
            let prod: f64 = (0..=j).filter(|i| *i != k).map(|i| 1.0 - h[i]).product();
            dh += terms.d_horizon[j] * prod;
        }
        dz_hor[k] = dh * h[k] * (1.0 - h[k]);
    }
    let pooled_col = pooled.view().insert_axis(Axis(1));
    g.disease_w += &pooled_col.dot(&dz_dis.view().insert_axis(Axis(0)));
    g.disease_b += &dz_dis.view().insert_axis(Axis(0));
    g.horizon_w += &pooled_col.dot(&dz_hor.view().insert_axis(Axis(0)));
    g.horizon_b += &dz_hor.view().insert_axis(Axis(0));
    let dpooled = params.disease_w.dot(&dz_dis) + params.horizon_w.dot(&dz_hor);

    // Mean pooling spreads the gradient evenly over fused rows.
    let n = fuse_cache.x.nrows();
    let dz = Array2::from_shape_fn((n, dpooled.len()), |(_, c)| dpooled[c] / n as f64);
    let ag = attention_backward(&fuse_cache, &fusion_attention(params), &dz);
    g.fuse_wq += &ag.dwq;
    g.fuse_wk += &ag.dwk;
    g.fuse_wv += &ag.dwv;
    g.fuse_wo += &ag.dwo;

    let l = n - 2;
    let dtext = ag.dx.slice(s![..l, ..]).to_owned();
    let dlab = ag.dx.slice(s![l..l + 1, ..]).to_owned();
    let ddemo = ag.dx.slice(s![l + 1..l + 2, ..]).to_owned();
    lab_backward(&lab_cache, params, &dlab, &ddemo, &mut g);
    text_backward(&text_cache, params, &dtext, &mut g);

    Ok((terms.value, g))
}

/// Loss only, used by finite-difference checks and validation passes.
pub fn loss_value(params: &ModelParams, input: &ModelInput, target: &Target, weights: &ClassWeights) -> Result<f64> {
    let pred = forward(params, input)?;
    Ok(loss::loss_terms(&pred.risks, &pred.horizons, &target.labels, target.onset_day, weights).value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::UNK_ID;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            n_analytes: 3,
            max_len: 16,
            vocab_size: 10,
            ff_hidden: 6,
            lab_hidden: 5,
        }
    }

    fn params(seed: u64) -> ModelParams {
        ModelParams::init(small_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn input() -> ModelInput {
        ModelInput {
            tokens: vec![2, 5, 3, 7],
            labs: vec![0.5, -1.2, 0.0, 1.0, 1.0, 0.0],
            demo: [1.0, 0.0, 0.0, 0.61],
        }
    }

    #[test]
    fn zero_weights_pass_embedding_plus_position_through() {
        let mut p = params(1);
        let emb = p.token_embedding.clone();
        p = ModelParams {
            token_embedding: emb.clone(),
            ..p.zeros_like()
        };
        let seq = TokenSequence {
            ids: vec![4, 2, 9],
            spans: vec![(0, 0); 3],
        };
        let out = encode_text(&seq, &p).unwrap();
        let pe = positional_encoding(3, 8);
        for (t, id) in seq.ids.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(out[[t, c]], emb[[*id as usize, c]] + pe[[t, c]]);
            }
        }
    }

    #[test]
    fn swapping_tokens_changes_their_rows() {
        let p = params(2);
        let a = TokenSequence {
            ids: vec![3, 6, 2],
            spans: vec![(0, 0); 3],
        };
        let b = TokenSequence {
            ids: vec![6, 3, 2],
            spans: vec![(0, 0); 3],
        };
        let ea = encode_text(&a, &p).unwrap();
        let eb = encode_text(&b, &p).unwrap();
        assert_ne!(ea.row(0), eb.row(0));
        assert_ne!(ea.row(1), eb.row(1));
        // Not a simple row swap either: positions matter.
        assert_ne!(ea.row(0), eb.row(1));
    }

    #[test]
    fn encode_text_is_deterministic() {
        let p = params(3);
        let seq = TokenSequence {
            ids: vec![1, 2, 3, 4, 5],
            spans: vec![(0, 0); 5],
        };
        let a = encode_text(&seq, &p).unwrap();
        let b = encode_text(&seq, &p).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let p = params(4);
        let seq = TokenSequence {
            ids: vec![1, 10],
            spans: vec![(0, 0); 2],
        };
        assert!(matches!(encode_text(&seq, &p), Err(Error::InvalidInput(_))));
        let empty = TokenSequence {
            ids: vec![],
            spans: vec![],
        };
        assert!(encode_text(&empty, &p).is_err());
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let p = params(5);
        let row = Array1::from_shape_fn(8, |i| (i as f64 * 0.3).sin());
        let text = Array2::from_shape_fn((4, 8), |(_, c)| row[c]);
        let fused = fuse(&text, &row, &row, &p).unwrap();
        for a in &fused.attention_scores {
            for v in a.iter() {
                assert!((v - 1.0 / 6.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_rejects_shape_mismatch() {
        let p = params(6);
        let text = Array2::zeros((3, 7));
        let tok = Array1::zeros(8);
        assert!(fuse(&text, &tok, &tok, &p).is_err());
        let text = Array2::zeros((3, 8));
        let short = Array1::zeros(4);
        assert!(fuse(&text, &tok, &short, &p).is_err());
    }

    #[test]
    fn zero_heads_give_half_probabilities() {
        let mut p = params(7);
        p.disease_w.fill(0.0);
        p.disease_b.fill(0.0);
        p.horizon_w.fill(0.0);
        p.horizon_b.fill(0.0);
        let pred = forward(&p, &input()).unwrap();
        assert_eq!(pred.risks.as_array(), [0.5; 3]);
        assert_eq!(pred.horizons.p_onset_by, [0.5, 0.75, 0.875, 0.9375]);
    }

    #[test]
    fn sigmoid_saturates() {
        assert!((sigmoid(1e4) - 1.0).abs() < 1e-9);
        assert!(sigmoid(-1e4) >= 0.0 && sigmoid(-1e4) < 1e-9);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn cumulative_risk_closed_forms() {
        assert_eq!(cumulative_risk([0.0; 4]), [0.0; 4]);
        assert_eq!(cumulative_risk([0.5; 4]), [0.5, 0.75, 0.875, 0.9375]);
        assert_eq!(cumulative_risk([1.0, 0.3, 0.0, 0.2]), [1.0; 4]);
    }

    #[test]
    fn norm_stats_standardize_and_mask() {
        let mk = |v: [Option<f64>; 2]| PatientRecord {
            patient_id: "p".into(),
            note: String::new(),
            labs: LabPanel::from_options(&v).unwrap(),
            demo: Demographics { age: 40, sex: Sex::Female },
            labels: None,
            onset_day: None,
        };
        let recs = vec![mk([Some(1.0), Some(5.0)]), mk([Some(3.0), Some(5.0)]), mk([None, Some(5.0)])];
        let norm = NormStats::fit(&recs, 2).unwrap();
        assert_eq!(norm.means, vec![2.0, 5.0]);
        assert_eq!(norm.constant, vec![false, true]);
        assert_eq!(norm.age_mean, 40.0);
        // A value equal to the mean standardizes to exactly zero.
        let x = norm.lab_input(&LabPanel::from_options(&[Some(2.0), Some(9.0)]).unwrap()).unwrap();
        assert_eq!(x, vec![0.0, 0.0, 1.0, 1.0]);
        let x = norm.lab_input(&LabPanel::empty(2)).unwrap();
        assert_eq!(x, vec![0.0; 4]);
        assert!(norm.lab_input(&LabPanel::empty(3)).is_err());
    }

    #[test]
    fn unk_only_note_still_encodes() {
        let p = params(8);
        let mut inp = input();
        inp.tokens = vec![UNK_ID; 3];
        let pred = forward(&p, &inp).unwrap();
        assert!(pred.fused.pooled.iter().all(|v| v.is_finite()));
    }
}
