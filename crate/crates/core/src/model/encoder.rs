//! Pre-norm transformer encoder with hand-written backward pass.
//!
//! Per layer: `x += Attn(LN1(x))`, `x += FFN(LN2(x))`, with a tanh-GELU
//! feed-forward block; a final layer norm produces the hidden states.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::params::{LayerParams, ModelParams, SPATIAL_DIM};
use crate::error::{Error, Result};
use crate::masking::{MaskedSequence, Token};
use crate::textproc::{MASK_ID, PAD_ID};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    /// One row per input element.
    pub outputs: Array2<f64>,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.nrows() == 0
    }

    pub fn cls(&self) -> ArrayView1<'_, f64> {
        self.outputs.row(0)
    }
}

/// How each input row was embedded, kept for the backward pass.
#[derive(Debug, Clone)]
enum EmbedSource {
    Table { id: usize, position: usize },
    Visual { feature: Vec<f64>, spatial: [f64; SPATIAL_DIM] },
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: NormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: NormCache,
    b: Array2<f64>,
    h1: Array2<f64>,
    g: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    sources: Vec<EmbedSource>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
}

/// Embedding rows for a masked sequence.
///
/// Word, tag and mask elements add a word-table row and a learned position
/// row. Patch and region elements add the feature projection and the
/// projection of `(x1, y1, x2, y2, w, h)`.
pub fn embed_sequence(seq: &MaskedSequence, params: &ModelParams) -> Result<Array2<f64>> {
    Ok(embed_with_sources(seq, params)?.0)
}

fn embed_with_sources(
    seq: &MaskedSequence,
    params: &ModelParams,
) -> Result<(Array2<f64>, Vec<EmbedSource>)> {
    let cfg = &params.config;
    let n = seq.len();
    if n > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: n,
            cap: cfg.max_positions,
        });
    }
    let mut x = Array2::zeros((n, cfg.hidden));
    let mut sources = Vec::with_capacity(n);
    for (i, el) in seq.elements.iter().enumerate() {
        let source = match &el.token {
            Token::Word(id) | Token::Tag(id) => table_source(*id as usize, seq.position_of(i), cfg)?,
            Token::Mask => table_source(MASK_ID as usize, seq.position_of(i), cfg)?,
            Token::Patch(v) | Token::Region(v) => {
                if v.feature.len() != cfg.feature_dim {
                    return Err(Error::InvalidArgument(format!(
                        "feature dim {} != {}",
                        v.feature.len(),
                        cfg.feature_dim
                    )));
                }
                EmbedSource::Visual {
                    feature: v.feature.clone(),
                    spatial: v.spatial(),
                }
            }
        };
        let mut row = x.row_mut(i);
        match &source {
            EmbedSource::Table { id, position } => {
                row += &params.word_emb.row(*id);
                row += &params.pos_emb.row(*position);
            }
            EmbedSource::Visual { feature, spatial } => {
                row += &params.patch_b;
                for (f, w) in feature.iter().zip(params.patch_w.rows()) {
                    row.scaled_add(*f, &w);
                }
                row += &params.spatial_b;
                for (f, w) in spatial.iter().zip(params.spatial_w.rows()) {
                    row.scaled_add(*f, &w);
                }
            }
        }
        sources.push(source);
    }
    Ok((x, sources))
}

fn table_source(id: usize, position: usize, cfg: &super::ModelConfig) -> Result<EmbedSource> {
    if id >= cfg.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "token id {id} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if position >= cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: position + 1,
            cap: cfg.max_positions,
        });
    }
    Ok(EmbedSource::Table { id, position })
}

/// `true` marks rows that may not be attended to.
pub fn pad_mask(seq: &MaskedSequence) -> Vec<bool> {
    seq.elements
        .iter()
        .map(|e| matches!(e.token, Token::Word(id) if id == PAD_ID))
        .collect()
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row *= *s;
    }
    let y = &xhat * g + b;
    (y, NormCache { xhat, inv_std })
}

/// Returns dL/dx and accumulates the gain and bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xhat), s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.dot(&xhat) / d;
        row.zip_mut_with(&xhat, |v, &xh| *v = s * (*v - mean_d - xh * mean_dx));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn layer_forward(
    x: &Array2<f64>,
    p: &LayerParams,
    heads: usize,
    pad: &[bool],
) -> (Array2<f64>, LayerCache) {
    let n = x.nrows();
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(x, &p.ln1_g, &p.ln1_b);
    let q = affine(&a, &p.wq, &p.bq);
    let k = affine(&a, &p.wk, &p.bk);
    let v = affine(&a, &p.wv, &p.bv);
    let mut o = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for mut row in scores.rows_mut() {
            for (j, masked) in pad.iter().enumerate() {
                if *masked {
                    row[j] = f64::NEG_INFINITY;
                }
            }
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let x1 = x + &affine(&o, &p.wo, &p.bo);
    let (b, ln2) = layer_norm(&x1, &p.ln2_g, &p.ln2_b);
    let h1 = affine(&b, &p.w1, &p.b1);
    let g = h1.mapv(gelu);
    let out = &x1 + &affine(&g, &p.w2, &p.b2);
    let cache = LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        o,
        ln2,
        b,
        h1,
        g,
    };
    (out, cache)
}

fn layer_backward(
    dout: Array2<f64>,
    c: &LayerCache,
    p: &LayerParams,
    gp: &mut LayerParams,
    heads: usize,
) -> Array2<f64> {
    let d = dout.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    gp.w2 += &c.g.t().dot(&dout);
    gp.b2 += &dout.sum_axis(Axis(0));
    let mut dh1 = dout.dot(&p.w2.t());
    dh1.zip_mut_with(&c.h1, |v, &x| *v *= gelu_grad(x));
    gp.w1 += &c.b.t().dot(&dh1);
    gp.b1 += &dh1.sum_axis(Axis(0));
    let db = dh1.dot(&p.w1.t());
    let dx1 = dout + layer_norm_backward(&db, &c.ln2, &p.ln2_g, &mut gp.ln2_g, &mut gp.ln2_b);

    // attention branch
    gp.wo += &c.o.t().dot(&dx1);
    gp.bo += &dx1.sum_axis(Axis(0));
    let do_ = dx1.dot(&p.wo.t());
    let n = dx1.nrows();
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for (h, probs) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let do_h = do_.slice(cols);
        let dp = do_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&do_h));
        let mut ds = dp;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
            let inner = row.dot(&prow);
            row.zip_mut_with(&prow, |v, &pv| *v = pv * (*v - inner) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    gp.wq += &c.a.t().dot(&dq);
    gp.bq += &dq.sum_axis(Axis(0));
    gp.wk += &c.a.t().dot(&dk);
    gp.bk += &dk.sum_axis(Axis(0));
    gp.wv += &c.a.t().dot(&dv);
    gp.bv += &dv.sum_axis(Axis(0));
    let da = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    dx1 + layer_norm_backward(&da, &c.ln1, &p.ln1_g, &mut gp.ln1_g, &mut gp.ln1_b)
}

/// Runs the encoder on precomputed embeddings.
pub fn encoder_forward(
    embeddings: &Array2<f64>,
    pad: &[bool],
    params: &ModelParams,
) -> Result<HiddenStates> {
    let (hidden, _, _) = encode(embeddings.clone(), pad, params)?;
    Ok(hidden)
}

fn encode(
    mut x: Array2<f64>,
    pad: &[bool],
    params: &ModelParams,
) -> Result<(HiddenStates, Vec<LayerCache>, NormCache)> {
    if pad.len() != x.nrows() {
        return Err(Error::InvalidArgument("pad mask length mismatch".into()));
    }
    if x.ncols() != params.config.hidden {
        return Err(Error::InvalidArgument("embedding width mismatch".into()));
    }
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = layer_forward(&x, layer, params.config.heads, pad);
        x = next;
        caches.push(cache);
    }
    let (outputs, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDivergence("encoder output".into()));
    }
    Ok((HiddenStates { outputs }, caches, lnf))
}

/// Embeds and encodes a sequence; `[PAD]` words are excluded from attention.
pub fn forward(seq: &MaskedSequence, params: &ModelParams) -> Result<HiddenStates> {
    Ok(forward_with_cache(seq, params)?.0)
}

pub fn forward_with_cache(
    seq: &MaskedSequence,
    params: &ModelParams,
) -> Result<(HiddenStates, ForwardCache)> {
    let (x, sources) = embed_with_sources(seq, params)?;
    let (hidden, layers, lnf) = encode(x, &pad_mask(seq), params)?;
    Ok((
        hidden,
        ForwardCache {
            sources,
            layers,
            lnf,
        },
    ))
}

/// Back-propagates `d_hidden` (one row per element) into `grads`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_hidden: &Array2<f64>,
    grads: &mut ModelParams,
) {
    let mut dx = layer_norm_backward(
        d_hidden,
        &cache.lnf,
        &params.lnf_g,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );
    for ((layer, lc), gl) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        dx = layer_backward(dx, lc, layer, gl, params.config.heads);
    }
    for (source, drow) in cache.sources.iter().zip(dx.rows()) {
        match source {
            EmbedSource::Table { id, position } => {
                let mut w = grads.word_emb.row_mut(*id);
                w += &drow;
                let mut p = grads.pos_emb.row_mut(*position);
                p += &drow;
            }
            EmbedSource::Visual { feature, spatial } => {
                grads.patch_b += &drow;
                for (f, mut w) in feature.iter().zip(grads.patch_w.rows_mut()) {
                    w.scaled_add(*f, &drow);
                }
                grads.spatial_b += &drow;
                for (f, mut w) in spatial.iter().zip(grads.spatial_w.rows_mut()) {
                    w.scaled_add(*f, &drow);
                }
            }
        }
    }
}

/// Output-projection logits at the requested rows, shape `(positions, V)`.
pub fn mlm_logits(hidden: &HiddenStates, positions: &[usize], params: &ModelParams) -> Array2<f64> {
    let mut rows = Array2::zeros((positions.len(), params.config.hidden));
    for (r, &p) in positions.iter().enumerate() {
        rows.row_mut(r).assign(&hidden.outputs.row(p));
    }
    rows.dot(&params.head_w) + &params.head_b
}

/// Gradient of the output projection: accumulates into `grads` and adds the
/// hidden-state gradient into `d_hidden`.
pub fn mlm_head_backward(
    hidden: &HiddenStates,
    positions: &[usize],
    d_logits: &Array2<f64>,
    params: &ModelParams,
    grads: &mut ModelParams,
    d_hidden: &mut Array2<f64>,
) {
    for (r, &p) in positions.iter().enumerate() {
        let dl = d_logits.row(r);
        let h = hidden.outputs.row(p);
        for (hv, mut gw) in h.iter().zip(grads.head_w.rows_mut()) {
            gw.scaled_add(*hv, &dl);
        }
        grads.head_b += &dl;
        let mut dh = d_hidden.row_mut(p);
        dh += &params.head_w.dot(&dl);
    }
}
