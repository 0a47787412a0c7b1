//! Post-LayerNorm transformer encoder with a masked-LM head, and its
//! hand-derived backward pass.
//!
//! Backward only materializes gradients for selected parameters and stops
//! descending once it is below the lowest selected parameter, so tuning the
//! last block costs little more than a forward pass.

use indexmap::IndexMap;
use ndarray::{s, Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis};

use super::params::{block_prefix, LayerSelection, ParameterStore};
use crate::error::{Error, Result};
use crate::masking::MaskedInput;
use crate::tokenizer::TokenId;

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Gradients keyed by parameter name, in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(IndexMap<String, ArrayD<f64>>);

impl Gradients {
    pub fn zeros(params: &ParameterStore, selection: &LayerSelection) -> Result<Self> {
        selection
            .names()
            .iter()
            .map(|n| {
                let p = params
                    .get(n)
                    .ok_or_else(|| Error::UnknownParameter(n.clone()))?;
                Ok((n.clone(), ArrayD::zeros(p.raw_dim())))
            })
            .collect::<Result<_>>()
            .map(Self)
    }

    pub fn from_map(map: IndexMap<String, ArrayD<f64>>) -> Self {
        Self(map)
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.0.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn wants(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    fn add_matrix(&mut self, name: &str, g: Array2<f64>) {
        if let Some(acc) = self.0.get_mut(name) {
            *acc += &g.into_dyn();
        }
    }

    fn add_vector(&mut self, name: &str, g: Array1<f64>) {
        if let Some(acc) = self.0.get_mut(name) {
            *acc += &g.into_dyn();
        }
    }
}

/// Depth of a parameter in backward order: 0 is the decoder, larger values
/// are closer to the input embeddings.
fn backward_depth(name: &str, num_blocks: usize) -> Option<usize> {
    let embed_base = 3 + num_blocks * 6;
    match name {
        "cls.predictions.bias" | "cls.predictions.decoder.weight" => return Some(0),
        "cls.predictions.transform.LayerNorm.weight"
        | "cls.predictions.transform.LayerNorm.bias" => return Some(1),
        "cls.predictions.transform.dense.weight" | "cls.predictions.transform.dense.bias" => {
            return Some(2)
        }
        "embeddings.LayerNorm.weight" | "embeddings.LayerNorm.bias" => return Some(embed_base),
        "embeddings.word_embeddings.weight" | "embeddings.position_embeddings.weight" => {
            return Some(embed_base + 1)
        }
        _ => {}
    }
    let rest = name.strip_prefix("encoder.layer.")?;
    let (idx, sub) = rest.split_once('.')?;
    let i: usize = idx.parse().ok()?;
    if i >= num_blocks {
        return None;
    }
    let base = 3 + (num_blocks - 1 - i) * 6;
    let offset = if sub.starts_with("output.LayerNorm.") {
        0
    } else if sub.starts_with("output.dense.") {
        1
    } else if sub.starts_with("intermediate.dense.") {
        2
    } else if sub.starts_with("attention.output.LayerNorm.") {
        3
    } else if sub.starts_with("attention.output.dense.") {
        4
    } else if sub.starts_with("attention.self.") {
        5
    } else {
        return None;
    };
    Some(base + offset)
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(
    x: &Array2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *s);
    }
    let y = &xhat * &gamma + beta;
    (y, LnCache { xhat, inv_std })
}

/// Returns (dx, dgamma, dbeta).
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        out.zip_mut_with(&g, |o, &gi| *o = gi * d);
        out.zip_mut_with(&xh, |o, &x| *o = (*o - sum_g - x * sum_gx) * s / d);
    }
    (dx, dgamma, dbeta)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct BlockCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    attn_ln: LnCache,
    h1: Array2<f64>,
    inter_pre: Array2<f64>,
    inter_act: Array2<f64>,
    out_ln: LnCache,
}

struct HeadCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    ln: LnCache,
    transformed: Array2<f64>,
}

struct ForwardCache {
    ids: Vec<usize>,
    emb_ln: LnCache,
    blocks: Vec<BlockCache>,
    head: HeadCache,
}

fn check_input(params: &ParameterStore, input_ids: &[TokenId]) -> Result<()> {
    let cfg = params.config();
    if input_ids.len() > cfg.max_input_len {
        return Err(Error::InputTooLong {
            len: input_ids.len(),
            max: cfg.max_input_len,
        });
    }
    if let Some(&bad) = input_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::InvalidTokenId(bad));
    }
    Ok(())
}

fn forward_cached(
    params: &ParameterStore,
    input_ids: &[TokenId],
) -> Result<(Array2<f64>, ForwardCache)> {
    check_input(params, input_ids)?;
    let cfg = *params.config();
    let n = input_ids.len();
    let ids: Vec<usize> = input_ids.iter().map(|&i| i as usize).collect();

    let word = params.matrix("embeddings.word_embeddings.weight");
    let pos = params.matrix("embeddings.position_embeddings.weight");
    let mut x = pos.slice(s![..n, ..]).to_owned();
    for (mut row, &id) in x.rows_mut().into_iter().zip(&ids) {
        row += &word.row(id);
    }
    let (mut h, emb_ln) = layer_norm(
        &x,
        params.vector("embeddings.LayerNorm.weight"),
        params.vector("embeddings.LayerNorm.bias"),
    );

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for i in 0..cfg.num_blocks {
        let p = block_prefix(i);
        let lin = |x: &Array2<f64>, sub: &str| {
            linear(
                x,
                params.matrix(&format!("{p}.{sub}.weight")),
                params.vector(&format!("{p}.{sub}.bias")),
            )
        };
        let q = lin(&h, "attention.self.query");
        let k = lin(&h, "attention.self.key");
        let v = lin(&h, "attention.self.value");
        let mut context = Array2::zeros((n, cfg.hidden_dim));
        let mut probs = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let attn_out = lin(&context, "attention.output.dense") + &h;
        let (h1, attn_ln) = layer_norm(
            &attn_out,
            params.vector(&format!("{p}.attention.output.LayerNorm.weight")),
            params.vector(&format!("{p}.attention.output.LayerNorm.bias")),
        );
        let inter_pre = lin(&h1, "intermediate.dense");
        let inter_act = inter_pre.mapv(gelu);
        let out = lin(&inter_act, "output.dense") + &h1;
        let (h2, out_ln) = layer_norm(
            &out,
            params.vector(&format!("{p}.output.LayerNorm.weight")),
            params.vector(&format!("{p}.output.LayerNorm.bias")),
        );
        blocks.push(BlockCache {
            input: std::mem::replace(&mut h, h2),
            q,
            k,
            v,
            probs,
            context,
            attn_ln,
            h1,
            inter_pre,
            inter_act,
            out_ln,
        });
    }

    let pre = linear(
        &h,
        params.matrix("cls.predictions.transform.dense.weight"),
        params.vector("cls.predictions.transform.dense.bias"),
    );
    let (transformed, ln) = layer_norm(
        &pre.mapv(gelu),
        params.vector("cls.predictions.transform.LayerNorm.weight"),
        params.vector("cls.predictions.transform.LayerNorm.bias"),
    );
    let logits = linear(
        &transformed,
        params.matrix("cls.predictions.decoder.weight"),
        params.vector("cls.predictions.bias"),
    );
    Ok((
        logits,
        ForwardCache {
            ids,
            emb_ln,
            blocks,
            head: HeadCache {
                input: h,
                pre,
                ln,
                transformed,
            },
        },
    ))
}

/// MLM logits, shape `(len, vocab_size)`. Dropout is never applied.
pub fn forward_mlm(params: &ParameterStore, input_ids: &[TokenId]) -> Result<Array2<f64>> {
    forward_cached(params, input_ids).map(|(logits, _)| logits)
}

/// Mean cross-entropy over labeled positions.
pub fn mlm_loss(logits: &Array2<f64>, labels: &[Option<TokenId>]) -> Result<f64> {
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return Err(Error::NoLabeledPositions);
    }
    let (sum, _) = cross_entropy(logits, labels, count as f64, false)?;
    Ok(sum / count as f64)
}

/// Summed cross-entropy over labeled rows and, if requested, the logits
/// gradient of `sum / denom`.
fn cross_entropy(
    logits: &Array2<f64>,
    labels: &[Option<TokenId>],
    denom: f64,
    with_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    if labels.len() != logits.nrows() {
        return Err(Error::InvalidConfig(format!(
            "{} labels for {} positions",
            labels.len(),
            logits.nrows()
        )));
    }
    let mut loss = 0.0;
    let mut grad = with_grad.then(|| Array2::zeros(logits.raw_dim()));
    for (j, label) in labels.iter().enumerate() {
        let Some(label) = *label else { continue };
        let label = label as usize;
        if label >= logits.ncols() {
            return Err(Error::InvalidTokenId(label as TokenId));
        }
        let row = logits.row(j);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss += max + sum_exp.ln() - row[label];
        if let Some(g) = grad.as_mut() {
            let mut grow = g.row_mut(j);
            grow.zip_mut_with(&row, |o, &v| *o = (v - max).exp() / sum_exp / denom);
            grow[label] -= 1.0 / denom;
        }
    }
    Ok((loss, grad))
}

fn backward_from_logits(
    params: &ParameterStore,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    grads: &mut Gradients,
    max_depth: usize,
) {
    let cfg = *params.config();

    // decoder
    if grads.wants("cls.predictions.decoder.weight") {
        grads.add_matrix(
            "cls.predictions.decoder.weight",
            dlogits.t().dot(&cache.head.transformed),
        );
    }
    if grads.wants("cls.predictions.bias") {
        grads.add_vector("cls.predictions.bias", dlogits.sum_axis(Axis(0)));
    }
    if max_depth == 0 {
        return;
    }
    let dtrans = dlogits.dot(&params.matrix("cls.predictions.decoder.weight"));

    // transform LayerNorm
    let (dact, dg, db) = layer_norm_backward(
        &dtrans,
        &cache.head.ln,
        params.vector("cls.predictions.transform.LayerNorm.weight"),
    );
    grads.add_vector("cls.predictions.transform.LayerNorm.weight", dg);
    grads.add_vector("cls.predictions.transform.LayerNorm.bias", db);
    if max_depth <= 1 {
        return;
    }

    // transform dense + gelu
    let mut dpre = dact;
    dpre.zip_mut_with(&cache.head.pre, |d, &x| *d *= gelu_grad(x));
    if grads.wants("cls.predictions.transform.dense.weight") {
        grads.add_matrix(
            "cls.predictions.transform.dense.weight",
            dpre.t().dot(&cache.head.input),
        );
    }
    grads.add_vector(
        "cls.predictions.transform.dense.bias",
        dpre.sum_axis(Axis(0)),
    );
    if max_depth <= 2 {
        return;
    }
    let mut dh = dpre.dot(&params.matrix("cls.predictions.transform.dense.weight"));

    let dhead = cfg.head_dim();
    let scale = 1.0 / (dhead as f64).sqrt();
    for i in (0..cfg.num_blocks).rev() {
        let base = 3 + (cfg.num_blocks - 1 - i) * 6;
        let p = block_prefix(i);
        let c = &cache.blocks[i];
        let name = |sub: &str| format!("{p}.{sub}");

        // output LayerNorm over (output dense + residual)
        let (dsum, dg, db) = layer_norm_backward(
            &dh,
            &c.out_ln,
            params.vector(&name("output.LayerNorm.weight")),
        );
        grads.add_vector(&name("output.LayerNorm.weight"), dg);
        grads.add_vector(&name("output.LayerNorm.bias"), db);
        if max_depth <= base {
            return;
        }

        // output dense
        if grads.wants(&name("output.dense.weight")) {
            grads.add_matrix(&name("output.dense.weight"), dsum.t().dot(&c.inter_act));
        }
        grads.add_vector(&name("output.dense.bias"), dsum.sum_axis(Axis(0)));
        if max_depth <= base + 1 {
            return;
        }

        // intermediate dense + gelu
        let mut dinter = dsum.dot(&params.matrix(&name("output.dense.weight")));
        dinter.zip_mut_with(&c.inter_pre, |d, &x| *d *= gelu_grad(x));
        if grads.wants(&name("intermediate.dense.weight")) {
            grads.add_matrix(&name("intermediate.dense.weight"), dinter.t().dot(&c.h1));
        }
        grads.add_vector(&name("intermediate.dense.bias"), dinter.sum_axis(Axis(0)));
        if max_depth <= base + 2 {
            return;
        }
        let dh1 = dsum + dinter.dot(&params.matrix(&name("intermediate.dense.weight")));

        // attention output LayerNorm over (attention dense + residual)
        let (dsum2, dg, db) = layer_norm_backward(
            &dh1,
            &c.attn_ln,
            params.vector(&name("attention.output.LayerNorm.weight")),
        );
        grads.add_vector(&name("attention.output.LayerNorm.weight"), dg);
        grads.add_vector(&name("attention.output.LayerNorm.bias"), db);
        if max_depth <= base + 3 {
            return;
        }

        // attention output dense
        if grads.wants(&name("attention.output.dense.weight")) {
            grads.add_matrix(
                &name("attention.output.dense.weight"),
                dsum2.t().dot(&c.context),
            );
        }
        grads.add_vector(
            &name("attention.output.dense.bias"),
            dsum2.sum_axis(Axis(0)),
        );
        if max_depth <= base + 4 {
            return;
        }

        // self-attention
        let dcontext = dsum2.dot(&params.matrix(&name("attention.output.dense.weight")));
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (head, probs) in c.probs.iter().enumerate() {
            let cols = s![.., head * dhead..(head + 1) * dhead];
            let dctx = dcontext.slice(cols);
            let dprobs = dctx.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dctx));
            let mut dscores = dprobs;
            for (mut drow, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
                let inner = drow.dot(&prow);
                drow.zip_mut_with(&prow, |d, &pr| *d = pr * (*d - inner) * scale);
            }
            dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols)
                .assign(&dscores.t().dot(&c.q.slice(cols)));
        }
        for (sub, d) in [
            ("attention.self.query", &dq),
            ("attention.self.key", &dk),
            ("attention.self.value", &dv),
        ] {
            if grads.wants(&name(&format!("{sub}.weight"))) {
                grads.add_matrix(&name(&format!("{sub}.weight")), d.t().dot(&c.input));
            }
            grads.add_vector(&name(&format!("{sub}.bias")), d.sum_axis(Axis(0)));
        }
        if max_depth <= base + 5 {
            return;
        }
        dh = dsum2
            + dq.dot(&params.matrix(&name("attention.self.query.weight")))
            + dk.dot(&params.matrix(&name("attention.self.key.weight")))
            + dv.dot(&params.matrix(&name("attention.self.value.weight")));
    }

    let embed_base = 3 + cfg.num_blocks * 6;
    let (dx, dg, db) = layer_norm_backward(
        &dh,
        &cache.emb_ln,
        params.vector("embeddings.LayerNorm.weight"),
    );
    grads.add_vector("embeddings.LayerNorm.weight", dg);
    grads.add_vector("embeddings.LayerNorm.bias", db);
    if max_depth <= embed_base {
        return;
    }
    let n = cache.ids.len();
    if grads.wants("embeddings.word_embeddings.weight") {
        let mut dword = Array2::zeros((cfg.vocab_size, cfg.hidden_dim));
        for (row, &id) in dx.rows().into_iter().zip(&cache.ids) {
            let mut target = dword.row_mut(id);
            target += &row;
        }
        grads.add_matrix("embeddings.word_embeddings.weight", dword);
    }
    if grads.wants("embeddings.position_embeddings.weight") {
        let mut dpos = Array2::zeros((cfg.max_input_len, cfg.hidden_dim));
        dpos.slice_mut(s![..n, ..]).assign(&dx);
        grads.add_matrix("embeddings.position_embeddings.weight", dpos);
    }
}

fn max_depth(params: &ParameterStore, selection: &LayerSelection) -> Result<usize> {
    selection.validate(params)?;
    let nb = params.config().num_blocks;
    selection
        .names()
        .iter()
        .map(|n| backward_depth(n, nb).ok_or_else(|| Error::UnknownParameter(n.clone())))
        .try_fold(0, |acc, d| d.map(|d| acc.max(d)))
}

/// Gradients of the mean MLM loss of one sequence, for selected parameters
/// only. Non-selected parameters get no entry.
pub fn backward(
    params: &ParameterStore,
    input_ids: &[TokenId],
    labels: &[Option<TokenId>],
    selection: &LayerSelection,
) -> Result<Gradients> {
    let depth = max_depth(params, selection)?;
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return Err(Error::NoLabeledPositions);
    }
    let (logits, cache) = forward_cached(params, input_ids)?;
    let (_, dlogits) = cross_entropy(&logits, labels, count as f64, true)?;
    let mut grads = Gradients::zeros(params, selection)?;
    backward_from_logits(
        params,
        &cache,
        &dlogits.expect("requested"),
        &mut grads,
        depth,
    );
    Ok(grads)
}

/// Loss and gradients over a minibatch. The loss is the mean cross-entropy
/// over every labeled position in the batch; sequences of different lengths
/// are processed independently, which equals padding with attention masks.
pub fn batch_loss_and_gradients(
    params: &ParameterStore,
    batch: &[MaskedInput],
    selection: &LayerSelection,
) -> Result<(f64, Gradients)> {
    let depth = max_depth(params, selection)?;
    let count: usize = batch.iter().map(MaskedInput::labeled_count).sum();
    if count == 0 {
        return Err(Error::NoLabeledPositions);
    }
    let denom = count as f64;
    let mut grads = Gradients::zeros(params, selection)?;
    let mut loss = 0.0;
    for item in batch {
        if item.labeled_count() == 0 {
            continue;
        }
        let (logits, cache) = forward_cached(params, &item.input_ids)?;
        let (l, dlogits) = cross_entropy(&logits, &item.labels, denom, true)?;
        loss += l;
        backward_from_logits(
            params,
            &cache,
            &dlogits.expect("requested"),
            &mut grads,
            depth,
        );
    }
    Ok((loss / denom, grads))
}

/// Mean loss over every labeled position of `batch`, without gradients.
pub fn batch_loss(params: &ParameterStore, batch: &[MaskedInput]) -> Result<f64> {
    let count: usize = batch.iter().map(MaskedInput::labeled_count).sum();
    if count == 0 {
        return Err(Error::NoLabeledPositions);
    }
    let mut loss = 0.0;
    for item in batch.iter().filter(|i| i.labeled_count() > 0) {
        let logits = forward_mlm(params, &item.input_ids)?;
        loss += cross_entropy(&logits, &item.labels, 1.0, false)?.0;
    }
    Ok(loss / count as f64)
}
