//! Attentive probe: three self-attention blocks and one cross-attention
//! pooling layer over a learnable query, followed by a linear head.
//!
//! The probe consumes a frozen encoder's token sequence `H` (`N x D`):
//!
//! * self blocks use pre-normalization residuals,
//!   `X_out = X + MHA(LN(X))`, with no feed-forward sublayer;
//! * cross-attention pools with a single learnable query `q` and no
//!   residual, so with one input token `z` is exactly the output projection
//!   of that token's value projection;
//! * no positional encoding is added anywhere in the probe, so the pooled
//!   `z` is invariant to token permutations.
//!
//! Forward and backward passes are written out by hand; gradients cover all
//! probe parameters (the encoder stays frozen, so no gradient flows to the
//! input tokens' producer).

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::heads::plugin::Embedding;
use crate::heads::{ClassifierHead, HeadKind};

const LN_EPS: f64 = 1e-5;
const SELF_BLOCKS: usize = 3;

/// Attention heads used for a given embedding dim when not overridden:
/// `dim/64` clamped to `[1, 8]`.
pub fn default_head_count(dim: usize) -> usize {
    (dim / 64).clamp(1, 8)
}

/// Probe shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ProbeConfig {
    pub dim: usize,
    pub heads: usize,
    pub labels: usize,
}

impl ProbeConfig {
    pub fn new(dim: usize, labels: usize) -> Self {
        ProbeConfig {
            dim,
            heads: default_head_count(dim),
            labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.labels == 0 || self.heads == 0 {
            return Err(Error::invalid("probe dims must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} not divisible by head count {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Seg {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Seg {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockSegs {
    ln_g: Seg,
    ln_b: Seg,
    wq: Seg,
    bq: Seg,
    wk: Seg,
    bk: Seg,
    wv: Seg,
    bv: Seg,
    wo: Seg,
    bo: Seg,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<BlockSegs>,
    query: Seg,
    cwq: Seg,
    cbq: Seg,
    cwk: Seg,
    cbk: Seg,
    cwv: Seg,
    cbv: Seg,
    cwo: Seg,
    cbo: Seg,
    hw: Seg,
    hb: Seg,
    total: usize,
}

impl Layout {
    fn new(cfg: &ProbeConfig) -> Self {
        let d = cfg.dim;
        let mut off = 0usize;
        let mut seg = |rows: usize, cols: usize| {
            let s = Seg { off, rows, cols };
            off += rows * cols;
            s
        };
        let blocks = (0..SELF_BLOCKS)
            .map(|_| BlockSegs {
                ln_g: seg(1, d),
                ln_b: seg(1, d),
                wq: seg(d, d),
                bq: seg(1, d),
                wk: seg(d, d),
                bk: seg(1, d),
                wv: seg(d, d),
                bv: seg(1, d),
                wo: seg(d, d),
                bo: seg(1, d),
            })
            .collect();
        let query = seg(1, d);
        let cwq = seg(d, d);
        let cbq = seg(1, d);
        let cwk = seg(d, d);
        let cbk = seg(1, d);
        let cwv = seg(d, d);
        let cbv = seg(1, d);
        let cwo = seg(d, d);
        let cbo = seg(1, d);
        let hw = seg(cfg.labels, d);
        let hb = seg(1, cfg.labels);
        Layout {
            blocks,
            query,
            cwq,
            cbq,
            cwk,
            cbk,
            cwv,
            cbv,
            cwo,
            cbo,
            hw,
            hb,
            total: off,
        }
    }
}

fn mat<'a>(p: &'a [f64], seg: &Seg) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((seg.rows, seg.cols), &p[seg.off..seg.off + seg.len()])
        .expect("segment shape")
}

fn vec1<'a>(p: &'a [f64], seg: &Seg) -> ArrayView1<'a, f64> {
    ArrayView1::from_shape(seg.len(), &p[seg.off..seg.off + seg.len()]).expect("segment shape")
}

fn add_mat(grads: &mut [f64], seg: &Seg, delta: &Array2<f64>) {
    let flat = delta.as_slice().expect("contiguous");
    for (g, d) in grads[seg.off..seg.off + seg.len()].iter_mut().zip(flat) {
        *g += d;
    }
}

fn add_vec(grads: &mut [f64], seg: &Seg, delta: &Array1<f64>) {
    for (g, d) in grads[seg.off..seg.off + seg.len()]
        .iter_mut()
        .zip(delta.iter())
    {
        *g += d;
    }
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn softmax_vec(scores: &Array1<f64>) -> Array1<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = scores.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Row-wise softmax Jacobian product: `ds = p * (dp - <dp, p>)`.
fn softmax_backward_row(probs: ArrayView1<'_, f64>, dprobs: ArrayView1<'_, f64>) -> Array1<f64> {
    let inner = dprobs.dot(&probs);
    let mut out = Array1::zeros(probs.len());
    for i in 0..probs.len() {
        out[i] = probs[i] * (dprobs[i] - inner);
    }
    out
}

struct LnCache {
    x_hat: Array2<f64>,
    rstd: Array1<f64>,
}

fn ln_forward(
    x: &Array2<f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut x_hat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (x[(i, j)] - mean) * r;
            x_hat[(i, j)] = h;
            out[(i, j)] = gamma[j] * h + beta[j];
        }
    }
    (out, LnCache { x_hat, rstd })
}

/// Backward through layer norm; accumulates `d_gamma`/`d_beta` and returns
/// the gradient with respect to the input.
fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: ArrayView1<'_, f64>,
    d_gamma: &mut Array1<f64>,
    d_beta: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dxh = dy[(i, j)] * gamma[j];
            m1 += dxh;
            m2 += dxh * cache.x_hat[(i, j)];
            d_gamma[j] += dy[(i, j)] * cache.x_hat[(i, j)];
            d_beta[j] += dy[(i, j)];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            let dxh = dy[(i, j)] * gamma[j];
            dx[(i, j)] = cache.rstd[i] * (dxh - m1 - cache.x_hat[(i, j)] * m2);
        }
    }
    dx
}

struct BlockCache {
    x_in: Array2<f64>,
    ln: LnCache,
    xn: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o_concat: Array2<f64>,
}

struct CrossCache {
    x3: Array2<f64>,
    qc: Array1<f64>,
    kc: Array2<f64>,
    vc: Array2<f64>,
    probs: Vec<Array1<f64>>,
    ctx: Array1<f64>,
}

struct Cache {
    blocks: Vec<BlockCache>,
    cross: CrossCache,
    z: Array1<f64>,
}

/// The trainable probe. Parameters live in one flat vector (see [`Layout`]).
#[derive(Debug, Clone)]
pub struct AttentiveProbe {
    cfg: ProbeConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl AttentiveProbe {
    /// Seeded initialization: attention and head weights `N(0, 1/dim)`,
    /// layer-norm gain 1, all biases 0.
    pub fn new(cfg: ProbeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        let scale = 1.0 / (cfg.dim as f64).sqrt();
        let mut fill = |seg: &Seg, value: Option<f64>, params: &mut Vec<f64>| {
            for slot in &mut params[seg.off..seg.off + seg.len()] {
                *slot = match value {
                    Some(v) => v,
                    None => {
                        let g: f64 = normal.sample(&mut rng);
                        g * scale
                    }
                };
            }
        };
        for b in 0..SELF_BLOCKS {
            let segs = layout.blocks[b];
            fill(&segs.ln_g, Some(1.0), &mut params);
            fill(&segs.ln_b, Some(0.0), &mut params);
            fill(&segs.wq, None, &mut params);
            fill(&segs.bq, Some(0.0), &mut params);
            fill(&segs.wk, None, &mut params);
            fill(&segs.bk, Some(0.0), &mut params);
            fill(&segs.wv, None, &mut params);
            fill(&segs.bv, Some(0.0), &mut params);
            fill(&segs.wo, None, &mut params);
            fill(&segs.bo, Some(0.0), &mut params);
        }
        fill(&layout.query, None, &mut params);
        fill(&layout.cwq, None, &mut params);
        fill(&layout.cbq, Some(0.0), &mut params);
        fill(&layout.cwk, None, &mut params);
        fill(&layout.cbk, Some(0.0), &mut params);
        fill(&layout.cwv, None, &mut params);
        fill(&layout.cbv, Some(0.0), &mut params);
        fill(&layout.cwo, None, &mut params);
        fill(&layout.cbo, Some(0.0), &mut params);
        fill(&layout.hw, None, &mut params);
        fill(&layout.hb, Some(0.0), &mut params);
        Ok(AttentiveProbe {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.cfg
    }

    fn check_tokens(&self, tokens: &Array2<f64>) -> Result<()> {
        if tokens.nrows() == 0 {
            return Err(Error::invalid("probe needs at least one token"));
        }
        if tokens.ncols() != self.cfg.dim {
            return Err(Error::ShapeMismatch(format!(
                "probe dim {} vs token dim {}",
                self.cfg.dim,
                tokens.ncols()
            )));
        }
        Ok(())
    }

    /// Pooled representation and logits for a token sequence.
    pub fn forward_pooled(&self, tokens: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let cache = self.forward_cached(tokens)?;
        let logits = self.head_logits(&cache.z);
        Ok((cache.z, logits))
    }

    fn head_logits(&self, z: &Array1<f64>) -> Array1<f64> {
        let hw = mat(&self.params, &self.layout.hw);
        let hb = vec1(&self.params, &self.layout.hb);
        hw.dot(z) + &hb
    }

    fn forward_cached(&self, tokens: &Array2<f64>) -> Result<Cache> {
        self.check_tokens(tokens)?;
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let p = &self.params;

        let mut x = tokens.clone();
        let mut blocks = Vec::with_capacity(SELF_BLOCKS);
        for segs in &self.layout.blocks {
            let (xn, ln) = ln_forward(&x, vec1(p, &segs.ln_g), vec1(p, &segs.ln_b));
            let q = xn.dot(&mat(p, &segs.wq)) + &vec1(p, &segs.bq);
            let k = xn.dot(&mat(p, &segs.wk)) + &vec1(p, &segs.bk);
            let v = xn.dot(&mat(p, &segs.wv)) + &vec1(p, &segs.bv);
            let mut probs = Vec::with_capacity(heads);
            let mut o_concat = Array2::zeros(x.raw_dim());
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let scores = qh.dot(&kh.t()) * inv_sqrt;
                let ph = softmax_rows(&scores);
                o_concat.slice_mut(cols).assign(&ph.dot(&vh));
                probs.push(ph);
            }
            let attn_out = o_concat.dot(&mat(p, &segs.wo)) + &vec1(p, &segs.bo);
            let x_out = &x + &attn_out;
            blocks.push(BlockCache {
                x_in: x,
                ln,
                xn,
                q,
                k,
                v,
                probs,
                o_concat,
            });
            x = x_out;
        }

        let x3 = x;
        let query = vec1(p, &self.layout.query);
        let qc = query.dot(&mat(p, &self.layout.cwq)) + &vec1(p, &self.layout.cbq);
        let kc = x3.dot(&mat(p, &self.layout.cwk)) + &vec1(p, &self.layout.cbk);
        let vc = x3.dot(&mat(p, &self.layout.cwv)) + &vec1(p, &self.layout.cbv);
        let mut probs = Vec::with_capacity(heads);
        let mut ctx = Array1::zeros(d);
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let qh = qc.slice(s![span.clone()]);
            let kh = kc.slice(s![.., span.clone()]);
            let vh = vc.slice(s![.., span.clone()]);
            let scores = kh.dot(&qh) * inv_sqrt;
            let ph = softmax_vec(&scores);
            ctx.slice_mut(s![span]).assign(&ph.dot(&vh));
            probs.push(ph);
        }
        let z = ctx.dot(&mat(p, &self.layout.cwo)) + &vec1(p, &self.layout.cbo);

        Ok(Cache {
            blocks,
            cross: CrossCache {
                x3,
                qc,
                kc,
                vc,
                probs,
                ctx,
            },
            z,
        })
    }

    fn backward(&self, cache: &Cache, grad_logits: ArrayView1<'_, f64>, grads: &mut [f64]) {
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let p = &self.params;

        // Head: logits = hw . z + hb
        let g = grad_logits.to_owned();
        let z_col = cache.z.view().insert_axis(Axis(1));
        let g_col = g.view().insert_axis(Axis(1));
        add_mat(grads, &self.layout.hw, &g_col.dot(&z_col.t()));
        add_vec(grads, &self.layout.hb, &g);
        let mut dz = mat(p, &self.layout.hw).t().dot(&g);

        // Cross output projection: z = ctx . cwo + cbo
        let cross = &cache.cross;
        let ctx_col = cross.ctx.view().insert_axis(Axis(1));
        let dz_row = dz.view().insert_axis(Axis(0));
        add_mat(grads, &self.layout.cwo, &ctx_col.dot(&dz_row));
        add_vec(grads, &self.layout.cbo, &dz);
        let dctx = mat(p, &self.layout.cwo).dot(&dz);
        dz = Array1::zeros(0); // consumed
        let _ = dz;

        let n = cross.x3.nrows();
        let mut dqc = Array1::<f64>::zeros(d);
        let mut dkc = Array2::<f64>::zeros((n, d));
        let mut dvc = Array2::<f64>::zeros((n, d));
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let ph = &cross.probs[h];
            let vh = cross.vc.slice(s![.., span.clone()]);
            let kh = cross.kc.slice(s![.., span.clone()]);
            let qh = cross.qc.slice(s![span.clone()]);
            let dctx_h = dctx.slice(s![span.clone()]).to_owned();
            // ctx_h = ph . vh
            let dph = vh.dot(&dctx_h);
            let dvh = ph.view().insert_axis(Axis(1)).dot(&dctx_h.view().insert_axis(Axis(0)));
            let dsh = softmax_backward_row(ph.view(), dph.view());
            // s = kh . qh * inv_sqrt
            let dqh = kh.t().dot(&dsh) * inv_sqrt;
            let dkh = dsh.view().insert_axis(Axis(1)).dot(&qh.insert_axis(Axis(0))) * inv_sqrt;
            dqc.slice_mut(s![span.clone()]).assign(&dqh);
            dkc.slice_mut(s![.., span.clone()]).assign(&dkh);
            dvc.slice_mut(s![.., span]).assign(&dvh);
        }
        // qc = query . cwq + cbq
        let query = vec1(p, &self.layout.query).to_owned();
        add_mat(
            grads,
            &self.layout.cwq,
            &query
                .view()
                .insert_axis(Axis(1))
                .dot(&dqc.view().insert_axis(Axis(0))),
        );
        add_vec(grads, &self.layout.cbq, &dqc);
        add_vec(grads, &self.layout.query, &mat(p, &self.layout.cwq).dot(&dqc));
        // kc/vc projections from x3
        add_mat(grads, &self.layout.cwk, &cross.x3.t().dot(&dkc));
        add_vec(grads, &self.layout.cbk, &dkc.sum_axis(Axis(0)));
        add_mat(grads, &self.layout.cwv, &cross.x3.t().dot(&dvc));
        add_vec(grads, &self.layout.cbv, &dvc.sum_axis(Axis(0)));
        let mut dx = dkc.dot(&mat(p, &self.layout.cwk).t()) + dvc.dot(&mat(p, &self.layout.cwv).t());

        // Self blocks, newest first.
        for (segs, block) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            // x_out = x_in + o_concat . wo + bo
            let d_attn = dx.clone(); // residual: dx flows to both terms
            add_mat(grads, &segs.wo, &block.o_concat.t().dot(&d_attn));
            add_vec(grads, &segs.bo, &d_attn.sum_axis(Axis(0)));
            let d_o = d_attn.dot(&mat(p, &segs.wo).t());

            let rows = block.x_in.nrows();
            let mut dq = Array2::<f64>::zeros((rows, d));
            let mut dk = Array2::<f64>::zeros((rows, d));
            let mut dv = Array2::<f64>::zeros((rows, d));
            for h in 0..heads {
                let span = h * dh..(h + 1) * dh;
                let cols = s![.., span.clone()];
                let ph = &block.probs[h];
                let vh = block.v.slice(cols);
                let kh = block.k.slice(cols);
                let qh = block.q.slice(cols);
                let doh = d_o.slice(cols).to_owned();
                let dph = doh.dot(&vh.t());
                let dvh = ph.t().dot(&doh);
                let mut dsh = Array2::<f64>::zeros((rows, rows));
                for r in 0..rows {
                    dsh.row_mut(r)
                        .assign(&softmax_backward_row(ph.row(r), dph.row(r)));
                }
                let dqh = dsh.dot(&kh) * inv_sqrt;
                let dkh = dsh.t().dot(&qh) * inv_sqrt;
                dq.slice_mut(cols).assign(&dqh);
                dk.slice_mut(cols).assign(&dkh);
                dv.slice_mut(cols).assign(&dvh);
            }
            add_mat(grads, &segs.wq, &block.xn.t().dot(&dq));
            add_vec(grads, &segs.bq, &dq.sum_axis(Axis(0)));
            add_mat(grads, &segs.wk, &block.xn.t().dot(&dk));
            add_vec(grads, &segs.bk, &dk.sum_axis(Axis(0)));
            add_mat(grads, &segs.wv, &block.xn.t().dot(&dv));
            add_vec(grads, &segs.bv, &dv.sum_axis(Axis(0)));
            let dxn = dq.dot(&mat(p, &segs.wq).t())
                + dk.dot(&mat(p, &segs.wk).t())
                + dv.dot(&mat(p, &segs.wv).t());

            let mut d_gamma = Array1::zeros(d);
            let mut d_beta = Array1::zeros(d);
            let dx_ln = ln_backward(
                &dxn,
                &block.ln,
                vec1(p, &segs.ln_g),
                &mut d_gamma,
                &mut d_beta,
            );
            add_vec(grads, &segs.ln_g, &d_gamma);
            add_vec(grads, &segs.ln_b, &d_beta);
            dx += &dx_ln;
        }
    }
}

impl ClassifierHead for AttentiveProbe {
    fn kind(&self) -> HeadKind {
        HeadKind::Probe
    }

    fn input_dim(&self) -> usize {
        self.cfg.dim
    }

    fn label_count(&self) -> usize {
        self.cfg.labels
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn logits(&self, input: &Embedding) -> Result<Array1<f64>> {
        match input {
            Embedding::Tokens(t) => Ok(self.forward_pooled(t)?.1),
            Embedding::Pooled(_) => Err(Error::ShapeMismatch(
                "attentive probe expects a token sequence, got a pooled embedding".into(),
            )),
        }
    }

    fn accumulate_grad(
        &self,
        input: &Embedding,
        grad_logits: ArrayView1<'_, f64>,
        grads: &mut [f64],
    ) -> Result<()> {
        let tokens = match input {
            Embedding::Tokens(t) => t,
            Embedding::Pooled(_) => {
                return Err(Error::ShapeMismatch(
                    "attentive probe expects a token sequence".into(),
                ))
            }
        };
        let cache = self.forward_cached(tokens)?;
        self.backward(&cache, grad_logits, grads);
        Ok(())
    }
}
