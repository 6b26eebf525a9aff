// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use super::{matmul, Model, Scalar, LN_EPS};
use crate::vocab::TokenSequence;
use crate::{Error, Result};

/// Equal-length token sequences scored at their last `n_scored` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Row-major `[n_seq, seq_len]`.
    pub tokens: Vec<u32>,
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_scored: usize,
    /// Row-major `[n_seq, n_scored]`; empty when only logits are wanted.
    pub targets: Vec<u32>,
}

impl Batch {
    /// Teacher-forced training batch: every answer token is scored.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Result<Batch> {
        let mut b = Batch::empty();
        for s in seqs {
            let toks = s.model_tokens();
            b.push(&toks, s.target.len(), &s.target)?;
        }
        b.check_nonempty()?;
        Ok(b)
    }

    /// Inputs only, scored at the last input position against the first
    /// answer token.
    pub fn from_inputs<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Result<Batch> {
        let mut b = Batch::empty();
        for s in seqs {
            b.push(&s.input, 1, &s.target[..1])?;
        }
        b.check_nonempty()?;
        Ok(b)
    }

    /// Unscored-target batch from raw token rows.
    pub fn from_rows(rows: &[Vec<u32>], n_scored: usize) -> Result<Batch> {
        let mut b = Batch::empty();
        for r in rows {
            b.push(r, n_scored, &[])?;
        }
        b.check_nonempty()?;
        b.targets.clear();
        Ok(b)
    }

    fn empty() -> Batch {
        Batch {
            tokens: Vec::new(),
            n_seq: 0,
            seq_len: 0,
            n_scored: 0,
            targets: Vec::new(),
        }
    }

    fn push(&mut self, tokens: &[u32], n_scored: usize, targets: &[u32]) -> Result<()> {
        if self.n_seq == 0 {
            self.seq_len = tokens.len();
            self.n_scored = n_scored;
        }
        if tokens.len() != self.seq_len || n_scored != self.n_scored {
            return Err(Error::Shape(format!(
                "batch mixes sequence layouts ({} tokens / {} scored vs {} / {})",
                tokens.len(),
                n_scored,
                self.seq_len,
                self.n_scored
            )));
        }
        if n_scored == 0 || n_scored > tokens.len() {
            return Err(Error::Shape(format!("{n_scored} scored positions in a {}-token sequence", tokens.len())));
        }
        self.tokens.extend_from_slice(tokens);
        self.targets.extend_from_slice(targets);
        self.n_seq += 1;
        Ok(())
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.n_seq == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    pub fn scored_positions(&self) -> Range<usize> {
        self.seq_len - self.n_scored..self.seq_len
    }

    /// Every example twice, for invariance checks.
    pub fn repeated(&self, times: usize) -> Batch {
        let mut b = self.clone();
        b.tokens = self.tokens.repeat(times);
        b.targets = self.targets.repeat(times);
        b.n_seq *= times;
        b
    }
}

/// Replace the residual state `S[layer, position]` of every sequence.
///
/// `values` is row-major `[n_seq, hidden_dim]`. Layer 0 is the embedding
/// sum, layer `i` the output of block `i`.
#[derive(Debug, Clone, Copy)]
pub struct Intervention<'a, T> {
    pub layer: usize,
    pub position: usize,
    pub values: &'a [T],
}

/// Residual states `S[i, pos]` for `i` in `0..=n_layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache<T> {
    pub n_layers: usize,
    pub n_seq: usize,
    pub seq_len: usize,
    pub dim: usize,
    /// `states[i]` is row-major `[n_seq, seq_len, dim]`.
    pub states: Vec<Vec<T>>,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn state(&self, layer: usize, seq: usize, pos: usize) -> &[T] {
        let at = (seq * self.seq_len + pos) * self.dim;
        &self.states[layer][at..at + self.dim]
    }

    /// `S[layer, pos]` of every sequence, row-major `[n_seq, dim]`.
    pub fn site(&self, layer: usize, pos: usize) -> Vec<T> {
        (0..self.n_seq).flat_map(|s| self.state(layer, s, pos).iter().copied()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Row-major `[n_seq, n_scored, vocab]`.
    pub logits: Vec<T>,
    pub vocab_size: usize,
    pub n_scored: usize,
    pub cache: Option<ActivationCache<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn row(&self, seq: usize, k: usize) -> &[T] {
        let at = (seq * self.n_scored + k) * self.vocab_size;
        &self.logits[at..at + self.vocab_size]
    }

    /// Greedy token per scored row.
    pub fn argmax(&self) -> Vec<u32> {
        self.logits.chunks(self.vocab_size).map(argmax).collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

struct LayerRecord<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    fc: Vec<T>,
    gelu_t: Vec<T>,
    act: Vec<T>,
}

struct Trace<T> {
    layers: Vec<LayerRecord<T>>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    hf: Vec<T>,
}

fn layernorm<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            out[r * d + c] = xh * g[c] + b[c];
        }
    }
    (out, xhat, rstd)
}

/// Accumulates `dg`, `db` and returns `dx`.
fn layernorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
    d: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for c in 0..d {
            let dxh = dyr[c] * g[c];
            mean_dxh = mean_dxh + dxh;
            mean_dxh_xh = mean_dxh_xh + dxh * xh[c];
            dg[c] = dg[c] + dyr[c] * xh[c];
            db[c] = db[c] + dyr[c];
        }
        mean_dxh = mean_dxh * inv_d;
        mean_dxh_xh = mean_dxh_xh * inv_d;
        for c in 0..d {
            let dxh = dyr[c] * g[c];
            dx[r * d + c] = rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn tanh<T: Scalar>(u: T) -> T {
    // Faster than the libm call and exact enough for both precisions.
    T::one() - T::of(2.0) / ((u + u).exp() + T::one())
}

/// Tanh-approximated GELU; returns the output and the tanh term reused by
/// the backward pass.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = tanh(c * (x + a * x * x * x));
    (half * x * (T::one() + t), t)
}

fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn add_bias<T: Scalar>(y: &mut [T], b: &[T]) {
    for row in y.chunks_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v = *v + bb;
        }
    }
}

fn sum_rows_into<T: Scalar>(dy: &[T], db: &mut [T]) {
    for row in dy.chunks(db.len()) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + v;
    }
}

impl<T: Scalar> Model<T> {
    fn check_batch(&self, batch: &Batch, interventions: &[Intervention<'_, T>]) -> Result<()> {
        let cfg = &self.config;
        if batch.seq_len > cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len, cfg.max_seq_len
            )));
        }
        if batch.tokens.len() != batch.n_seq * batch.seq_len {
            return Err(Error::Shape("token buffer does not match n_seq * seq_len".into()));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        for iv in interventions {
            if iv.layer > cfg.n_layers || iv.position >= batch.seq_len {
                return Err(Error::Shape(format!(
                    "intervention site ({}, {}) outside {} layers x {} positions",
                    iv.layer, iv.position, cfg.n_layers, batch.seq_len
                )));
            }
            if iv.values.len() != batch.n_seq * cfg.hidden_dim {
                return Err(Error::Shape(format!(
                    "intervention at ({}, {}) has {} values, expected {}",
                    iv.layer,
                    iv.position,
                    iv.values.len(),
                    batch.n_seq * cfg.hidden_dim
                )));
            }
        }
        Ok(())
    }

    fn intervene(&self, x: &mut [T], layer: usize, batch: &Batch, interventions: &[Intervention<'_, T>]) {
        let d = self.config.hidden_dim;
        for iv in interventions.iter().filter(|iv| iv.layer == layer) {
            for s in 0..batch.n_seq {
                let at = (s * batch.seq_len + iv.position) * d;
                x[at..at + d].copy_from_slice(&iv.values[s * d..(s + 1) * d]);
            }
        }
    }

    fn embed(&self, batch: &Batch) -> Vec<T> {
        let d = self.config.hidden_dim;
        let mut x = vec![T::zero(); batch.tokens.len() * d];
        let wte = &self.params[self.layout.wte.clone()];
        let wpe = &self.params[self.layout.wpe.clone()];
        for (i, &tok) in batch.tokens.iter().enumerate() {
            let pos = i % batch.seq_len;
            let row = &mut x[i * d..(i + 1) * d];
            let te = &wte[tok as usize * d..(tok as usize + 1) * d];
            let pe = &wpe[pos * d..(pos + 1) * d];
            for c in 0..d {
                row[c] = te[c] + pe[c];
            }
        }
        x
    }

    fn block_forward(&self, layer: usize, x: Vec<T>, n_seq: usize, seq_len: usize) -> (Vec<T>, LayerRecord<T>) {
        let cfg = &self.config;
        let (d, nh, dh) = (cfg.hidden_dim, cfg.n_heads, cfg.head_dim());
        let n = n_seq * seq_len;
        let p = &self.params;
        let bl = self.block(layer);

        let (h1, xhat1, rstd1) = layernorm(&x, &p[bl.ln1_g.clone()], &p[bl.ln1_b.clone()], d);
        let mut qkv = vec![T::zero(); n * 3 * d];
        matmul(n, d, 3 * d, &h1, false, &p[bl.w_qkv.clone()], false, &mut qkv, false);
        add_bias(&mut qkv, &p[bl.b_qkv.clone()]);

        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); n_seq * nh * seq_len * seq_len];
        let mut att = vec![T::zero(); n * d];
        for s in 0..n_seq {
            for h in 0..nh {
                let pb = (s * nh + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = (s * seq_len + i) * 3 * d + h * dh;
                    let row = &mut probs[pb + i * seq_len..pb + (i + 1) * seq_len];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let kj = (s * seq_len + j) * 3 * d + d + h * dh;
                        let mut dot = T::zero();
                        for c in 0..dh {
                            dot = dot + qkv[qi + c] * qkv[kj + c];
                        }
                        row[j] = dot * scale;
                        max = max.max(row[j]);
                    }
                    let mut z = T::zero();
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - max).exp();
                        z = z + *r;
                    }
                    for r in row.iter_mut().take(i + 1) {
                        *r = *r / z;
                    }
                    let out = (s * seq_len + i) * d + h * dh;
                    for j in 0..=i {
                        let w = row[j];
                        let vj = (s * seq_len + j) * 3 * d + 2 * d + h * dh;
                        for c in 0..dh {
                            att[out + c] = att[out + c] + w * qkv[vj + c];
                        }
                    }
                }
            }
        }

        let mut x_mid = x;
        matmul(n, d, d, &att, false, &p[bl.w_o.clone()], false, &mut x_mid, true);
        add_bias(&mut x_mid, &p[bl.b_o.clone()]);

        let (h2, xhat2, rstd2) = layernorm(&x_mid, &p[bl.ln2_g.clone()], &p[bl.ln2_b.clone()], d);
        let mut fc = vec![T::zero(); n * 4 * d];
        matmul(n, d, 4 * d, &h2, false, &p[bl.w_fc.clone()], false, &mut fc, false);
        add_bias(&mut fc, &p[bl.b_fc.clone()]);
        let mut act = vec![T::zero(); fc.len()];
        let mut gelu_t = vec![T::zero(); fc.len()];
        for ((a, t), &v) in act.iter_mut().zip(gelu_t.iter_mut()).zip(&fc) {
            (*a, *t) = gelu(v);
        }
        let mut out = x_mid;
        matmul(n, 4 * d, d, &act, false, &p[bl.w_proj.clone()], false, &mut out, true);
        add_bias(&mut out, &p[bl.b_proj.clone()]);

        let rec = LayerRecord {
            xhat1,
            rstd1,
            h1,
            qkv,
            probs,
            att,
            xhat2,
            rstd2,
            h2,
            fc,
            gelu_t,
            act,
        };
        (out, rec)
    }

    fn run(
        &self,
        batch: &Batch,
        interventions: &[Intervention<'_, T>],
        capture: bool,
        keep_trace: bool,
    ) -> Result<(Vec<T>, Option<ActivationCache<T>>, Option<Trace<T>>)> {
        self.check_batch(batch, interventions)?;
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let mut x = self.embed(batch);
        self.intervene(&mut x, 0, batch, interventions);
        let mut states = Vec::new();
        if capture {
            states.push(x.clone());
        }
        let mut records = Vec::new();
        for l in 0..cfg.n_layers {
            let (mut y, rec) = self.block_forward(l, x, batch.n_seq, batch.seq_len);
            if keep_trace {
                records.push(rec);
            }
            self.intervene(&mut y, l + 1, batch, interventions);
            if capture {
                states.push(y.clone());
            }
            x = y;
        }

        let rows = batch.n_seq * batch.n_scored;
        let mut last = Vec::with_capacity(rows * d);
        for s in 0..batch.n_seq {
            for pos in batch.scored_positions() {
                let at = (s * batch.seq_len + pos) * d;
                last.extend_from_slice(&x[at..at + d]);
            }
        }
        let (hf, xhat_f, rstd_f) = layernorm(&last, &self.params[self.layout.lnf_g.clone()], &self.params[self.layout.lnf_b.clone()], d);
        let v = cfg.vocab_size;
        let mut logits = vec![T::zero(); rows * v];
        matmul(rows, d, v, &hf, false, &self.params[self.layout.wte.clone()], true, &mut logits, false);

        let cache = capture.then(|| ActivationCache {
            n_layers: cfg.n_layers,
            n_seq: batch.n_seq,
            seq_len: batch.seq_len,
            dim: d,
            states,
        });
        let trace = keep_trace.then_some(Trace {
            layers: records,
            xhat_f,
            rstd_f,
            hf,
        });
        Ok((logits, cache, trace))
    }

    /// Logits at the scored positions, optionally with every residual state
    /// and with states replaced at the given sites.
    pub fn forward(
        &self,
        batch: &Batch,
        capture: bool,
        interventions: &[Intervention<'_, T>],
    ) -> Result<ForwardOutput<T>> {
        let (logits, cache, _) = self.run(batch, interventions, capture, false)?;
        Ok(ForwardOutput {
            logits,
            vocab_size: self.config.vocab_size,
            n_scored: batch.n_scored,
            cache,
        })
    }

    /// Final norm and unembedding of one residual state.
    pub fn lens_logits(&self, state: &[T]) -> Vec<T> {
        let d = self.config.hidden_dim;
        assert_eq!(state.len() % d, 0, "state dimension must be a multiple of hidden_dim");
        let (hf, _, _) = layernorm(state, &self.params[self.layout.lnf_g.clone()], &self.params[self.layout.lnf_b.clone()], d);
        let rows = state.len() / d;
        let mut logits = vec![T::zero(); rows * self.config.vocab_size];
        matmul(rows, d, self.config.vocab_size, &hf, false, &self.params[self.layout.wte.clone()], true, &mut logits, false);
        logits
    }

    /// Mean cross-entropy over scored positions and its exact gradient.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(T, Vec<T>)> {
        if batch.targets.len() != batch.n_seq * batch.n_scored {
            return Err(Error::Shape("batch has no targets for its scored positions".into()));
        }
        let (logits, _, trace) = self.run(batch, &[], false, true)?;
        let trace = trace.expect("trace requested");
        let cfg = &self.config;
        let (d, v) = (cfg.hidden_dim, cfg.vocab_size);
        let rows = batch.n_seq * batch.n_scored;

        let mut loss = T::zero();
        let mut dlogits = vec![T::zero(); rows * v];
        let inv_rows = T::of(1.0 / rows as f64);
        for r in 0..rows {
            let row = &logits[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
            let tgt = batch.targets[r] as usize;
            if tgt >= v {
                return Err(Error::Shape(format!("target token {tgt} outside vocabulary")));
            }
            loss = loss + (z.ln() + max - row[tgt]);
            let dr = &mut dlogits[r * v..(r + 1) * v];
            for (k, g) in dr.iter_mut().enumerate() {
                *g = (row[k] - max).exp() / z * inv_rows;
            }
            dr[tgt] = dr[tgt] - inv_rows;
        }
        loss = loss * inv_rows;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss".into() });
        }

        let mut grads = vec![T::zero(); self.params.len()];
        let lay = &self.layout;
        // Tied head: d wte += dlogits^T hf, dhf = dlogits wte.
        matmul(v, rows, d, &dlogits, true, &trace.hf, false, &mut grads[lay.wte.clone()], true);
        let mut dhf = vec![T::zero(); rows * d];
        matmul(rows, v, d, &dlogits, false, &self.params[lay.wte.clone()], false, &mut dhf, false);
        let (mut dg, mut db) = (vec![T::zero(); d], vec![T::zero(); d]);
        let dlast = layernorm_backward(&dhf, &trace.xhat_f, &trace.rstd_f, &self.params[lay.lnf_g.clone()], &mut dg, &mut db, d);
        add_into(&mut grads[lay.lnf_g.clone()], &dg);
        add_into(&mut grads[lay.lnf_b.clone()], &db);

        let n = batch.n_seq * batch.seq_len;
        let mut dx = vec![T::zero(); n * d];
        let mut r = 0;
        for s in 0..batch.n_seq {
            for pos in batch.scored_positions() {
                let at = (s * batch.seq_len + pos) * d;
                dx[at..at + d].copy_from_slice(&dlast[r * d..(r + 1) * d]);
                r += 1;
            }
        }

        for l in (0..cfg.n_layers).rev() {
            dx = self.block_backward(l, &trace.layers[l], dx, batch.n_seq, batch.seq_len, &mut grads);
        }

        let wte = lay.wte.start;
        let wpe = lay.wpe.start;
        for (i, &tok) in batch.tokens.iter().enumerate() {
            let pos = i % batch.seq_len;
            let row = &dx[i * d..(i + 1) * d];
            add_into(&mut grads[wte + tok as usize * d..wte + (tok as usize + 1) * d], row);
            add_into(&mut grads[wpe + pos * d..wpe + (pos + 1) * d], row);
        }
        Ok((loss, grads))
    }

    fn block_backward(
        &self,
        layer: usize,
        rec: &LayerRecord<T>,
        dout: Vec<T>,
        n_seq: usize,
        seq_len: usize,
        grads: &mut [T],
    ) -> Vec<T> {
        let cfg = &self.config;
        let (d, nh, dh) = (cfg.hidden_dim, cfg.n_heads, cfg.head_dim());
        let n = n_seq * seq_len;
        let p = &self.params;
        let bl = self.block(layer).clone();

        // MLP
        sum_rows_into(&dout, &mut grads[bl.b_proj.clone()]);
        matmul(4 * d, n, d, &rec.act, true, &dout, false, &mut grads[bl.w_proj.clone()], true);
        let mut dfc = vec![T::zero(); n * 4 * d];
        matmul(n, d, 4 * d, &dout, false, &p[bl.w_proj.clone()], true, &mut dfc, false);
        for ((g, &x), &t) in dfc.iter_mut().zip(&rec.fc).zip(&rec.gelu_t) {
            *g = *g * gelu_grad(x, t);
        }
        sum_rows_into(&dfc, &mut grads[bl.b_fc.clone()]);
        matmul(d, n, 4 * d, &rec.h2, true, &dfc, false, &mut grads[bl.w_fc.clone()], true);
        let mut dh2 = vec![T::zero(); n * d];
        matmul(n, 4 * d, d, &dfc, false, &p[bl.w_fc.clone()], true, &mut dh2, false);
        let (mut dg, mut db) = (vec![T::zero(); d], vec![T::zero(); d]);
        let dmid_ln = layernorm_backward(&dh2, &rec.xhat2, &rec.rstd2, &p[bl.ln2_g.clone()], &mut dg, &mut db, d);
        add_into(&mut grads[bl.ln2_g.clone()], &dg);
        add_into(&mut grads[bl.ln2_b.clone()], &db);
        let mut dmid = dout;
        add_into(&mut dmid, &dmid_ln);

        // Attention output projection
        sum_rows_into(&dmid, &mut grads[bl.b_o.clone()]);
        matmul(d, n, d, &rec.att, true, &dmid, false, &mut grads[bl.w_o.clone()], true);
        let mut datt = vec![T::zero(); n * d];
        matmul(n, d, d, &dmid, false, &p[bl.w_o.clone()], true, &mut datt, false);

        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qkv = &rec.qkv;
        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut dp = vec![T::zero(); seq_len];
        for s in 0..n_seq {
            for h in 0..nh {
                let pb = (s * nh + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let prow = &rec.probs[pb + i * seq_len..pb + (i + 1) * seq_len];
                    let go = (s * seq_len + i) * d + h * dh;
                    let mut dot_pd = T::zero();
                    for j in 0..=i {
                        let vj = (s * seq_len + j) * 3 * d + 2 * d + h * dh;
                        let mut acc = T::zero();
                        for c in 0..dh {
                            acc = acc + datt[go + c] * qkv[vj + c];
                            dqkv[vj + c] = dqkv[vj + c] + prow[j] * datt[go + c];
                        }
                        dp[j] = acc;
                        dot_pd = dot_pd + prow[j] * acc;
                    }
                    let qi = (s * seq_len + i) * 3 * d + h * dh;
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - dot_pd) * scale;
                        let kj = (s * seq_len + j) * 3 * d + d + h * dh;
                        for c in 0..dh {
                            dqkv[qi + c] = dqkv[qi + c] + ds * qkv[kj + c];
                            dqkv[kj + c] = dqkv[kj + c] + ds * qkv[qi + c];
                        }
                    }
                }
            }
        }
        sum_rows_into(&dqkv, &mut grads[bl.b_qkv.clone()]);
        matmul(d, n, 3 * d, &rec.h1, true, &dqkv, false, &mut grads[bl.w_qkv.clone()], true);
        let mut dh1 = vec![T::zero(); n * d];
        matmul(n, 3 * d, d, &dqkv, false, &p[bl.w_qkv.clone()], true, &mut dh1, false);
        let (mut dg, mut db) = (vec![T::zero(); d], vec![T::zero(); d]);
        let dx_ln = layernorm_backward(&dh1, &rec.xhat1, &rec.rstd1, &p[bl.ln1_g.clone()], &mut dg, &mut db, d);
        add_into(&mut grads[bl.ln1_g.clone()], &dg);
        add_into(&mut grads[bl.ln1_b.clone()], &db);
        let mut dx = dmid;
        add_into(&mut dx, &dx_ln);
        dx
    }

    /// Greedy answer tokens for sequences sharing one layout: the first
    /// answer token is read at the last input position; for two-token
    /// answers the prediction is fed back for the second.
    pub fn greedy(&self, seqs: &[&TokenSequence]) -> Result<Vec<Vec<u32>>> {
        let Some(first) = seqs.first() else {
            return Ok(Vec::new());
        };
        let k = first.target.len();
        let mut rows: Vec<Vec<u32>> = seqs.iter().map(|s| s.input.clone()).collect();
        let mut preds = vec![Vec::with_capacity(k); seqs.len()];
        for _ in 0..k {
            let out = self.forward(&Batch::from_rows(&rows, 1)?, false, &[])?;
            for (i, t) in out.argmax().into_iter().enumerate() {
                preds[i].push(t);
                rows[i].push(t);
            }
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, ModelConfig, ParamClass};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n_seq: usize, seq_len: usize, n_scored: usize, vocab: usize) -> Batch {
        Batch {
            tokens: (0..n_seq * seq_len).map(|_| rng.gen_range(0..vocab as u32)).collect(),
            n_seq,
            seq_len,
            n_scored,
            targets: (0..n_seq * n_scored).map(|_| rng.gen_range(0..vocab as u32)).collect(),
        }
    }

    /// Random weights so that norm gains and biases are exercised too.
    fn perturbed_model(cfg: &ModelConfig, seed: u64) -> Model<f64> {
        let mut m: Model<f64> = init_model(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for x in m.params.iter_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
        m
    }

    fn grad_check(cfg: &ModelConfig, n_scored: usize, seed: u64) -> Vec<(String, f64)> {
        let m = perturbed_model(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, 3, 4, n_scored, cfg.vocab_size);
        let (_, grads) = m.loss_and_grads(&batch).unwrap();
        let mut worst = Vec::new();
        for t in &m.layout.tensors {
            let mut w: f64 = 0.0;
            let idx: Vec<usize> = if t.range.len() <= 40 {
                t.range.clone().collect()
            } else {
                (0..40).map(|_| rng.gen_range(t.range.clone())).collect()
            };
            for i in idx {
                let h = 1e-5;
                let mut mp = m.clone();
                mp.params[i] += h;
                let lp = mp.loss_and_grads(&batch).unwrap().0;
                mp.params[i] -= 2.0 * h;
                let lm = mp.loss_and_grads(&batch).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - grads[i]).abs() / (fd.abs() + grads[i].abs()).max(1e-6);
                w = w.max(err);
            }
            worst.push((t.name.clone(), w));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ModelConfig::new(2, 8, 2, 4, 11);
        for (name, err) in grad_check(&cfg, 1, 1).into_iter().chain(grad_check(&cfg, 2, 2)) {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn shared_gradients_sum_over_aliases() {
        let cfg = ModelConfig::new(4, 8, 2, 4, 11).with_halves_shared();
        for (name, err) in grad_check(&cfg, 1, 3) {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let cfg = ModelConfig::new(1, 8, 2, 3, 17);
        let mut m: Model<f64> = init_model(&cfg, 0).unwrap();
        let r = m.layout.wte.clone();
        m.params[r].fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = random_batch(&mut rng, 5, 3, 1, 17);
        let (loss, _) = m.loss_and_grads(&b).unwrap();
        assert!((loss - 17f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_same_loss_and_grads() {
        let cfg = ModelConfig::new(2, 8, 2, 4, 11);
        let m = perturbed_model(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_batch(&mut rng, 4, 3, 1, 11);
        let (l1, g1) = m.loss_and_grads(&b).unwrap();
        let (l2, g2) = m.loss_and_grads(&b.repeated(2)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_order_only_permutes_logits() {
        let cfg = ModelConfig::new(2, 16, 4, 4, 13);
        let m: Model<f32> = init_model(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_batch(&mut rng, 3, 4, 1, 13);
        let mut rev = b.clone();
        rev.tokens = b.tokens.chunks(4).rev().flatten().copied().collect();
        rev.targets = b.targets.iter().rev().copied().collect();
        let (o1, o2) = (m.forward(&b, false, &[]).unwrap(), m.forward(&rev, false, &[]).unwrap());
        for s in 0..3 {
            assert_eq!(o1.row(s, 0), o2.row(2 - s, 0));
        }
        let (l1, _) = m.loss_and_grads(&b).unwrap();
        let (l2, _) = m.loss_and_grads(&rev).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
    }

    #[test]
    fn cache_reproduces_logits() {
        let cfg = ModelConfig::new(3, 16, 2, 5, 19);
        let m: Model<f32> = init_model(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_batch(&mut rng, 4, 5, 2, 19);
        let out = m.forward(&b, true, &[]).unwrap();
        let cache = out.cache.as_ref().unwrap();
        assert_eq!(cache.states.len(), 4);
        for s in 0..4 {
            for (k, pos) in b.scored_positions().enumerate() {
                let lens = m.lens_logits(cache.state(3, s, pos));
                for (a, c) in lens.iter().zip(out.row(s, k)) {
                    assert!((a - c).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn causal_mask_isolates_early_positions() {
        let cfg = ModelConfig::new(2, 16, 2, 4, 13);
        let m: Model<f32> = init_model(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_batch(&mut rng, 2, 4, 4, 13);
        let mut c = b.clone();
        for s in 0..2 {
            for pos in 1..4 {
                c.tokens[s * 4 + pos] = (c.tokens[s * 4 + pos] + 1) % 13;
            }
        }
        let (o1, o2) = (m.forward(&b, true, &[]).unwrap(), m.forward(&c, true, &[]).unwrap());
        let (c1, c2) = (o1.cache.as_ref().unwrap(), o2.cache.as_ref().unwrap());
        for l in 0..=2 {
            assert_eq!(c1.state(l, 0, 0), c2.state(l, 0, 0));
            assert_eq!(c1.state(l, 1, 0), c2.state(l, 1, 0));
        }
        assert_eq!(o1.row(0, 0), o2.row(0, 0));
    }

    #[test]
    fn interventions() {
        let cfg = ModelConfig::new(2, 16, 2, 4, 13);
        let m: Model<f32> = init_model(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_batch(&mut rng, 2, 4, 1, 13);
        let b = random_batch(&mut rng, 2, 4, 1, 13);
        let oa = m.forward(&a, true, &[]).unwrap();
        let ob = m.forward(&b, true, &[]).unwrap();
        let (ca, cb) = (oa.cache.as_ref().unwrap(), ob.cache.as_ref().unwrap());

        // Final state swap reproduces the other input's logits.
        let swap = cb.site(2, 3);
        let o = m.forward(&a, false, &[Intervention { layer: 2, position: 3, values: &swap }]).unwrap();
        assert_eq!(o.logits, ob.logits);

        // Identity patches change nothing.
        for layer in 0..=2 {
            for pos in 0..4 {
                let own = ca.site(layer, pos);
                let o = m.forward(&a, true, &[Intervention { layer, position: pos, values: &own }]).unwrap();
                assert_eq!(o.logits, oa.logits);
                assert_eq!(o.cache.unwrap().states, ca.states);
            }
        }

        // The patched state enters the next block.
        let patch = cb.site(1, 2);
        let o = m.forward(&a, true, &[Intervention { layer: 1, position: 2, values: &patch }]).unwrap();
        assert_eq!(o.cache.unwrap().site(1, 2), patch);

        let bad = [Intervention { layer: 3, position: 0, values: &patch }];
        assert!(matches!(m.forward(&a, false, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let cfg = ModelConfig::new(1, 8, 2, 3, 7);
        let mut m: Model<f32> = init_model(&cfg, 0).unwrap();
        m.params[0] = f32::NAN;
        let b = Batch {
            tokens: vec![0, 1, 2],
            n_seq: 1,
            seq_len: 3,
            n_scored: 1,
            targets: vec![3],
        };
        assert!(matches!(m.loss_and_grads(&b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn every_class_is_covered_by_the_layout() {
        let cfg = ModelConfig::new(2, 8, 2, 4, 11);
        let m: Model<f32> = init_model(&cfg, 0).unwrap();
        for class in [
            ParamClass::Embedding,
            ParamClass::AttentionWeight,
            ParamClass::AttentionBias,
            ParamClass::MlpWeight,
            ParamClass::MlpBias,
            ParamClass::Norm,
        ] {
            assert!(m.layout.tensors.iter().any(|t| t.class == class));
        }
    }
}
