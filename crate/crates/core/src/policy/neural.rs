//! Small causal attention network over token sequences, trained with
//! hand-written backpropagation in double precision.
//!
//! Input is `[<bos>] + context + target[..n-1]`; position `|context| + i`
//! predicts target token `i`. Each input position is embedded as the sum of a
//! token, a segment, a within-segment position and (for instruction tokens) a
//! position counted from the end of the instruction. Each layer applies
//! pre-normalized single-head causal attention and a tanh MLP, both residual.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FcpError, Result};
use crate::sequence::{Role, TokenSequence};
use crate::vocab::Token;

use super::optim::{AdamMoments, Moments, OptimizerState};
use super::{aggregation_denominator, AggregationMode, Example, LogProb};

const SEG_BOS: usize = 0;
const SEG_FEEDBACK: usize = 1;
const SEG_INSTRUCTION: usize = 2;
const SEG_REASONING: usize = 3;
const SEG_ANSWER: usize = 4;
const N_SEGMENTS: usize = 5;

const TOK: usize = 0;
const SEG: usize = 1;
const POS: usize = 2;
const IPOS: usize = 3;
const LAYER_BASE: usize = 4;
const PER_LAYER: usize = 10;
const G1: usize = 0;
const WQ: usize = 1;
const WK: usize = 2;
const WV: usize = 3;
const WO: usize = 4;
const G2: usize = 5;
const W1: usize = 6;
const B1: usize = 7;
const W2: usize = 8;
const B2: usize = 9;

const RMS_EPS: f64 = 1e-6;
/// Examples per gradient shard; shards are reduced in order for determinism.
const CHUNK: usize = 4;
/// Tokens the network may never emit.
const MASKED: [Token; 4] = [Token::PAD, Token::BOS, Token::EF_OPEN, Token::EF_CLOSE];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuralConfig {
    pub d_model: usize,
    pub layers: usize,
    pub hidden: usize,
    pub max_context: usize,
    pub max_response: usize,
    /// Standard deviation of the initial embedding rows.
    pub init_std: f64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            d_model: 64,
            layers: 2,
            hidden: 128,
            max_context: 64,
            max_response: 16,
            init_std: 0.1,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.hidden == 0 || self.max_context == 0 || self.max_response == 0 {
            return Err(FcpError::Config("policy dimensions must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(FcpError::Config("policy.init_std must be positive".into()));
        }
        Ok(())
    }

    fn positions(&self) -> usize {
        self.max_context + self.max_response + 1
    }
}

#[derive(Clone, Debug)]
pub struct NeuralPolicy {
    config: NeuralConfig,
    vocab_size: usize,
    reasoning: Vec<Token>,
    tensors: Vec<Array2<f64>>,
}

struct Layout {
    inputs: Vec<Token>,
    seg: Vec<usize>,
    pos: Vec<usize>,
    ipos: Vec<usize>,
}

struct LayerCache {
    n1: Array2<f64>,
    r1: Array1<f64>,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    z: Array2<f64>,
    n2: Array2<f64>,
    r2: Array1<f64>,
    b: Array2<f64>,
    act: Array2<f64>,
}

struct Forward {
    layout: Layout,
    layers: Vec<LayerCache>,
    nf: Array2<f64>,
    rf: Array1<f64>,
    f: Array2<f64>,
    logp: Array2<f64>,
}

fn rmsnorm(h: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = h.ncols() as f64;
    let r = h.map_axis(Axis(1), |row| (row.dot(&row) / d + RMS_EPS).sqrt());
    let n = h / &r.view().insert_axis(Axis(1));
    (n, r)
}

fn rmsnorm_back(dn: &Array2<f64>, n: &Array2<f64>, r: &Array1<f64>) -> Array2<f64> {
    let d = n.ncols() as f64;
    let proj = (dn * n).sum_axis(Axis(1)) / d;
    (dn - &(n * &proj.insert_axis(Axis(1)))) / r.view().insert_axis(Axis(1))
}

fn add_row(t: &mut Array2<f64>, v: &Array1<f64>) {
    let mut r = t.row_mut(0);
    r += v;
}

impl NeuralPolicy {
    /// Random initialization. `reasoning` lists the tokens that open the
    /// reasoning segment of a response (style marker and fillers).
    pub fn new<R: Rng + ?Sized>(config: NeuralConfig, vocab_size: usize, reasoning: Vec<Token>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.hidden;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };
        let e = config.init_std;
        let wd = 1.0 / (d as f64).sqrt();
        let wh = 1.0 / (h as f64).sqrt();
        let mut tensors = vec![
            normal(vocab_size, d, e),
            normal(N_SEGMENTS, d, e),
            normal(config.positions(), d, e),
            normal(config.max_context + 1, d, e),
        ];
        for _ in 0..config.layers {
            tensors.push(Array2::ones((1, d)));
            tensors.push(normal(d, d, wd));
            tensors.push(normal(d, d, wd));
            tensors.push(normal(d, d, wd));
            tensors.push(normal(d, d, 0.5 * wd));
            tensors.push(Array2::ones((1, d)));
            tensors.push(normal(d, h, wd));
            tensors.push(Array2::zeros((1, h)));
            tensors.push(normal(h, d, 0.5 * wh));
            tensors.push(Array2::zeros((1, d)));
        }
        tensors.push(Array2::ones((1, d)));
        tensors.push(normal(d, vocab_size, wd));
        tensors.push(Array2::zeros((1, vocab_size)));
        Ok(NeuralPolicy {
            config,
            vocab_size,
            reasoning,
            tensors,
        })
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["tok_emb", "seg_emb", "pos_emb", "ipos_emb"].map(String::from).to_vec();
        for l in 0..self.config.layers {
            for n in ["g1", "wq", "wk", "wv", "wo", "g2", "w1", "b1", "w2", "b2"] {
                names.push(format!("layer{l}.{n}"));
            }
        }
        names.extend(["g_final", "w_out", "b_out"].map(String::from));
        names
    }

    fn gf(&self) -> usize {
        LAYER_BASE + PER_LAYER * self.config.layers
    }

    fn layer(&self, l: usize, k: usize) -> &Array2<f64> {
        &self.tensors[LAYER_BASE + PER_LAYER * l + k]
    }

    /// Rows 3 and 4 of the token embedding (the feedback delimiters) are
    /// redrawn from a normal fitted to the other rows (diagonal covariance).
    pub fn init_special_embeddings<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let emb = &mut self.tensors[TOK];
        let specials = [Token::EF_OPEN.index(), Token::EF_CLOSE.index()];
        let others: Vec<usize> = (0..emb.nrows()).filter(|i| !specials.contains(i)).collect();
        let n = others.len() as f64;
        for j in 0..emb.ncols() {
            let mean = others.iter().map(|&i| emb[[i, j]]).sum::<f64>() / n;
            let var = others.iter().map(|&i| (emb[[i, j]] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let dist = Normal::new(mean, var.sqrt().max(f64::MIN_POSITIVE)).expect("finite moments");
            for &s in &specials {
                emb[[s, j]] = dist.sample(rng);
            }
        }
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| t.index() >= self.vocab_size) {
            Some(t) => Err(FcpError::Contract(format!("token {t} outside vocabulary of {}", self.vocab_size))),
            None => Ok(()),
        }
    }

    fn check_context(&self, context: &TokenSequence) -> Result<()> {
        if !matches!(context.role(), Role::Instruction | Role::Context | Role::CritiqueContext) {
            return Err(FcpError::Contract(format!("cannot condition on a {:?} sequence", context.role())));
        }
        if context.len() > self.config.max_context {
            return Err(FcpError::Contract(format!(
                "context of {} tokens exceeds max_context {}",
                context.len(),
                self.config.max_context
            )));
        }
        self.check_tokens(context.tokens())
    }

    fn layout(&self, context: &[Token], prefix: &[Token]) -> Layout {
        let na = self.config.max_context;
        let pmax = self.config.positions() - 1;
        let mut l = Layout {
            inputs: vec![Token::BOS],
            seg: vec![SEG_BOS],
            pos: vec![0],
            ipos: vec![na],
        };
        let instr_start = if context.first() == Some(&Token::EF_OPEN) {
            let close = context.iter().position(|t| *t == Token::EF_CLOSE).unwrap_or(context.len() - 1);
            for (i, t) in context[..=close].iter().enumerate() {
                l.inputs.push(*t);
                l.seg.push(SEG_FEEDBACK);
                l.pos.push(i.min(pmax));
                l.ipos.push(na);
            }
            close + 1
        } else {
            0
        };
        let n_instr = context.len() - instr_start;
        for (i, t) in context[instr_start..].iter().enumerate() {
            l.inputs.push(*t);
            l.seg.push(SEG_INSTRUCTION);
            l.pos.push(i.min(pmax));
            l.ipos.push((n_instr - 1 - i).min(na - 1));
        }
        let (mut n_reason, mut n_answer) = (0, 0);
        for t in prefix {
            l.inputs.push(*t);
            l.ipos.push(na);
            if self.reasoning.contains(t) {
                l.seg.push(SEG_REASONING);
                l.pos.push(n_reason.min(pmax));
                n_reason += 1;
            } else {
                l.seg.push(SEG_ANSWER);
                l.pos.push(n_answer.min(pmax));
                n_answer += 1;
            }
        }
        l
    }

    fn forward(&self, layout: Layout) -> Forward {
        let t_len = layout.inputs.len();
        let d = self.config.d_model;
        let mut h = Array2::<f64>::zeros((t_len, d));
        for t in 0..t_len {
            let mut row = h.row_mut(t);
            row += &self.tensors[TOK].row(layout.inputs[t].index());
            row += &self.tensors[SEG].row(layout.seg[t]);
            row += &self.tensors[POS].row(layout.pos[t]);
            row += &self.tensors[IPOS].row(layout.ipos[t]);
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (n1, r1) = rmsnorm(&h);
            let a = &n1 * &self.layer(l, G1).row(0);
            let q = a.dot(self.layer(l, WQ));
            let k = a.dot(self.layer(l, WK));
            let v = a.dot(self.layer(l, WV));
            let mut p = q.dot(&k.t()) * scale;
            for i in 0..t_len {
                let mut row = p.row_mut(i);
                let max = row.iter().take(i + 1).copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..t_len {
                    if j <= i {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                row /= sum;
            }
            let z = p.dot(&v);
            h = h + z.dot(self.layer(l, WO));
            let (n2, r2) = rmsnorm(&h);
            let b = &n2 * &self.layer(l, G2).row(0);
            let act = (b.dot(self.layer(l, W1)) + self.layer(l, B1).row(0)).mapv(f64::tanh);
            h = h + act.dot(self.layer(l, W2)) + self.layer(l, B2).row(0);
            layers.push(LayerCache {
                n1,
                r1,
                a,
                q,
                k,
                v,
                p,
                z,
                n2,
                r2,
                b,
                act,
            });
        }
        let gf = self.gf();
        let (nf, rf) = rmsnorm(&h);
        let f = &nf * &self.tensors[gf].row(0);
        let mut logp = f.dot(&self.tensors[gf + 1]) + self.tensors[gf + 2].row(0);
        for mut row in logp.rows_mut() {
            for m in MASKED {
                row[m.index()] = f64::NEG_INFINITY;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            row -= lse;
        }
        Forward {
            layout,
            layers,
            nf,
            rf,
            f,
            logp,
        }
    }

    /// Adds `scale * d(sum_t nll_t)/d(theta)` into `grads`.
    fn backward(&self, fwd: &Forward, ctx_len: usize, target: &[Token], scale: f64, grads: &mut [Array2<f64>]) {
        let t_len = fwd.layout.inputs.len();
        let mut dlogits = Array2::<f64>::zeros((t_len, self.vocab_size));
        for (i, y) in target.iter().enumerate() {
            let t = ctx_len + i;
            let mut row = dlogits.row_mut(t);
            row.assign(&fwd.logp.row(t).mapv(f64::exp));
            row[y.index()] -= 1.0;
            row *= scale;
        }
        let gf = self.gf();
        grads[gf + 1] += &fwd.f.t().dot(&dlogits);
        add_row(&mut grads[gf + 2], &dlogits.sum_axis(Axis(0)));
        let df = dlogits.dot(&self.tensors[gf + 1].t());
        add_row(&mut grads[gf], &(&df * &fwd.nf).sum_axis(Axis(0)));
        let dnf = &df * &self.tensors[gf].row(0);
        let mut dh = rmsnorm_back(&dnf, &fwd.nf, &fwd.rf);
        let inv = 1.0 / (self.config.d_model as f64).sqrt();
        for l in (0..self.config.layers).rev() {
            let c = &fwd.layers[l];
            let base = LAYER_BASE + PER_LAYER * l;
            // MLP branch
            grads[base + W2] += &c.act.t().dot(&dh);
            add_row(&mut grads[base + B2], &dh.sum_axis(Axis(0)));
            let dact = dh.dot(&self.layer(l, W2).t());
            let dpre = dact * &c.act.mapv(|a| 1.0 - a * a);
            grads[base + W1] += &c.b.t().dot(&dpre);
            add_row(&mut grads[base + B1], &dpre.sum_axis(Axis(0)));
            let db = dpre.dot(&self.layer(l, W1).t());
            add_row(&mut grads[base + G2], &(&db * &c.n2).sum_axis(Axis(0)));
            let dn2 = &db * &self.layer(l, G2).row(0);
            dh = dh + rmsnorm_back(&dn2, &c.n2, &c.r2);
            // attention branch
            grads[base + WO] += &c.z.t().dot(&dh);
            let dz = dh.dot(&self.layer(l, WO).t());
            let dp = dz.dot(&c.v.t());
            let dv = c.p.t().dot(&dz);
            let rowdot = (&dp * &c.p).sum_axis(Axis(1));
            let ds = (&c.p * &(dp - &rowdot.insert_axis(Axis(1)))) * inv;
            let dq = ds.dot(&c.k);
            let dk = ds.t().dot(&c.q);
            grads[base + WQ] += &c.a.t().dot(&dq);
            grads[base + WK] += &c.a.t().dot(&dk);
            grads[base + WV] += &c.a.t().dot(&dv);
            let da = dq.dot(&self.layer(l, WQ).t()) + dk.dot(&self.layer(l, WK).t()) + dv.dot(&self.layer(l, WV).t());
            add_row(&mut grads[base + G1], &(&da * &c.n1).sum_axis(Axis(0)));
            let dn1 = &da * &self.layer(l, G1).row(0);
            dh = dh + rmsnorm_back(&dn1, &c.n1, &c.r1);
        }
        let lay = &fwd.layout;
        for t in 0..t_len {
            let g = dh.row(t);
            let mut r = grads[TOK].row_mut(lay.inputs[t].index());
            r += &g;
            let mut r = grads[SEG].row_mut(lay.seg[t]);
            r += &g;
            let mut r = grads[POS].row_mut(lay.pos[t]);
            r += &g;
            let mut r = grads[IPOS].row_mut(lay.ipos[t]);
            r += &g;
        }
    }

    fn run(&self, context: &TokenSequence, target: &TokenSequence) -> Result<Forward> {
        self.check_context(context)?;
        self.check_tokens(target.tokens())?;
        if target.is_empty() {
            return Err(FcpError::Contract("empty target sequence".into()));
        }
        let n = target.len();
        Ok(self.forward(self.layout(context.tokens(), &target.tokens()[..n - 1])))
    }

    pub fn log_prob(&self, context: &TokenSequence, o: &TokenSequence) -> Result<LogProb> {
        if o.is_empty() {
            return Ok(LogProb {
                total: 0.0,
                per_token: Vec::new(),
            });
        }
        let fwd = self.run(context, o)?;
        let c = context.len();
        let per_token: Vec<f64> = o.tokens().iter().enumerate().map(|(i, y)| fwd.logp[[c + i, y.index()]]).collect();
        Ok(LogProb {
            total: per_token.iter().sum(),
            per_token,
        })
    }

    /// Next-token log-probabilities after `context` and the generated `prefix`.
    pub fn next_token_logp(&self, context: &TokenSequence, prefix: &[Token]) -> Result<Array1<f64>> {
        self.check_context(context)?;
        let fwd = self.forward(self.layout(context.tokens(), prefix));
        Ok(fwd.logp.row(fwd.logp.nrows() - 1).to_owned())
    }

    fn generate(&self, context: &TokenSequence, mut pick: impl FnMut(&Array1<f64>) -> Token) -> Result<TokenSequence> {
        self.check_context(context)?;
        let mut out = Vec::new();
        while out.len() < self.config.max_response {
            let logp = self.next_token_logp(context, &out)?;
            let t = pick(&logp);
            out.push(t);
            if t == Token::EOS {
                break;
            }
        }
        TokenSequence::response(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, context: &TokenSequence, rng: &mut R, temperature: f64) -> Result<TokenSequence> {
        if !(temperature > 0.0) {
            return Err(FcpError::Contract(format!("temperature {temperature} must be positive")));
        }
        self.generate(context, |logp| {
            let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logp.iter().map(|z| ((z - max) / temperature).exp()).collect();
            let total: f64 = w.iter().sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut last = Token::EOS;
            for (i, x) in w.iter().enumerate() {
                if *x > 0.0 {
                    last = Token::new(i as u32);
                    acc += x;
                    if u < acc {
                        return last;
                    }
                }
            }
            last
        })
    }

    /// Token-level argmax; the lowest id wins exact ties.
    pub fn greedy(&self, context: &TokenSequence) -> Result<TokenSequence> {
        self.generate(context, |logp| {
            let mut best = 0;
            for i in 1..logp.len() {
                if logp[i] > logp[best] {
                    best = i;
                }
            }
            Token::new(best as u32)
        })
    }

    /// Aggregated loss and its exact gradient. Shards of the batch run in
    /// parallel and are summed in batch order.
    pub fn loss_and_gradient(&self, batch: &[Example], mode: AggregationMode) -> Result<(f64, Vec<Array2<f64>>)> {
        if batch.is_empty() {
            return Err(FcpError::Contract("empty batch".into()));
        }
        let denom = aggregation_denominator(batch, mode);
        let shards: Vec<Result<(f64, Vec<Array2<f64>>)>> = batch
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(s, chunk)| {
                let mut grads: Vec<Array2<f64>> = self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
                let mut loss = 0.0;
                for (j, ex) in chunk.iter().enumerate() {
                    let index = s * CHUNK + j;
                    let fwd = self.run(&ex.context, &ex.target)?;
                    let c = ex.context.len();
                    let nll: f64 = -ex
                        .target
                        .tokens()
                        .iter()
                        .enumerate()
                        .map(|(i, y)| fwd.logp[[c + i, y.index()]])
                        .sum::<f64>();
                    if !nll.is_finite() || !ex.weight.is_finite() {
                        return Err(FcpError::NonFiniteLoss { index });
                    }
                    let scale = ex.weight / denom;
                    loss += scale * nll;
                    self.backward(&fwd, c, ex.target.tokens(), scale, &mut grads);
                }
                Ok((loss, grads))
            })
            .collect();
        let mut total = 0.0;
        let mut grads: Vec<Array2<f64>> = self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        for shard in shards {
            let (l, g) = shard?;
            total += l;
            for (a, b) in grads.iter_mut().zip(g) {
                *a += &b;
            }
        }
        Ok((total, grads))
    }

    pub fn gradient_step(&mut self, opt: &mut OptimizerState, batch: &[Example], mode: AggregationMode, lr: f64) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradient(batch, mode)?;
        let fresh = match &opt.moments {
            Moments::Neural(m) => m.len() != self.tensors.len() || m.iter().zip(&self.tensors).any(|(m, t)| m.m.len() != t.len()),
            _ => true,
        };
        if fresh {
            opt.moments = Moments::Neural(self.tensors.iter().map(|t| AdamMoments::new(t.len())).collect());
        }
        let Moments::Neural(moments) = &mut opt.moments else {
            unreachable!("moments initialized above")
        };
        for ((t, g), m) in self.tensors.iter_mut().zip(&grads).zip(moments.iter_mut()) {
            let ts = t.as_slice_mut().expect("standard layout");
            m.update(ts, g.as_slice().expect("standard layout"), lr, super::optim::EPS);
        }
        opt.step += 1;
        if let Some(i) = self.tensors.iter().position(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(FcpError::Diverged(format!(
                "non-finite weights in {} after step {}",
                self.tensor_names()[i],
                opt.step
            )));
        }
        Ok(loss)
    }

    pub(crate) fn state(&self) -> NeuralState {
        NeuralState {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            reasoning: self.reasoning.clone(),
            tensors: self
                .tensor_names()
                .into_iter()
                .zip(&self.tensors)
                .map(|(name, t)| TensorState {
                    name,
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub(crate) fn from_state(state: NeuralState) -> Result<Self> {
        state.config.validate()?;
        let tensors = state
            .tensors
            .into_iter()
            .map(|t| {
                Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                    .map_err(|e| FcpError::Contract(format!("tensor {}: {e}", t.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let p = NeuralPolicy {
            config: state.config,
            vocab_size: state.vocab_size,
            reasoning: state.reasoning,
            tensors,
        };
        if p.tensors.len() != p.tensor_names().len() {
            return Err(FcpError::Contract("checkpoint has the wrong number of tensors".into()));
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct TensorState {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct NeuralState {
    config: NeuralConfig,
    vocab_size: usize,
    reasoning: Vec<Token>,
    tensors: Vec<TensorState>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::optim::LrSchedule;
    use crate::rng::stream;
    use crate::sequence::wrap_context;

    const V: usize = 24;

    fn seq(role: Role, ids: &[u32]) -> TokenSequence {
        TokenSequence::new(role, ids.iter().map(|&i| Token::new(i)).collect()).unwrap()
    }

    fn small() -> NeuralPolicy {
        let cfg = NeuralConfig {
            d_model: 8,
            hidden: 12,
            max_context: 12,
            max_response: 6,
            ..NeuralConfig::default()
        };
        NeuralPolicy::new(cfg, V, vec![Token::new(5)], &mut stream(1, "nn", 0)).unwrap()
    }

    fn batch() -> Vec<Example> {
        let x = seq(Role::Instruction, &[10, 11, 12]);
        let c = seq(Role::Feedback, &[20, 21]);
        vec![
            Example::new(wrap_context(&c, &x).unwrap(), seq(Role::Response, &[5, 13, 2])),
            Example::weighted(x.clone(), seq(Role::Response, &[14, 2]), 0.7),
            Example::new(seq(Role::Instruction, &[15]), seq(Role::Response, &[5, 5, 16, 17, 2])),
        ]
    }

    #[test]
    fn log_prob_is_sum_of_per_token_terms() {
        let p = small();
        let mut rng = stream(2, "nn", 0);
        for _ in 0..100 {
            let x: Vec<u32> = (0..rng.random_range(1..6)).map(|_| rng.random_range(5..V as u32)).collect();
            let o: Vec<u32> = (0..rng.random_range(1..5)).map(|_| rng.random_range(5..V as u32)).collect();
            let lp = p.log_prob(&seq(Role::Instruction, &x), &seq(Role::Response, &o)).unwrap();
            let mut acc = 0.0;
            for t in &lp.per_token {
                acc += t;
            }
            assert!((acc - lp.total).abs() <= 1e-12);
            assert!(lp.total <= 0.0);
        }
    }

    #[test]
    fn next_token_distribution_normalizes_and_masks() {
        let p = small();
        let x = seq(Role::Instruction, &[10, 11]);
        let lp = p.next_token_logp(&x, &[Token::new(13)]).unwrap();
        let s: f64 = lp.iter().map(|z| z.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
        for m in MASKED {
            assert_eq!(lp[m.index()], f64::NEG_INFINITY);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut p = small();
        let b = batch();
        let mut rng = stream(3, "fd", 0);
        for mode in [AggregationMode::TokenMean, AggregationMode::SeqMeanTokenSum] {
            let (_, grads) = p.loss_and_gradient(&b, mode).unwrap();
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let ti = rng.random_range(0..p.tensors.len());
                let ei = rng.random_range(0..p.tensors[ti].len());
                let h = 1e-4;
                let orig = p.tensors[ti].as_slice().unwrap()[ei];
                p.tensors[ti].as_slice_mut().unwrap()[ei] = orig + h;
                let up = p.loss_and_gradient(&b, mode).unwrap().0;
                p.tensors[ti].as_slice_mut().unwrap()[ei] = orig - h;
                let down = p.loss_and_gradient(&b, mode).unwrap().0;
                p.tensors[ti].as_slice_mut().unwrap()[ei] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[ti].as_slice().unwrap()[ei];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "{mode:?}: {worst}");
        }
    }

    #[test]
    fn special_embedding_init_only_touches_delimiters() {
        let mut p = small();
        let before = p.tensors[TOK].clone();
        p.init_special_embeddings(&mut stream(4, "emb", 0));
        let after = p.tensors[TOK].clone();
        for i in 0..V {
            if i == 3 || i == 4 {
                continue;
            }
            assert_eq!(before.row(i), after.row(i));
        }
        let mut q = small();
        q.init_special_embeddings(&mut stream(4, "emb", 0));
        assert_eq!(q.tensors[TOK], after);
        let others: Vec<usize> = (0..V).filter(|i| *i != 3 && *i != 4).collect();
        for j in 0..after.ncols() {
            let n = others.len() as f64;
            let mean = others.iter().map(|&i| after[[i, j]]).sum::<f64>() / n;
            let sd = (others.iter().map(|&i| (after[[i, j]] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            for s in [3, 4] {
                assert!((after[[s, j]] - mean).abs() <= 6.0 * sd);
            }
        }
    }

    #[test]
    fn single_example_overfits() {
        let mut p = small();
        let mut opt = OptimizerState::new(LrSchedule::Constant);
        let b = vec![batch().remove(0)];
        let mut losses = Vec::new();
        for _ in 0..60 {
            losses.push(p.gradient_step(&mut opt, &b, AggregationMode::TokenMean, 1e-2).unwrap());
        }
        assert!(losses[..10].windows(2).all(|w| w[1] < w[0]));
        assert!(losses[59] < 0.05 * losses[0]);
        assert_eq!(p.greedy(&b[0].context).unwrap(), b[0].target);
    }

    #[test]
    fn gradient_steps_are_deterministic() {
        let run = || {
            let mut p = small();
            let mut opt = OptimizerState::new(LrSchedule::Constant);
            let mut b = batch();
            b.extend(batch());
            b.extend(batch());
            for _ in 0..5 {
                p.gradient_step(&mut opt, &b, AggregationMode::SeqMeanTokenSum, 1e-2).unwrap();
            }
            p.tensors
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampling_respects_max_length_and_flags_truncation() {
        let p = small();
        let x = seq(Role::Instruction, &[10, 11]);
        let mut rng = stream(5, "gen", 0);
        for _ in 0..50 {
            let o = p.sample(&x, &mut rng, 1.0).unwrap();
            assert!(o.len() <= 6);
            assert!(o.is_truncated() == (o.tokens().last() != Some(&Token::EOS)));
            assert!(o.tokens().iter().all(|t| !MASKED.contains(t)));
        }
    }

    #[test]
    fn rejects_oversized_contexts_and_unknown_tokens() {
        let p = small();
        let long: Vec<u32> = vec![10; 13];
        assert!(p.log_prob(&seq(Role::Instruction, &long), &seq(Role::Response, &[2])).is_err());
        assert!(p.log_prob(&seq(Role::Instruction, &[99]), &seq(Role::Response, &[2])).is_err());
    }
}
