//! Residual encoding over a learned codebook.
//!
//! Each feature `x_i` is soft-assigned to codewords `d_k` with weights
//! `softmax_k(-s_k ||x_i - d_k||^2)`, and the weighted residuals are summed
//! per codeword: `e_k = sum_i w_ik (x_i - d_k)`. Two read-outs are provided:
//! `sum_k ReLU(BN(e_k))` (segmentation) and flattened `e` with L2
//! normalization (classification). `K = 0` falls back to global average
//! pooling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::nn::{init, BatchNorm, Forward, Mode, ParamId, ParamStore};
use crate::ops::activation::softplus_inverse;
use crate::ops::batchnorm::{BnMode, BnOptions, RunningStats};
use crate::ops::basic::l2_normalize_rows;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Smoothing factor used at evaluation under stochastic smoothing.
pub const EVAL_SMOOTHING: f64 = 0.5;

/// The dictionary `D = {d_1..d_K}`, `[K, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub codewords: Tensor<T>,
}

impl<T: Real> Codebook<T> {
    pub fn new(codewords: Tensor<T>) -> Result<Self> {
        if codewords.ndim() != 2 || codewords.dim(0) == 0 {
            return Err(shape_err("codebook", format!("expected [K>=1, C], got {:?}", codewords.shape())));
        }
        if !codewords.all_finite() {
            return Err(invalid("codebook", "codewords must be finite"));
        }
        Ok(Codebook { codewords })
    }

    /// Uniform in `(-1/sqrt(K), 1/sqrt(K))`.
    pub fn init(k: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (k.max(1) as f64).sqrt();
        Codebook { codewords: init::uniform(&[k, channels], bound, rng) }
    }

    pub fn k(&self) -> usize {
        self.codewords.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.codewords.dim(1)
    }
}

/// Smoothing factors `S = {s_1..s_K}` stored unconstrained; `s_k = softplus(raw_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingFactors<T> {
    pub raw: Tensor<T>,
    pub stochastic: bool,
}

impl<T: Real> SmoothingFactors<T> {
    /// Raw values chosen so every `s_k` starts at 1.
    pub fn init(k: usize) -> Self {
        SmoothingFactors { raw: Tensor::full(&[k], T::lit(softplus_inverse(1.0))), stochastic: false }
    }

    pub fn from_effective(values: &[T]) -> Self {
        let raw = values.iter().map(|&s| T::lit(softplus_inverse(s.as_f64()))).collect();
        SmoothingFactors { raw: Tensor::from_vec(&[values.len()], raw), stochastic: false }
    }

    /// Positive factors used by the forward pass in learned mode.
    pub fn effective(&self) -> Tensor<T> {
        crate::ops::softplus(&self.raw)
    }
}

/// Stochastic smoothing: uniform `(0,1)` draws while training, `0.5` at evaluation.
pub fn stochastic_smoothing_draw<T: Real>(k: usize, mode: Mode, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_smoothing(k, mode, &mut rng)
}

pub fn draw_smoothing<T: Real>(k: usize, mode: Mode, rng: &mut ChaCha8Rng) -> Vec<T> {
    match mode {
        Mode::Eval => vec![T::lit(EVAL_SMOOTHING); k],
        Mode::Train => (0..k)
            .map(|_| {
                // open interval: reject an exact 0
                loop {
                    let u: f64 = rng.random();
                    if u > 0.0 {
                        break T::lit(u);
                    }
                }
            })
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct EncodingOutput<T> {
    /// `[N_feat, K]`, rows sum to one.
    pub assignment_weights: Tensor<T>,
    /// `[K, C]`.
    pub per_codeword_encoders: Tensor<T>,
}

fn check_inputs<T: Real>(features: &Tensor<T>, codewords: &Tensor<T>, smoothing: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if features.ndim() != 3 {
        return Err(shape_err("encoding", format!("features must be [B, N_feat, C], got {:?}", features.shape())));
    }
    let (b, n, c) = (features.dim(0), features.dim(1), features.dim(2));
    if codewords.ndim() != 2 || codewords.dim(1) != c {
        return Err(shape_err("encoding", format!("C: features have {c}, codewords shape {:?}", codewords.shape())));
    }
    let k = codewords.dim(0);
    if smoothing.shape() != [k] {
        return Err(shape_err("encoding", format!("K: {k} codewords but smoothing shape {:?}", smoothing.shape())));
    }
    if n == 0 {
        return Err(invalid("encoding", "N_feat must be >= 1"));
    }
    Ok((b, n, k, c))
}

struct Assign<T> {
    /// `[N, K]` clamped squared distances.
    dist: Vec<T>,
    /// `[N, K]` soft-assignment weights.
    weights: Vec<T>,
}

/// Squared distances by `||x||^2 - 2 x.d + ||d||^2` and the row softmax of `-s * dist`.
fn assign<T: Real>(x: &[T], d: &[T], s: &[T], n: usize, k: usize, c: usize) -> Assign<T> {
    let mut dist = vec![T::zero(); n * k];
    T::gemm(false, true, n, k, c, -T::lit(2.0), x, d, T::zero(), &mut dist);
    let dnorm: Vec<T> = d.chunks(c).map(|r| r.iter().map(|&v| v * v).sum()).collect();
    for (i, row) in dist.chunks_mut(k).enumerate() {
        let xn: T = x[i * c..(i + 1) * c].iter().map(|&v| v * v).sum();
        for (v, &dn) in row.iter_mut().zip(&dnorm) {
            *v = (*v + xn + dn).max(T::zero());
        }
    }
    let mut weights = vec![T::zero(); n * k];
    for (row, drow) in weights.chunks_mut(k).zip(dist.chunks(k)) {
        let mut m = T::neg_infinity();
        for (w, (&dv, &sv)) in row.iter_mut().zip(drow.iter().zip(s)) {
            *w = -sv * dv;
            m = m.max(*w);
        }
        let mut z = T::zero();
        for w in row.iter_mut() {
            *w = (*w - m).exp();
            z += *w;
        }
        for w in row.iter_mut() {
            *w /= z;
        }
    }
    Assign { dist, weights }
}

/// `E = A^T X - diag(colsum A) D`, `[K, C]`.
fn residual_sum<T: Real>(x: &[T], d: &[T], a: &[T], n: usize, k: usize, c: usize) -> Vec<T> {
    let mut e = vec![T::zero(); k * c];
    T::gemm(true, false, k, c, n, T::one(), a, x, T::zero(), &mut e);
    for kk in 0..k {
        let mass: T = (0..n).map(|i| a[i * k + kk]).sum();
        for (ev, &dv) in e[kk * c..(kk + 1) * c].iter_mut().zip(&d[kk * c..(kk + 1) * c]) {
            *ev -= mass * dv;
        }
    }
    e
}

/// Soft-assignment weights `[N_feat, K]` for one feature set `[N_feat, C]`.
pub fn soft_assign<T: Real>(features: &Tensor<T>, codebook: &Codebook<T>, smoothing: &Tensor<T>) -> Result<Tensor<T>> {
    let batched = features.clone().reshape(&[1, features.dim(0), features.shape().get(1).copied().unwrap_or(0)])?;
    let (_, n, k, c) = check_inputs(&batched, &codebook.codewords, smoothing)?;
    let a = assign(features.data(), codebook.codewords.data(), smoothing.data(), n, k, c);
    Tensor::new(&[n, k], a.weights)
}

/// Residual encoders for one feature set `[N_feat, C]`.
pub fn encode<T: Real>(features: &Tensor<T>, codebook: &Codebook<T>, smoothing: &Tensor<T>) -> Result<EncodingOutput<T>> {
    if features.ndim() != 2 {
        return Err(shape_err("encode", format!("features must be [N_feat, C], got {:?}", features.shape())));
    }
    let batched = features.clone().reshape(&[1, features.dim(0), features.dim(1)])?;
    let (_, n, k, c) = check_inputs(&batched, &codebook.codewords, smoothing)?;
    let a = assign(features.data(), codebook.codewords.data(), smoothing.data(), n, k, c);
    let e = residual_sum(features.data(), codebook.codewords.data(), &a.weights, n, k, c);
    Ok(EncodingOutput {
        assignment_weights: Tensor::new(&[n, k], a.weights)?,
        per_codeword_encoders: Tensor::new(&[k, c], e)?,
    })
}

/// `sum_k ReLU(BN(e_k))` for a batch of encoders `[B, K, C]`, with one
/// C-channel batch norm over the `B*K` population.
pub fn aggregate<T: Real>(
    encoders: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BnMode,
    running: &mut RunningStats<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let e = tape.constant(encoders.clone());
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let out = tape.aggregate_encoders(e, g, b, running, BnOptions::with_mode(mode))?;
    Ok(tape.value(out).clone())
}

/// Flattens `[K, C]` codeword-major and scales to unit L2 norm. The flag is
/// true for an all-zero input, which is returned unchanged.
pub fn concat_normalize<T: Real>(encoders: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    if encoders.ndim() != 2 {
        return Err(shape_err("concat_normalize", format!("expected [K, C], got {:?}", encoders.shape())));
    }
    let flat = encoders.clone().reshape(&[1, encoders.len()])?;
    let (out, zero) = l2_normalize_rows(&flat)?;
    Ok((out.reshape(&[encoders.len()])?, zero[0]))
}

impl<T: Real> Tape<T> {
    /// Batched residual encoding: features `[B, N, C]`, codewords `[K, C]`,
    /// effective smoothing `[K]` -> encoders `[B, K, C]`.
    pub fn encode(&mut self, features: Var, codewords: Var, smoothing: Var) -> Result<Var> {
        let (b, n, k, c) = check_inputs(self.value(features), self.value(codewords), self.value(smoothing))?;
        let (x, d, s) = (self.value(features).data(), self.value(codewords).data(), self.value(smoothing).data());
        let mut out = Vec::with_capacity(b * k * c);
        for bi in 0..b {
            let xs = &x[bi * n * c..(bi + 1) * n * c];
            let a = assign(xs, d, s, n, k, c);
            out.extend(residual_sum(xs, d, &a.weights, n, k, c));
        }
        let out = Tensor::new(&[b, k, c], out)?;
        Ok(self.push("encode", out, vec![features, codewords, smoothing], Box::new(move |args| {
            let (x, d, s) = (args.inputs[0].data(), args.inputs[1].data(), args.inputs[2].data());
            let g = args.grad.data();
            let mut dx = vec![T::zero(); b * n * c];
            let mut dd = vec![T::zero(); k * c];
            let mut ds = vec![T::zero(); k];
            let two = T::lit(2.0);
            for bi in 0..b {
                let xs = &x[bi * n * c..(bi + 1) * n * c];
                let gs = &g[bi * k * c..(bi + 1) * k * c];
                let dxs = &mut dx[bi * n * c..(bi + 1) * n * c];
                let Assign { dist, weights: a } = assign(xs, d, s, n, k, c);
                // direct path: dX = A G, dD_k = -mass_k G_k
                T::gemm(false, false, n, c, k, T::one(), &a, gs, T::one(), dxs);
                for kk in 0..k {
                    let mass: T = (0..n).map(|i| a[i * k + kk]).sum();
                    for (dv, &gv) in dd[kk * c..(kk + 1) * c].iter_mut().zip(&gs[kk * c..(kk + 1) * c]) {
                        *dv -= mass * gv;
                    }
                }
                // dA[i,k] = G_k . (x_i - d_k)
                let mut da = vec![T::zero(); n * k];
                T::gemm(false, true, n, k, c, T::one(), xs, gs, T::zero(), &mut da);
                let gd: Vec<T> = gs.chunks(c).zip(d.chunks(c)).map(|(gr, dr)| gr.iter().zip(dr).map(|(&p, &q)| p * q).sum()).collect();
                // softmax backward, then logit = -s * dist
                let mut ddist = vec![T::zero(); n * k];
                for i in 0..n {
                    let row = i * k..(i + 1) * k;
                    for (kk, v) in da[row.clone()].iter_mut().enumerate() {
                        *v -= gd[kk];
                    }
                    let dot: T = a[row.clone()].iter().zip(&da[row.clone()]).map(|(&p, &q)| p * q).sum();
                    for kk in 0..k {
                        let idx = i * k + kk;
                        let dlogit = a[idx] * (da[idx] - dot);
                        ds[kk] -= dlogit * dist[idx];
                        ddist[idx] = -s[kk] * dlogit;
                    }
                }
                // dist = ||x_i - d_k||^2
                T::gemm(false, false, n, c, k, -two, &ddist, d, T::one(), dxs);
                T::gemm(true, false, k, c, n, -two, &ddist, xs, T::one(), &mut dd);
                for i in 0..n {
                    let row_sum: T = ddist[i * k..(i + 1) * k].iter().copied().sum();
                    for (dv, &xv) in dxs[i * c..(i + 1) * c].iter_mut().zip(&xs[i * c..(i + 1) * c]) {
                        *dv += two * row_sum * xv;
                    }
                }
                for kk in 0..k {
                    let col_sum: T = (0..n).map(|i| ddist[i * k + kk]).sum();
                    for (dv, &dk) in dd[kk * c..(kk + 1) * c].iter_mut().zip(&d[kk * c..(kk + 1) * c]) {
                        *dv += two * col_sum * dk;
                    }
                }
            }
            Ok(vec![
                Some(Tensor::new(&[b, n, c], dx)?),
                Some(Tensor::new(&[k, c], dd)?),
                Some(Tensor::new(&[k], ds)?),
            ])
        })))
    }

    /// `[B, K, C] -> [B, C]` as `sum_k ReLU(BN(e_k))`.
    pub fn aggregate_encoders(
        &mut self,
        encoders: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        opts: BnOptions<T>,
    ) -> Result<Var> {
        let shape = self.shape(encoders).to_vec();
        if shape.len() != 3 || shape[1] == 0 || shape[2] == 0 {
            return Err(shape_err("aggregate", format!("encoders must be [B, K>=1, C>=1], got {shape:?}")));
        }
        let (b, k, c) = (shape[0], shape[1], shape[2]);
        let flat = self.reshape(encoders, &[b * k, c])?;
        let normed = self.batchnorm(flat, gamma, beta, running, opts)?;
        let act = self.relu(normed)?;
        let back = self.reshape(act, &[b, k, c])?;
        self.sum_axis(back, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingReadout {
    /// `sum_k ReLU(BN(e_k))`, output dimension `C`.
    Aggregate,
    /// Flattened encoders with L2 normalization, output dimension `K * C`.
    ConcatNormalize,
}

/// Encoding layer parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct EncodingLayer {
    pub k: usize,
    pub channels: usize,
    pub readout: EncodingReadout,
    pub codewords: Option<ParamId>,
    pub smoothing: Option<ParamId>,
    pub bn: Option<BatchNorm>,
    pub stochastic: bool,
}

impl EncodingLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        k: usize,
        readout: EncodingReadout,
        stochastic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        if k == 0 {
            return EncodingLayer { k, channels, readout, codewords: None, smoothing: None, bn: None, stochastic };
        }
        let codebook = Codebook::<T>::init(k, channels, rng);
        let codewords = Some(store.add(format!("{name}.codewords"), codebook.codewords));
        let smoothing = (!stochastic).then(|| store.add(format!("{name}.smoothing"), SmoothingFactors::<T>::init(k).raw));
        let bn = (readout == EncodingReadout::Aggregate).then(|| BatchNorm::new(store, &format!("{name}.bn"), channels));
        EncodingLayer { k, channels, readout, codewords, smoothing, bn, stochastic }
    }

    pub fn out_dim(&self) -> usize {
        match (self.k, self.readout) {
            (0, _) | (_, EncodingReadout::Aggregate) => self.channels,
            (k, EncodingReadout::ConcatNormalize) => k * self.channels,
        }
    }

    /// Effective smoothing factors for this pass.
    fn smoothing_var<T: Real>(&self, f: &mut Forward<'_, T>) -> Result<Var> {
        if let Some(raw) = self.smoothing {
            let raw = f.param(raw);
            return f.tape.softplus(raw);
        }
        let values = match (f.mode, f.rng.as_deref_mut()) {
            (Mode::Eval, _) => draw_smoothing::<T>(self.k, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)),
            (Mode::Train, Some(rng)) => {
                f.tape.mark_stochastic();
                draw_smoothing::<T>(self.k, Mode::Train, rng)
            }
            (Mode::Train, None) => {
                return Err(invalid("encoding", "stochastic smoothing in training needs an rng stream"));
            }
        };
        Ok(f.tape.constant(Tensor::from_vec(&[self.k], values)))
    }

    /// Per-codeword encoders `[N, K, C]` of a featuremap `[N, C, H, W]`.
    pub fn encoders<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(shape_err("encoding", format!("expected [N, {}, H, W], got {shape:?}", self.channels)));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let flat = f.tape.reshape(x, &[n, c, hw])?;
        let feats = f.tape.transpose_last2(flat)?;
        let d = f.param(self.codewords.expect("k > 0"));
        let s = self.smoothing_var(f)?;
        f.tape.encode(feats, d, s)
    }

    /// Encoded semantics `[N, out_dim]` of a featuremap `[N, C, H, W]`.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        if self.k == 0 {
            return f.tape.global_avg_pool(x);
        }
        let e = self.encoders(f, x)?;
        let n = f.tape.shape(e)[0];
        match self.readout {
            EncodingReadout::Aggregate => {
                let bn = self.bn.as_ref().expect("aggregate readout owns a batch norm");
                let c = self.channels;
                let flat = f.tape.reshape(e, &[n * self.k, c])?;
                let normed = f.batchnorm(flat, bn)?;
                let act = f.tape.relu(normed)?;
                let back = f.tape.reshape(act, &[n, self.k, c])?;
                f.tape.sum_axis(back, 1)
            }
            EncodingReadout::ConcatNormalize => {
                let flat = f.tape.reshape(e, &[n, self.k * self.channels])?;
                f.tape.l2_normalize(flat)
            }
        }
    }
}
