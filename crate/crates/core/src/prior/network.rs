//! Causal transformer denoiser over the token sequence
//! `[condition, timestep, latent blocks..., learned query]`.
//!
//! Blocks are pre-norm. Attention is multi-query (every head has its own
//! query projection, keys and values are a single shared head) and the
//! feed-forward block is a SwiGLU. The prediction is read from the learned
//! query position and projected back to the latent size.
//!
//! Gradients are computed by hand; `Cache` keeps exactly the activations the
//! backward pass consumes.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::PriorConfig;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, gemm};
use crate::rng;

const LN_EPS: f64 = 1e-5;

/// Named view of one parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    /// Matrices receive weight decay; vectors (biases, norms, embeddings) do not.
    pub decay: bool,
}

#[derive(Debug, Clone)]
struct LayerSlots {
    attn_g: Range<usize>,
    attn_b: Range<usize>,
    wq: Range<usize>,
    wkv: Range<usize>,
    wo: Range<usize>,
    ff_g: Range<usize>,
    ff_b: Range<usize>,
    w_in: Range<usize>,
    w_out: Range<usize>,
}

#[derive(Debug, Clone)]
struct Slots {
    cond_w: Range<usize>,
    cond_b: Range<usize>,
    time_w: Range<usize>,
    time_b: Range<usize>,
    lat_w: Range<usize>,
    lat_b: Range<usize>,
    query: Range<usize>,
    pos: Range<usize>,
    layers: Vec<LayerSlots>,
    final_g: Range<usize>,
    final_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
}

#[derive(Default)]
struct LayoutBuilder {
    infos: Vec<ParamInfo>,
    len: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: &[usize]) -> Range<usize> {
        let n: usize = shape.iter().product();
        let range = self.len..self.len + n;
        self.len += n;
        self.infos.push(ParamInfo {
            name,
            shape: shape.to_vec(),
            range: range.clone(),
            decay: shape.len() == 2,
        });
        range
    }
}

fn layout(cfg: &PriorConfig) -> (Slots, Vec<ParamInfo>) {
    let m = cfg.model_dim;
    let mut b = LayoutBuilder::default();
    let cond_w = b.push("cond_proj.weight".into(), &[cfg.embed_dim, m]);
    let cond_b = b.push("cond_proj.bias".into(), &[m]);
    let time_w = b.push("time_proj.weight".into(), &[m, m]);
    let time_b = b.push("time_proj.bias".into(), &[m]);
    let lat_w = b.push("latent_proj.weight".into(), &[cfg.latent_dim, m]);
    let lat_b = b.push("latent_proj.bias".into(), &[m]);
    let query = b.push("learned_query".into(), &[m]);
    // Stored as a flat vector so it is excluded from weight decay.
    let pos = b.push("pos_emb".into(), &[cfg.seq_len() * m]);
    let layers = (0..cfg.depth)
        .map(|l| LayerSlots {
            attn_g: b.push(format!("layers.{l}.attn_norm.gain"), &[m]),
            attn_b: b.push(format!("layers.{l}.attn_norm.bias"), &[m]),
            wq: b.push(format!("layers.{l}.attn.to_q"), &[m, cfg.attn_width()]),
            wkv: b.push(format!("layers.{l}.attn.to_kv"), &[m, 2 * cfg.head_dim]),
            wo: b.push(format!("layers.{l}.attn.to_out"), &[cfg.attn_width(), m]),
            ff_g: b.push(format!("layers.{l}.ff_norm.gain"), &[m]),
            ff_b: b.push(format!("layers.{l}.ff_norm.bias"), &[m]),
            w_in: b.push(format!("layers.{l}.ff.proj_in"), &[m, 2 * cfg.ff_inner()]),
            w_out: b.push(format!("layers.{l}.ff.proj_out"), &[cfg.ff_inner(), m]),
        })
        .collect();
    let final_g = b.push("final_norm.gain".into(), &[m]);
    let final_b = b.push("final_norm.bias".into(), &[m]);
    let out_w = b.push("out_proj.weight".into(), &[m, cfg.latent_size()]);
    let out_b = b.push("out_proj.bias".into(), &[cfg.latent_size()]);
    let slots = Slots {
        cond_w,
        cond_b,
        time_w,
        time_b,
        lat_w,
        lat_b,
        query,
        pos,
        layers,
        final_g,
        final_b,
        out_w,
        out_b,
    };
    (slots, b.infos)
}

/// Sinusoidal timestep features of width `dim`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    let denom = (half.max(2) - 1) as f64;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// One batch of denoiser inputs, row-major.
#[derive(Debug, Clone)]
pub struct PriorInputs<'a> {
    /// `n × latent_size` standardized noised latents.
    pub x_t: &'a [f64],
    pub timesteps: &'a [usize],
    /// `n × embed_dim` conditions; rows with a false mask are replaced by zeros.
    pub conds: &'a [f64],
    pub cond_mask: &'a [bool],
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    xn1: Vec<f64>,
    q: Vec<f64>,
    kv: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    xn2: Vec<f64>,
    h: Vec<f64>,
    act: Vec<f64>,
}

/// Activations recorded by a forward pass.
pub struct Cache {
    n: usize,
    conds: Vec<f64>,
    time_feats: Vec<f64>,
    x_t: Vec<f64>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    final_xn: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, dim: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * dim];
    let mut xhat = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..dim {
            let xh = (row[c] - mean) * rs;
            xhat[r * dim + c] = xh;
            y[r * dim + c] = g[c] * xh + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates gain/bias grads and returns dx.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    rows: usize,
    dim: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * dim];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..dim {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d /= dim as f64;
        mean_dx /= dim as f64;
        let rs = cache.rstd[r];
        for c in 0..dim {
            dx[r * dim + c] = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_bias_rows(y: &mut [f64], bias: &[f64]) {
    for row in y.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn sum_rows_into(dy: &[f64], cols: usize, out: &mut [f64]) {
    for row in dy.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// The latent prior network: configuration plus a flat parameter vector.
#[derive(Debug, Clone)]
pub struct PriorNetwork {
    config: PriorConfig,
    slots: Slots,
    infos: Vec<ParamInfo>,
    params: Vec<f64>,
}

impl PriorNetwork {
    /// Deterministically initialized network.
    pub fn build(config: PriorConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let (slots, infos) = layout(&config);
        let total = infos.last().map_or(0, |p| p.range.end);
        let mut params = vec![0.0; total];
        let mut r = rng::stream(init_seed, &[]);
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        for info in &infos {
            let dst = &mut params[info.range.clone()];
            let name = info.name.as_str();
            if name.ends_with("gain") {
                dst.fill(1.0);
            } else if name == "learned_query" || name == "pos_emb" {
                for v in dst.iter_mut() {
                    *v = small.sample(&mut r);
                }
            } else if info.shape.len() == 2 {
                let bound = 1.0 / (info.shape[0] as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                for v in dst.iter_mut() {
                    *v = r.sample(u);
                }
            }
        }
        Ok(PriorNetwork { config, slots, infos, params })
    }

    /// Rebuilds a network around an existing parameter vector.
    pub fn from_params(config: PriorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (slots, infos) = layout(&config);
        let total = infos.last().map_or(0, |p| p.range.end);
        if params.len() != total {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, configuration needs {total}",
                params.len()
            )));
        }
        Ok(PriorNetwork { config, slots, infos, params })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    /// Token order of the input sequence, for inspection.
    pub fn token_layout(&self) -> Vec<String> {
        let mut names = vec!["condition".to_string(), "timestep".to_string()];
        names.extend((0..self.config.num_latent_blocks).map(|b| format!("latent[{b}]")));
        names.push("learned_query".to_string());
        names
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn check_inputs(&self, inp: &PriorInputs<'_>) -> Result<usize> {
        let n = inp.timesteps.len();
        let cfg = &self.config;
        if inp.x_t.len() != n * cfg.latent_size()
            || inp.conds.len() != n * cfg.embed_dim
            || inp.cond_mask.len() != n
        {
            return Err(Error::invalid(format!(
                "prior inputs inconsistent with batch of {n} (x_t {}, conds {}, mask {})",
                inp.x_t.len(),
                inp.conds.len(),
                inp.cond_mask.len()
            )));
        }
        if let Some(&t) = inp.timesteps.iter().find(|&&t| t >= cfg.num_timesteps) {
            return Err(Error::invalid(format!("timestep {t} out of range")));
        }
        if !all_finite(inp.x_t) || !all_finite(inp.conds) {
            return Err(Error::numeric("non-finite input to prior network"));
        }
        Ok(n)
    }

    /// Predicts standardized clean latents for a batch (`n × latent_size`).
    pub fn forward(&self, inp: &PriorInputs<'_>) -> Result<Vec<f64>> {
        self.forward_with_cache(inp).map(|(y, _)| y)
    }

    /// Single-sample convenience wrapper around [`PriorNetwork::forward`].
    pub fn forward_one(&self, x_t: &[f64], t: usize, cond: &[f64], cond_mask: bool) -> Result<Vec<f64>> {
        self.forward(&PriorInputs { x_t, timesteps: &[t], conds: cond, cond_mask: &[cond_mask] })
    }

    pub fn forward_with_cache(&self, inp: &PriorInputs<'_>) -> Result<(Vec<f64>, Cache)> {
        let n = self.check_inputs(inp)?;
        let cfg = &self.config;
        let (m, e, ld, nb) = (cfg.model_dim, cfg.embed_dim, cfg.latent_dim, cfg.num_latent_blocks);
        let l = cfg.seq_len();
        let rows = n * l;
        let s = &self.slots;

        let mut conds = inp.conds.to_vec();
        for (i, &keep) in inp.cond_mask.iter().enumerate() {
            if !keep {
                conds[i * e..(i + 1) * e].fill(0.0);
            }
        }
        let mut time_feats = vec![0.0; n * m];
        for (i, &t) in inp.timesteps.iter().enumerate() {
            time_feats[i * m..(i + 1) * m].copy_from_slice(&timestep_features(t, m));
        }

        // Token embeddings.
        let mut cond_tok = vec![0.0; n * m];
        gemm(n, e, m, 1.0, &conds, false, self.p(&s.cond_w), false, 0.0, &mut cond_tok);
        add_bias_rows(&mut cond_tok, self.p(&s.cond_b));
        let mut time_tok = vec![0.0; n * m];
        gemm(n, m, m, 1.0, &time_feats, false, self.p(&s.time_w), false, 0.0, &mut time_tok);
        add_bias_rows(&mut time_tok, self.p(&s.time_b));
        let mut lat_tok = vec![0.0; n * nb * m];
        gemm(n * nb, ld, m, 1.0, inp.x_t, false, self.p(&s.lat_w), false, 0.0, &mut lat_tok);
        add_bias_rows(&mut lat_tok, self.p(&s.lat_b));

        let pos = self.p(&s.pos);
        let query = self.p(&s.query);
        let mut x = vec![0.0; rows * m];
        for i in 0..n {
            for tok in 0..l {
                let src: &[f64] = if tok == 0 {
                    &cond_tok[i * m..(i + 1) * m]
                } else if tok == 1 {
                    &time_tok[i * m..(i + 1) * m]
                } else if tok < l - 1 {
                    let b = i * nb + (tok - 2);
                    &lat_tok[b * m..(b + 1) * m]
                } else {
                    query
                };
                let dst = &mut x[(i * l + tok) * m..(i * l + tok + 1) * m];
                for c in 0..m {
                    dst[c] = src[c] + pos[tok * m + c];
                }
            }
        }

        let mut layers = Vec::with_capacity(cfg.depth);
        for ls in &s.layers {
            let (x_next, lc) = self.layer_forward(ls, &x, n);
            layers.push(lc);
            x = x_next;
        }

        // Read out the learned-query position.
        let mut last = vec![0.0; n * m];
        for i in 0..n {
            last[i * m..(i + 1) * m].copy_from_slice(&x[(i * l + l - 1) * m..(i * l + l) * m]);
        }
        let (final_xn, final_ln) = layer_norm(&last, n, m, self.p(&s.final_g), self.p(&s.final_b));
        let d = cfg.latent_size();
        let mut y = vec![0.0; n * d];
        gemm(n, m, d, 1.0, &final_xn, false, self.p(&s.out_w), false, 0.0, &mut y);
        add_bias_rows(&mut y, self.p(&s.out_b));
        if !all_finite(&y) {
            return Err(Error::numeric("prior network produced non-finite output"));
        }
        let cache = Cache { n, conds, time_feats, x_t: inp.x_t.to_vec(), layers, final_ln, final_xn };
        Ok((y, cache))
    }

    fn layer_forward(&self, ls: &LayerSlots, x: &[f64], n: usize) -> (Vec<f64>, LayerCache) {
        let cfg = &self.config;
        let (m, h, dh) = (cfg.model_dim, cfg.heads, cfg.head_dim);
        let aw = cfg.attn_width();
        let inner = cfg.ff_inner();
        let l = cfg.seq_len();
        let rows = n * l;
        let scale = 1.0 / (dh as f64).sqrt();

        let (xn1, ln1) = layer_norm(x, rows, m, self.p(&ls.attn_g), self.p(&ls.attn_b));
        let mut q = vec![0.0; rows * aw];
        gemm(rows, m, aw, 1.0, &xn1, false, self.p(&ls.wq), false, 0.0, &mut q);
        let mut kv = vec![0.0; rows * 2 * dh];
        gemm(rows, m, 2 * dh, 1.0, &xn1, false, self.p(&ls.wkv), false, 0.0, &mut kv);

        let mut probs = vec![0.0; n * h * l * l];
        let mut o = vec![0.0; rows * aw];
        for s in 0..n {
            for hd in 0..h {
                for i in 0..l {
                    let qi = &q[(s * l + i) * aw + hd * dh..(s * l + i) * aw + (hd + 1) * dh];
                    let p = &mut probs[((s * h + hd) * l + i) * l..((s * h + hd) * l + i + 1) * l];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kv[(s * l + j) * 2 * dh..(s * l + j) * 2 * dh + dh];
                        let sc = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        p[j] = sc;
                        max = max.max(sc);
                    }
                    let mut z = 0.0;
                    for pj in p.iter_mut().take(i + 1) {
                        *pj = (*pj - max).exp();
                        z += *pj;
                    }
                    let oi = &mut o[(s * l + i) * aw + hd * dh..(s * l + i) * aw + (hd + 1) * dh];
                    for j in 0..=i {
                        p[j] /= z;
                        let vj = &kv[(s * l + j) * 2 * dh + dh..(s * l + j + 1) * 2 * dh];
                        for c in 0..dh {
                            oi[c] += p[j] * vj[c];
                        }
                    }
                }
            }
        }
        let mut x_mid = x.to_vec();
        gemm(rows, aw, m, 1.0, &o, false, self.p(&ls.wo), false, 1.0, &mut x_mid);

        let (xn2, ln2) = layer_norm(&x_mid, rows, m, self.p(&ls.ff_g), self.p(&ls.ff_b));
        let mut hbuf = vec![0.0; rows * 2 * inner];
        gemm(rows, m, 2 * inner, 1.0, &xn2, false, self.p(&ls.w_in), false, 0.0, &mut hbuf);
        let mut act = vec![0.0; rows * inner];
        for r in 0..rows {
            let hr = &hbuf[r * 2 * inner..(r + 1) * 2 * inner];
            let (a, g) = hr.split_at(inner);
            for c in 0..inner {
                act[r * inner + c] = a[c] * g[c] * sigmoid(g[c]);
            }
        }
        let mut x_out = x_mid;
        gemm(rows, inner, m, 1.0, &act, false, self.p(&ls.w_out), false, 1.0, &mut x_out);

        (x_out, LayerCache { ln1, xn1, q, kv, probs, o, ln2, xn2, h: hbuf, act })
    }

    /// Accumulates parameter gradients of `sum(d_out ⊙ output)` into `grad`.
    pub fn backward(&self, cache: &Cache, d_out: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size mismatch");
        let cfg = &self.config;
        let (m, e, ld, nb) = (cfg.model_dim, cfg.embed_dim, cfg.latent_dim, cfg.num_latent_blocks);
        let l = cfg.seq_len();
        let n = cache.n;
        let d = cfg.latent_size();
        let s = &self.slots;

        // Output projection and final norm.
        gemm(m, n, d, 1.0, &cache.final_xn, true, d_out, false, 1.0, &mut grad[s.out_w.clone()]);
        sum_rows_into(d_out, d, &mut grad[s.out_b.clone()]);
        let mut d_xn = vec![0.0; n * m];
        gemm(n, d, m, 1.0, d_out, false, self.p(&s.out_w), true, 0.0, &mut d_xn);
        let (dg, db) = split_two(grad, &s.final_g, &s.final_b);
        let d_last = layer_norm_backward(&d_xn, &cache.final_ln, n, m, self.p(&s.final_g), dg, db);

        let mut dx = vec![0.0; n * l * m];
        for i in 0..n {
            dx[(i * l + l - 1) * m..(i * l + l) * m].copy_from_slice(&d_last[i * m..(i + 1) * m]);
        }

        for (ls, lc) in s.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(ls, lc, n, dx, grad);
        }

        // Token embeddings.
        {
            let dpos = &mut grad[s.pos.clone()];
            for i in 0..n {
                for tok in 0..l {
                    for c in 0..m {
                        dpos[tok * m + c] += dx[(i * l + tok) * m + c];
                    }
                }
            }
        }
        let gather = |tok: usize| -> Vec<f64> {
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                out[i * m..(i + 1) * m].copy_from_slice(&dx[(i * l + tok) * m..(i * l + tok + 1) * m]);
            }
            out
        };
        let d_cond = gather(0);
        gemm(e, n, m, 1.0, &cache.conds, true, &d_cond, false, 1.0, &mut grad[s.cond_w.clone()]);
        sum_rows_into(&d_cond, m, &mut grad[s.cond_b.clone()]);
        let d_time = gather(1);
        gemm(m, n, m, 1.0, &cache.time_feats, true, &d_time, false, 1.0, &mut grad[s.time_w.clone()]);
        sum_rows_into(&d_time, m, &mut grad[s.time_b.clone()]);
        let mut d_lat = vec![0.0; n * nb * m];
        for i in 0..n {
            for b in 0..nb {
                let tok = 2 + b;
                d_lat[(i * nb + b) * m..(i * nb + b + 1) * m]
                    .copy_from_slice(&dx[(i * l + tok) * m..(i * l + tok + 1) * m]);
            }
        }
        gemm(ld, n * nb, m, 1.0, &cache.x_t, true, &d_lat, false, 1.0, &mut grad[s.lat_w.clone()]);
        sum_rows_into(&d_lat, m, &mut grad[s.lat_b.clone()]);
        let d_query = gather(l - 1);
        sum_rows_into(&d_query, m, &mut grad[s.query.clone()]);
    }

    fn layer_backward(&self, ls: &LayerSlots, lc: &LayerCache, n: usize, dx_out: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        let cfg = &self.config;
        let (m, h, dh) = (cfg.model_dim, cfg.heads, cfg.head_dim);
        let aw = cfg.attn_width();
        let inner = cfg.ff_inner();
        let l = cfg.seq_len();
        let rows = n * l;
        let scale = 1.0 / (dh as f64).sqrt();

        // Feed-forward: x_out = x_mid + swiglu(xn2 · W_in) · W_out.
        gemm(inner, rows, m, 1.0, &lc.act, true, &dx_out, false, 1.0, &mut grad[ls.w_out.clone()]);
        let mut d_act = vec![0.0; rows * inner];
        gemm(rows, m, inner, 1.0, &dx_out, false, self.p(&ls.w_out), true, 0.0, &mut d_act);
        let mut d_h = vec![0.0; rows * 2 * inner];
        for r in 0..rows {
            let hr = &lc.h[r * 2 * inner..(r + 1) * 2 * inner];
            let (a, g) = hr.split_at(inner);
            let dr = &mut d_h[r * 2 * inner..(r + 1) * 2 * inner];
            for c in 0..inner {
                let da = d_act[r * inner + c];
                let sg = sigmoid(g[c]);
                let silu = g[c] * sg;
                dr[c] = da * silu;
                dr[inner + c] = da * a[c] * sg * (1.0 + g[c] * (1.0 - sg));
            }
        }
        gemm(m, rows, 2 * inner, 1.0, &lc.xn2, true, &d_h, false, 1.0, &mut grad[ls.w_in.clone()]);
        let mut d_xn2 = vec![0.0; rows * m];
        gemm(rows, 2 * inner, m, 1.0, &d_h, false, self.p(&ls.w_in), true, 0.0, &mut d_xn2);
        let (dg, db) = split_two(grad, &ls.ff_g, &ls.ff_b);
        let d_mid_ln = layer_norm_backward(&d_xn2, &lc.ln2, rows, m, self.p(&ls.ff_g), dg, db);
        let mut dx_mid = dx_out;
        for (a, b) in dx_mid.iter_mut().zip(&d_mid_ln) {
            *a += b;
        }

        // Attention: x_mid = x + attn(xn1) · W_o.
        gemm(aw, rows, m, 1.0, &lc.o, true, &dx_mid, false, 1.0, &mut grad[ls.wo.clone()]);
        let mut d_o = vec![0.0; rows * aw];
        gemm(rows, m, aw, 1.0, &dx_mid, false, self.p(&ls.wo), true, 0.0, &mut d_o);
        let mut d_q = vec![0.0; rows * aw];
        let mut d_kv = vec![0.0; rows * 2 * dh];
        let mut dp = vec![0.0; l];
        for s in 0..n {
            for hd in 0..h {
                for i in 0..l {
                    let p = &lc.probs[((s * h + hd) * l + i) * l..((s * h + hd) * l + i + 1) * l];
                    let doi = &d_o[(s * l + i) * aw + hd * dh..(s * l + i) * aw + (hd + 1) * dh];
                    let mut pdp = 0.0;
                    for j in 0..=i {
                        let vj_off = (s * l + j) * 2 * dh + dh;
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += doi[c] * lc.kv[vj_off + c];
                            d_kv[vj_off + c] += p[j] * doi[c];
                        }
                        dp[j] = acc;
                        pdp += p[j] * acc;
                    }
                    let qi_off = (s * l + i) * aw + hd * dh;
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        let kj_off = (s * l + j) * 2 * dh;
                        for c in 0..dh {
                            d_q[qi_off + c] += ds * lc.kv[kj_off + c];
                            d_kv[kj_off + c] += ds * lc.q[qi_off + c];
                        }
                    }
                }
            }
        }
        gemm(m, rows, aw, 1.0, &lc.xn1, true, &d_q, false, 1.0, &mut grad[ls.wq.clone()]);
        gemm(m, rows, 2 * dh, 1.0, &lc.xn1, true, &d_kv, false, 1.0, &mut grad[ls.wkv.clone()]);
        let mut d_xn1 = vec![0.0; rows * m];
        gemm(rows, aw, m, 1.0, &d_q, false, self.p(&ls.wq), true, 0.0, &mut d_xn1);
        gemm(rows, 2 * dh, m, 1.0, &d_kv, false, self.p(&ls.wkv), true, 1.0, &mut d_xn1);
        let (dg, db) = split_two(grad, &ls.attn_g, &ls.attn_b);
        let d_in_ln = layer_norm_backward(&d_xn1, &lc.ln1, rows, m, self.p(&ls.attn_g), dg, db);
        let mut dx = dx_mid;
        for (a, b) in dx.iter_mut().zip(&d_in_ln) {
            *a += b;
        }
        dx
    }
}

/// Two disjoint mutable views into the gradient buffer. `a` must precede `b`.
fn split_two<'a>(buf: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Mean squared error between predictions and targets, with its gradient.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let count = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let diff = p - t;
            loss += diff * diff;
            2.0 * diff / count
        })
        .collect();
    (loss / count, grad)
}

/// Replaces the condition with zeros with probability `prob`. The returned
/// flag is `false` when the condition was dropped.
pub fn drop_condition<R: Rng + ?Sized>(cond: &[f64], prob: f64, rng: &mut R) -> (Vec<f64>, bool) {
    // Always consume one draw so the stream advances identically for any prob.
    let u: f64 = rng.random();
    if u < prob {
        (vec![0.0; cond.len()], false)
    } else {
        (cond.to_vec(), true)
    }
}

impl crate::diffusion::Denoiser for PriorNetwork {
    fn latent_size(&self) -> usize {
        self.config.latent_size()
    }

    fn predict_x0(&self, x_t: &[f64], t: usize, cond: &[f64], cond_mask: bool) -> Result<Vec<f64>> {
        self.forward_one(x_t, t, cond, cond_mask)
    }

    fn predict_x0_batch(&self, x_t: &[f64], t: usize, conds: &[f64], masks: &[bool]) -> Result<Vec<f64>> {
        let ts = vec![t; masks.len()];
        self.forward(&PriorInputs { x_t, timesteps: &ts, conds, cond_mask: masks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;

    fn toy_inputs(cfg: &PriorConfig, n: usize, seed: u64) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
        let mut r = rng::stream(seed, &[]);
        let x = rng::standard_normal(&mut r, n * cfg.latent_size());
        let ts = (0..n).map(|i| (i * 37 + 5) % cfg.num_timesteps).collect();
        let mut c = rng::standard_normal(&mut r, n * cfg.embed_dim);
        for row in c.chunks_mut(cfg.embed_dim) {
            let nr = norm(row);
            row.iter_mut().for_each(|v| *v /= nr);
        }
        (x, ts, c)
    }

    #[test]
    fn default_config_parameter_count() {
        let cfg = PriorConfig::default();
        let (_, infos) = layout(&cfg);
        let count = infos.last().unwrap().range.end;
        let target = 48.9e6;
        assert!(((count as f64) - target).abs() / target < 0.02, "count {count}");
    }

    #[test]
    fn toy_config_builds_small_and_deterministic() {
        let a = PriorNetwork::build(PriorConfig::toy(), 3).unwrap();
        let b = PriorNetwork::build(PriorConfig::toy(), 3).unwrap();
        let c = PriorNetwork::build(PriorConfig::toy(), 4).unwrap();
        assert!(a.parameter_count() < 1_000_000);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn rejects_inconsistent_config() {
        let mut cfg = PriorConfig::toy();
        cfg.heads = 0;
        assert!(PriorNetwork::build(cfg, 0).is_err());
        let mut cfg = PriorConfig::toy();
        cfg.cond_drop_prob = 1.5;
        assert!(PriorNetwork::build(cfg, 0).is_err());
    }

    #[test]
    fn output_size_tracks_latent_blocks() {
        for blocks in [1, 3] {
            let mut cfg = PriorConfig::toy();
            cfg.num_latent_blocks = blocks;
            let net = PriorNetwork::build(cfg.clone(), 1).unwrap();
            let (x, ts, c) = toy_inputs(&cfg, 3, 9);
            let y = net
                .forward(&PriorInputs { x_t: &x, timesteps: &ts, conds: &c, cond_mask: &[true; 3] })
                .unwrap();
            assert_eq!(y.len(), 3 * blocks * cfg.latent_dim);
        }
    }

    #[test]
    fn token_order_is_condition_time_latent_query() {
        let mut cfg = PriorConfig::toy();
        cfg.num_latent_blocks = 3;
        let net = PriorNetwork::build(cfg, 0).unwrap();
        assert_eq!(
            net.token_layout(),
            ["condition", "timestep", "latent[0]", "latent[1]", "latent[2]", "learned_query"]
        );
    }

    #[test]
    fn masked_condition_equals_zero_condition() {
        let cfg = PriorConfig::toy();
        let net = PriorNetwork::build(cfg.clone(), 5).unwrap();
        let (x, _, c) = toy_inputs(&cfg, 1, 2);
        let masked = net.forward_one(&x, 10, &c, false).unwrap();
        let zero = net.forward_one(&x, 10, &vec![0.0; cfg.embed_dim], true).unwrap();
        assert_eq!(masked, zero);
        assert_eq!(masked, net.forward_one(&x, 10, &c, false).unwrap());
    }

    #[test]
    fn condition_sensitivity_follows_mask() {
        // Numerical Jacobian column norms with respect to the condition.
        let cfg = PriorConfig::toy();
        let net = PriorNetwork::build(cfg.clone(), 5).unwrap();
        let (x, _, c) = toy_inputs(&cfg, 1, 2);
        let h = 1e-5;
        for mask in [true, false] {
            let mut total = 0.0;
            for k in 0..cfg.embed_dim {
                let mut cp = c.clone();
                let mut cm = c.clone();
                cp[k] += h;
                cm[k] -= h;
                let yp = net.forward_one(&x, 100, &cp, mask).unwrap();
                let ym = net.forward_one(&x, 100, &cm, mask).unwrap();
                let col: Vec<f64> = yp.iter().zip(&ym).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                total += norm(&col);
            }
            if mask {
                assert!(total > 1e-3, "conditioned output should depend on cond, got {total}");
            } else {
                assert_eq!(total, 0.0);
            }
        }
    }

    #[test]
    fn rejects_non_finite_inputs() {
        let cfg = PriorConfig::toy();
        let net = PriorNetwork::build(cfg.clone(), 5).unwrap();
        let mut x = vec![0.0; cfg.latent_size()];
        x[0] = f64::NAN;
        let c = vec![0.0; cfg.embed_dim];
        assert!(matches!(net.forward_one(&x, 0, &c, true), Err(Error::NumericFailure(_))));
    }

    #[test]
    fn drop_condition_extremes() {
        let mut r = rng::stream(0, &[]);
        let c = vec![0.5; 4];
        for _ in 0..100 {
            assert_eq!(drop_condition(&c, 0.0, &mut r), (c.clone(), true));
            assert_eq!(drop_condition(&c, 1.0, &mut r), (vec![0.0; 4], false));
        }
    }

    #[test]
    fn drop_condition_rate() {
        let mut r = rng::stream(123, &[]);
        let c = vec![1.0];
        let n = 100_000;
        let dropped = (0..n).filter(|_| !drop_condition(&c, 0.2, &mut r).1).count();
        let frac = dropped as f64 / n as f64;
        assert!((frac - 0.2).abs() <= 0.005, "drop fraction {frac}");
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut cfg = PriorConfig::toy();
        cfg.model_dim = 16;
        cfg.heads = 2;
        cfg.head_dim = 8;
        cfg.latent_dim = 6;
        cfg.embed_dim = 5;
        cfg.num_latent_blocks = 2;
        let net = PriorNetwork::build(cfg.clone(), 17).unwrap();
        let n = 3;
        let (x, ts, c) = toy_inputs(&cfg, n, 4);
        let mask = [true, false, true];
        let target = rng::standard_normal(&mut rng::stream(8, &[]), n * cfg.latent_size());
        let inp = PriorInputs { x_t: &x, timesteps: &ts, conds: &c, cond_mask: &mask };
        let (y, cache) = net.forward_with_cache(&inp).unwrap();
        let (_, dy) = mse_loss(&y, &target);
        let mut grad = vec![0.0; net.parameter_count()];
        net.backward(&cache, &dy, &mut grad);

        let loss_at = |p: &[f64]| {
            let other = PriorNetwork::from_params(cfg.clone(), p.to_vec()).unwrap();
            mse_loss(&other.forward(&inp).unwrap(), &target).0
        };
        let eps = 1e-5;
        for info in net.param_infos() {
            for idx in [info.range.start, (info.range.start + info.range.end) / 2, info.range.end - 1] {
                let mut p = net.params().to_vec();
                p[idx] += eps;
                let lp = loss_at(&p);
                p[idx] -= 2.0 * eps;
                let lm = loss_at(&p);
                let fd = (lp - lm) / (2.0 * eps);
                let an = grad[idx];
                let denom = fd.abs().max(an.abs()).max(1e-7);
                assert!((fd - an).abs() / denom < 1e-4, "{} [{idx}]: fd {fd} vs analytic {an}", info.name);
            }
        }
    }
}
