use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{he_uniform, uniform, ForwardCache, Model};
use crate::error::{Error, Result};
use crate::registry::{ParamId, ParamRegistry};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Longest accepted sequence; also the size of the position table.
    pub seq_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            seq_len: 16,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(
                    format!("workload.model.{field}"),
                    "must be positive",
                ));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "workload.model.heads",
                format!(
                    "{} heads do not divide d_model {}",
                    self.heads, self.d_model
                ),
            ));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Next-token prediction batch; `targets[b, t]` follows `inputs[b, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmBatch {
    pub inputs: Array2<usize>,
    pub targets: Array2<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    tok: ParamId,
    pos: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    wg: ParamId,
    wu: ParamId,
    wd: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct SeqCache {
    x0: Array2<f64>,
    ln1: LnCache,
    n1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Causal attention weights per head, `[T, T]`, zero above the diagonal.
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    n2: Array2<f64>,
    gate: Array2<f64>,
    up: Array2<f64>,
    hidden: Array2<f64>,
    x2: Array2<f64>,
    /// Output distribution, `[T, vocab]`.
    softmax: Array2<f64>,
}

struct Grads {
    tok: Array2<f64>,
    pos: Array2<f64>,
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    wg: Array2<f64>,
    wu: Array2<f64>,
    wd: Array2<f64>,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
}

impl Grads {
    fn zeros(c: &TransformerConfig) -> Self {
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab);
        Self {
            tok: Array2::zeros((v, d)),
            pos: Array2::zeros((c.seq_len, d)),
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            wg: Array2::zeros((d, f)),
            wu: Array2::zeros((d, f)),
            wd: Array2::zeros((f, d)),
            head_w: Array2::zeros((d, v)),
            head_b: Array1::zeros(v),
        }
    }
}

/// Single pre-norm decoder block over learned token and position
/// embeddings:
///
/// ```text
/// x1 = x0 + Attn(LN1(x0))          causal softmax attention
/// x2 = x1 + Down(silu(Gate(h)) * Up(h)),  h = LN2(x1)
/// logits = x2 W_head + b_head
/// ```
///
/// The loss is mean cross-entropy over every position of the batch.
/// Parameter names follow the usual decoder naming (`q_proj`, `up_proj`,
/// `attn_norm`, `embed_tokens`, `lm_head`, ...) so name-pattern grouping
/// assigns each tensor to its module type.
pub struct TinyTransformer {
    config: TransformerConfig,
    registry: ParamRegistry,
    ids: Ids,
    cache: Option<ForwardCache<LmBatch, Vec<SeqCache>>>,
}

impl TinyTransformer {
    /// He-uniform input projections; `o_proj`, `down_proj` and the head use
    /// the narrower limit `sqrt(1 / fan_in)` so the residual stream and the
    /// initial logits stay O(1). Embeddings are uniform with unit expected
    /// row norm, norm gains are one and biases zero.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let TransformerConfig {
            vocab: v,
            d_model: d,
            d_ff: f,
            seq_len: t,
            ..
        } = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_limit = (3.0 / d as f64).sqrt();
        let mut r = ParamRegistry::new();
        let mut reg =
            |name: &str, shape: &[usize], values: Vec<f64>| r.register(name, shape, values);
        let ids = Ids {
            tok: reg(
                "embed_tokens.weight",
                &[v, d],
                uniform(&mut rng, embed_limit, v * d),
            )?,
            pos: reg(
                "embed_positions.weight",
                &[t, d],
                uniform(&mut rng, embed_limit, t * d),
            )?,
            ln1_g: reg("block.attn_norm.weight", &[d], vec![1.0; d])?,
            ln1_b: reg("block.attn_norm.bias", &[d], vec![0.0; d])?,
            wq: reg(
                "block.attn.q_proj.weight",
                &[d, d],
                he_uniform(&mut rng, d, d * d),
            )?,
            wk: reg(
                "block.attn.k_proj.weight",
                &[d, d],
                he_uniform(&mut rng, d, d * d),
            )?,
            wv: reg(
                "block.attn.v_proj.weight",
                &[d, d],
                he_uniform(&mut rng, d, d * d),
            )?,
            wo: reg(
                "block.attn.o_proj.weight",
                &[d, d],
                residual_uniform(&mut rng, d, d * d),
            )?,
            ln2_g: reg("block.mlp_norm.weight", &[d], vec![1.0; d])?,
            ln2_b: reg("block.mlp_norm.bias", &[d], vec![0.0; d])?,
            wg: reg(
                "block.mlp.gate_proj.weight",
                &[d, f],
                he_uniform(&mut rng, d, d * f),
            )?,
            wu: reg(
                "block.mlp.up_proj.weight",
                &[d, f],
                he_uniform(&mut rng, d, d * f),
            )?,
            wd: reg(
                "block.mlp.down_proj.weight",
                &[f, d],
                residual_uniform(&mut rng, f, f * d),
            )?,
            head_w: reg(
                "lm_head.weight",
                &[d, v],
                residual_uniform(&mut rng, d, d * v),
            )?,
            head_b: reg("lm_head.bias", &[v], vec![0.0; v])?,
        };
        Ok(Self {
            config,
            registry: r,
            ids,
            cache: None,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    fn check(&self, batch: &LmBatch) -> Result<()> {
        let (b, t) = batch.inputs.dim();
        if b == 0 || t == 0 || t > self.config.seq_len {
            return Err(Error::ShapeMismatch {
                what: "inputs".into(),
                expected: vec![b.max(1), self.config.seq_len],
                got: vec![b, t],
            });
        }
        if batch.targets.dim() != (b, t) {
            return Err(Error::ShapeMismatch {
                what: "targets".into(),
                expected: vec![b, t],
                got: batch.targets.shape().to_vec(),
            });
        }
        if let Some(&tok) = batch
            .inputs
            .iter()
            .chain(batch.targets.iter())
            .find(|&&x| x >= self.config.vocab)
        {
            return Err(Error::ShapeMismatch {
                what: "token id".into(),
                expected: vec![self.config.vocab],
                got: vec![tok],
            });
        }
        Ok(())
    }

    /// Summed cross-entropy over the sequence and its activations.
    fn forward_seq(
        &self,
        inputs: ArrayView1<usize>,
        targets: ArrayView1<usize>,
    ) -> (f64, SeqCache) {
        let (r, ids) = (&self.registry, &self.ids);
        let len = inputs.len();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let tok = r.matrix(ids.tok);
        let pos = r.matrix(ids.pos);
        let mut x0 = Array2::zeros((len, self.config.d_model));
        for (t, &id) in inputs.iter().enumerate() {
            x0.row_mut(t).assign(&(&tok.row(id) + &pos.row(t)));
        }

        let (n1, ln1) = layer_norm(&x0, r.vector(ids.ln1_g), r.vector(ids.ln1_b));
        let q = n1.dot(&r.matrix(ids.wq));
        let k = n1.dot(&r.matrix(ids.wk));
        let v = n1.dot(&r.matrix(ids.wv));
        let mut attn = Array2::zeros((len, self.config.d_model));
        let mut probs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let mut a = q.slice(s![.., lo..hi]).dot(&k.slice(s![.., lo..hi]).t()) * scale;
            for (i, mut row) in a.axis_iter_mut(Axis(0)).enumerate() {
                let max = row
                    .slice(s![..=i])
                    .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let mut total = 0.0;
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if j <= i { (*x - max).exp() } else { 0.0 };
                    total += *x;
                }
                row /= total;
            }
            attn.slice_mut(s![.., lo..hi])
                .assign(&a.dot(&v.slice(s![.., lo..hi])));
            probs.push(a);
        }
        let x1 = &x0 + &attn.dot(&r.matrix(ids.wo));

        let (n2, ln2) = layer_norm(&x1, r.vector(ids.ln2_g), r.vector(ids.ln2_b));
        let gate = n2.dot(&r.matrix(ids.wg));
        let up = n2.dot(&r.matrix(ids.wu));
        let hidden = gate.mapv(silu) * &up;
        let x2 = &x1 + &hidden.dot(&r.matrix(ids.wd));

        let mut softmax = x2.dot(&r.matrix(ids.head_w)) + r.vector(ids.head_b);
        let mut loss = 0.0;
        for (mut row, &target) in softmax.axis_iter_mut(Axis(0)).zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[target];
            row.mapv_inplace(|x| (x - lse).exp());
        }

        let cache = SeqCache {
            x0,
            ln1,
            n1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            n2,
            gate,
            up,
            hidden,
            x2,
            softmax,
        };
        (loss, cache)
    }

    /// Accumulates `weight * d(seq loss)` into `g`.
    fn backward_seq(
        &self,
        inputs: ArrayView1<usize>,
        targets: ArrayView1<usize>,
        c: &SeqCache,
        weight: f64,
        g: &mut Grads,
    ) {
        let (r, ids) = (&self.registry, &self.ids);
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dlogits = c.softmax.clone();
        for (t, &y) in targets.iter().enumerate() {
            dlogits[[t, y]] -= 1.0;
        }
        dlogits *= weight;
        g.head_w += &c.x2.t().dot(&dlogits);
        g.head_b += &dlogits.sum_axis(Axis(0));
        let dx2 = dlogits.dot(&r.matrix(ids.head_w).t());

        // feed-forward branch
        g.wd += &c.hidden.t().dot(&dx2);
        let dhidden = dx2.dot(&r.matrix(ids.wd).t());
        let mut dgate = Array2::zeros(c.gate.raw_dim());
        let mut dup = Array2::zeros(c.up.raw_dim());
        Zip::from(&mut dgate)
            .and(&mut dup)
            .and(&dhidden)
            .and(&c.gate)
            .and(&c.up)
            .for_each(|dg, du, &dh, &gt, &u| {
                *dg = dh * u * silu_grad(gt);
                *du = dh * silu(gt);
            });
        g.wg += &c.n2.t().dot(&dgate);
        g.wu += &c.n2.t().dot(&dup);
        let dn2 = dgate.dot(&r.matrix(ids.wg).t()) + dup.dot(&r.matrix(ids.wu).t());
        let (dx1_norm, dg2, db2) = layer_norm_backward(&dn2, &c.ln2, r.vector(ids.ln2_g));
        g.ln2_g += &dg2;
        g.ln2_b += &db2;
        let dx1 = dx2 + dx1_norm;

        // attention branch
        g.wo += &c.attn.t().dot(&dx1);
        let dattn = dx1.dot(&r.matrix(ids.wo).t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, a) in c.probs.iter().enumerate() {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let dout = dattn.slice(s![.., lo..hi]);
            dv.slice_mut(s![.., lo..hi]).assign(&a.t().dot(&dout));
            let da = dout.dot(&c.v.slice(s![.., lo..hi]).t());
            // softmax Jacobian per row: ds = a * (da - <da, a>)
            let mut ds = &da * a;
            for (mut row, (da_row, a_row)) in ds
                .axis_iter_mut(Axis(0))
                .zip(da.axis_iter(Axis(0)).zip(a.axis_iter(Axis(0))))
            {
                let dot = da_row.dot(&a_row);
                row.zip_mut_with(&a_row, |x, &p| *x -= p * dot);
            }
            ds *= scale;
            dq.slice_mut(s![.., lo..hi])
                .assign(&ds.dot(&c.k.slice(s![.., lo..hi])));
            dk.slice_mut(s![.., lo..hi])
                .assign(&ds.t().dot(&c.q.slice(s![.., lo..hi])));
        }
        g.wq += &c.n1.t().dot(&dq);
        g.wk += &c.n1.t().dot(&dk);
        g.wv += &c.n1.t().dot(&dv);
        let dn1 = dq.dot(&r.matrix(ids.wq).t())
            + dk.dot(&r.matrix(ids.wk).t())
            + dv.dot(&r.matrix(ids.wv).t());
        let (dx0_norm, dg1, db1) = layer_norm_backward(&dn1, &c.ln1, r.vector(ids.ln1_g));
        g.ln1_g += &dg1;
        g.ln1_b += &db1;
        let dx0 = dx1 + dx0_norm;

        for (t, &id) in inputs.iter().enumerate() {
            let row = dx0.row(t);
            g.tok.row_mut(id).scaled_add(1.0, &row);
            g.pos.row_mut(t).scaled_add(1.0, &row);
        }
        debug_assert_eq!(c.x0.nrows(), dx0.nrows());
    }
}

impl Model for TinyTransformer {
    type Batch = LmBatch;

    fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    fn registry_mut(&mut self) -> &mut ParamRegistry {
        &mut self.registry
    }

    fn forward(&mut self, batch: &LmBatch) -> Result<f64> {
        self.check(batch)?;
        let mut total = 0.0;
        let mut seqs = Vec::with_capacity(batch.inputs.nrows());
        for (inputs, targets) in batch.inputs.outer_iter().zip(batch.targets.outer_iter()) {
            let (loss, cache) = self.forward_seq(inputs, targets);
            total += loss;
            seqs.push(cache);
        }
        self.cache = Some(ForwardCache {
            version: self.registry.version(),
            batch: batch.clone(),
            acts: seqs,
        });
        Ok(total / batch.inputs.len() as f64)
    }

    fn backward(&mut self, batch: &LmBatch) -> Result<()> {
        let seqs = ForwardCache::fresh(&self.cache, &self.registry, batch)?;
        let weight = 1.0 / batch.inputs.len() as f64;
        let mut g = Grads::zeros(&self.config);
        for ((inputs, targets), c) in batch
            .inputs
            .outer_iter()
            .zip(batch.targets.outer_iter())
            .zip(seqs)
        {
            self.backward_seq(inputs, targets, c, weight, &mut g);
        }
        let ids = self.ids;
        let flat2 = |a: Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        let writes = [
            (ids.tok, flat2(g.tok)),
            (ids.pos, flat2(g.pos)),
            (ids.ln1_g, g.ln1_g.to_vec()),
            (ids.ln1_b, g.ln1_b.to_vec()),
            (ids.wq, flat2(g.wq)),
            (ids.wk, flat2(g.wk)),
            (ids.wv, flat2(g.wv)),
            (ids.wo, flat2(g.wo)),
            (ids.ln2_g, g.ln2_g.to_vec()),
            (ids.ln2_b, g.ln2_b.to_vec()),
            (ids.wg, flat2(g.wg)),
            (ids.wu, flat2(g.wu)),
            (ids.wd, flat2(g.wd)),
            (ids.head_w, flat2(g.head_w)),
            (ids.head_b, g.head_b.to_vec()),
        ];
        for (id, grad) in writes {
            self.registry.set_grad(id, grad)?;
        }
        Ok(())
    }
}

fn residual_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    uniform(rng, (1.0 / fan_in as f64).sqrt(), n)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn layer_norm(
    x: &Array2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, LnCache) {
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.mean().unwrap();
        row -= mean;
        let var = row.mapv(|v| v * v).mean().unwrap();
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &gain + bias;
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    c: &LnCache,
    gain: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgain = (dy * &c.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let mut dx = dy * &gain;
    for ((mut row, xhat), &rstd) in dx
        .axis_iter_mut(Axis(0))
        .zip(c.xhat.axis_iter(Axis(0)))
        .zip(&c.rstd)
    {
        let mean = row.mean().unwrap();
        let mean_x = row.dot(&xhat) / row.len() as f64;
        row.zip_mut_with(&xhat, |d, &xh| *d = rstd * (*d - mean - xh * mean_x));
    }
    (dx, dgain, dbias)
}
