use crate::error::{DgeError, Result};
use crate::tensor::{cast, normal_tensor, Element, Graph, ParamId, ParamStore, RngStream, Tensor, Var};

/// Weight and bias of a dense layer `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear<H> {
    pub weight: H,
    pub bias: H,
}

/// Gain and bias of a layer normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm<H> {
    pub gain: H,
    pub bias: H,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams<H> {
    pub q: Linear<H>,
    pub k: Linear<H>,
    pub v: Linear<H>,
    pub out: Linear<H>,
}

/// Parameters of one pre-norm encoder block plus its router gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams<H> {
    pub ln_q: Norm<H>,
    pub ln_kv: Norm<H>,
    pub attn: AttentionParams<H>,
    pub ln_ffn: Norm<H>,
    pub fc1: Linear<H>,
    pub fc2: Linear<H>,
    pub gate: Linear<H>,
}

impl<H: Copy> BlockParams<H> {
    /// All handles in a fixed order: norms, attention, ffn, gate; weight
    /// (or gain) before bias.
    pub fn handles(&self) -> Vec<H> {
        let a = &self.attn;
        let mut v = Vec::with_capacity(20);
        for n in [&self.ln_q, &self.ln_kv, &self.ln_ffn] {
            v.extend([n.gain, n.bias]);
        }
        for l in [&a.q, &a.k, &a.v, &a.out, &self.fc1, &self.fc2, &self.gate] {
            v.extend([l.weight, l.bias]);
        }
        v
    }

    /// Rebuilds the struct from handles in [`BlockParams::handles`] order.
    pub fn from_handles<U: Copy>(h: &[U]) -> Result<BlockParams<U>> {
        if h.len() != 20 {
            return Err(DgeError::Usage(format!("a block has 20 parameters, got {}", h.len())));
        }
        let norm = |i: usize| Norm { gain: h[i], bias: h[i + 1] };
        let lin = |i: usize| Linear { weight: h[i], bias: h[i + 1] };
        Ok(BlockParams {
            ln_q: norm(0),
            ln_kv: norm(2),
            ln_ffn: norm(4),
            attn: AttentionParams { q: lin(6), k: lin(8), v: lin(10), out: lin(12) },
            fc1: lin(14),
            fc2: lin(16),
            gate: lin(18),
        })
    }
}

impl Linear<ParamId> {
    fn bind<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Linear<Var> {
        Linear {
            weight: g.param(store, self.weight),
            bias: g.param(store, self.bias),
        }
    }
}

impl Norm<ParamId> {
    fn bind<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Norm<Var> {
        Norm {
            gain: g.param(store, self.gain),
            bias: g.param(store, self.bias),
        }
    }
}

impl BlockParams<ParamId> {
    /// Registers a freshly initialized block under `prefix`.
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        hidden: usize,
        candidates: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut linear = |name: &str, fan_in: usize, fan_out: usize| -> Result<Linear<ParamId>> {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            Ok(Linear {
                weight: store.insert(format!("{prefix}.{name}.weight"), normal_tensor(rng, &[fan_in, fan_out], std))?,
                bias: store.insert(format!("{prefix}.{name}.bias"), Tensor::zeros([1, fan_out]))?,
            })
        };
        let q = linear("attn.q", channels, channels)?;
        let k = linear("attn.k", channels, channels)?;
        let v = linear("attn.v", channels, channels)?;
        let out = linear("attn.out", channels, channels)?;
        let fc1 = linear("ffn.fc1", channels, hidden)?;
        let fc2 = linear("ffn.fc2", hidden, channels)?;
        let gate = linear("gate", channels, candidates)?;
        let mut norm = |name: &str| -> Result<Norm<ParamId>> {
            Ok(Norm {
                gain: store.insert(format!("{prefix}.{name}.gain"), Tensor::ones([1, channels]))?,
                bias: store.insert(format!("{prefix}.{name}.bias"), Tensor::zeros([1, channels]))?,
            })
        };
        Ok(Self {
            ln_q: norm("ln_q")?,
            ln_kv: norm("ln_kv")?,
            attn: AttentionParams { q, k, v, out },
            ln_ffn: norm("ln_ffn")?,
            fc1,
            fc2,
            gate,
        })
    }

    pub fn bind<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> BlockParams<Var> {
        BlockParams {
            ln_q: self.ln_q.bind(g, store),
            ln_kv: self.ln_kv.bind(g, store),
            attn: AttentionParams {
                q: self.attn.q.bind(g, store),
                k: self.attn.k.bind(g, store),
                v: self.attn.v.bind(g, store),
                out: self.attn.out.bind(g, store),
            },
            ln_ffn: self.ln_ffn.bind(g, store),
            fc1: self.fc1.bind(g, store),
            fc2: self.fc2.bind(g, store),
            gate: self.gate.bind(g, store),
        }
    }
}

pub fn linear<T: Element>(g: &mut Graph<T>, x: Var, p: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, p.weight)?;
    g.add_row(y, p.bias)
}

/// Multi-head scaled dot-product attention with output projection.
///
/// `q` is N×C, `k` and `v` are M×C; the result is N×C.
pub fn attention<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionParams<Var>,
    heads: usize,
) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if ks.len() != 2 || ks[0] == 0 {
        return Err(DgeError::Degenerate("attention over an empty key sequence".into()));
    }
    if qs.len() != 2 || qs[1] != ks[1] || ks != vs {
        return Err(DgeError::Dimension {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let c = qs[1];
    if heads == 0 || c % heads != 0 {
        return Err(DgeError::Config(format!("{c} channels do not split into {heads} heads")));
    }
    let d = c / heads;
    let qp = linear(g, q, &p.q)?;
    let kp = linear(g, k, &p.k)?;
    let vp = linear(g, v, &p.v)?;
    let scale = cast::<T>(1.0 / (d as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * d, d)?;
        let kh = g.slice_cols(kp, h * d, d)?;
        let vh = g.slice_cols(vp, h * d, d)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores, 1)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, merged, &p.out)
}

/// Pre-norm encoder block: queries from `q`, keys and values from `kv`.
///
/// `u = q + attn(LN(q), LN_kv(kv))`, `out = u + FFN(LN(u))`.
pub fn vanilla_encoder<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    kv: Var,
    p: &BlockParams<Var>,
    heads: usize,
) -> Result<Var> {
    let qn = g.layer_norm(q, p.ln_q.gain, p.ln_q.bias)?;
    let kvn = g.layer_norm(kv, p.ln_kv.gain, p.ln_kv.bias)?;
    let a = attention(g, qn, kvn, kvn, &p.attn, heads)?;
    let u = g.add(q, a)?;
    let un = g.layer_norm(u, p.ln_ffn.gain, p.ln_ffn.bias)?;
    let h = linear(g, un, &p.fc1)?;
    let h = g.gelu(h);
    let f = linear(g, h, &p.fc2)?;
    g.add(u, f)
}
