//! Recurrent building blocks shared by the semantic space and the answer
//! generator. Every layer has a taped batch path for training and a plain
//! single-example path for inference; both compute the same function.

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, Graph, ParamStore, Rng, Var};
use crate::taskgen::{BOS, EOS, PAD};

/// Standard deviation of token-embedding initialisation.
pub const EMBED_INIT_STD: f64 = 0.05;

/// `y = x W`, with `w` row-major `[input, output]`.
pub fn matvec(x: &[f64], w: &[f64], output: usize) -> Vec<f64> {
    let mut y = vec![0.0; output];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * output..(i + 1) * output];
        for (yj, wj) in y.iter_mut().zip(row) {
            *yj += xi * wj;
        }
    }
    y
}

fn add_into(y: &mut [f64], b: &[f64]) {
    y.iter_mut().zip(b).for_each(|(a, b)| *a += b);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = store.add_glorot(&format!("{name}.w"), vec![input, output], rng);
        let b = bias.then(|| store.add_zeros(&format!("{name}.b"), vec![output]));
        Self { w, b, input, output }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut y = matvec(x, &store.get(self.w).values, self.output);
        if let Some(b) = self.b {
            add_into(&mut y, &store.get(b).values);
        }
        y
    }
}

/// Elman cell `h' = tanh(x Wx + h Wh + b + c)`, where `c` is an optional
/// per-sequence conditioning term.
#[derive(Clone, Debug, PartialEq)]
pub struct Rnn {
    pub wx: usize,
    pub wh: usize,
    pub b: usize,
    pub input: usize,
    pub hidden: usize,
}

struct BoundRnn {
    wx: Var,
    wh: Var,
    b: Var,
}

impl Rnn {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            wx: store.add_glorot(&format!("{name}.wx"), vec![input, hidden], rng),
            wh: store.add_glorot(&format!("{name}.wh"), vec![hidden, hidden], rng),
            b: store.add_zeros(&format!("{name}.b"), vec![hidden]),
            input,
            hidden,
        }
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundRnn {
        BoundRnn {
            wx: g.param(store, self.wx),
            wh: g.param(store, self.wh),
            b: g.param(store, self.b),
        }
    }

    fn step(g: &mut Graph, p: &BoundRnn, x: Var, h: Option<Var>, cond: Option<Var>) -> Result<Var> {
        let mut a = g.matmul(x, p.wx)?;
        if let Some(h) = h {
            let r = g.matmul(h, p.wh)?;
            a = g.add(a, r)?;
        }
        a = g.add(a, p.b)?;
        if let Some(c) = cond {
            a = g.add(a, c)?;
        }
        g.tanh(a)
    }

    pub fn step_plain(&self, store: &ParamStore, x: &[f64], h: Option<&[f64]>, cond: Option<&[f64]>) -> Vec<f64> {
        let mut a = matvec(x, &store.get(self.wx).values, self.hidden);
        if let Some(h) = h {
            add_into(&mut a, &matvec(h, &store.get(self.wh).values, self.hidden));
        }
        add_into(&mut a, &store.get(self.b).values);
        if let Some(c) = cond {
            add_into(&mut a, c);
        }
        a.iter_mut().for_each(|v| *v = v.tanh());
        a
    }
}

fn check_tokens(seq: &[usize], vocab: usize) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if let Some(t) = seq.iter().find(|&&t| t >= vocab) {
        return Err(Error::UnknownToken(format!("index {t} outside vocabulary of {vocab}")));
    }
    Ok(())
}

/// Token embedding followed by an Elman RNN; the final hidden state is the
/// sequence representation.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqEncoder {
    pub table: usize,
    pub rnn: Rnn,
    pub vocab: usize,
}

impl SeqEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        token_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            table: store.add_normal(&format!("{name}.emb"), vec![vocab, token_dim], EMBED_INIT_STD, rng),
            rnn: Rnn::new(store, &format!("{name}.rnn"), token_dim, hidden, rng),
            vocab,
        }
    }

    pub fn hidden(&self) -> usize {
        self.rnn.hidden
    }

    /// Final states of a batch of variable-length sequences, `[B, hidden]`.
    /// Shorter sequences hold their state once they end.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seqs: &[&[usize]]) -> Result<Var> {
        for s in seqs {
            check_tokens(s, self.vocab)?;
        }
        let batch = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let table = g.param(store, self.table);
        let p = self.rnn.bind(g, store);
        let hdim = self.rnn.hidden;
        let mut h: Option<Var> = None;
        for t in 0..steps {
            let idx: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let x = g.embedding(table, idx)?;
            let next = Rnn::step(g, &p, x, h, None)?;
            let all_active = seqs.iter().all(|s| t < s.len());
            h = Some(match h {
                Some(prev) if !all_active => {
                    let mask: Vec<f64> = seqs
                        .iter()
                        .flat_map(|s| std::iter::repeat_n(if t < s.len() { 1.0 } else { 0.0 }, hdim))
                        .collect();
                    let m = g.input(vec![batch, hdim], mask)?;
                    let delta = g.sub(next, prev)?;
                    let kept = g.mul(delta, m)?;
                    g.add(prev, kept)?
                }
                _ => next,
            });
        }
        h.ok_or_else(|| Error::InvalidArgument("empty batch".into()))
    }

    pub fn encode(&self, store: &ParamStore, seq: &[usize]) -> Result<Vec<f64>> {
        check_tokens(seq, self.vocab)?;
        let table = &store.get(self.table).values;
        let e = self.rnn.input;
        let mut h: Option<Vec<f64>> = None;
        for &tok in seq {
            let x = &table[tok * e..(tok + 1) * e];
            h = Some(self.rnn.step_plain(store, x, h.as_deref(), None));
        }
        Ok(h.expect("non-empty"))
    }
}

/// Recurrent decoder conditioned on a context vector `z`:
/// `s0 = tanh(z A + a)`, `s_t = tanh(e(y_{t-1}) Wx + s_{t-1} Wh + z C + b)`,
/// logits `s_t Wo + bo`. Decoding starts from BOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub table: usize,
    pub init: Linear,
    pub cond: Linear,
    pub rnn: Rnn,
    pub out: Linear,
    pub vocab: usize,
}

/// Recurrent state of one partial decode.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    state: Vec<f64>,
    cond: Vec<f64>,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        token_dim: usize,
        context: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            table: store.add_normal(&format!("{name}.emb"), vec![vocab, token_dim], EMBED_INIT_STD, rng),
            init: Linear::new(store, &format!("{name}.init"), context, hidden, true, rng),
            cond: Linear::new(store, &format!("{name}.cond"), context, hidden, false, rng),
            rnn: Rnn::new(store, &format!("{name}.rnn"), token_dim, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, vocab, true, rng),
            vocab,
        }
    }

    pub fn context_dim(&self) -> usize {
        self.init.input
    }

    /// Mean teacher-forced cross-entropy of `targets` (each followed by an
    /// implicit EOS) given contexts `z` of shape `[B, context]`.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, z: Var, targets: &[&[usize]]) -> Result<Var> {
        for t in targets {
            if let Some(bad) = t.iter().find(|&&x| x >= self.vocab) {
                return Err(Error::UnknownToken(format!(
                    "index {bad} outside vocabulary of {}",
                    self.vocab
                )));
            }
        }
        let steps = targets.iter().map(|t| t.len() + 1).max().unwrap_or(0);
        let table = g.param(store, self.table);
        let p = self.rnn.bind(g, store);
        let init = self.init.forward(g, store, z)?;
        let mut s = g.tanh(init)?;
        let cond = self.cond.forward(g, store, z)?;
        let mut states = Vec::with_capacity(steps);
        let mut flat_targets = Vec::with_capacity(steps * targets.len());
        for t in 0..steps {
            let prev: Vec<usize> = targets
                .iter()
                .map(|seq| {
                    if t == 0 {
                        BOS
                    } else {
                        seq.get(t - 1).copied().unwrap_or(PAD)
                    }
                })
                .collect();
            let x = g.embedding(table, prev)?;
            s = Rnn::step(g, &p, x, Some(s), Some(cond))?;
            states.push(s);
            flat_targets.extend(targets.iter().map(|seq| match t.cmp(&seq.len()) {
                std::cmp::Ordering::Less => seq[t],
                std::cmp::Ordering::Equal => EOS,
                std::cmp::Ordering::Greater => PAD,
            }));
        }
        let stacked = if states.len() == 1 {
            states[0]
        } else {
            g.concat(&states, 0)?
        };
        let logits = self.out.forward(g, store, stacked)?;
        g.cross_entropy(logits, flat_targets, PAD)
    }

    pub fn start(&self, store: &ParamStore, z: &[f64]) -> DecoderState {
        let mut s = self.init.apply(store, z);
        s.iter_mut().for_each(|v| *v = v.tanh());
        DecoderState {
            state: s,
            cond: self.cond.apply(store, z),
        }
    }

    /// Advances one step after emitting `prev`; returns the new state and
    /// the log-distribution of the next token.
    pub fn step(&self, store: &ParamStore, st: &DecoderState, prev: usize) -> (DecoderState, Vec<f64>) {
        let e = self.rnn.input;
        let table = &store.get(self.table).values;
        let x = &table[prev * e..(prev + 1) * e];
        let s = self.rnn.step_plain(store, x, Some(&st.state), Some(&st.cond));
        let logp = log_softmax(&self.out.apply(store, &s));
        (
            DecoderState {
                state: s,
                cond: st.cond.clone(),
            },
            logp,
        )
    }

    /// Argmax decode from context `z`; the result excludes EOS. PAD and BOS
    /// are never emitted, and ties go to the lower token index.
    pub fn greedy(&self, store: &ParamStore, z: &[f64], max_len: usize) -> Vec<usize> {
        let mut st = self.start(store, z);
        let mut prev = BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (next, logp) = self.step(store, &st, prev);
            let tok = argmax_emittable(&logp);
            if tok == EOS {
                break;
            }
            out.push(tok);
            prev = tok;
            st = next;
        }
        out
    }

    /// Log-probability of emitting exactly `tokens` (which should end in EOS
    /// unless truncated at the length cap).
    pub fn sequence_logprob(&self, store: &ParamStore, z: &[f64], tokens: &[usize]) -> f64 {
        let mut st = self.start(store, z);
        let mut prev = BOS;
        let mut total = 0.0;
        for &tok in tokens {
            let (next, logp) = self.step(store, &st, prev);
            total += logp[tok];
            prev = tok;
            st = next;
        }
        total
    }
}

/// Index of the largest entry among emittable tokens (EOS and up).
pub fn argmax_emittable(logp: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &v) in logp.iter().enumerate().skip(EOS + 1) {
        if v > logp[best] {
            best = i;
        }
    }
    best
}
