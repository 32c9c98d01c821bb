use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HeadGateVector, HeadId, ModelState, Pooling};
use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::mix_seed;
use crate::tasks::{EncodedInput, Label, TaskKind};

/// How head gates enter the graph.
#[derive(Debug, Clone, Copy)]
pub enum Gates<'a> {
    /// The model's stored gate vector, as constants.
    Stored,
    /// An explicit gate vector, as constants.
    Fixed(&'a HeadGateVector),
    /// Raw per-head values, not range-checked. Used by finite-difference
    /// probes that step slightly above 1.
    Probe(&'a [f64]),
    /// Scalar leaves valued at the stored gates that receive gradients.
    Leaves,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub gates: Option<Gates<'a>>,
    /// Load parameters as gradient-receiving leaves.
    pub train_params: bool,
    /// Enables dropout with masks derived from this seed.
    pub dropout_seed: Option<u64>,
}

/// One example's forward graph with handles to the intermediate nodes.
pub struct Graph<T: Real> {
    pub tape: Tape<T>,
    /// Leaf per model parameter; `None` for other tasks' output heads.
    pub params: Vec<Option<Var>>,
    /// Scalar gate node per head, layer-major.
    pub gates: Vec<Var>,
    /// `A_h(X)` per head before gating, layer-major.
    pub head_outputs: Vec<Var>,
    /// `ξ_h · A_h(X)` per head.
    pub gated_outputs: Vec<Var>,
    /// Attention probabilities per head.
    pub attention: Vec<Var>,
    /// Multi-head attention output per layer, before dropout and residual.
    pub mha_outputs: Vec<Var>,
    /// Embedding layer output (input of layer 0).
    pub embedding: Var,
    /// Encoder output per layer.
    pub layer_outputs: Vec<Var>,
    /// Pooled representation per layer (index 0 is the first encoder layer).
    pub pooled_layers: Vec<Var>,
    pub output: Var,
    pub kind: TaskKind,
}

impl<T: Real> Graph<T> {
    /// Appends the task loss for `label` and returns it.
    pub fn loss(&mut self, label: Label) -> Result<Var> {
        match (self.kind, label) {
            (TaskKind::Classification { .. }, Label::Class(c)) => self.tape.cross_entropy(self.output, c),
            (TaskKind::Regression, Label::Value(v)) => self.tape.squared_error(self.output, T::lit(v)),
            (_, l) => Err(Error::invalid(format!("label {l:?} does not fit task kind {:?}", self.kind))),
        }
    }

    pub fn output_values(&self) -> Vec<f64> {
        self.tape.value(self.output).data().iter().map(|v| v.as_f64()).collect()
    }
}

/// Per-head activations and pooled layer representations for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCapture<T: Real = f32> {
    pub head: HeadId,
    pub output: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace<T: Real = f32> {
    pub heads: Vec<HeadCapture<T>>,
    pub pooled: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

struct Dropout {
    seed: u64,
    site: u64,
    p: f64,
}

impl Dropout {
    fn apply<T: Real>(d: &mut Option<Dropout>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let Some(d) = d else { return Ok(x) };
        if d.p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[d.seed, d.site]));
        d.site += 1;
        let keep = T::lit(1.0 / (1.0 - d.p));
        let n = tape.value(x).numel();
        let mask = (0..n).map(|_| if rng.random::<f64>() < d.p { T::zero() } else { keep }).collect();
        tape.mul_const(x, mask)
    }
}

impl<T: Real> ModelState<T> {
    fn check_input(&self, input: &EncodedInput) -> Result<()> {
        let n = input.ids.len();
        if n == 0 || n > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {n} outside [1, {}]",
                self.config.max_seq_len
            )));
        }
        if input.segments.len() != n {
            return Err(Error::invalid("segment ids and token ids differ in length"));
        }
        if let Some(&id) = input.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {id} >= vocab size {}", self.config.vocab_size)));
        }
        if input.segments.iter().any(|&s| s > 1) {
            return Err(Error::invalid("segment id above 1"));
        }
        Ok(())
    }

    /// Builds the forward graph of `input` through task head `task`.
    pub fn graph(&self, task: usize, input: &EncodedInput, opts: ForwardOptions<'_>) -> Result<Graph<T>> {
        let th = self.heads().get(task).ok_or_else(|| Error::UnknownTask(format!("#{task}")))?.clone();
        self.check_input(input)?;
        let cfg = &self.config;
        let mut tape = Tape::new();
        let mut params = vec![None; self.params().len()];
        let task_params = [th.weight, th.bias];
        for (i, p) in self.params().iter().enumerate() {
            if i >= self.encoder_param_count() && !task_params.contains(&i) {
                continue;
            }
            params[i] = Some(if opts.train_params { tape.param(p.clone()) } else { tape.constant(p.clone()) });
        }
        let pv = |i: usize| params[i].expect("encoder parameter loaded");

        let n_total = cfg.total_heads();
        let gate_values: Vec<T> = match opts.gates.unwrap_or(Gates::Stored) {
            Gates::Stored | Gates::Leaves => self.gates.values().iter().map(|&g| T::lit(g as f64)).collect(),
            Gates::Fixed(g) => {
                if g.n_layers != cfg.n_layers || g.n_heads != cfg.n_heads {
                    return Err(Error::invalid("gate vector does not match model config"));
                }
                g.values().iter().map(|&v| T::lit(v as f64)).collect()
            }
            Gates::Probe(v) => {
                if v.len() != n_total {
                    return Err(Error::invalid(format!("probe needs {n_total} gate values, got {}", v.len())));
                }
                v.iter().map(|&x| T::lit(x)).collect()
            }
        };
        let leaves = matches!(opts.gates, Some(Gates::Leaves));
        let gates: Vec<Var> = gate_values
            .into_iter()
            .map(|g| if leaves { tape.param(Tensor::scalar(g)) } else { tape.constant(Tensor::scalar(g)) })
            .collect();

        let mut dropout = opts.dropout_seed.map(|seed| Dropout { seed, site: 0, p: cfg.dropout });
        let eps = T::lit(cfg.layer_norm_eps);
        let n = input.ids.len();
        let layout = self.layout().clone();

        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let segs: Vec<usize> = input.segments.iter().map(|&s| s as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let tok = tape.gather_rows(pv(layout.tok), &ids)?;
        let pos = tape.gather_rows(pv(layout.pos), &positions)?;
        let seg = tape.gather_rows(pv(layout.seg), &segs)?;
        let e = tape.add(tok, pos)?;
        let e = tape.add(e, seg)?;
        let e = tape.layer_norm(e, pv(layout.ln_g), pv(layout.ln_b), eps)?;
        let mut x = Dropout::apply(&mut dropout, &mut tape, e)?;

        let mask = cfg.causal.then(|| {
            let mut m = vec![T::zero(); n * n];
            for i in 0..n {
                for j in i + 1..n {
                    m[i * n + j] = T::neg_infinity();
                }
            }
            Tensor::matrix(n, n, m).unwrap()
        });
        let inv_sqrt_dk = T::lit(1.0 / (cfg.d_k as f64).sqrt());
        let act = cfg.activation.into();

        let mut g = Graph {
            tape,
            params: Vec::new(),
            gates,
            head_outputs: Vec::with_capacity(n_total),
            gated_outputs: Vec::with_capacity(n_total),
            attention: Vec::with_capacity(n_total),
            mha_outputs: Vec::new(),
            embedding: x,
            layer_outputs: Vec::new(),
            pooled_layers: Vec::new(),
            output: x,
            kind: th.kind,
        };
        let tape = &mut g.tape;
        for (l, lp) in layout.layers.iter().enumerate() {
            let q = tape.matmul(x, pv(lp.wq))?;
            let q = tape.add_row(q, pv(lp.bq))?;
            let k = tape.matmul(x, pv(lp.wk))?;
            let k = tape.add_row(k, pv(lp.bk))?;
            let v = tape.matmul(x, pv(lp.wv))?;
            let v = tape.add_row(v, pv(lp.bv))?;
            let mut gated = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, h * cfg.d_k, cfg.d_k)?;
                let kh = tape.slice_cols(k, h * cfg.d_k, cfg.d_k)?;
                let vh = tape.slice_cols(v, h * cfg.d_v, cfg.d_v)?;
                let s = tape.matmul_t(qh, kh)?;
                let mut s = tape.scale(s, inv_sqrt_dk);
                if let Some(m) = &mask {
                    s = tape.add_const(s, m)?;
                }
                let a = tape.softmax_rows(s)?;
                let out = tape.matmul(a, vh)?;
                let gv = tape.scale_by(out, g.gates[l * cfg.n_heads + h])?;
                g.attention.push(a);
                g.head_outputs.push(out);
                g.gated_outputs.push(gv);
                gated.push(gv);
            }
            let cat = tape.concat_cols(&gated)?;
            let mha = tape.matmul(cat, pv(lp.wo))?;
            g.mha_outputs.push(mha);
            let d = Dropout::apply(&mut dropout, tape, mha)?;
            let r = tape.add(x, d)?;
            let h1 = tape.layer_norm(r, pv(lp.ln1_g), pv(lp.ln1_b), eps)?;
            let f = tape.matmul(h1, pv(lp.w1))?;
            let f = tape.add_row(f, pv(lp.b1))?;
            let f = tape.activation(f, act);
            let f = tape.matmul(f, pv(lp.w2))?;
            let f = tape.add_row(f, pv(lp.b2))?;
            let f = Dropout::apply(&mut dropout, tape, f)?;
            let r = tape.add(h1, f)?;
            x = tape.layer_norm(r, pv(lp.ln2_g), pv(lp.ln2_b), eps)?;
            g.layer_outputs.push(x);
            let pooled = match th.pooling {
                Pooling::Cls => tape.slice_rows(x, 0, 1)?,
                Pooling::Mean => tape.mean_rows(x)?,
            };
            g.pooled_layers.push(pooled);
        }
        let pooled = *g.pooled_layers.last().unwrap();
        let o = tape.matmul(pooled, pv(th.weight))?;
        g.output = tape.add_row(o, pv(th.bias))?;
        g.params = params;
        Ok(g)
    }

    /// Number of leading parameters that belong to the shared encoder.
    pub fn encoder_param_count(&self) -> usize {
        self.heads().iter().map(|h| h.weight).min().unwrap_or(self.params().len())
    }

    /// Eval-mode output row of task head `task`.
    pub fn forward(&self, task: usize, input: &EncodedInput) -> Result<Vec<f64>> {
        Ok(self.graph(task, input, ForwardOptions::default())?.output_values())
    }

    /// Eval-mode forward under an explicit gate vector.
    pub fn forward_gated(&self, task: usize, input: &EncodedInput, gates: &HeadGateVector) -> Result<Vec<f64>> {
        let opts = ForwardOptions { gates: Some(Gates::Fixed(gates)), ..Default::default() };
        Ok(self.graph(task, input, opts)?.output_values())
    }

    /// Eval-mode head activations `A_h(X)` and per-layer pooled
    /// representations, pooled by `pooling`.
    pub fn capture_head_outputs(&self, task: usize, input: &EncodedInput, pooling: Pooling) -> Result<EncoderTrace<T>> {
        let g = self.graph(task, input, ForwardOptions::default())?;
        let heads = g
            .head_outputs
            .iter()
            .enumerate()
            .map(|(i, &v)| HeadCapture { head: HeadId::from_flat(i, self.config.n_heads), output: g.tape.value(v).clone() })
            .collect();
        let pooled = g
            .layer_outputs
            .iter()
            .map(|&v| {
                let t = g.tape.value(v);
                let (r, c) = t.dims2().unwrap();
                match pooling {
                    Pooling::Cls => Tensor::matrix(1, c, t.row(0).to_vec()).unwrap(),
                    Pooling::Mean => {
                        let inv = T::lit(1.0 / r as f64);
                        let data = (0..c).map(|j| (0..r).map(|i| t.at(i, j)).sum::<T>() * inv).collect();
                        Tensor::matrix(1, c, data).unwrap()
                    }
                }
            })
            .collect();
        Ok(EncoderTrace { heads, pooled, output: g.tape.value(g.output).clone() })
    }
}
