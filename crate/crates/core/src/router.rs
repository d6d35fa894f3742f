//! Global gating network over frozen features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::BatchRoutingStats;
use crate::numcore::tape::{gelu, softmax_rows};
use crate::numcore::{Matrix, Tape, Var};

/// Two-layer GELU MLP producing one logit per semantic expert.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNet {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Tape handles for the router parameters, in [`GatingNet::params`] order.
#[derive(Debug, Clone, Copy)]
pub struct GatingVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GatingVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl GatingNet {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, hidden: usize, n_semantic: usize, rng: &mut R) -> Self {
        Self {
            w1: Matrix::randn(hidden, embed_dim, 1.0 / (embed_dim as f64).sqrt(), rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::randn(n_semantic, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(1, n_semantic),
        }
    }

    pub fn n_semantic(&self) -> usize {
        self.w2.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn params(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Router logits for a batch of features (rows).
    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.embed_dim() {
            return Err(Error::InvalidInput(format!(
                "router expects {}-dim features, got {}",
                self.embed_dim(),
                features.cols()
            )));
        }
        let h = add_row(features.matmul_nt(&self.w1), &self.b1).map(gelu);
        Ok(add_row(h.matmul_nt(&self.w2), &self.b2))
    }

    /// Records the router on `tape`; parameters become tape parameters when
    /// `trainable`, constants otherwise.
    pub fn forward_tape(&self, tape: &mut Tape, features: Var, trainable: bool) -> (Var, GatingVars) {
        let leaf = |t: &mut Tape, m: &Matrix| {
            if trainable {
                t.param(m.clone())
            } else {
                t.constant(m.clone())
            }
        };
        let vars = GatingVars {
            w1: leaf(tape, &self.w1),
            b1: leaf(tape, &self.b1),
            w2: leaf(tape, &self.w2),
            b2: leaf(tape, &self.b2),
        };
        let h = tape.matmul_nt(features, vars.w1);
        let h = tape.add_row(h, vars.b1);
        let h = tape.gelu(h);
        let z = tape.matmul_nt(h, vars.w2);
        let z = tape.add_row(z, vars.b2);
        (z, vars)
    }
}

fn add_row(mut m: Matrix, row: &Matrix) -> Matrix {
    for i in 0..m.rows() {
        for (o, b) in m.row_mut(i).iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    m
}

/// Logits `z_x`, full-softmax gates `g`, and the selected top-k indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    pub logits: Vec<f64>,
    pub gates: Vec<f64>,
    /// Ordered by descending gate, ties to the lower index.
    pub selected: Vec<usize>,
}

impl RouterOutput {
    pub fn from_logits(logits: &[f64], k_s: usize) -> Result<Self> {
        let n = logits.len();
        if k_s == 0 || k_s > n {
            return Err(Error::InvalidTopK { k: k_s, n_semantic: n });
        }
        let gates = softmax_rows(&Matrix::row_vector(logits)).into_data();
        let selected = top_k(&gates, k_s);
        Ok(Self {
            logits: logits.to_vec(),
            gates,
            selected,
        })
    }

    /// Index of the largest logit (lowest index on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }

    /// Gate values for `selected`, in the same order.
    pub fn mixing_weights(&self, renormalize: bool) -> Vec<f64> {
        let raw: Vec<f64> = self.selected.iter().map(|&i| self.gates[i]).collect();
        if renormalize {
            let total: f64 = raw.iter().sum();
            raw.iter().map(|g| g / total).collect()
        } else {
            raw
        }
    }

    /// Dense length-N_S vector holding the mixing weight of each selected
    /// expert and zero elsewhere.
    pub fn dense_mixing(&self, renormalize: bool) -> Vec<f64> {
        let mut out = vec![0.0; self.gates.len()];
        for (&i, g) in self.selected.iter().zip(self.mixing_weights(renormalize)) {
            out[i] = g;
        }
        out
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, descending, ties to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Routes one pooled frozen feature vector.
pub fn route(features: &[f64], net: &GatingNet, k_s: usize) -> Result<RouterOutput> {
    let n = net.n_semantic();
    if k_s == 0 || k_s > n {
        return Err(Error::InvalidTopK { k: k_s, n_semantic: n });
    }
    let z = net.logits(&Matrix::row_vector(features))?;
    RouterOutput::from_logits(z.row(0), k_s)
}

/// Routes a batch (one feature vector per row) and gathers the batch
/// statistics F (argmax fractions) and P (mean gate vectors).
pub fn route_batch(
    features: &Matrix,
    net: &GatingNet,
    k_s: usize,
) -> Result<(Vec<RouterOutput>, BatchRoutingStats)> {
    if features.rows() == 0 {
        return Err(Error::InvalidInput("route_batch on an empty batch".into()));
    }
    let n = net.n_semantic();
    if k_s == 0 || k_s > n {
        return Err(Error::InvalidTopK { k: k_s, n_semantic: n });
    }
    let z = net.logits(features)?;
    let outs = (0..z.rows())
        .map(|i| RouterOutput::from_logits(z.row(i), k_s))
        .collect::<Result<Vec<_>>>()?;
    let stats = BatchRoutingStats::from_outputs(&outs)?;
    Ok((outs, stats))
}
