//! Loop-based reference implementations on plain `Vec<f64>` rows, written
//! independently of the tape, plus random layer weights usable by both.
#![allow(dead_code)]

use vivit::attention::{
    factorised_dot_layer, factorised_sa_layer, LayerNormWeights, Linear, MlpWeights, MsaWeights,
    TransformerLayerWeights,
};
use vivit::tokenizer::Grid;
use vivit::{RngState, Tape, Tensor};

pub type Row = Vec<f64>;

pub fn rand_tensor(shape: &[usize], scale: f64, rng: &mut RngState) -> Tensor<f64> {
    Tensor::random_uniform(shape.to_vec(), -scale, scale, rng)
}

#[derive(Clone)]
pub struct Lin {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
}

impl Lin {
    pub fn random(din: usize, dout: usize, rng: &mut RngState) -> Self {
        Lin {
            w: rand_tensor(&[din, dout], 0.5, rng),
            b: rand_tensor(&[dout], 0.2, rng),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Row {
        let (din, dout) = (self.w.shape()[0], self.w.shape()[1]);
        let w = self.w.data();
        (0..dout)
            .map(|j| self.b.data()[j] + (0..din).map(|i| x[i] * w[i * dout + j]).sum::<f64>())
            .collect()
    }

    fn bind(&self, tape: &mut Tape<f64>) -> Linear {
        Linear {
            weight: tape.param(self.w.clone()),
            bias: tape.param(self.b.clone()),
        }
    }
}

#[derive(Clone)]
pub struct Norm {
    pub gamma: Tensor<f64>,
    pub beta: Tensor<f64>,
}

impl Norm {
    pub fn random(d: usize, rng: &mut RngState) -> Self {
        Norm {
            gamma: Tensor::from_fn([d], |_| 1.0 + 0.3 * (rng.uniform() - 0.5)),
            beta: rand_tensor(&[d], 0.2, rng),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Row {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) * inv * self.gamma.data()[i] + self.beta.data()[i])
            .collect()
    }

    fn bind(&self, tape: &mut Tape<f64>) -> LayerNormWeights {
        LayerNormWeights {
            gamma: tape.param(self.gamma.clone()),
            beta: tape.param(self.beta.clone()),
        }
    }
}

#[derive(Clone)]
pub struct Msa {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
    pub heads: usize,
}

impl Msa {
    pub fn random(d: usize, heads: usize, rng: &mut RngState) -> Self {
        Msa {
            q: Lin::random(d, d, rng),
            k: Lin::random(d, d, rng),
            v: Lin::random(d, d, rng),
            o: Lin::random(d, d, rng),
            heads,
        }
    }

    pub fn bind(&self, tape: &mut Tape<f64>) -> MsaWeights {
        MsaWeights {
            query: self.q.bind(tape),
            key: self.k.bind(tape),
            value: self.v.bind(tape),
            out: self.o.bind(tape),
            heads: self.heads,
        }
    }

    /// Per-head loops; head `h` of query `i` attends to key `j` only when
    /// `allowed(h, i, j)`.
    pub fn masked(&self, xs: &[Row], allowed: impl Fn(usize, usize, usize) -> bool) -> Vec<Row> {
        let d = xs[0].len();
        let dk = d / self.heads;
        let qs: Vec<Row> = xs.iter().map(|x| self.q.apply(x)).collect();
        let ks: Vec<Row> = xs.iter().map(|x| self.k.apply(x)).collect();
        let vs: Vec<Row> = xs.iter().map(|x| self.v.apply(x)).collect();
        let mut out = Vec::with_capacity(xs.len());
        for i in 0..xs.len() {
            let mut concat = vec![0.0; d];
            for h in 0..self.heads {
                let cols = h * dk..(h + 1) * dk;
                let keys: Vec<usize> = (0..xs.len()).filter(|&j| allowed(h, i, j)).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        cols.clone().map(|c| qs[i][c] * ks[j][c]).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for (a, &j) in e.iter().zip(&keys) {
                    for c in cols.clone() {
                        concat[c] += a / z * vs[j][c];
                    }
                }
            }
            out.push(self.o.apply(&concat));
        }
        out
    }

    pub fn full(&self, xs: &[Row]) -> Vec<Row> {
        self.masked(xs, |_, _, _| true)
    }
}

#[derive(Clone)]
pub struct Layer {
    pub ln1: Norm,
    pub msa: Msa,
    pub temporal: Option<(Norm, Msa)>,
    pub ln2: Norm,
    pub fc1: Lin,
    pub fc2: Lin,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &[f64], b: &[f64]) -> Row {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl Layer {
    pub fn random(d: usize, heads: usize, temporal: bool, rng: &mut RngState) -> Self {
        Layer {
            ln1: Norm::random(d, rng),
            msa: Msa::random(d, heads, rng),
            temporal: temporal.then(|| (Norm::random(d, rng), Msa::random(d, heads, rng))),
            ln2: Norm::random(d, rng),
            fc1: Lin::random(d, 4 * d, rng),
            fc2: Lin::random(4 * d, d, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<f64>) -> TransformerLayerWeights {
        TransformerLayerWeights {
            ln1: self.ln1.bind(tape),
            msa: self.msa.bind(tape),
            temporal: self.temporal.as_ref().map(|(n, m)| (n.bind(tape), m.bind(tape))),
            ln2: self.ln2.bind(tape),
            mlp: MlpWeights {
                fc1: self.fc1.bind(tape),
                fc2: self.fc2.bind(tape),
            },
        }
    }

    fn mlp(&self, y: &[f64]) -> Row {
        let h: Row = self.fc1.apply(&self.ln2.apply(y)).into_iter().map(gelu).collect();
        add(&self.fc2.apply(&h), y)
    }

    /// Residual attention block over `xs` with the given MSA and norm.
    fn attend(norm: &Norm, msa: &Msa, xs: &[Row], allowed: impl Fn(usize, usize, usize) -> bool) -> Vec<Row> {
        let normed: Vec<Row> = xs.iter().map(|x| norm.apply(x)).collect();
        let att = msa.masked(&normed, allowed);
        xs.iter().zip(&att).map(|(x, a)| add(x, a)).collect()
    }

    pub fn full(&self, xs: &[Row]) -> Vec<Row> {
        let y = Self::attend(&self.ln1, &self.msa, xs, |_, _, _| true);
        y.iter().map(|r| self.mlp(r)).collect()
    }

    /// Spatial attention frame by frame, then temporal attention site by
    /// site, then the MLP token by token; `xs` is in grid order.
    pub fn factorised_sa(&self, xs: &[Row], grid: Grid) -> Vec<Row> {
        let s = grid.spatial();
        let mut y = vec![Vec::new(); xs.len()];
        for t in 0..grid.nt {
            let frame: Vec<Row> = (0..s).map(|i| xs[t * s + i].clone()).collect();
            for (i, r) in Self::attend(&self.ln1, &self.msa, &frame, |_, _, _| true).into_iter().enumerate() {
                y[t * s + i] = r;
            }
        }
        let (ln_t, msa_t) = self.temporal.as_ref().expect("temporal weights");
        let mut z = vec![Vec::new(); xs.len()];
        for site in 0..s {
            let tube: Vec<Row> = (0..grid.nt).map(|t| y[t * s + site].clone()).collect();
            for (t, r) in Self::attend(ln_t, msa_t, &tube, |_, _, _| true).into_iter().enumerate() {
                z[t * s + site] = r;
            }
        }
        z.iter().map(|r| self.mlp(r)).collect()
    }

    /// Full-sequence attention where the first half of the heads may only
    /// see the query's frame and the second half only its spatial site.
    pub fn factorised_dot(&self, xs: &[Row], grid: Grid) -> Vec<Row> {
        let s = grid.spatial();
        let half = self.msa.heads / 2;
        let y = Self::attend(&self.ln1, &self.msa, xs, |h, i, j| {
            if h < half {
                i / s == j / s
            } else {
                i % s == j % s
            }
        });
        y.iter().map(|r| self.mlp(r)).collect()
    }
}

/// `[N, d]` rows from a tensor.
pub fn rows(t: &Tensor<f64>) -> Vec<Row> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(|c| c.to_vec()).collect()
}

pub fn max_diff(a: &[Row], b: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Random tiny grid, width and even head count for one seed.
fn random_setting(seed: u64) -> (Grid, usize, usize) {
    let mut rng = RngState::new(seed);
    let grid = Grid {
        nt: 1 + rng.below(3),
        nh: 1 + rng.below(3),
        nw: 1 + rng.below(3),
    };
    let heads = 2 * (1 + rng.below(2));
    let d = heads * (1 + rng.below(3));
    (grid, d, heads)
}

pub fn factorised_sa_error(seed: u64) -> f64 {
    let (grid, d, heads) = random_setting(seed);
    let mut rng = RngState::new(seed).fork(1);
    let layer = Layer::random(d, heads, true, &mut rng);
    let x = rand_tensor(&[grid.nt, grid.spatial(), d], 1.0, &mut rng);
    let mut tape = Tape::new();
    let w = layer.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = factorised_sa_layer(&mut tape, xv, &w, false).unwrap();
    max_diff(&layer.factorised_sa(&rows(&x), grid), tape.value(y).data())
}

pub fn factorised_dot_error(seed: u64) -> f64 {
    let (grid, d, heads) = random_setting(seed);
    let mut rng = RngState::new(seed).fork(2);
    let layer = Layer::random(d, heads, false, &mut rng);
    let x = rand_tensor(&[grid.len(), d], 1.0, &mut rng);
    let mut tape = Tape::new();
    let w = layer.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = factorised_dot_layer(&mut tape, xv, grid, &w).unwrap();
    max_diff(&layer.factorised_dot(&rows(&x), grid), tape.value(y).data())
}

