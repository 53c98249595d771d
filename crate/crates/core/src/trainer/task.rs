//! Desk-scale objectives: a noisy quadratic with known optimum, logistic
//! regression, and a one-hidden-layer tanh MLP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix64;

fn default_lambda_min() -> f64 {
    1.0
}
fn default_lambda_max() -> f64 {
    10.0
}
fn default_batch() -> usize {
    16
}
fn default_separation() -> f64 {
    2.0
}

/// Declarative task description; `build` materializes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    /// `f(θ) = ½(θ−θ*)ᵀA(θ−θ*)` with eigenvalues evenly spread over
    /// `[lambda_min, lambda_max]`. Each worker's gradient carries additive
    /// Gaussian noise with `E‖ξ‖² = noise_sigma²`.
    Quadratic {
        dim: usize,
        #[serde(default = "default_lambda_min")]
        lambda_min: f64,
        #[serde(default = "default_lambda_max")]
        lambda_max: f64,
        #[serde(default)]
        noise_sigma: f64,
        #[serde(default)]
        data_seed: u64,
    },
    /// Binary logistic regression on Gaussian features with labels drawn
    /// from a planted model.
    Logistic {
        dim: usize,
        samples: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default)]
        data_seed: u64,
    },
    /// `inputs → hidden (tanh) → classes (softmax)` on Gaussian clusters.
    TinyMlp {
        inputs: usize,
        hidden: usize,
        classes: usize,
        samples: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        data_seed: u64,
    },
}

impl TaskSpec {
    pub fn build(&self) -> Result<Task> {
        match *self {
            TaskSpec::Quadratic { dim, lambda_min, lambda_max, noise_sigma, data_seed } => {
                Quadratic::new(dim, lambda_min, lambda_max, noise_sigma, data_seed).map(Task::Quadratic)
            }
            TaskSpec::Logistic { dim, samples, batch_size, data_seed } => {
                Logistic::new(dim, samples, batch_size, data_seed).map(Task::Logistic)
            }
            TaskSpec::TinyMlp { inputs, hidden, classes, samples, batch_size, separation, data_seed } => {
                TinyMlp::new(inputs, hidden, classes, samples, batch_size, separation, data_seed)
                    .map(Task::TinyMlp)
            }
        }
    }
}

/// Per-(seed, worker, iteration) generator for gradient noise and minibatches.
fn worker_rng(seed: u64, worker: usize, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(worker as u64 + 1)));
    rng.set_stream(iteration);
    rng
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub enum Task {
    Quadratic(Quadratic),
    Logistic(Logistic),
    TinyMlp(TinyMlp),
}

impl Task {
    pub fn dim(&self) -> usize {
        match self {
            Task::Quadratic(q) => q.dim(),
            Task::Logistic(l) => l.dim,
            Task::TinyMlp(m) => m.n_params(),
        }
    }

    /// Full-data objective.
    pub fn loss(&self, theta: &[f64]) -> f64 {
        match self {
            Task::Quadratic(q) => q.loss(theta),
            Task::Logistic(l) => l.loss(theta),
            Task::TinyMlp(m) => m.loss_and_accuracy(theta).0,
        }
    }

    /// Classification accuracy on the training data, where meaningful.
    pub fn accuracy(&self, theta: &[f64]) -> Option<f64> {
        match self {
            Task::Quadratic(_) => None,
            Task::Logistic(l) => Some(l.accuracy(theta)),
            Task::TinyMlp(m) => Some(m.loss_and_accuracy(theta).1),
        }
    }

    /// Worker `worker`'s stochastic gradient at `iteration`.
    pub fn stochastic_gradient(
        &self,
        theta: &[f64],
        seed: u64,
        worker: usize,
        workers: usize,
        iteration: u64,
        out: &mut [f64],
    ) {
        let mut rng = worker_rng(seed, worker, iteration);
        match self {
            Task::Quadratic(q) => q.noisy_gradient(theta, &mut rng, out),
            Task::Logistic(l) => l.minibatch_gradient(theta, worker, workers, &mut rng, out),
            Task::TinyMlp(m) => m.minibatch_gradient(theta, worker, workers, &mut rng, out),
        }
    }

    pub fn initial_point(&self) -> Vec<f64> {
        match self {
            Task::Quadratic(q) => vec![0.0; q.dim()],
            Task::Logistic(l) => vec![0.0; l.dim],
            Task::TinyMlp(m) => m.initial_params(),
        }
    }

    /// Minimizer, where known in closed form.
    pub fn optimum(&self) -> Option<&[f64]> {
        match self {
            Task::Quadratic(q) => Some(&q.optimum),
            _ => None,
        }
    }

    /// Optimal objective value, where known.
    pub fn optimal_value(&self) -> Option<f64> {
        match self {
            Task::Quadratic(_) => Some(0.0),
            _ => None,
        }
    }

    /// Gradient Lipschitz constant, or an upper bound on it.
    pub fn smoothness(&self) -> Option<f64> {
        match self {
            Task::Quadratic(q) => Some(q.lambda_max()),
            Task::Logistic(l) => Some(l.smoothness_bound()),
            Task::TinyMlp(_) => None,
        }
    }
}

/// `f(θ) = ½(θ−θ*)ᵀA(θ−θ*)`, `A = Q diag(λ) Qᵀ`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: Vec<f64>,
    eigenvalues: Vec<f64>,
    optimum: Vec<f64>,
    noise_sigma: f64,
}

impl Quadratic {
    pub fn new(dim: usize, lambda_min: f64, lambda_max: f64, noise_sigma: f64, data_seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("quadratic dimension must be >= 1"));
        }
        if !(lambda_min > 0.0 && lambda_max >= lambda_min && lambda_max.is_finite()) {
            return Err(Error::config(format!(
                "need 0 < lambda_min <= lambda_max, got {lambda_min} and {lambda_max}"
            )));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        let eigenvalues: Vec<f64> = if dim == 1 {
            vec![lambda_max]
        } else {
            (0..dim)
                .map(|i| lambda_min + (lambda_max - lambda_min) * i as f64 / (dim - 1) as f64)
                .collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        let q = random_orthogonal(dim, &mut rng);
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                a[i * dim + j] = (0..dim).map(|k| q[i * dim + k] * eigenvalues[k] * q[j * dim + k]).sum();
            }
        }
        let optimum = (0..dim).map(|_| gaussian(&mut rng)).collect();
        Ok(Self { a, eigenvalues, optimum, noise_sigma })
    }

    /// Quadratic with an explicit symmetric positive semi-definite `A` and
    /// optimum; `eigen_max` must bound its spectrum.
    pub fn from_parts(a: Vec<f64>, optimum: Vec<f64>, eigen_max: f64, noise_sigma: f64) -> Result<Self> {
        let n = optimum.len();
        if n == 0 || a.len() != n * n {
            return Err(Error::config(format!("A has {} entries for dimension {n}", a.len())));
        }
        Ok(Self { a, eigenvalues: vec![eigen_max], optimum, noise_sigma })
    }

    pub fn dim(&self) -> usize {
        self.optimum.len()
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// `A(θ − θ*)`.
    pub fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let d: Vec<f64> = theta.iter().zip(&self.optimum).map(|(t, o)| t - o).collect();
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.a[i * n..(i + 1) * n], &d);
        }
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.dim();
        let d: Vec<f64> = theta.iter().zip(&self.optimum).map(|(t, o)| t - o).collect();
        let mut acc = 0.0;
        for i in 0..n {
            acc += d[i] * dot(&self.a[i * n..(i + 1) * n], &d);
        }
        0.5 * acc
    }

    fn noisy_gradient(&self, theta: &[f64], rng: &mut impl Rng, out: &mut [f64]) {
        self.gradient(theta, out);
        if self.noise_sigma > 0.0 {
            let per = self.noise_sigma / (self.dim() as f64).sqrt();
            for o in out.iter_mut() {
                *o += per * gaussian(rng);
            }
        }
    }
}

/// Row-major orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
        // Two passes keep the basis orthogonal to working precision.
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= p * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    let mut q = vec![0.0; n * n];
    for (k, c) in cols.iter().enumerate() {
        for i in 0..n {
            q[i * n + k] = c[i];
        }
    }
    q
}

/// Samples of worker `worker`'s shard: indices congruent to `worker` mod M.
fn shard_sample(samples: usize, worker: usize, workers: usize, rng: &mut impl Rng) -> usize {
    let shard = (samples - worker).div_ceil(workers);
    worker + workers * rng.random_range(0..shard)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct Logistic {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    batch_size: usize,
}

impl Logistic {
    pub fn new(dim: usize, samples: usize, batch_size: usize, data_seed: u64) -> Result<Self> {
        if dim == 0 || samples == 0 || batch_size == 0 {
            return Err(Error::config("logistic task needs dim, samples and batch_size >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        let planted: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
        let features: Vec<f64> = (0..dim * samples).map(|_| gaussian(&mut rng) / (dim as f64).sqrt()).collect();
        let labels = features
            .chunks(dim)
            .map(|x| f64::from(u8::from(rng.random::<f64>() < sigmoid(3.0 * dot(x, &planted)))))
            .collect();
        Ok(Self { dim, features, labels, batch_size })
    }

    fn samples(&self) -> usize {
        self.labels.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let total: f64 = (0..self.samples())
            .map(|i| {
                let z = dot(self.row(i), theta);
                softplus(z) - self.labels[i] * z
            })
            .sum();
        total / self.samples() as f64
    }

    pub fn accuracy(&self, theta: &[f64]) -> f64 {
        let hits = (0..self.samples())
            .filter(|&i| (dot(self.row(i), theta) > 0.0) == (self.labels[i] > 0.5))
            .count();
        hits as f64 / self.samples() as f64
    }

    /// `¼ λ_max(XᵀX/N) ≤ ¼ mean‖x_i‖²`.
    pub fn smoothness_bound(&self) -> f64 {
        0.25 * self.features.iter().map(|x| x * x).sum::<f64>() / self.samples() as f64
    }

    fn minibatch_gradient(
        &self,
        theta: &[f64],
        worker: usize,
        workers: usize,
        rng: &mut impl Rng,
        out: &mut [f64],
    ) {
        out.fill(0.0);
        let n = self.samples();
        if worker >= n {
            return;
        }
        for _ in 0..self.batch_size {
            let i = shard_sample(n, worker, workers, rng);
            let x = self.row(i);
            let r = sigmoid(dot(x, theta)) - self.labels[i];
            for (o, xi) in out.iter_mut().zip(x) {
                *o += r * xi;
            }
        }
        let b = self.batch_size as f64;
        out.iter_mut().for_each(|o| *o /= b);
    }
}

/// Parameters are laid out `[W1 (hidden×inputs), b1, W2 (classes×hidden), b2]`.
#[derive(Debug, Clone)]
pub struct TinyMlp {
    inputs: usize,
    hidden: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    batch_size: usize,
    init_seed: u64,
}

impl TinyMlp {
    pub fn new(
        inputs: usize,
        hidden: usize,
        classes: usize,
        samples: usize,
        batch_size: usize,
        separation: f64,
        data_seed: u64,
    ) -> Result<Self> {
        if inputs == 0 || hidden == 0 || classes < 2 || samples == 0 || batch_size == 0 {
            return Err(Error::config(
                "tiny MLP needs inputs, hidden, samples, batch_size >= 1 and classes >= 2",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        let centers: Vec<f64> = (0..classes * inputs).map(|_| separation * gaussian(&mut rng)).collect();
        let mut features = Vec::with_capacity(samples * inputs);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let c = rng.random_range(0..classes);
            labels.push(c);
            for j in 0..inputs {
                features.push(centers[c * inputs + j] + gaussian(&mut rng));
            }
        }
        Ok(Self { inputs, hidden, classes, features, labels, batch_size, init_seed: mix64(data_seed ^ 0x5eed) })
    }

    pub fn n_params(&self) -> usize {
        self.hidden * (self.inputs + 1) + self.classes * (self.hidden + 1)
    }

    fn samples(&self) -> usize {
        self.labels.len()
    }

    /// Uniform fan-in scaled initialization, fixed by the data seed so that
    /// runs with different training seeds start from the same point.
    pub fn initial_params(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let mut p = Vec::with_capacity(self.n_params());
        let a1 = (3.0 / self.inputs as f64).sqrt();
        p.extend((0..self.hidden * self.inputs).map(|_| rng.random_range(-a1..a1)));
        p.extend(std::iter::repeat_n(0.0, self.hidden));
        let a2 = (3.0 / self.hidden as f64).sqrt();
        p.extend((0..self.classes * self.hidden).map(|_| rng.random_range(-a2..a2)));
        p.extend(std::iter::repeat_n(0.0, self.classes));
        p
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = p.split_at(self.hidden * self.inputs);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.classes * self.hidden);
        (w1, b1, w2, b2)
    }

    /// Hidden activations and class log-probabilities for one sample.
    fn forward(&self, p: &[f64], x: &[f64], h: &mut [f64], logp: &mut [f64]) {
        let (w1, b1, w2, b2) = self.split(p);
        for (j, hj) in h.iter_mut().enumerate() {
            *hj = (b1[j] + dot(&w1[j * self.inputs..(j + 1) * self.inputs], x)).tanh();
        }
        for (c, lc) in logp.iter_mut().enumerate() {
            *lc = b2[c] + dot(&w2[c * self.hidden..(c + 1) * self.hidden], h);
        }
        let peak = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = peak + logp.iter().map(|z| (z - peak).exp()).sum::<f64>().ln();
        logp.iter_mut().for_each(|z| *z -= lse);
    }

    pub fn loss_and_accuracy(&self, p: &[f64]) -> (f64, f64) {
        let mut h = vec![0.0; self.hidden];
        let mut logp = vec![0.0; self.classes];
        let (mut loss, mut hits) = (0.0, 0usize);
        for i in 0..self.samples() {
            let x = &self.features[i * self.inputs..(i + 1) * self.inputs];
            self.forward(p, x, &mut h, &mut logp);
            loss -= logp[self.labels[i]];
            let best = (0..self.classes).max_by(|&a, &b| logp[a].total_cmp(&logp[b])).unwrap();
            hits += usize::from(best == self.labels[i]);
        }
        let n = self.samples() as f64;
        (loss / n, hits as f64 / n)
    }

    /// Mean cross-entropy gradient over a minibatch of `indices`.
    pub fn batch_gradient(&self, p: &[f64], indices: &[usize], out: &mut [f64]) {
        out.fill(0.0);
        let (hid, inp, cls) = (self.hidden, self.inputs, self.classes);
        let (_, _, w2, _) = self.split(p);
        let mut h = vec![0.0; hid];
        let mut logp = vec![0.0; cls];
        let mut dh = vec![0.0; hid];
        {
            let (gw1, rest) = out.split_at_mut(hid * inp);
            let (gb1, rest) = rest.split_at_mut(hid);
            let (gw2, gb2) = rest.split_at_mut(cls * hid);
            for &i in indices {
                let x = &self.features[i * inp..(i + 1) * inp];
                self.forward(p, x, &mut h, &mut logp);
                dh.fill(0.0);
                for c in 0..cls {
                    let d = logp[c].exp() - f64::from(u8::from(c == self.labels[i]));
                    gb2[c] += d;
                    for j in 0..hid {
                        gw2[c * hid + j] += d * h[j];
                        dh[j] += d * w2[c * hid + j];
                    }
                }
                for j in 0..hid {
                    let dz = dh[j] * (1.0 - h[j] * h[j]);
                    gb1[j] += dz;
                    for (g, xk) in gw1[j * inp..(j + 1) * inp].iter_mut().zip(x) {
                        *g += dz * xk;
                    }
                }
            }
        }
        let b = indices.len().max(1) as f64;
        out.iter_mut().for_each(|g| *g /= b);
    }

    fn minibatch_gradient(
        &self,
        p: &[f64],
        worker: usize,
        workers: usize,
        rng: &mut impl Rng,
        out: &mut [f64],
    ) {
        let n = self.samples();
        if worker >= n {
            out.fill(0.0);
            return;
        }
        let idx: Vec<usize> = (0..self.batch_size).map(|_| shard_sample(n, worker, workers, rng)).collect();
        self.batch_gradient(p, &idx, out);
    }
}
