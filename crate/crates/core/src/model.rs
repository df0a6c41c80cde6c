//! Loss and gradient evaluation for the two model families.
//!
//! `least-squares`: `l(x; (phi, y)) = 0.5 * (<phi, x> - y)^2`, parameters `x in R^p`.
//!
//! `mlp-tanh`: one tanh hidden layer of width `h` and a softmax cross-entropy
//! head over `C` classes. Parameters are laid out flat as
//! `W1 (h x p, row-major) | b1 (h) | W2 (C x h, row-major) | b2 (C)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::param::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "least-squares")]
    LeastSquares,
    #[serde(rename = "mlp-tanh")]
    MlpTanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Real(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Label,
}

impl Sample {
    pub fn real(features: Vec<f64>, y: f64) -> Self {
        Self {
            features,
            label: Label::Real(y),
        }
    }

    pub fn class(features: Vec<f64>, c: usize) -> Self {
        Self {
            features,
            label: Label::Class(c),
        }
    }

    fn target(&self) -> f64 {
        match self.label {
            Label::Real(y) => y,
            Label::Class(c) => c as f64,
        }
    }

    fn class_index(&self) -> usize {
        match self.label {
            Label::Class(c) => c,
            Label::Real(y) => y.max(0.0) as usize,
        }
    }
}

/// Shape of the parameterized model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub family: Family,
    pub p: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn least_squares(p: usize) -> Self {
        Self {
            family: Family::LeastSquares,
            p,
            hidden: 0,
            classes: 0,
        }
    }

    pub fn mlp(p: usize, hidden: usize, classes: usize) -> Self {
        Self {
            family: Family::MlpTanh,
            p,
            hidden,
            classes,
        }
    }

    pub fn dim(&self) -> usize {
        match self.family {
            Family::LeastSquares => self.p,
            Family::MlpTanh => {
                self.hidden * self.p + self.hidden + self.classes * self.hidden + self.classes
            }
        }
    }

    pub fn is_classifier(&self) -> bool {
        self.family == Family::MlpTanh
    }

    /// Loss on one sample. `x` must have length `dim()`.
    pub fn loss(&self, x: &[f64], s: &Sample) -> f64 {
        match self.family {
            Family::LeastSquares => {
                let r = dot(&s.features, x) - s.target();
                0.5 * r * r
            }
            Family::MlpTanh => {
                let mut ws = Workspace::new(self);
                self.mlp_forward(x, &s.features, &mut ws);
                let c = s.class_index();
                log_sum_exp(&ws.logits) - ws.logits[c]
            }
        }
    }

    /// Predicted class (classification family only).
    pub fn predict(&self, x: &[f64], features: &[f64], ws: &mut Workspace) -> usize {
        self.mlp_forward(x, features, ws);
        argmax(&ws.logits)
    }

    /// `out += scale * grad l(x; s)`.
    pub fn add_grad(&self, x: &[f64], s: &Sample, scale: f64, out: &mut [f64], ws: &mut Workspace) {
        match self.family {
            Family::LeastSquares => {
                let r = dot(&s.features, x) - s.target();
                let c = scale * r;
                for (o, f) in out.iter_mut().zip(&s.features) {
                    *o += c * f;
                }
            }
            Family::MlpTanh => self.mlp_add_grad(x, s, scale, out, ws),
        }
    }

    fn mlp_forward(&self, x: &[f64], phi: &[f64], ws: &mut Workspace) {
        let (p, h, c) = (self.p, self.hidden, self.classes);
        let (w1, rest) = x.split_at(h * p);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        for k in 0..h {
            ws.hidden[k] = (dot(&w1[k * p..(k + 1) * p], phi) + b1[k]).tanh();
        }
        for k in 0..c {
            ws.logits[k] = dot(&w2[k * h..(k + 1) * h], &ws.hidden) + b2[k];
        }
    }

    fn mlp_add_grad(&self, x: &[f64], s: &Sample, scale: f64, out: &mut [f64], ws: &mut Workspace) {
        let (p, h, c) = (self.p, self.hidden, self.classes);
        self.mlp_forward(x, &s.features, ws);
        // softmax - onehot
        let lse = log_sum_exp(&ws.logits);
        for k in 0..c {
            ws.dlogits[k] = (ws.logits[k] - lse).exp();
        }
        ws.dlogits[s.class_index()] -= 1.0;

        let w2 = &x[h * p + h..h * p + h + c * h];
        for j in 0..h {
            let mut acc = 0.0;
            for k in 0..c {
                acc += w2[k * h + j] * ws.dlogits[k];
            }
            ws.dpre[j] = acc * (1.0 - ws.hidden[j] * ws.hidden[j]);
        }

        let (g_w1, rest) = out.split_at_mut(h * p);
        let (g_b1, rest) = rest.split_at_mut(h);
        let (g_w2, g_b2) = rest.split_at_mut(c * h);
        for j in 0..h {
            let d = scale * ws.dpre[j];
            for (g, f) in g_w1[j * p..(j + 1) * p].iter_mut().zip(&s.features) {
                *g += d * f;
            }
            g_b1[j] += d;
        }
        for k in 0..c {
            let d = scale * ws.dlogits[k];
            for (g, hv) in g_w2[k * h..(k + 1) * h].iter_mut().zip(&ws.hidden) {
                *g += d * hv;
            }
            g_b2[k] += d;
        }
    }

    pub fn check_sample(&self, s: &Sample) -> Result<()> {
        check_dim(self.p, s.features.len())?;
        match (self.family, &s.label) {
            (Family::LeastSquares, Label::Real(_)) => Ok(()),
            (Family::MlpTanh, Label::Class(c)) if *c < self.classes => Ok(()),
            _ => Err(Error::invalid(
                "sample label does not match the model family",
            )),
        }
    }
}

/// Scratch buffers for the MLP forward/backward pass.
#[derive(Clone, Debug)]
pub struct Workspace {
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
    dpre: Vec<f64>,
}

impl Workspace {
    pub fn new(arch: &Architecture) -> Self {
        Self {
            hidden: vec![0.0; arch.hidden],
            logits: vec![0.0; arch.classes],
            dlogits: vec![0.0; arch.classes],
            dpre: vec![0.0; arch.hidden],
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

/// Read access to a dataset, either a task's own or a perturbed copy.
pub trait DataView: Sync {
    fn arch(&self) -> &Architecture;
    fn len(&self) -> usize;
    fn sample(&self, j: usize) -> &Sample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_x(view: &dyn DataView, x: &ParamVector) -> Result<()> {
    check_dim(view.arch().dim(), x.dim())
}

pub fn loss(view: &dyn DataView, x: &ParamVector, s: &Sample) -> Result<f64> {
    check_x(view, x)?;
    Ok(view.arch().loss(x.as_slice(), s))
}

pub fn grad(view: &dyn DataView, x: &ParamVector, s: &Sample) -> Result<ParamVector> {
    check_x(view, x)?;
    let arch = view.arch();
    let mut out = vec![0.0; arch.dim()];
    arch.add_grad(x.as_slice(), s, 1.0, &mut out, &mut Workspace::new(arch));
    ParamVector::new(out)
}

/// Mean per-sample gradient over `indices`, summed in the given order.
pub fn batch_grad(view: &dyn DataView, x: &ParamVector, indices: &[usize]) -> Result<ParamVector> {
    check_x(view, x)?;
    if indices.is_empty() {
        return Err(Error::invalid("empty index set"));
    }
    let n = view.len();
    if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    let arch = view.arch();
    let mut out = vec![0.0; arch.dim()];
    batch_grad_into(
        view,
        x.as_slice(),
        indices,
        &mut out,
        &mut Workspace::new(arch),
    );
    ParamVector::new(out)
}

/// Unchecked kernel shared with the trainer: `out = mean_j grad l(x; z_j)`.
pub(crate) fn batch_grad_into(
    view: &dyn DataView,
    x: &[f64],
    indices: &[usize],
    out: &mut [f64],
    ws: &mut Workspace,
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let arch = view.arch();
    for &j in indices {
        arch.add_grad(x, view.sample(j), 1.0, out, ws);
    }
    let inv = 1.0 / indices.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

pub fn full_grad(view: &dyn DataView, x: &ParamVector) -> Result<ParamVector> {
    let all: Vec<usize> = (0..view.len()).collect();
    batch_grad(view, x, &all)
}

/// Mean loss over the first `n_used` samples.
pub(crate) fn prefix_risk(view: &dyn DataView, x: &[f64], n_used: usize) -> f64 {
    let arch = view.arch();
    (0..n_used)
        .map(|j| arch.loss(x, view.sample(j)))
        .sum::<f64>()
        / n_used as f64
}

pub(crate) fn prefix_grad_into(
    view: &dyn DataView,
    x: &[f64],
    n_used: usize,
    out: &mut [f64],
    ws: &mut Workspace,
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let arch = view.arch();
    for j in 0..n_used {
        arch.add_grad(x, view.sample(j), 1.0, out, ws);
    }
    let inv = 1.0 / n_used as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

/// Empirical risk `f_i(x)`: mean loss over the whole dataset.
pub fn empirical_risk(view: &dyn DataView, x: &ParamVector) -> Result<f64> {
    check_x(view, x)?;
    Ok(prefix_risk(view, x.as_slice(), view.len()))
}

/// Mean loss and (for classifiers) accuracy over a list of samples.
pub fn evaluate_samples(arch: &Architecture, x: &[f64], samples: &[Sample]) -> (f64, Option<f64>) {
    let mut ws = Workspace::new(arch);
    let mut loss = 0.0;
    let mut hits = 0usize;
    for s in samples {
        loss += arch.loss(x, s);
        if arch.is_classifier() && arch.predict(x, &s.features, &mut ws) == s.class_index() {
            hits += 1;
        }
    }
    let m = samples.len().max(1) as f64;
    let acc = arch.is_classifier().then(|| hits as f64 / m);
    (loss / m, acc)
}
