//! Adversarial image-level alignment: gradient reversal, domain
//! discriminators and the binary domain-classification loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::nn::{Conv2d, Linear, LEAKY_SLOPE};
use crate::ops::sigmoid_f64;
use crate::tensor::Tensor;

/// Lower clamp applied to both log arguments.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    pub fn value(self) -> f64 {
        match self {
            DomainLabel::Source => 0.0,
            DomainLabel::Target => 1.0,
        }
    }
}

/// Gradient reversal: identity forward, gradient scaled by `-lambda` backward.
pub fn grl(tape: &mut Tape, x: Var, lambda: f32) -> Var {
    tape.grl(x, lambda)
}

/// `−d·log p − (1−d)·log(1−p)` with `p = σ(logit)` and both log arguments
/// clamped below at [`LOG_CLAMP`].
pub fn adv_loss(logit: f64, d: DomainLabel) -> f64 {
    adv_loss_with_grad(logit, d).0
}

/// Loss and d(loss)/d(logit) of [`adv_loss`].
pub fn adv_loss_with_grad(logit: f64, d: DomainLabel) -> (f64, f64) {
    let p = sigmoid_f64(logit);
    let dv = d.value();
    let mut loss = 0.0;
    let mut grad = 0.0;
    if dv > 0.0 {
        // d/dlogit of −log p is −(1 − p) unless clamped
        if p > LOG_CLAMP {
            loss -= dv * p.ln();
            grad -= dv * (1.0 - p);
        } else {
            loss -= dv * LOG_CLAMP.ln();
        }
    }
    if dv < 1.0 {
        let q = 1.0 - p;
        if q > LOG_CLAMP {
            loss -= (1.0 - dv) * q.ln();
            grad += (1.0 - dv) * p;
        } else {
            loss -= (1.0 - dv) * LOG_CLAMP.ln();
        }
    }
    (loss, grad)
}

/// Mean of [`adv_loss`] over a column of logits (`N × 1` or `N`).
pub fn adv_loss_tape(tape: &mut Tape, logits: Var, d: DomainLabel) -> Var {
    let vals: Vec<f32> = tape.value(logits).data().to_vec();
    let n = vals.len().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(vals.len());
    for &l in &vals {
        let (v, g) = adv_loss_with_grad(l as f64, d);
        total += v;
        grads.push((g / n) as f32);
    }
    let shape = tape.shape(logits).to_vec();
    tape.op(
        Tensor::scalar((total / n) as f32),
        &[logits],
        Box::new(move |ctx| {
            let s = ctx.grad.item();
            vec![Some(Tensor::from_vec(&shape, grads.iter().map(|g| g * s).collect()))]
        }),
    )
}

/// Two stride-2 convolutions, global average pooling and a linear layer to a
/// single domain logit. Works on any spatial size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Discriminator {
    pub in_channels: usize,
    convs: [Conv2d; 2],
    fc: Linear,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_channels: usize, hidden: usize) -> Self {
        let convs = [
            Conv2d::new(store, rng, &format!("{name}.conv0"), in_channels, hidden, 3, 2),
            Conv2d::new(store, rng, &format!("{name}.conv1"), hidden, hidden, 3, 2),
        ];
        let fc = Linear::new(store, rng, &format!("{name}.fc"), hidden, 1);
        Self {
            in_channels,
            convs,
            fc,
        }
    }

    /// `N × C × H × W` → `N × 1` logits.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, store, h);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = tape.global_avg_pool(h);
        self.fc.forward(tape, store, pooled)
    }

    pub fn logit(&self, store: &ParamStore, f: &FeatureMap) -> Result<f64> {
        if f.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {}",
                self.in_channels,
                f.channels()
            )));
        }
        let mut tape = Tape::new();
        let (c, h, w) = f.dims();
        let x = tape.constant(f.tensor().clone().reshaped(&[1, c, h, w]));
        let out = self.forward_tape(&mut tape, store, x);
        Ok(tape.value(out).item() as f64)
    }
}

/// Two-layer perceptron over fixed-length vectors, one logit per row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VectorDiscriminator {
    pub input: usize,
    hidden: Linear,
    out: Linear,
}

impl VectorDiscriminator {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden: Linear::new(store, rng, &format!("{name}.fc0"), input, hidden),
            out: Linear::new(store, rng, &format!("{name}.fc1"), hidden, 1),
        }
    }

    /// `N × m` → `N × 1`.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.hidden.forward(tape, store, x);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.out.forward(tape, store, h)
    }

    pub fn logits(&self, store: &ParamStore, rows: &[Vec<f32>]) -> Result<Vec<f64>> {
        if rows.iter().any(|r| r.len() != self.input) {
            return Err(Error::Shape(format!(
                "vector discriminator expects length {}",
                self.input
            )));
        }
        let mut tape = Tape::new();
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::from_vec(&[rows.len(), self.input], data));
        let out = self.forward_tape(&mut tape, store, x);
        Ok(tape.value(out).data().iter().map(|&v| v as f64).collect())
    }
}

/// Global alignment loss on batched backbone features:
/// mean source BCE (d = 0) plus mean target BCE (d = 1), each behind a GRL.
pub fn img_loss_tape(
    tape: &mut Tape,
    store: &ParamStore,
    disc: &Discriminator,
    fs: Var,
    ft: Var,
    lambda: f32,
) -> Result<Var> {
    let (ss, st) = (tape.shape(fs), tape.shape(ft));
    if ss[1..] != st[1..] {
        return Err(Error::Shape(format!(
            "source features {ss:?} and target features {st:?} differ"
        )));
    }
    let rs = grl(tape, fs, lambda);
    let ls = disc.forward_tape(tape, store, rs);
    let a = adv_loss_tape(tape, ls, DomainLabel::Source);
    let rt = grl(tape, ft, lambda);
    let lt = disc.forward_tape(tape, store, rt);
    let b = adv_loss_tape(tape, lt, DomainLabel::Target);
    Ok(tape.add(a, b))
}

/// Single-pair global alignment loss.
pub fn img_loss(
    store: &ParamStore,
    disc: &Discriminator,
    fs: &FeatureMap,
    ft: &FeatureMap,
    lambda: f32,
) -> Result<f64> {
    if fs.dims() != ft.dims() {
        return Err(Error::Shape(format!(
            "img_loss needs equal shapes, got {:?} and {:?}",
            fs.dims(),
            ft.dims()
        )));
    }
    let mut tape = Tape::new();
    let (c, h, w) = fs.dims();
    let a = tape.constant(fs.tensor().clone().reshaped(&[1, c, h, w]));
    let b = tape.constant(ft.tensor().clone().reshaped(&[1, c, h, w]));
    let l = img_loss_tape(&mut tape, store, disc, a, b, lambda)?;
    Ok(tape.value(l).item() as f64)
}
