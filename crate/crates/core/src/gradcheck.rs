//! Central finite-difference checks of every layer's backward pass and of the
//! full five-loss network.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clipper::{ClipLabel, Proposal};
use crate::error::Result;
use crate::net3d::layers::{
    conv3d_backward, conv3d_forward, dropout, linear_backward, linear_forward, maxpool3d_backward,
    maxpool3d_forward, relu_backward, relu_forward, sigmoid, softmax_cross_entropy,
    squared_error_loss,
};
use crate::net3d::model::{activation_signature, forward, ArchConfig, Mode, NetParams};
use crate::tensor::Tensor;
use crate::trainer::{batch_loss_and_grad, clip_losses, fuse_losses, BatchItem};

/// Denominator floor of the relative error, so that two near-zero gradients
/// compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;

/// Draws allowed per network coordinate before the check gives up.
const MAX_ATTEMPTS: usize = 50;

/// Deliberate backward bugs used to confirm the checker can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the analytic convolution gradients by 1.01.
    ConvBackward,
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub net_coordinates: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            net_coordinates: 20,
            seed: 7,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub op: &'static str,
    pub checked: usize,
    /// Coordinates resampled because a ±step probe crossed a ReLU or
    /// pooling boundary, where the loss is not differentiable.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h) − f(x − h)) / 2h` for coordinate `i`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let up = f(&probe);
    probe[i] = x[i] - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Largest relative error over all coordinates of `x`.
pub fn max_error_all<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    (0..x.len())
        .map(|i| relative_error(analytic[i], central_difference(&mut f, x, i, h)))
        .fold(0.0, f64::max)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).expect("consistent shape")
}

struct Checker {
    cfg: GradcheckConfig,
    rng: ChaCha8Rng,
    rows: Vec<CheckRow>,
}

impl Checker {
    fn push(&mut self, op: &'static str, checked: usize, max_rel_err: f64) {
        let passed = max_rel_err <= self.cfg.tolerance;
        self.rows.push(CheckRow {
            op,
            checked,
            skipped: 0,
            max_rel_err,
            passed,
        });
    }

    fn conv3d(&mut self) {
        let h = self.cfg.step;
        let in_shape = [2, 3, 4, 5];
        let w_shape = [3, 2, 3, 3, 3];
        let x = uniform(&mut self.rng, 120, -1.0, 1.0);
        let w = uniform(&mut self.rng, 162, -0.5, 0.5);
        let b = uniform(&mut self.rng, 3, -0.5, 0.5);
        let r = uniform(&mut self.rng, 180, -1.0, 1.0);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| {
            let (y, _) = conv3d_forward(
                &tensor(&in_shape, x.to_vec()),
                &tensor(&w_shape, w.to_vec()),
                &tensor(&[3], b.to_vec()),
            )
            .expect("valid shapes");
            dot(y.data(), &r)
        };
        let (_, cache) = conv3d_forward(
            &tensor(&in_shape, x.clone()),
            &tensor(&w_shape, w.clone()),
            &tensor(&[3], b.clone()),
        )
        .expect("valid shapes");
        let g = conv3d_backward(&tensor(&w_shape, w.clone()), &cache, &tensor(&[3, 3, 4, 5], r.clone()), true)
            .expect("valid shapes");
        let corrupt = if self.cfg.fault == Some(Fault::ConvBackward) { 1.01 } else { 1.0 };
        let scaled = |t: &Tensor| t.data().iter().map(|v| v * corrupt).collect::<Vec<_>>();
        let gx = scaled(g.input.as_ref().expect("requested"));
        let gw = scaled(&g.weight);
        let gb = scaled(&g.bias);
        let err = [
            max_error_all(|v| loss(v, &w, &b), &x, &gx, h),
            max_error_all(|v| loss(&x, v, &b), &w, &gw, h),
            max_error_all(|v| loss(&x, &w, v), &b, &gb, h),
        ];
        self.push("conv3d", x.len() + w.len() + b.len(), err.iter().copied().fold(0.0, f64::max));
    }

    fn maxpool(&mut self) {
        let h = self.cfg.step;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (shape, extent) in [([2, 4, 4, 6], [2, 2, 2]), ([2, 3, 4, 4], [1, 2, 2])] {
            let n: usize = shape.iter().product();
            // distinct, well-separated values keep every argmax stable under ±h
            let mut x: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            for i in (1..n).rev() {
                x.swap(i, self.rng.gen_range(0..=i));
            }
            let (y, cache) = maxpool3d_forward(&tensor(&shape, x.clone()), extent).expect("fits");
            let r = uniform(&mut self.rng, y.len(), -1.0, 1.0);
            let gx = maxpool3d_backward(&cache, &tensor(y.shape(), r.clone())).expect("shapes");
            let f = |v: &[f64]| {
                let (y, _) = maxpool3d_forward(&tensor(&shape, v.to_vec()), extent).expect("fits");
                dot(y.data(), &r)
            };
            worst = worst.max(max_error_all(f, &x, gx.data(), h));
            checked += n;
        }
        self.push("maxpool3d", checked, worst);
    }

    fn relu(&mut self) {
        let h = self.cfg.step;
        // keep inputs away from the kink at 0
        let x: Vec<f64> = (0..60)
            .map(|_| {
                let m = self.rng.gen_range(0.01..1.0);
                if self.rng.gen::<bool>() { m } else { -m }
            })
            .collect();
        let r = uniform(&mut self.rng, 60, -1.0, 1.0);
        let xt = tensor(&[60], x.clone());
        let gx = relu_backward(&xt, &tensor(&[60], r.clone()));
        let f = |v: &[f64]| dot(relu_forward(&tensor(&[60], v.to_vec())).data(), &r);
        let err = max_error_all(f, &x, gx.data(), h);
        self.push("relu", x.len(), err);
    }

    fn linear(&mut self) {
        let h = self.cfg.step;
        let (n_in, n_out) = (7, 5);
        let x = uniform(&mut self.rng, n_in, -1.0, 1.0);
        let w = uniform(&mut self.rng, n_in * n_out, -1.0, 1.0);
        let b = uniform(&mut self.rng, n_out, -1.0, 1.0);
        let r = uniform(&mut self.rng, n_out, -1.0, 1.0);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| {
            let y = linear_forward(x, &tensor(&[n_out, n_in], w.to_vec()), &tensor(&[n_out], b.to_vec()))
                .expect("shapes");
            dot(&y, &r)
        };
        let g = linear_backward(&x, &tensor(&[n_out, n_in], w.clone()), &r).expect("shapes");
        let err = [
            max_error_all(|v| loss(v, &w, &b), &x, &g.input, h),
            max_error_all(|v| loss(&x, v, &b), &w, g.weight.data(), h),
            max_error_all(|v| loss(&x, &w, v), &b, g.bias.data(), h),
        ];
        self.push("linear", x.len() + w.len() + b.len(), err.iter().copied().fold(0.0, f64::max));
    }

    fn dropout(&mut self) {
        let h = self.cfg.step;
        let x = uniform(&mut self.rng, 40, -1.0, 1.0);
        let r = uniform(&mut self.rng, 40, -1.0, 1.0);
        let seed = self.rng.gen();
        let run = |v: &[f64]| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            dropout(v, 0.5, true, &mut rng)
        };
        let (_, mask) = run(&x);
        let mask = mask.expect("training mode");
        let gx: Vec<f64> = r.iter().zip(&mask).map(|(g, m)| g * m).collect();
        let err = max_error_all(|v| dot(&run(v).0, &r), &x, &gx, h);
        self.push("dropout", x.len(), err);
    }

    fn cross_entropy(&mut self) {
        let h = self.cfg.step;
        let mut worst = 0.0f64;
        for k in [2, 4, 6] {
            let z = uniform(&mut self.rng, k, -3.0, 3.0);
            let target = self.rng.gen_range(0..k);
            let weight = self.rng.gen_range(0.5..2.0);
            let (_, g) = softmax_cross_entropy(&z, target, weight);
            let f = |v: &[f64]| softmax_cross_entropy(v, target, weight).0;
            worst = worst.max(max_error_all(f, &z, &g, h));
        }
        self.push("softmax_cross_entropy", 12, worst);
    }

    fn squared_error(&mut self) {
        let h = self.cfg.step;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let pred = self.rng.gen_range(0.01..0.99);
            let target = self.rng.gen_range(0.0..=1.0);
            let (_, g) = squared_error_loss(pred, target);
            let n = central_difference(|v| squared_error_loss(v[0], target).0, &[pred], 0, h);
            worst = worst.max(relative_error(g, n));
        }
        self.push("squared_error", 10, worst);
    }

    fn sigmoid(&mut self) {
        let h = self.cfg.step;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let z = self.rng.gen_range(-4.0..4.0);
            let s = sigmoid(z);
            let n = central_difference(|v| sigmoid(v[0]), &[z], 0, h);
            worst = worst.max(relative_error(s * (1.0 - s), n));
        }
        self.push("sigmoid", 10, worst);
    }

    fn full_network(&mut self) -> Result<()> {
        let h = self.cfg.step;
        let arch = ArchConfig::desk(3);
        let mut params = NetParams::init(&arch, self.rng.gen())?;
        // non-zero biases so every head and trunk bias carries signal
        for t in 0..2 * params.layers().len() {
            if t % 2 == 1 {
                let len = params.layers()[t / 2].bias.len();
                for o in 0..len {
                    params.set(t, o, self.rng.gen_range(-0.05..0.05));
                }
            }
        }
        let d = arch.input;
        let n = d.frames * d.channels * d.height * d.width;
        let shape = [d.frames, d.channels, d.height, d.width];
        let items: Vec<BatchItem> = [(Proposal::Action, 1, 0.75), (Proposal::Background, 3, 0.25)]
            .into_iter()
            .map(|(proposal, category, actionness)| BatchItem {
                clip: tensor(&shape, uniform(&mut self.rng, n, -0.5, 0.5)),
                label: ClipLabel {
                    proposal,
                    category,
                    actionness,
                },
                mode: Mode::Train {
                    dropout: 0.5,
                    seed: self.rng.gen(),
                },
            })
            .collect();
        let class_weights = [0.5, 1.5];
        let loss_weights = [1.0; 5];
        let analytic = batch_loss_and_grad(&params, &arch, &items, class_weights, loss_weights)?.grads;
        let eval = |p: &NetParams| -> Result<(f64, Vec<u64>)> {
            let mut losses = [0.0; 5];
            let mut signature = Vec::with_capacity(items.len());
            for item in &items {
                let (out, cache) = forward(p, &arch, &item.clip, item.mode)?;
                let (l, _) = clip_losses(&out, &item.label, class_weights, loss_weights, 1.0);
                losses.iter_mut().zip(l).for_each(|(a, b)| *a += b / items.len() as f64);
                signature.push(activation_signature(&cache));
            }
            Ok((fuse_losses(losses, loss_weights)?, signature))
        };
        let (_, base) = eval(&params)?;
        let layers = params.layers().len();
        let mut worst = 0.0f64;
        let mut skipped = 0;
        for k in 0..self.cfg.net_coordinates {
            // cycle through layers so the trunk is covered as well as the heads
            let mut attempts = 0;
            loop {
                attempts += 1;
                let t = 2 * (k % layers) + usize::from(self.rng.gen_bool(0.25));
                let len = params.tensors().nth(t).expect("index in range").len();
                let o = self.rng.gen_range(0..len);
                let x0 = params.get(t, o);
                let mut probe = params.clone();
                probe.set(t, o, x0 + h);
                let (up, sig_up) = eval(&probe)?;
                probe.set(t, o, x0 - h);
                let (down, sig_down) = eval(&probe)?;
                if sig_up != base || sig_down != base {
                    skipped += 1;
                    if attempts < MAX_ATTEMPTS {
                        continue;
                    }
                    worst = f64::INFINITY;
                    break;
                }
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max(relative_error(analytic.get(t, o), numeric));
                break;
            }
        }
        self.push("network_fused_loss", self.cfg.net_coordinates, worst);
        self.rows.last_mut().expect("just pushed").skipped = skipped;
        Ok(())
    }
}

/// Runs every check and returns one row per operation.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<CheckRow>> {
    let mut c = Checker {
        cfg: cfg.clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        rows: Vec::new(),
    };
    c.conv3d();
    c.maxpool();
    c.relu();
    c.linear();
    c.dropout();
    c.cross_entropy();
    c.squared_error();
    c.sigmoid();
    c.full_network()?;
    Ok(c.rows)
}

pub fn format_table(rows: &[CheckRow], tolerance: f64) -> String {
    let mut out = format!(
        "{:<24}{:>10}{:>10}{:>16}  status (tol {tolerance:e})\n",
        "op", "checked", "skipped", "max_rel_err"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<24}{:>10}{:>10}{:>16.3e}  {}",
            r.op,
            r.checked,
            r.skipped,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn all_checks_pass_and_fault_is_caught() {
        let rows = run_gradcheck(&GradcheckConfig::default()).unwrap();
        eprintln!("{}", format_table(&rows, 1e-4));
        assert!(rows.iter().all(|r| r.passed));
        let cfg = GradcheckConfig {
            fault: Some(Fault::ConvBackward),
            ..GradcheckConfig::default()
        };
        let rows = run_gradcheck(&cfg).unwrap();
        assert!(!rows.iter().find(|r| r.op == "conv3d").unwrap().passed);
    }

    #[test]
    fn central_difference_of_cubic() {
        let d = central_difference(|v| v[0].powi(3), &[2.0], 0, 1e-5);
        assert!((d - 12.0).abs() < 1e-8);
    }
}
