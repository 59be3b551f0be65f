//! Finite-difference gradient checks shared by the gradient tests and the acceptance run.

use cpdc::autoencoder::{AeConfig, Model, NormStats, PipelineMode, QuantMode, RateModel};
use cpdc::context_model::{coding_cost, cost_grad_logits, ContextModel, MaskedConv3d, SymbolVolume};
use cpdc::metrics::{ms_ssim, ms_ssim_with_grad, MsSsimConfig};
use cpdc::nn::{batch_norm, batch_norm_backward, conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward};
use cpdc::nn::{BnMode, RunningStats};
use cpdc::quantizer::{quantize_soft, quantize_soft_backward, quantize_ste, quantize_ste_backward, CenterSet};
use cpdc::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero derivatives.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradStats {
    pub trials: usize,
    pub checked: usize,
    /// Entries skipped because the loss is not smooth within `EPS` (ReLU or clamp kinks).
    pub kinks: usize,
    pub worst: f64,
    /// Magnitude of the loss under test; derivatives far below it are at roundoff level.
    loss_scale: f64,
}

impl GradStats {
    pub fn passes(&self, tol: f64) -> bool {
        self.trials >= 20 && self.checked > 0 && self.worst <= tol && self.kinks * 50 <= self.checked
    }

    pub fn summary(&self) -> String {
        format!(
            "{} trials, {} derivatives, worst rel err {:.2e}, {} kink skips",
            self.trials, self.checked, self.worst, self.kinks
        )
    }

    fn record(&mut self, analytic: f64, fd: f64) {
        self.checked += 1;
        let floor = REL_FLOOR * self.loss_scale.max(1.0);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor);
        self.worst = self.worst.max(rel);
    }

    /// Central difference of `f` around 0, skipping non-smooth points.
    fn check(&mut self, analytic: f64, mut f: impl FnMut(f64) -> f64) {
        let d1 = (f(EPS) - f(-EPS)) / (2.0 * EPS);
        let d2 = (f(EPS / 2.0) - f(-EPS / 2.0)) / EPS;
        let scale = d1.abs().max(d2.abs()).max(1e-3);
        if (d1 - d2).abs() > 1e-5 * scale {
            self.kinks += 1;
            return;
        }
        self.record(analytic, d1);
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

fn perturbed(t: &Tensor, i: usize, d: f64) -> Tensor {
    let mut t = t.clone();
    t.data_mut()[i] += d;
    t
}

pub fn conv2d_suite(trials: usize, seed: u64) -> GradStats {
    let mut s = GradStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let n = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(3..=7), rng.gen_range(3..=7));
        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let x = random_tensor(&mut rng, &[n, h, w, ci], 1.0);
        let wt = random_tensor(&mut rng, &[k, k, ci, co], 1.0);
        let b = random_tensor(&mut rng, &[co], 1.0);
        let y = conv2d(&x, &wt, Some(&b), stride).unwrap();
        let r = random_tensor(&mut rng, y.shape(), 1.0);
        let loss = |x: &Tensor, wt: &Tensor, b: &Tensor| conv2d(x, wt, Some(b), stride).unwrap().dot(&r);
        let g = conv2d_backward(&x, &wt, &r, stride).unwrap();
        for i in 0..x.len() {
            s.check(g.input.data()[i], |d| loss(&perturbed(&x, i, d), &wt, &b));
        }
        for i in 0..wt.len() {
            s.check(g.weights.data()[i], |d| loss(&x, &perturbed(&wt, i, d), &b));
        }
        for i in 0..b.len() {
            s.check(g.bias.data()[i], |d| loss(&x, &wt, &perturbed(&b, i, d)));
        }
        s.trials += 1;
    }
    s
}

pub fn conv_transpose2d_suite(trials: usize, seed: u64) -> GradStats {
    let mut s = GradStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let n = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let x = random_tensor(&mut rng, &[n, h, w, co], 1.0);
        let wt = random_tensor(&mut rng, &[k, k, ci, co], 1.0);
        let b = random_tensor(&mut rng, &[ci], 1.0);
        let y = conv_transpose2d(&x, &wt, Some(&b), stride).unwrap();
        let r = random_tensor(&mut rng, y.shape(), 1.0);
        let loss = |x: &Tensor, wt: &Tensor, b: &Tensor| conv_transpose2d(x, wt, Some(b), stride).unwrap().dot(&r);
        let g = conv_transpose2d_backward(&x, &wt, &r, stride).unwrap();
        for i in 0..x.len() {
            s.check(g.input.data()[i], |d| loss(&perturbed(&x, i, d), &wt, &b));
        }
        for i in 0..wt.len() {
            s.check(g.weights.data()[i], |d| loss(&x, &perturbed(&wt, i, d), &b));
        }
        for i in 0..b.len() {
            s.check(g.bias.data()[i], |d| loss(&x, &wt, &perturbed(&b, i, d)));
        }
        s.trials += 1;
    }
    s
}

pub fn batch_norm_suite(trials: usize, seed: u64) -> GradStats {
    let mut s = GradStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let shape = if t == 0 {
            vec![2, 4, 4, 3]
        } else {
            vec![rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(1..=3)]
        };
        let c = shape[3];
        let x = random_tensor(&mut rng, &shape, 2.0);
        let gamma = random_tensor(&mut rng, &[c], 1.5);
        let beta = random_tensor(&mut rng, &[c], 1.0);
        let r = random_tensor(&mut rng, &shape, 1.0);
        let loss = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let mut st = RunningStats::empty(0.99);
            batch_norm(x, g, b, BnMode::Train, &mut st, 1e-5).unwrap().0.dot(&r)
        };
        let mut st = RunningStats::empty(0.99);
        let (_, cache) = batch_norm(&x, &gamma, &beta, BnMode::Train, &mut st, 1e-5).unwrap();
        let g = batch_norm_backward(&cache, &gamma, &r);
        for i in 0..x.len() {
            s.check(g.input.data()[i], |d| loss(&perturbed(&x, i, d), &gamma, &beta));
        }
        for i in 0..c {
            s.check(g.gamma.data()[i], |d| loss(&x, &perturbed(&gamma, i, d), &beta));
            s.check(g.beta.data()[i], |d| loss(&x, &gamma, &perturbed(&beta, i, d)));
        }
        s.trials += 1;
    }
    s
}

pub fn masked_conv3d_suite(trials: usize, seed: u64) -> GradStats {
    let mut s = GradStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let inclusive = rng.gen_bool(0.5);
        let mut layer = MaskedConv3d::new(3, ci, co, inclusive).unwrap();
        layer.init_uniform(&mut rng);
        layer.bias.value = random_tensor(&mut rng, &[co], 0.5);
        let shape = [rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4), ci];
        let x = random_tensor(&mut rng, &shape, 1.0);
        let r = random_tensor(&mut rng, &[shape[0], shape[1], shape[2], co], 1.0);
        let gin = layer.backward(&x, &r, true, true).unwrap().unwrap();
        let loss = |l: &MaskedConv3d, x: &Tensor| l.forward(x).unwrap().dot(&r);
        for i in 0..x.len() {
            s.check(gin.data()[i], |d| loss(&layer, &perturbed(&x, i, d)));
        }
        let block = ci * co;
        for (tap, &m) in layer.mask.data().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for j in 0..block {
                let i = tap * block + j;
                let mut l2 = layer.clone();
                s.check(layer.weight.grad.data()[i], |d| {
                    l2.weight.value = perturbed(&layer.weight.value, i, d);
                    loss(&l2, &x)
                });
            }
        }
        for i in 0..co {
            let mut l2 = layer.clone();
            s.check(layer.bias.grad.data()[i], |d| {
                l2.bias.value = perturbed(&layer.bias.value, i, d);
                loss(&l2, &x)
            });
        }
        s.trials += 1;
    }
    s
}

fn random_centers(rng: &mut ChaCha8Rng) -> CenterSet {
    let l = rng.gen_range(2..=6);
    let mut c: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
    c.sort_by(f64::total_cmp);
    CenterSet::new(c, rng.gen_range(0.5..3.0)).unwrap()
}

pub fn soft_quantization_suite(trials: usize, seed: u64) -> GradStats {
    let mut s = GradStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let centers = random_centers(&mut rng);
        let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.5..2.5)).collect();
        let r: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |z: &[f64], c: &CenterSet| z.iter().zip(&r).map(|(&v, &w)| w * quantize_soft(v, c)).sum::<f64>();
        let mut gc = vec![0.0; centers.len()];
        let gz: Vec<f64> = z
            .iter()
            .zip(&r)
            .map(|(&v, &w)| quantize_soft_backward(v, &centers, w, &mut gc))
            .collect();
        for i in 0..z.len() {
            s.check(gz[i], |d| {
                let mut zz = z.clone();
                zz[i] += d;
                loss(&zz, &centers)
            });
        }
        for j in 0..centers.len() {
            s.check(gc[j], |d| {
                let mut v = centers.values().to_vec();
                v[j] += d;
                loss(&z, &CenterSet::new(v, centers.sigma).unwrap())
            });
        }
        s.trials += 1;
    }
    s
}

/// The straight-through backward pass against finite differences of the soft path.
pub fn straight_through_suite(trials: usize, seed: u64) -> (GradStats, bool) {
    let mut s = GradStats::default();
    let mut forward_exact = true;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let mut centers = random_centers(&mut rng);
        let z = random_tensor(&mut rng, &[2, 3, 2], 2.5);
        let r = random_tensor(&mut rng, &[2, 3, 2], 1.0);
        let (values, symbols) = quantize_ste(&z, &centers).unwrap();
        for (i, &v) in z.data().iter().enumerate() {
            let j = cpdc::quantizer::quantize_hard(v, &centers).unwrap();
            let (h, w, k) = (i / 6, (i / 2) % 3, i % 2);
            forward_exact &= values.data()[i] == centers.values()[j] && symbols.get(h, w, k) == j;
        }
        centers.centers.zero_grad();
        let gz = quantize_ste_backward(&z, &mut centers, &r);
        let soft_loss = |z: &Tensor, c: &CenterSet| {
            z.data().iter().zip(r.data()).map(|(&v, &w)| w * quantize_soft(v, c)).sum::<f64>()
        };
        for i in 0..z.len() {
            s.check(gz.data()[i], |d| soft_loss(&perturbed(&z, i, d), &centers));
        }
        for j in 0..centers.len() {
            let g = centers.centers.grad.data()[j];
            s.check(g, |d| {
                let mut v = centers.values().to_vec();
                v[j] += d;
                soft_loss(&z, &CenterSet::new(v, centers.sigma).unwrap())
            });
        }
        s.trials += 1;
    }
    (s, forward_exact)
}

/// Coding cost w.r.t. every active context-model parameter and the input values.
pub fn cross_entropy_suite(trials: usize, seed: u64) -> GradStats {
    let mut s = GradStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let l = rng.gen_range(2..=5);
        let mut m = ContextModel::new(l, rng.gen_range(2..=4), 4).unwrap();
        m.init(&mut rng);
        for layer in &mut m.layers {
            layer.bias.value = random_tensor(&mut rng, &[layer.cout], 0.3);
        }
        let (h, w, k) = (rng.gen_range(2..=3), rng.gen_range(2..=3), rng.gen_range(1..=3));
        let idx: Vec<u16> = (0..h * w * k).map(|_| rng.gen_range(0..l) as u16).collect();
        let sym = SymbolVolume::new(h, w, k, idx, l).unwrap();
        let values = random_tensor(&mut rng, &[k, h, w, 1], 1.0);
        let cost = |m: &ContextModel, v: &Tensor| coding_cost(&m.forward(v).unwrap().probs, &sym).unwrap();
        let cache = m.forward(&values).unwrap();
        let g = cost_grad_logits(&cache.probs, &sym, None, 1.0).unwrap();
        let gin = m.backward(&cache, &g, true, true).unwrap().unwrap();
        for i in 0..values.len() {
            s.check(gin.data()[i], |d| cost(&m, &perturbed(&values, i, d)));
        }
        for li in 0..m.layers.len() {
            let layer = &m.layers[li];
            let block = layer.cin * layer.cout;
            let active: Vec<usize> = layer
                .mask
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .flat_map(|(t, _)| t * block..(t + 1) * block)
                .collect();
            // a random sample of weights plus every bias
            for _ in 0..8 {
                let i = active[rng.gen_range(0..active.len())];
                let an = m.layers[li].weight.grad.data()[i];
                let mut m2 = m.clone();
                s.check(an, |d| {
                    m2.layers[li].weight.value = perturbed(&m.layers[li].weight.value, i, d);
                    cost(&m2, &values)
                });
            }
            for i in 0..m.layers[li].cout {
                let an = m.layers[li].bias.grad.data()[i];
                let mut m2 = m.clone();
                s.check(an, |d| {
                    m2.layers[li].bias.value = perturbed(&m.layers[li].bias.value, i, d);
                    cost(&m2, &values)
                });
            }
        }
        s.trials += 1;
    }
    s
}

/// Gradient of `1 - MS-SSIM` w.r.t. the second image.
pub fn ms_ssim_suite(trials: usize, seed: u64) -> GradStats {
    let mut s = GradStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let (cfg, shape) = if t % 4 == 3 {
            (MsSsimConfig::default(), vec![24, 24, 1])
        } else {
            (MsSsimConfig::tiny(), vec![rng.gen_range(6..=10), rng.gen_range(6..=10), rng.gen_range(1..=3)])
        };
        let x = random_tensor(&mut rng, &shape, 0.5).map(|v| v + 0.5);
        let y = x.map(|v| v + 0.0) ;
        let noise = random_tensor(&mut rng, &shape, 0.3);
        let mut y = y;
        y.add_assign(&noise);
        let (_, g) = ms_ssim_with_grad(&x, &y, &cfg).unwrap();
        let f = |y: &Tensor| 1.0 - ms_ssim(&x, y, &cfg).unwrap();
        let idx: Vec<usize> = if y.len() > 60 {
            (0..60).map(|_| rng.gen_range(0..y.len())).collect()
        } else {
            (0..y.len()).collect()
        };
        for i in idx {
            s.check(-g.data()[i], |d| f(&perturbed(&y, i, d)));
        }
        s.trials += 1;
    }
    s
}

/// Tiny end-to-end auto-encoder loss through the soft quantization path.
pub fn end_to_end_suite(trials: usize, seed: u64) -> GradStats {
    let mut s = GradStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = PipelineMode {
        quant: QuantMode::Soft,
        bn: BnMode::Train,
    };
    for _ in 0..trials {
        let cfg = AeConfig {
            widths: vec![3, 4],
            channels: 2,
            residual: true,
        };
        let norm = NormStats {
            mean: [0.5; 3],
            var: [0.01; 3],
        };
        let mut model = Model::new(cfg, 3, 3, norm, &mut rng).unwrap();
        model.ms_ssim = MsSsimConfig::tiny();
        for layer in &mut model.ctx.layers {
            layer.bias.value = random_tensor(&mut rng, &[layer.cout], 0.3);
        }
        let x = random_tensor(&mut rng, &[2, 8, 8, 3], 0.4).map(|v| v + 0.5);
        let beta = rng.gen_range(0.01..0.2);
        let target = 0.0;
        let rate = RateModel::Context;
        let loss = |m: &mut Model| {
            let t = m.forward(&x, mode).unwrap();
            Model::edq_loss(&t, beta, target, rate)
        };
        model.zero_grad();
        let trace = model.forward(&x, mode).unwrap();
        s.loss_scale = Model::edq_loss(&trace, beta, target, rate).abs();
        model.backward_edq(&trace, beta, target, rate).unwrap();
        let analytic: Vec<Vec<f64>> = model.edq_params_mut().iter().map(|p| p.grad.data().to_vec()).collect();
        let base = model.clone();
        for (pi, grads) in analytic.iter().enumerate() {
            let picks: Vec<usize> = if grads.len() <= 4 {
                (0..grads.len()).collect()
            } else {
                (0..4).map(|_| rng.gen_range(0..grads.len())).collect()
            };
            for i in picks {
                let mut m = base.clone();
                let x0 = base.clone().edq_params_mut()[pi].value.data()[i];
                s.check(grads[i], |d| {
                    m.edq_params_mut()[pi].value.data_mut()[i] = x0 + d;
                    loss(&mut m)
                });
            }
        }
        s.trials += 1;
    }
    s
}
