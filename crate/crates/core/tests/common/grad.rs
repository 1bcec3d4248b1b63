//! Finite-difference gradient cases; each returns the largest relative error.

use super::{max_rel_err, numeric_grad};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use respcl::losses::{
    hybrid_loss, multi_supcon_loss, softmax_cross_entropy, supcon_loss, DenominatorMode, HeadInput, LossConfig,
    Reduction,
};
use respcl::nn::{
    EncoderConfig, GlobalPoolKind, HeadSet, Mode, Model, ModelConfig, OutputGrads, Projector, ProjectorConfig,
    Tensor,
};

pub const TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn loss_cfg(mode: DenominatorMode) -> LossConfig {
    LossConfig {
        tau: 0.5,
        denominator_mode: mode,
        ..Default::default()
    }
}

pub fn cross_entropy() -> f64 {
    let mut worst: f64 = 0.0;
    let mut r = rng(1);
    let (b, c) = (5, 4);
    let x = randn(b * c, &mut r);
    let y = [0, 3, 1, 1, 2];
    for red in [Reduction::Mean, Reduction::Sum] {
        let (_, g) = softmax_cross_entropy(&t(&[b, c], x.clone()), &y, red).unwrap();
        let num = numeric_grad(&x, |v| softmax_cross_entropy(&t(&[b, c], v.to_vec()), &y, red).unwrap().0);
        worst = worst.max(max_rel_err(g.data(), &num, FLOOR));
    }
    worst
}

pub fn supcon(mode: DenominatorMode) -> f64 {
    let mut r = rng(2);
    let (m, d) = (8, 5);
    let labels = [0, 0, 1, 1, 2, 2, 0, 1];
    let cfg = loss_cfg(mode);
    let z = randn(m * d, &mut r);
    let out = supcon_loss(&t(&[m, d], z.clone()), &labels, &cfg).unwrap();
    let num = numeric_grad(&z, |v| supcon_loss(&t(&[m, d], v.to_vec()), &labels, &cfg).unwrap().loss);
    max_rel_err(out.grad.data(), &num, FLOOR)
}

pub fn multi_head() -> f64 {
    let mut r = rng(3);
    let (m, d) = (6, 4);
    let class: Vec<Option<usize>> = [0, 0, 1, 1, 2, 2].map(Some).to_vec();
    let meta: Vec<Option<usize>> = [0, 1, 0, 1, 1, 0].map(Some).to_vec();
    let cfg = loss_cfg(DenominatorMode::NegativesOnly);
    let z = randn(2 * m * d, &mut r);
    let eval = |v: &[f64]| {
        let (z1, z2) = (t(&[m, d], v[..m * d].to_vec()), t(&[m, d], v[m * d..].to_vec()));
        let heads = [
            HeadInput { z: &z1, labels: &class },
            HeadInput { z: &z2, labels: &meta },
        ];
        multi_supcon_loss(&heads, &cfg).unwrap()
    };
    let out = eval(&z);
    let analytic: Vec<f64> = out.grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let num = numeric_grad(&z, |v| eval(v).loss);
    max_rel_err(&analytic, &num, FLOOR)
}

fn tiny_model(heads: HeadSet, seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            channels: vec![3, 4],
            kernel: 3,
            global_pool: GlobalPoolKind::MeanPlusMax,
        },
        heads,
    };
    Model::new(&cfg, &mut rng(seed)).unwrap()
}

/// Scalar objective of a model forward pass plus its output gradients.
type Objective = dyn Fn(&respcl::nn::ForwardOutput<f64>) -> (f64, OutputGrads<f64>);

/// Errors of d(objective)/d(input) and d(objective)/d(every parameter).
fn check_model(model: &mut Model<f64>, shape: [usize; 4], seed: u64, objective: &Objective) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let x = randn(n, &mut r);

    model.zero_grad();
    let out = model.forward(&t(&shape, x.clone()), Mode::Train).unwrap();
    let (_, grads) = objective(&out);
    model.backward(&grads).unwrap();
    let mut analytic_params: Vec<(String, Vec<f64>)> = model
        .params_mut()
        .into_iter()
        .map(|(name, p)| (name, p.grad.as_ref().expect("gradient").data().to_vec()))
        .collect();

    // input gradient: re-run through a cloned graph so parameter grads stay put
    let eval_at = |m: &mut Model<f64>, v: &[f64]| {
        let o = m.forward(&t(&shape, v.to_vec()), Mode::Train).unwrap();
        objective(&o).0
    };
    let mut probe = model.clone();
    let num_x = numeric_grad(&x, |v| eval_at(&mut probe, v));
    let dx = {
        // the encoder does not expose dL/dx through Model::backward; recompute it
        let mut m = model.clone();
        let out = m.forward(&t(&shape, x.clone()), Mode::Train).unwrap();
        let (_, g) = objective(&out);
        let mut d_emb: Option<Tensor<f64>> = None;
        if let (Some(c), Some(gl)) = (m.classifier.as_mut(), g.logits.as_ref()) {
            d_emb = Some(c.backward(gl).unwrap());
        }
        for (p, gp) in m.projectors.iter_mut().zip(&g.projections) {
            if let Some(gp) = gp {
                let d = p.backward(gp).unwrap();
                match &mut d_emb {
                    Some(acc) => acc.add_assign(&d),
                    None => d_emb = Some(d),
                }
            }
        }
        m.encoder.backward(&d_emb.unwrap()).unwrap()
    };
    let mut errs = vec![("input".to_string(), max_rel_err(dx.data(), &num_x, FLOOR))];

    for (name, analytic) in analytic_params.drain(..) {
        let base = model.clone();
        let value: Vec<f64> = base
            .state()
            .into_iter()
            .find(|(n, _)| *n == name)
            .unwrap()
            .1
            .data()
            .to_vec();
        let num = numeric_grad(&value, |v| {
            let mut m = base.clone();
            for (n, tensor) in m.state_mut() {
                if n == name {
                    tensor.data_mut().copy_from_slice(v);
                }
            }
            eval_at(&mut m, &x)
        });
        errs.push((name, max_rel_err(&analytic, &num, FLOOR)));
    }
    errs
}

fn linear_readout(weights: Vec<f64>, rows: usize, cols: usize) -> impl Fn(&Tensor<f64>) -> (f64, Tensor<f64>) {
    move |y: &Tensor<f64>| {
        assert_eq!(y.shape(), [rows, cols]);
        let v = y.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        (v, t(&[rows, cols], weights.clone()))
    }
}

pub fn two_block_encoder() -> Vec<(String, f64)> {
    // 3 samples of a 4×8 grid: 32 inputs per sample
    let mut model = tiny_model(
        HeadSet {
            n_classes: Some(3),
            projectors: vec![],
        },
        11,
    );
    let read = linear_readout(randn(9, &mut rng(12)), 3, 3);
    check_model(&mut model, [3, 1, 4, 8], 13, &move |o| {
        let (v, g) = read(o.logits.as_ref().unwrap());
        (
            v,
            OutputGrads {
                logits: Some(g),
                projections: vec![],
            },
        )
    })
}

pub fn hybrid() -> Vec<(String, f64)> {
    let proj = ProjectorConfig {
        hidden_dim: 6,
        out_dim: 4,
        l2_normalize_output: true,
    };
    let mut model = tiny_model(
        HeadSet {
            n_classes: Some(2),
            projectors: vec![proj],
        },
        21,
    );
    let labels = vec![0, 0, 1, 1];
    let cfg = loss_cfg(DenominatorMode::NegativesOnly);
    check_model(&mut model, [4, 1, 4, 8], 22, &move |o| {
        let a = cfg.alpha;
        let (ce, mut gl) = softmax_cross_entropy(o.logits.as_ref().unwrap(), &labels, Reduction::Mean).unwrap();
        let mut s = supcon_loss(&o.projections[0], &labels, &cfg).unwrap();
        gl.scale(a);
        s.grad.scale(1.0 - a);
        (
            hybrid_loss(ce, s.loss, a),
            OutputGrads {
                logits: Some(gl),
                projections: vec![Some(s.grad)],
            },
        )
    })
}

pub fn multi_head_model() -> Vec<(String, f64)> {
    let proj = ProjectorConfig {
        hidden_dim: 5,
        out_dim: 3,
        l2_normalize_output: true,
    };
    let mut model = tiny_model(
        HeadSet {
            n_classes: None,
            projectors: vec![proj.clone(), proj],
        },
        31,
    );
    let class: Vec<Option<usize>> = [0, 0, 1, 1].map(Some).to_vec();
    let meta: Vec<Option<usize>> = [0, 1, 1, 0].map(Some).to_vec();
    let cfg = loss_cfg(DenominatorMode::NegativesOnly);
    check_model(&mut model, [4, 1, 4, 8], 32, &move |o| {
        let heads = [
            HeadInput { z: &o.projections[0], labels: &class },
            HeadInput { z: &o.projections[1], labels: &meta },
        ];
        let r = multi_supcon_loss(&heads, &cfg).unwrap();
        (
            r.loss,
            OutputGrads {
                logits: None,
                projections: r.grads.into_iter().map(Some).collect(),
            },
        )
    })
}

pub fn projector() -> Vec<(String, f64)> {
    let cfg = ProjectorConfig {
        hidden_dim: 6,
        out_dim: 4,
        l2_normalize_output: true,
    };
    let mut r = rng(41);
    let proj = Projector::<f64>::new(8, &cfg, &mut r);
    let x = randn(24, &mut r);
    let w = randn(12, &mut r);
    let read = linear_readout(w, 3, 4);

    let mut p = proj.clone();
    let z = p.forward(&t(&[3, 8], x.clone())).unwrap();
    let dx = p.backward(&read(&z).1).unwrap();
    let num = numeric_grad(&x, |v| {
        let mut q = proj.clone();
        read(&q.forward(&t(&[3, 8], v.to_vec())).unwrap()).0
    });
    let mut errs = vec![("input".to_string(), max_rel_err(dx.data(), &num, FLOOR))];

    let w1 = proj.fc1.weight.value.data().to_vec();
    let num = numeric_grad(&w1, |v| {
        let mut q = proj.clone();
        q.fc1.weight.value.data_mut().copy_from_slice(v);
        read(&q.forward(&t(&[3, 8], x.clone())).unwrap()).0
    });
    errs.push(("fc1.weight".into(), max_rel_err(p.fc1.weight.grad.as_ref().unwrap().data(), &num, FLOOR)));
    errs
}
