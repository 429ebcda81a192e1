//! Shared oracles for the loss checks: tiny 64-bit nets, a central
//! finite-difference gradient checker and plain-Rust recomputations.

#![allow(dead_code)]

use cfanet::geometry::{slerp, IdentityVector};
use cfanet::losses::{
    adversarial_loss, content_loss_diff, crop_patches, discriminator_logistic, generator_logistic, gradient_penalty,
    identity_consistency_from_embeddings, identity_consistency_loss, identity_loss, identity_smoothing_loss,
    overall_loss, patch_boxes, reconstruction_loss, scalar, LossTerms, LossWeights, PatchSpec, SmoothingConfig,
};
use cfanet::model::{seeded, Generator, ModelConfig, PairDiscriminator, RecognizerAdapter, RecognizerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::{nn, Device, Kind, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        d_id: 4,
        c_con: 2,
        stride: 2,
        stem_channels: vec![3],
        id_channels: vec![],
        id_map_channels: 1,
        decoder_channels: vec![3, 3],
        disc_channels: vec![2, 2],
        patch_size: 4,
        local_channels: vec![2],
    }
}

pub struct ToyNets {
    pub cfg: ModelConfig,
    pub g_vs: nn::VarStore,
    pub g: Generator,
    pub d_vs: nn::VarStore,
    pub d: PairDiscriminator,
    pub dl_vs: nn::VarStore,
    pub dl: PairDiscriminator,
    pub r: RecognizerAdapter,
}

/// Every network in 64-bit with weights drawn from `seed`.
pub fn toy_nets(seed: u64) -> ToyNets {
    let cfg = tiny_model();
    seeded(seed, || {
        let mut g_vs = nn::VarStore::new(Device::Cpu);
        let g = Generator::new(&g_vs.root(), &cfg).expect("valid tiny config");
        g_vs.double();
        let mut d_vs = nn::VarStore::new(Device::Cpu);
        let d = PairDiscriminator::global(&d_vs.root(), &cfg);
        d_vs.double();
        let mut dl_vs = nn::VarStore::new(Device::Cpu);
        let dl = PairDiscriminator::local(&dl_vs.root(), &cfg);
        dl_vs.double();
        let rc = RecognizerConfig { image_size: 8, input_size: 8, channels: vec![3], hidden: 6, d_id: cfg.d_id };
        let mut r = RecognizerAdapter::new(&rc);
        r.vs.double();
        ToyNets { cfg, g_vs, g, d_vs, d, dl_vs, dl, r: r.frozen() }
    })
}

pub fn images(b: i64, n: i64, seed: i64) -> Tensor {
    tch::manual_seed(seed);
    Tensor::rand([b, 3, n, n], (Kind::Double, Device::Cpu)) * 1.8 - 0.9
}

pub fn values(t: &Tensor) -> Vec<f64> {
    let t = t.to_kind(Kind::Double).contiguous().view([-1]);
    let n = t.numel();
    let mut v = vec![0.0; n];
    t.copy_data(&mut v, n);
    v
}

pub fn param_count(vs: &nn::VarStore) -> usize {
    vs.trainable_variables().iter().map(|t| t.numel()).sum()
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub term: &'static str,
    pub coords: usize,
    pub within: usize,
    pub max_rel: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.coords as f64
    }

    pub fn passes(&self) -> bool {
        self.coords > 0 && self.fraction() >= 0.95
    }
}

/// Compares autograd gradients of `f` with central differences on every
/// coordinate of `params`. The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, 1e-6 * max_grad)`, so coordinates whose
/// gradient is negligible next to the term's largest one are not judged
/// on rounding noise.
pub fn gradcheck(term: &'static str, params: &[Tensor], f: &dyn Fn() -> Tensor) -> GradCheck {
    let loss = f();
    let grads = Tensor::run_backward(&[loss], params, false, false);
    // parameters the term never reaches get an undefined gradient
    let analytic: Vec<Vec<f64>> = grads
        .iter()
        .zip(params)
        .map(|(g, p)| if g.defined() { values(g) } else { vec![0.0; p.numel()] })
        .collect();
    let scale = analytic.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(1e-300);
    let (mut coords, mut within, mut max_rel) = (0, 0, 0.0f64);
    for (p, a) in params.iter().zip(&analytic) {
        let flat = p.view([-1]);
        for (i, &ai) in a.iter().enumerate() {
            let bump = |h: f64| {
                tch::no_grad(|| {
                    let mut e = flat.get(i as i64);
                    e += h;
                })
            };
            bump(FD_STEP);
            let up = scalar(&f());
            bump(-2.0 * FD_STEP);
            let down = scalar(&f());
            bump(FD_STEP);
            let n = (up - down) / (2.0 * FD_STEP);
            let rel = (ai - n).abs() / ai.abs().max(n.abs()).max(floor);
            coords += 1;
            if rel < REL_TOL {
                within += 1;
            }
            max_rel = max_rel.max(rel);
        }
    }
    GradCheck { term, coords, within, max_rel }
}

fn encode_decode(nets: &ToyNets, x: &Tensor, y: &Tensor) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
    let b = x.size()[0];
    let (zc, zi) = nets.g.encode_tensors(&Tensor::cat(&[x, y], 0)).expect("encode");
    let zc_x = zc.narrow(0, 0, b);
    let (zx, zy) = (zi.narrow(0, 0, b), zi.narrow(0, b, b));
    let out = nets
        .g
        .decode_tensors(&Tensor::cat(&[&zc_x, &zc_x], 0), &Tensor::cat(&[&zy, &zx], 0))
        .expect("decode");
    (out.narrow(0, 0, b), out.narrow(0, b, b), zc_x, zx, zy)
}

/// Gradient checks of every loss term on the tiny nets.
pub fn loss_gradient_suite(seed: u64) -> Vec<GradCheck> {
    let nets = toy_nets(seed);
    let x = images(2, 8, seed as i64 + 1);
    let y = images(2, 8, seed as i64 + 2);
    let g = nets.g_vs.trainable_variables();
    let d = nets.d_vs.trainable_variables();
    let dl = nets.dl_vs.trainable_variables();
    let spec = PatchSpec { min_frac: 0.25, max_frac: 0.5, count: 2 };
    let smoothing = SmoothingConfig::default();
    let mut out = Vec::new();

    out.push(gradcheck("reconstruction", &g, &|| {
        let (_, x_rec, ..) = encode_decode(&nets, &x, &y);
        reconstruction_loss(&x, &x_rec).unwrap()
    }));
    out.push(gradcheck("content_same", &g, &|| {
        let (x_cross, ..) = encode_decode(&nets, &x, &y);
        cfanet::losses::content_loss_same(&x_cross, &x).unwrap()
    }));
    out.push(gradcheck("content_diff_generator", &g, &|| {
        let (x_cross, ..) = encode_decode(&nets, &x, &y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        content_loss_diff(&x_cross, &x, &nets.dl, &spec, nets.cfg.patch_size, &mut rng).unwrap().generator
    }));
    out.push(gradcheck("content_diff_discriminator", &dl, &|| {
        let (x_cross, ..) = encode_decode(&nets, &x, &y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        content_loss_diff(&x_cross, &x, &nets.dl, &spec, nets.cfg.patch_size, &mut rng).unwrap().discriminator
    }));
    out.push(gradcheck("identity_consistency", &g, &|| {
        let (x_cross, _, _, _, zy) = encode_decode(&nets, &x, &y);
        identity_consistency_loss(&x_cross, &y, &zy, &nets.r).unwrap()
    }));
    out.push(gradcheck("identity_smoothing", &g, &|| {
        let (_, _, zc, zx, zy) = encode_decode(&nets, &x, &y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        identity_smoothing_loss(&zc, &zx, &zy, &nets.g, &nets.r, &smoothing, &mut rng).unwrap().loss
    }));
    out.push(gradcheck("adversarial_generator", &g, &|| {
        let (x_cross, x_rec, ..) = encode_decode(&nets, &x, &y);
        adversarial_loss(&x, &y, &x_rec, &x_cross, &nets.d).unwrap().generator
    }));
    out.push(gradcheck("adversarial_discriminator", &d, &|| {
        let (x_cross, x_rec, ..) = encode_decode(&nets, &x, &y);
        adversarial_loss(&x, &y, &x_rec, &x_cross, &nets.d).unwrap().discriminator
    }));
    out.push(gradcheck("gradient_penalty", &d, &|| gradient_penalty(&nets.d, &x, &y).unwrap()));
    out.push(gradcheck("overall", &g, &|| {
        let (x_cross, x_rec, zc, zx, zy) = encode_decode(&nets, &x, &y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let terms = LossTerms {
            content: content_loss_diff(&x_cross, &x, &nets.dl, &spec, nets.cfg.patch_size, &mut rng)
                .unwrap()
                .generator,
            id_consistency: identity_consistency_loss(&x_cross, &y, &zy, &nets.r).unwrap(),
            id_smoothing: identity_smoothing_loss(&zc, &zx, &zy, &nets.g, &nets.r, &smoothing, &mut rng)
                .unwrap()
                .loss,
            adversarial: adversarial_loss(&x, &y, &x_rec, &x_cross, &nets.d).unwrap().generator,
            reconstruction: reconstruction_loss(&x, &x_rec).unwrap(),
        };
        overall_loss(&terms, &LossWeights::default()).0
    }));
    out
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.size()[1] as usize;
    values(t).chunks(d).map(|c| c.to_vec()).collect()
}

/// Largest absolute gap between each loss term and its plain-Rust recomputation.
pub fn loss_value_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let nets = toy_nets(seed);
    let x = images(3, 8, seed as i64 + 11);
    let y = images(3, 8, seed as i64 + 12);
    let mut out = Vec::new();

    // L1 terms
    let (x_cross, x_rec, zc, zx, zy) = tch::no_grad(|| encode_decode(&nets, &x, &y));
    let (vx, vr) = (values(&x), values(&x_rec));
    let l1 = vx.iter().zip(&vr).map(|(a, b)| (a - b).abs()).sum::<f64>() / vx.len() as f64;
    out.push(("reconstruction", (scalar(&reconstruction_loss(&x, &x_rec).unwrap()) - l1).abs()));

    // logistic terms on wide-ranging logits, clamp included
    tch::manual_seed(seed as i64);
    let real = Tensor::randn([16], (Kind::Double, Device::Cpu)) * 30.0;
    let fake = Tensor::randn([16], (Kind::Double, Device::Cpu)) * 30.0;
    let clamp = |v: f64| v.clamp(-cfanet::losses::LOGIT_CLAMP, cfanet::losses::LOGIT_CLAMP);
    let (vr, vf) = (values(&real), values(&fake));
    let gen = vf.iter().map(|&f| softplus(-clamp(f))).sum::<f64>() / 16.0;
    let dis = vr.iter().map(|&r| softplus(-clamp(r))).sum::<f64>() / 16.0 + vf.iter().map(|&f| softplus(clamp(f))).sum::<f64>() / 16.0;
    out.push(("generator_logistic", (scalar(&generator_logistic(&fake)) - gen).abs()));
    out.push(("discriminator_logistic", (scalar(&discriminator_logistic(&real, &fake)) - dis).abs()));

    // identity consistency from random embeddings
    let (a, b, z) = (
        Tensor::randn([5, 4], (Kind::Double, Device::Cpu)),
        Tensor::randn([5, 4], (Kind::Double, Device::Cpu)),
        Tensor::randn([5, 4], (Kind::Double, Device::Cpu)),
    );
    let (ra, rb, rz) = (rows(&a), rows(&b), rows(&z));
    let oracle = (0..5).map(|i| (1.0 - cos(&ra[i], &rb[i])) + (1.0 - cos(&rz[i], &rb[i]))).sum::<f64>() / 5.0;
    out.push((
        "identity_consistency",
        (scalar(&identity_consistency_from_embeddings(&a, &b, &z).unwrap()) - oracle).abs(),
    ));

    // smoothing: decode both interpolants row by row and embed independently
    let smoothing = SmoothingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let term = tch::no_grad(|| identity_smoothing_loss(&zc, &zx, &zy, &nets.g, &nets.r, &smoothing, &mut rng))
        .unwrap()
        .loss;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rzx, rzy) = (rows(&zx), rows(&zy));
    let mut acc = 0.0;
    for i in 0..3 {
        let t: f64 = rand::Rng::gen(&mut rng);
        let (p, q) = (IdentityVector::try_from_unit(rzx[i].clone()).unwrap(), IdentityVector::try_from_unit(rzy[i].clone()).unwrap());
        let z0 = slerp(&p, &q, t).unwrap();
        let z1 = slerp(&p, &q, t + smoothing.epsilon).unwrap();
        let embed = |z: &IdentityVector| {
            let zt = Tensor::from_slice(z.as_slice()).view([1, 4]);
            let img = tch::no_grad(|| nets.g.decode_tensors(&zc.narrow(0, i as i64, 1), &zt)).unwrap();
            values(&tch::no_grad(|| nets.r.embed(&img)))
        };
        let (e0, e1) = (embed(&z0), embed(&z1));
        acc += 1.0 - cos(&e0, &e1);
    }
    // the term is ~1e-9, so compare on the path-length scale
    let eps2 = smoothing.epsilon * smoothing.epsilon;
    out.push(("identity_smoothing / eps^2", (scalar(&term) - acc / 3.0).abs() / eps2));

    // adversarial: logits from separate forward passes
    let (real_l, fake_l) = tch::no_grad(|| (nets.d.forward(&x, &y).unwrap(), nets.d.forward(&x_rec, &x_cross).unwrap()));
    let (vr, vf) = (values(&real_l), values(&fake_l));
    let n = vr.len() as f64;
    let adv = tch::no_grad(|| adversarial_loss(&x, &y, &x_rec, &x_cross, &nets.d)).unwrap();
    let gen = vf.iter().map(|&f| softplus(-clamp(f))).sum::<f64>() / n;
    let dis = vr.iter().map(|&r| softplus(-clamp(r))).sum::<f64>() / n + vf.iter().map(|&f| softplus(clamp(f))).sum::<f64>() / n;
    out.push(("adversarial_generator", (scalar(&adv.generator) - gen).abs()));
    out.push(("adversarial_discriminator", (scalar(&adv.discriminator) - dis).abs()));

    // local patch loss with boxes redrawn from the same seed and cropped by hand
    let spec = PatchSpec { min_frac: 0.25, max_frac: 0.5, count: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms = tch::no_grad(|| content_loss_diff(&x_cross, &x, &nets.dl, &spec, 4, &mut rng)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes_a = patch_boxes(3, 8, &spec, &mut rng).unwrap();
    let boxes_b = patch_boxes(3, 8, &spec, &mut rng).unwrap();
    let manual = |img: &Tensor, bx: &[cfanet::losses::PatchBox]| {
        let parts: Vec<Tensor> = bx
            .iter()
            .map(|b| {
                let p = img.get(b.image).unsqueeze(0).slice(2, b.top, b.top + b.side, 1).slice(3, b.left, b.left + b.side, 1);
                if b.side == 4 {
                    p
                } else {
                    p.upsample_bilinear2d([4, 4], false, None, None)
                }
            })
            .collect();
        Tensor::cat(&parts, 0)
    };
    let reference = manual(&x, &boxes_b);
    let (fl, rl) = tch::no_grad(|| {
        (
            nets.dl.forward(&manual(&x_cross, &boxes_a), &reference).unwrap(),
            nets.dl.forward(&manual(&x, &boxes_a), &reference).unwrap(),
        )
    });
    let (vf, vr) = (values(&fl), values(&rl));
    let n = vf.len() as f64;
    let gen = vf.iter().map(|&f| softplus(-clamp(f))).sum::<f64>() / n;
    let dis = vr.iter().map(|&r| softplus(-clamp(r))).sum::<f64>() / n + vf.iter().map(|&f| softplus(clamp(f))).sum::<f64>() / n;
    out.push(("content_diff_generator", (scalar(&terms.generator) - gen).abs()));
    out.push(("content_diff_discriminator", (scalar(&terms.discriminator) - dis).abs()));
    let lib_crop = crop_patches(&x, &boxes_b, 4).unwrap();
    out.push(("crop_patches", values(&(lib_crop - &reference)).iter().fold(0.0, |m, v| m.max(v.abs()))));

    // gradient penalty against finite-difference input gradients
    let gp = scalar(&gradient_penalty(&nets.d, &x, &y).unwrap());
    let logit_sum = |a: &Tensor, b: &Tensor| tch::no_grad(|| scalar(&nets.d.forward(a, b).unwrap().sum(Kind::Double)));
    let h = 1e-6;
    let mut sq = 0.0;
    for which in 0..2 {
        let base = if which == 0 { &x } else { &y };
        for i in 0..base.numel() as i64 {
            let bumped = |s: f64| {
                let t = base.copy();
                tch::no_grad(|| {
                    let mut e = t.view([-1]).get(i);
                    e += s;
                });
                t
            };
            let (p, m) = (bumped(h), bumped(-h));
            let g = if which == 0 {
                (logit_sum(&p, &y) - logit_sum(&m, &y)) / (2.0 * h)
            } else {
                (logit_sum(&x, &p) - logit_sum(&x, &m)) / (2.0 * h)
            };
            sq += g * g;
        }
    }
    out.push(("gradient_penalty (relative)", (gp - sq / 3.0).abs() / gp.abs().max(1e-12)));

    // weighted sum
    let w = LossWeights { lambda_con: 0.3, lambda_id: 1.7, lambda_adv: 0.2, lambda_rec: 2.5, lambda_smooth: 10.0 };
    let v = [0.4, 0.25, 0.01, 0.9, 0.33];
    let s = |f: f64| Tensor::from(f);
    let terms = LossTerms { content: s(v[0]), id_consistency: s(v[1]), id_smoothing: s(v[2]), adversarial: s(v[3]), reconstruction: s(v[4]) };
    let (total, report) = overall_loss(&terms, &w);
    let oracle = 0.3 * 0.4 + 1.7 * (0.25 + 10.0 * 0.01) + 0.2 * 0.9 + 2.5 * 0.33;
    out.push(("overall", (scalar(&total) - oracle).abs().max((report.total - oracle).abs())));
    let _ = identity_loss;
    out
}

/// The closed-form examples of the loss contracts, evaluated exactly.
pub fn closed_form_suite() -> Vec<(&'static str, bool)> {
    use cfanet::losses::{content_loss, content_loss_same, PairLabel};
    let mut out = Vec::new();
    let a = images(2, 8, 3);
    let shifted = &a + 0.5;
    out.push(("l1 identical = 0", scalar(&content_loss_same(&a, &a).unwrap()) == 0.0));
    out.push(("l1 +0.5 = 0.5", (scalar(&reconstruction_loss(&shifted, &a).unwrap()) - 0.5).abs() < 1e-12));
    let zero = Tensor::zeros([4], (Kind::Double, Device::Cpu));
    out.push(("generator logit 0 = ln 2", (scalar(&generator_logistic(&zero)) - 2f64.ln()).abs() < 1e-15));
    let big = Tensor::full([4], 1e6, (Kind::Double, Device::Cpu));
    // logits are clamped, so "saturated" means softplus(-clamp)
    let floor = softplus(-cfanet::losses::LOGIT_CLAMP);
    out.push(("generator logit +inf -> 0", (scalar(&generator_logistic(&big)) - floor).abs() < 1e-15 && floor < 1e-6));
    out.push((
        "discriminator logits 0 = 2 ln 2",
        (scalar(&discriminator_logistic(&zero, &zero)) - 2.0 * 2f64.ln()).abs() < 1e-15,
    ));
    out.push(("perfect discriminator -> 0", (scalar(&discriminator_logistic(&big, &(-&big))) - 2.0 * floor).abs() < 1e-15));
    let e = Tensor::from_slice(&[1.0f64, 0.0, 0.0, 0.0]).view([1, 4]);
    let half = Tensor::from_slice(&[0.5f64, 0.75f64.sqrt(), 0.0, 0.0]).view([1, 4]);
    let orth = Tensor::from_slice(&[0.0f64, 1.0, 0.0, 0.0]).view([1, 4]);
    let c = |p: &Tensor, q: &Tensor, r: &Tensor| scalar(&identity_consistency_from_embeddings(p, q, r).unwrap());
    out.push(("consistency aligned = 0", c(&e, &e, &e).abs() < 1e-15));
    out.push(("consistency cos 0.5 and 1 = 0.5", (c(&half, &e, &e) - 0.5).abs() < 1e-12));
    out.push(("consistency orthogonal = 2", (c(&orth, &e, &orth) - 2.0).abs() < 1e-12));
    let s = |f: f64| Tensor::from(f);
    out.push(("identity 0.5 + 10 * 0.1 = 1.5", (scalar(&identity_loss(&s(0.5), &s(0.1), 10.0)) - 1.5).abs() < 1e-12));
    out.push(("identity smooth 0", scalar(&identity_loss(&s(0.5), &s(0.0), 10.0)) == 0.5));
    out.push(("identity lambda 0", scalar(&identity_loss(&s(0.5), &s(0.7), 0.0)) == 0.5));
    let terms = |v: [f64; 5]| LossTerms {
        content: s(v[0]),
        id_consistency: s(v[1]),
        id_smoothing: s(v[2]),
        adversarial: s(v[3]),
        reconstruction: s(v[4]),
    };
    let zero_w = LossWeights { lambda_con: 0.0, lambda_id: 0.0, lambda_adv: 0.0, lambda_rec: 0.0, lambda_smooth: 0.0 };
    out.push(("all weights 0 -> 0", scalar(&overall_loss(&terms([1.0, 2.0, 3.0, 4.0, 5.0]), &zero_w).0) == 0.0));
    out.push((
        "one term, weight 1",
        scalar(&overall_loss(&terms([0.0, 0.0, 0.0, 0.0, 0.37]), &LossWeights::default()).0) == 0.37,
    ));
    let (total, report) = overall_loss(&terms([0.1, 0.2, 0.003, 0.4, 0.5]), &LossWeights::default());
    out.push(("report sums to total", (report.weighted.iter().sum::<f64>() - scalar(&total)).abs() < 1e-6));

    let nets = toy_nets(1);
    let x = images(2, 8, 4);
    let y = images(2, 8, 5);
    let spec = PatchSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let same = content_loss(PairLabel::SAME, &a, &x, &nets.dl, &spec, 4, &mut rng).unwrap().0;
    out.push(("c=1 equals content_loss_same", scalar(&same) == scalar(&content_loss_same(&a, &x).unwrap())));
    let same_zero = content_loss(PairLabel::SAME, &x, &x, &nets.dl, &spec, 4, &mut rng).unwrap().0;
    out.push(("c=1 identical images -> 0", scalar(&same_zero) == 0.0));
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    let diff = content_loss(PairLabel::DIFFERENT, &a, &x, &nets.dl, &spec, 4, &mut r1).unwrap().0;
    let direct = content_loss_diff(&a, &x, &nets.dl, &spec, 4, &mut r2).unwrap().generator;
    out.push(("c=0 equals content_loss_diff generator", scalar(&diff) == scalar(&direct)));

    let (_, _, zc, zx, _) = tch::no_grad(|| encode_decode(&nets, &x, &y));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sm = tch::no_grad(|| identity_smoothing_loss(&zc, &zx, &zx, &nets.g, &nets.r, &SmoothingConfig::default(), &mut rng))
        .unwrap();
    out.push(("smoothing z_x = z_y -> 0", scalar(&sm.loss).abs() < 1e-20));

    let sides: Vec<i64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        patch_boxes(16, 64, &PatchSpec::default(), &mut rng).unwrap().iter().map(|b| b.side).collect()
    };
    out.push(("64px default patches in [8, 16]", sides.iter().all(|s| (8..=16).contains(s))));
    let fixed = PatchSpec { min_frac: 0.25, max_frac: 0.25, count: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    out.push(("min = max = 1/4 -> 16px", patch_boxes(4, 64, &fixed, &mut rng).unwrap().iter().all(|b| b.side == 16)));
    let mut r1 = ChaCha8Rng::seed_from_u64(8);
    let mut r2 = ChaCha8Rng::seed_from_u64(8);
    out.push((
        "same seed -> same patches",
        patch_boxes(4, 64, &PatchSpec::default(), &mut r1).unwrap() == patch_boxes(4, 64, &PatchSpec::default(), &mut r2).unwrap(),
    ));
    out
}

/// 16px model with an untrained generator and a recognizer whose threshold
/// is set by hand (0.8578, so theta is about 0.540 rad).
pub fn small_train_config(seed: u64) -> cfanet::training::TrainConfig {
    cfanet::training::TrainConfig {
        model: ModelConfig {
            image_size: 16,
            d_id: 8,
            c_con: 4,
            stride: 4,
            stem_channels: vec![8, 8],
            id_channels: vec![8],
            id_map_channels: 2,
            decoder_channels: vec![8, 8, 8],
            disc_channels: vec![8, 8],
            patch_size: 4,
            local_channels: vec![8],
        },
        batch_size: 2,
        iterations: 4,
        seed,
        ..Default::default()
    }
}

pub fn small_recognizer() -> RecognizerAdapter {
    let rc = RecognizerConfig { image_size: 16, input_size: 16, channels: vec![8, 8], hidden: 16, d_id: 8 };
    let mut r = seeded(11, || RecognizerAdapter::new(&rc));
    r.threshold = 0.8578;
    r.frozen()
}

pub fn small_checkpoint(seed: u64) -> cfanet::checkpoint::Checkpoint {
    let trainer = cfanet::training::Trainer::new(&small_train_config(seed), small_recognizer()).unwrap();
    trainer.checkpoint().unwrap()
}

pub fn small_model(seed: u64) -> cfanet::anonymizer::AnonymizerModel {
    cfanet::anonymizer::AnonymizerModel::from_checkpoint(&small_checkpoint(seed)).unwrap()
}

/// A smooth 16px test picture as PNG bytes; `k` shifts the pattern.
pub fn test_png(k: usize) -> Vec<u8> {
    let n = 16;
    let mut chw = vec![0f32; 3 * n * n];
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let v = ((x * (c + 1) + y * (k + 2)) % 17) as f32 / 8.0 - 1.0;
                chw[c * n * n + y * n + x] = v;
            }
        }
    }
    cfanet::data::encode_png(&chw, n).unwrap()
}
