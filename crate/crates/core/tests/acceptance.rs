//! Acceptance suite: one PASS/FAIL line per criterion, details indented below.
//!
//! `CFANET_ACCEPTANCE_DIR` moves the toy runs (default `target/acceptance`);
//! `CFANET_ACCEPTANCE_REUSE=1` evaluates finished runs there instead of
//! training again. Positional arguments select criteria by name substring.
//!
//! FAIL lines are reported, not raised: the process exits 0 so the rest of
//! the test suite stays usable. `CFANET_ACCEPTANCE_STRICT=1` turns any FAIL
//! into a non-zero exit.

mod common;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use cfanet::adapters::{RandomProjectionFeatures, SpriteAttributeClassifier, SpriteDetector};
use cfanet::anonymizer::{anonymize_encoded, anonymize_video, sweep, Alignment, AnonymizerModel, VideoJob};
use cfanet::config::{ExperimentConfig, ServiceConfig};
use cfanet::data::{toy_clip, toy_dataset, IdentityDataset};
use cfanet::evaluation::{evaluate, tpr_at_far, Adapters, EvalReport};
use cfanet::geometry::{angle, cosine_similarity, sample_anonymous, slerp, AngleSpec, IdentityVector};
use cfanet::model::cosine;
use cfanet::service::{replay, router, AppState, RecordedRequest, RecordedResponse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

struct Outcome {
    name: &'static str,
    pass: bool,
    details: Vec<String>,
    secs: f64,
}

fn selected(name: &str) -> bool {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()))
}

fn check(name: &'static str, f: impl FnOnce(&mut Vec<String>) -> cfanet::Result<bool>) -> Option<Outcome> {
    if !selected(name) {
        return None;
    }
    let t = Instant::now();
    let mut details = Vec::new();
    let pass = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut details))) {
        Ok(Ok(p)) => p,
        Ok(Err(e)) => {
            details.push(format!("error: {e}"));
            false
        }
        Err(_) => {
            details.push("panicked".into());
            false
        }
    };
    let o = Outcome { name, pass, details, secs: t.elapsed().as_secs_f64() };
    println!("{} {} ({:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.name, o.secs);
    for d in &o.details {
        println!("    {d}");
    }
    Some(o)
}

fn unit(rng: &mut impl Rng, d: usize) -> IdentityVector {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    cfanet::geometry::project_to_sphere(&v).unwrap()
}

fn geometry(details: &mut Vec<String>) -> cfanet::Result<bool> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut norm_err, mut speed_err, mut oracle_err) = (0.0f64, 0.0f64, 0.0f64);
    let (mut slerps, mut samples, mut violations) = (0, 0, 0);
    while slerps < 10_000 {
        let d = rng.gen_range(2..=128);
        let a = unit(&mut rng, d);
        let b = unit(&mut rng, d);
        if 1.0 + cosine_similarity(&a, &b) < 1e-3 {
            continue;
        }
        let t = rng.gen::<f64>();
        let p = slerp(&a, &b, t)?;
        let omega = angle(&a, &b);
        norm_err = norm_err.max((p.norm() - 1.0).abs());
        speed_err = speed_err.max((angle(&a, &p) - t * omega).abs());
        // rotation in the plane of a and b
        let (av, bv) = (a.as_slice(), b.as_slice());
        let c = cosine_similarity(&a, &b);
        let perp: Vec<f64> = av.iter().zip(bv).map(|(x, y)| y - c * x).collect();
        let pn = perp.iter().map(|v| v * v).sum::<f64>().sqrt();
        if pn > 1e-9 {
            for (k, &pk) in p.as_slice().iter().enumerate() {
                let want = (t * omega).cos() * av[k] + (t * omega).sin() * perp[k] / pn;
                oracle_err = oracle_err.max((pk - want).abs());
            }
        }
        slerps += 1;
    }
    let mut worst_margin = f64::INFINITY;
    while samples < 10_000 {
        let d = rng.gen_range(2..=128);
        let z = unit(&mut rng, d);
        let theta = rng.gen_range(1e-3..std::f64::consts::FRAC_PI_2);
        let alpha = rng.gen_range(theta..std::f64::consts::PI);
        if alpha <= theta {
            continue;
        }
        let out = sample_anonymous(&z, &AngleSpec::new(theta, alpha, rng.gen())?)?;
        norm_err = norm_err.max((out.norm() - 1.0).abs());
        let margin = theta.cos() - cosine_similarity(&z, &out);
        if !(margin > 0.0) || (out.norm() - 1.0).abs() >= 1e-6 {
            violations += 1;
        }
        worst_margin = worst_margin.min(margin);
        samples += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    details.push(format!("{slerps} slerp cases: max norm error {norm_err:.2e}, speed error {speed_err:.2e}, rotation-oracle error {oracle_err:.2e}"));
    details.push(format!("{samples} sampler cases: {violations} constraint violations, smallest cos margin {worst_margin:.2e}"));
    Ok(norm_err < 1e-6 && speed_err < 1e-5 && oracle_err < 1e-6 && violations == 0 && secs < 30.0)
}

fn losses(details: &mut Vec<String>) -> cfanet::Result<bool> {
    let t = Instant::now();
    let values = common::loss_value_suite(5);
    let worst = values.iter().cloned().fold(("", 0.0f64), |m, v| if v.1 > m.1 { v } else { m });
    details.push(format!("{} value oracles, largest gap {:.2e} ({})", values.len(), worst.1, worst.0));
    let closed = common::closed_form_suite();
    let failed: Vec<_> = closed.iter().filter(|c| !c.1).map(|c| c.0).collect();
    details.push(format!("{} closed forms, failed: {failed:?}", closed.len()));
    let grads = common::loss_gradient_suite(3);
    for g in &grads {
        details.push(format!(
            "grad {:<28} {:>4}/{:<4} within 1e-3 ({:.1}%)",
            g.term,
            g.within,
            g.coords,
            100.0 * g.fraction()
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(values.iter().all(|v| v.1 < 1e-6) && failed.is_empty() && grads.iter().all(|g| g.passes()) && secs < 300.0)
}

fn brute_force(genuine: &[f64], impostor: &[f64], far: f64) -> (f64, f64, bool) {
    let n = impostor.len() as f64;
    let mut best: Option<f64> = None;
    for &s in impostor {
        let rate = impostor.iter().filter(|&&x| x >= s).count() as f64 / n;
        if rate <= far && best.is_none_or(|b| s < b) {
            best = Some(s);
        }
    }
    let fallback = best.is_none();
    let thr = best.unwrap_or_else(|| impostor.iter().cloned().fold(f64::NEG_INFINITY, f64::max).next_up());
    let tpr = genuine.iter().filter(|&&g| g >= thr).count() as f64 / genuine.len() as f64;
    (tpr, thr, fallback)
}

fn tpr(details: &mut Vec<String>) -> cfanet::Result<bool> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut mismatches, mut fallbacks) = (0, 0);
    for _ in 0..1000 {
        let levels = rng.gen_range(2..50) as f64;
        let draw = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
            (0..k).map(|_| (rng.gen_range(-1.0..1.0f64) * levels).round() / levels).collect()
        };
        let (ng, ni) = (rng.gen_range(1..200), rng.gen_range(1..400));
        let genuine = draw(&mut rng, ng);
        let impostor = draw(&mut rng, ni);
        let far = [0.0, 0.001, 0.01, 0.05, 0.1, 0.5, 1.0][rng.gen_range(0..7)];
        let got = tpr_at_far(&genuine, &impostor, far)?;
        let want = brute_force(&genuine, &impostor, far);
        if (got.tpr, got.threshold, got.fallback) != want {
            mismatches += 1;
        }
        fallbacks += want.2 as usize;
    }
    details.push(format!("1000 instances with ties, {mismatches} mismatches, {fallbacks} needed the fallback threshold"));
    Ok(mismatches == 0 && t.elapsed().as_secs_f64() < 60.0)
}

fn toy_config() -> cfanet::Result<ExperimentConfig> {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.toml"))
}

fn work_dir() -> PathBuf {
    std::env::var_os("CFANET_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

struct ToyRun {
    name: &'static str,
    model: AnonymizerModel,
    report: EvalReport,
    train_secs: f64,
}

fn run_toy(name: &'static str, cfg: &ExperimentConfig, ds: &IdentityDataset, dir: &Path) -> cfanet::Result<ToyRun> {
    let out = dir.join(name);
    let ckpt = out.join("model.ckpt");
    let reuse = std::env::var("CFANET_ACCEPTANCE_REUSE").is_ok_and(|v| v == "1") && ckpt.exists();
    let t = Instant::now();
    if !reuse {
        let r = cfanet::recognizer::load_or_pretrain(&dir.join("recognizer.ckpt"), &cfg.recognizer)?;
        cfanet::training::train(ds, &cfg.train, r, &out)?;
    }
    let train_secs = if reuse { f64::NAN } else { t.elapsed().as_secs_f64() };
    let model = AnonymizerModel::load(&ckpt)?;
    let (det, attr, feat) = (SpriteDetector::default(), SpriteAttributeClassifier, RandomProjectionFeatures::default());
    let adapters = Adapters { detectors: vec![&det], attributes: Some(&attr), features: Some(&feat) };
    let report = evaluate(&model, ds, &cfg.eval, &adapters)?;
    std::fs::write(out.join("eval_report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(ToyRun { name, model, report, train_secs })
}

fn combined(r: &EvalReport) -> f64 {
    r.anonymization_success - r.content_distance.unwrap_or(f64::NAN)
}

fn toy_end_to_end(details: &mut Vec<String>, full_model: &mut Option<AnonymizerModel>) -> cfanet::Result<bool> {
    let cfg = toy_config()?;
    let ds = toy_dataset(&cfg.data.toy);
    let dir = work_dir();
    std::fs::create_dir_all(&dir)?;
    let t = Instant::now();
    let pretrained = dir.join("recognizer.ckpt").exists();
    cfanet::recognizer::load_or_pretrain(&dir.join("recognizer.ckpt"), &cfg.recognizer)?;
    let recognizer_secs = t.elapsed().as_secs_f64();
    details.push(format!(
        "{} train / {} val identities, {} px, {} steps; recognizer {} in {recognizer_secs:.0}s",
        ds.train.len(),
        ds.val.len(),
        ds.image_size,
        cfg.train.iterations,
        if pretrained { "loaded" } else { "pretrained" }
    ));

    let full = run_toy("full", &cfg, &ds, &dir)?;
    let mut no_id = cfg.clone();
    no_id.train.ablation.disable_identity_loss = true;
    let no_id = run_toy("without_identity_loss", &no_id, &ds, &dir)?;
    let mut no_con = cfg.clone();
    no_con.train.ablation.disable_content_loss = true;
    let no_con = run_toy("without_content_loss", &no_con, &ds, &dir)?;

    let r = &full.report;
    let runtime_ok = [&full, &no_id, &no_con].iter().all(|x| x.train_secs.is_nan() || x.train_secs + recognizer_secs < 3600.0);
    for x in [&full, &no_id, &no_con] {
        details.push(format!(
            "{:<22} train {:>6.0}s  success {:.3}  content distance {:.4}  combined {:.3}  rec L1 {:.4}",
            x.name,
            x.train_secs,
            x.report.anonymization_success,
            x.report.content_distance.unwrap_or(f64::NAN),
            combined(&x.report),
            x.report.reconstruction_l1
        ));
    }

    let a = r.reconstruction_l1 < 0.08;
    details.push(format!("(a) {} val reconstruction L1 {:.4} < 0.08", ok(a), r.reconstruction_l1));

    let v = &r.verification;
    let b = v.after_tpr_calibrated < 0.10;
    details.push(format!(
        "(b) {} TPR after anonymization at alpha = theta + {:.1} = {:.3}: {:.4} at the recognizer's calibrated threshold {:.4} (before: {:.4}); {:.4} at the threshold refit on validation impostors {:.4} (before: {:.4})",
        ok(b),
        cfg.eval.alpha_margin,
        r.alpha,
        v.after_tpr_calibrated,
        r.threshold,
        v.before_tpr_calibrated,
        v.after_tpr,
        v.before.threshold,
        v.before.tpr
    ));

    let rhos: Vec<f64> = r.curves.iter().map(|c| c.spearman).collect();
    let worst = rhos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let c = rhos.iter().all(|&x| x <= -0.9);
    details.push(format!(
        "(c) {} {} sweep rows, {} with Spearman <= -0.9, worst {:.3}",
        ok(c),
        rhos.len(),
        rhos.iter().filter(|&&x| x <= -0.9).count(),
        worst
    ));

    let k = &r.ranking;
    let d = k.median_post_rank > k.gallery_size as f64 / 4.0 && k.max_top1_cosine < k.threshold;
    details.push(format!(
        "(d) {} median rank {:.1} -> {:.1} of {} (needs > {:.2}); top-1 gallery cosine largest {:.4}, median {:.4}, vs threshold {:.4}",
        ok(d),
        k.median_pre_rank,
        k.median_post_rank,
        k.gallery_size,
        k.gallery_size as f64 / 4.0,
        k.max_top1_cosine,
        k.median_top1_cosine,
        k.threshold
    ));

    let cd = |x: &ToyRun| x.report.content_distance.unwrap_or(f64::NAN);
    let e1 = no_id.report.anonymization_success < 0.05;
    let e2 = cd(&no_id) < cd(&full) && cd(&no_id) < cd(&no_con);
    let e3 = cd(&no_con) > cd(&full) && cd(&no_con) > cd(&no_id);
    let e4 = combined(&full.report) > combined(&no_id.report) && combined(&full.report) > combined(&no_con.report);
    let e = e1 && e2 && e3 && e4;
    details.push(format!(
        "(e) {} without identity loss: success ~0 {}, lowest content distance {}; without content loss: worst content distance {}; full: best success - content distance {}",
        ok(e),
        ok(e1),
        ok(e2),
        ok(e3),
        ok(e4)
    ));
    details.push(format!("runtime {} each run under 60 min", ok(runtime_ok)));

    // the 16-frame clip claims of the video path
    let clip = toy_clip(cfg.data.toy.seed ^ 0xC11F, 0, 16, ds.image_size, ds.image_size * 3 / 2)?;
    let det = SpriteDetector::default();
    let job = VideoJob::align(clip, Alignment::Detector(&det), r.alpha, 1, full.model.theta())?;
    let frames = anonymize_video(&full.model, &job)?;
    let emb = |chws: Vec<&Vec<f32>>| -> cfanet::Result<Vec<Vec<f32>>> {
        chws.into_iter().map(|c| full.model.embed(c)).collect()
    };
    let src = emb(frames.iter().filter_map(|f| f.source_crop.as_ref()).collect())?;
    let anon = emb(frames.iter().filter_map(|f| f.crop.as_ref()).collect())?;
    let defeated = src.iter().zip(&anon).filter(|(s, a)| cosine(s, a) < full.model.threshold()).count();
    let pair_mean = |e: &[Vec<f32>]| {
        let mut acc = (0.0, 0);
        for i in 0..e.len() {
            for j in i + 1..e.len() {
                acc = (acc.0 + cosine(&e[i], &e[j]), acc.1 + 1);
            }
        }
        acc.0 / acc.1 as f64
    };
    let (po, pa) = (pair_mean(&src), pair_mean(&anon));
    let video = defeated == frames.len() && pa >= po - 0.1;
    details.push(format!(
        "video {} {defeated}/{} clip frames defeat verification; pairwise cosine anonymized {pa:.3} vs original {po:.3}",
        ok(video),
        frames.len()
    ));

    *full_model = Some(full.model);
    Ok(a && b && c && d && e && runtime_ok)
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAILED"
    }
}

fn determinism(details: &mut Vec<String>) -> cfanet::Result<bool> {
    let mut cfg = toy_config()?;
    cfg.train.iterations = 60;
    cfg.train.checkpoint_every = 30;
    cfg.train.probe_every = 0;
    let ds = toy_dataset(&cfg.data.toy);
    let dir = work_dir().join("determinism");
    let _ = std::fs::remove_dir_all(&dir);
    let rpath = work_dir().join("recognizer.ckpt");
    let mut models = Vec::new();
    for run in ["a", "b"] {
        let r = cfanet::recognizer::load_or_pretrain(&rpath, &cfg.recognizer)?;
        cfanet::training::train(&ds, &cfg.train, r, &dir.join(run))?;
        models.push(AnonymizerModel::load(&dir.join(run).join("model.ckpt"))?);
    }
    let same_file = |f: &str| -> cfanet::Result<bool> { Ok(std::fs::read(dir.join("a").join(f))? == std::fs::read(dir.join("b").join(f))?) };
    let ckpts = same_file("model.ckpt")? && same_file("step_000030.ckpt")? && same_file("train_log.jsonl")?;
    details.push(format!("two {}-step runs: checkpoints and logs identical {}", cfg.train.iterations, ok(ckpts)));

    let mut outputs_equal = true;
    let mut n = 0;
    for g in &ds.val {
        for i in 0..4 {
            let chw = cfanet::data::tensor_to_vec(&g.image(i));
            let outs: Vec<_> = models
                .iter()
                .map(|m| -> cfanet::Result<_> {
                    let enc = m.encode_chw(&chw)?;
                    let a = anonymize_encoded(m, &enc, &m.request(m.theta() + 0.3, i as u64))?;
                    let s = sweep(m, &enc, &[0.0, 0.8, 1.6], &[1, 2])?;
                    Ok((a.image, a.cosine, s.images, s.cosines))
                })
                .collect::<cfanet::Result<_>>()?;
            outputs_equal &= outs[0] == outs[1];
            n += 1;
        }
    }
    details.push(format!("{n} anonymizations and sweeps bitwise identical {}", ok(outputs_equal)));
    Ok(ckpts && outputs_equal)
}

fn service(details: &mut Vec<String>, model: Option<&AnonymizerModel>) -> cfanet::Result<bool> {
    let (ckpt, label) = match model {
        Some(_) => (work_dir().join("full").join("model.ckpt"), "trained toy model"),
        None => {
            let p = work_dir().join("service_fixture.ckpt");
            common::small_checkpoint(0).save(&p)?;
            (p, "untrained fixture")
        }
    };
    let fresh = || -> cfanet::Result<axum::Router> {
        let state: Arc<AppState> = AppState::new(ServiceConfig::default());
        state.load_model(&ckpt)?;
        Ok(router(state))
    };
    let m = AnonymizerModel::load(&ckpt)?;
    let theta = m.theta();
    let size = m.image_size();
    let cfg = toy_config()?;
    let mut toy = cfg.data.toy;
    toy.image_size = size;
    let ds = toy_dataset(&toy);
    let png = |k: usize| cfanet::data::encode_png(&cfanet::data::tensor_to_vec(&ds.val[0].image(k)), size);
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let run = |app: axum::Router, log: &[RecordedRequest]| -> cfanet::Result<Vec<RecordedResponse>> { rt.block_on(replay(app, log)) };

    let first = run(fresh()?, &[RecordedRequest::upload("/v1/sessions", &png(0)?), RecordedRequest::upload("/v1/sessions", &png(1)?)])?;
    let ids: Vec<String> = first.iter().map(|r| r.json()["session_id"].as_str().unwrap_or_default().to_string()).collect();
    let mut log = vec![
        RecordedRequest::get("/v1/health"),
        RecordedRequest::get("/v1/models"),
        RecordedRequest::upload("/v1/sessions", &png(0)?),
        RecordedRequest::upload("/v1/sessions", &png(1)?),
    ];
    for (k, id) in ids.iter().enumerate() {
        log.push(RecordedRequest::json(&format!("/v1/sessions/{id}/anonymize"), &json!({"alpha": theta + 0.3, "seed": k})));
        log.push(RecordedRequest::json(&format!("/v1/sessions/{id}/sweep"), &json!({"alphas": [theta + 0.1, 1.2, 1.5], "seeds": [1, 2]})));
    }
    let a = run(fresh()?, &log)?;
    let sweep_urls: Vec<String> = a
        .iter()
        .filter_map(|r| r.json()["cells"].as_array().cloned())
        .flatten()
        .filter_map(|c| c["url"].as_str().map(String::from))
        .collect();
    log.extend(sweep_urls.iter().map(|u| RecordedRequest::get(u)));
    let a = run(fresh()?, &log)?;
    let b = run(fresh()?, &log)?;
    let identical = a == b && a.iter().all(|r| r.status < 300);
    details.push(format!("{label}: {} recorded requests replayed twice, byte-identical {}", log.len(), ok(identical)));

    let id = &ids[0];
    let below = [theta, theta.next_down(), theta - 1e-9, theta * 0.5, 0.0, -0.2];
    let mut probes = Vec::new();
    for a in below {
        probes.push(RecordedRequest::json(&format!("/v1/sessions/{id}/anonymize"), &json!({"alpha": a, "seed": 3})));
        probes.push(RecordedRequest::json(&format!("/v1/sessions/{id}/sweep"), &json!({"alphas": [a, 1.4], "seeds": [0]})));
    }
    let mut full_log = log[..4].to_vec();
    full_log.extend(probes);
    let r = run(fresh()?, &full_log)?;
    let rejected = r[4..].iter().filter(|x| x.status == 409).count();
    details.push(format!("{rejected}/{} anonymize and sweep requests with alpha <= theta answered 409", r.len() - 4));
    Ok(identical && rejected == r.len() - 4)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn,cfanet::evaluation=error")).init();
    let started = Instant::now();
    let mut full = None;
    let outcomes: Vec<Outcome> = [
        check("geometry suite", geometry),
        check("loss correctness", losses),
        check("tpr_at_far matches brute force", tpr),
        check("toy end-to-end", |d| toy_end_to_end(d, &mut full)),
        check("determinism", determinism),
        check("service contract", |d| service(d, full.as_ref())),
    ]
    .into_iter()
    .flatten()
    .collect();
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("{passed}/{} acceptance criteria passed in {:.0}s", outcomes.len(), started.elapsed().as_secs_f64());
    let strict = std::env::var("CFANET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed != outcomes.len() {
        std::process::exit(1);
    }
}
