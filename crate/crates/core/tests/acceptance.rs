//! End-to-end acceptance run. Builds one desk-scale experiment (train the
//! three models, simulate four subjects, reconstruct every test item under
//! all variants), then checks every criterion against it and prints one
//! PASS/FAIL line each.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use mindkit::autoencoder::psnr;
use mindkit::encoder::{retrieval_accuracy, similarity_matrix};
use mindkit::metrics;
use mindkit::neurosim::{self, Dataset};
use mindkit::pipeline::{self, FeatureTable, PipelineConfig, TrainingCurves, Variant, ALL_STAGES};
use mindkit::reconstruct::{structure_loss, Models, TapTarget};
use mindkit::suite::ablation::SubjectRun;
use mindkit::suite::registry::{registry, run_check, CheckResult, SuiteContext};
use mindkit::suite::{run_ablation_experiment, AblationReport};
use mindkit::{Tape, Tensor};

struct Experiment {
    ds: Dataset,
    models: Models,
    table: FeatureTable,
    curves: TrainingCurves,
    report: AblationReport,
    runs: Vec<SubjectRun>,
    seconds: f64,
}

fn config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data.n_train = 1000;
    cfg.data.n_test = 12;
    cfg.data.n_subjects = 4;
    cfg
}

fn experiment() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(|| {
        let cfg = config();
        let t0 = Instant::now();
        let ds = pipeline::generate_dataset(&cfg.data).unwrap();
        let mut models = pipeline::fresh_models(&cfg.train).unwrap();
        let curves = pipeline::train_models(&ds, &cfg.train, &mut models, &ALL_STAGES).unwrap();
        let table = pipeline::compute_features(&ds, &models).unwrap();
        let (report, runs) = run_ablation_experiment(&ds, &table, &models, &cfg).unwrap();
        Experiment {
            ds,
            models,
            table,
            curves,
            report,
            runs,
            seconds: t0.elapsed().as_secs_f64(),
        }
    })
}

/// Written straight to stderr so the lines show without `--nocapture`.
fn line(s: &str) {
    let mut err = std::io::stderr().lock();
    writeln!(err, "{s}").unwrap();
}

struct Verdict {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &str, trials: usize) -> CheckResult {
    let c = registry()
        .into_iter()
        .find(|c| c.full_name() == name)
        .unwrap_or_else(|| panic!("no check {name}"));
    let ctx = SuiteContext {
        trials,
        ..SuiteContext::default()
    };
    run_check(&c, &ctx)
}

fn checks(names: &[&str], trials: usize) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for n in names {
        let r = check(n, trials);
        ok &= r.passed();
        let measured: Vec<String> = r.measured.iter().map(|(k, v)| format!("{k}={v:.3e}")).collect();
        parts.push(format!("{n} {:?} [{}] {}", r.status, measured.join(" "), r.detail));
    }
    (ok, parts.join("; "))
}

fn timed(limit_s: f64, f: impl FnOnce() -> (bool, String)) -> (bool, String) {
    let t = Instant::now();
    let (ok, detail) = f();
    let s = t.elapsed().as_secs_f64();
    (ok && s < limit_s, format!("{detail}; {s:.1}s (limit {limit_s}s)"))
}

fn autodiff() -> (bool, String) {
    timed(120.0, || checks(&["tensor_autodiff.op_gradients", "reconstruct.stage2_gradient"], 100))
}

fn marginals() -> (bool, String) {
    timed(60.0, || checks(&["diffusion.forward_marginals"], 100))
}

fn ridge() -> (bool, String) {
    timed(60.0, || checks(&["decode.planted_recovery", "decode.topk_oracle", "decode.mask_is_selection"], 100))
}

fn structure(exp: &Experiment) -> (bool, String) {
    let (ok, detail) = checks(&["reconstruct.structure_loss_oracle"], 100);
    let enc = &exp.models.encoder;
    let mut worst = 0.0f32;
    for &i in &exp.ds.test {
        let img = neurosim::render(&exp.ds.scenes[i]);
        let own: Vec<TapTarget> = enc.image_features(&img).unwrap().taps.into_iter().map(TapTarget::dense).collect();
        let tape = Tape::new();
        let vars = enc.params.bind(&tape, false);
        let x = tape.constant(img.reshaped(vec![1, 32, 32, 3]).unwrap());
        let out = enc.image_var(&vars, x, true).unwrap();
        let loss = structure_loss(&out.taps, &own).unwrap().value().item();
        worst = worst.max(loss.abs());
    }
    (ok && worst == 0.0, format!("{detail}; own-tap loss max {worst}"))
}

fn efficacy(exp: &Experiment) -> (bool, String) {
    let mut items = 0;
    let mut improved = 0;
    let mut exact = 0;
    for run in &exp.runs {
        for v in [Variant::Full, Variant::WithoutZ] {
            let m = run.variant(v).unwrap().means(run.subject);
            items += m.count;
            improved += m.improved;
            exact += m.best_is_minimum;
        }
    }
    let frac = improved as f64 / items as f64;
    (
        frac >= 0.95 && exact == items && exp.runs.len() >= 3 && exp.seconds < 900.0,
        format!(
            "{improved}/{items} items improved ({:.1}%), best = minimum on {exact}/{items}, {} seeds, pipeline {:.0}s (limit 900s)",
            100.0 * frac,
            exp.runs.len(),
            exp.seconds
        ),
    )
}

fn ordering(exp: &Experiment) -> (bool, String) {
    let r = &exp.report;
    let (full, wc, wz) = (
        r.variant(Variant::Full).unwrap(),
        r.variant(Variant::WithoutControl).unwrap(),
        r.variant(Variant::WithoutZ).unwrap(),
    );
    let fmt = |e: &mindkit::suite::Estimate| format!("{:.4}±{:.4}", e.mean, e.se);
    let ok = full.seeds.len() >= 3
        && full.ssim.above(&wc.ssim)
        && full.pcc.above(&wz.pcc)
        && full.clip_cosine.above(&wc.clip_cosine);
    (
        ok,
        format!(
            "SSIM {} vs {} (without_control); PCC {} vs {} (without_z); CLIP {} vs {} (without_control); {} seeds",
            fmt(&full.ssim),
            fmt(&wc.ssim),
            fmt(&full.pcc),
            fmt(&wz.pcc),
            fmt(&full.clip_cosine),
            fmt(&wc.clip_cosine),
            full.seeds.len()
        ),
    )
}

fn random_z_loss(exp: &Experiment) -> (bool, String) {
    let r = &exp.report;
    let (full, wz) = (r.variant(Variant::Full).unwrap(), r.variant(Variant::WithoutZ).unwrap());
    (
        wz.final_loss.above(&full.final_loss),
        format!(
            "final structure loss {:.3}±{:.3} (without_z) vs {:.3}±{:.3} (full)",
            wz.final_loss.mean, wz.final_loss.se, full.final_loss.mean, full.final_loss.se
        ),
    )
}

fn metric_identities() -> (bool, String) {
    let (ok, detail) = checks(&["metrics.self_similarity", "metrics.pcc_oracle", "metrics.symmetric"], 100);
    let x = Tensor::uniform(vec![32, 32, 3], 0.0, 1.0, &mut mindkit::rng::stream(1, "acceptance", 0));
    let y = x.map(|v| 0.4 * v + 0.3);
    let ssim = metrics::ssim(&x, &x).unwrap();
    let pcc = metrics::pixel_correlation(&x, &y).unwrap();
    let ok = ok && ssim == 1.0 && (pcc - 1.0).abs() <= 1e-6;
    (ok, format!("{detail}; ssim(x,x)={ssim}, pcc(x, 0.4x+0.3)={pcc}"))
}

fn determinism() -> (bool, String) {
    checks(&["cli_orchestrator.pipeline_reproducible"], 100)
}

fn subjects(exp: &Experiment) -> (bool, String) {
    let ok = exp.report.subjects.len() == 4 && exp.report.subjects.iter().all(|s| s.full_pcc > s.shuffled_pcc);
    let parts: Vec<String> = exp
        .report
        .subjects
        .iter()
        .map(|s| format!("{}: {:.3} vs {:.3}", s.subject, s.full_pcc, s.shuffled_pcc))
        .collect();
    (ok, format!("PCC vs shuffled per subject: {}", parts.join(", ")))
}

#[test]
fn acceptance_criteria() {
    let exp = experiment();
    let mut verdicts = Vec::new();
    let mut add = |id, name, (passed, detail): (bool, String)| {
        verdicts.push(Verdict { id, name, passed, detail });
    };
    add(1, "autodiff gradients", autodiff());
    add(2, "forward diffusion marginals", marginals());
    add(3, "ridge oracle", ridge());
    add(4, "structure loss oracle", structure(exp));
    add(5, "refinement efficacy", efficacy(exp));
    add(6, "ablation ordering", ordering(exp));
    add(7, "random latent ends higher", random_z_loss(exp));
    add(8, "metric identities", metric_identities());
    add(9, "pipeline determinism", determinism());
    add(10, "every subject above chance", subjects(exp));
    for v in &verdicts {
        line(&format!(
            "{} criterion {:>2} {}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        ));
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}

#[test]
fn trained_models_meet_their_postconditions() {
    let exp = experiment();
    let held = neurosim::build_dataset(1, 100, 1, 1234, exp.ds.sim.clone()).unwrap();
    let ids = held.test.clone();
    let images = held.images(&ids).unwrap();
    let captions = held.captions(&ids);

    let ae = &exp.models.autoencoder;
    let recon = ae.decode_batch(&ae.encode_batch(&images).unwrap()).unwrap();
    let mean_psnr = ids
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let pick = |t: &Tensor| mindkit::nn::take_rows(t, &[k]).unwrap();
            psnr(&pick(&recon), &pick(&images)).unwrap()
        })
        .sum::<f64>()
        / ids.len() as f64;
    let ae_curve = &exp.curves.autoencoder;
    let ae_ratio = ae_curve.last().unwrap() / ae_curve[0];

    let enc = &exp.models.encoder;
    let retrieval = retrieval_accuracy(enc, &images, &captions).unwrap();
    let sims = similarity_matrix(enc, &images, &captions).unwrap();
    let n = ids.len();
    let matched_wins = (0..n)
        .filter(|&i| {
            let row = &sims[i * n..(i + 1) * n];
            let others = (row.iter().sum::<f64>() - row[i]) / (n - 1) as f64;
            row[i] > others
        })
        .count() as f64
        / n as f64;

    let mut stage1_pcc = Vec::new();
    let mut shuffled = Vec::new();
    for run in &exp.runs {
        let recons = &run.variant(Variant::Full).unwrap().recons;
        for (k, r) in recons.iter().enumerate() {
            let truth = neurosim::render(&exp.ds.scenes[r.item]);
            let other = neurosim::render(&exp.ds.scenes[recons[(k + 1) % recons.len()].item]);
            stage1_pcc.push(metrics::pixel_correlation(&r.stage1, &truth).unwrap());
            shuffled.push(metrics::pixel_correlation(&r.stage1, &other).unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let dn = &exp.curves.denoiser;
    let cv: Vec<String> = exp.runs.iter().map(|r| format!("{:.3?}", r.cv_r)).collect();

    line(&format!("autoencoder: mean PSNR {mean_psnr:.2} dB, loss ratio {ae_ratio:.3}"));
    line(&format!("encoder: retrieval {retrieval:.3} (chance {:.3}), matched above mismatched {matched_wins:.3}", 1.0 / n as f64));
    line(&format!("denoiser: loss {:.4} -> {:.4}", dn[0], dn.last().unwrap()));
    line(&format!("stage 1: PCC {:.3} vs shuffled {:.3}", mean(&stage1_pcc), mean(&shuffled)));
    line(&format!("decoder CV r per subject: {}", cv.join(" ")));
    line(&format!("features: {} scenes, {} dims", exp.table.scenes.len(), exp.table.layout().total()));

    assert!(mean_psnr >= 20.0, "PSNR {mean_psnr}");
    assert!(ae_ratio <= 0.5, "autoencoder loss ratio {ae_ratio}");
    assert!(retrieval > 5.0 / n as f64, "retrieval {retrieval}");
    assert!(matched_wins >= 0.9, "matched above mismatched on {matched_wins}");
    assert!(dn.last().unwrap() < &dn[0]);
    assert!(mean(&stage1_pcc) > mean(&shuffled));
}
