use inpaint_core::bench::{self, Arm};
use inpaint_core::checkpoint;
use inpaint_core::codec::{downsample_mask, encode};
use inpaint_core::denoiser::{DenoiserConfig, DenoiserModel};
use inpaint_core::guidance::GuidanceSpec;
use inpaint_core::metrics::benchmark_suite;
use inpaint_core::noise_opt::PrinoConfig;
use inpaint_core::rewards::reward_align_value;
use inpaint_core::rng::stream;
use inpaint_core::scene::{training_corpus, COLOR_RGB};
use inpaint_core::schedule::NoiseSchedule;
use inpaint_core::tensor::Tensor;
use inpaint_core::train::{train, TrainConfig};
use std::path::Path;

fn reference_model(sched: &NoiseSchedule) -> DenoiserModel {
    let path = Path::new("/tmp/ref_model_v2.json");
    if path.exists() {
        return checkpoint::load(path).unwrap().0;
    }
    let corpus = training_corpus(4096);
    let mut model = DenoiserModel::init(DenoiserConfig::default(), 0);
    let cfg = TrainConfig { steps: 5000, lr: 0.02, log_every: 1000, ..Default::default() };
    let report = train(&mut model, &corpus, sched, &cfg, 0).unwrap();
    eprintln!("trained: initial {:.4} final {:.4}", report.initial_loss, report.final_loss);
    let meta = checkpoint::TrainMeta { seed: 0, train: cfg, schedule_t_total: 200, final_loss: report.final_loss };
    checkpoint::save(path, &model, &meta).unwrap();
    model
}

#[test]
fn arms_probe() {
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let model = reference_model(&sched);
    let suite: Vec<_> = benchmark_suite().into_iter().take(16).collect();

    // prompt sensitivity of the conditional prediction
    let s0 = &suite[0];
    let z_m = encode(&s0.masked_image());
    let mp = downsample_mask(&s0.mask, 4);
    let z_t = Tensor::randn(&[32, 32, 3], &mut stream(1, "sens", 0));
    let base = model.forward_value(&z_t, 150, &s0.prompt, &z_m, &mp).0;
    for alt_color in [0usize, 3, 6] {
        let mut p = s0.prompt.clone();
        p[0] = alt_color;
        let alt = model.forward_value(&z_t, 150, &p, &z_m, &mp).0;
        eprintln!("prompt color {} -> {}: d_eps norm {:.4} (eps norm {:.2})",
            s0.color_id, alt_color, alt.sub(&base).norm(), base.norm());
    }

    // r_c discrimination: ground truth vs wrong-color render
    let mut wins = 0;
    for s in &suite {
        let mp = downsample_mask(&s.mask, 4);
        let gt = reward_align_value(&model, &encode(&s.image), &s.prompt, &mp);
        let wrong_color = (s.color_id + 4) % 8;
        let rgb = COLOR_RGB[wrong_color];
        let recolored = Tensor::from_fn(&[32, 32, 3], |i| {
            let p = i / 3;
            let truth = COLOR_RGB[s.color_id];
            let d: f64 = (0..3).map(|c| (s.image.data()[p * 3 + c] - truth[c]).powi(2)).sum();
            if d < 1e-12 { rgb[i % 3] } else { s.image.data()[i] }
        });
        let wrong = reward_align_value(&model, &encode(&recolored), &s.prompt, &mp);
        if gt > wrong { wins += 1; }
    }
    eprintln!("r_c ground truth beats wrong color on {wins}/16 scenes");

    // arms at several guidance strengths, alignment + color diagnostics
    let pcfg = PrinoConfig::default();
    for mult in [25.0, 100.0, 400.0] {
        let spec = GuidanceSpec::default().with_gammas(mult * 4.0, mult, mult * 0.1);
        let results = bench::run_arms(&model, &suite, &Arm::ALL, &pcfg, &spec, &sched, 0).unwrap();
        eprint!("mult {mult}: ");
        for r in &results {
            // mean distance of in-mask pixels to the true color
            let mut cdist = 0.0;
            for (run, scene) in r.runs.iter().zip(suite.iter()) {
                let img = &run.run.image;
                let truth = COLOR_RGB[scene.color_id];
                let mut d = 0.0;
                let mut n = 0.0;
                for p in 0..32 * 32 {
                    if scene.mask.data()[p] > 0.5 {
                        d += (0..3).map(|c| (img.data()[p * 3 + c] - truth[c]).powi(2)).sum::<f64>();
                        n += 1.0;
                    }
                }
                cdist += d / n / 16.0;
            }
            eprint!("{} align {:.2} colordist {:.3} bound {:.4} | ",
                r.label, r.report.alignment_accuracy, cdist, r.report.boundary_energy);
        }
        eprintln!();
    }
}
