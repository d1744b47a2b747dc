//! Acceptance suite: one test per criterion, self-contained on synthetic
//! data. Each test prints a `criterion N PASS` line (visible with
//! `cargo test --test acceptance -- --nocapture`); the per-test ok/FAILED
//! line from the harness is the machine-readable verdict.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sslse_core::audio::{self, AudioBuffer};
use sslse_core::checkpoint::{Checkpoint, CheckpointError};
use sslse_core::config::RunConfig;
use sslse_core::dsp::{self, StftConfig};
use sslse_core::metrics::{self, MaskSource};
use sslse_core::mixsim::{self, MixtureRecipe, PairEntry, PairedManifest};
use sslse_core::models::{BackboneConfig, BindMode};
use sslse_core::objectives::{
    classification_loss, classification_probabilities, regression_loss, ClassificationHead,
    MaskSpec, RegressionHead,
};
use sslse_core::synth;
use sslse_core::tensor::{Graph, ParamStore};
use sslse_core::training::{self, EnhancementModel, FinetuneConfig, PretrainConfig};
use sslse_core::verify::{run_gradcheck, GRADCHECK_TOLERANCE};
use sslse_core::{derive_seed, SAMPLE_RATE};

/// Mixtures pinned at one SNR with full overlap, for suites that need a
/// controlled operating point.
fn fixed_snr_suite(dir: &Path, count: usize, snr_db: f64, seed: u64) -> PairedManifest {
    std::fs::create_dir_all(dir).unwrap();
    let mut pairs = Vec::new();
    for k in 0..count {
        let clean = synth::speech_clip(1.0, derive_seed(seed, 2 * k as u64));
        let noise = synth::noise_clip(1.0, derive_seed(seed, 2 * k as u64 + 1));
        let recipe = MixtureRecipe {
            clean_id: "c".into(),
            noise_id: "n".into(),
            snr_db,
            noise_crop_start_s: 0.0,
            noise_crop_len_s: 1.0,
            mix_start_s: 0.0,
            seed,
        };
        let noisy = mixsim::mix(&clean, &noise, &recipe).unwrap();
        let noisy_path = format!("noisy_{k:04}.wav");
        let clean_path = format!("clean_{k:04}.wav");
        audio::write_wav(&dir.join(&noisy_path), &noisy).unwrap();
        audio::write_wav(&dir.join(&clean_path), &clean).unwrap();
        pairs.push(PairEntry {
            pair_id: format!("p{k:04}"),
            noisy_path: noisy_path.into(),
            clean_path: clean_path.into(),
            duration_s: 1.0,
        });
    }
    PairedManifest {
        root: dir.to_path_buf(),
        pairs,
    }
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig::small()
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let report = run_gradcheck(20, 20_240_817).expect("gradcheck runs");
    for r in &report.reports {
        assert!(
            r.max_rel_err < GRADCHECK_TOLERANCE,
            "{} rel err {}",
            r.name,
            r.max_rel_err
        );
    }
    let names: Vec<&str> = report.reports.iter().map(|r| r.name.as_str()).collect();
    for required in [
        "composite.classification_loss",
        "composite.regression_loss",
        "composite.restoration_loss",
        "composite.backbone",
        "composite.enhancement_head",
    ] {
        assert!(names.contains(&required), "missing composite {required}");
    }

    // The CLI front door must agree: exit 0 and a PASS line.
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_sslse"))
        .args(["gradcheck", "--instances", "5"])
        .output()
        .expect("gradcheck binary runs");
    assert!(out.status.success(), "gradcheck CLI exited nonzero");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "no PASS line in: {stdout}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2 min");
    println!(
        "criterion 1 PASS: gradient integrity, max rel err {:.3e} over {} groups in {elapsed:?}",
        report.max_rel_err,
        report.reports.len()
    );
}

#[test]
fn criterion_2_masked_only_locality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2222);
    let (frames, dm, classes, out_dim) = (12usize, 10usize, 6usize, 7usize);

    let mut store = ParamStore::<f64>::new();
    let cls = ClassificationHead::new(dm, 8, classes, "cls", &mut store, &mut rng).unwrap();
    let reg = RegressionHead::new(dm, out_dim, "reg", &mut store, &mut rng).unwrap();

    for instance in 0..100 {
        let h = Array2::from_shape_fn((frames, dm), |_| rng.random::<f64>() - 0.5);
        let t = Array2::from_shape_fn((frames, out_dim), |_| rng.random::<f64>() - 0.5);
        let z: Vec<usize> = (0..frames).map(|_| rng.random_range(0..classes)).collect();
        let mut masked: Vec<usize> = (0..frames).filter(|_| rng.random::<f64>() < 0.4).collect();
        if masked.is_empty() {
            masked.push(rng.random_range(0..frames));
        }
        let mask = MaskSpec {
            masked_indices: masked.clone(),
            span_length: 1,
            start_prob: 0.4,
        };

        let eval = |h: &Array2<f64>, t: &Array2<f64>| -> (u64, u64) {
            let mut g = Graph::<f64>::new();
            let bc = cls.bind(&mut g, &store, BindMode::Frozen);
            let br = reg.bind(&mut g, &store, BindMode::Frozen);
            let hv = g.input(h.clone().into_dyn());
            let tv = g.input(t.clone().into_dyn());
            let lc = classification_loss(&mut g, &cls, &bc, hv, &z, &mask).unwrap();
            let lr = regression_loss(&mut g, &reg, &br, hv, tv, &mask).unwrap();
            (g.scalar(lc).to_bits(), g.scalar(lr).to_bits())
        };

        let base = eval(&h, &t);
        let mut h_pert = h.clone();
        let mut t_pert = t.clone();
        for row in 0..frames {
            if !masked.contains(&row) {
                for c in 0..dm {
                    h_pert[(row, c)] = rng.random::<f64>() * 100.0 - 50.0;
                }
                for c in 0..out_dim {
                    t_pert[(row, c)] = rng.random::<f64>() * 100.0 - 50.0;
                }
            }
        }
        let perturbed = eval(&h_pert, &t_pert);
        assert_eq!(base, perturbed, "instance {instance}: losses changed at the bit level");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}, budget 30 s");
    println!("criterion 2 PASS: masked-only locality bit-exact over 100 instances in {elapsed:?}");
}

#[test]
fn criterion_3_classification_distribution_fidelity() {
    // Probabilities sum to one.
    let mut rng = ChaCha8Rng::seed_from_u64(3333);
    let mut store = ParamStore::<f64>::new();
    let head = ClassificationHead::new(12, 9, 7, "cls", &mut store, &mut rng).unwrap();
    let mut g = Graph::<f64>::new();
    let bind = head.bind(&mut g, &store, BindMode::Frozen);
    let h = g.input(Array2::from_shape_fn((20, 12), |_| rng.random::<f64>() - 0.5).into_dyn());
    let probs = classification_probabilities(
        &mut g,
        bind.var(head.projection),
        bind.var(head.embeddings),
        head.temperature,
        h,
    )
    .unwrap();
    let m = g.value(probs).clone();
    let m2 = m.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    for row in m2.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }

    // Uniform similarities: loss is exactly ln C.
    for classes in [3usize, 5, 11] {
        let mut store = ParamStore::<f64>::new();
        let head =
            ClassificationHead::new(10, 6, classes, "cls", &mut store, &mut rng).unwrap();
        let emb = Array2::from_shape_fn((classes, 6), |(_, j)| 0.2 + 0.05 * j as f64);
        *store.value_mut(head.embeddings) = emb.into_dyn();
        let mut g = Graph::<f64>::new();
        let bind = head.bind(&mut g, &store, BindMode::Frozen);
        let h = g.input(Array2::from_shape_fn((5, 10), |_| rng.random::<f64>()).into_dyn());
        let mask = MaskSpec {
            masked_indices: vec![0, 2, 4],
            span_length: 1,
            start_prob: 0.5,
        };
        let z = vec![0usize; 5];
        let loss = classification_loss(&mut g, &head, &bind, h, &z, &mask).unwrap();
        assert!(
            (g.scalar(loss) - (classes as f64).ln()).abs() < 1e-9,
            "C={classes}"
        );
    }

    // Orthonormal alignment: closed form log(e^(1/tau) + C - 1) - 1/tau.
    for classes in [2usize, 4, 64] {
        let mut store = ParamStore::<f64>::new();
        let head =
            ClassificationHead::new(classes, classes, classes, "cls", &mut store, &mut rng)
                .unwrap();
        *store.value_mut(head.projection) = Array2::<f64>::eye(classes).into_dyn();
        *store.value_mut(head.embeddings) = Array2::<f64>::eye(classes).into_dyn();
        let frames = 8;
        let z: Vec<usize> = (0..frames).map(|t| t % classes).collect();
        let mut h_arr = Array2::<f64>::zeros((frames, classes));
        for (t, &c) in z.iter().enumerate() {
            h_arr[(t, c)] = 1.0;
        }
        let mut g = Graph::<f64>::new();
        let bind = head.bind(&mut g, &store, BindMode::Frozen);
        let h = g.input(h_arr.into_dyn());
        let mask = MaskSpec {
            masked_indices: (0..frames).collect(),
            span_length: 1,
            start_prob: 1.0,
        };
        let loss = classification_loss(&mut g, &head, &bind, h, &z, &mask).unwrap();
        let expected = (10f64.exp() + classes as f64 - 1.0).ln() - 10.0;
        assert!(
            (g.scalar(loss) - expected).abs() < 1e-9,
            "C={classes}: {} vs {expected}",
            g.scalar(loss)
        );
    }
    println!("criterion 3 PASS: distribution fidelity (sums, ln C, closed form for C in {{2,4,64}})");
}

#[test]
fn criterion_4_mixer_snr_exactness() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (speech, noise) = synth::generate_corpus(dir.path(), 6, 4, 1.0, 444).unwrap();
    // Cache the decoded clips once; recipes only reference them.
    let mut speech_bufs = std::collections::BTreeMap::new();
    for e in &speech.entries {
        speech_bufs.insert(e.clip_id.clone(), audio::read_wav(&speech.resolve(e)).unwrap());
    }
    let mut noise_bufs = std::collections::BTreeMap::new();
    for e in &noise.entries {
        noise_bufs.insert(e.clip_id.clone(), audio::read_wav(&noise.resolve(e)).unwrap());
    }

    let mut min_snr = f64::INFINITY;
    let mut max_snr = f64::NEG_INFINITY;
    for seed in 0..1000u64 {
        let recipe = mixsim::sample_recipe(seed, &speech, &noise).unwrap();
        assert!(recipe.snr_db >= -5.0 && recipe.snr_db <= 20.0, "bounds violated");
        min_snr = min_snr.min(recipe.snr_db);
        max_snr = max_snr.max(recipe.snr_db);
        let clean = &speech_bufs[&recipe.clean_id];
        let noise_buf = &noise_bufs[&recipe.noise_id];
        let noisy = mixsim::mix(clean, noise_buf, &recipe).unwrap();
        let geo = mixsim::recipe_geometry(clean, noise_buf, &recipe).unwrap();
        let measured = mixsim::measured_overlap_snr(clean, &noisy, geo);
        assert!(
            (measured - recipe.snr_db).abs() < 0.01,
            "seed {seed}: measured {measured} vs requested {}",
            recipe.snr_db
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget 1 min");
    println!(
        "criterion 4 PASS: 1000 recipes within 0.01 dB, snr range [{min_snr:.3}, {max_snr:.3}] in {elapsed:?}"
    );
}

#[test]
fn criterion_5_dsp_round_trip() {
    let start = Instant::now();
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5555);
    for case in 0..50 {
        let n = 2400 + (rng.random::<u32>() as usize) % 14000;
        let buf = AudioBuffer::new(
            (0..n).map(|_| 0.9 * (2.0 * rng.random::<f64>() - 1.0)).collect(),
        );
        let spec = dsp::stft(&buf, cfg).unwrap();
        let back = dsp::istft(&spec).unwrap();
        let rms = (buf.samples.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
        for i in spec.interior_samples() {
            assert!(
                (buf.samples[i] - back.samples[i]).abs() / rms < 1e-6,
                "case {case} sample {i}"
            );
        }
    }

    // Identity-mask enhancement reproduces the noisy input at the same
    // tolerance.
    let noisy = synth::speech_clip(1.0, 51);
    let enhanced =
        metrics::enhance_utterance::<f64>(&MaskSource::Identity, &noisy, None, cfg).unwrap();
    let spec = dsp::stft(&noisy, cfg).unwrap();
    let rms = (noisy.samples.iter().map(|s| s * s).sum::<f64>() / noisy.len() as f64).sqrt();
    for i in spec.interior_samples() {
        assert!((enhanced.samples[i] - noisy.samples[i]).abs() / rms < 1e-6);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}, budget 30 s");
    println!("criterion 5 PASS: 50 round trips + identity-mask enhancement < 1e-6 in {elapsed:?}");
}

#[test]
fn criterion_6_oracle_ordering() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixed_snr_suite(&dir.path().join("suite"), 100, 0.0, 6666);
    let report = metrics::evaluate::<f64>(
        &pairs,
        &MaskSource::Oracle,
        StftConfig::default(),
        0,
        0,
        4,
    )
    .unwrap();
    assert_eq!(report.rows.len(), 100);
    for row in &report.rows {
        assert!(
            row.sdr_oracle > row.sdr_noisy,
            "{}: oracle {} vs noisy {}",
            row.pair_id,
            row.sdr_oracle,
            row.sdr_noisy
        );
    }
    assert!(
        report.mean_sdr_oracle > report.mean_sdr_noisy + 5.0,
        "mean oracle {} vs mean noisy {}",
        report.mean_sdr_oracle,
        report.mean_sdr_noisy
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2 min");
    println!(
        "criterion 6 PASS: oracle {:.3} dB > noisy {:.3} dB (+{:.3} dB, every mixture) in {elapsed:?}",
        report.mean_sdr_oracle,
        report.mean_sdr_noisy,
        report.mean_sdr_oracle - report.mean_sdr_noisy
    );
}

#[test]
fn criterion_7_training_dynamics() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (speech, noise) = synth::generate_corpus(&dir.path().join("corpus"), 10, 6, 1.0, 777).unwrap();

    // Desk-scale pre-training with the regression objective.
    let pcfg = PretrainConfig {
        steps: 200,
        peak_lr: 5e-3,
        backbone: small_backbone(),
        proj_dim: 16,
        seed: 7,
        ..PretrainConfig::default()
    };
    let pre = training::pretrain::<f64>(&pcfg, &speech, None, &dir.path().join("pre")).unwrap();
    let first: f64 = pre.losses[..20].iter().sum::<f64>() / 20.0;
    let last: f64 = pre.losses[pre.losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(
        last < 0.5 * first,
        "pretrain loss only fell {first:.4} -> {last:.4}"
    );

    // Desk-scale fine-tuning on simulated pairs, evaluated on a held-out
    // 20-pair suite at 0 dB.
    let train_pairs =
        mixsim::simulate_corpus(&speech, &noise, 12, 7, &dir.path().join("train"), 2).unwrap();
    let eval_pairs = fixed_snr_suite(&dir.path().join("eval"), 20, 0.0, 778);
    let fcfg = FinetuneConfig {
        backbone_checkpoint: Some(pre.checkpoint_path.clone()),
        steps: 500,
        head_layers: 1,
        head_hidden: 32,
        peak_lr: 2e-3,
        seed: 8,
        ..FinetuneConfig::default()
    };
    let ft = training::finetune::<f64>(&fcfg, &train_pairs, &dir.path().join("ft")).unwrap();
    let f_first: f64 = ft.losses[..20].iter().sum::<f64>() / 20.0;
    let f_last: f64 = ft.losses[ft.losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(
        f_last < 0.7 * f_first,
        "restoration loss only fell {f_first:.5} -> {f_last:.5}"
    );

    let model = EnhancementModel::<f64>::from_checkpoint(&ft.checkpoint_path).unwrap();
    let report = metrics::evaluate::<f64>(
        &eval_pairs,
        &MaskSource::Model(&model),
        fcfg.stft,
        0,
        0,
        2,
    )
    .unwrap();
    assert!(
        report.mean_sdr_enhanced >= report.mean_sdr_noisy + 1.0,
        "enhanced {:.3} vs noisy {:.3}",
        report.mean_sdr_enhanced,
        report.mean_sdr_noisy
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 900, "took {elapsed:?}, budget 15 min");
    println!(
        "criterion 7 PASS: pretrain {:.1}% drop, finetune {:.1}% drop, SDR {:.3} -> {:.3} dB in {elapsed:?}",
        100.0 * (1.0 - last / first),
        100.0 * (1.0 - f_last / f_first),
        report.mean_sdr_noisy,
        report.mean_sdr_enhanced
    );
}

fn reproduce_config_file(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("repro.cfg");
    std::fs::write(
        &path,
        "data.synth_speech_clips = 6\n\
         data.synth_noise_clips = 4\n\
         data.synth_clip_seconds = 0.8\n\
         model.cnn_layers = 16x16x8,16x40x40\n\
         model.dim = 16\n\
         model.blocks = 2\n\
         model.heads = 2\n\
         model.ffn_dim = 24\n\
         model.rel_pos_buckets = 8\n\
         model.rel_pos_max_distance = 16\n\
         pretrain.proj_dim = 16\n\
         pretrain.quantizer_classes = 8\n\
         pretrain.quantizer_iters = 4\n\
         pretrain.lr = 5e-3\n\
         finetune.head_layers = 1\n\
         finetune.head_hidden = 24\n\
         finetune.lr = 2e-3\n\
         reproduce.pretrain_steps = 80\n\
         reproduce.finetune_steps = 160\n\
         reproduce.train_pairs = 8\n\
         reproduce.eval_pairs = 5\n",
    )
    .unwrap();
    path
}

#[test]
fn criterion_8_low_resource_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = reproduce_config_file(dir.path());
    let run = |out: &str| -> String {
        let out_dir = dir.path().join(out);
        let result = std::process::Command::new(env!("CARGO_BIN_EXE_sslse"))
            .args([
                "reproduce-condition",
                "low-speech",
                "--config",
                cfg_path.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .output()
            .expect("binary runs");
        assert!(
            result.status.success(),
            "reproduce-condition failed: {}",
            String::from_utf8_lossy(&result.stderr)
        );
        std::fs::read_to_string(out_dir.join("comparison.tsv")).unwrap()
    };

    let first = run("rc1");
    // The five comparison rows are present.
    for model in ["baseline", "ssl\t", "ssl-regression", "ssl-mixing", "ssl-both"] {
        assert!(first.contains(model), "missing row {model:?} in:\n{first}");
    }
    let data_rows: Vec<&str> = first
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("condition") && !l.starts_with("model"))
        .collect();
    assert_eq!(data_rows.len(), 5, "expected 5 comparison rows");

    // Reported, not hard-asserted: SSL >= baseline, or a documented
    // flakiness note in the table.
    let parse_mean = |row: &str| -> f64 { row.split('\t').nth(2).unwrap().parse().unwrap() };
    let baseline = parse_mean(data_rows[0]);
    let best_ssl = data_rows[1..]
        .iter()
        .map(|r| parse_mean(r))
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        best_ssl >= baseline || first.contains("#NOTE\tssl_below_baseline"),
        "SSL below baseline without a flakiness note:\n{first}"
    );

    // Hard-asserted: identical rerun.
    let second = run("rc2");
    assert_eq!(first, second, "reruns differ");
    println!(
        "criterion 8 PASS: 5-row comparison, baseline {baseline:.3} dB vs best SSL {best_ssl:.3} dB{}, reruns identical",
        if first.contains("#NOTE") { " (flakiness note present)" } else { "" }
    );
}

#[test]
fn criterion_9_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let (speech, noise) = synth::generate_corpus(&dir.path().join("c"), 4, 3, 0.8, 999).unwrap();

    // Byte-identical corpora.
    let sim_a = mixsim::simulate_corpus(&speech, &noise, 4, 17, &dir.path().join("sa"), 1).unwrap();
    let sim_b = mixsim::simulate_corpus(&speech, &noise, 4, 17, &dir.path().join("sb"), 3).unwrap();
    for (a, b) in sim_a.pairs.iter().zip(sim_b.pairs.iter()) {
        assert_eq!(
            std::fs::read(sim_a.resolve_noisy(a)).unwrap(),
            std::fs::read(sim_b.resolve_noisy(b)).unwrap()
        );
        assert_eq!(
            std::fs::read(sim_a.resolve_clean(a)).unwrap(),
            std::fs::read(sim_b.resolve_clean(b)).unwrap()
        );
    }
    assert_eq!(
        std::fs::read(dir.path().join("sa").join("recipes.tsv")).unwrap(),
        std::fs::read(dir.path().join("sb").join("recipes.tsv")).unwrap()
    );

    // Byte-identical loss logs in double precision, for both stages.
    let pcfg = PretrainConfig {
        steps: 12,
        noise_mixing: true,
        p_mix: 0.5,
        backbone: small_backbone(),
        proj_dim: 16,
        quantizer_classes: 8,
        quantizer_iters: 3,
        seed: 21,
        ..PretrainConfig::default()
    };
    let p1 = training::pretrain::<f64>(&pcfg, &speech, Some(&noise), &dir.path().join("p1")).unwrap();
    let p2 = training::pretrain::<f64>(&pcfg, &speech, Some(&noise), &dir.path().join("p2")).unwrap();
    assert_eq!(
        std::fs::read(&p1.loss_log_path).unwrap(),
        std::fs::read(&p2.loss_log_path).unwrap()
    );
    assert_eq!(
        std::fs::read(&p1.checkpoint_path).unwrap(),
        std::fs::read(&p2.checkpoint_path).unwrap()
    );

    let fcfg = FinetuneConfig {
        backbone_checkpoint: Some(p1.checkpoint_path.clone()),
        steps: 10,
        head_layers: 1,
        head_hidden: 12,
        seed: 22,
        ..FinetuneConfig::default()
    };
    let f1 = training::finetune::<f64>(&fcfg, &sim_a, &dir.path().join("f1")).unwrap();
    let f2 = training::finetune::<f64>(&fcfg, &sim_a, &dir.path().join("f2")).unwrap();
    assert_eq!(
        std::fs::read(&f1.loss_log_path).unwrap(),
        std::fs::read(&f2.loss_log_path).unwrap()
    );

    // Checkpoint persistence: bit-exact round trip, truncation rejected.
    let ckpt = Checkpoint::load(&f1.checkpoint_path).unwrap();
    let bytes = std::fs::read(&f1.checkpoint_path).unwrap();
    assert_eq!(ckpt.to_bytes(), bytes, "save -> load -> save not byte-identical");
    for cut in [4usize, bytes.len() / 2, bytes.len() - 3] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(
            matches!(
                err,
                CheckpointError::Truncated | CheckpointError::ChecksumMismatch
            ),
            "cut {cut}: unexpected {err:?}"
        );
    }

    // Loss log format: step TAB loss TAB lr TAB mixed{0|1}.
    let log = std::fs::read_to_string(&p1.loss_log_path).unwrap();
    for (i, line) in log.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4, "line {i}");
        assert_eq!(fields[0].parse::<usize>().unwrap(), i);
        fields[1].parse::<f64>().unwrap();
        fields[2].parse::<f64>().unwrap();
        assert!(fields[3] == "0" || fields[3] == "1");
    }

    println!("criterion 9 PASS: corpora, loss logs and checkpoints byte-stable; truncation rejected");
}

/// Supporting check for the report invariant used by criteria 6-8.
#[test]
fn report_aggregates_match_rows_through_the_file_format() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixed_snr_suite(&dir.path().join("s"), 6, 5.0, 4242);
    let report = metrics::evaluate::<f64>(
        &pairs,
        &MaskSource::Oracle,
        StftConfig::default(),
        7,
        9,
        2,
    )
    .unwrap();
    let path = dir.path().join("report.tsv");
    report.save(&path).unwrap();
    let loaded = metrics::MetricsReport::load(&path).unwrap();
    let mean: f64 = loaded.rows.iter().map(|r| r.sdr_enhanced).sum::<f64>() / loaded.rows.len() as f64;
    assert!((loaded.mean_sdr_enhanced - mean).abs() < 1e-9);
    assert_eq!(loaded.config_hash, 7);
    assert_eq!(loaded.dsp_hash, 9);
}

/// The config hash is embedded in run artifacts and differs across
/// configurations (supports the cross-run comparison guard).
#[test]
fn run_config_hash_is_stamped_into_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.set("dsp.hop", "200").unwrap();
    let a = cfg.dsp_hash();
    let b = RunConfig::default().dsp_hash();
    assert_ne!(a, b);
    // Paired with metrics::guard_same_dsp, evaluated reports refuse
    // cross-config comparison.
    let pairs = fixed_snr_suite(&dir.path().join("s"), 2, 3.0, 77);
    let r1 = metrics::evaluate::<f64>(&pairs, &MaskSource::Identity, StftConfig::default(), 1, a, 1)
        .unwrap();
    let r2 = metrics::evaluate::<f64>(&pairs, &MaskSource::Identity, StftConfig::default(), 1, b, 1)
        .unwrap();
    assert!(metrics::guard_same_dsp(&r1, &r2).is_err());
    assert!(metrics::guard_same_dsp(&r1, &r1).is_ok());
}

/// Frame-rate alignment invariants that the fine-tuning path relies on.
#[test]
fn duplication_factor_aligns_ssl_frames_with_stft_frames() {
    let cfg = StftConfig::default();
    let bb = BackboneConfig::default();
    assert_eq!(bb.total_stride() % cfg.hop, 0);
    let factor = bb.total_stride() / cfg.hop;
    assert_eq!(factor, 2);
    for seconds in [1.0f64, 0.7, 2.3] {
        let samples = (seconds * SAMPLE_RATE as f64) as usize;
        let stft_frames = cfg.num_frames(samples);
        let ssl_frames = bb.ssl_frames(samples).unwrap();
        let idx = dsp::duplication_indices(ssl_frames, factor, stft_frames).unwrap();
        assert_eq!(idx.len(), stft_frames);
    }
}
