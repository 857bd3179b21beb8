use candle_core::{DType, Device, Tensor, Var};

use super::*;
use crate::autoenc::{NetConfig, TokenizerCheckpoint};
use crate::quantizer::usage_distribution;
use crate::rng;

fn proxy(dtype: DType, seed: u64) -> ProxyNet {
    let cfg = ProxyConfig {
        image_size: 16,
        channels: [4, 6, 8, 8, 10],
        classes: 5,
    };
    let mut ck = ProxyCheckpoint::init(&cfg, seed, dtype).unwrap();
    ck.frozen = true;
    ck.frozen_network().unwrap()
}

fn images(b: usize, size: usize, seed: u64, dtype: DType) -> Tensor {
    let mut r = rng::stream(seed, "images");
    let data: Vec<f64> = (0..b * 3 * size * size)
        .map(|_| rand::Rng::random::<f64>(&mut r) * 2.0 - 1.0)
        .collect();
    Tensor::from_vec(data, (b, 3, size, size), &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

fn val(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn proxy_stage_resolutions_strictly_decrease() {
    let net = proxy(DType::F32, 1);
    let f = net.features(&images(2, 16, 0, DType::F32)).unwrap();
    let sizes: Vec<usize> = f.stages.iter().map(|s| s.dim(2).unwrap()).collect();
    assert_eq!(sizes, net.config().stage_sizes().to_vec());
    assert!(sizes.windows(2).all(|w| w[1] < w[0]), "{sizes:?}");
    assert_eq!(f.logit.dims(), &[2, 5]);
    assert_eq!(f.pooled().unwrap().dims(), &[2, 10]);
}

#[test]
fn proxy_config_rejects_small_images() {
    let cfg = ProxyConfig {
        image_size: 8,
        ..ProxyConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn unfrozen_proxy_is_refused() {
    let ck = ProxyCheckpoint::init(&ProxyConfig::default(), 0, DType::F32).unwrap();
    assert!(matches!(ck.frozen_network(), Err(Error::Contract(_))));
}

#[test]
fn proxy_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = ProxyCheckpoint::init(&ProxyConfig::default(), 4, DType::F32).unwrap();
    ck.accuracy = 0.875;
    ck.frozen = true;
    ck.save(dir.path()).unwrap();
    let back = ProxyCheckpoint::load(dir.path()).unwrap();
    assert_eq!(back.digest().unwrap(), ck.digest().unwrap());
    assert!(back.frozen);
    assert!((back.accuracy - 0.875).abs() < 1e-9);
}

#[test]
fn frozen_proxy_gets_no_gradient() {
    let cfg = ProxyConfig {
        image_size: 16,
        channels: [4, 4, 4, 4, 4],
        classes: 3,
    };
    let mut ck = ProxyCheckpoint::init(&cfg, 2, DType::F32).unwrap();
    ck.frozen = true;
    let before = ck.digest().unwrap();
    let net = ck.frozen_network().unwrap();
    let xv = Var::from_tensor(&images(1, 16, 1, DType::F32)).unwrap();
    let loss = perceptual_loss(&net, &images(1, 16, 2, DType::F32), xv.as_tensor(), &LOW_TAPS).unwrap();
    let grads = loss.backward().unwrap();
    assert!(grads.get(xv.as_tensor()).is_some());
    for (_, v) in ck.store.vars() {
        assert!(grads.get(v.as_tensor()).is_none());
    }
    assert_eq!(ck.digest().unwrap(), before);
}

fn synthetic(stage_value: f64, dtype: DType) -> ProxyFeatures {
    let d = Device::Cpu;
    let stages = (0..5)
        .map(|_| Tensor::full(stage_value, (1, 3, 2, 2), &d).unwrap().to_dtype(dtype).unwrap())
        .collect();
    ProxyFeatures {
        stages,
        logit: Tensor::zeros((1, 4), dtype, &d).unwrap(),
    }
}

#[test]
fn single_tap_all_ones_difference_is_one() {
    // ||1||^2 over a 2x2x3 map is 12; normalised by H W C = 12
    let a = synthetic(0.0, DType::F64);
    let b = synthetic(1.0, DType::F64);
    let l = perceptual_from_features(&a, &b, &[Tap::Stage3]).unwrap();
    assert_eq!(val(&l), 1.0);
    let l = perceptual_from_features(&a, &b, &[Tap::Stage3, Tap::Logit]).unwrap();
    assert_eq!(val(&l), 1.0);
    assert!(matches!(perceptual_from_features(&a, &b, &[]), Err(Error::Config(_))));
}

#[test]
fn tap_sets() {
    assert_eq!(SEM_TAPS, [Tap::Stage5, Tap::Logit]);
    assert_eq!(LOW_TAPS.len(), 5);
    assert!(!LOW_TAPS.contains(&Tap::Logit));
    let v = tap_variants();
    assert_eq!(v.len(), 7);
    assert_eq!(v[5].1, SEM_TAPS.to_vec());
    assert_eq!("stage4".parse::<Tap>().unwrap(), Tap::Stage4);
    assert!("relu5_3".parse::<Tap>().is_err());
}

#[test]
fn identical_images_have_zero_perceptual_loss() {
    let net = proxy(DType::F32, 3);
    let x = images(2, 16, 5, DType::F32);
    for alpha in [0.0, 0.3, 1.0] {
        assert_eq!(val(&alpha_perceptual(&net, &x, &x, alpha).unwrap()), 0.0);
    }
}

#[test]
fn alpha_endpoints_and_linearity() {
    let net = proxy(DType::F64, 4);
    for i in 0..10 {
        let x = images(1, 16, 100 + i, DType::F64);
        let y = images(1, 16, 200 + i, DType::F64);
        let low = val(&perceptual_loss(&net, &x, &y, &LOW_TAPS).unwrap());
        let sem = val(&perceptual_loss(&net, &x, &y, &SEM_TAPS).unwrap());
        assert_eq!(val(&alpha_perceptual(&net, &x, &y, 0.0).unwrap()), low);
        assert_eq!(val(&alpha_perceptual(&net, &x, &y, 1.0).unwrap()), sem);
        let mid = val(&alpha_perceptual(&net, &x, &y, 0.5).unwrap());
        assert!((mid - 0.5 * (low + sem)).abs() <= 1e-7);
        let a = 0.37;
        let v = val(&alpha_perceptual(&net, &x, &y, a).unwrap());
        assert!((v - (a * sem + (1.0 - a) * low)).abs() <= 1e-6);
    }
    let x = images(1, 16, 0, DType::F64);
    assert!(matches!(alpha_perceptual(&net, &x, &x, 1.5), Err(Error::Config(_))));
    assert!(matches!(alpha_perceptual(&net, &x, &x, -0.1), Err(Error::Config(_))));
}

#[test]
fn alpha_perceptual_gradient_matches_finite_differences() {
    let net = proxy(DType::F64, 5);
    let x = images(1, 16, 6, DType::F64);
    let y0 = images(1, 16, 7, DType::F64);
    for alpha in [0.0, 0.5, 1.0] {
        let yv = Var::from_tensor(&y0).unwrap();
        let loss = alpha_perceptual(&net, &x, yv.as_tensor(), alpha).unwrap();
        let grad: Vec<f64> = loss
            .backward()
            .unwrap()
            .get(yv.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let flat: Vec<f64> = y0.flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-6;
        for &i in &[3usize, 150, 401, 767] {
            let eval = |d: f64| {
                let mut v = flat.clone();
                v[i] += d;
                let y = Tensor::from_vec(v, y0.dims(), &Device::Cpu).unwrap();
                val(&alpha_perceptual(&net, &x, &y, alpha).unwrap())
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let scale = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / scale <= 1e-3, "alpha {alpha} coord {i}: fd {fd} vs {}", grad[i]);
        }
    }
}

#[test]
fn hinge_values() {
    let d = Device::Cpu;
    let two = Tensor::full(2f32, (2, 1, 3, 3), &d).unwrap();
    let minus_two = Tensor::full(-2f32, (2, 1, 3, 3), &d).unwrap();
    assert_eq!(val(&hinge_d_loss(&two, &minus_two).unwrap()), 0.0);
    let zero = Tensor::zeros((2, 1, 3, 3), DType::F32, &d).unwrap();
    assert_eq!(val(&hinge_g_loss(&zero).unwrap()), 0.0);
    assert_eq!(val(&hinge_d_loss(&zero, &zero).unwrap()), 2.0);
    assert_eq!(val(&hinge_g_loss(&two).unwrap()), -2.0);
}

struct Setup {
    ck: TokenizerCheckpoint,
    net: ProxyNet,
    x: Tensor,
}

fn setup(dtype: DType) -> Setup {
    let cfg = NetConfig {
        image_size: 16,
        compression: 2,
        base_channels: 8,
        channel_multipliers: vec![1, 1],
        n_z: 4,
        codebook_size: 8,
        norm_groups: 4,
        attention_levels: vec![1],
        attention_window: 2,
        disc_channels: 4,
        ..NetConfig::default()
    };
    let mut ck = TokenizerCheckpoint::init(&cfg, 8).unwrap();
    if dtype == DType::F64 {
        for store in [&mut ck.encoder, &mut ck.decoder] {
            let mut s64 = crate::params::VarStore::new(8, DType::F64);
            s64.copy_from(store, "", "").unwrap();
            *store = s64;
        }
    }
    Setup {
        ck,
        net: proxy(dtype, 9),
        x: images(2, 16, 10, dtype),
    }
}

#[test]
fn phase1_report_decomposes() {
    let mut s = setup(DType::F64);
    let tok = s.ck.tokenizer().unwrap();
    let out = tok.quantize(&s.x).unwrap();
    let x_hat = tok.decoder.forward(&out.decoder_input).unwrap();
    let usage = usage_distribution(&out.latent, &tok.quantizer.codebook).unwrap();
    let fake = Tensor::full(0.3f64, (2, 1, 4, 4), &Device::Cpu).unwrap();
    let cfg = LossConfig::phase1();
    let inputs = LossInputs {
        x: &s.x,
        x_hat: &x_hat,
        latent: Some(&out.latent),
        quant: Some(&out.quant),
        usage: Some(&usage),
        disc_fake: Some(&fake),
        encoder_frozen: false,
    };
    let a = assemble_loss(Phase::Phase1, &s.net, inputs, &cfg).unwrap();
    let r = a.report;
    assert!((r.total - r.recomposed()).abs() <= 1e-6);
    assert!((r.adversarial_g + 0.3).abs() < 1e-12);
    assert!(r.entropy_term < 0.0);
    assert!(r.codebook_term > 0.0);
    assert!((r.commitment_term - 0.25 * r.codebook_term).abs() <= 1e-9);
    let expected_perc = val(&alpha_perceptual(&s.net, &s.x, &x_hat, 1.0).unwrap());
    assert_eq!(r.perceptual, expected_perc);

    // switching the adversarial weight off removes exactly its share
    let off = LossConfig {
        lambda_adv: 0.0,
        ..cfg.clone()
    };
    let b = assemble_loss(Phase::Phase1, &s.net, inputs, &off).unwrap().report;
    assert_eq!(b.adversarial_g, 0.0);
    assert!((b.total - (r.total - 0.1 * r.adversarial_g)).abs() <= 1e-9);

    let missing = LossInputs { usage: None, ..inputs };
    assert!(matches!(
        assemble_loss(Phase::Phase1, &s.net, missing, &cfg),
        Err(Error::Contract(_))
    ));
}

#[test]
fn phase2_requires_frozen_encoder_and_blocks_its_gradient() {
    let s = setup(DType::F32);
    let mut p2 = s.ck.begin_phase2(1).unwrap();
    let tok = p2.tokenizer().unwrap();
    let out = tok.quantize(&s.x).unwrap();
    let x_hat = tok.decoder.forward(&out.decoder_input).unwrap();
    let cfg = LossConfig::phase2();
    let inputs = LossInputs {
        x: &s.x,
        x_hat: &x_hat,
        latent: None,
        quant: None,
        usage: None,
        disc_fake: None,
        encoder_frozen: false,
    };
    assert!(matches!(
        assemble_loss(Phase::Phase2, &s.net, inputs, &cfg),
        Err(Error::Contract(_))
    ));
    let frozen = LossInputs {
        encoder_frozen: true,
        ..inputs
    };
    let a = assemble_loss(Phase::Phase2, &s.net, frozen, &cfg).unwrap();
    let r = a.report;
    assert_eq!((r.codebook_term, r.commitment_term, r.entropy_term), (0.0, 0.0, 0.0));
    assert_eq!(
        r.perceptual,
        val(&alpha_perceptual(&s.net, &s.x, &x_hat, 0.0).unwrap())
    );
    let grads = a.total.backward().unwrap();
    for (name, v) in p2.encoder.vars() {
        if let Some(g) = grads.get(v.as_tensor()) {
            let m = val(&g.abs().unwrap().max_all().unwrap());
            assert_eq!(m, 0.0, "{name}");
        }
    }
    let dec_grads = p2
        .decoder
        .vars()
        .filter(|(_, v)| grads.get(v.as_tensor()).is_some())
        .count();
    assert!(dec_grads > 0);
}
