use super::*;
use crate::params::VarStore;
use candle_core::{Device, Var};
use proptest::prelude::*;

fn grid_from(values: &[f32], b: usize, c: usize, h: usize, w: usize) -> LatentGrid {
    // values given in raster (b, h, w, c) order
    let rows = Tensor::from_slice(values, (b * h * w, c), &Device::Cpu).unwrap();
    LatentGrid::from_rows(&rows, b, h, w).unwrap()
}

fn plain(codes: &[f32], k: usize, d: usize) -> Codebook {
    Codebook::new(Tensor::from_slice(codes, (k, d), &Device::Cpu).unwrap(), CodebookVariant::Plain).unwrap()
}

/// Exhaustive argmin in f64, first index wins.
fn brute_force(z: &[f32], codes: &[f32], d: usize) -> Vec<u32> {
    z.chunks(d)
        .map(|zi| {
            let mut best = (f64::INFINITY, 0u32);
            for (j, c) in codes.chunks(d).enumerate() {
                let dist: f64 = zi.iter().zip(c).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, j as u32);
                }
            }
            best.1
        })
        .collect()
}

#[test]
fn nearest_code_in_two_dimensions() {
    let cb = plain(&[0.0, 0.0, 1.0, 1.0], 2, 2);
    let q = quantize(&grid_from(&[0.2, 0.1], 1, 2, 1, 1), &cb).unwrap();
    assert_eq!(q.indices(), &[0]);
    assert_eq!(brute_force(&[0.2, 0.1], &[0.0, 0.0, 1.0, 1.0], 2), vec![0]);
}

#[test]
fn exact_code_maps_to_itself_bit_identically() {
    let codes: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
    let cb = plain(&codes, 6, 2);
    let z = [codes[6], codes[7]];
    let q = quantize(&grid_from(&z, 1, 2, 1, 1), &cb).unwrap();
    assert_eq!(q.indices(), &[3]);
    let got = q.values().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(got[0].to_bits(), codes[6].to_bits());
    assert_eq!(got[1].to_bits(), codes[7].to_bits());
}

#[test]
fn ties_go_to_lowest_index() {
    let cb = plain(&[1.0, 0.0, -1.0, 0.0, 0.0, 5.0], 3, 2);
    let q = quantize(&grid_from(&[0.0, 0.0], 1, 2, 1, 1), &cb).unwrap();
    assert_eq!(q.indices(), &[0]);
    // duplicate codes
    let cb = plain(&[3.0, 3.0, 1.0, 1.0, 1.0, 1.0], 3, 2);
    let q = quantize(&grid_from(&[0.9, 1.2], 1, 2, 1, 1), &cb).unwrap();
    assert_eq!(q.indices(), &[1]);
}

#[test]
fn quantized_values_equal_indexed_codes() {
    let codes: Vec<f32> = (0..40).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.1).collect();
    let cb = plain(&codes, 10, 4);
    let z: Vec<f32> = (0..2 * 3 * 3 * 4).map(|i| ((i * 5 % 11) as f32 - 5.0) * 0.12).collect();
    let g = grid_from(&z, 2, 4, 3, 3);
    let q = quantize(&g, &cb).unwrap();
    assert_eq!(q.indices(), brute_force(&z, &codes, 4).as_slice());
    let rows = LatentGrid::new(q.values().clone()).unwrap().rows().unwrap().to_vec2::<f32>().unwrap();
    for (row, &i) in rows.iter().zip(q.indices()) {
        assert_eq!(row.as_slice(), &codes[i as usize * 4..(i as usize + 1) * 4]);
    }
}

#[test]
fn dimension_mismatch_and_non_finite_are_errors() {
    let cb = plain(&[0.0, 0.0, 1.0, 1.0], 2, 2);
    let g = grid_from(&[0.0, 0.0, 0.0], 1, 3, 1, 1);
    assert!(matches!(quantize(&g, &cb), Err(Error::Config(_))));
    let g = grid_from(&[f32::NAN, 0.0], 1, 2, 1, 1);
    assert!(matches!(quantize(&g, &cb), Err(Error::Numeric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn quantize_matches_exhaustive_argmin(
        k in 1usize..20,
        d in 1usize..6,
        n in 1usize..12,
        seed in any::<u64>(),
    ) {
        let mut r = crate::rng::stream(seed, "q");
        let codes: Vec<f32> = (0..k * d).map(|_| (crate::rng::normal(&mut r)) as f32).collect();
        let z: Vec<f32> = (0..n * d).map(|_| (crate::rng::normal(&mut r)) as f32).collect();
        let q = quantize(&grid_from(&z, 1, d, 1, n), &plain(&codes, k, d)).unwrap();
        let expected = brute_force(&z, &codes, d);
        prop_assert_eq!(q.indices(), expected.as_slice());
    }
}

fn var_grid(values: &[f64], b: usize, c: usize, h: usize, w: usize) -> (Var, LatentGrid) {
    let t = Tensor::from_slice(values, (b, c, h, w), &Device::Cpu).unwrap();
    let v = Var::from_tensor(&t).unwrap();
    let g = LatentGrid::new(v.as_tensor().clone()).unwrap();
    (v, g)
}

#[test]
fn straight_through_forward_is_quantized_value() {
    let cb = plain(&[0.0, 0.5, -1.0, 2.0, 0.3, 0.3], 3, 2);
    let z: Vec<f32> = vec![0.1, -0.7, 1.9, 0.4, 0.2, 0.25, -0.9, 1.8];
    let g = LatentGrid::new(Tensor::from_slice(&z, (1, 2, 2, 2), &Device::Cpu).unwrap()).unwrap();
    let q = quantize(&g, &cb).unwrap();
    let st = straight_through(&g, &q).unwrap();
    let a = st.values().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let b = q.values().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn straight_through_has_identity_jacobian() {
    let codes = Tensor::from_slice(&[0.0f64, 0.5, -1.0, 2.0], (2, 2), &Device::Cpu).unwrap();
    let cb = Codebook::new(codes, CodebookVariant::Plain).unwrap();
    let (v, g) = var_grid(&[0.1, 0.4, -0.3, 0.9, 1.1, -0.2, 0.0, 0.7], 1, 2, 2, 2);
    let q = quantize(&g, &cb).unwrap();
    let st = straight_through(&g, &q).unwrap();
    let loss = st.values().sum_all().unwrap();
    let grads = loss.backward().unwrap();
    let dz = grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(dz.iter().all(|&x| x == 1.0));
}

#[test]
fn straight_through_shape_mismatch() {
    let cb = plain(&[0.0, 0.0, 1.0, 1.0], 2, 2);
    let g = grid_from(&[0.0, 0.0, 1.0, 1.0], 1, 2, 1, 2);
    let q = quantize(&g, &cb).unwrap();
    let other = grid_from(&[0.0, 0.0], 1, 2, 1, 1);
    assert!(matches!(straight_through(&other, &q), Err(Error::Shape(_))));
}

#[test]
fn scalar_vq_terms() {
    let (_, g) = var_grid(&[0.0], 1, 1, 1, 1);
    let cb = Codebook::new(Tensor::from_slice(&[1.0f64], (1, 1), &Device::Cpu).unwrap(), CodebookVariant::Plain).unwrap();
    let q = quantize(&g, &cb).unwrap();
    let (cbt, commit) = vq_latent_losses(&g, &q, DEFAULT_BETA).unwrap();
    assert_eq!(cbt.to_scalar::<f64>().unwrap(), 1.0);
    assert_eq!(commit.to_scalar::<f64>().unwrap(), 0.25);
}

#[test]
fn vq_terms_vanish_when_latent_is_a_code() {
    let cb = plain(&[0.25, -0.5, 1.0, 1.0], 2, 2);
    let g = grid_from(&[0.25, -0.5, 1.0, 1.0], 1, 2, 1, 2);
    let q = quantize(&g, &cb).unwrap();
    let (a, b) = vq_latent_losses(&g, &q, 0.25).unwrap();
    assert_eq!(a.to_scalar::<f32>().unwrap(), 0.0);
    assert_eq!(b.to_scalar::<f32>().unwrap(), 0.0);
    assert!(matches!(vq_latent_losses(&g, &q, -0.1), Err(Error::Config(_))));
}

/// Gradients (latent, codes) of a scalar built from the quantization stage.
fn routed_grads(f: impl Fn(&LatentGrid, &QuantizedGrid) -> Tensor, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = crate::rng::stream(seed, "route");
    let zs: Vec<f64> = (0..3 * 2 * 2).map(|_| crate::rng::normal(&mut r)).collect();
    let cs: Vec<f64> = (0..4 * 3).map(|_| crate::rng::normal(&mut r)).collect();
    let (zv, g) = var_grid(&zs, 1, 3, 2, 2);
    let cv = Var::from_tensor(&Tensor::from_slice(&cs, (4, 3), &Device::Cpu).unwrap()).unwrap();
    let cb = Codebook::new(cv.as_tensor().clone(), CodebookVariant::Plain).unwrap();
    let q = quantize(&g, &cb).unwrap();
    let grads = f(&g, &q).backward().unwrap();
    let get = |v: &Var, n: usize| {
        grads
            .get(v.as_tensor())
            .map(|t| t.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; n])
    };
    (get(&zv, 12), get(&cv, 12))
}

#[test]
fn stop_gradient_routing() {
    for seed in 0..20 {
        let (dz, dc) = routed_grads(|g, q| vq_latent_losses(g, q, 0.25).unwrap().0, seed);
        assert!(dz.iter().all(|&x| x == 0.0), "codebook term leaked into latent");
        assert!(dc.iter().any(|&x| x != 0.0));
        let (dz, dc) = routed_grads(|g, q| vq_latent_losses(g, q, 0.25).unwrap().1, seed);
        assert!(dc.iter().all(|&x| x == 0.0), "commitment term leaked into codes");
        assert!(dz.iter().any(|&x| x != 0.0));
    }
}

#[test]
fn uniform_usage_for_equidistant_codes() {
    // one latent at the origin, four codes on the unit circle
    let cb = plain(&[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0], 4, 2);
    let u = usage_distribution(&grid_from(&[0.0, 0.0], 1, 2, 1, 1), &cb).unwrap();
    let dbar = u.dbar.to_vec1::<f32>().unwrap();
    for p in dbar {
        assert!((p - 0.25).abs() < 1e-6);
    }
    assert!((u.entropy_value().unwrap() - 4f64.ln()).abs() < 1e-6);
    assert!((4f64.ln() - 1.3863).abs() < 1e-4);
}

#[test]
fn usage_collapses_to_one_hot_for_far_codes() {
    let cb = plain(&[0.0, 0.0, 100.0, 0.0, 0.0, 100.0], 3, 2);
    let u = usage_distribution(&grid_from(&[0.0, 0.0], 1, 2, 1, 1), &cb).unwrap();
    assert_eq!(u.dbar.to_vec1::<f32>().unwrap(), vec![1.0, 0.0, 0.0]);
    assert!(u.entropy_value().unwrap().abs() < 1e-12);
}

#[test]
fn soft_assignment_rows_are_distributions() {
    let mut r = crate::rng::stream(1, "rows");
    for k in [2usize, 5, 16] {
        let codes: Vec<f32> = (0..k * 3).map(|_| crate::rng::normal(&mut r) as f32).collect();
        let z: Vec<f32> = (0..3 * 7).map(|_| crate::rng::normal(&mut r) as f32).collect();
        let g = grid_from(&z, 1, 3, 1, 7);
        let cb = plain(&codes, k, 3);
        let d = soft_assignments(&g, &cb).unwrap().to_vec2::<f32>().unwrap();
        for row in d {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        let u = usage_distribution(&g, &cb).unwrap();
        let h = u.entropy_value().unwrap();
        assert!((u.dbar.sum_all().unwrap().to_scalar::<f32>().unwrap() - 1.0).abs() < 1e-6);
        assert!(h >= 0.0 && h <= (k as f64).ln() + 1e-6);
    }
}

#[test]
fn entropy_regularizer_values() {
    let cb = plain(&[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0], 4, 2);
    let u = usage_distribution(&grid_from(&[0.0, 0.0], 1, 2, 1, 1), &cb).unwrap();
    let t = entropy_regularizer(&u, 0.01, EntropySign::Maximize).unwrap().to_scalar::<f32>().unwrap();
    assert!((t as f64 - (-0.01 * 4f64.ln())).abs() < 1e-7);
    assert!((-0.01 * 4f64.ln() - (-0.013863)).abs() < 1e-6);
    let zero = entropy_regularizer(&u, 0.0, EntropySign::Maximize).unwrap().to_scalar::<f32>().unwrap();
    assert_eq!(zero, 0.0);
    let flipped = entropy_regularizer(&u, 0.01, EntropySign::Penalize).unwrap().to_scalar::<f32>().unwrap();
    assert_eq!(flipped, -t);

    let far = plain(&[0.0, 0.0, 100.0, 0.0], 2, 2);
    let u = usage_distribution(&grid_from(&[0.0, 0.0], 1, 2, 1, 1), &far).unwrap();
    let t = entropy_regularizer(&u, 0.01, EntropySign::Maximize).unwrap().to_scalar::<f32>().unwrap();
    assert!(t.abs() < 1e-12);
    assert!(entropy_regularizer(&u, -1.0, EntropySign::Maximize).is_err());
}

#[test]
fn entropy_step_spreads_usage() {
    for seed in 0..10u64 {
        let mut r = crate::rng::stream(seed, "ent");
        let zs: Vec<f64> = (0..2 * 6).map(|_| crate::rng::normal(&mut r) * 0.5).collect();
        let cs: Vec<f64> = (0..5 * 2).map(|_| crate::rng::normal(&mut r)).collect();
        let (zv, _) = var_grid(&zs, 1, 2, 1, 6);
        let cv = Var::from_tensor(&Tensor::from_slice(&cs, (5, 2), &Device::Cpu).unwrap()).unwrap();
        let eval = || {
            let g = LatentGrid::new(zv.as_tensor().clone()).unwrap();
            let cb = Codebook::new(cv.as_tensor().clone(), CodebookVariant::Plain).unwrap();
            usage_distribution(&g, &cb).unwrap()
        };
        let before = eval();
        let h0 = before.entropy_value().unwrap();
        assert!(h0 < 5f64.ln() - 1e-3, "already uniform");
        let term = entropy_regularizer(&before, 0.01, EntropySign::Maximize).unwrap();
        let grads = term.backward().unwrap();
        let lr = 1e-2;
        for v in [&zv, &cv] {
            let g = grads.get(v.as_tensor()).unwrap();
            v.set(&(v.as_tensor() - (g * lr).unwrap()).unwrap()).unwrap();
        }
        let h1 = eval().entropy_value().unwrap();
        assert!(h1 > h0, "seed {seed}: entropy {h0} -> {h1}");
    }
}

#[test]
fn usage_fraction() {
    let all: Vec<u32> = (0..8).collect();
    assert_eq!(codebook_usage([all.as_slice()], 8).unwrap(), 1.0);
    let only0 = vec![0u32; 64];
    assert_eq!(codebook_usage([only0.as_slice()], 1024).unwrap(), 1.0 / 1024.0);
    assert!(matches!(codebook_usage(std::iter::empty::<&[u32]>(), 8), Err(Error::Contract(_))));
    let mut a = UsageTally::new(4);
    a.record(&[0, 1]).unwrap();
    let mut b = UsageTally::new(4);
    b.record(&[3, 3]).unwrap();
    a.merge(&b).unwrap();
    assert_eq!(a.counts(), &[1, 1, 0, 2]);
    assert_eq!(a.fraction().unwrap(), 0.75);
    assert!(a.record(&[4]).is_err());
}

fn fn_quantizer(seed: u64) -> (VarStore, VectorQuantizer) {
    let mut vs = VarStore::new(seed, DType::F32);
    let vq = VectorQuantizer::new(&mut vs.scope("quant"), 16, 6, CodebookVariant::FactorizedNormed { proj_dim: 3 }).unwrap();
    (vs, vq)
}

#[test]
fn factorized_output_has_unit_norm() {
    let (_vs, vq) = fn_quantizer(3);
    let mut r = crate::rng::stream(0, "fn");
    let z: Vec<f32> = (0..2 * 6 * 2 * 2).map(|_| crate::rng::normal(&mut r) as f32).collect();
    let g = vq.prepare(&Tensor::from_slice(&z, (2, 6, 2, 2), &Device::Cpu).unwrap()).unwrap();
    for row in g.rows().unwrap().to_vec2::<f32>().unwrap() {
        let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    let codes = vq.codebook.codes().unwrap().to_vec2::<f32>().unwrap();
    for row in codes {
        let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

#[test]
fn factorized_index_is_scale_invariant() {
    let (_vs, vq) = fn_quantizer(4);
    let mut r = crate::rng::stream(1, "fn");
    for _ in 0..20 {
        let z: Vec<f32> = (0..6).map(|_| crate::rng::normal(&mut r) as f32).collect();
        let t = Tensor::from_slice(&z, (1, 6, 1, 1), &Device::Cpu).unwrap();
        // a bias-free projection keeps positive scaling equivariant
        let a = vq.forward(&t).unwrap().quant.indices().to_vec();
        let b = vq.forward(&(t * 5.0).unwrap()).unwrap().quant.indices().to_vec();
        assert_eq!(a, b);
    }
}

#[test]
fn factorized_zero_vector_is_rejected() {
    let mut vs = VarStore::new(0, DType::F32);
    let proj = Linear::no_bias(&mut vs.scope("p"), 4, 2).unwrap();
    let x = Tensor::zeros((1, 4), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(factorize_normalize(&x, &proj), Err(Error::Numeric(_))));
}

#[test]
fn renormalize_restores_unit_rows() {
    let mut vs = VarStore::new(0, DType::F32);
    let vq = VectorQuantizer::new(&mut vs.scope("quant"), 8, 4, CodebookVariant::FactorizedNormed { proj_dim: 2 }).unwrap();
    drop(vq);
    renormalize_codes(&vs, "quant.codes").unwrap();
    for row in vs.get("quant.codes").unwrap().as_tensor().to_vec2::<f32>().unwrap() {
        let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
