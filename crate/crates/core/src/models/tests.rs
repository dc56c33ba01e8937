use super::*;
use crate::envs::{env_reset, render};
use crate::math::{argmax, param_difference_check};
use proptest::prelude::*;
use rand::Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 8,
        hidden: 32,
        codebook_size: 16,
        task_embed_dim: 4,
        ..ModelConfig::default()
    }
}

fn model(variant: Variant, mode: LatentMode) -> LamModel {
    let mut env = EnvConfig::distractor_grid();
    env.n_tasks = 3;
    LamModel::new(variant, mode, small_config(), ModelShape::for_env(&env), 11).unwrap()
}

fn states(rows: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[rows, d], 1.0, &mut rng)
}

#[test]
fn encoder_shape_and_black_image() {
    let e = Encoder::new(32, 32, 1).unwrap();
    assert_eq!(e.state_dim(), 256);
    assert!(e.encode(&[0u8; 32 * 32 * 3]).unwrap().iter().all(|&x| x == 0.0));
    assert!(Encoder::new(30, 32, 1).is_err());
    assert!(e.encode(&[0u8; 10]).is_err());
}

#[test]
fn encoder_is_patch_local() {
    // a change inside one patch only moves that patch's code
    let e = Encoder::new(32, 32, 2).unwrap();
    let env = EnvConfig::distractor_grid();
    let img = render(&env_reset(&env, 3).unwrap());
    let mut other = img.data.clone();
    let (x, y) = (13, 21);
    other[(y * 32 + x) * 3] ^= 0x55;
    let (a, b) = (e.encode(&img.data).unwrap(), e.encode(&other).unwrap());
    let tile = (y / 8) * 4 + x / 8;
    for (i, (p, q)) in a.iter().zip(&b).enumerate() {
        if i / DIMS_PER_PATCH != tile {
            assert_eq!(p, q);
        }
    }
    assert_ne!(&a[tile * 16..tile * 16 + 16], &b[tile * 16..tile * 16 + 16]);
}

#[test]
fn projection_rows_are_orthonormal() {
    let p = orthonormal_rows(16, 192, 9);
    for i in 0..16 {
        for j in 0..16 {
            let d: f32 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((d - want).abs() < 1e-4, "{i},{j}: {d}");
        }
    }
}

#[test]
fn idm_latent_dim_and_codebook_membership() {
    for mode in [LatentMode::Continuous, LatentMode::Discrete] {
        let m = model(Variant::Laof, mode);
        let mut g = Graph::new();
        let s = g.input(states(5, 256, 1)).unwrap();
        let s2 = g.input(states(5, 256, 2)).unwrap();
        let lat = m.idm_forward(&mut g, s, s2, None, false).unwrap();
        assert_eq!(g.value(lat.z).shape(), [5, 8]);
        if let (Some(codes), Some(cb)) = (&lat.codes, m.codebook()) {
            for (r, &c) in codes.iter().enumerate() {
                assert_eq!(g.value(lat.z).row(r), cb.row(c));
            }
        } else {
            assert_eq!(mode, LatentMode::Continuous);
            assert!(lat.vq.is_none());
        }
    }
}

#[test]
fn difference_input_sees_zero_for_identical_frames() {
    // with s_{t+1} = s_t the second half of the CoMo input is exactly zero,
    // so the latent does not depend on the first-layer weights of that half
    let mut m = model(Variant::Como, LatentMode::Continuous);
    let s = states(3, 256, 4);
    let run = |m: &LamModel| {
        let mut g = Graph::new();
        let a = g.input(s.clone()).unwrap();
        let b = g.input(s.clone()).unwrap();
        let lat = m.idm_forward(&mut g, a, b, None, false).unwrap();
        g.value(lat.z).clone()
    };
    let before = run(&m);
    let w = m.params.id("idm.l0.w").unwrap();
    let cols = m.params.get(w).cols();
    for v in m.params.get_mut(w).data_mut()[256 * cols..].iter_mut() {
        *v += 1.0;
    }
    assert_eq!(run(&m), before);
}

#[test]
fn quantize_exact_rows_and_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cb = Tensor::randn(&[8, 4], 1.0, &mut rng);
    let z = Tensor::from_rows(1, 4, cb.row(3)).unwrap();
    let (zq, codes, l_cb, l_commit) = quantize(&z, &cb, 0.25).unwrap();
    assert_eq!(codes, [3]);
    assert_eq!(zq.row(0), cb.row(3));
    assert_eq!((l_cb, l_commit), (0.0, 0.0));

    let tie = Tensor::from_rows(2, 1, &[1.0, -1.0]).unwrap();
    let z = Tensor::from_rows(1, 1, &[0.0]).unwrap();
    assert_eq!(nearest_codes(&z, &tie).unwrap(), [0]);
    assert!(nearest_codes(&Tensor::zeros(&[1, 3]), &cb).is_err());
}

#[test]
fn nearest_codes_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cb = Tensor::randn(&[64, 8], 1.0, &mut rng);
    let z = Tensor::randn(&[1000, 8], 1.0, &mut rng);
    let codes = nearest_codes(&z, &cb).unwrap();
    for (i, &c) in codes.iter().enumerate() {
        let dist = |j: usize| -> f64 {
            z.row(i).iter().zip(cb.row(j)).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
        };
        let best = (0..64).map(dist).fold(f64::INFINITY, f64::min);
        assert!(dist(c) <= best + 1e-5);
    }
}

#[test]
fn fdm_and_decoder_shapes() {
    let m = model(Variant::LaofFlowFdm, LatentMode::Continuous);
    let mut g = Graph::new();
    let s = g.input(states(2, 256, 1)).unwrap();
    let z = g.input(states(2, 8, 2)).unwrap();
    let out = m.fdm_forward(&mut g, s, z, false).unwrap();
    assert_eq!(g.value(out.next_state).shape(), [2, 256]);
    assert_eq!(g.value(out.flow.unwrap()).shape(), [2, 256]);
    let err = m.flow_decode(&mut g, z, None, false).unwrap_err();
    assert!(err.to_string().contains("absent"));

    let m = model(Variant::LaofOnlyZ, LatentMode::Continuous);
    assert!(m.fdm_forward(&mut g, s, z, false).is_err());
    let out = m.flow_decode(&mut g, z, None, false).unwrap();
    assert_eq!(g.value(out).shape(), [2, 256]);

    let m = model(Variant::LaofOnlyZs, LatentMode::Continuous);
    assert!(m.flow_decode(&mut g, z, None, false).is_err());
    let out = m.flow_decode(&mut g, z, Some(s), false).unwrap();
    assert_eq!(g.value(out).shape(), [2, 256]);

    let m = model(Variant::Lapo, LatentMode::Continuous);
    assert!(m.flow_decode(&mut g, z, None, false).unwrap_err().to_string().contains("absent"));
}

#[test]
fn action_and_policy_heads() {
    let mut env = EnvConfig::point_mass();
    env.n_tasks = 2;
    let cont = LamModel::new(Variant::Laof, LatentMode::Continuous, small_config(), ModelShape::for_env(&env), 1).unwrap();
    let disc = model(Variant::Laof, LatentMode::Discrete);
    let mut g = Graph::new();
    let z = g.input(states(4, 8, 3)).unwrap();
    let out = cont.action_decode(&mut g, z, false).unwrap();
    assert_eq!(g.value(out).shape(), [4, 2]);
    let logits = disc.action_decode(&mut g, z, false).unwrap();
    assert_eq!(g.value(logits).shape(), [4, 5]);

    // the discrete prediction is invariant to shifting all logits
    let l = g.value(logits).clone();
    for r in 0..4 {
        let shifted: Vec<f32> = l.row(r).iter().map(|x| x + 3.5).collect();
        assert_eq!(argmax(l.row(r)), argmax(&shifted));
    }

    let s = g.input(states(4, 256, 4)).unwrap();
    let p = disc.policy_forward(&mut g, s, &[0, 1, 2, 0], false).unwrap();
    assert_eq!(g.value(p).shape(), [4, 8]);
    assert!(disc.policy_forward(&mut g, s, &[0, 3, 0, 0], false).is_err());
}

#[test]
fn every_variant_builds_its_wiring() {
    for v in Variant::ALL {
        let w = v.wiring();
        let m = model(v, LatentMode::Discrete);
        assert_eq!(m.ids(&[prefix::FDM]).is_empty(), !w.fdm, "{v}");
        assert_eq!(m.ids(&[prefix::FLOW]).is_empty(), w.flow_decoder.is_none(), "{v}");
        assert!(!m.ids(&[prefix::ACTION, prefix::POLICY]).is_empty());
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
    }
    assert!("LAXX".parse::<Variant>().is_err());
    assert!(Variant::Laof.uses_flow() && Variant::LaofFlowFdm.uses_flow());
    assert!(!Variant::Lapo.uses_flow() && !Variant::LaomAction.uses_flow());
}

#[test]
fn load_params_checks_names_and_shapes() {
    let mut a = model(Variant::Laof, LatentMode::Continuous);
    let b = LamModel::new(Variant::Laof, LatentMode::Continuous, small_config(), a.shape.clone(), 99).unwrap();
    a.load_params(b.params.clone()).unwrap();
    assert_eq!(a.params.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>(),
        b.params.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>());
    let lapo = model(Variant::Lapo, LatentMode::Continuous);
    assert!(a.load_params(lapo.params).is_err());
}

#[test]
fn head_gradients_match_finite_differences() {
    let s = states(3, 256, 7);
    let s2 = states(3, 256, 8);
    for v in [Variant::Laof, Variant::LaofFlowFdm, Variant::LaofOnlyZs, Variant::Como] {
        let m = model(v, LatentMode::Continuous);
        let w = v.wiring();
        let loss = |g: &mut Graph, store: &ParamStore| -> crate::Result<Var> {
            let mut mm = m.clone();
            mm.params = store.clone();
            let a = g.input(s.clone())?;
            let b = g.input(s2.clone())?;
            let lat = mm.idm_forward(g, a, b, None, true)?;
            let mut total = g.mean(lat.z)?;
            if w.fdm {
                let out = mm.fdm_forward(g, a, lat.z, true)?;
                let r = g.mse(out.next_state, b)?;
                total = g.add(total, r)?;
                if let Some(f) = out.flow {
                    let r = g.mse(f, a)?;
                    total = g.add(total, r)?;
                }
            }
            if w.flow_decoder.is_some() {
                let f = mm.flow_decode(g, lat.z, Some(a), true)?;
                let r = g.mse(f, b)?;
                total = g.add(total, r)?;
            }
            Ok(total)
        };
        let ids = m.ids(&[prefix::IDM, prefix::FDM, prefix::FLOW]);
        let err = param_difference_check(&m.params, &ids, loss, 1e-3, 4).unwrap();
        assert!(err < 1e-2, "{v}: {err}");
    }
}

#[test]
fn discrete_heads_match_finite_differences() {
    let m = model(Variant::LaofAction, LatentMode::Discrete);
    let s = states(4, 256, 1);
    let loss = |g: &mut Graph, store: &ParamStore| -> crate::Result<Var> {
        let mut mm = m.clone();
        mm.params = store.clone();
        let a = g.input(s.clone())?;
        let b = g.input(states(4, 256, 2))?;
        let lat = mm.idm_forward(g, a, b, None, true)?;
        let vq = lat.vq.unwrap();
        let l = g.add(vq.codebook, vq.commitment)?;
        let logits = mm.action_decode(g, lat.z, true)?;
        let ce = g.softmax_cross_entropy(logits, &[0, 4, 2, 1])?;
        let p = mm.policy_forward(g, a, &[2, 0, 1, 2], true)?;
        let target = g.detach(lat.z)?;
        let pl = g.mse(p, target)?;
        let t = g.add(l, ce)?;
        g.add(t, pl)
    };
    let ids = m.ids(&[prefix::CODEBOOK, prefix::ACTION, prefix::POLICY]);
    let err = param_difference_check(&m.params, &ids, loss, 1e-3, 6).unwrap();
    assert!(err < 1e-2, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quantized_latent_is_nearest_row(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Tensor::randn(&[16, 4], 1.0, &mut rng);
        let z = Tensor::randn(&[6, 4], 2.0, &mut rng);
        let (zq, codes, l_cb, _) = quantize(&z, &cb, 0.25).unwrap();
        for (r, &c) in codes.iter().enumerate() {
            prop_assert_eq!(zq.row(r), cb.row(c));
        }
        prop_assert!(l_cb >= 0.0);
    }

    #[test]
    fn encoding_is_linear_in_pixels(seed in any::<u64>()) {
        // codes of a 50/50 blend are the average of the codes (up to rounding)
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Encoder::new(16, 16, 3).unwrap();
        let a: Vec<u8> = (0..768).map(|_| rng.random_range(0..128u8) * 2).collect();
        let b: Vec<u8> = (0..768).map(|_| rng.random_range(0..128u8) * 2).collect();
        let mid: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x / 2 + y / 2).collect();
        let (ea, eb, em) = (e.encode(&a).unwrap(), e.encode(&b).unwrap(), e.encode(&mid).unwrap());
        for i in 0..ea.len() {
            prop_assert!((em[i] - (ea[i] + eb[i]) / 2.0).abs() < 1e-3);
        }
    }
}
