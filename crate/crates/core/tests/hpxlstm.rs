use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdiff_core::hpxlstm::{bca, hp_xlstm, mlstm_step, BranchParams, Coupling, ForgetGate, MLSTMState};
use segdiff_core::numkit::Tensor;
use segdiff_core::FeatureSequence;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(z: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.data()[j] + z.iter().enumerate().map(|(i, zi)| zi * w.at(&[i, j])).sum::<f64>())
        .collect()
}

/// Unstabilized recurrence written out with plain loops.
struct Reference {
    c: Vec<Vec<f64>>,
    n: Vec<f64>,
}

impl Reference {
    fn new(d: usize) -> Self {
        Self {
            c: vec![vec![0.0; d]; d],
            n: vec![0.0; d],
        }
    }

    fn step(&mut self, z: &[f64], i_tilde: f64, p: &BranchParams, forget: ForgetGate) -> Vec<f64> {
        let d = z.len();
        let q = affine(z, &p.w_q, &p.b_q);
        let k: Vec<f64> = affine(z, &p.w_k, &Tensor::zeros(&[d]))
            .iter()
            .zip(p.b_k.data())
            .map(|(a, b)| a / (d as f64).sqrt() + b)
            .collect();
        let v = affine(z, &p.w_v, &p.b_v);
        let f_pre = affine(z, &p.w_f, &p.b_f)[0];
        let f = match forget {
            ForgetGate::Sigmoid => sigmoid(f_pre),
            ForgetGate::Exp => f_pre.exp(),
        };
        let i = i_tilde.exp();
        let o: Vec<f64> = affine(z, &p.w_o, &p.b_o).into_iter().map(sigmoid).collect();
        for r in 0..d {
            for c in 0..d {
                self.c[r][c] = f * self.c[r][c] + i * v[r] * k[c];
            }
            self.n[r] = f * self.n[r] + i * k[r];
        }
        let nq: f64 = self.n.iter().zip(&q).map(|(a, b)| a * b).sum();
        let denom = nq.abs().max(1.0);
        (0..d)
            .map(|r| o[r] * self.c[r].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / denom)
            .collect()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn stabilized_steps_match_unstabilized_reference() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=6);
        let forget = if seed % 2 == 0 { ForgetGate::Sigmoid } else { ForgetGate::Exp };
        let p = BranchParams::random(d, 1.0, &mut rng);
        let mut state = MLSTMState::zeros(d);
        let mut reference = Reference::new(d);
        for t in 0..6 {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let i_tilde = rng.random_range(-8.0..8.0);
            let (next, h) = mlstm_step(&state, &z, i_tilde, &p, forget).unwrap();
            let h_ref = reference.step(&z, i_tilde, &p, forget);
            for (a, b) in h.iter().zip(&h_ref) {
                assert!(rel(*a, *b) < 1e-10, "seed {seed} step {t}: {a} vs {b}");
            }
            // stabilized memory is the unstabilized one scaled by e^{-m}
            let scale = next.m.exp();
            for r in 0..d {
                for c in 0..d {
                    assert!(rel(next.c.at(&[r, c]) * scale, reference.c[r][c]) < 1e-10);
                }
            }
            state = next;
        }
    }
}

#[test]
fn memory_is_a_decayed_sum_of_writes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 3;
    let p = BranchParams::random(d, 2.0, &mut rng);
    let steps = 12;
    let zs: Vec<Vec<f64>> = (0..steps).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let gates: Vec<f64> = (0..steps).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut state = MLSTMState::zeros(d);
    for (z, &i) in zs.iter().zip(&gates) {
        state = mlstm_step(&state, z, i, &p, ForgetGate::Sigmoid).unwrap().0;
    }
    // C_T = Σ_t (Π_{s>t} f_s) i_t v_t k_tᵀ
    let mut expect = vec![0.0; d * d];
    for t in 0..steps {
        let decay: f64 = (t + 1..steps)
            .map(|s| sigmoid(affine(&zs[s], &p.w_f, &p.b_f)[0]))
            .product();
        let v = affine(&zs[t], &p.w_v, &p.b_v);
        let k: Vec<f64> = affine(&zs[t], &p.w_k, &Tensor::zeros(&[d]))
            .iter()
            .zip(p.b_k.data())
            .map(|(a, b)| a / (d as f64).sqrt() + b)
            .collect();
        for r in 0..d {
            for c in 0..d {
                expect[r * d + c] += decay * gates[t].exp() * v[r] * k[c];
            }
        }
    }
    for (i, e) in expect.iter().enumerate() {
        let got = state.c.data()[i] * state.m.exp();
        assert!((got - e).abs() <= 1e-8 * e.abs().max(1.0), "{got} vs {e}");
    }
}

#[test]
fn states_stay_finite_over_long_sequences_with_huge_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 4;
    for forget in [ForgetGate::Sigmoid, ForgetGate::Exp] {
        let mut p = BranchParams::random(d, 0.0, &mut rng);
        if forget == ForgetGate::Exp {
            // log f around +0.5: the unstabilized memory grows like e^{t/2}
            p.b_f = Tensor::vector(vec![0.5]);
        }
        let mut state = MLSTMState::zeros(d);
        for t in 0..10_000 {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let i_tilde = rng.random_range(-100.0..100.0);
            let (next, h) = mlstm_step(&state, &z, i_tilde, &p, forget).unwrap();
            assert!(h.iter().all(|v| v.is_finite()), "{forget:?} step {t}");
            assert!(next.c.is_finite() && next.n.is_finite() && next.m.is_finite());
            state = next;
        }
        assert!(state.c.data().iter().all(|v| v.abs() < 1e6));
    }
}

#[test]
fn no_write_step_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 4;
    let mut p = BranchParams::random(d, 1.0, &mut rng);
    let mut state = MLSTMState::zeros(d);
    for _ in 0..5 {
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        state = mlstm_step(&state, &z, rng.random_range(-2.0..2.0), &p, ForgetGate::Exp).unwrap().0;
    }
    p.w_f = Tensor::zeros(&[d, 1]);
    p.b_f = Tensor::vector(vec![0.0]);
    let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (next, _) = mlstm_step(&state, &z, f64::NEG_INFINITY, &p, ForgetGate::Exp).unwrap();
    assert_eq!(next.c, state.c);
    assert_eq!(next.n, state.n);
}

#[test]
fn full_module_matches_reference_driven_by_bca_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (len, d) = (7, 3);
    let zh = FeatureSequence::from_tensor(Tensor::randn(&[len, d], &mut rng)).unwrap();
    let zp = FeatureSequence::from_tensor(Tensor::randn(&[len, d], &mut rng)).unwrap();
    let ph = BranchParams::random(d, 1.0, &mut rng);
    let pp = BranchParams::random(d, 1.0, &mut rng);
    let (xh, xp) = bca(&zh, &zp, &ph, &pp).unwrap();
    let (oh, op) = hp_xlstm(&zh, &zp, &ph, &pp, ForgetGate::Sigmoid, Coupling::Bca).unwrap();
    for (z, x, p, out) in [(&zh, &xh, &ph, &oh), (&zp, &xp, &pp, &op)] {
        let mut reference = Reference::new(d);
        for t in 0..len {
            let i_tilde = affine(x.frame(t), &p.w_i, &p.b_i)[0];
            let h = reference.step(z.frame(t), i_tilde, p, ForgetGate::Sigmoid);
            for (a, b) in out.frame(t).iter().zip(&h) {
                assert!(rel(*a, *b) < 1e-10);
            }
        }
    }
}

#[test]
fn identity_coupling_decouples_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (len, d) = (5, 3);
    let zh = FeatureSequence::from_tensor(Tensor::randn(&[len, d], &mut rng)).unwrap();
    let zp = FeatureSequence::from_tensor(Tensor::randn(&[len, d], &mut rng)).unwrap();
    let zp2 = FeatureSequence::from_tensor(Tensor::randn(&[len, d], &mut rng)).unwrap();
    let ph = BranchParams::random(d, 1.0, &mut rng);
    let pp = BranchParams::random(d, 1.0, &mut rng);
    let a = hp_xlstm(&zh, &zp, &ph, &pp, ForgetGate::Sigmoid, Coupling::Identity).unwrap().0;
    let b = hp_xlstm(&zh, &zp2, &ph, &pp, ForgetGate::Sigmoid, Coupling::Identity).unwrap().0;
    assert_eq!(a, b);
    let c = hp_xlstm(&zh, &zp2, &ph, &pp, ForgetGate::Sigmoid, Coupling::Bca).unwrap().0;
    assert_ne!(a, c);
}
