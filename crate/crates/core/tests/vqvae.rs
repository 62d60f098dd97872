use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wordsmith_core::checkpoint::Container;
use wordsmith_core::motion::{build_corpus, CorpusConfig, Verb};
use wordsmith_core::nn::{Tape, Tensor};
use wordsmith_core::vqvae::*;

fn tiny_config() -> VqVaeConfig {
    VqVaeConfig { codes: 4, code_dim: 3, window: 4, downsample: 2, hidden: 8, batch_size: 4, ..Default::default() }
}

fn random_window(rng: &mut ChaCha8Rng, w: usize, d: usize) -> Vec<Vec<f64>> {
    (0..w).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn tiny_model(seed: u64) -> (VqVaeModel, Vec<Vec<Vec<f64>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = VqVaeModel::new(5, VqVaeConfig { seed, ..tiny_config() }).unwrap();
    let windows = (0..3).map(|_| random_window(&mut rng, 4, 5)).collect();
    (model, windows)
}

fn brute_force(codes: &[Vec<f64>], z: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in codes.iter().enumerate() {
        let d = c.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    (best, best_d)
}

#[test]
fn quantize_matches_brute_force_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let k = rng.random_range(2..40);
        let d = rng.random_range(1..9);
        let codes: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cb = Codebook::new(Tensor::from_rows(&codes).unwrap());
        let (i, dist) = quantize(&cb, &z);
        let (j, oracle) = brute_force(&codes, &z);
        assert_eq!(i, j);
        assert!((dist - oracle).abs() < 1e-12);
    }
}

#[test]
fn quantize_examples() {
    let cb = Codebook::new(Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap());
    assert_eq!(quantize(&cb, &[0.9, 1.2]).0, 1);
    let cb = Codebook::new(Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap());
    assert_eq!(quantize(&cb, &[0.5, 0.0]).0, 0);
}

#[test]
fn loss_decomposes_into_its_terms() {
    for seed in 0..50 {
        let (model, windows) = tiny_model(seed);
        let t = model.loss(&windows).unwrap();
        assert!(t.re >= 0.0 && t.embed >= 0.0 && t.commit >= 0.0);
        assert!((t.total - (t.re + t.embed + model.config.beta * t.commit)).abs() < 1e-9);
        assert_eq!(t.embed, t.commit);
    }
}

/// Autodiff gradients of one loss term with respect to every parameter.
fn term_grads(model: &VqVaeModel, windows: &[Vec<Vec<f64>>], term: usize) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let (params, terms) = model.record(&mut tape, windows).unwrap();
    let mut g = tape.backward(terms[term]).unwrap();
    params.iter().map(|p| g.take(*p)).collect()
}

fn term_value(model: &VqVaeModel, windows: &[Vec<Vec<f64>>], term: usize) -> f64 {
    let t = model.loss(windows).unwrap();
    [t.re, t.embed, t.commit, t.total][term]
}

fn param(model: &mut VqVaeModel, i: usize) -> &mut Tensor {
    let n_enc = model.encoder.params().len();
    let n_dec = model.decoder.params().len();
    if i < n_enc {
        model.encoder.params_mut().remove(i)
    } else if i < n_enc + n_dec {
        model.decoder.params_mut().remove(i - n_enc)
    } else {
        &mut model.codebook.codes
    }
}

#[test]
fn embed_and_commit_route_gradients_to_opposite_sides() {
    const EMBED: usize = 1;
    const COMMIT: usize = 2;
    let (model, windows) = tiny_model(3);
    let n_enc = model.encoder.params().len();
    let n_dec = model.decoder.params().len();
    let codebook = n_enc + n_dec;
    let h = 1e-6;

    let ge = term_grads(&model, &windows, EMBED);
    assert!(ge[codebook].data().iter().all(|g| *g == 0.0), "embed term must not move the codebook");
    let gc = term_grads(&model, &windows, COMMIT);
    assert!(gc[..n_enc].iter().all(|t| t.data().iter().all(|g| *g == 0.0)), "commit term must not move the encoder");

    // The surviving gradients match finite differences of the term's value:
    // embed through the encoder, commit through the codebook.
    for (term, grads, range) in [(EMBED, &ge, 0..n_enc), (COMMIT, &gc, codebook..codebook + 1)] {
        for i in range {
            for k in 0..grads[i].len() {
                let mut p = model.clone();
                param(&mut p, i).data_mut()[k] += h;
                let mut m = model.clone();
                param(&mut m, i).data_mut()[k] -= h;
                let fd = (term_value(&p, &windows, term) - term_value(&m, &windows, term)) / (2.0 * h);
                let a = grads[i].data()[k];
                assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3), "term {term} p{i}[{k}]: {a} vs {fd}");
            }
        }
    }
}

#[test]
fn straight_through_reaches_the_encoder() {
    const RE: usize = 0;
    let (model, windows) = tiny_model(4);
    let n_enc = model.encoder.params().len();
    let g = term_grads(&model, &windows, RE);
    let norm: f64 = g[..n_enc].iter().map(|t| t.sq_norm()).sum();
    assert!(norm > 0.0, "reconstruction gradient must pass the quantizer");
    // Without the estimator the reconstruction is piecewise constant in the
    // encoder weights: a small perturbation leaves it unchanged up to the
    // rounding of z + (e - z).
    let mut p = model.clone();
    p.encoder.params_mut()[0].data_mut()[0] += 1e-7;
    let (a, b) = (term_value(&p, &windows, RE), term_value(&model, &windows, RE));
    assert!((a - b).abs() < 1e-12 * b.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn single_code_maps_everything_to_zero() {
    let cfg = VqVaeConfig { codes: 1, ..tiny_config() };
    let model = VqVaeModel::new(5, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let (idx, rec) = model.encode_decode(&random_window(&mut rng, 4, 5)).unwrap();
        assert_eq!(idx, vec![0, 0]);
        assert_eq!(rec.len(), 4);
        assert!(rec.iter().all(|f| f.len() == 5));
    }
    let (_, windows) = tiny_model(0);
    assert!(model.loss(&windows).unwrap().total.is_finite());
}

#[test]
fn wrong_window_is_rejected() {
    let (model, _) = tiny_model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(model.encode_decode(&random_window(&mut rng, 3, 5)), Err(VqError::Window { .. })));
    assert!(model.encode_decode(&random_window(&mut rng, 4, 6)).is_err());
}

#[test]
fn overfits_one_window() {
    let corpus = build_corpus(&CorpusConfig {
        verbs: vec![Verb::Walk],
        speeds: vec![1.0],
        seeds: vec![0],
        duration: 0.8,
        dt: 0.05,
    })
    .unwrap();
    let clip = corpus[0].clip.trim(0, 16).unwrap();
    let cfg = VqVaeConfig { codes: 8, hidden: 64, steps: 2000, batch_size: 1, eval_every: 500, ..Default::default() };
    let (model, history) = train_vqvae(std::slice::from_ref(&clip), std::slice::from_ref(&clip), &cfg).unwrap();
    assert_eq!(history.records.len(), 4);
    let last = history.records.last().unwrap();
    assert!(
        last.heldout_re < 0.05 * history.baseline_re.max(1e-9) || last.heldout_re < 1e-3,
        "held-out {} vs baseline {}",
        last.heldout_re,
        history.baseline_re
    );
    let w = clip_windows(&clip, 16, 1);
    assert_eq!(w.len(), 1);
    let (a, ra) = model.encode_decode(&w[0]).unwrap();
    let (b, rb) = model.encode_decode(&w[0]).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn zero_steps_returns_initialized_model() {
    let corpus = build_corpus(&CorpusConfig { seeds: vec![0], duration: 2.0, ..Default::default() }).unwrap();
    let clips: Vec<_> = corpus.into_iter().map(|c| c.clip).collect();
    let cfg = VqVaeConfig { steps: 0, ..Default::default() };
    let (model, history) = train_vqvae(&clips, &clips, &cfg).unwrap();
    assert!(history.records.is_empty());
    assert!(history.baseline_re > 0.0);
    assert_eq!(model.codebook.len(), 64);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let corpus = build_corpus(&CorpusConfig { seeds: vec![0], duration: 2.0, ..Default::default() }).unwrap();
    let clips: Vec<_> = corpus.into_iter().map(|c| c.clip).collect();
    let cfg = VqVaeConfig { codes: 16, steps: 30, eval_every: 10, ..Default::default() };
    let (a, ha) = train_vqvae(&clips, &clips, &cfg).unwrap();
    let (b, hb) = train_vqvae(&clips, &clips, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);

    let bytes = a.to_container().to_bytes();
    let back = VqVaeModel::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.codebook, a.codebook);
    assert_eq!(back.config, a.config);
    assert_eq!(back.to_container().to_bytes(), bytes);
    let w = clip_windows(&clips[0], 16, 16);
    let (ia, _) = a.encode_decode(&w[0]).unwrap();
    let (ib, _) = back.encode_decode(&w[0]).unwrap();
    assert_eq!(ia.len(), ib.len());

    let container = Container::from_bytes(&bytes).unwrap();
    assert_eq!(container.component, "vqvae");
    assert!(container.blob_names().contains(&"codebook"));
}

proptest! {
    #[test]
    fn embed_equals_commit_in_value(seed in any::<u64>()) {
        let (model, windows) = tiny_model(seed);
        let t = model.loss(&windows).unwrap();
        prop_assert_eq!(t.embed, t.commit);
    }

    #[test]
    fn quantize_returns_a_nearest_code(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::new(Tensor::from_rows(&codes).unwrap());
        let (i, d) = quantize(&cb, &z);
        for c in &codes {
            let dc = c.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d <= dc);
        }
        prop_assert!(i < 8);
    }
}
