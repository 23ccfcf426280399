use gradtape::{ParamStore, Tape, Var};
use ndarray::{array, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stylevc::diffusion::{
    ddpm_update, denoise_step, make_schedule, q_sample, sample, DiffusionConfig, DiffusionState,
    EpsModel, NoisePredictor, NoiseSchedule, PromptBatch, PromptEmbedding, SampleOptions, SamplerKind,
};
use stylevc::nn::Builder;
use stylevc::synthesis::standard_normal;

/// Predicts exactly the noise that separates `x_t` from a known clean row.
struct Oracle {
    x0: Array2<f64>,
    schedule: NoiseSchedule,
}

impl EpsModel for Oracle {
    fn predict(&self, t: &Tape, x_t: Var, steps: &[usize], _cond: &PromptBatch) -> Var {
        let x = t.value(x_t).clone();
        let mut eps = x.clone();
        for (r, &s) in steps.iter().enumerate() {
            let ab = self.schedule.alpha_bars[s];
            for c in 0..x.ncols() {
                eps[[r, c]] = (x[[r, c]] - ab.sqrt() * self.x0[[r, c]]) / (1.0 - ab).sqrt();
            }
        }
        t.constant(eps)
    }
}

struct Zero;

impl EpsModel for Zero {
    fn predict(&self, t: &Tape, x_t: Var, _steps: &[usize], _cond: &PromptBatch) -> Var {
        let shape = t.shape(x_t);
        t.constant(Array2::zeros(shape))
    }
}

fn prompt() -> PromptEmbedding {
    PromptEmbedding::new(array![[0.5, -0.5, 1.0]]).unwrap()
}

#[test]
fn oracle_noise_inverts_forward_process() {
    let schedule = make_schedule(200, 1e-4, 0.02).unwrap();
    let x0 = array![[0.3, -1.2, 0.8, 2.0], [-0.7, 0.1, 0.0, -1.5]];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = standard_normal(&mut rng, 2, 4);
    let top = schedule.len() - 1;
    let x_t: Vec<f64> = x0
        .rows()
        .into_iter()
        .zip(eps.rows())
        .flat_map(|(x, e)| q_sample(&x.to_vec(), top, &e.to_vec(), &schedule).unwrap())
        .collect();
    let x_t = Array2::from_shape_vec((2, 4), x_t).unwrap();
    let model = Oracle { x0: x0.clone(), schedule: schedule.clone() };
    let p = prompt();
    for steps in [200, 50, 7] {
        let opts = SampleOptions { sampler: SamplerKind::Ddim, steps, eta: 0.0 };
        let out = sample(&model, &[&p, &p], 4, &schedule, &opts, Some(x_t.clone()), &mut rng).unwrap();
        let err = (&out - &x0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-5, "steps {steps}: error {err}");
    }
}

#[test]
fn zero_model_trajectory_rescales_by_retention() {
    let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
    let start = array![[1.0, -2.0, 0.5]];
    let p = prompt();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let opts = SampleOptions { sampler: SamplerKind::Ddim, steps: 10, eta: 0.0 };
    let out = sample(&Zero, &[&p], 3, &schedule, &opts, Some(start.clone()), &mut rng).unwrap();
    let expect = &start / schedule.alpha_bars[99].sqrt();
    for (a, b) in out.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
    }
}

#[test]
fn single_ddim_step_from_level_one_is_clean_prediction() {
    let schedule = make_schedule(10, 1e-3, 0.02).unwrap();
    let x0 = array![[0.4, -0.9]];
    let model = Oracle { x0: x0.clone(), schedule: schedule.clone() };
    let x1 = q_sample(&[0.4, -0.9], 0, &[1.0, -1.0], &schedule).unwrap();
    let state = DiffusionState { x: Array2::from_shape_vec((1, 2), x1).unwrap(), t: 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = prompt();
    let next = denoise_step(&model, &state, &[&p], &schedule, SamplerKind::Ddim, &mut rng).unwrap();
    assert_eq!(next.t, 0);
    assert!((&next.x - &x0).iter().all(|v| v.abs() < 1e-12));
    assert!(denoise_step(&model, &next, &[&p], &schedule, SamplerKind::Ddim, &mut rng).is_err());
}

#[test]
fn ddpm_last_step_adds_no_noise() {
    let schedule = make_schedule(5, 1e-3, 0.02).unwrap();
    let x = array![[0.2, 0.3]];
    let eps = array![[0.1, -0.1]];
    let a = ddpm_update(&x, &eps, &schedule, 1, &array![[5.0, 5.0]]);
    let b = ddpm_update(&x, &eps, &schedule, 1, &array![[-5.0, 9.0]]);
    assert_eq!(a, b);
}

fn small_predictor(text_dim: usize) -> (NoisePredictor, ParamStore) {
    let cfg = DiffusionConfig {
        timesteps: 50,
        hidden_dim: 16,
        time_dim: 8,
        text_dim,
        blocks: 2,
        heads: 2,
        ..DiffusionConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = NoisePredictor::new(&mut Builder::new(&mut store, &mut rng, ""), &cfg, 4);
    (net, store)
}

#[test]
fn single_token_prompt_gets_full_attention() {
    let (net, store) = small_predictor(3);
    let t = Tape::new();
    let x = t.constant(array![[0.1, 0.2, 0.3, 0.4], [1.0, -1.0, 0.0, 2.0]]);
    let a = prompt();
    let b = PromptEmbedding::new(array![[1.0, 2.0, 3.0], [0.0, 0.0, 1.0], [-1.0, 0.5, 0.2]]).unwrap();
    let cond = PromptBatch::constant(&t, &[&a, &b]);
    let (_, weights) = net.forward_with_attention(&t, &store, x, &[3, 40], &cond);
    assert_eq!(weights.len(), 4);
    for w in weights {
        let w = t.value(w);
        assert!((w[[0, 0]] - 1.0).abs() < 1e-12);
        let rest: f64 = w.slice(ndarray::s![1..4, ..]).sum();
        assert!((rest - 1.0).abs() < 1e-12);
    }
}

#[test]
fn duplicated_tokens_do_not_change_prediction() {
    let (net, store) = small_predictor(3);
    let base = array![[1.0, 2.0, 3.0], [0.0, -1.0, 1.0]];
    let doubled = ndarray::concatenate(Axis(0), &[base.view(), base.view()]).unwrap();
    let run = |tokens: Array2<f64>| {
        let t = Tape::new();
        let x = t.constant(array![[0.5, -0.5, 0.25, 1.0]]);
        let p = PromptEmbedding::new(tokens).unwrap();
        let cond = PromptBatch::constant(&t, &[&p]);
        let (out, _) = net.forward_with_attention(&t, &store, x, &[17], &cond);
        let v = t.value(out).clone();
        v
    };
    let (a, b) = (run(base), run(doubled));
    assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn ddim_is_deterministic_for_fixed_start() {
    let (net, store) = small_predictor(3);
    let model = stylevc::diffusion::BoundPredictor { net: &net, store: &store };
    let schedule = make_schedule(50, 1e-4, 0.02).unwrap();
    let p = prompt();
    let start = array![[0.1, 0.2, 0.3, 0.4]];
    let opts = SampleOptions { sampler: SamplerKind::Ddim, steps: 10, eta: 0.0 };
    let a = sample(&model, &[&p], 4, &schedule, &opts, Some(start.clone()), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = sample(&model, &[&p], 4, &schedule, &opts, Some(start), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ddpm_is_reproducible_under_a_seed() {
    let (net, store) = small_predictor(3);
    let model = stylevc::diffusion::BoundPredictor { net: &net, store: &store };
    let schedule = make_schedule(50, 1e-4, 0.02).unwrap();
    let p = prompt();
    let opts = SampleOptions { sampler: SamplerKind::Ddpm, steps: 0, eta: 0.0 };
    let run = |seed| sample(&model, &[&p, &p], 4, &schedule, &opts, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn forward_process_variance_matches_schedule() {
    let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40_000;
    let eps = standard_normal(&mut rng, n, 1);
    let level = 60;
    let ab = schedule.alpha_bars[level];
    let xs: Vec<f64> = eps.iter().map(|&e| q_sample(&[2.0], level, &[e], &schedule).unwrap()[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    assert!((mean - 2.0 * ab.sqrt()).abs() < 4.0 * ((1.0 - ab) / n as f64).sqrt());
    assert!((var - (1.0 - ab)).abs() < 0.05 * (1.0 - ab));
}
