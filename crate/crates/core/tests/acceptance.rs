//! Acceptance checks. Prints one PASS/FAIL line per criterion and a summary.
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test -p hatlm --test acceptance -- 4 7`.
//! With `HATLM_ACCEPTANCE_STRICT=1` the process exits nonzero if any fails.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{all_sequences, brute_force_full_sum, edit_distance_recursive, flat_grads, utt};
use hatlm::data::{generate_task, wer, Task, TaskConfig};
use hatlm::decoder::{
    beam_search, beam_search_fusion_free, exhaustive_search, rescore_components, BeamConfig, Hypothesis,
    NBestList,
};
use hatlm::hat::{HatConfig, HatModel, Utterance};
use hatlm::lfm::*;
use hatlm::lm::{ExternalLm, NGramLm, Smoothing};
use hatlm::mwer::{
    composite_loss_on, expected_errors_on, nwe, renormalize, MwerConfig, TopKPosterior,
};
use hatlm::report::{top1_wer, weight_series, Report};
use hatlm::sweep::{rescoring_lists, run_sweep, sweep_evaluations, GridRange, SweepMode, SweepSpec};
use hatlm::train::{
    evaluate, train_mle, train_mwer, train_mwer_fusion_free, Hooks, LogRecord, RunLog, TrainConfig,
};
use hatlm_autodiff::gradcheck::{flatten, numeric_gradients, relative_error};
use hatlm_autodiff::{Optimizer, OptimizerKind, ParamSet, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Models trained for one seed of the default task, shared between criteria.
struct SeedRun {
    task: Task,
    elm: NGramLm,
    mle: HatModel,
    mwer: Option<HatModel>,
}

#[derive(Default)]
struct Shared {
    runs: HashMap<u64, SeedRun>,
    lfm_logs: Vec<RunLog>,
}

const MLE_STEPS: usize = 2000;
const MLE_LR: f64 = 3e-3;
const MWER_STEPS: usize = 1000;

fn text_lm(task: &Task) -> NGramLm {
    NGramLm::train(&task.text_sentences(), task.config.vocab_size, 3, Smoothing::default(), false, true).unwrap()
}

impl Shared {
    fn run(&mut self, seed: u64) -> &mut SeedRun {
        self.runs.entry(seed).or_insert_with(|| {
            let task = generate_task(&TaskConfig {
                seed,
                ..TaskConfig::default()
            })
            .unwrap();
            let elm = text_lm(&task);
            let init = HatModel::new(HatConfig::new(task.config.acoustic_vocab(), task.config.vocab_size), seed).unwrap();
            let cfg = TrainConfig {
                steps: MLE_STEPS,
                learning_rate: MLE_LR,
                seed,
                ..TrainConfig::mle()
            };
            let mle = train_mle(&cfg, init, &task.train, &Hooks::default()).unwrap().model;
            SeedRun {
                task,
                elm,
                mle,
                mwer: None,
            }
        })
    }

    /// Regular MWER fine-tuned from the seed's MLE model.
    fn regular_mwer(&mut self, seed: u64) -> HatModel {
        let r = self.run(seed);
        if r.mwer.is_none() {
            let m = train_mwer(&mwer_config(seed), r.mle.clone(), None, &r.task.train, &Hooks::default())
                .unwrap()
                .model;
            r.mwer = Some(m);
        }
        r.mwer.clone().unwrap()
    }
}

fn mwer_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: MWER_STEPS,
        seed,
        ..TrainConfig::mwer()
    }
}

fn random_utt(rng: &mut ChaCha8Rng, acoustic: u32, v: u32, t: usize, u: usize) -> Utterance {
    let ac = (0..t).map(|_| rng.gen_range(0..acoustic)).collect();
    let reference = (0..u).map(|_| rng.gen_range(0..v)).collect();
    utt(ac, reference)
}

fn small_lm(rng: &mut ChaCha8Rng, v: usize) -> NGramLm {
    let corpus: Vec<Vec<u32>> = (0..40)
        .map(|_| (0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..v as u32)).collect())
        .collect();
    NGramLm::train(&corpus, v, 2, Smoothing::default(), false, true).unwrap()
}

// 1 -------------------------------------------------------------------------

fn lattice_oracle(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for v in 1..=3u32 {
        for draw in 0..20 {
            let m = HatModel::new(HatConfig::tiny(4, v as usize), 1000 * v as u64 + draw).unwrap();
            for t in 1..=4 {
                let u = random_utt(&mut rng, 4, v, t, 0);
                for y in all_sequences(v, 3) {
                    let a = m.full_sum_log_prob(&u, &y).unwrap();
                    let b = brute_force_full_sum(&m, &u, &y);
                    worst = worst.max((a - b).abs());
                    cases += 1;
                }
            }
        }
    }
    outcome(worst <= 1e-10, format!("{cases} sequences, worst |diff| {worst:.1e} (tol 1e-10)"))
}

// 2 -------------------------------------------------------------------------

/// `sum_{n > l} C(n + t - 1, t - 1) q^n` for `t` in 1..=2.
fn tail_bound(q: f64, t: usize, l: usize) -> f64 {
    let l = l as f64;
    match t {
        1 => q.powf(l + 1.0) / (1.0 - q),
        2 => ((l + 2.0) * q.powf(l + 1.0) - (l + 1.0) * q.powf(l + 2.0)) / ((1.0 - q) * (1.0 - q)),
        _ => unreachable!(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mass of every sequence of length `0..=l`, summed in order of length.
fn truncated_mass(m: &HatModel, u: &Utterance, v: u32, l: usize) -> f64 {
    *partial_sums(m, u, v, l).last().unwrap()
}

/// Running mass after each length `0..=l`.
fn partial_sums(m: &HatModel, u: &Utterance, v: u32, l: usize) -> Vec<f64> {
    let mut by_len = vec![0.0; l + 1];
    for y in all_sequences(v, l) {
        by_len[y.len()] += m.full_sum_log_prob(u, &y).unwrap().exp();
    }
    by_len
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

fn normalization(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_gap: f64 = 0.0;
    let mut worst_bound: f64 = 0.0;
    let mut ok = true;
    let mut monotone = true;
    for v in 1..=2u32 {
        for t in 1..=2 {
            for draw in 0..4 {
                let mut m = HatModel::new(HatConfig::tiny(4, v as usize), 50 + 10 * v as u64 + draw).unwrap();
                // the joint state is a tanh, so the blank logit is at least
                // b - |w|_1; shift the bias so every blank probability is >= 0.9
                let wid = m.params.id("joint.blank_w").unwrap();
                let bid = m.params.id("joint.blank_b").unwrap();
                let w1: f64 = m.params.get(wid).data().iter().map(|x| x.abs()).sum();
                let floor = 9f64.ln();
                m.params.get_mut(bid).data_mut()[0] = w1 + floor;
                let q = 1.0 - sigmoid(floor);
                let mut l = 0;
                while tail_bound(q, t, l) > 1e-7 {
                    l += 1;
                }
                let u = random_utt(&mut rng, 4, v, t, 0);
                let sums = partial_sums(&m, &u, v, l);
                monotone &= sums.windows(2).all(|w| w[1] >= w[0]) && sums.iter().all(|x| *x <= 1.0 + 1e-9);
                let s = *sums.last().unwrap();
                let bound = tail_bound(q, t, l);
                ok &= 1.0 - s <= bound + 1e-12;
                worst_gap = worst_gap.max((1.0 - s).abs());
                worst_bound = worst_bound.max(bound);
            }
        }
    }
    ok &= worst_gap <= 1e-6;

    // constant blank: exactly C(n+T-1, T-1) q^n b^T of the mass has n labels
    let mut worst_closed: f64 = 0.0;
    for (t, z, l) in [(1, 0.4, 30), (1, -0.3, 40), (2, 1.2, 20)] {
        let mut m = HatModel::new(HatConfig::tiny(4, 1), 77).unwrap();
        m.set_constant_blank_logit(z);
        let b = sigmoid(z);
        let q = 1.0 - b;
        let u = random_utt(&mut rng, 4, 1, t, 0);
        let s = truncated_mass(&m, &u, 1, l);
        let closed = match t {
            1 => 1.0 - q.powi(l as i32 + 1),
            _ => 1.0 - tail_bound(q, 2, l) * b * b,
        };
        worst_closed = worst_closed.max((s - closed).abs());
    }
    for seed in 0..3 {
        // two labels: the label split must not change the per-length mass
        let mut m = HatModel::new(HatConfig::tiny(4, 2), 90 + seed).unwrap();
        m.set_constant_blank_logit(0.7);
        let q = 1.0 - sigmoid(0.7);
        let u = random_utt(&mut rng, 4, 2, 1, 0);
        let s = truncated_mass(&m, &u, 2, 10);
        worst_closed = worst_closed.max((s - (1.0 - q.powi(11))).abs());
    }
    ok &= worst_closed <= 1e-12 && monotone;
    outcome(
        ok,
        format!(
            "partial sums monotone and <= 1+1e-9: {monotone}; |1 - mass| {worst_gap:.1e} (tail bound {worst_bound:.1e}, tol 1e-6); closed form |diff| {worst_closed:.1e} (tol 1e-12)"
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn fd_check(params: &ParamSet, analytic: &[f64], f: impl FnMut(&ParamSet) -> hatlm::Result<f64>) -> f64 {
    let numeric = numeric_gradients(params, 1e-4, f).unwrap();
    relative_error(analytic, &flatten(&numeric), 1e-8)
}

fn hat_instance(rng: &mut ChaCha8Rng, seed: u64) -> (HatConfig, HatModel, Utterance) {
    let cfg = HatConfig::tiny(5, 3);
    let m = HatModel::new(cfg.clone(), seed).unwrap();
    let t = rng.gen_range(2..=4);
    let ul = rng.gen_range(1..=2);
    (cfg, m, random_utt(rng, 5, 3, t, ul))
}

fn informative(nb: &NBestList) -> bool {
    let errs: Vec<usize> = nb.hypotheses.iter().map(|h| nwe(&h.tokens, &nb.reference)).collect();
    nb.len() >= 2 && errs.iter().any(|e| *e != errs[0])
}

fn gradient_suites(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0f64; 4];
    let mut counts = [0usize; 4];

    for i in 0..20 {
        let (cfg, m, u) = hat_instance(&mut rng, 300 + i);
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let l = m.mle_loss_on(&mut tape, &vars, std::slice::from_ref(&u)).unwrap();
        let g = flat_grads(&m.params, &tape.backward(l).unwrap());
        let e = fd_check(&m.params, &g, |p| HatModel::from_params(cfg.clone(), p.clone())?.mle_loss(std::slice::from_ref(&u)));
        worst[0] = worst[0].max(e);
        counts[0] += 1;
    }

    let composite = |m: &HatModel, cfg: &HatConfig, u: &Utterance, nb: &NBestList, mc: &MwerConfig| -> (Vec<f64>, f64) {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let t = composite_loss_on(&mut tape, m, &vars, u, nb, mc).unwrap();
        let g = flat_grads(&m.params, &tape.backward(t.loss).unwrap());
        let e = fd_check(&m.params, &g, |p| {
            let mm = HatModel::from_params(cfg.clone(), p.clone())?;
            let mut tp = Tape::new();
            let vs = mm.bind(&mut tp);
            let t = composite_loss_on(&mut tp, &mm, &vs, u, nb, mc)?;
            Ok(tp.value(t.loss).item()?)
        });
        (g, e)
    };

    let mut seed = 400;
    while counts[1] < 20 || counts[2] < 20 {
        seed += 1;
        let (cfg, m, u) = hat_instance(&mut rng, seed);
        let elm = small_lm(&mut rng, 3);
        let (lambda, gamma) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
        let beam = BeamConfig {
            beam: 4,
            ..BeamConfig::with_weights(lambda, gamma)
        };
        let nb = beam_search(&u, &m, Some(&elm), &beam).unwrap();
        let nb = rescore_components(&nb, &m, &u).unwrap();
        if !informative(&nb) {
            continue;
        }
        if counts[1] < 20 {
            let plain = MwerConfig {
                mu: 0.0,
                nu: 0.0,
                theta: 0.0,
                ilm_grad: true,
            };
            worst[1] = worst[1].max(composite(&m, &cfg, &u, &nb, &plain).1);
            counts[1] += 1;
        }
        if counts[2] < 20 {
            let full = MwerConfig {
                mu: lambda,
                nu: gamma,
                theta: rng.gen_range(0.001..0.1),
                ilm_grad: true,
            };
            worst[2] = worst[2].max(composite(&m, &cfg, &u, &nb, &full).1);
            counts[2] += 1;
        }
    }

    // train_lfm_step: with plain SGD at rate 1 the update is the gradient
    let mut seed = 500;
    while counts[3] < 20 {
        seed += 1;
        let (_, mut hat, u) = hat_instance(&mut rng, seed);
        hat.params.set_trainable(false);
        let elm = small_lm(&mut rng, 3);
        let beam = BeamConfig {
            beam: 4,
            ..BeamConfig::default()
        };
        let nb = rescore_components(&beam_search(&u, &hat, Some(&elm), &beam).unwrap(), &hat, &u).unwrap();
        if !informative(&nb) {
            continue;
        }
        let enc = encoder_states(&hat, &u).unwrap();
        let cfg = LfmConfig {
            dim: 4,
            heads: 2,
            layers: 1,
            ffn_dim: 4,
            ..LfmConfig::new(3, hat.config.enc_dim)
        };
        let lfm = LfmModel::new(cfg.clone(), seed).unwrap();
        let ex = [LfmExample {
            utterance: &u,
            enc: &enc,
            nbest: &nb,
        }];
        let mut stepped = lfm.clone();
        train_lfm_step(&ex, &hat, &mut stepped, &mut Optimizer::new(OptimizerKind::Sgd, 1.0), 0.0).unwrap();
        let g: Vec<f64> = lfm
            .params
            .flatten()
            .iter()
            .zip(stepped.params.flatten())
            .map(|(a, b)| a - b)
            .collect();
        let e = fd_check(&lfm.params, &g, |p| {
            let mut probe = LfmModel::from_params(cfg.clone(), p.clone())?;
            train_lfm_step(&ex, &hat, &mut probe, &mut Optimizer::new(OptimizerKind::Sgd, 0.0), 0.0)
        });
        worst[3] = worst[3].max(e);
        counts[3] += 1;
    }
    let names = ["mle_loss", "mwer_loss", "composite_loss", "train_lfm_step"];
    let detail: Vec<String> = names
        .iter()
        .zip(worst.iter().zip(&counts))
        .map(|(n, (w, c))| format!("{n} {c}x worst {w:.1e}"))
        .collect();
    outcome(worst.iter().all(|w| *w <= 1e-4), format!("{} (tol 1e-4)", detail.join(", ")))
}

// 4 -------------------------------------------------------------------------

fn search_oracle(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut agree = 0;
    let mut identical = 0;
    let n = 50;
    for i in 0..n {
        let v = rng.gen_range(2..=3usize);
        let hat = HatModel::new(HatConfig::new(5, v), 600 + i).unwrap();
        let elm = small_lm(&mut rng, v);
        let (lambda, gamma) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
        let t = rng.gen_range(1..=4);
        let u = random_utt(&mut rng, 5, v as u32, t, 0);
        let max_len = 3;
        let cfg = BeamConfig {
            beam: 64,
            max_len,
            emit_cap: max_len,
            ..BeamConfig::with_weights(lambda, gamma)
        }
        .exhaustive();
        let nb = beam_search(&u, &hat, Some(&elm), &cfg).unwrap();
        let (best, _, _) = exhaustive_search(&u, &hat, Some(&elm), lambda, gamma, max_len).unwrap();
        agree += usize::from(nb.best().map(|h| &h.tokens) == Some(&best));

        let zero = BeamConfig {
            lambda: 0.0,
            gamma: 0.0,
            ..BeamConfig::default()
        };
        let a = beam_search(&u, &hat, Some(&elm), &zero).unwrap();
        let b = beam_search_fusion_free(&u, &hat, &zero).unwrap();
        let same = a.len() == b.len()
            && a.hypotheses.iter().zip(&b.hypotheses).all(|(x, y)| {
                x.tokens == y.tokens
                    && x.e2e_search.to_bits() == y.e2e_search.to_bits()
                    && x.combined.to_bits() == y.combined.to_bits()
            });
        identical += usize::from(same);
    }
    outcome(
        agree == n as usize && identical == n as usize,
        format!("top-1 = exhaustive argmax on {agree}/{n}; zero-weight search bit-identical on {identical}/{n}"),
    )
}

// 5 -------------------------------------------------------------------------

fn random_list(rng: &mut ChaCha8Rng, k: usize, v: u32) -> NBestList {
    let hypotheses = (0..k)
        .map(|i| {
            let mut tokens: Vec<u32> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..v)).collect();
            tokens.push(v + i as u32);
            let l = tokens.len();
            Hypothesis {
                tokens,
                e2e_search: 0.0,
                e2e_full_sum: Some(rng.gen_range(-30.0..-0.5)),
                ilm: (0..l).map(|_| rng.gen_range(-4.0..0.0)).collect(),
                elm: (0..l).map(|_| rng.gen_range(-4.0..0.0)).collect(),
                elm_eos: None,
                combined: 0.0,
                truncated: false,
            }
        })
        .collect();
    NBestList {
        utterance_id: "r".into(),
        reference: vec![0, 1],
        hypotheses,
    }
}

fn posterior_invariants(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sum_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    let mut single_err: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.gen_range(1..10);
        let list = random_list(&mut rng, k, 3);
        let (mu, nu) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let p = renormalize(&list, mu, nu).unwrap();
        sum_err = sum_err.max((p.probs().iter().sum::<f64>() - 1.0).abs());
        let c = rng.gen_range(-500.0..500.0);
        let mut shifted = list.clone();
        for h in &mut shifted.hypotheses {
            h.e2e_full_sum = h.e2e_full_sum.map(|e| e + c);
        }
        let q = renormalize(&shifted, mu, nu).unwrap();
        for (a, b) in p.probs().iter().zip(q.probs()) {
            shift_err = shift_err.max((a - b).abs());
        }
        let one = TopKPosterior::from_scores(&[rng.gen_range(-900.0..0.0)]).unwrap();
        single_err = single_err.max((one.probs()[0] - 1.0).abs());
    }
    for scores in [vec![-1000.0, -1000.5, -1003.0], vec![700.0, 690.0]] {
        let p = TopKPosterior::from_scores(&scores).unwrap();
        sum_err = sum_err.max((p.probs().iter().sum::<f64>() - 1.0).abs());
    }

    // adding c to every hypothesis' word errors shifts the loss by c and
    // leaves the gradients alone
    let mut loss_err: f64 = 0.0;
    let mut grad_err: f64 = 0.0;
    let mut done = 0;
    let mut seed = 700;
    while done < 20 {
        seed += 1;
        let (_, m, u) = hat_instance(&mut rng, seed);
        let elm = small_lm(&mut rng, 3);
        let beam = BeamConfig {
            beam: 4,
            ..BeamConfig::with_weights(0.2, 0.3)
        };
        let nb = rescore_components(&beam_search(&u, &m, Some(&elm), &beam).unwrap(), &m, &u).unwrap();
        if nb.len() < 2 {
            continue;
        }
        let errs: Vec<f64> = nb.hypotheses.iter().map(|h| nwe(&h.tokens, &nb.reference) as f64).collect();
        let c = rng.gen_range(0.5..5.0);
        let mc = MwerConfig {
            mu: 0.2,
            nu: 0.3,
            theta: 0.0,
            ilm_grad: true,
        };
        let run = |e: &[f64]| {
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape);
            let t = composite_loss_on(&mut tape, &m, &vars, &u, &nb, &mc).unwrap();
            let l = expected_errors_on(&mut tape, t.log_posterior, e).unwrap();
            let v = tape.value(l).item().unwrap();
            (v, flat_grads(&m.params, &tape.backward(l).unwrap()))
        };
        let (l0, g0) = run(&errs);
        let shifted: Vec<f64> = errs.iter().map(|e| e + c).collect();
        let (l1, g1) = run(&shifted);
        loss_err = loss_err.max((l1 - l0 - c).abs());
        for (a, b) in g0.iter().zip(&g1) {
            grad_err = grad_err.max((a - b).abs());
        }
        done += 1;
    }
    let pass = sum_err <= 1e-12 && shift_err <= 1e-12 && single_err <= 1e-12 && loss_err <= 1e-10 && grad_err <= 1e-10;
    outcome(
        pass,
        format!(
            "|sum-1| {sum_err:.1e}, shift {shift_err:.1e}, K=1 {single_err:.1e} (tol 1e-12); NWE shift: loss {loss_err:.1e}, grads {grad_err:.1e} (tol 1e-10)"
        ),
    )
}

// 6 -------------------------------------------------------------------------

fn regular_mwer_reduction(_: &mut Shared) -> Outcome {
    let task = generate_task(&TaskConfig {
        train_size: 200,
        text_size: 1000,
        seed: 6,
        ..TaskConfig::default()
    })
    .unwrap();
    let elm = text_lm(&task);
    let init = HatModel::new(HatConfig::new(task.config.acoustic_vocab(), 40), 6).unwrap();
    let mle = TrainConfig {
        steps: 300,
        learning_rate: MLE_LR,
        seed: 6,
        ..TrainConfig::mle()
    };
    let hat = train_mle(&mle, init, &task.train, &Hooks::default()).unwrap().model;
    let cfg = TrainConfig {
        steps: 100,
        seed: 6,
        ..TrainConfig::mwer()
    };
    let fused = train_mwer(&cfg, hat.clone(), Some(&elm), &task.train, &Hooks::default()).unwrap();
    let free = train_mwer_fusion_free(&cfg, hat, &task.train, &Hooks::default()).unwrap();
    let (a, b) = (fused.log.losses(), free.log.losses());
    let equal = a.len() == 100 && a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    let params = fused.model.params.to_bytes() == free.model.params.to_bytes();
    outcome(
        equal && params,
        format!("{} of 100 step losses bit-equal; final parameters identical: {params}", a.iter().zip(&b).filter(|(x, y)| x.to_bits() == y.to_bits()).count()),
    )
}

// 7 -------------------------------------------------------------------------

fn coarse() -> GridRange {
    GridRange {
        start: 0.0,
        stop: 0.6,
        step: 0.2,
    }
}

fn fusion_sweep(hat: &HatModel, elm: &NGramLm, task: &Task) -> (f64, f64) {
    let spec = SweepSpec {
        lambda: coarse(),
        gamma: coarse(),
        mode: SweepMode::ShallowFusion,
        beam: BeamConfig::default(),
    };
    run_sweep(&spec, hat, elm, [("dev-common", &task.dev_common), ("dev-rare", &task.dev_rare)])
        .unwrap()
        .best()
}

fn test_wers(hat: &HatModel, elm: &NGramLm, task: &Task, w: (f64, f64)) -> (f64, f64) {
    let b = BeamConfig::with_weights(w.0, w.1);
    let (c, _) = evaluate(hat, Some(elm), &task.test_common, &b).unwrap();
    let (r, _) = evaluate(hat, Some(elm), &task.test_rare, &b).unwrap();
    (c, r)
}

fn shallow_fusion_gain(sh: &mut Shared) -> Outcome {
    let mut reg = Vec::new();
    let mut aware = Vec::new();
    let mut per_seed = Vec::new();
    for seed in 0..5 {
        let regular = sh.regular_mwer(seed);
        let r = sh.run(seed);
        let w0 = fusion_sweep(&r.mle, &r.elm, &r.task);
        let cfg = TrainConfig {
            lambda: w0.0,
            gamma: w0.1,
            tie_weights: true,
            ..mwer_config(seed)
        };
        let lm_aware = train_mwer(&cfg, r.mle.clone(), Some(&r.elm), &r.task.train, &Hooks::default())
            .unwrap()
            .model;
        let wr = fusion_sweep(&regular, &r.elm, &r.task);
        let wa = fusion_sweep(&lm_aware, &r.elm, &r.task);
        let a = test_wers(&regular, &r.elm, &r.task, wr);
        let b = test_wers(&lm_aware, &r.elm, &r.task, wa);
        per_seed.push(format!("s{seed} rare {:.1}->{:.1}", a.1, b.1));
        reg.push(a);
        aware.push(b);
    }
    let mean = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let (rc, rr) = (mean(&reg, |x| x.0), mean(&reg, |x| x.1));
    let (ac, ar) = (mean(&aware, |x| x.0), mean(&aware, |x| x.1));
    let rel = (rr - ar) / rr;
    let pass = ar < rr && rel >= 0.03 && ac - rc <= 1.0;
    outcome(
        pass,
        format!(
            "rare WER regular {rr:.2} vs LM-aware {ar:.2} ({:.1}% rel, need >= 3%); common {rc:.2} vs {ac:.2} (max +1.0 abs); {}",
            100.0 * rel,
            per_seed.join(", ")
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn lfm_run(hat: &HatModel, elm: &NGramLm, task: &Task, cfg: &TrainConfig, seed: u64) -> (LfmModel, RunLog, u64) {
    let init = LfmModel::new(LfmConfig::new(hat.vocab_size(), hat.config.enc_dim), seed).unwrap();
    let dev = vec![
        ("dev-common".to_string(), task.dev_common.clone()),
        ("dev-rare".to_string(), task.dev_rare.clone()),
    ];
    let out = train_lfm(cfg, hat, elm, init, &task.train, &dev).unwrap();
    assert!(out.diverged.is_none());
    let decodes = out.log.total_decodes();
    (out.model, out.log, decodes)
}

fn rescoring_parity(sh: &mut Shared) -> Outcome {
    let beam = BeamConfig::default();
    let mut scalar = Vec::new();
    let mut learned = Vec::new();
    let mut notes = Vec::new();
    let mut sweeps_in_lfm_path = 0;
    for seed in 0..3 {
        let mut hat = sh.regular_mwer(seed);
        hat.params.set_trainable(false);
        let r = sh.run(seed);
        let spec = SweepSpec {
            mode: SweepMode::Rescoring,
            beam: beam.clone(),
            ..SweepSpec::default()
        };
        let best = run_sweep(&spec, &hat, &r.elm, [("dev-common", &r.task.dev_common), ("dev-rare", &r.task.dev_rare)])
            .unwrap()
            .best();
        let tests = [&r.task.test_common, &r.task.test_rare];
        let lists: Vec<Vec<NBestList>> = tests.iter().map(|t| rescoring_lists(&hat, &r.elm, t, &beam).unwrap()).collect();
        let s: Vec<f64> = lists
            .iter()
            .map(|ls| {
                let out: Vec<NBestList> = ls.iter().map(|l| rescore_scalar(l, best.0, best.1).unwrap()).collect();
                top1_wer(&out).unwrap()
            })
            .collect();

        let before = sweep_evaluations();
        let (lfm, log, decodes) = lfm_run(&hat, &r.elm, &r.task, &TrainConfig { seed, ..TrainConfig::lfm() }, seed);
        let l: Vec<f64> = lists
            .iter()
            .zip(tests)
            .map(|(ls, us)| {
                let out: Vec<NBestList> = ls
                    .iter()
                    .zip(us.iter())
                    .map(|(nb, u)| rescore_with_lfm(u, nb, &hat, &lfm).unwrap())
                    .collect();
                top1_wer(&out).unwrap()
            })
            .collect();
        sweeps_in_lfm_path += sweep_evaluations() - before;
        notes.push(format!(
            "s{seed} scalar ({:.1},{:.1}) {:.2} vs LFM {:.2} [{decodes} decodes]",
            best.0,
            best.1,
            0.5 * (s[0] + s[1]),
            0.5 * (l[0] + l[1])
        ));
        scalar.push(0.5 * (s[0] + s[1]));
        learned.push(0.5 * (l[0] + l[1]));
        sh.lfm_logs.push(log);
    }
    let s = scalar.iter().sum::<f64>() / 3.0;
    let l = learned.iter().sum::<f64>() / 3.0;
    let rel = (l - s) / s;
    outcome(
        rel <= 0.02 && sweeps_in_lfm_path == 0,
        format!(
            "avg test WER scalar {s:.2} vs LFM {l:.2} ({:+.1}% rel, max +2%); LFM sweep evaluations {sweeps_in_lfm_path}; {}",
            100.0 * rel,
            notes.join(", ")
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn causal(lfm: &LfmModel, enc: &hatlm_autodiff::Tensor, rng: &mut ChaCha8Rng, v: u32) -> bool {
    (0..30).all(|_| {
        let len = rng.gen_range(2..8);
        let a: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v)).collect();
        let cut = rng.gen_range(1..len);
        let mut b = a.clone();
        for t in b.iter_mut().skip(cut) {
            *t = rng.gen_range(0..v);
        }
        b.truncate(rng.gen_range(cut..=len));
        let (wa, wb) = (lfm.forward(enc, &a).unwrap(), lfm.forward(enc, &b).unwrap());
        (0..cut).all(|l| wa.mu[l].to_bits() == wb.mu[l].to_bits() && wa.nu[l].to_bits() == wb.nu[l].to_bits())
    })
}

fn lm_bytes(lm: &NGramLm, dir: &std::path::Path) -> Vec<u8> {
    let p = dir.join("elm.lm");
    ExternalLm::NGram(lm.clone()).save(&p).unwrap();
    std::fs::read(p).unwrap()
}

fn lfm_reductions(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let hat = {
        let mut h = HatModel::new(HatConfig::tiny(5, 3), 9).unwrap();
        h.params.set_trainable(false);
        h
    };
    let u = utt(vec![1, 2, 3], vec![0, 1]);
    let mut same = 0;
    for _ in 0..100 {
        let k = rng.gen_range(1..9);
        let list = random_list(&mut rng, k, 3);
        let (cm, cn) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let mut m = LfmModel::new(LfmConfig::new(16, hat.config.enc_dim), 10).unwrap();
        m.set_constant_head(cm, cn).unwrap();
        let a = rescore_with_lfm(&u, &list, &hat, &m).unwrap();
        same += usize::from(same_ranking(&a, &rescore_scalar(&list, cm, cn).unwrap()));
    }

    let task = generate_task(&TaskConfig {
        train_size: 120,
        dev_size: 20,
        text_size: 1000,
        seed: 9,
        ..TaskConfig::default()
    })
    .unwrap();
    let elm = text_lm(&task);
    let init = HatModel::new(HatConfig::new(task.config.acoustic_vocab(), 40), 9).unwrap();
    let mle = TrainConfig {
        steps: 200,
        learning_rate: MLE_LR,
        seed: 9,
        ..TrainConfig::mle()
    };
    let mut e2e = train_mle(&mle, init, &task.train, &Hooks::default()).unwrap().model;
    e2e.params.set_trainable(false);
    let dir = tempfile::tempdir().unwrap();
    let (hat_before, lm_before) = (e2e.params.to_bytes(), lm_bytes(&elm, dir.path()));
    let lfm0 = LfmModel::new(LfmConfig::new(40, e2e.config.enc_dim), 9).unwrap();
    let enc = encoder_states(&e2e, &task.dev_rare[0]).unwrap();
    let causal_before = causal(&lfm0, &enc, &mut rng, 40);
    let cfg = TrainConfig {
        steps: 100,
        log_every: 25,
        seed: 9,
        ..TrainConfig::lfm()
    };
    let out = train_lfm(&cfg, &e2e, &elm, lfm0.clone(), &task.train, &[]).unwrap();
    let moved = out.model.params.to_bytes() != lfm0.params.to_bytes();
    let causal_after = causal(&out.model, &enc, &mut rng, 40);
    let frozen = e2e.params.to_bytes() == hat_before && lm_bytes(&elm, dir.path()) == lm_before;
    let pass = same == 100 && causal_before && causal_after && frozen && moved;
    outcome(
        pass,
        format!(
            "constant head ranks like scalar on {same}/100 lists; causal before/after training {causal_before}/{causal_after}; E2E and ELM bytes unchanged {frozen}; LFM updated {moved}"
        ),
    )
}

// 10 ------------------------------------------------------------------------

fn nwe_oracle(_: &mut Shared) -> Outcome {
    let seqs = all_sequences(3, 4);
    let mut mismatches = 0;
    let mut pairs = 0;
    for a in &seqs {
        for b in &seqs {
            pairs += 1;
            mismatches += usize::from(nwe(a, b) != edit_distance_recursive(a, b));
        }
    }
    // one error in a one-word utterance and none in a nine-word one: the
    // corpus rate is 1/10, the mean of per-utterance rates 1/2
    let refs = vec![vec![1], (0..9).collect::<Vec<u32>>()];
    let hyps = vec![vec![2], (0..9).collect::<Vec<u32>>()];
    let corpus = wer(&hyps, &refs).unwrap();
    let mean_of_rates = 100.0 * (1.0 + 0.0) / 2.0;
    let pass = mismatches == 0 && (corpus - 10.0).abs() < 1e-12 && corpus != mean_of_rates;
    outcome(
        pass,
        format!("{pairs} pairs, {mismatches} mismatches; corpus WER {corpus:.2} vs mean of rates {mean_of_rates:.2}"),
    )
}

// 11 ------------------------------------------------------------------------

fn weight_series_check(sh: &mut Shared) -> Outcome {
    if sh.lfm_logs.is_empty() {
        // criterion 8 was not run: train one LFM of its own
        let hat = {
            let mut h = sh.regular_mwer(0);
            h.params.set_trainable(false);
            h
        };
        let r = sh.run(0);
        let (_, log, _) = lfm_run(&hat, &r.elm, &r.task, &TrainConfig::lfm(), 0);
        sh.lfm_logs.push(log);
    }
    let mut ok = true;
    let mut points = 0;
    for log in &sh.lfm_logs {
        let cfg = log
            .records
            .iter()
            .find_map(|r| match r {
                LogRecord::Header { config, .. } => Some(config.clone()),
                _ => None,
            })
            .unwrap();
        let series = weight_series(&log.records);
        let steps: Vec<usize> = (0..=cfg.steps).step_by(cfg.log_every).chain([cfg.steps]).collect();
        for s in steps {
            for set in ["train", "dev-common", "dev-rare"] {
                let found = series.iter().filter(|p| p.step == s && p.set == set).count();
                ok &= found >= 1;
            }
        }
        for p in &series {
            let v = [p.mean_mu, p.std_mu, p.mean_nu, p.std_nu];
            ok &= v.iter().all(|x| x.is_finite() && *x >= 0.0);
            points += 1;
        }
        let mut report = Report::new("fusion weights", vec!["test".into()]);
        report.weights = series.clone();
        let text = report.render();
        ok &= series.iter().all(|p| {
            text.contains(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                p.step, p.set, p.mean_mu, p.std_mu, p.mean_nu, p.std_nu
            ))
        });
    }
    outcome(
        ok,
        format!("{} runs, {points} weight points, all present, finite and nonnegative; report renders every point", sh.lfm_logs.len()),
    )
}

type Check = fn(&mut Shared) -> Outcome;

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, f64, Check); 11] = [
        (1, "lattice oracle", 10.0, lattice_oracle),
        (2, "normalization", 5.0, normalization),
        (3, "gradient suites", 120.0, gradient_suites),
        (4, "search oracle", 60.0, search_oracle),
        (5, "posterior invariants", 10.0, posterior_invariants),
        (6, "regular MWER reduction", 120.0, regular_mwer_reduction),
        (7, "shallow-fusion gain", 900.0, shallow_fusion_gain),
        (8, "rescoring parity", 900.0, rescoring_parity),
        (9, "LFM reductions", 120.0, lfm_reductions),
        (10, "NWE oracle", 5.0, nwe_oracle),
        (11, "fusion-weight series", 900.0, weight_series_check),
    ];
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    for (n, name, limit, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(|| check(&mut shared))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let pass = r.pass && secs < limit;
        println!(
            "{} criterion {n} ({name}): {} [{secs:.1}s, limit {limit:.0}s]",
            if pass { "PASS" } else { "FAIL" },
            r.detail
        );
        if !pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("all selected criteria pass");
    } else {
        println!("failed criteria: {failed:?}");
        if std::env::var("HATLM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
