mod common;

use common::{flat_grads, utt};
use hatlm::decoder::{beam_search, rescore_components, BeamConfig, NBestList};
use hatlm::hat::{HatConfig, HatModel, Utterance};
use hatlm::lm::{NGramLm, Smoothing};
use hatlm::mwer::{composite_loss_on, mwer_loss, renormalize, MwerConfig, TopKPosterior};
use hatlm_autodiff::Tape;

fn instance() -> (HatModel, Utterance, NBestList) {
    let hat = HatModel::new(HatConfig::tiny(5, 3), 7).unwrap();
    let lm = NGramLm::train(&[vec![0, 1], vec![2, 2, 1]], 3, 2, Smoothing::default(), false, true)
        .unwrap();
    let u = utt(vec![1, 4, 2], vec![2, 1]);
    let cfg = BeamConfig {
        beam: 4,
        ..BeamConfig::with_weights(0.2, 0.3)
    };
    let nb = beam_search(&u, &hat, Some(&lm), &cfg).unwrap();
    let nb = rescore_components(&nb, &hat, &u).unwrap();
    (hat, u, nb)
}

fn loss_and_grads(hat: &HatModel, u: &Utterance, nb: &NBestList, cfg: &MwerConfig) -> (f64, f64, Vec<f64>) {
    let mut tape = Tape::new();
    let vars = hat.bind(&mut tape);
    let t = composite_loss_on(&mut tape, hat, &vars, u, nb, cfg).unwrap();
    let g = tape.backward(t.loss).unwrap();
    (
        tape.value(t.loss).item().unwrap(),
        tape.value(t.mwer).item().unwrap(),
        flat_grads(&hat.params, &g),
    )
}

#[test]
fn loss_examples() {
    let p = TopKPosterior::from_scores(&[0.2f64.ln(), 0.6f64.ln()]).unwrap();
    let mut nb = NBestList {
        utterance_id: "x".into(),
        reference: vec![1, 2],
        hypotheses: vec![],
    };
    let (_, _, base) = instance();
    let mut a = base.hypotheses[0].clone();
    a.tokens = vec![1, 2];
    let mut b = a.clone();
    b.tokens = vec![0];
    nb.hypotheses = vec![a, b];
    assert!((mwer_loss(&p, &nb).unwrap() - 1.5).abs() < 1e-15);
    // constant error count
    nb.hypotheses[0].tokens = vec![2, 2];
    nb.hypotheses[1].tokens = vec![1, 1];
    let q = TopKPosterior::from_scores(&[-1.3, 0.4]).unwrap();
    assert!((mwer_loss(&q, &nb).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn tape_posterior_matches_plain_renormalization() {
    let (hat, u, nb) = instance();
    let cfg = MwerConfig {
        mu: 0.2,
        nu: 0.3,
        theta: 0.0,
        ilm_grad: true,
    };
    let mut tape = Tape::new();
    let vars = hat.bind(&mut tape);
    let t = composite_loss_on(&mut tape, &hat, &vars, &u, &nb, &cfg).unwrap();
    let plain = renormalize(&nb, 0.2, 0.3).unwrap();
    // stored ILM scores come from the search runtime, equal up to rounding
    for (a, b) in tape.value(t.log_posterior).data().iter().zip(&plain.log_probs) {
        assert!((a - b).abs() < 1e-12);
    }
    let l = mwer_loss(&plain, &nb).unwrap();
    assert!((tape.value(t.mwer).item().unwrap() - l).abs() < 1e-12);
}

#[test]
fn theta_zero_is_plain_mwer_and_default_theta_combines() {
    let (hat, u, nb) = instance();
    let zero = MwerConfig {
        theta: 0.0,
        ..MwerConfig::default()
    };
    let (l0, m0, _) = loss_and_grads(&hat, &u, &nb, &zero);
    assert_eq!(l0, m0);
    let (l, m, _) = loss_and_grads(&hat, &u, &nb, &MwerConfig::default());
    assert_eq!(m, m0);
    let ref_lp = hat.full_sum_log_prob(&u, &u.reference).unwrap();
    assert_eq!(l, m - 0.005 * ref_lp);
}

#[test]
fn theta_scales_the_anchor_gradient() {
    let (hat, u, nb) = instance();
    let mut norms = Vec::new();
    let (_, _, g0) = loss_and_grads(&hat, &u, &nb, &MwerConfig { theta: 0.0, ..MwerConfig::default() });
    for theta in [0.005, 0.05, 0.5] {
        let (_, _, g) = loss_and_grads(&hat, &u, &nb, &MwerConfig { theta, ..MwerConfig::default() });
        let anchor: f64 = g.iter().zip(&g0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        norms.push(anchor);
    }
    assert!(norms[0] > 0.0 && norms[0] < norms[1] && norms[1] < norms[2]);
    assert!((norms[1] / norms[0] - 10.0).abs() < 1e-6);
}

#[test]
fn ilm_gradient_switch() {
    let (hat, u, nb) = instance();
    let on = MwerConfig {
        mu: 0.4,
        nu: 0.3,
        theta: 0.0,
        ilm_grad: true,
    };
    let off = MwerConfig {
        ilm_grad: false,
        ..on.clone()
    };
    let (la, _, ga) = loss_and_grads(&hat, &u, &nb, &on);
    let (lb, _, gb) = loss_and_grads(&hat, &u, &nb, &off);
    assert_eq!(la, lb);
    assert_ne!(ga, gb);
    // with mu = 0 the switch has nothing to stop
    let (_, _, gc) = loss_and_grads(&hat, &u, &nb, &MwerConfig { mu: 0.0, ..on.clone() });
    let (_, _, gd) = loss_and_grads(&hat, &u, &nb, &MwerConfig { mu: 0.0, ..off });
    assert_eq!(gc, gd);
}
