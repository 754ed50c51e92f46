//! Oracle checks for the DPO objective: closed-form values, the swap
//! identity, and central finite differences over every parameter family.

use counterstyle_core::dpo::{dpo_loss, dpo_loss_with_ref, margin, sft_loss};
use counterstyle_core::lm::{init_model, ModelConfig, PolicyParams, Role};
use counterstyle_core::pairs::{PairKind, PreferencePair, Prompt, Provenance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const TINY_VOCAB: usize = 17;

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig { vocab_size: TINY_VOCAB, d_model: 12, n_layers: 1, n_heads: 3, ctx_len: 24, seed }
}

fn world_config(seed: u64) -> ModelConfig {
    ModelConfig { ctx_len: 96, seed, ..ModelConfig::default() }
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

fn random_pair(rng: &mut ChaCha8Rng, id: usize, vocab: usize) -> PreferencePair {
    let plen = rng.gen_range(3..7);
    let clen = rng.gen_range(2..6);
    let rlen = rng.gen_range(2..6);
    let prompt = random_seq(rng, plen, vocab);
    PreferencePair {
        id,
        kind: PairKind::Enc,
        perceived_prompt: Prompt::Tokens(prompt.clone()),
        chosen: random_seq(rng, clen, vocab),
        rejected: random_seq(rng, rlen, vocab),
        provenance: Provenance {
            control_prompt: Prompt::Tokens(prompt.clone()),
            treatment_prompt: Prompt::Tokens(prompt),
            negative_prompt: None,
            generator: "oracle".into(),
            seed: id as u64,
        },
    }
}

fn param_count(params: &PolicyParams) -> usize {
    params.tensors.values().map(|t| t.len()).sum()
}

#[test]
fn identical_models_sit_at_ln2_and_beta_zero_kills_gradients_quickly() {
    let start = Instant::now();
    let policy = init_model(&world_config(1)).unwrap();
    let reference = policy.with_role(Role::Reference);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<PreferencePair> =
        (0..8).map(|i| random_pair(&mut rng, i, TINY_VOCAB)).collect();

    let out = dpo_loss(&policy, &reference, &batch, 0.1).unwrap();
    assert!(
        (out.loss - std::f64::consts::LN_2).abs() < 1e-9,
        "identical models: loss {} vs ln 2",
        out.loss
    );
    assert!(out.margins.iter().all(|m| *m == 0.0));

    let other = init_model(&world_config(3)).unwrap().with_role(Role::Reference);
    let zero_beta = dpo_loss(&policy, &other, &batch, 0.0).unwrap();
    let norm: f64 = zero_beta
        .grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    assert!(norm < 1e-9, "beta=0 gradient norm {norm}");
    assert!(
        start.elapsed().as_secs_f64() < 1.0,
        "ln2/zero-grad oracle took {:?}",
        start.elapsed()
    );
}

#[test]
fn scalar_margin_oracle_matches_closed_form() {
    // Engineer an exact margin of 0.2: measure the policy's log-ratio gap at
    // beta=1, then hand the loss a reference constant sitting 2.0 below it.
    let policy = init_model(&tiny_config(4)).unwrap();
    let reference = init_model(&tiny_config(5)).unwrap().with_role(Role::Reference);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pair = random_pair(&mut rng, 0, TINY_VOCAB);
    let prompt = pair.perceived_prompt.tokens().unwrap().to_vec();

    let policy_gap =
        margin(&policy, &policy.with_role(Role::Reference), &prompt, &pair.chosen, &pair.rejected, 1.0)
            .unwrap();
    assert_eq!(policy_gap, 0.0);
    let gap = margin(&policy, &reference, &prompt, &pair.chosen, &pair.rejected, 1.0).unwrap();

    // ref constant = policy log-ratio − 2.0, so M = 0.1 · 2.0 = 0.2
    let policy_ratio = {
        use counterstyle_core::lm::sequence_logprob;
        sequence_logprob(&policy, &prompt, &pair.chosen).unwrap()
            - sequence_logprob(&policy, &prompt, &pair.rejected).unwrap()
    };
    let out = dpo_loss_with_ref(&policy, &[pair.clone()], &[policy_ratio - 2.0], 0.1).unwrap();
    assert!((out.margins[0] - 0.2).abs() < 1e-12, "margin {}", out.margins[0]);
    // ln(1 + e^{−0.2}), evaluated independently
    assert!((out.loss - 0.598_138_869_381_591_8).abs() < 1e-9, "loss {}", out.loss);

    let swapped = dpo_loss_with_ref(&policy, &[pair], &[policy_ratio + 2.0], 0.1);
    // swapping the sign of the constant flips the margin
    assert!((swapped.unwrap().margins[0] + 0.2).abs() < 1e-12);
    assert!(gap.is_finite());
}

#[test]
fn swap_identity_on_100_random_pairs() {
    let policy = init_model(&tiny_config(7)).unwrap();
    let reference = init_model(&tiny_config(8)).unwrap().with_role(Role::Reference);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let pair = random_pair(&mut rng, i, TINY_VOCAB);
        let mut swapped = pair.clone();
        std::mem::swap(&mut swapped.chosen, &mut swapped.rejected);
        let l = dpo_loss(&policy, &reference, &[pair], 0.1).unwrap();
        let ls = dpo_loss(&policy, &reference, &[swapped], 0.1).unwrap();
        let m = l.margins[0];
        assert!(
            (ls.loss - (l.loss + m)).abs() < 1e-9,
            "pair {i}: L_swap {} != L {} + M {m}",
            ls.loss,
            l.loss
        );
    }
}

/// Central-difference gradient of `f` at 200 seeded coordinates, compared
/// against the analytic gradient with a floored relative error.
fn fd_check(
    params: &PolicyParams,
    grads: &std::collections::BTreeMap<String, counterstyle_core::tensor::Tensor>,
    mut f: impl FnMut(&PolicyParams) -> f64,
    coords: usize,
    seed: u64,
) {
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let total: usize = param_count(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let mut flat = rng.gen_range(0..total);
        let mut name = &names[0];
        for n in &names {
            let len = params.tensors[n].len();
            if flat < len {
                name = n;
                break;
            }
            flat -= len;
        }
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[flat]);
        let mut plus = params.clone();
        plus.tensors.get_mut(name).unwrap().data_mut()[flat] += eps;
        let mut minus = params.clone();
        minus.tensors.get_mut(name).unwrap().data_mut()[flat] -= eps;
        let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
        worst = worst.max(rel);
        assert!(
            rel < 1e-5,
            "coordinate {flat} of `{name}`: analytic {analytic} vs fd {fd} (rel {rel})"
        );
    }
    assert!(worst < 1e-5);
}

#[test]
fn dpo_gradient_matches_finite_differences() {
    let start = Instant::now();
    let config = tiny_config(10);
    let policy = init_model(&config).unwrap();
    assert!(param_count(&policy) <= 10_000, "{} params", param_count(&policy));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch: Vec<PreferencePair> =
        (0..6).map(|i| random_pair(&mut rng, i, TINY_VOCAB)).collect();
    // fixed reference constants: FD varies the policy only
    let ref_diffs: Vec<f64> = (0..batch.len()).map(|i| 0.3 * i as f64 - 0.7).collect();

    let out = dpo_loss_with_ref(&policy, &batch, &ref_diffs, 0.1).unwrap();
    fd_check(
        &policy,
        &out.grads,
        |p| dpo_loss_with_ref(p, &batch, &ref_diffs, 0.1).unwrap().loss,
        200,
        12,
    );
    assert!(start.elapsed().as_secs_f64() < 120.0, "took {:?}", start.elapsed());
}

#[test]
fn sft_gradient_matches_finite_differences() {
    let start = Instant::now();
    let config = tiny_config(13);
    let policy = init_model(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let batch: Vec<(Vec<u32>, Vec<u32>)> = (0..6)
        .map(|_| {
            let plen = rng.gen_range(3..7);
            let tlen = rng.gen_range(2..6);
            (random_seq(&mut rng, plen, TINY_VOCAB), random_seq(&mut rng, tlen, TINY_VOCAB))
        })
        .collect();
    let (_, grads) = sft_loss(&policy, &batch).unwrap();
    fd_check(&policy, &grads, |p| sft_loss(p, &batch).unwrap().0, 200, 15);
    assert!(start.elapsed().as_secs_f64() < 120.0, "took {:?}", start.elapsed());
}
