mod common;

use common::{oracle, oracle_brute_force, random_checkpoint};
use gensense::baseline::Checkpoint;
use gensense::degrade::{apply_chain, DegradationSpec};
use gensense::nn::{accuracy, LabeledBatch};
use gensense::prng::SplitMix64;
use gensense::susceptibility::{compute_delta_phi, rank_clusters, SwapContext, UnitOfAnalysis};
use gensense::Tensor;
use proptest::prelude::*;

const RANK_LAYER: usize = 3;

fn eval_set(n: usize, classes: usize, seed: u64) -> LabeledBatch {
    let mut rng = SplitMix64::new(seed);
    let x = (0..n * 144).map(|_| rng.next_f64()).collect();
    let labels = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
    LabeledBatch::new(Tensor::new(vec![n, 1, 12, 12], x).unwrap(), labels).unwrap()
}

fn blur() -> Vec<DegradationSpec> {
    vec![DegradationSpec::blur(1.0, "visible")]
}

/// Reorders the output channels of the ranking conv and the matching
/// input blocks of the first dense layer, which leaves the function intact.
fn permute_rank_channels(ckpt: &Checkpoint, perm: &[usize]) -> Checkpoint {
    let mut out = ckpt.clone();
    let conv = out.params.layers[RANK_LAYER].as_mut().unwrap();
    let per_out = conv.weight.len() / perm.len();
    let (w, b) = (conv.weight.data().to_vec(), conv.bias.data().to_vec());
    for (old, &new) in perm.iter().enumerate() {
        conv.weight.data_mut()[new * per_out..(new + 1) * per_out].copy_from_slice(&w[old * per_out..(old + 1) * per_out]);
        conv.bias.data_mut()[new] = b[old];
    }
    let dense = out.params.layers[7].as_mut().unwrap();
    let (rows, cols) = (dense.weight.shape()[0], dense.weight.shape()[1]);
    let block = cols / perm.len();
    let w = dense.weight.data().to_vec();
    for r in 0..rows {
        for (old, &new) in perm.iter().enumerate() {
            let dst = r * cols + new * block;
            let src = r * cols + old * block;
            dense.weight.data_mut()[dst..dst + block].copy_from_slice(&w[src..src + block]);
        }
    }
    out
}

#[test]
fn ranking_is_permutation_equivariant() {
    let ckpt = random_checkpoint(4, 11);
    let eval = eval_set(40, 4, 12);
    let mut perm: Vec<usize> = (0..16).collect();
    SplitMix64::new(13).shuffle(&mut perm);
    let permuted = permute_rank_channels(&ckpt, &perm);
    let a = compute_delta_phi(&ckpt, RANK_LAYER, &eval, "eval", &blur(), 1).unwrap();
    let b = compute_delta_phi(&permuted, RANK_LAYER, &eval, "eval", &blur(), 1).unwrap();
    assert_eq!(a.baseline_accuracy, b.baseline_accuracy);
    for (old, &new) in perm.iter().enumerate() {
        assert_eq!(a.delta_phi[old], b.delta_phi[new], "channel {old} -> {new}");
    }
}

#[test]
fn parallel_ranking_matches_serial() {
    let ckpt = random_checkpoint(3, 21);
    let eval = eval_set(30, 3, 22);
    let serial = compute_delta_phi(&ckpt, RANK_LAYER, &eval, "eval", &blur(), 1).unwrap();
    for threads in [2, 3, 7, 64] {
        let par = compute_delta_phi(&ckpt, RANK_LAYER, &eval, "eval", &blur(), threads).unwrap();
        assert_eq!(par.to_text(), serial.to_text(), "{threads} threads");
        let clusters_serial = rank_clusters(&ckpt, RANK_LAYER, &eval, "eval", &blur(), 3, 1).unwrap();
        let clusters_par = rank_clusters(&ckpt, RANK_LAYER, &eval, "eval", &blur(), 3, threads).unwrap();
        assert_eq!(clusters_par, clusters_serial);
    }
}

#[test]
fn swapping_every_channel_equals_the_degraded_forward_pass() {
    let ckpt = random_checkpoint(4, 31);
    let eval = eval_set(40, 4, 32);
    let degraded = apply_chain(&blur(), &eval.inputs).unwrap();
    let ctx = SwapContext::new(&ckpt, RANK_LAYER, &eval, &degraded).unwrap();
    let all: Vec<usize> = (0..ctx.channels()).collect();
    let direct = accuracy(&ckpt.net().unwrap().forward_range(&degraded, 0, 10).unwrap(), &eval.labels);
    assert_eq!(ctx.accuracy(&all).unwrap(), direct);
    let clean = accuracy(&ckpt.net().unwrap().forward_range(&eval.inputs, 0, 10).unwrap(), &eval.labels);
    assert_eq!(ctx.accuracy(&[]).unwrap(), clean);
}

#[test]
fn clusters_of_one_are_single_channels() {
    let ckpt = random_checkpoint(3, 41);
    let eval = eval_set(24, 3, 42);
    let single = compute_delta_phi(&ckpt, RANK_LAYER, &eval, "eval", &blur(), 1).unwrap();
    let clusters = rank_clusters(&ckpt, RANK_LAYER, &eval, "eval", &blur(), 1, 1).unwrap();
    assert_eq!(single, clusters);
    let fives = rank_clusters(&ckpt, RANK_LAYER, &eval, "eval", &blur(), 5, 1).unwrap();
    assert_eq!(fives.unit_of_analysis, UnitOfAnalysis::Cluster(5));
    assert_eq!(fives.delta_phi.len(), 4);
    assert_eq!(fives.members(3), vec![15]);
    assert!(rank_clusters(&ckpt, RANK_LAYER, &eval, "eval", &blur(), 0, 1).is_err());
    assert!(rank_clusters(&ckpt, RANK_LAYER, &eval, "eval", &blur(), 17, 1).is_err());
}

#[test]
fn oracle_matches_brute_force() {
    for classes in 2..=6 {
        let (ckpt, eval) = oracle(classes);
        let blank = Tensor::zeros(eval.inputs.shape());
        let ctx = SwapContext::new(&ckpt, 0, &eval, &blank).unwrap();
        for set in [vec![], vec![0], vec![1], vec![0, 1]] {
            assert_eq!(ctx.accuracy(&set).unwrap(), oracle_brute_force(classes, &set), "{classes} classes, swap {set:?}");
        }
        let a_high = ctx.accuracy(&[]).unwrap();
        assert_eq!(a_high, 1.0);
        assert_eq!(a_high - ctx.accuracy(&[0]).unwrap(), 1.0 - 1.0 / classes as f64);
        assert_eq!(a_high - ctx.accuracy(&[1]).unwrap(), 0.0);
    }
}

#[test]
fn non_channel_layers_are_rejected() {
    let ckpt = random_checkpoint(3, 51);
    let eval = eval_set(6, 3, 52);
    assert!(compute_delta_phi(&ckpt, 7, &eval, "eval", &blur(), 1).is_err());
    assert!(compute_delta_phi(&ckpt, 99, &eval, "eval", &blur(), 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn drops_are_bounded_accuracy_differences(seed in 0u64..1000, sigma in 0.3f64..1.5) {
        let ckpt = random_checkpoint(3, seed);
        let eval = eval_set(15, 3, seed + 1);
        let chain = vec![DegradationSpec::blur(sigma, "visible")];
        let r = compute_delta_phi(&ckpt, RANK_LAYER, &eval, "eval", &chain, 1).unwrap();
        prop_assert_eq!(r.delta_phi.len(), 16);
        for &d in &r.delta_phi {
            prop_assert!(d <= r.baseline_accuracy && d >= r.baseline_accuracy - 1.0);
            let count = d * 15.0;
            prop_assert!((count - count.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_degradation_never_moves_accuracy(seed in 0u64..1000) {
        let ckpt = random_checkpoint(4, seed);
        let eval = eval_set(8, 4, seed + 2);
        let r = compute_delta_phi(&ckpt, RANK_LAYER, &eval, "eval", &[DegradationSpec::identity("visible")], 1).unwrap();
        prop_assert!(r.delta_phi.iter().all(|&d| d == 0.0));
    }
}
