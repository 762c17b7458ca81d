use metacon::autodiff::Graph;
use metacon::losses::{
    alignment_loss, alignment_pairs, contrastive_loss, total_loss, AlignGroup, ContrastiveConfig, Direction,
    Reduction,
};
use metacon::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(temperature: f64, direction: Direction) -> ContrastiveConfig {
    ContrastiveConfig { temperature, direction }
}

fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn normalized(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    let mut v = random(rng, n, d);
    for row in v.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn contrastive(x: &[f64], t: &[f64], n: usize, d: usize, c: ContrastiveConfig) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_f64(&[n, d], x).unwrap());
    let b = g.constant(Tensor::from_f64(&[n, d], t).unwrap());
    let l = contrastive_loss(&mut g, a, b, &c).unwrap();
    g.value(l).item()
}

#[test]
fn single_pair_loss_is_zero() {
    for dir in [Direction::ImageToText, Direction::Symmetric] {
        assert_eq!(contrastive(&[0.6, 0.8], &[0.0, 1.0], 1, 2, cfg(0.1, dir)), 0.0);
    }
}

#[test]
fn uniform_similarities_give_ln_n() {
    for n in [2, 4, 8] {
        for tau in [0.1, 1.0] {
            for dir in [Direction::ImageToText, Direction::Symmetric] {
                let rows: Vec<f64> = (0..n).flat_map(|_| [0.6, 0.8]).collect();
                let l = contrastive(&rows, &rows, n, 2, cfg(tau, dir));
                assert!((l - (n as f64).ln()).abs() < 1e-10, "n={n} tau={tau}: {l}");
            }
        }
    }
}

#[test]
fn two_pair_hand_case() {
    let e = [1.0, 0.0, 0.0, 1.0];
    let l = contrastive(&e, &e, 2, 2, cfg(1.0, Direction::ImageToText));
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((l - expected).abs() < 1e-10, "{l} vs {expected}");
    assert!((l - 0.3133).abs() < 1e-4);
}

#[test]
fn loss_falls_toward_zero_as_temperature_drops_on_dominant_diagonal() {
    let e = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let mut last = f64::INFINITY;
    for tau in [1.0, 0.5, 0.1, 0.02] {
        let l = contrastive(&e, &e, 3, 3, cfg(tau, Direction::ImageToText));
        assert!(l >= 0.0 && l < last);
        last = l;
    }
    assert!(last < 1e-15);
}

#[test]
fn image_to_text_normalizes_over_text_candidates() {
    // asymmetric similarity matrix: i2t and t2i differ
    let x = [1.0, 0.0, 0.6, 0.8];
    let t = [0.8, 0.6, 0.0, 1.0];
    let i2t = contrastive(&x, &t, 2, 2, cfg(0.5, Direction::ImageToText));
    let sym = contrastive(&x, &t, 2, 2, cfg(0.5, Direction::Symmetric));
    let s = [[0.8, 0.0], [0.96, 0.8]];
    let row = |i: usize| -((s[i][i] / 0.5f64).exp() / ((s[i][0] / 0.5f64).exp() + (s[i][1] / 0.5f64).exp())).ln();
    let col = |j: usize| -((s[j][j] / 0.5f64).exp() / ((s[0][j] / 0.5f64).exp() + (s[1][j] / 0.5f64).exp())).ln();
    let want_i2t = (row(0) + row(1)) / 2.0;
    let want_t2i = (col(0) + col(1)) / 2.0;
    assert!((i2t - want_i2t).abs() < 1e-14);
    assert!((sym - (want_i2t + want_t2i) / 2.0).abs() < 1e-14);
}

proptest! {
    #[test]
    fn permuting_pairs_leaves_the_loss_unchanged(seed in 0u64..1000, n in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let x = normalized(&mut rng, n, d);
        let t = normalized(&mut rng, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let px: Vec<f64> = perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect();
        let pt: Vec<f64> = perm.iter().flat_map(|&i| t[i * d..(i + 1) * d].to_vec()).collect();
        for dir in [Direction::ImageToText, Direction::Symmetric] {
            let a = contrastive(&x, &t, n, d, cfg(0.1, dir));
            let b = contrastive(&px, &pt, n, d, cfg(0.1, dir));
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }
}

struct Groups {
    embeddings: Vec<Vec<f64>>,
    concepts: Vec<Vec<usize>>,
    domains: Vec<usize>,
    dim: usize,
}

fn align_value(s: &Groups) -> (f64, usize) {
    let mut g = Graph::new();
    let ids: Vec<_> = s
        .embeddings
        .iter()
        .zip(&s.concepts)
        .map(|(e, c)| g.constant(Tensor::from_f64(&[c.len(), s.dim], e).unwrap()))
        .collect();
    let groups: Vec<AlignGroup<'_>> = ids
        .iter()
        .zip(&s.concepts)
        .zip(&s.domains)
        .map(|((&z, c), &d)| AlignGroup {
            domain: d,
            embeddings: z,
            concepts: c,
        })
        .collect();
    let term = alignment_loss(&mut g, &groups).unwrap();
    (g.value(term.loss).item(), term.pairs)
}

fn random_groups(rng: &mut ChaCha8Rng) -> Groups {
    let dim = 3;
    let k = rng.random_range(2..5);
    let concepts: Vec<Vec<usize>> = (0..k)
        .map(|_| (0..rng.random_range(1..7)).map(|_| rng.random_range(0..3)).collect())
        .collect();
    let embeddings = concepts.iter().map(|c| random(rng, c.len(), dim)).collect();
    Groups {
        embeddings,
        concepts,
        domains: (0..k).collect(),
        dim,
    }
}

/// Naive double loop over every row of every pair of distinct domains.
fn brute_force_alignment(s: &Groups) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for a in 0..s.concepts.len() {
        for b in 0..s.concepts.len() {
            if s.domains[a] >= s.domains[b] {
                continue;
            }
            for i in 0..s.concepts[a].len() {
                for j in 0..s.concepts[b].len() {
                    if s.concepts[a][i] != s.concepts[b][j] {
                        continue;
                    }
                    let ea = &s.embeddings[a][i * s.dim..(i + 1) * s.dim];
                    let eb = &s.embeddings[b][j * s.dim..(j + 1) * s.dim];
                    sum += ea.iter().zip(eb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                    count += 1;
                }
            }
        }
    }
    (if count == 0 { 0.0 } else { sum / count as f64 }, count)
}

#[test]
fn alignment_matches_brute_force_pairing() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let s = random_groups(&mut rng);
        let (got, pairs) = align_value(&s);
        let (want, count) = brute_force_alignment(&s);
        assert_eq!(pairs, count);
        assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn alignment_is_symmetric_in_the_domains() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..50 {
        let mut s = random_groups(&mut rng);
        let (a, _) = align_value(&s);
        s.embeddings.reverse();
        s.concepts.reverse();
        let (b, _) = align_value(&s);
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn alignment_hand_cases() {
    let one_pair = Groups {
        embeddings: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        concepts: vec![vec![4], vec![4]],
        domains: vec![0, 1],
        dim: 2,
    };
    assert_eq!(align_value(&one_pair), (2.0, 1));
    let identical = Groups {
        embeddings: vec![vec![0.3, -0.2, 0.9, 0.1], vec![0.9, 0.1, 0.3, -0.2]],
        concepts: vec![vec![0, 1], vec![1, 0]],
        domains: vec![0, 1],
        dim: 2,
    };
    assert_eq!(align_value(&identical), (0.0, 2));
    let same_domain = Groups {
        domains: vec![2, 2],
        ..one_pair
    };
    assert_eq!(align_value(&same_domain), (0.0, 0));
    assert!(alignment_pairs(&[(0, &[1, 2]), (1, &[3])]).is_empty());
}

#[test]
fn total_loss_is_a_weighted_sum_with_linear_gradient() {
    let mut g = Graph::<f64>::new();
    let one = g.scalar(1.0);
    let two = g.scalar(2.0);
    let t = total_loss(&mut g, &[one], two, 0.5, Reduction::Sum).unwrap();
    assert_eq!(g.value(t).item(), 2.0);
    let t0 = total_loss(&mut g, &[one, two], two, 0.0, Reduction::Sum).unwrap();
    assert_eq!(g.value(t0).item(), 3.0);
    let mean = total_loss(&mut g, &[one, two], two, 0.0, Reduction::Mean).unwrap();
    assert_eq!(g.value(mean).item(), 1.5);
    assert!(total_loss(&mut g, &[one], two, -0.1, Reduction::Sum).is_err());
    assert!(total_loss(&mut g, &[], two, 0.1, Reduction::Sum).is_err());

    // d total / d x = sum of the constituent gradients
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[3, 2], &random(&mut rng, 3, 2)).unwrap());
    let t = g.constant(Tensor::from_f64(&[3, 2], &random(&mut rng, 3, 2)).unwrap());
    let x2 = g.leaf(Tensor::from_f64(&[3, 2], &random(&mut rng, 3, 2)).unwrap());
    let nx = g.l2_normalize_rows(x).unwrap();
    let nx2 = g.l2_normalize_rows(x2).unwrap();
    let nt = g.l2_normalize_rows(t).unwrap();
    let c = cfg(0.5, Direction::ImageToText);
    let l1 = contrastive_loss(&mut g, nx, nt, &c).unwrap();
    let l2 = contrastive_loss(&mut g, nx, nx2, &c).unwrap();
    let concepts = [0, 1, 2];
    let al = alignment_loss(
        &mut g,
        &[
            AlignGroup {
                domain: 0,
                embeddings: x,
                concepts: &concepts,
            },
            AlignGroup {
                domain: 1,
                embeddings: x2,
                concepts: &concepts,
            },
        ],
    )
    .unwrap()
    .loss;
    let total = total_loss(&mut g, &[l1, l2], al, 0.3, Reduction::Sum).unwrap();
    let parts: Vec<_> = [l1, l2, al].iter().map(|&l| g.grad(l, &[x]).unwrap()[0]).collect();
    let expect: Vec<f64> = (0..6)
        .map(|i| {
            g.value(parts[0]).data()[i] + g.value(parts[1]).data()[i] + 0.3 * g.value(parts[2]).data()[i]
        })
        .collect();
    let got = g.grad(total, &[x]).unwrap()[0];
    for (a, b) in g.value(got).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}
