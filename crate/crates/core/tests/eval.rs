use metacon::autodiff::{Graph, ParamSet};
use metacon::data::{generate, sample_task, DomainDataset, GeneratorSpec};
use metacon::eval::{
    adaptation_curve, domain_gap, heldout_adaptation, partner_ranks, report_from_scores, retrieval_eval,
    HeldoutProtocol, RetrievalDirection,
};
use metacon::losses::{alignment_loss, AlignGroup, LossConfig};
use metacon::meta::{MetaConfig, MetaEngine};
use metacon::model::{Activation, DomainTableSpec, DualEncoder, EncoderSpec};
use metacon::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> DualEncoder {
    let tower = |input_dim| EncoderSpec {
        input_dim,
        hidden_dims: vec![8],
        embed_dim: 4,
        activation: Activation::Tanh,
    };
    DualEncoder::new(tower(6), tower(5), DomainTableSpec { num_domains: 3, dim: 2 }).unwrap()
}

fn data() -> DomainDataset<f64> {
    generate(&GeneratorSpec {
        num_domains: 3,
        num_concepts: 4,
        latent_dim: 3,
        image_dim: 6,
        text_dim: 5,
        samples_per_domain: 40,
        seed: 5,
        ..GeneratorSpec::default()
    })
    .unwrap()
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn random_scores_give_chance_recall() {
    let n = 100;
    let mut total = 0.0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        total += report_from_scores(&random_scores(&mut rng, n), RetrievalDirection::I2t).unwrap().recall(1);
    }
    let mean = total / 50.0;
    assert!((0.002..=0.03).contains(&mean), "{mean}");
}

#[test]
fn aligned_embeddings_give_perfect_recall() {
    let rows = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.6, -0.8]).unwrap();
    let mut g = Graph::new();
    let a = g.constant(rows.clone());
    let at = g.transpose(a).unwrap();
    let s = g.matmul(a, at).unwrap();
    let r = report_from_scores(g.value(s), RetrievalDirection::I2t).unwrap();
    assert_eq!(r.recall(1), 1.0);
    assert_eq!(r.median_rank, 1.0);
}

#[test]
fn positive_rescaling_does_not_change_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2, 7, 30] {
        let s = random_scores(&mut rng, n);
        let scaled = s.map(|v| 3.7 * v);
        assert_eq!(partner_ranks(&s).unwrap(), partner_ranks(&scaled).unwrap());
    }
}

#[test]
fn small_batches_have_full_recall_at_5() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 2..=5 {
        let r = report_from_scores(&random_scores(&mut rng, n), RetrievalDirection::T2i).unwrap();
        assert_eq!(r.recall(5), 1.0);
        assert!(r.recall(1) <= r.recall(5));
    }
}

fn engine_parts() -> (DualEncoder, DomainDataset<f64>, ParamSet<f64>) {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let theta = m.init_params::<f64>(6).map_values(|e| e.value.map(|v| v + rng.random_range(-0.2..0.2)));
    (m, data(), theta)
}

#[test]
fn curve_at_zero_is_plain_retrieval() {
    let (m, d, theta) = engine_parts();
    let engine = MetaEngine::new(&m, MetaConfig::default(), LossConfig::default()).unwrap();
    let task = sample_task(&d, 1, 8, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for dir in [RetrievalDirection::I2t, RetrievalDirection::T2i] {
        let direct = retrieval_eval(&m, &theta, &task.query, dir).unwrap();
        let single = adaptation_curve(&engine, &theta, &task, &[0], dir).unwrap();
        assert_eq!(single.points, vec![(0, direct.clone())]);
        let curve = adaptation_curve(&engine, &theta, &task, &[0, 1, 3, 5], dir).unwrap();
        let ks: Vec<usize> = curve.points.iter().map(|(k, _)| *k).collect();
        assert_eq!(ks, vec![0, 1, 3, 5]);
        assert_eq!(curve.at(0), Some(&direct));
    }
    assert!(adaptation_curve(&engine, &theta, &task, &[1, 3], RetrievalDirection::I2t).is_err());
    assert!(adaptation_curve(&engine, &theta, &task, &[0, 3, 3], RetrievalDirection::I2t).is_err());
}

#[test]
fn incremental_curve_matches_fresh_adaptation() {
    let (m, d, theta) = engine_parts();
    let engine = MetaEngine::new(&m, MetaConfig::default(), LossConfig::default()).unwrap();
    let task = sample_task(&d, 0, 8, 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let curve = adaptation_curve(&engine, &theta, &task, &[0, 2, 4], RetrievalDirection::I2t).unwrap();
    let fresh = engine.inner_adapt_steps(&theta, &task, 4).unwrap().adapted;
    let direct = retrieval_eval(&m, &fresh, &task.query, RetrievalDirection::I2t).unwrap();
    assert_eq!(curve.at(4), Some(&direct));
}

#[test]
fn domain_gap_equals_the_alignment_loss() {
    let (m, d, theta) = engine_parts();
    let gap = domain_gap(&m, &theta, &d).unwrap();
    let mut g = Graph::new();
    let p = g.bind(&theta);
    let batches: Vec<_> = d.domains().into_iter().map(|dom| d.domain_batch(dom)).collect();
    let zs: Vec<_> = batches
        .iter()
        .map(|b| {
            let x = g.constant(b.x.clone());
            m.encode_image(&mut g, &p, x).unwrap()
        })
        .collect();
    let groups: Vec<AlignGroup<'_>> = batches
        .iter()
        .zip(&zs)
        .map(|(b, &z)| AlignGroup {
            domain: b.domain_ids[0],
            embeddings: z,
            concepts: &b.concept_ids,
        })
        .collect();
    let term = alignment_loss(&mut g, &groups).unwrap();
    let via_graph = g.value(term.loss).item();
    assert!((gap - via_graph).abs() < 1e-12 * gap.max(1.0), "{gap} vs {via_graph}");
    assert!(gap > 0.0);
}

#[test]
fn domain_gap_hand_cases_and_errors() {
    // a linear single-layer tower that copies the first two inputs
    let spec = EncoderSpec {
        input_dim: 2,
        hidden_dims: vec![],
        embed_dim: 2,
        activation: Activation::Tanh,
    };
    let m = DualEncoder::new(spec.clone(), spec, DomainTableSpec { num_domains: 2, dim: 1 }).unwrap();
    let mut theta = m.init_params::<f64>(0);
    *theta.get_mut("img.layer0.weight").unwrap() = Tensor::eye(2);
    let d = DomainDataset {
        spec: GeneratorSpec {
            num_domains: 2,
            image_dim: 2,
            text_dim: 2,
            ..GeneratorSpec::default()
        },
        x: Tensor::from_f64(&[4, 2], &[0.0, 0.0, 1.0, 1.0, 3.0, 4.0, 1.0, 2.0]).unwrap(),
        t: Tensor::zeros(&[4, 2]),
        latents: Tensor::zeros(&[4, 1]),
        domain_ids: vec![0, 0, 1, 1],
        concept_ids: vec![0, 1, 0, 1],
    };
    // pairs: (0,0)-(3,4) -> 25, (1,1)-(1,2) -> 1
    assert!((domain_gap(&m, &theta, &d).unwrap() - 13.0).abs() < 1e-12);
    let same = DomainDataset {
        x: Tensor::from_f64(&[4, 2], &[0.5, 0.5, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0]).unwrap(),
        ..d.clone()
    };
    assert_eq!(domain_gap(&m, &theta, &same).unwrap(), 0.0);
    let one_domain = d.filter_domains(|dom| dom == 0);
    assert!(domain_gap(&m, &theta, &one_domain).is_err());
    let disjoint = DomainDataset {
        concept_ids: vec![0, 0, 1, 1],
        ..d
    };
    assert!(domain_gap(&m, &theta, &disjoint).is_err());
}

#[test]
fn heldout_protocol_is_deterministic_and_checks_ids() {
    let (m, d, theta) = engine_parts();
    let engine = MetaEngine::new(&m, MetaConfig::default(), LossConfig::default()).unwrap();
    let protocol = HeldoutProtocol {
        ks: vec![0, 2],
        num_tasks: 3,
        support_size: 8,
        query_size: 8,
        direction: RetrievalDirection::I2t,
        seed: 9,
    };
    let a = heldout_adaptation(&engine, &theta, &d, &[2], &[0, 1], &protocol).unwrap();
    let b = heldout_adaptation(&engine, &theta, &d, &[2], &[0, 1], &protocol).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].curve.points[0].1.n_queries, 24);
    assert!(heldout_adaptation(&engine, &theta, &d, &[7], &[0, 1], &protocol).is_err());
}
