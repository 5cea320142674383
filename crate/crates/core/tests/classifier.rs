use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yolco_autograd::{Tape, Tensor};
use yolco_core::classifier::{
    pool, svm_predict, train_classifier, ClassifierConfig, ClassifierKind, Mode, Pooling, SequenceClassifier,
};
use yolco_core::features::{FeatureRow, FeatureSequence};

fn small(kind: ClassifierKind) -> ClassifierConfig {
    ClassifierConfig {
        kind,
        hidden: 8,
        depth: 2,
        d_model: 16,
        heads: 4,
        ffn: 32,
        d_ff: 12,
        dropout: 0.0,
        epochs: 20,
        lr0: 3e-3,
        batch_size: 10,
        max_len: 128,
        ..Default::default()
    }
}

fn encode(model: &SequenceClassifier, x: &Tensor<f32>, positions: Option<&[usize]>) -> Tensor<f32> {
    let mut t = Tape::new();
    let p = model.params.bind(&mut t, false);
    let v = t.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut mode = Mode { training: false, rng: &mut rng };
    let z = match positions {
        Some(pos) => model.encode_at(&mut t, &p, v, pos, &mut mode),
        None => model.encode_on(&mut t, &p, v, &mut mode),
    }
    .unwrap();
    t.value(z).clone()
}

#[test]
fn output_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [ClassifierKind::Transformer, ClassifierKind::Rnn, ClassifierKind::Lstm] {
        let m = SequenceClassifier::build(small(kind), 6, 1).unwrap();
        let width = if kind == ClassifierKind::Transformer { 12 } else { 8 };
        for n in [1, 7, 100] {
            assert_eq!(encode(&m, &Tensor::uniform(&[n, 6], -1.0, 1.0, &mut rng), None).shape(), &[n, width]);
        }
        assert!(std::panic::catch_unwind(|| encode(&m, &Tensor::zeros(&[0, 6]), None)).is_err());
        assert!(std::panic::catch_unwind(|| encode(&m, &Tensor::zeros(&[3, 5]), None)).is_err());
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = SequenceClassifier::build(small(ClassifierKind::Transformer), 6, 2).unwrap();
    let x = Tensor::uniform(&[9, 6], -2.0, 2.0, &mut rng);
    for layer in 0..2 {
        let heads = m.attention_weights(&x, layer).unwrap();
        assert_eq!(heads.len(), 4);
        for a in &heads {
            for row in a.data().chunks(9) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
    assert!(m.attention_weights(&x, 2).is_err());
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = SequenceClassifier::build(small(ClassifierKind::Transformer), 5, 3).unwrap();
    let n = 8;
    let x = Tensor::uniform(&[n, 5], -1.0, 1.0, &mut rng);
    let positions: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
    let base = encode(&m, &x, Some(&positions));
    let perm = [5, 2, 7, 0, 1, 6, 4, 3];
    let xp = Tensor::from_vec(&[n, 5], perm.iter().flat_map(|&i| x.data()[i * 5..(i + 1) * 5].to_vec()).collect()).unwrap();
    let pp: Vec<usize> = perm.iter().map(|&i| positions[i]).collect();
    let out = encode(&m, &xp, Some(&pp));
    for (k, &i) in perm.iter().enumerate() {
        for j in 0..12 {
            assert!((out.data()[k * 12 + j] - base.data()[i * 12 + j]).abs() < 1e-5);
        }
    }
}

#[test]
fn rnn_zero_input_stays_at_zero() {
    let m = SequenceClassifier::build(small(ClassifierKind::Rnn), 4, 3).unwrap();
    assert!(encode(&m, &Tensor::zeros(&[6, 4]), None).data().iter().all(|&v| v == 0.0));
}

#[test]
fn saturated_lstm_gates_hold_the_cell() {
    let mut m = SequenceClassifier::build(small(ClassifierKind::Lstm), 4, 4).unwrap();
    let id = m.params.id("rnn.wx.b").unwrap();
    let b = m.params.get_mut(id).data_mut();
    b[..8].fill(-60.0); // input gate closed
    b[8..16].fill(60.0); // forget gate open
    b[24..32].fill(60.0); // output gate open
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
    let c0 = Tensor::uniform(&[1, 8], -2.0, 2.0, &mut rng);
    let mut t = Tape::new();
    let p = m.params.bind(&mut t, false);
    let (xv, h0, cv) = (t.constant(x), t.constant(Tensor::zeros(&[1, 8])), t.constant(c0.clone()));
    let hs = m.lstm_from(&mut t, &p, xv, h0, cv).unwrap();
    for row in t.value(hs).data().chunks(8) {
        for (h, c) in row.iter().zip(c0.data()) {
            assert!((h - c.tanh()).abs() < 1e-6);
        }
    }
}

fn sequence(id: usize, n: usize, dim: usize, label: bool, rng: &mut ChaCha8Rng) -> FeatureSequence {
    let shift = if label { 0.8 } else { -0.8 };
    let rows = (0..n)
        .map(|r| FeatureRow {
            prob: 1.0 - r as f32 / n as f32,
            x: 0.0,
            y: 0.0,
            w: 1.0,
            h: 1.0,
            features: (0..dim).map(|_| rng.random_range(-1.0..1.0) + shift).collect(),
        })
        .collect();
    FeatureSequence { slide_id: format!("s{id}"), label: Some(label), dim, rows }
}

fn dataset(count: usize, seed: u64) -> Vec<FeatureSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| sequence(i, 3 + i % 4, 6, i % 2 == 0, &mut rng)).collect()
}

#[test]
fn slide_probability_is_the_mean_of_vector_outputs() {
    assert_eq!(pool(&[0.3, 0.3, 0.3], Pooling::Mean), 0.3);
    assert_eq!(pool(&[0.1, 0.9, 0.2], Pooling::Max), 0.9);
    let m = SequenceClassifier::build(small(ClassifierKind::Transformer), 6, 6).unwrap();
    for seq in dataset(4, 7) {
        let p = m.classify(&seq).unwrap();
        assert_eq!(p.per_vector.len(), seq.len());
        let mean = p.per_vector.iter().sum::<f64>() / p.per_vector.len() as f64;
        assert!((p.prob - mean).abs() < 1e-12);
        assert_eq!(m.classify(&seq).unwrap(), p);
        let one = FeatureSequence { rows: seq.rows[..1].to_vec(), ..seq.clone() };
        let q = m.classify(&one).unwrap();
        assert_eq!(q.prob, q.per_vector[0]);
    }
}

#[test]
fn neural_training_lowers_loss_and_repeats() {
    let data = dataset(10, 8);
    for kind in [ClassifierKind::Transformer, ClassifierKind::Lstm] {
        let out = train_classifier(&data, &small(kind), 3).unwrap();
        assert_eq!(out.losses.len(), 20);
        let head: f64 = out.losses[..5].iter().sum();
        let tail: f64 = out.losses[15..].iter().sum();
        assert!(tail < head, "{kind}: {:?}", out.losses);
        let again = train_classifier(&data, &small(kind), 3).unwrap();
        assert_eq!(out.model.params.values(), again.model.params.values());
    }
}

#[test]
fn dropout_only_acts_in_training() {
    let data = dataset(6, 9);
    let cfg = ClassifierConfig { dropout: 0.5, epochs: 2, ..small(ClassifierKind::Transformer) };
    let m = train_classifier(&data, &cfg, 1).unwrap().model;
    assert_eq!(m.classify(&data[0]).unwrap(), m.classify(&data[0]).unwrap());
}

#[test]
fn margin_baseline_separates_a_toy_set() {
    let data = dataset(4, 10);
    let cfg = ClassifierConfig { epochs: 50, max_len: 8, ..small(ClassifierKind::Svm) };
    let m = train_classifier(&data, &cfg, 2).unwrap().model;
    let pred = svm_predict(&m, &data).unwrap();
    let truth: Vec<bool> = data.iter().map(|s| s.label.unwrap()).collect();
    assert_eq!(pred, truth);
    assert!(svm_predict(&SequenceClassifier::build(small(ClassifierKind::Rnn), 6, 0).unwrap(), &data).is_err());
}

#[test]
fn single_class_training_is_rejected() {
    let mut data = dataset(6, 11);
    for s in &mut data {
        s.label = Some(true);
    }
    assert!(train_classifier(&data, &small(ClassifierKind::Transformer), 0).is_err());
    assert!(train_classifier(&data, &small(ClassifierKind::Svm), 0).is_err());
}

#[test]
fn kinds_parse() {
    for k in ["svm", "rnn", "lstm", "transformer"] {
        assert_eq!(k.parse::<ClassifierKind>().unwrap().name(), k);
    }
    assert!("cnn".parse::<ClassifierKind>().is_err());
    assert!(ClassifierConfig { heads: 5, ..small(ClassifierKind::Transformer) }.validate().is_err());
}
