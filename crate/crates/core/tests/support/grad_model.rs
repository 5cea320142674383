//! Finite-difference suites for the composite differentiable pieces: the inline
//! connection block in every mode, the detection losses and the sequence encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yolco_autograd::gradcheck::{check_gradients, DEFAULT_STEP};
use yolco_autograd::{Bound, Tape, Tensor, Var};
use yolco_core::classifier::{ClassifierConfig, ClassifierKind, Mode, SequenceClassifier};
use yolco_core::geometry::{encode_targets, AnchorSet, Annotation, BBox, GridSpec};
use yolco_core::incnet::{incnet_forward, ConnectionMode, InCNetConfig};
use yolco_core::model::{box_loss, focal_cls_loss, total_loss, LossConfig, LossMode, ScaleVars};

pub const CASES: usize = 100;
pub const TOL: f64 = 1e-4;

pub type Report = Vec<(String, f64)>;

type Scalar = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> yolco_autograd::Result<Var>>;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::uniform(shape, -scale, scale, rng)
}

fn worst_of<F>(name: String, coords: Option<usize>, mut make: F) -> (String, f64)
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Scalar),
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (inputs, f) = make(&mut rng);
        let r = check_gradients(&inputs, |t, v| f(t, v), DEFAULT_STEP, coords, &mut rng).expect("gradcheck runs");
        if std::env::var_os("GRAD_DEBUG").is_some() && r.max_rel_err > TOL {
            eprintln!("{name}: {r:?}");
        }
        worst = worst.max(r.max_rel_err);
    }
    (name, worst)
}

/// Pre-activation of the block, used to reject cases that sit on the LeakyReLU kink.
fn pre_activation(x: &Tensor<f64>, dw: &Tensor<f64>, pw: &Tensor<f64>, b: &Tensor<f64>, cfg: &InCNetConfig) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, dv, pv, bv) = (tape.constant(x.clone()), tape.constant(dw.clone()), tape.constant(pw.clone()), tape.constant(b.clone()));
    let mut pre = tape.depthwise_conv2d(xv, dv, 1, 1).unwrap();
    if let Some(mask) = cfg.connected() {
        let s = tape.cross_group_sum(xv, cfg.groups, &mask).unwrap();
        pre = tape.add(pre, s).unwrap();
    }
    let y = tape.pointwise_conv2d(pre, pv, Some(bv)).unwrap();
    tape.value(y).clone()
}

pub fn incnet_modes(out: &mut Report) {
    for mode in ConnectionMode::ALL {
        out.push(worst_of(format!("incnet_{mode}"), Some(16), |rng| loop {
            let groups = [1, 2, 4][rng.random_range(0..3)];
            let groups = if mode == ConnectionMode::HalfInc { groups.max(2) } else { groups };
            let cin = groups * rng.random_range(1..=2);
            let cout = if mode == ConnectionMode::Skip { cin } else { rng.random_range(1..=4) };
            let cfg = InCNetConfig::new(cin, cout, groups, mode);
            let (h, w) = (rng.random_range(3..=5), rng.random_range(3..=5));
            let x = rand_t(rng, &[cin, h, w], 1.0);
            let dw = rand_t(rng, &[cin, 1, 3, 3], 1.0);
            let pw = rand_t(rng, &[cout, cin, 1, 1], 1.0);
            let b = rand_t(rng, &[cout], 0.5);
            if pre_activation(&x, &dw, &pw, &b, &cfg).data().iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
            let proj = rand_t(rng, &[cout, h, w], 1.0);
            let f: Scalar = Box::new(move |t, v| {
                let y = incnet_forward(t, v[0], v[1], v[2], v[3], &cfg).expect("valid block");
                let p = t.constant(proj.clone());
                let m = t.mul(y, p)?;
                Ok(t.sum(m))
            });
            break (vec![x, dw, pw, b], f);
        }));
    }
}

pub fn detection_losses(out: &mut Report) {
    out.push(worst_of("focal_loss".into(), None, |rng| {
        let n = rng.random_range(1..=12);
        let targets: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
        let cfg = LossConfig {
            theta: rng.random_range(0.05..0.95),
            gamma: [0.0, 1.0, 2.0, rng.random_range(0.5..3.0)][rng.random_range(0..4)],
            ..LossConfig::default()
        };
        let logits = rand_t(rng, &[n], 4.0);
        (vec![logits], Box::new(move |t, v| Ok(focal_cls_loss(t, v[0], &targets, &cfg).expect("loss"))))
    }));
    out.push(worst_of("box_loss".into(), None, |rng| {
        let (grid, anchors, anns) = random_scene(rng, 6);
        let asg = encode_targets(&anns, &grid, &anchors).unwrap();
        let boxes = rand_t(rng, &[4 * anchors.len(), grid.height, grid.width], 1.0);
        (vec![boxes], Box::new(move |t, v| Ok(box_loss(t, v[0], &asg, &grid).expect("loss").expect("targets"))))
    }));
    for mode in [LossMode::Dual, LossMode::ClsOnly] {
        out.push(worst_of(format!("total_loss_{mode}"), Some(24), |rng| {
            let na = rng.random_range(1..=3);
            let anchors = AnchorSet::new((0..na).map(|i| (10.0 + 8.0 * i as f64, 12.0 + 6.0 * i as f64)).collect()).unwrap();
            let side = 64;
            let grids = [GridSpec::for_image(side, side, 32), GridSpec::for_image(side, side, 16)];
            let anns: Vec<Annotation> = (0..rng.random_range(1..=4))
                .map(|_| {
                    let b = BBox::new(rng.random_range(1.0..63.0), rng.random_range(1.0..63.0), rng.random_range(6.0..30.0), rng.random_range(6.0..30.0));
                    Annotation::lesion(b.unwrap())
                })
                .collect();
            let asg = [encode_targets(&anns, &grids[0], &anchors).unwrap(), encode_targets(&anns, &grids[1], &anchors).unwrap()];
            let cfg = LossConfig::default();
            let mut inputs = Vec::new();
            for g in &grids {
                inputs.push(rand_t(rng, &[4 * na, g.height, g.width], 1.0));
                inputs.push(rand_t(rng, &[na, g.height, g.width], 3.0));
            }
            (inputs, Box::new(move |t, v| {
                let sv = |i: usize| ScaleVars { boxes: v[2 * i], cls: v[2 * i + 1], fused: v[2 * i + 1], grid: grids[i] };
                Ok(total_loss(t, &[sv(0), sv(1)], &asg, &cfg, mode).expect("loss").total)
            }))
        }));
    }
}

/// Random grid, anchors and annotations whose centers lie on the grid.
pub fn random_scene(rng: &mut ChaCha8Rng, max_anns: usize) -> (GridSpec, AnchorSet, Vec<Annotation>) {
    let stride = [8, 16, 32][rng.random_range(0..3)];
    let grid = GridSpec::new(rng.random_range(1..=6), rng.random_range(1..=6), stride);
    let na = rng.random_range(1..=4);
    let anchors = AnchorSet::new((0..na).map(|_| (rng.random_range(4.0..64.0), rng.random_range(4.0..64.0))).collect()).unwrap();
    let (wmax, hmax) = ((grid.width * stride) as f64, (grid.height * stride) as f64);
    let anns = (0..rng.random_range(1..=max_anns))
        .map(|_| {
            let b = BBox::new(rng.random_range(0.0..wmax), rng.random_range(0.0..hmax), rng.random_range(2.0..80.0), rng.random_range(2.0..80.0));
            Annotation::lesion(b.unwrap())
        })
        .collect();
    (grid, anchors, anns)
}

fn small_classifier(kind: ClassifierKind, dim: usize, seed: u64) -> SequenceClassifier {
    let cfg = ClassifierConfig {
        kind,
        hidden: 8,
        depth: 2,
        d_model: 16,
        heads: 2,
        ffn: 16,
        d_ff: 8,
        dropout: 0.0,
        max_len: 16,
        ..ClassifierConfig::default()
    };
    SequenceClassifier::build(cfg, dim, seed).unwrap()
}

/// Gradient of a projected per-position output with respect to the input and every
/// parameter (a random subset of coordinates each).
pub fn sequence_encoders(out: &mut Report) {
    let kinds = [("transformer", ClassifierKind::Transformer), ("rnn", ClassifierKind::Rnn), ("lstm", ClassifierKind::Lstm)];
    for (name, kind) in kinds {
        out.push(worst_of(format!("encoder_{name}"), Some(3), |rng| {
            let dim = rng.random_range(2..=5);
            let n = rng.random_range(1..=5);
            let model = small_classifier(kind, dim, rng.random());
            let params = model.params.cast::<f64>();
            let mut inputs = vec![rand_t(rng, &[n, dim], 1.0)];
            inputs.extend(params.values().iter().map(|p| p.map(|v| v * 2.0)));
            let width = if kind == ClassifierKind::Transformer { model.config.d_ff } else { model.config.hidden };
            let proj = rand_t(rng, &[n, width], 1.0);
            (inputs, Box::new(move |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let mut mode = Mode { training: false, rng: &mut r };
                let z = model.encode_on(t, &p, v[0], &mut mode).expect("encode");
                let w = t.constant(proj.clone());
                let m = t.mul(z, w)?;
                Ok(t.sum(m))
            }))
        }));
    }
    out.push(worst_of("slide_loss".into(), Some(3), |rng| {
        let dim = rng.random_range(2..=4);
        let n = rng.random_range(1..=4);
        let model = small_classifier(ClassifierKind::Transformer, dim, rng.random());
        let params = model.params.cast::<f64>();
        let label = rng.random_bool(0.5);
        let mut inputs = vec![rand_t(rng, &[n, dim], 1.0)];
        inputs.extend(params.values().iter().cloned());
        (inputs, Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut mode = Mode { training: false, rng: &mut r };
            Ok(model.slide_loss(t, &p, v[0], label, &mut mode).expect("loss"))
        }))
    }));
}

pub fn all_model_suites() -> Report {
    let mut out = Vec::new();
    incnet_modes(&mut out);
    detection_losses(&mut out);
    sequence_encoders(&mut out);
    out
}
