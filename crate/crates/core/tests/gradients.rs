use dcmt_core::features::{FeatureField, FeatureKind, FeatureSchema, FeatureValue, Sample, Wideness};
use dcmt_core::gradcheck::{check_gradients, random_instance, relative_error, Instance};
use dcmt_core::tape::{Gradients, Tape};
use dcmt_core::train::{build_objective, ObjectiveNodes, TrainConfig};
use dcmt_core::{Architecture, Model, ParamId, ParamStore, Tensor, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;
// Instances whose rectifier or absolute-value inputs come this close to
// zero are redrawn: a central difference across a kink is not a derivative.
const KINK_MARGIN: f64 = 1e-3;

fn config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        lambda1: 0.3,
        propensity_grad: true,
        ..TrainConfig::default()
    }
}

fn objective<'a>(
    inst: &'a Instance,
    cfg: &'a TrainConfig,
    pick: impl Fn(&ObjectiveNodes) -> dcmt_core::NodeId + 'a,
) -> impl FnMut(&mut Tape, &ParamStore) -> Result<dcmt_core::NodeId, dcmt_core::TapeError> + 'a {
    move |t, s| {
        let batch = inst.batch();
        build_objective(t, &inst.model, s, &batch, cfg).map(|n| pick(&n))
    }
}

/// Checks `count` accepted instances and returns the number of redraws.
fn check_many(variant: Variant, count: usize, seed0: u64, pick: fn(&ObjectiveNodes) -> dcmt_core::NodeId) -> usize {
    let cfg = config(variant);
    let (mut accepted, mut rejected) = (0, 0);
    let mut seed = seed0;
    while accepted < count {
        let inst = random_instance(variant, seed, 6);
        seed += 1;
        let r = check_gradients(&inst.store, H, objective(&inst, &cfg, pick)).unwrap();
        if r.kink_margin < KINK_MARGIN {
            rejected += 1;
            assert!(rejected < 10 * count, "too many kinked instances");
            continue;
        }
        assert!(r.max_relative < TOL, "{variant} seed {}: {r:?}", seed - 1);
        accepted += 1;
    }
    rejected
}

#[test]
fn counterfactual_loss_matches_finite_differences() {
    check_many(Variant::Dcmt, 10, 100, |n| n.cvr.unwrap());
}

#[test]
fn every_total_objective_matches_finite_differences() {
    // The doubly robust objective stops gradients on purpose (imputed
    // errors inside the CVR loss, observed errors inside the imputation
    // loss), so its tape gradient is not the derivative of its value.
    for v in Variant::ALL.into_iter().filter(|&v| v != Variant::Dr) {
        check_many(v, 2, 200, |n| n.total);
    }
}

#[test]
fn doubly_robust_parts_match_finite_differences_where_undetached() {
    let cfg = config(Variant::Dr);
    for seed in 0..3 {
        let inst = random_instance(Variant::Dr, 300 + seed, 6);
        // The imputation loss depends on the imputation tower only through
        // e_hat, which is not detached there.
        let imp = inst.model.imputation_params();
        let batch = inst.batch();
        let mut t = Tape::new();
        let nodes = build_objective(&mut t, &inst.model, &inst.store, &batch, &cfg).unwrap();
        let g = t.backward(nodes.imputation.unwrap()).unwrap();
        if t.kink_margin() < KINK_MARGIN {
            continue;
        }
        for id in imp {
            let mut probe = inst.store.clone();
            for k in 0..inst.store.get(id).len() {
                let base = inst.store.get(id).data()[k];
                let mut value = |x: f64| {
                    probe.get_mut(id).data_mut()[k] = x;
                    let mut t = Tape::new();
                    let n = build_objective(&mut t, &inst.model, &probe, &batch, &cfg).unwrap();
                    t.value(n.imputation.unwrap()).data()[0]
                };
                let numeric = (value(base + H) - value(base - H)) / (2.0 * H);
                probe.get_mut(id).data_mut()[k] = base;
                let analytic = g.param(id).map_or(0.0, |t| t.data()[k]);
                assert!(relative_error(analytic, numeric) < TOL, "{} {k}", inst.store.name(id));
            }
        }
        // And nothing outside the imputation tower receives its gradient.
        let cvr = inst.model.cvr_param_groups();
        for id in cvr.trunk.iter().chain(&cvr.factual).chain(&inst.model.ctr_params()) {
            assert_eq!(g.param_norm_sq(*id), 0.0);
        }
    }
}

fn grads(inst: &Instance, cfg: &TrainConfig) -> (Vec<Gradients>, ObjectiveNodes) {
    let batch = inst.batch();
    let mut t = Tape::new();
    let n = build_objective(&mut t, &inst.model, &inst.store, &batch, cfg).unwrap();
    let mut out = vec![t.backward(n.total).unwrap()];
    for node in [n.ctr, n.cvr.unwrap(), n.ctcvr.unwrap(), n.l2, n.factual.unwrap(), n.counterfactual.unwrap(), n.regularizer.unwrap()] {
        out.push(t.backward(node).unwrap());
    }
    (out, n)
}

fn entry(g: &Gradients, id: ParamId, k: usize) -> f64 {
    g.param(id).map_or(0.0, |t| t.data()[k])
}

#[test]
fn gradients_superpose_over_objective_parts() {
    for seed in 0..5 {
        let inst = random_instance(Variant::Dcmt, 400 + seed, 8);
        let cfg = TrainConfig {
            lambda1: 0.7,
            lambda2: 0.01,
            ..TrainConfig::default()
        };
        let (g, _) = grads(&inst, &cfg);
        let [total, ctr, cvr, ctcvr, l2, fact, cf, reg] = g.try_into().ok().unwrap();
        let w = cfg.weights;
        for id in inst.store.ids() {
            for k in 0..inst.store.get(id).len() {
                let parts = entry(&ctr, id, k)
                    + w.w_cvr * entry(&cvr, id, k)
                    + w.w_ctcvr * entry(&ctcvr, id, k)
                    + cfg.lambda2 * entry(&l2, id, k);
                assert!((entry(&total, id, k) - parts).abs() < 1e-12, "total {}", inst.store.name(id));
                let cvr_parts = entry(&fact, id, k) + entry(&cf, id, k) + entry(&reg, id, k);
                assert!((entry(&cvr, id, k) - cvr_parts).abs() < 1e-12, "cvr {}", inst.store.name(id));
            }
        }
    }
}

#[test]
fn twin_heads_share_the_trunk_and_nothing_else() {
    let inst = random_instance(Variant::Dcmt, 500, 8);
    let (g, _) = grads(&inst, &TrainConfig::default());
    let (fact, cf) = (&g[5], &g[6]);
    let groups = inst.model.cvr_param_groups();
    assert!(!groups.trunk.is_empty() && !groups.counterfactual.is_empty());
    for id in &groups.factual {
        assert!(fact.param_norm_sq(*id) > 0.0);
        assert_eq!(cf.param_norm_sq(*id), 0.0, "{}", inst.store.name(*id));
    }
    for id in &groups.counterfactual {
        assert!(cf.param_norm_sq(*id) > 0.0);
        assert_eq!(fact.param_norm_sq(*id), 0.0, "{}", inst.store.name(*id));
    }
    for id in &groups.trunk {
        assert!(fact.param_norm_sq(*id) > 0.0 && cf.param_norm_sq(*id) > 0.0);
    }
    // Propensities are constants inside the CVR loss by default.
    for id in inst.model.ctr_params() {
        assert_eq!(g[2].param_norm_sq(id), 0.0);
    }
}

#[test]
fn propensity_gradients_flow_when_enabled() {
    let inst = random_instance(Variant::Dcmt, 501, 8);
    let (g, _) = grads(&inst, &config(Variant::Dcmt));
    let ctr_norm: f64 = inst.model.ctr_params().iter().map(|&id| g[2].param_norm_sq(id)).sum();
    assert!(ctr_norm > 0.0);
}

#[test]
fn twin_heads_mirror_under_swapped_parameters() {
    // Copying the factual head into the counterfactual head gives
    // r_hat_cf = r_hat; negating its output layer gives 1 - r_hat.
    let inst = random_instance(Variant::Dcmt, 502, 8);
    let groups = inst.model.cvr_param_groups();
    let mut store = inst.store.clone();
    for (f, c) in groups.factual.iter().zip(&groups.counterfactual) {
        *store.get_mut(*c) = store.get(*f).clone();
    }
    let p = inst.model.predict(&store, &inst.samples, 64).unwrap();
    for (a, b) in p.r_hat.iter().zip(&p.r_hat_cf) {
        assert_eq!(a, b);
    }
    for (f, c) in groups.factual.iter().zip(&groups.counterfactual) {
        let name = store.name(*c);
        if name.contains(".out.") || name.contains(".wide.") {
            let neg = store.get(*f).map(|x| -x);
            *store.get_mut(*c) = neg;
        }
    }
    let p = inst.model.predict(&store, &inst.samples, 64).unwrap();
    for (a, b) in p.r_hat.iter().zip(&p.r_hat_cf) {
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}

fn mixed_schema() -> FeatureSchema {
    FeatureSchema::new(
        vec![
            FeatureField {
                name: "user".into(),
                kind: FeatureKind::SparseId { vocab_size: 4 },
                wideness: Wideness::Both,
            },
            FeatureField {
                name: "price".into(),
                kind: FeatureKind::DenseGroup { group_width: 3 },
                wideness: Wideness::Deep,
            },
            FeatureField {
                name: "tags".into(),
                kind: FeatureKind::WeightedList { vocab_size: 5 },
                wideness: Wideness::Wide,
            },
        ],
        2,
    )
    .unwrap()
}

fn mixed_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let click = i % 2 == 0;
            let tags = (0..rng.random_range(1..=3))
                .map(|_| (rng.random_range(0..5), rng.random_range(0.1..2.0)))
                .collect();
            Sample {
                features: vec![
                    FeatureValue::Id(rng.random_range(0..4)),
                    FeatureValue::Dense((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()),
                    FeatureValue::Weighted(tags),
                ],
                click,
                conversion: click && rng.random_bool(0.5),
                p_true: None,
                r_full: None,
            }
        })
        .collect()
}

#[test]
fn all_feature_kinds_match_finite_differences() {
    let schema = mixed_schema();
    let mut done = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = mixed_samples(&mut rng, 6);
        let arch = Architecture {
            embedding_dim: None,
            hidden_dims: vec![3],
            shared_depth: None,
        };
        let (model, store) = Model::init(&schema, &arch, Variant::Dcmt, seed).unwrap();
        let inst = Instance { model, store, samples };
        let cfg = config(Variant::Dcmt);
        let r = check_gradients(&inst.store, H, objective(&inst, &cfg, |n| n.total)).unwrap();
        if r.kink_margin < KINK_MARGIN {
            continue;
        }
        assert!(r.max_relative < TOL, "seed {seed}: {r:?}");
        done += 1;
    }
    assert!(done >= 10);
}

/// Random dense MLP: `mean(log_loss(sigmoid(relu(x W1 + b1) W2 + b2), y))`.
fn mlp_store(rng: &mut ChaCha8Rng, widths: &[usize]) -> ParamStore {
    let mut store = ParamStore::new();
    for (i, w) in widths.windows(2).enumerate() {
        let data = (0..w[0] * w[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.add(format!("w{i}"), Tensor::from_vec(w[0], w[1], data));
        let bias = (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
        store.add(format!("b{i}"), Tensor::row(bias));
    }
    store
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_mlps_match_finite_differences(
        seed in any::<u64>(),
        depth in 1usize..=3,
        width in 1usize..=8,
        rows in 1usize..=5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rng.random_range(1..=4);
        let mut widths = vec![input];
        widths.extend((0..depth - 1).map(|_| rng.random_range(1..=width)));
        widths.push(1);
        let store = mlp_store(&mut rng, &widths);
        let x = Tensor::from_vec(rows, input, (0..rows * input).map(|_| rng.random_range(-2.0..2.0)).collect());
        let y = Tensor::column((0..rows).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect());
        let layers = widths.len() - 1;
        let r = check_gradients(&store, H, |t, s| {
            let mut h = t.constant(x.clone());
            for l in 0..layers {
                let w = t.param(s, ParamId(2 * l));
                let b = t.param(s, ParamId(2 * l + 1));
                let z = t.matmul(h, w)?;
                h = t.add_bias(z, b)?;
                if l + 1 < layers {
                    h = t.relu(h);
                }
            }
            let p = t.sigmoid(h);
            let e = t.log_loss(p, y.clone())?;
            let s = t.sum(e);
            Ok(t.scale(s, 1.0 / rows as f64))
        }).unwrap();
        prop_assume!(r.kink_margin >= KINK_MARGIN);
        prop_assert!(r.max_relative < TOL, "{:?}", r);
    }
}
