use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gdpo_core::flow::{FlowModel, ModelConfig, Normalizer};
use gdpo_core::gdpo::{build_groups, draw_items, gdpo_loss, item_loss_grad, pgr_weights, DeltaLosses};
use gdpo_core::numerics::{backward, forward, forward_tape, GradTargets, LoraAdapter, MlpParams};
use gdpo_core::physics::{random_condition, simulate, WorldConfig};
use gdpo_core::pipeline::sample_budget;
use gdpo_core::rng::seeded;
use gdpo_core::{DpoHyper, RewardSchedule};

fn mlp(c: &mut Criterion) {
    let mut rng = seeded(1);
    let net = MlpParams::init(77, 128, 2, 32, &mut rng);
    let adapter = LoraAdapter::init(&net, 4, 1.0, 0.02, &mut rng).unwrap();
    let input: Vec<f64> = (0..77).map(|i| (i as f64 * 0.37).sin()).collect();
    let grad_out = vec![0.1; 32];
    c.bench_function("mlp_forward", |b| b.iter(|| forward(&net, Some(&adapter), black_box(&input)).unwrap()));
    c.bench_function("mlp_forward_backward_adapter", |b| {
        b.iter(|| {
            let tape = forward_tape(&net, Some(&adapter), black_box(&input)).unwrap();
            backward(&net, Some(&adapter), &tape, &grad_out, GradTargets::ADAPTER).unwrap()
        })
    });
}

fn gdpo(c: &mut Criterion) {
    let world = WorldConfig::default();
    let config = ModelConfig::default();
    let mut rng = seeded(2);
    let data: Vec<_> = (0..8)
        .map(|i| {
            let cond = random_condition(&world, i % 4, &mut rng);
            let cat = &world.categories[cond.category];
            let t = simulate(cat, &cond.init_position, &cond.init_velocity, world.frames, world.frame_step).unwrap();
            (cond, t)
        })
        .collect();
    let norm = Normalizer::fit(data.iter().map(|(_, t)| t)).unwrap();
    let mut model = FlowModel::new(&world, &config, norm, 2, &mut rng).unwrap();
    model.attach_adapter(&config, &mut rng).unwrap();
    let groups = build_groups(&model, &data, 4, 10, &world, &mut rng).unwrap().groups;
    let hyper = DpoHyper::default();
    let items = draw_items(&groups, &hyper, model.dims.flow_len(), &mut rng).unwrap();
    let w = pgr_weights(0.6, &RewardSchedule::default()).unwrap();
    let item = &items[0];
    c.bench_function("gdpo_item_loss_grad", |b| {
        b.iter(|| item_loss_grad(&model, &groups[item.group], black_box(item), &w, &hyper).unwrap())
    });
    let d = DeltaLosses {
        l_theta_w: 1.2,
        l_psi_w: 1.0,
        l_theta_l: 0.9,
        l_psi_l: 1.1,
        t_index: 10,
        loser: 0,
        shared_noise: false,
    };
    c.bench_function("gdpo_loss", |b| b.iter(|| gdpo_loss(black_box(&d), &w, &hyper)));
}

fn budget(c: &mut Criterion) {
    let h_f: Vec<usize> = (0..64).map(|i| 10 + (i * 37) % 200).collect();
    let s_f: Vec<Option<f64>> = (0..64).map(|i| Some(((i * 13) % 100) as f64 / 100.0)).collect();
    c.bench_function("sample_budget_64_categories", |b| {
        b.iter(|| sample_budget(black_box(&h_f), &s_f, 3.0, 10_000).unwrap())
    });
}

criterion_group!(benches, mlp, gdpo, budget);
criterion_main!(benches);
