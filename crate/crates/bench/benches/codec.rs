use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use mucsi_core::autodiff::Graph;
use mucsi_core::channel::{generate_sample, to_angle_delay, synthesize_channel, generate_group_paths};
use mucsi_core::codec::{self, AwgnUplink, CodecConfig, ModelParams};
use mucsi_core::rng::stream;
use mucsi_core::train::{self, TrainConfig, TrainState};
use mucsi_core::{AngleDelayCsi, ChannelConfig, Variant};

fn groups(cfg: &ChannelConfig, n: usize) -> Vec<Vec<AngleDelayCsi>> {
    (0..n as u64)
        .map(|i| generate_sample(cfg, 11, i).unwrap().users)
        .collect()
}

fn channel(c: &mut Criterion) {
    let cfg = ChannelConfig::default();
    c.bench_function("synthesize_and_transform", |b| {
        let mut rng = stream(1, &[]);
        b.iter(|| {
            let paths = generate_group_paths(&cfg, &mut rng);
            let h = synthesize_channel(&paths[0], &cfg).unwrap();
            black_box(to_angle_delay(&h, cfg.n_delay).unwrap())
        })
    });
}

fn forward_backward(c: &mut Criterion) {
    for variant in [Variant::Rca, Variant::PlainTransformer] {
        let ccfg = CodecConfig {
            variant,
            ..Default::default()
        };
        let ch = ChannelConfig::default();
        let data = groups(&ch, 8);
        let params = ModelParams::init(&ccfg, 3).unwrap();
        let refs: Vec<&[AngleDelayCsi]> = data.iter().map(|g| g.as_slice()).collect();
        c.bench_function(&format!("train_batch8_m2_{variant}"), |b| {
            b.iter(|| {
                let mut up = AwgnUplink::uniform(5, (0..8).collect(), 2, 10.0);
                black_box(train::batch_loss_and_grads(&params, &ccfg, &refs, &mut up).unwrap())
            })
        });
        c.bench_function(&format!("infer_batch8_m2_{variant}"), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let mv = params.bind(&mut g, false);
                let t: Vec<_> = (0..2)
                    .map(|u| g.constant(codec::stack_tokens(data.iter().map(|grp| &grp[u]))))
                    .collect();
                let mut up = AwgnUplink::uniform(5, (0..8).collect(), 2, 10.0);
                black_box(codec::forward(&mut g, &mv, &ccfg, &t, &mut up).unwrap().recon.len())
            })
        });
    }
}

fn optimizer_step(c: &mut Criterion) {
    let ccfg = CodecConfig::default();
    let ch = ChannelConfig::default();
    let data = groups(&ch, 8);
    let refs: Vec<&[AngleDelayCsi]> = data.iter().map(|g| g.as_slice()).collect();
    let tcfg = TrainConfig {
        batch_size: 8,
        ..Default::default()
    };
    c.bench_function("train_step_batch8_m2_rca", |b| {
        b.iter_batched(
            || TrainState::new(ModelParams::init(&ccfg, 3).unwrap()),
            |mut st| {
                let mut up = AwgnUplink::uniform(5, (0..8).collect(), 2, 10.0);
                black_box(train::train_step(&mut st, &ccfg, &tcfg, &refs, &mut up).unwrap())
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = channel, forward_backward, optimizer_step
}
criterion_main!(benches);
