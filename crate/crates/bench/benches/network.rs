use candle_core::{DType, Device, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use decornet_core::model::build_network;
use decornet_core::train::{training_objective, TrainConfig};
use decornet_core::{ChannelConfig, NetworkSpec};

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    let spec = NetworkSpec::with_channels(ChannelConfig::new(&[8, 16, 32, 32, 32]).unwrap());
    let net = build_network(&spec, 0, DType::F32, &Device::Cpu).unwrap();
    let x = Tensor::randn(0f32, 1.0, (4, 1, 64, 64), &Device::Cpu).unwrap();
    let y = x.ge(0.5).unwrap().to_dtype(DType::F32).unwrap();
    group.bench_function("forward 4x64x64", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));

    let config = TrainConfig {
        model: spec,
        ..TrainConfig::default()
    };
    group.bench_function("objective+backward 4x64x64", |b| {
        b.iter(|| {
            let (logits, taps) = net.forward_with_taps(&x).unwrap();
            let terms = training_objective(&config, &net, &logits, &y, &taps).unwrap();
            terms.graph.backward().unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, network);
criterion_main!(benches);
