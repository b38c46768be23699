use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use tsfound_bench::{corpus, desk, model_and_batch};
use tsfound_core::series::{pad_left, standard_scale};
use tsfound_core::synth::{gp_synth, GpKernelSpec, Kernel};
use tsfound_core::training::{loss_and_grads, train_step, AdamW};
use tsfound_core::{forecast, ForecastRequest};

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    let (model, batch, cfg) = model_and_batch(16);
    g.bench_function("loss_and_grads/desk/batch16", |b| b.iter(|| loss_and_grads(&model, &batch, &mut None)));
    g.bench_function("train_step/desk/batch16", |b| {
        b.iter_batched(
            || (model.clone(), AdamW::new(&model)),
            |(mut m, mut opt)| train_step(&mut m, &mut opt, &batch, 0, &cfg.train, &mut None).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn inference(c: &mut Criterion) {
    let mut g = c.benchmark_group("inference");
    g.sample_size(20);
    let (model, _, cfg) = model_and_batch(1);
    let context = corpus(1)[0].values().to_vec();
    let c = cfg.model.context_len;
    let (padded, mask) = pad_left(&context[context.len() - c..], c).unwrap();
    let scaled: Vec<f32> = standard_scale(&padded, &mask).unwrap().values.iter().map(|&v| v as f32).collect();
    g.bench_function("encode/desk", |b| b.iter(|| model.encode(&scaled, &mask)));
    for h in [64, 720] {
        let req = ForecastRequest {
            context: context.clone(),
            horizon: h,
            quantiles: None,
        };
        g.bench_function(format!("forecast/desk/h{h}"), |b| b.iter(|| forecast(&model, &req).unwrap()));
    }
    g.finish();
}

fn synthesis(c: &mut Criterion) {
    let mut g = c.benchmark_group("synthesis");
    g.sample_size(20);
    let length = desk().data.synth.unwrap().length;
    let spec = GpKernelSpec {
        kernel: Kernel::Sum(
            Box::new(Kernel::Periodic {
                period: 24.0,
                length_scale: 1.0,
                amplitude: 1.0,
            }),
            Box::new(Kernel::Rbf {
                length_scale: 50.0,
                amplitude: 0.5,
            }),
        ),
        length,
        seed: 3,
    };
    g.bench_function(format!("gp_synth/len{length}"), |b| b.iter(|| gp_synth(&spec, "bench", "H").unwrap()));
    g.finish();
}

criterion_group!(benches, training, inference, synthesis);
criterion_main!(benches);
