use criterion::{criterion_group, criterion_main, Criterion};
use pcc_core::datagen::{synthesize, Dataset, SynthSpec};
use pcc_core::encoder::EncoderVariant;
use pcc_core::model::{Model, ModelSpec, Profile, EVAL_SEED};
use pcc_core::training::{TrainConfig, Trainer};

fn toy_data() -> Dataset {
    let spec = SynthSpec {
        poses_per_family: 4,
        ..SynthSpec::toy(7)
    };
    Dataset::from_pairs(spec.points, synthesize(&spec).unwrap())
}

fn model(c: &mut Criterion) {
    let data = toy_data();
    let mut group = c.benchmark_group("toy model");
    group.sample_size(10);
    for variant in [EncoderVariant::Mlp, EncoderVariant::Tmlp] {
        let spec = ModelSpec::new(Profile::Toy, variant);
        let m = Model::init(spec, 0.02, 1).unwrap();
        let partial = &data.train[0].partial;
        group.bench_function(format!("complete/{variant}"), |b| {
            b.iter(|| m.complete(partial, None, EVAL_SEED).unwrap())
        });
        let mut trainer = Trainer::new(m.clone(), TrainConfig::default()).unwrap();
        let batch: Vec<_> = data.train.iter().take(8).collect();
        let mut step = 0;
        group.bench_function(format!("train step (batch 8)/{variant}"), |b| {
            b.iter(|| {
                step += 1;
                trainer.train_step(&batch, step).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
