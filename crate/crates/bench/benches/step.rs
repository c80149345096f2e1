use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usted_core::datakit::BatchSampler;
use usted_core::eval::{bleu, edit_distance};
use usted_core::experiment::{model_config, synthesize, train_registry, ModelSize, SynthConfig, TaskMix};
use usted_core::model::Model;
use usted_core::training::{TrainConfig, TrainState};

fn training_step(c: &mut Criterion) {
    let corpus = synthesize(&SynthConfig {
        asr_train: 40,
        asr_dev: 0,
        mlm_train: 300,
        ..SynthConfig::default()
    })
    .unwrap();
    let mix = TaskMix::with_mlm(0.4);
    let reg = train_registry(&corpus, &mix, 0).unwrap();
    let size = ModelSize {
        hidden: 16,
        attention_dim: 16,
        decoder_hidden: 32,
        decoder_embed: 16,
    };
    let model = Model::new(model_config(&corpus, &mix, &size, 1, true, 0).unwrap()).unwrap();
    let mut state = TrainState::new(model, &TrainConfig::new(1, 8, 0)).unwrap();
    let mut sampler = BatchSampler::new(&reg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches: Vec<_> = (0..16).map(|_| sampler.sample_batch(&reg, 8, &mut rng).unwrap()).collect();
    let mut i = 0;
    c.bench_function("joint_step h16 bs8", |b| {
        b.iter(|| {
            i = (i + 1) % batches.len();
            black_box(state.joint_step(&batches[i], 1.0, "bench").unwrap())
        })
    });
}

fn random_sentences(n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0..50)).collect()).collect()
}

fn metrics(c: &mut Criterion) {
    let refs = random_sentences(200, 20, 1);
    let hyps = random_sentences(200, 20, 2);
    c.bench_function("edit_distance 200x20", |b| {
        b.iter(|| refs.iter().zip(&hyps).map(|(r, h)| edit_distance(r, h)).sum::<usize>())
    });
    c.bench_function("bleu 200x20", |b| {
        b.iter(|| bleu(&refs, &hyps).unwrap())
    });
}

criterion_group!(benches, training_step, metrics);
criterion_main!(benches);
