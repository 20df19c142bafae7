use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use causalpix_bench::desk_fixture;
use causalpix_core::conv::conv2d;
use causalpix_core::dlm;
use causalpix_core::network::{Mode, SOFTMAX_HEAD_CHANNELS};
use causalpix_core::training::{train_step, OptimConfig, OptimState};
use causalpix_core::{ConvGeometry, Padding, Tape, Tensor};

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn([16, 16, 16, 32], 1.0, &mut rng);
    let k = Tensor::<f32>::randn([2, 3, 32, 32], 0.1, &mut rng);
    let geom = ConvGeometry::new(2, 3, (1, 1), Padding::new(1, 0, 1, 1));
    c.bench_function("conv2d 16x16x32 -> 32, 2x3", |b| b.iter(|| conv2d(&x, &k, &geom).unwrap()));
    c.bench_function("conv2d forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let kv = tape.leaf(k.clone());
            let y = tape.conv2d(xv, kv, geom).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap()
        })
    });
}

fn likelihood(c: &mut Criterion) {
    let (model, images) = desk_fixture(16, 16);
    let k = model.config().n_mixtures;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = Tensor::<f32>::randn([16, 16, 16, dlm::head_channels(k)], 1.0, &mut rng);
    c.bench_function("mixture log-likelihood, 16 images", |b| {
        b.iter(|| dlm::image_logprob(&images, &head, k).unwrap())
    });
    c.bench_function("mixture log-likelihood on tape with gradient", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let h = tape.leaf(head.clone());
            let lp = dlm::log_prob_on_tape(&mut tape, h, &images, k).unwrap();
            let s = tape.sum(lp).unwrap();
            tape.backward(s).unwrap()
        })
    });
    let soft = Tensor::<f32>::randn([4, 16, 16, SOFTMAX_HEAD_CHANNELS], 1.0, &mut rng);
    let four = images.select(&[0, 1, 2, 3]);
    c.bench_function("softmax head log-likelihood on tape, 4 images", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let h = tape.leaf(soft.clone());
            let lp = causalpix_core::ablations::softmax_log_prob_on_tape(&mut tape, h, &four).unwrap();
            tape.sum(lp).unwrap()
        })
    });
}

fn network(c: &mut Criterion) {
    let (model, images) = desk_fixture(16, 16);
    let mut group = c.benchmark_group("desk network");
    group.sample_size(10);
    group.bench_function("eval forward, 16 images 16x16", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.iter(|| {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, false);
            let x = tape.constant(images.to_centered());
            model.forward(&mut tape, &params, x, None, Mode::Eval, &mut rng).unwrap().head
        })
    });
    group.bench_function("train step, 16 images 16x16", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.iter_batched(
            || {
                let m = model.clone();
                let o = OptimState::new(OptimConfig::default(), &m).unwrap();
                (m, o)
            },
            |(mut m, mut o)| train_step(&mut m, &mut o, &images, None, &mut rng).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, conv, likelihood, network);
criterion_main!(benches);
