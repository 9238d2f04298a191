use criterion::{criterion_group, criterion_main, Criterion};
use modiff::autodiff::{ConvGeometry, Tape};
use modiff::i2v::{I2v, I2vConfig};
use modiff::tddm::{Tddm, TddmConfig};
use modiff::vae::{Vae, VaeConfig};
use modiff_bench::{fields, phantom, random};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let x = random(&[8, 8, 8, 8, 8], 1);
    let w = random(&[8, 8, 3, 3, 3], 2);
    c.bench_function("conv3d_8ch_8x8cube_8frames", |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            let y = tape.constant(x.clone()).conv3d(tape.constant(w.clone()), None, ConvGeometry::same3()).unwrap();
            black_box(y.to_tensor())
        })
    });
    c.bench_function("conv3d_forward_backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let wv = tape.leaf(w.clone());
            let y = tape.leaf(x.clone()).conv3d(wv, None, ConvGeometry::same3()).unwrap();
            black_box(tape.backward(y.square().sum()))
        })
    });
}

fn phantom_gen(c: &mut Criterion) {
    c.bench_function("phantom_32cube_8frames", |b| b.iter(|| black_box(phantom(32, 8))));
}

fn denoisers(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tddm = Tddm::new(TddmConfig::default(), &mut rng).unwrap();
    let prompt = random(&[1, 1, 8, 8, 8], 3);
    let z = random(&[1, 16, 8, 8, 8], 4);
    c.bench_function("tddm_denoise_8cube", |b| b.iter(|| black_box(tddm.predict(&z, 10, &prompt, 10).unwrap())));

    let i2v = I2v::new(I2vConfig::default(), 4, &mut rng).unwrap();
    let f = i2v.field_input(&fields(32, 10).downsample(4).unwrap()).unwrap();
    let zl = random(&[4, 10, 8, 8, 8], 5);
    let z1 = zl.slice_axis(1, 0, 1).unwrap();
    c.bench_function("i2v_denoise_10frames", |b| b.iter(|| black_box(i2v.predict(&zl, 10, &z1, &f).unwrap())));

    let vae = Vae::new(VaeConfig { base_width: 4, ..Default::default() }, &mut rng).unwrap();
    let v = phantom(32, 4);
    c.bench_function("vae_encode_decode_4frames", |b| {
        b.iter(|| {
            let lv = vae.encode_video::<ChaCha8Rng>(&v, None).unwrap();
            black_box(vae.decode_video(&lv).unwrap())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, phantom_gen, denoisers
}
criterion_main!(benches);
