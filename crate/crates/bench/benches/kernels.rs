use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use handprobe::eval::{average_precision, slack_band, SlackSide};
use handprobe::losses::{loss_joint_grad, tensor_to_matrix, HandOutputs, JointOutputs, LossConfig};
use handprobe::models::{AcpModel, AcpModelSpec, EncoderSpec, HeadSpec, ObjectModel};
use handprobe::tracker::link_frame;
use handprobe::{BBox, Tensor, TrackerParams};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = || tensor_to_matrix(&random_tensor(&mut rng, &[32, 128]));
    let out = JointOutputs {
        z_o: m(),
        z_op: m(),
        hand: Some(HandOutputs {
            z_oh: m(),
            z_h: m(),
            z_oo: m(),
        }),
    };
    let cfg = LossConfig::default();
    c.bench_function("joint loss + grad, N=32 D=128", |b| {
        b.iter(|| loss_joint_grad(black_box(&out), &cfg).unwrap())
    });
}

fn tracking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut boxes = |n: usize| -> Vec<BBox> {
        (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
                BBox::new(x, y, x + 40.0, y + 40.0).unwrap()
            })
            .collect()
    };
    let (tracks, dets) = (boxes(8), boxes(8));
    let params = TrackerParams::default();
    c.bench_function("link_frame 8x8", |b| b.iter(|| link_frame(black_box(&tracks), black_box(&dets), &params)));
}

fn evaluation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..65536).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..65536).map(|_| rng.random_bool(0.2)).collect();
    c.bench_function("average_precision 64k", |b| {
        b.iter(|| average_precision(black_box(&scores), black_box(&labels)).unwrap())
    });
    let (w, h) = (256, 144);
    let mask: Vec<bool> = (0..w * h).map(|i| (60..140).contains(&(i % w)) && (40..100).contains(&(i / w))).collect();
    c.bench_function("slack_band 256x144", |b| {
        b.iter(|| slack_band(black_box(&mask), w, h, 3.0, SlackSide::Both))
    });
}

fn networks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = EncoderSpec {
        input_size: 32,
        ..Default::default()
    };
    let mut model = ObjectModel::new(&spec, &HeadSpec::default(), false, 0);
    let crops = random_tensor(&mut rng, &[64, 3, 32, 32]);
    c.bench_function("object trunk fwd+bwd, 64 crops 32px", |b| {
        b.iter(|| {
            let e = model.encode(black_box(&crops), true).unwrap();
            model.backward_trunk(&e).unwrap()
        })
    });
    let acp_spec = AcpModelSpec::default();
    let mut acp = AcpModel::new(&acp_spec, 0).unwrap();
    let s = acp_spec.input_size;
    let batch = random_tensor(&mut rng, &[8, 3, s, s]);
    c.bench_function("ACP forward, 8 contexts", |b| b.iter(|| acp.forward(black_box(&batch), false).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = losses, tracking, evaluation, networks
}
criterion_main!(benches);
