//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossclr_core::contrastive::MemoryBank;
use crossclr_core::encoder::{batch_tensor, Encoder, EncoderConfig, EncoderParams};
use crossclr_core::numcore::Tensor;
use crossclr_core::skeldata::{synth_dataset, SkeletonSequence, SynthConfig};

pub struct EncoderFixture {
    pub encoder: Encoder,
    pub params: EncoderParams,
    /// `[B, T, V, 3]`
    pub input: Tensor,
}

/// Default-sized synthetic clips and a freshly initialized encoder.
pub fn encoder_fixture(batch: usize) -> EncoderFixture {
    let per_class = batch.div_ceil(12).max(2);
    let (train, _) = synth_dataset(&SynthConfig {
        per_class_train: per_class,
        per_class_test: 2,
        ..SynthConfig::default()
    })
    .expect("default synthetic config is valid");
    let encoder = Encoder::new(EncoderConfig::default(), train.graph().clone()).expect("default encoder config is valid");
    let params = encoder.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let seqs: Vec<&SkeletonSequence> = train.sequences().iter().take(batch).collect();
    let input = batch_tensor(&seqs).expect("equal-length clips");
    EncoderFixture { encoder, params, input }
}

pub fn unit_rows(rows: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    Tensor::new(vec![rows, dim], data).expect("consistent shape")
}

/// Queries, keys and a full bank of random unit vectors.
pub fn loss_fixture(batch: usize, dim: usize, bank: usize, seed: u64) -> (Tensor, Tensor, MemoryBank) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = unit_rows(batch, dim, &mut rng);
    let zhat = unit_rows(batch, dim, &mut rng);
    let mut b = MemoryBank::new(bank, dim).expect("positive sizes");
    b.enqueue(&unit_rows(bank, dim, &mut rng), None).expect("unit rows");
    (z, zhat, b)
}
