use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crossclr_core::contrastive::MemoryBank;
use crossclr_core::Tensor;

pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn random_rows(rows: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| random_unit(dim, rng)).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).expect("rectangular")
}

pub fn bank_of(rows: &[Vec<f64>]) -> MemoryBank {
    let mut b = MemoryBank::new(rows.len(), rows[0].len()).expect("non-empty");
    b.enqueue(&tensor(rows), None).expect("unit rows");
    b
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}
