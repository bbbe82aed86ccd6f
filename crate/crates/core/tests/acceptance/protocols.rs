use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossclr_core::evalkit::{ensemble_fuse, finetune_eval, knn_eval, linear_eval, ProbeConfig};
use crossclr_core::{Encoder, EncoderConfig, ViewKind};

use crate::common::ensure;
use crate::training::small_data;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn fusion_order_invariance() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cases = 0;
    for case in 0..2000 {
        let views = rng.random_range(2..=4);
        let classes = rng.random_range(2..=6);
        let mut tables: Vec<Vec<f64>> = (0..views)
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            })
            .collect();
        if case % 4 == 0 {
            // near-ties stress the summation order
            for t in &mut tables {
                let v = 1.0 / 3.0 + 1e-17 * rng.random_range(-1.0..1.0);
                t.iter_mut().take(2).for_each(|x| *x = v);
            }
        }
        let base = {
            let refs: Vec<&[f64]> = tables.iter().map(Vec::as_slice).collect();
            ensemble_fuse(&refs).map_err(|e| e.to_string())?
        };
        for p in permutations(views) {
            let refs: Vec<&[f64]> = p.iter().map(|&i| tables[i].as_slice()).collect();
            let got = ensemble_fuse(&refs).map_err(|e| e.to_string())?;
            ensure(got == base, || format!("case {case}: order {p:?} picks {got}, identity picks {base}"))?;
            cases += 1;
        }
    }
    Ok(cases)
}

pub fn protocol_contracts() -> Result<String, String> {
    let (train, test) = small_data();
    let encoder = Encoder::new(EncoderConfig::tiny(), train.graph().clone()).unwrap();
    let params = encoder.init_params(&mut ChaCha8Rng::seed_from_u64(4));
    let probe = ProbeConfig {
        seed: 2,
        ..ProbeConfig::with_epochs(20)
    };

    let before = params.checksum();
    let linear = linear_eval(&encoder, &params, &train, &test, ViewKind::Joint, &probe).map_err(|e| e.to_string())?;
    ensure(params.checksum() == before, || "linear_eval changed the encoder".into())?;

    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    idx.truncate(train.len() / 2);
    let inside = train.subset(&idx);
    for view in ViewKind::ALL {
        let acc = knn_eval(&encoder, &params, &train, &inside, view, 1).map_err(|e| e.to_string())?;
        ensure(acc == 100.0, || format!("{view}: k=1 on a training subset gives {acc}%"))?;
    }

    let fused = fusion_order_invariance()?;

    let zero = ProbeConfig {
        epochs: 0,
        ..ProbeConfig::with_epochs(1)
    };
    let ft = finetune_eval(&encoder, &params, &train, &test, ViewKind::Joint, &probe, &zero).map_err(|e| e.to_string())?;
    ensure(ft.result == linear, || {
        format!("zero-epoch finetune {}% vs linear {}%", ft.result.accuracy, linear.accuracy)
    })?;
    ensure(ft.params == params, || "zero-epoch finetune moved the encoder".into())?;

    Ok(format!(
        "checksum stable; k=1 on {} training samples is 100% for every view; {fused} fusion orderings agree; zero-epoch finetune = linear ({:.2}%)",
        inside.len(),
        linear.accuracy
    ))
}
