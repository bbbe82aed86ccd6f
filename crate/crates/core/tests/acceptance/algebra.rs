use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossclr_core::contrastive::{
    batch_cross_directed, batch_cross_total, batch_infonce, batch_km, batch_similarities, loss_cross_directed,
    loss_infonce, loss_km, topk_mine, BatchView, ContrastiveError, GuideMode, MemoryBank,
};
use crossclr_core::numcore::grad_check;
use crossclr_core::{Graph, Tensor, TensorError, Var};

use crate::common::{bank_of, ensure, random_rows, random_unit, tensor};

const BANK: usize = 16;
const DIM: usize = 8;
const CONFIGS: u64 = 12;
const TOL: f64 = 1e-4;

fn lift(e: ContrastiveError) -> TensorError {
    match e {
        ContrastiveError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

struct Setup {
    tau: f64,
    k: usize,
    raw: [Tensor; 3],
    keys: [Vec<Vec<f64>>; 3],
    banks: [MemoryBank; 3],
}

fn setup(seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.random_range(1..=4);
    let tau = rng.random_range(0.1..0.5);
    let k = rng.random_range(1..=4);
    let raw = [0; 3].map(|_| {
        let data: Vec<f64> = (0..batch * DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![batch, DIM], data).unwrap()
    });
    let keys = [0; 3].map(|_| random_rows(batch, DIM, &mut rng));
    let banks = [0; 3].map(|_| bank_of(&random_rows(BANK, DIM, &mut rng)));
    Setup { tau, k, raw, keys, banks }
}

fn view(g: &mut Graph, s: &Setup, i: usize, z: Var) -> BatchView {
    BatchView {
        z,
        z_hat: g.constant(tensor(&s.keys[i])),
        bank_t: g.constant(s.banks[i].transposed()),
    }
}

fn check(
    label: &str,
    seed: u64,
    x: &Tensor,
    f: impl Fn(&mut Graph, Var) -> Result<Var, TensorError>,
    worst: &mut f64,
) -> Result<(), String> {
    let r = grad_check(f, x, 1e-6).map_err(|e| format!("{label} seed {seed}: {e}"))?;
    *worst = worst.max(r.max_rel_error);
    ensure(r.max_rel_error < TOL, || {
        format!("{label} seed {seed}: relative error {:.2e} at {}", r.max_rel_error, r.worst_index)
    })
}

pub fn gradient_correctness() -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut checks = 0;
    for seed in 0..CONFIGS {
        let s = setup(seed);
        let x0 = &s.raw[0];
        check("infonce", seed, x0, |g, x| {
            let z = g.l2_normalize(x)?;
            let v = view(g, &s, 0, z);
            batch_infonce(g, v.z, v.z_hat, v.bank_t, s.tau).map_err(lift)
        }, &mut worst)?;
        check("knowledge mining", seed, x0, |g, x| {
            let z = g.l2_normalize(x)?;
            let v = view(g, &s, 0, z);
            batch_km(g, v.z, v.z_hat, v.bank_t, s.tau, s.k).map_err(lift)
        }, &mut worst)?;
        // directed term, differentiated through the target and through the guide
        check("directed cross (target)", seed, x0, |g, x| {
            let z = g.l2_normalize(x)?;
            let u = view(g, &s, 0, z);
            let zv = g.constant(tensor(&normalize_rows(&s.raw[1])));
            let bv = g.constant(s.banks[1].transposed());
            let s_v = batch_similarities(g, zv, bv).map_err(lift)?;
            batch_cross_directed(g, u.z, u.z_hat, u.bank_t, s_v, s.tau, s.k).map_err(lift)
        }, &mut worst)?;
        check("directed cross (guide)", seed, &s.raw[1], |g, x| {
            let zu = g.constant(tensor(&normalize_rows(x0)));
            let u = view(g, &s, 0, zu);
            let zv = g.l2_normalize(x)?;
            let bv = g.constant(s.banks[1].transposed());
            let s_v = batch_similarities(g, zv, bv).map_err(lift)?;
            batch_cross_directed(g, u.z, u.z_hat, u.bank_t, s_v, s.tau, s.k).map_err(lift)
        }, &mut worst)?;
        let n_views = 2 + (seed % 2) as usize;
        let total = |g: &mut Graph, x: Var, guide: GuideMode| -> Result<Var, TensorError> {
            let mut views = vec![];
            let z = g.l2_normalize(x)?;
            views.push(view(g, &s, 0, z));
            for i in 1..n_views {
                let z = g.constant(tensor(&normalize_rows(&s.raw[i])));
                views.push(view(g, &s, i, z));
            }
            batch_cross_total(g, &views, s.tau, s.k, guide).map_err(lift)
        };
        check(&format!("total {n_views} views"), seed, x0, |g, x| total(g, x, GuideMode::Flowing), &mut worst)?;

        // A stopped guide is a constant, so the reference is the same sum with
        // every guide frozen at its current value.
        let guides: Vec<Tensor> = (0..n_views)
            .map(|i| {
                let mut g = Graph::new();
                let z = g.constant(tensor(&normalize_rows(&s.raw[i])));
                let b = g.constant(s.banks[i].transposed());
                let sim = batch_similarities(&mut g, z, b).unwrap();
                g.value(sim).clone()
            })
            .collect();
        let frozen = |g: &mut Graph, x: Var| -> Result<Var, TensorError> {
            let z = g.l2_normalize(x)?;
            let mut acc: Option<Var> = None;
            for u in 0..n_views {
                let zu = if u == 0 { z } else { g.constant(tensor(&normalize_rows(&s.raw[u]))) };
                let t = view(g, &s, u, zu);
                for (v, guide) in guides.iter().enumerate() {
                    if u == v {
                        continue;
                    }
                    let sv = g.constant(guide.clone());
                    let term = batch_cross_directed(g, t.z, t.z_hat, t.bank_t, sv, s.tau, s.k).map_err(lift)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, term)?,
                        None => term,
                    });
                }
            }
            Ok(acc.expect("at least one pair"))
        };
        check(&format!("total {n_views} views, frozen guides"), seed, x0, frozen, &mut worst)?;
        let grad_of = |f: &dyn Fn(&mut Graph, Var) -> Result<Var, TensorError>| -> Tensor {
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let out = f(&mut g, x).unwrap();
            let mut grads = g.backward(out).unwrap();
            grads.take(x).unwrap()
        };
        let stopped = grad_of(&|g, x| total(g, x, GuideMode::Stopped));
        let reference = grad_of(&frozen);
        let gap = stopped
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(gap <= 1e-12, || format!("stopped total seed {seed}: gradient differs from frozen-guide sum by {gap:e}"))?;
        checks += 6;
    }
    Ok(format!("{checks} checks over {CONFIGS} configurations, worst relative error {worst:.2e}"))
}

fn normalize_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data()
        .chunks(w)
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct ratio form with the given bank positives.
fn ratio_loss(z: &[f64], z_hat: &[f64], bank: &MemoryBank, sims: &[f64], positives: &[usize], tau: f64) -> f64 {
    let pos = (dot(z, z_hat) / tau).exp();
    let mut num = pos;
    let mut den = pos;
    for i in 0..bank.len() {
        let e = (sims[i] / tau).exp();
        den += e;
        if positives.contains(&i) {
            num += e;
        }
    }
    -(num / den).ln()
}

pub fn exact_reductions() -> Result<String, String> {
    let mut worst_transplant = 0.0f64;
    let mut worst_full = 0.0f64;
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let tau = rng.random_range(0.05..1.0);
        let z = random_unit(DIM, &mut rng);
        let zh = random_unit(DIM, &mut rng);
        let bank = bank_of(&random_rows(BANK, DIM, &mut rng));

        let a = loss_km(&z, &zh, &bank, tau, 0).unwrap();
        let b = loss_infonce(&z, &zh, &bank, tau).unwrap();
        ensure(a.to_bits() == b.to_bits(), || format!("seed {seed}: km(K=0) {a:e} != infonce {b:e}"))?;

        let zs = random_rows(3, DIM, &mut rng);
        let zhs = random_rows(3, DIM, &mut rng);
        let mut g = Graph::new();
        let zv = g.constant(tensor(&zs));
        let zhv = g.constant(tensor(&zhs));
        let bt = g.constant(bank.transposed());
        let km0 = batch_km(&mut g, zv, zhv, bt, tau, 0).unwrap();
        let nce = batch_infonce(&mut g, zv, zhv, bt, tau).unwrap();
        let (a, b) = (g.value(km0).item().unwrap(), g.value(nce).item().unwrap());
        ensure(a.to_bits() == b.to_bits(), || format!("seed {seed}: batched km(K=0) {a:e} != infonce {b:e}"))?;

        // unit guide: the cross term is knowledge mining with the source view's positives
        let other = random_unit(DIM, &mut rng);
        let other_bank = bank_of(&random_rows(BANK, DIM, &mut rng));
        let s_other: Vec<f64> = (0..BANK).map(|i| dot(&other, other_bank.slot(i))).collect();
        let k = rng.random_range(1..BANK);
        let (_, transplanted) = topk_mine(&s_other, k).unwrap();
        let cross = loss_cross_directed(&z, &zh, &bank, &vec![1.0; BANK], &transplanted, tau).unwrap();
        let sims: Vec<f64> = (0..BANK).map(|i| dot(&z, bank.slot(i))).collect();
        let want = ratio_loss(&z, &zh, &bank, &sims, &transplanted, tau);
        worst_transplant = worst_transplant.max((cross - want).abs());
        ensure((cross - want).abs() <= 1e-12, || format!("seed {seed}: unit-guide cross {cross:e} vs {want:e}"))?;

        let full = loss_km(&z, &zh, &bank, tau, BANK).unwrap();
        worst_full = worst_full.max(full.abs());
        ensure(full.abs() <= 1e-12, || format!("seed {seed}: km(K=N) = {full:e}"))?;
        let km_full = batch_km(&mut g, zv, zhv, bt, tau, BANK).unwrap();
        let v = g.value(km_full).item().unwrap();
        ensure(v.abs() <= 1e-12, || format!("seed {seed}: batched km(K=N) = {v:e}"))?;
    }
    Ok(format!(
        "K=0 bit-equal on {CONFIGS} configs; unit-guide gap {worst_transplant:.1e}; K=N loss {worst_full:.1e}"
    ))
}

pub fn bank_semantics() -> Result<String, String> {
    const SEQUENCES: u64 = 1200;
    let mut enqueues = 0;
    for seed in 0..SEQUENCES {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let cap = rng.random_range(1..24);
        let dim = rng.random_range(1..7);
        let mut a = MemoryBank::new(cap, dim).unwrap();
        let mut b = MemoryBank::new(cap, dim).unwrap();
        let mut model: VecDeque<(Vec<f64>, usize)> = VecDeque::new();
        let mut next_id = 0;
        for _ in 0..rng.random_range(1..12) {
            let size = rng.random_range(1..2 * cap + 2);
            let rows_a = random_rows(size, dim, &mut rng);
            let rows_b = random_rows(size, dim, &mut rng);
            let ids: Vec<usize> = (next_id..next_id + size).collect();
            next_id += size;
            a.enqueue(&tensor(&rows_a), Some(&ids)).unwrap();
            b.enqueue(&tensor(&rows_b), Some(&ids)).unwrap();
            enqueues += 1;
            for (r, &id) in rows_a.into_iter().zip(&ids) {
                model.push_back((r, id));
                if model.len() > cap {
                    model.pop_front();
                }
            }
            ensure(a.len() <= cap && a.len() == model.len(), || {
                format!("seed {seed}: len {} with capacity {cap}", a.len())
            })?;
            let contents = a.contents();
            for (got, (want, _)) in contents.iter().zip(&model) {
                ensure(*got == want.as_slice(), || format!("seed {seed}: bank order differs from FIFO"))?;
            }
            for slot in 0..a.len() {
                let row = a.slot(slot);
                let n = dot(row, row).sqrt();
                ensure((n - 1.0).abs() < 1e-12, || format!("seed {seed}: slot {slot} has norm {n}"))?;
            }
            ensure(a.ids() == b.ids(), || format!("seed {seed}: id columns diverge"))?;
            let mut stored: Vec<usize> = a.ids().iter().map(|i| i.unwrap()).collect();
            stored.sort_unstable();
            let mut expected: Vec<usize> = model.iter().map(|(_, id)| *id).collect();
            expected.sort_unstable();
            ensure(stored == expected, || format!("seed {seed}: stored ids differ from the newest {cap}"))?;
        }
        let before = a.clone();
        let mut bad = random_rows(1, dim, &mut rng);
        bad[0][0] += 0.5;
        ensure(a.enqueue(&tensor(&bad), Some(&[next_id])).is_err() && a == before, || {
            format!("seed {seed}: non-unit row accepted or bank mutated")
        })?;
    }
    Ok(format!("{SEQUENCES} random sequences, {enqueues} enqueues"))
}
