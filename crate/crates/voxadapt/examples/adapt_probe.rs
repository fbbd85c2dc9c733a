use std::time::Instant;
use voxadapt::data::{render_view, stylize, Dataset, DatasetConfig, Domain, ImageSample};
use voxadapt::eval::{encode_samples, real_domain_iou, retrieve_nearest};
use voxadapt::loss::LossConfig;
use voxadapt::nn::{Mode, NetSession};
use voxadapt::tensor::tape::Tape;
use voxadapt::tensor::Tensor;
use voxadapt::train::{run_schedule, TrainConfig, TrainState};

fn image_batch(samples: &[&ImageSample]) -> Tensor {
    let s = samples[0].size();
    let mut data = Vec::with_capacity(samples.len() * s * s);
    for sample in samples {
        data.extend_from_slice(sample.pixels.data());
    }
    Tensor::new(vec![samples.len(), s, s, 1], data).unwrap()
}

fn encode_batch_stats(state: &mut TrainState, samples: &[&ImageSample]) -> Vec<Vec<f64>> {
    let mut params = state.g2.params.clone();
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let batch = image_batch(chunk);
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let mut session = NetSession::new(&state.g2.plan, &mut params, Mode::Train, false);
        let latent = session.encode(&mut tape, x).unwrap();
        let value = tape.value(latent);
        let width = value.shape()[1];
        for row in value.data().chunks(width) {
            rows.push(row.to_vec());
        }
    }
    rows
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn latent_geometry(state: &mut TrainState, data: &Dataset) {
    let pool: Vec<ImageSample> = data
        .synth_train_indices()
        .into_iter()
        .map(|i| data.synth[i].clone())
        .collect();
    let refs: Vec<&ImageSample> = pool.iter().collect();
    let pool_lat = encode_samples(&state.g2.plan, &mut state.g2.params, &refs).unwrap();
    let queries: Vec<ImageSample> = data
        .train_ids
        .iter()
        .map(|&shape| {
            let render = render_view(data.grid_of(shape), 45.0, data.config.image_size);
            stylize(&render, Domain::Real, 9000 + shape as u64)
        })
        .collect();
    let qrefs: Vec<&ImageSample> = queries.iter().collect();
    let q_lat = encode_samples(&state.g2.plan, &mut state.g2.params, &qrefs).unwrap();
    let mut own = 0.0;
    let mut other = 0.0;
    let mut own_n = 0usize;
    let mut other_n = 0usize;
    for (qi, q) in q_lat.iter().enumerate() {
        let shape = data.train_ids[qi];
        for (pi, pl) in pool_lat.iter().enumerate() {
            let d = l2(q, pl);
            if pool[pi].shape_id == Some(shape) {
                own += d;
                own_n += 1;
            } else {
                other += d;
                other_n += 1;
            }
        }
    }
    let mut pool_spread = 0.0;
    let mut spread_n = 0usize;
    for i in 0..pool_lat.len() {
        for j in (i + 1)..pool_lat.len() {
            pool_spread += l2(&pool_lat[i], &pool_lat[j]);
            spread_n += 1;
        }
    }
    println!(
        "latents: query->own-shape mean {:.4}, query->other mean {:.4}, pool spread {:.4}",
        own / own_n as f64,
        other / other_n as f64,
        pool_spread / spread_n as f64
    );

    let all: Vec<&ImageSample> = queries.iter().chain(pool.iter()).collect();
    let bn = encode_batch_stats(state, &all);
    let (qb, pb) = bn.split_at(queries.len());
    let mut hits = 0usize;
    for (qi, q) in qb.iter().enumerate() {
        let shape = data.train_ids[qi];
        let mut scored: Vec<(usize, f64)> = pb.iter().enumerate().map(|(i, p)| (i, l2(q, p))).collect();
        scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        if scored.iter().take(5).any(|(i, _)| pool[*i].shape_id == Some(shape)) {
            hits += 1;
        }
    }
    println!(
        "batch-stat encoding cross top-5: {:.3}",
        hits as f64 / queries.len() as f64
    );
}

fn probe_config(seed: u64, adversarial: bool, steps: [usize; 3], phi2: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        steps,
        loss: LossConfig {
            phi2: if adversarial { phi2 } else { 0.0 },
            phi3: 0.2,
        },
        seed,
        synth_only: !adversarial,
        ..TrainConfig::default()
    }
}

fn retrieval(state: &mut TrainState, data: &Dataset) -> (usize, usize, f64, f64) {
    let pool: Vec<ImageSample> = data
        .synth_train_indices()
        .into_iter()
        .map(|i| data.synth[i].clone())
        .collect();
    let mut self_hits = 0usize;
    for (i, sample) in pool.iter().enumerate() {
        let r = retrieve_nearest(i, sample, &pool, &state.g2.plan, &mut state.g2.params, 1).unwrap();
        if r.neighbors[0].0 == i {
            self_hits += 1;
        }
    }
    let mut cross_hits = 0usize;
    for &shape in &data.train_ids {
        let render = render_view(data.grid_of(shape), 45.0, data.config.image_size);
        let query = stylize(&render, Domain::Real, 9000 + shape as u64);
        let r = retrieve_nearest(shape, &query, &pool, &state.g2.plan, &mut state.g2.params, 5).unwrap();
        if r.neighbors.iter().any(|(id, _)| pool[*id].shape_id == Some(shape)) {
            cross_hits += 1;
        }
    }
    let mut synth_hits = 0usize;
    for (i, sample) in pool.iter().enumerate() {
        let r = retrieve_nearest(i, sample, &pool, &state.g2.plan, &mut state.g2.params, 6).unwrap();
        if r.neighbors.iter().skip(1).take(5).any(|(id, _)| pool[*id].shape_id == sample.shape_id) {
            synth_hits += 1;
        }
    }
    (
        self_hits,
        pool.len(),
        cross_hits as f64 / data.train_ids.len() as f64,
        synth_hits as f64 / pool.len() as f64,
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let with_base = args.get(2).map(|s| s == "base").unwrap_or(false);
    let phi2: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.7);
    let steps = [6000, 1200, 800];
    let data = Dataset::generate(&DatasetConfig {
        shape_count: 40,
        views: 8,
        train_fraction: 0.7,
        image_size: 16,
        resolution: 16,
        seed: 1000,
    })
    .unwrap();

    let t0 = Instant::now();
    let mut full = run_schedule(&probe_config(seed, true, steps, phi2), &data, None).unwrap();
    let full_secs = t0.elapsed().as_secs_f64();
    let full_iou = real_domain_iou(&mut full, &data, 0.3, true).unwrap().mean;
    let (self_hits, pool_len, cross, synth5) = retrieval(&mut full, &data);
    println!(
        "seed {seed} phi2 {phi2} full: aligned IoU {full_iou:.4}, self {self_hits}/{pool_len}, cross top-5 {cross:.3}, synth-leave-one-out top-5 {synth5:.3}, train {full_secs:.0}s"
    );

    latent_geometry(&mut full, &data);

    if with_base {
        let mut base = run_schedule(&probe_config(seed, false, steps, phi2), &data, None).unwrap();
        let base_iou = real_domain_iou(&mut base, &data, 0.3, true).unwrap().mean;
        println!(
            "seed {seed} base: aligned IoU {base_iou:.4}, margin {:+.4}",
            full_iou - base_iou
        );
    }
}
