use voxadapt::data::{render_view, stylize, Dataset, DatasetConfig, Domain, ImageSample};
use voxadapt::eval::{encode_samples, retrieve_nearest};
use voxadapt::loss::LossConfig;
use voxadapt::rng;
use voxadapt::tensor::Tensor;
use voxadapt::train::{TrainConfig, TrainState};

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn outline_query(data: &Dataset, shape: usize, constant: bool, seed: u64) -> ImageSample {
    let render = render_view(data.grid_of(shape), 45.0, data.config.image_size);
    if !constant {
        return stylize(&render, Domain::Real, seed);
    }
    let sketch = stylize(&render, Domain::Real, seed);
    let pixels: Vec<f64> = sketch
        .pixels
        .data()
        .iter()
        .map(|v| if *v > 0.0 { 0.725 } else { 0.0 })
        .collect();
    ImageSample {
        pixels: Tensor::new(vec![data.config.image_size, data.config.image_size], pixels).unwrap(),
        ..sketch
    }
}

fn cross_rate(state: &mut TrainState, data: &Dataset, pool: &[ImageSample], constant: bool) -> f64 {
    let mut hits = 0usize;
    for &shape in &data.train_ids {
        let query = outline_query(data, shape, constant, 9000 + shape as u64);
        let r = retrieve_nearest(shape, &query, pool, &state.g2.plan, &mut state.g2.params, 5).unwrap();
        if r.neighbors.iter().any(|(id, _)| pool[*id].shape_id == Some(shape)) {
            hits += 1;
        }
    }
    hits as f64 / data.train_ids.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = args.get(1).cloned().unwrap_or_else(|| "/tmp/state_s0_phi07.ckpt".into());
    let data = Dataset::generate(&DatasetConfig {
        shape_count: 40,
        views: 8,
        train_fraction: 0.7,
        image_size: 16,
        resolution: 16,
        seed: 1000,
    })
    .unwrap();
    let config = TrainConfig {
        batch_size: 16,
        steps: [6000, 0, 0],
        loss: LossConfig { phi2: 0.7, phi3: 0.2 },
        seed: 0,
        ..TrainConfig::default()
    };
    let mut state = TrainState::load_checkpoint(&config, std::path::Path::new(&ckpt)).unwrap();
    let pool: Vec<ImageSample> = data
        .synth_train_indices()
        .into_iter()
        .map(|i| data.synth[i].clone())
        .collect();

    println!("noisy-stroke queries cross top-5: {:.3}", cross_rate(&mut state, &data, &pool, false));
    println!("flat-stroke queries  cross top-5: {:.3}", cross_rate(&mut state, &data, &pool, true));

    let shape = data.train_ids[3];
    let mut latents = Vec::new();
    for trial in 0..10u64 {
        let q = outline_query(&data, shape, false, rng::derive_seed(7000, 9, trial));
        let refs = [&q];
        latents.push(encode_samples(&state.g2.plan, &mut state.g2.params, &refs).unwrap().remove(0));
    }
    let mut spread = 0.0;
    let mut n = 0;
    for i in 0..latents.len() {
        for j in (i + 1)..latents.len() {
            spread += l2(&latents[i], &latents[j]);
            n += 1;
        }
    }
    println!("same-shape noise-reseeded query latent spread: {:.4}", spread / n as f64);
}
