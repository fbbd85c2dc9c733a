use voxadapt::data::{Dataset, DatasetConfig};
use voxadapt::loss::LossConfig;
use voxadapt::train::{run_schedule, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let phi2: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.7);
    let out = args.get(3).cloned().unwrap_or_else(|| "/tmp/probe_state".into());
    let steps: [usize; 3] = match args.get(4) {
        Some(spec) => {
            let parts: Vec<usize> = spec.split(',').map(|s| s.parse().unwrap()).collect();
            [parts[0], parts[1], parts[2]]
        }
        None => [6000, 1200, 800],
    };
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
        steps,
        loss: LossConfig { phi2, phi3: 0.2 },
        seed,
        ..TrainConfig::default()
    };
    let state = run_schedule(&config, &data, None).unwrap();
    state.save_checkpoint(std::path::Path::new(&out)).unwrap();
    println!("saved {out}");
}
