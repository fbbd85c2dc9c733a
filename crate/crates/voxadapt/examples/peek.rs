use voxadapt::data::{render_view, stylize, Dataset, DatasetConfig, Domain};

fn show(label: &str, pixels: &[f64], s: usize) {
    println!("{label}:");
    for row in 0..s {
        let line: String = (0..s)
            .map(|c| {
                let v = pixels[row * s + c];
                if v > 0.66 { '#' } else if v > 0.33 { '+' } else if v > 0.0 { '.' } else { ' ' }
            })
            .collect();
        println!("  |{line}|");
    }
}

fn main() {
    let data = Dataset::generate(&DatasetConfig {
        shape_count: 40,
        views: 8,
        train_fraction: 0.7,
        image_size: 16,
        resolution: 16,
        seed: 1000,
    })
    .unwrap();
    for shape in [0usize, 1, 2] {
        let render = render_view(data.grid_of(shape), 45.0, 16);
        let sketch = stylize(&render, Domain::Real, 9000 + shape as u64);
        show(&format!("shape {shape} render 45deg"), render.pixels.data(), 16);
        show(&format!("shape {shape} sketch 45deg"), sketch.pixels.data(), 16);
    }
}
