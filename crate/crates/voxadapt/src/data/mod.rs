//! Procedural shapes, depth renders, and the two image domains used for
//! training: "synth" depth renders paired with their voxel grids, and
//! unpaired "real"-style sketch images.
//!
//! Grids use a right-handed (x, y, z) layout with y vertical and z the
//! viewing depth, stored z-fastest. Renders are orthographic: the grid is
//! rotated about the vertical axis, rays march along +z, and a pixel
//! records `1 - depth/D` of the first occupied voxel (0 on a miss).

pub mod files;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng::{self, derive_rng};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("bad {category} recipe: {detail}")]
    BadRecipe {
        category: &'static str,
        detail: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

/// Dense occupancy volume, z-fastest, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    occupancy: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(resolution: usize) -> Self {
        VoxelGrid {
            resolution,
            occupancy: vec![0.0; resolution * resolution * resolution],
        }
    }

    pub fn from_values(resolution: usize, occupancy: Vec<f64>) -> Result<Self, DataError> {
        if occupancy.len() != resolution * resolution * resolution {
            return Err(DataError::InvalidConfig(format!(
                "voxel payload holds {} values, resolution {} needs {}",
                occupancy.len(),
                resolution,
                resolution * resolution * resolution
            )));
        }
        if occupancy.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::InvalidConfig(
                "voxel occupancy outside [0,1]".into(),
            ));
        }
        Ok(VoxelGrid {
            resolution,
            occupancy,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.resolution + y) * self.resolution + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.occupancy[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f64) {
        let i = self.index(x, y, z);
        self.occupancy[i] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.occupancy
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|v| **v > 0.5).count()
    }

    pub fn is_binary(&self) -> bool {
        self.occupancy.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    /// Shape [D, D, D, 1] with axes (x, y, z, channel).
    pub fn to_tensor(&self) -> Tensor {
        let d = self.resolution;
        Tensor::new(vec![d, d, d, 1], self.occupancy.clone()).expect("occupancy is finite")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, DataError> {
        let shape = t.shape();
        let d = shape[0];
        if shape.len() != 4 || shape[1] != d || shape[2] != d || shape[3] != 1 {
            return Err(DataError::InvalidConfig(format!(
                "expected a [D, D, D, 1] tensor, got {:?}",
                shape
            )));
        }
        VoxelGrid::from_values(d, t.data().to_vec())
    }
}

/// Stack grids into a [b, D, D, D, 1] batch tensor.
pub fn voxel_batch(grids: &[&VoxelGrid]) -> Result<Tensor, DataError> {
    let d = grids
        .first()
        .ok_or_else(|| DataError::InvalidConfig("empty voxel batch".into()))?
        .resolution;
    let mut data = Vec::with_capacity(grids.len() * d * d * d);
    for g in grids {
        if g.resolution != d {
            return Err(DataError::InvalidConfig(
                "mixed resolutions in voxel batch".into(),
            ));
        }
        data.extend_from_slice(&g.occupancy);
    }
    Ok(Tensor::new(vec![grids.len(), d, d, d, 1], data)?)
}

/// Which image domain a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Synth,
    Real,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Synth => "synth",
            Domain::Real => "real",
        }
    }
}

/// A single grayscale view. `shape_id` links synth renders to their voxel
/// grid; real-style samples carry no link once they enter a training pool.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub domain: Domain,
    pub azimuth: f64,
    pub shape_id: Option<usize>,
}

impl ImageSample {
    pub fn size(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Stack samples into a [b, S, S, 1] batch tensor.
pub fn image_batch(samples: &[&ImageSample]) -> Result<Tensor, DataError> {
    let s = samples
        .first()
        .ok_or_else(|| DataError::InvalidConfig("empty image batch".into()))?
        .size();
    let mut data = Vec::with_capacity(samples.len() * s * s);
    for item in samples {
        if item.size() != s {
            return Err(DataError::InvalidConfig(
                "mixed image sizes in batch".into(),
            ));
        }
        data.extend_from_slice(item.pixels.data());
    }
    Ok(Tensor::new(vec![samples.len(), s, s, 1], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeCategory {
    Chair,
    Table,
    Box,
}

impl ShapeCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeCategory::Chair => "chair",
            ShapeCategory::Table => "table",
            ShapeCategory::Box => "box",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "chair" => Ok(ShapeCategory::Chair),
            "table" => Ok(ShapeCategory::Table),
            "box" => Ok(ShapeCategory::Box),
            other => Err(DataError::InvalidConfig(format!(
                "unknown shape category {other:?}"
            ))),
        }
    }
}

/// Axis-aligned half-open voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cuboid {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Cuboid {
    pub fn volume(&self) -> usize {
        (0..3).map(|a| self.hi[a] - self.lo[a]).product()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }
}

/// Parametric furniture-like shape. All dimensions are fractions of the
/// grid resolution:
///   width, depth        in [0.25, 0.95]  footprint extents
///   seat_height         in [0.20, 0.70]  top of the legs (box: full height)
///   back_height         in [0.00, 0.40]  backrest above the seat (chair only)
///   leg_thickness       in [0.05, 0.25], and at most 0.35 * min(width, depth)
///                       so opposing legs never collide
///   slab_thickness      in [0.05, 0.25]
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecipe {
    pub category: ShapeCategory,
    pub width: f64,
    pub depth: f64,
    pub seat_height: f64,
    pub back_height: f64,
    pub leg_thickness: f64,
    pub slab_thickness: f64,
}

const WIDTH_RANGE: (f64, f64) = (0.25, 0.95);
const HEIGHT_RANGE: (f64, f64) = (0.20, 0.70);
const BACK_RANGE: (f64, f64) = (0.15, 0.40);
const LIMB_RANGE: (f64, f64) = (0.05, 0.25);

impl ShapeRecipe {
    /// Draw a recipe uniformly within the documented bounds.
    pub fn sample(category: ShapeCategory, rng: &mut impl Rng) -> Self {
        let span = |r: (f64, f64), rng: &mut dyn rand::RngCore| {
            Uniform::new(r.0, r.1).sample(rng)
        };
        let width = span(WIDTH_RANGE, rng);
        let depth = span(WIDTH_RANGE, rng);
        let leg_cap = LIMB_RANGE.1.min(0.35 * width.min(depth));
        ShapeRecipe {
            category,
            width,
            depth,
            seat_height: span(HEIGHT_RANGE, rng),
            back_height: if category == ShapeCategory::Chair {
                span(BACK_RANGE, rng)
            } else {
                0.0
            },
            leg_thickness: span((LIMB_RANGE.0, leg_cap), rng),
            slab_thickness: span(LIMB_RANGE, rng),
        }
    }

    /// A centered solid box covering the middle `extent` fraction in every
    /// axis.
    pub fn solid_box(extent: f64) -> Self {
        ShapeRecipe {
            category: ShapeCategory::Box,
            width: extent,
            depth: extent,
            seat_height: extent,
            back_height: 0.0,
            leg_thickness: 0.1,
            slab_thickness: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let checks = [
            ("width", self.width, WIDTH_RANGE),
            ("depth", self.depth, WIDTH_RANGE),
            ("seat_height", self.seat_height, HEIGHT_RANGE),
            ("leg_thickness", self.leg_thickness, LIMB_RANGE),
            ("slab_thickness", self.slab_thickness, LIMB_RANGE),
        ];
        for (name, value, (lo, hi)) in checks {
            if !(lo..=hi).contains(&value) {
                return Err(DataError::BadRecipe {
                    category: self.category.as_str(),
                    detail: format!("{name} = {value} outside [{lo}, {hi}]"),
                });
            }
        }
        if self.category == ShapeCategory::Chair
            && !(BACK_RANGE.0..=BACK_RANGE.1).contains(&self.back_height)
        {
            return Err(DataError::BadRecipe {
                category: "chair",
                detail: format!(
                    "back_height = {} outside [{}, {}]",
                    self.back_height, BACK_RANGE.0, BACK_RANGE.1
                ),
            });
        }
        Ok(())
    }

    /// The axis-aligned parts whose union is the shape, in grid voxels.
    pub fn cuboids(&self, resolution: usize) -> Result<Vec<Cuboid>, DataError> {
        self.validate()?;
        let d = resolution as f64;
        let frac = |f: f64| (f * d).round() as usize;
        let centered = |size: f64| {
            let lo = ((0.5 - size / 2.0) * d).round() as usize;
            let hi = ((0.5 + size / 2.0) * d).round() as usize;
            (lo, hi.min(resolution))
        };
        let (x0, x1) = centered(self.width);
        let (z0, z1) = centered(self.depth);
        let seat_y = frac(self.seat_height).min(resolution);
        let leg = frac(self.leg_thickness).max(1);
        let slab = frac(self.slab_thickness).max(1);

        let mut parts = Vec::new();
        let mut push = |name: &'static str, c: Cuboid| -> Result<(), DataError> {
            if c.volume() == 0 || c.hi.iter().any(|h| *h > resolution) {
                return Err(DataError::BadRecipe {
                    category: self.category.as_str(),
                    detail: format!("{name} part is empty or leaves the grid: {c:?}"),
                });
            }
            parts.push(c);
            Ok(())
        };

        match self.category {
            ShapeCategory::Box => {
                let (y0, y1) = centered(self.seat_height);
                push(
                    "body",
                    Cuboid {
                        lo: [x0, y0, z0],
                        hi: [x1, y1, z1],
                    },
                )?;
            }
            ShapeCategory::Table | ShapeCategory::Chair => {
                if x1 - x0 < 2 * leg || z1 - z0 < 2 * leg {
                    return Err(DataError::BadRecipe {
                        category: self.category.as_str(),
                        detail: "legs overlap across the footprint".into(),
                    });
                }
                for (lx, lz) in [(x0, z0), (x1 - leg, z0), (x0, z1 - leg), (x1 - leg, z1 - leg)] {
                    push(
                        "leg",
                        Cuboid {
                            lo: [lx, 0, lz],
                            hi: [lx + leg, seat_y, lz + leg],
                        },
                    )?;
                }
                let seat_top = (seat_y + slab).min(resolution);
                push(
                    "slab",
                    Cuboid {
                        lo: [x0, seat_y, z0],
                        hi: [x1, seat_top, z1],
                    },
                )?;
                if self.category == ShapeCategory::Chair {
                    let back_top = (seat_top + frac(self.back_height)).min(resolution);
                    push(
                        "back",
                        Cuboid {
                            lo: [x0, seat_top, z1 - leg],
                            hi: [x1, back_top, z1],
                        },
                    )?;
                }
            }
        }
        Ok(parts)
    }
}

/// Rasterize a recipe into a binary grid.
pub fn generate_shape(recipe: &ShapeRecipe, resolution: usize) -> Result<VoxelGrid, DataError> {
    let parts = recipe.cuboids(resolution)?;
    let mut grid = VoxelGrid::new(resolution);
    for c in &parts {
        for x in c.lo[0]..c.hi[0] {
            for y in c.lo[1]..c.hi[1] {
                for z in c.lo[2]..c.hi[2] {
                    grid.set(x, y, z, 1.0);
                }
            }
        }
    }
    if grid.occupied_count() == 0 {
        return Err(DataError::BadRecipe {
            category: recipe.category.as_str(),
            detail: "recipe rasterizes to an empty grid".into(),
        });
    }
    Ok(grid)
}

/// Orthographic depth-shaded projection. The grid is rotated about the
/// vertical axis by `azimuth` degrees with nearest-voxel resampling; rays
/// march along +z one voxel per step and the pixel stores `1 - depth/D`
/// of the first occupied voxel, 0 on a miss.
pub fn render_view(grid: &VoxelGrid, azimuth: f64, size: usize) -> ImageSample {
    let d = grid.resolution();
    let df = d as f64;
    let scale = df / size as f64;
    let c = df / 2.0;
    let theta = azimuth.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut pixels = vec![0.0; size * size];
    for row in 0..size {
        let y = ((row as f64 + 0.5) * scale).floor() as usize;
        if y >= d {
            continue;
        }
        for col in 0..size {
            let cx = (col as f64 + 0.5) * scale - c;
            for t in 0..d {
                let cz = (t as f64 + 0.5) - c;
                let gx = c + cx * cos + cz * sin;
                let gz = c - cx * sin + cz * cos;
                if gx < 0.0 || gz < 0.0 {
                    continue;
                }
                let (xi, zi) = (gx.floor() as usize, gz.floor() as usize);
                if xi >= d || zi >= d {
                    continue;
                }
                if grid.get(xi, y, zi) > 0.5 {
                    pixels[row * size + col] = 1.0 - (t as f64 + 0.5) / df;
                    break;
                }
            }
        }
    }
    ImageSample {
        pixels: Tensor::new(vec![size, size], pixels).expect("depth values are finite"),
        domain: Domain::Synth,
        azimuth,
        shape_id: None,
    }
}

/// View angles for one shape: golden-angle increments, each verified to
/// rasterize differently from every earlier view of that shape. The cuboid
/// shapes are often 90- or 180-degree symmetric, and on a coarse raster a
/// rotation near a symmetry reproduces an earlier render bit for bit, so a
/// colliding view walks forward until its render is new (bounded tries).
fn distinct_view_angles(grid: &VoxelGrid, views: usize, size: usize) -> Vec<f64> {
    let mut seen: Vec<Vec<u64>> = Vec::with_capacity(views);
    let mut angles = Vec::with_capacity(views);
    for view in 0..views {
        let base = (view as f64 * 137.50776405003785).rem_euclid(360.0);
        let mut angle = base;
        for attempt in 1..=8 {
            let render = render_view(grid, angle, size);
            let key: Vec<u64> = render.pixels.data().iter().map(|v| v.to_bits()).collect();
            if !seen.contains(&key) || attempt == 8 {
                seen.push(key);
                break;
            }
            angle = (base + 11.3 * attempt as f64).rem_euclid(360.0);
        }
        angles.push(angle);
    }
    angles
}

const EDGE_THRESHOLD: f64 = 0.08;

fn gradient_magnitude(pixels: &Tensor) -> Vec<f64> {
    let s = pixels.shape()[0];
    let p = pixels.data();
    let mut mag = vec![0.0; s * s];
    for row in 1..s - 1 {
        for col in 1..s - 1 {
            let gx = (p[row * s + col + 1] - p[row * s + col - 1]) / 2.0;
            let gy = (p[(row + 1) * s + col] - p[(row - 1) * s + col]) / 2.0;
            mag[row * s + col] = (gx * gx + gy * gy).sqrt();
        }
    }
    mag
}

/// Fraction of interior pixels whose central-difference gradient
/// magnitude clears the edge threshold.
pub fn edge_density(image: &ImageSample) -> f64 {
    let s = image.size();
    let mag = gradient_magnitude(&image.pixels);
    let interior = ((s - 2) * (s - 2)) as f64;
    mag.iter().filter(|m| **m > EDGE_THRESHOLD).count() as f64 / interior
}

/// Map a depth render into one of the two training domains. Synth leaves
/// the render untouched. Real turns it into a sketch: threshold the
/// gradient magnitude into an edge mask, dilate it once with a 3x3
/// window, draw each edge pixel at a jittered stroke intensity, then add
/// speckle noise on the strokes and clip to [0, 1].
pub fn stylize(image: &ImageSample, style: Domain, seed: u64) -> ImageSample {
    match style {
        Domain::Synth => ImageSample {
            domain: Domain::Synth,
            ..image.clone()
        },
        Domain::Real => {
            let s = image.size();
            let mag = gradient_magnitude(&image.pixels);
            let support: Vec<bool> = mag.iter().map(|m| *m > EDGE_THRESHOLD).collect();
            let mut rng = rng::derive_rng(seed, rng::stream::STYLIZE, 0);
            let mut pixels = vec![0.0; s * s];
            for (i, on) in support.iter().enumerate() {
                if *on {
                    let stroke = 0.55 + 0.35 * rng.gen::<f64>();
                    let speckle = 0.1 * (rng.gen::<f64>() - 0.5);
                    pixels[i] = (stroke + speckle).clamp(0.0, 1.0);
                }
            }
            ImageSample {
                pixels: Tensor::new(vec![s, s], pixels).expect("stroke values are finite"),
                domain: Domain::Real,
                azimuth: image.azimuth,
                shape_id: None,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub shape_count: usize,
    pub views: usize,
    pub train_fraction: f64,
    pub image_size: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            shape_count: 10,
            views: 24,
            train_fraction: 0.7,
            image_size: 16,
            resolution: 16,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.shape_count < 2 {
            return Err(DataError::InvalidConfig(format!(
                "need at least 2 shapes, got {}",
                self.shape_count
            )));
        }
        if self.views == 0 {
            return Err(DataError::InvalidConfig("views must be positive".into()));
        }
        if self.image_size < 4 || self.resolution < 8 {
            return Err(DataError::InvalidConfig(
                "image size must be at least 4 and resolution at least 8".into(),
            ));
        }
        let train = self.train_shapes();
        if train == 0 || train == self.shape_count {
            return Err(DataError::InvalidConfig(format!(
                "degenerate split: {} of {} shapes in train",
                train, self.shape_count
            )));
        }
        Ok(())
    }

    pub fn train_shapes(&self) -> usize {
        ((self.train_fraction * self.shape_count as f64).round() as usize)
            .clamp(0, self.shape_count)
    }
}

#[derive(Debug, Clone)]
pub struct VoxelItem {
    pub id: usize,
    pub recipe: ShapeRecipe,
    pub grid: VoxelGrid,
}

/// The generated corpus. Synth renders cover every shape and stay linked
/// to their grids; real-style images come only from held-out shapes and
/// enter the pool with the link stripped. `real_sources` retains the
/// origin of each real item for evaluation bookkeeping; the batch stream
/// never reads it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub shapes: Vec<VoxelItem>,
    pub synth: Vec<ImageSample>,
    pub real: Vec<ImageSample>,
    pub real_sources: Vec<usize>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Dataset, DataError> {
        config.validate()?;
        let categories = [
            ShapeCategory::Chair,
            ShapeCategory::Table,
            ShapeCategory::Box,
        ];
        let mut shapes = Vec::with_capacity(config.shape_count);
        for id in 0..config.shape_count {
            let mut rng = derive_rng(config.seed, rng::stream::DATASET, id as u64);
            let recipe = ShapeRecipe::sample(categories[id % categories.len()], &mut rng);
            let grid = generate_shape(&recipe, config.resolution)?;
            shapes.push(VoxelItem { id, recipe, grid });
        }

        let train = config.train_shapes();
        let train_ids: Vec<usize> = (0..train).collect();
        let test_ids: Vec<usize> = (train..config.shape_count).collect();

        let view_angles: Vec<Vec<f64>> = shapes
            .iter()
            .map(|item| distinct_view_angles(&item.grid, config.views, config.image_size))
            .collect();
        let mut synth = Vec::with_capacity(config.shape_count * config.views);
        for item in &shapes {
            for &angle in &view_angles[item.id] {
                let mut render = render_view(&item.grid, angle, config.image_size);
                render.shape_id = Some(item.id);
                synth.push(render);
            }
        }

        let mut real = Vec::with_capacity(test_ids.len() * config.views);
        let mut real_sources = Vec::with_capacity(real.capacity());
        for &id in &test_ids {
            for (view, &angle) in view_angles[id].iter().enumerate() {
                let render = render_view(&shapes[id].grid, angle, config.image_size);
                let styled = stylize(
                    &render,
                    Domain::Real,
                    rng::derive_seed(
                        config.seed,
                        rng::stream::STYLIZE,
                        (id * config.views + view) as u64,
                    ),
                );
                real.push(styled);
                real_sources.push(id);
            }
        }

        Ok(Dataset {
            config: config.clone(),
            shapes,
            synth,
            real,
            real_sources,
            train_ids,
            test_ids,
        })
    }

    pub fn grid_of(&self, shape_id: usize) -> &VoxelGrid {
        &self.shapes[shape_id].grid
    }

    /// Indices into `synth` whose shape belongs to the training split.
    pub fn synth_train_indices(&self) -> Vec<usize> {
        self.indices_for(&self.train_ids)
    }

    /// Indices into `synth` whose shape belongs to the held-out split.
    pub fn synth_test_indices(&self) -> Vec<usize> {
        self.indices_for(&self.test_ids)
    }

    fn indices_for(&self, ids: &[usize]) -> Vec<usize> {
        self.synth
            .iter()
            .enumerate()
            .filter(|(_, s)| ids.contains(&s.shape_id.expect("synth samples are paired")))
            .map(|(i, _)| i)
            .collect()
    }
}

/// One training batch. The real side is a bare image tensor: the type
/// carries no voxel link for it, so no join can be expressed.
#[derive(Debug)]
pub struct Batch {
    pub real: Tensor,
    pub synth: Tensor,
    pub voxels: Tensor,
}

/// Infinite shuffled sampler over a dataset. Real images and
/// (synth, voxel) pairs are drawn by independent rolls of the same
/// stream; a fixed seed reproduces the exact batch sequence. Each batch
/// is derived from (seed, position) alone, so a stream repositioned after
/// a checkpoint resume continues the original sequence.
pub struct BatchStream<'a> {
    data: &'a Dataset,
    synth_pool: Vec<usize>,
    batch_size: usize,
    seed: u64,
    position: u64,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::InvalidConfig("batch size must be positive".into()));
        }
        let synth_pool = data.synth_train_indices();
        if synth_pool.is_empty() || data.real.is_empty() {
            return Err(DataError::InvalidConfig(
                "dataset has an empty training pool".into(),
            ));
        }
        Ok(BatchStream {
            data,
            synth_pool,
            batch_size,
            seed,
            position: 0,
        })
    }

    pub fn seek(&mut self, position: u64) {
        self.position = position;
    }

    pub fn next_batch(&mut self) -> Result<Batch, DataError> {
        let mut rng: ChaCha8Rng = derive_rng(self.seed, rng::stream::BATCH, self.position);
        self.position += 1;
        let mut real_items = Vec::with_capacity(self.batch_size);
        let mut synth_items = Vec::with_capacity(self.batch_size);
        let mut grids = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let r = &self.data.real[rng.gen_range(0..self.data.real.len())];
            assert!(
                r.shape_id.is_none(),
                "real training samples must not carry a voxel link"
            );
            real_items.push(r);
            let s_idx = self.synth_pool[rng.gen_range(0..self.synth_pool.len())];
            let s = &self.data.synth[s_idx];
            synth_items.push(s);
            grids.push(self.data.grid_of(s.shape_id.expect("synth samples are paired")));
        }
        Ok(Batch {
            real: image_batch(&real_items)?,
            synth: image_batch(&synth_items)?,
            voxels: voxel_batch(&grids)?,
        })
    }
}
