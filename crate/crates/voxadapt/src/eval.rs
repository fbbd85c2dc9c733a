//! Evaluation and artifact export: voxel IoU (plain and alignment
//! tolerant), latent-space retrieval, the phi2 sweep experiment, and the
//! file dumps consumed by humans and the CLI.

use std::path::Path;

use thiserror::Error;

use crate::data::files::{write_manifest, write_pgm, write_voxel, ManifestRow};
use crate::data::{image_batch, DataError, Dataset, ImageSample, VoxelGrid};
use crate::loss::LossConfig;
use crate::nn::{decode2d, encode2d, generate3d, Mode, NetError, NetworkPlan};
use crate::tensor::params::ParameterSet;
use crate::tensor::{Tensor, TensorError};
use crate::train::{run_schedule, TrainConfig, TrainError, TrainState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Invalid(String),
    #[error("retrieval pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Default alignment search: shifts of up to two voxels per axis and
/// three discrete scales.
pub const DEFAULT_MAX_SHIFT: i64 = 2;
pub const DEFAULT_SCALES: [f64; 3] = [0.75, 1.0, 1.25];

#[derive(Debug, Clone)]
pub struct IoUItem {
    pub label: String,
    pub category: Option<String>,
    pub iou: f64,
}

/// Per-item IoU values with their arithmetic mean and the threshold that
/// produced them.
#[derive(Debug, Clone)]
pub struct IoUResult {
    pub items: Vec<IoUItem>,
    pub mean: f64,
    pub threshold: f64,
}

impl IoUResult {
    pub fn new(items: Vec<IoUItem>, threshold: f64) -> Self {
        let mean = if items.is_empty() {
            0.0
        } else {
            items.iter().map(|i| i.iou).sum::<f64>() / items.len() as f64
        };
        IoUResult {
            items,
            mean,
            threshold,
        }
    }

    /// Mean per category, in first-appearance order, for labeled items.
    pub fn category_means(&self) -> Vec<(String, f64)> {
        let mut order: Vec<String> = Vec::new();
        for item in &self.items {
            if let Some(c) = &item.category {
                if !order.contains(c) {
                    order.push(c.clone());
                }
            }
        }
        order
            .into_iter()
            .map(|c| {
                let vals: Vec<f64> = self
                    .items
                    .iter()
                    .filter(|i| i.category.as_deref() == Some(c.as_str()))
                    .map(|i| i.iou)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                (c, mean)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("item,iou\n");
        for item in &self.items {
            out.push_str(&format!("{},{}\n", item.label, item.iou));
        }
        out.push_str(&format!("mean,{}\n", self.mean));
        out
    }
}

fn check_iou_args(pred: &VoxelGrid, truth: &VoxelGrid, t: f64) -> Result<(), EvalError> {
    if pred.resolution() != truth.resolution() {
        return Err(EvalError::Invalid(format!(
            "resolution mismatch: prediction {} vs truth {}",
            pred.resolution(),
            truth.resolution()
        )));
    }
    if !truth.is_binary() {
        return Err(EvalError::Invalid("truth grid is not binary".into()));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(EvalError::Invalid(format!(
            "threshold {t} outside (0, 1)"
        )));
    }
    Ok(())
}

/// Intersection over union of the thresholded prediction against a binary
/// truth. Two empty sets count as a perfect match.
pub fn compute_iou(pred: &VoxelGrid, truth: &VoxelGrid, t: f64) -> Result<f64, EvalError> {
    check_iou_args(pred, truth, t)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, y) in pred.values().iter().zip(truth.values()) {
        let p_in = *p > t;
        let y_in = *y == 1.0;
        if p_in && y_in {
            inter += 1;
        }
        if p_in || y_in {
            union += 1;
        }
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Best IoU over a small grid of integer shifts and discrete scales
/// applied to the prediction, nearest-voxel resampling. The identity
/// transform is always in the grid, so the result never falls below
/// [`compute_iou`].
pub fn compute_iou_aligned(
    pred: &VoxelGrid,
    truth: &VoxelGrid,
    t: f64,
    max_shift: i64,
    scales: &[f64],
) -> Result<f64, EvalError> {
    check_iou_args(pred, truth, t)?;
    if max_shift < 0 {
        return Err(EvalError::Invalid(format!(
            "shift range {max_shift} is negative"
        )));
    }
    let d = pred.resolution();
    let c = d as f64 / 2.0;
    let mut best = compute_iou(pred, truth, t)?;
    for &s in scales {
        if !s.is_finite() || s <= 0.0 {
            return Err(EvalError::Invalid(format!("scale {s} must be positive")));
        }
        for dx in -max_shift..=max_shift {
            for dy in -max_shift..=max_shift {
                for dz in -max_shift..=max_shift {
                    if s == 1.0 && dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let mut moved = VoxelGrid::new(d);
                    for x in 0..d {
                        let sx = src_index(x, dx, c, s, d);
                        for y in 0..d {
                            let sy = src_index(y, dy, c, s, d);
                            for z in 0..d {
                                let sz = src_index(z, dz, c, s, d);
                                if let (Some(sx), Some(sy), Some(sz)) = (sx, sy, sz) {
                                    moved.set(x, y, z, pred.get(sx, sy, sz));
                                }
                            }
                        }
                    }
                    best = best.max(compute_iou(&moved, truth, t)?);
                }
            }
        }
    }
    Ok(best)
}

fn src_index(dst: usize, shift: i64, c: f64, scale: f64, d: usize) -> Option<usize> {
    let coord = (dst as f64 + 0.5 - shift as f64 - c) / scale + c;
    let idx = coord.floor();
    if idx < 0.0 || idx >= d as f64 {
        None
    } else {
        Some(idx as usize)
    }
}

/// Nearest pool items by latent distance, closest first, ties broken by
/// ascending pool index.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub query_id: usize,
    pub neighbors: Vec<(usize, f64)>,
}

/// Latent vectors of a sample list, one row per sample.
pub fn encode_samples(
    plan: &NetworkPlan,
    params: &mut ParameterSet,
    samples: &[&ImageSample],
) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let batch = image_batch(chunk)?;
        let latent = encode2d(plan, params, &batch, Mode::Infer)?;
        let width = latent.shape()[1];
        for row in latent.data().chunks(width) {
            rows.push(row.to_vec());
        }
    }
    Ok(rows)
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn retrieve_nearest(
    query_id: usize,
    query: &ImageSample,
    pool: &[ImageSample],
    plan: &NetworkPlan,
    params: &mut ParameterSet,
    k: usize,
) -> Result<RetrievalResult, EvalError> {
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let mut samples: Vec<&ImageSample> = vec![query];
    samples.extend(pool.iter());
    let latents = encode_samples(plan, params, &samples)?;
    let mut scored: Vec<(usize, f64)> = latents[1..]
        .iter()
        .enumerate()
        .map(|(i, lat)| (i, l2_distance(&latents[0], lat)))
        .collect();
    scored.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("latent distances are finite")
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k.min(pool.len()));
    Ok(RetrievalResult {
        query_id,
        neighbors: scored,
    })
}

/// Autoencode images through the 2D network in inference mode. Returns
/// the stacked inputs and outputs, both shaped [n, S, S, 1].
pub fn autoencode_images(
    plan: &NetworkPlan,
    params: &mut ParameterSet,
    samples: &[&ImageSample],
) -> Result<(Tensor, Tensor), EvalError> {
    let mut ins: Vec<f64> = Vec::new();
    let mut outs: Vec<f64> = Vec::new();
    let mut shape = Vec::new();
    for chunk in samples.chunks(32) {
        let batch = image_batch(chunk)?;
        let latent = encode2d(plan, params, &batch, Mode::Infer)?;
        let out = decode2d(plan, params, &latent, Mode::Infer)?;
        ins.extend_from_slice(batch.data());
        outs.extend_from_slice(out.data());
        shape = batch.shape().to_vec();
    }
    shape[0] = samples.len();
    Ok((
        Tensor::new(shape.clone(), ins)?,
        Tensor::new(shape, outs)?,
    ))
}

/// Reconstruct voxel grids from images: encode with the 2D network, decode
/// with the voxel generator.
pub fn reconstruct_voxels(
    g2_plan: &NetworkPlan,
    g2_params: &mut ParameterSet,
    g3_plan: &NetworkPlan,
    g3_params: &mut ParameterSet,
    samples: &[&ImageSample],
) -> Result<Vec<VoxelGrid>, EvalError> {
    let mut grids = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let batch = image_batch(chunk)?;
        let latent = encode2d(g2_plan, g2_params, &batch, Mode::Infer)?;
        let vox = generate3d(g3_plan, g3_params, &latent, Mode::Infer)?;
        let d = vox.shape()[1];
        for item in vox.data().chunks(d * d * d) {
            grids.push(VoxelGrid::from_values(d, item.to_vec())?);
        }
    }
    Ok(grids)
}

/// Mean aligned or plain IoU of voxel reconstructions from the real-style
/// pool against the source shapes the images were rendered from.
pub fn real_domain_iou(
    state: &mut TrainState,
    data: &Dataset,
    t: f64,
    aligned: bool,
) -> Result<IoUResult, EvalError> {
    let samples: Vec<&ImageSample> = data.real.iter().collect();
    if samples.is_empty() {
        return Err(EvalError::Invalid("dataset has no real-style images".into()));
    }
    let grids = reconstruct_voxels(
        &state.g2.plan,
        &mut state.g2.params,
        &state.g3.plan,
        &mut state.g3.params,
        &samples,
    )?;
    let mut items = Vec::with_capacity(grids.len());
    for (i, pred) in grids.iter().enumerate() {
        let src = data.real_sources[i];
        let truth = data.grid_of(src);
        let iou = if aligned {
            compute_iou_aligned(pred, truth, t, DEFAULT_MAX_SHIFT, &DEFAULT_SCALES)?
        } else {
            compute_iou(pred, truth, t)?
        };
        items.push(IoUItem {
            label: format!("real{i:04}"),
            category: Some(data.shapes[src].recipe.category.as_str().to_string()),
            iou,
        });
    }
    Ok(IoUResult::new(items, t))
}

/// Compare two directories of voxel text files by file name.
pub fn eval_dirs(
    pred_dir: &Path,
    truth_dir: &Path,
    t: f64,
    aligned: bool,
) -> Result<IoUResult, EvalError> {
    let mut names: Vec<String> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".txt"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(EvalError::Invalid(format!(
            "no voxel files (*.txt) in {}",
            pred_dir.display()
        )));
    }
    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let truth_path = truth_dir.join(&name);
        if !truth_path.exists() {
            return Err(EvalError::Invalid(format!(
                "prediction {name} has no matching truth file in {}",
                truth_dir.display()
            )));
        }
        let pred = crate::data::files::read_voxel(&pred_dir.join(&name))?;
        let truth = crate::data::files::read_voxel(&truth_path)?;
        let iou = if aligned {
            compute_iou_aligned(&pred, &truth, t, DEFAULT_MAX_SHIFT, &DEFAULT_SCALES)?
        } else {
            compute_iou(&pred, &truth, t)?
        };
        let label = name.trim_end_matches(".txt").to_string();
        items.push(IoUItem {
            label,
            category: None,
            iou,
        });
    }
    Ok(IoUResult::new(items, t))
}

/// One item to export: an input image, optionally with its true grid.
pub struct ExportItem<'a> {
    pub id: usize,
    pub image: &'a ImageSample,
    pub truth: Option<&'a VoxelGrid>,
}

/// Write per-item artifacts: the input image, the 2D reconstruction, the
/// predicted voxel grid, and the truth grid when present, plus a manifest.
/// Files follow "item{id}_{kind}.{ext}".
pub fn export_outputs(
    state: &mut TrainState,
    items: &[ExportItem],
    out_dir: &Path,
) -> Result<Vec<ManifestRow>, EvalError> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    if !items.is_empty() {
        let samples: Vec<&ImageSample> = items.iter().map(|i| i.image).collect();
        let (_, recons) = autoencode_images(&state.g2.plan, &mut state.g2.params, &samples)?;
        let grids = reconstruct_voxels(
            &state.g2.plan,
            &mut state.g2.params,
            &state.g3.plan,
            &mut state.g3.params,
            &samples,
        )?;
        let s = items[0].image.size();
        for (i, item) in items.iter().enumerate() {
            let input_name = format!("item{}_input.pgm", item.id);
            write_pgm(&out_dir.join(&input_name), &item.image.pixels)?;
            rows.push(ManifestRow {
                id: item.id,
                kind: "input".into(),
                path: input_name,
                azimuth: Some(item.image.azimuth),
                pair_id: Some(item.id),
            });

            let recon_name = format!("item{}_recon.pgm", item.id);
            let recon_pixels =
                Tensor::new(vec![s, s], recons.data()[i * s * s..(i + 1) * s * s].to_vec())?;
            write_pgm(&out_dir.join(&recon_name), &recon_pixels)?;
            rows.push(ManifestRow {
                id: item.id,
                kind: "recon".into(),
                path: recon_name,
                azimuth: Some(item.image.azimuth),
                pair_id: Some(item.id),
            });

            let pred_name = format!("item{}_pred.txt", item.id);
            write_voxel(&out_dir.join(&pred_name), &grids[i])?;
            rows.push(ManifestRow {
                id: item.id,
                kind: "pred".into(),
                path: pred_name,
                azimuth: None,
                pair_id: Some(item.id),
            });

            if let Some(truth) = item.truth {
                let truth_name = format!("item{}_truth.txt", item.id);
                write_voxel(&out_dir.join(&truth_name), truth)?;
                rows.push(ManifestRow {
                    id: item.id,
                    kind: "truth".into(),
                    path: truth_name,
                    azimuth: None,
                    pair_id: Some(item.id),
                });
            }
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub phi2: f64,
    pub real_rec_l1: f64,
    pub domain_confusion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phi2,real_rec_l1,domain_confusion\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                r.phi2, r.real_rec_l1, r.domain_confusion
            ));
        }
        out
    }
}

fn mean_image(batch: &Tensor) -> Tensor {
    let n = batch.shape()[0];
    let s = batch.shape()[1];
    let mut acc = vec![0.0; s * s];
    for item in batch.data().chunks(s * s) {
        for (a, v) in acc.iter_mut().zip(item) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    Tensor::new(vec![s, s], acc).expect("means of finite pixels are finite")
}

fn panel_image(rows: &[Vec<Tensor>]) -> Result<Tensor, EvalError> {
    let s = rows[0][0].shape()[0];
    let cols = rows[0].len();
    let mut data = vec![0.0; rows.len() * s * cols * s];
    let width = cols * s;
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for y in 0..s {
                for x in 0..s {
                    data[(r * s + y) * width + c * s + x] = img.data()[y * s + x];
                }
            }
        }
    }
    Ok(Tensor::new(vec![rows.len() * s, width], data)?)
}

fn slice_images(batch: &Tensor, count: usize) -> Vec<Tensor> {
    let s = batch.shape()[1];
    batch
        .data()
        .chunks(s * s)
        .take(count)
        .map(|c| Tensor::new(vec![s, s], c.to_vec()).expect("pixels are finite"))
        .collect()
}

/// Train the 2D stage once per phi2 value from identical seeds and report
/// the real-domain reconstruction L1 and a domain-confusion statistic:
/// the mean absolute difference between the average reconstruction each
/// domain produces. Low confusion means the two domains come out looking
/// alike. Optionally exports a panel of sample reconstructions per value.
pub fn phi2_sweep(
    values: &[f64],
    base: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<SweepReport, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Invalid("phi2 sweep needs at least one value".into()));
    }
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::Invalid(format!("phi2 value {v} outside [0, 1]")));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(values.len());
    for &phi2 in values {
        let config = TrainConfig {
            loss: LossConfig {
                phi2,
                phi3: base.loss.phi3,
            },
            steps: [base.steps[0], 0, 0],
            ..base.clone()
        };
        let mut state = run_schedule(&config, data, None)?;

        let real: Vec<&ImageSample> = data.real.iter().collect();
        let (real_in, real_out) =
            autoencode_images(&state.g2.plan, &mut state.g2.params, &real)?;
        let real_rec_l1 = real_out.mean_abs_diff(&real_in)?;

        let synth_idx = data.synth_train_indices();
        let synth: Vec<&ImageSample> = synth_idx.iter().map(|&i| &data.synth[i]).collect();
        let (_, synth_out) = autoencode_images(&state.g2.plan, &mut state.g2.params, &synth)?;
        let domain_confusion = mean_image(&real_out).mean_abs_diff(&mean_image(&synth_out))?;

        if let Some(dir) = out_dir {
            let n = 4.min(real.len()).min(synth.len());
            let synth_in = image_batch(&synth[..n])?;
            let panel = panel_image(&[
                slice_images(&real_in, n),
                slice_images(&real_out, n),
                slice_images(&synth_in, n),
                slice_images(&synth_out, n),
            ])?;
            write_pgm(&dir.join(format!("panel_phi2_{phi2}.pgm")), &panel)?;
        }
        rows.push(SweepRow {
            phi2,
            real_rec_l1,
            domain_confusion,
        });
    }
    let report = SweepReport { rows };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("sweep.csv"), report.to_csv())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::files::read_voxel;
    use crate::data::{generate_shape, render_view, DatasetConfig, Domain, ShapeRecipe};
    use crate::rng::derive_rng;
    use rand::Rng;

    fn boxed(lo: usize, hi: usize, d: usize) -> VoxelGrid {
        let mut g = VoxelGrid::new(d);
        for x in lo..hi {
            for y in lo..hi {
                for z in lo..hi {
                    g.set(x, y, z, 1.0);
                }
            }
        }
        g
    }

    #[test]
    fn iou_identity_disjoint_and_thirds() {
        let truth = boxed(4, 12, 16);
        assert_eq!(compute_iou(&truth, &truth, 0.3).unwrap(), 1.0);

        let mut a = VoxelGrid::new(8);
        a.set(0, 0, 0, 1.0);
        let mut b = VoxelGrid::new(8);
        b.set(7, 7, 7, 1.0);
        assert_eq!(compute_iou(&a, &b, 0.3).unwrap(), 0.0);

        let mut pred = VoxelGrid::new(8);
        pred.set(1, 1, 1, 0.9);
        pred.set(2, 2, 2, 0.8);
        let mut truth2 = VoxelGrid::new(8);
        truth2.set(2, 2, 2, 1.0);
        truth2.set(3, 3, 3, 1.0);
        let iou = compute_iou(&pred, &truth2, 0.3).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_of_empty_grids_is_one() {
        let empty = VoxelGrid::new(8);
        assert_eq!(compute_iou(&empty, &empty, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn iou_ignores_subthreshold_noise() {
        let truth = boxed(2, 6, 8);
        let mut pred = VoxelGrid::new(8);
        for x in 2..6 {
            for y in 2..6 {
                for z in 2..6 {
                    pred.set(x, y, z, 0.8);
                }
            }
        }
        let base = compute_iou(&pred, &truth, 0.3).unwrap();
        pred.set(0, 0, 0, 0.29);
        pred.set(7, 7, 7, 0.05);
        assert_eq!(compute_iou(&pred, &truth, 0.3).unwrap(), base);
        assert_eq!(base, 1.0);
    }

    #[test]
    fn iou_argument_errors() {
        let a = VoxelGrid::new(8);
        let b = VoxelGrid::new(16);
        assert!(compute_iou(&a, &b, 0.3).is_err());
        assert!(compute_iou(&a, &a, 0.0).is_err());
        assert!(compute_iou(&a, &a, 1.0).is_err());
        let mut soft = VoxelGrid::new(8);
        soft.set(0, 0, 0, 0.5);
        assert!(compute_iou(&a, &soft, 0.3).is_err());
    }

    #[test]
    fn iou_matches_brute_force_on_random_grids() {
        let mut rng = derive_rng(77, 0, 0);
        for _ in 0..50 {
            let mut pred = VoxelGrid::new(4);
            let mut truth = VoxelGrid::new(4);
            for x in 0..4 {
                for y in 0..4 {
                    for z in 0..4 {
                        pred.set(x, y, z, rng.gen::<f64>());
                        truth.set(x, y, z, if rng.gen::<bool>() { 1.0 } else { 0.0 });
                    }
                }
            }
            let mut inter = 0.0;
            let mut union = 0.0;
            for x in 0..4 {
                for y in 0..4 {
                    for z in 0..4 {
                        let p = pred.get(x, y, z) > 0.3;
                        let t = truth.get(x, y, z) == 1.0;
                        if p && t {
                            inter += 1.0;
                        }
                        if p || t {
                            union += 1.0;
                        }
                    }
                }
            }
            let expect = if union == 0.0 { 1.0 } else { inter / union };
            assert_eq!(compute_iou(&pred, &truth, 0.3).unwrap(), expect);
        }
    }

    #[test]
    fn aligned_iou_recovers_shifts_and_scales() {
        let truth = boxed(4, 12, 16);
        assert_eq!(
            compute_iou_aligned(&truth, &truth, 0.3, 2, &DEFAULT_SCALES).unwrap(),
            1.0
        );

        let mut shifted = VoxelGrid::new(16);
        for x in 5..13 {
            for y in 4..12 {
                for z in 4..12 {
                    shifted.set(x, y, z, 1.0);
                }
            }
        }
        let plain = compute_iou(&shifted, &truth, 0.3).unwrap();
        let aligned = compute_iou_aligned(&shifted, &truth, 0.3, 2, &[1.0]).unwrap();
        assert!(plain < 1.0);
        assert_eq!(aligned, 1.0);

        let small = boxed(5, 11, 16);
        let scaled = compute_iou_aligned(&truth, &small, 0.3, 0, &[0.75]).unwrap();
        assert_eq!(scaled, 1.0);
    }

    #[test]
    fn aligned_iou_never_beats_by_less_than_plain() {
        let mut rng = derive_rng(78, 0, 0);
        for _ in 0..10 {
            let mut pred = VoxelGrid::new(8);
            let mut truth = VoxelGrid::new(8);
            for x in 0..8 {
                for y in 0..8 {
                    for z in 0..8 {
                        pred.set(x, y, z, rng.gen::<f64>());
                        truth.set(x, y, z, if rng.gen::<f64>() > 0.7 { 1.0 } else { 0.0 });
                    }
                }
            }
            let plain = compute_iou(&pred, &truth, 0.3).unwrap();
            let aligned =
                compute_iou_aligned(&pred, &truth, 0.3, 1, &DEFAULT_SCALES).unwrap();
            assert!(aligned >= plain);
        }
    }

    #[test]
    fn result_mean_and_category_means() {
        let items = vec![
            IoUItem {
                label: "a".into(),
                category: Some("chair".into()),
                iou: 0.2,
            },
            IoUItem {
                label: "b".into(),
                category: Some("box".into()),
                iou: 0.6,
            },
            IoUItem {
                label: "c".into(),
                category: Some("chair".into()),
                iou: 0.4,
            },
        ];
        let result = IoUResult::new(items, 0.3);
        assert!((result.mean - 0.4).abs() < 1e-15);
        let cats = result.category_means();
        assert_eq!(cats.len(), 2);
        assert_eq!(cats[0].0, "chair");
        assert!((cats[0].1 - 0.3).abs() < 1e-15);
        assert_eq!(cats[1].0, "box");
        let csv = result.to_csv();
        assert!(csv.starts_with("item,iou\n"));
        assert!(csv.ends_with(&format!("mean,{}\n", result.mean)));
    }

    fn tiny_dataset() -> Dataset {
        Dataset::generate(&DatasetConfig {
            shape_count: 4,
            views: 3,
            train_fraction: 0.7,
            image_size: 16,
            resolution: 16,
            seed: 21,
        })
        .unwrap()
    }

    fn fresh_state() -> TrainState {
        TrainState::new(&TrainConfig {
            batch_size: 2,
            steps: [0, 0, 0],
            seed: 3,
            ..TrainConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn self_retrieval_ranks_first_at_zero_distance() {
        let data = tiny_dataset();
        let mut state = fresh_state();
        let pool: Vec<ImageSample> = data.synth[..6].to_vec();
        let result = retrieve_nearest(
            3,
            &pool[3].clone(),
            &pool,
            &state.g2.plan,
            &mut state.g2.params,
            5,
        )
        .unwrap();
        assert_eq!(result.query_id, 3);
        assert_eq!(result.neighbors[0].0, 3);
        assert!(result.neighbors[0].1 < 1e-9);
        assert_eq!(result.neighbors.len(), 5);
        for pair in result.neighbors.windows(2) {
            assert!(pair[0].1 <= pair[1].1);
            assert!(pair[0].1 >= 0.0);
        }
    }

    #[test]
    fn oversized_k_returns_the_full_ranking_and_ties_break_by_id() {
        let data = tiny_dataset();
        let mut state = fresh_state();
        let dup = data.synth[0].clone();
        let pool = vec![dup.clone(), data.synth[1].clone(), dup.clone()];
        let result = retrieve_nearest(
            0,
            &dup,
            &pool,
            &state.g2.plan,
            &mut state.g2.params,
            99,
        )
        .unwrap();
        assert_eq!(result.neighbors.len(), 3);
        assert_eq!(result.neighbors[0].0, 0);
        assert_eq!(result.neighbors[1].0, 2, "equal distances order by id");
        assert!(retrieve_nearest(
            0,
            &dup,
            &[],
            &state.g2.plan,
            &mut state.g2.params,
            1
        )
        .is_err());
    }

    #[test]
    fn distances_match_external_recomputation() {
        let data = tiny_dataset();
        let mut state = fresh_state();
        let pool: Vec<ImageSample> = data.synth[..4].to_vec();
        let query = data.real[0].clone();
        let result = retrieve_nearest(
            0,
            &query,
            &pool,
            &state.g2.plan,
            &mut state.g2.params,
            4,
        )
        .unwrap();
        let mut samples: Vec<&ImageSample> = vec![&query];
        samples.extend(pool.iter());
        let lats = encode_samples(&state.g2.plan, &mut state.g2.params, &samples).unwrap();
        for (id, dist) in &result.neighbors {
            let direct: f64 = lats[0]
                .iter()
                .zip(&lats[id + 1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert_eq!(*dist, direct);
        }
    }

    #[test]
    fn export_writes_round_trippable_artifacts() {
        let data = tiny_dataset();
        let mut state = fresh_state();
        let dir = tempfile::tempdir().unwrap();

        let rows = export_outputs(&mut state, &[], dir.path()).unwrap();
        assert!(rows.is_empty());
        let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest.lines().count(), 1);

        let items = vec![
            ExportItem {
                id: 0,
                image: &data.real[0],
                truth: Some(data.grid_of(data.real_sources[0])),
            },
            ExportItem {
                id: 1,
                image: &data.real[1],
                truth: None,
            },
        ];
        let rows = export_outputs(&mut state, &items, dir.path()).unwrap();
        assert_eq!(rows.len(), 4 + 3);
        let pred = read_voxel(&dir.path().join("item0_pred.txt")).unwrap();
        let truth = read_voxel(&dir.path().join("item0_truth.txt")).unwrap();
        assert_eq!(&truth, data.grid_of(data.real_sources[0]));

        let samples = vec![&data.real[0]];
        let in_memory = reconstruct_voxels(
            &state.g2.plan,
            &mut state.g2.params,
            &state.g3.plan,
            &mut state.g3.params,
            &samples,
        )
        .unwrap();
        assert_eq!(pred, in_memory[0]);
        assert_eq!(
            compute_iou(&pred, &truth, 0.3).unwrap(),
            compute_iou(&in_memory[0], &truth, 0.3).unwrap()
        );
    }

    #[test]
    fn eval_dirs_compares_matching_files() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let grid = boxed(4, 12, 16);
        let other = boxed(5, 13, 16);
        crate::data::files::write_voxel(&dir_a.path().join("s0.txt"), &grid).unwrap();
        crate::data::files::write_voxel(&dir_b.path().join("s0.txt"), &grid).unwrap();
        crate::data::files::write_voxel(&dir_a.path().join("s1.txt"), &other).unwrap();
        crate::data::files::write_voxel(&dir_b.path().join("s1.txt"), &grid).unwrap();
        let result = eval_dirs(dir_a.path(), dir_b.path(), 0.3, false).unwrap();
        assert_eq!(result.items.len(), 2);
        assert_eq!(result.items[0].label, "s0");
        assert_eq!(result.items[0].iou, 1.0);
        assert!(result.items[1].iou < 1.0);

        crate::data::files::write_voxel(&dir_a.path().join("s2.txt"), &grid).unwrap();
        assert!(eval_dirs(dir_a.path(), dir_b.path(), 0.3, false).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(eval_dirs(empty.path(), dir_b.path(), 0.3, false).is_err());
    }

    #[test]
    fn real_domain_iou_covers_the_real_pool() {
        let data = tiny_dataset();
        let mut state = fresh_state();
        let result = real_domain_iou(&mut state, &data, 0.3, false).unwrap();
        assert_eq!(result.items.len(), data.real.len());
        assert!(result.items.iter().all(|i| (0.0..=1.0).contains(&i.iou)));
        assert!(result.items.iter().all(|i| i.category.is_some()));
        let aligned = real_domain_iou(&mut state, &data, 0.3, true).unwrap();
        assert!(aligned.mean >= result.mean);
    }

    #[test]
    fn sweep_reports_one_row_per_value_and_reruns_identically() {
        let data = tiny_dataset();
        let base = TrainConfig {
            batch_size: 2,
            steps: [2, 0, 0],
            seed: 9,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = phi2_sweep(&[0.5], &base, &data, Some(dir.path())).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].phi2, 0.5);
        assert!(report.rows[0].real_rec_l1.is_finite());
        assert!(dir.path().join("panel_phi2_0.5.pgm").exists());
        assert!(dir.path().join("sweep.csv").exists());

        let again = phi2_sweep(&[0.5], &base, &data, None).unwrap();
        assert_eq!(report, again);

        assert!(phi2_sweep(&[], &base, &data, None).is_err());
        assert!(phi2_sweep(&[1.5], &base, &data, None).is_err());
    }

    #[test]
    fn stylized_render_pipeline_feeds_evaluation() {
        let recipe = ShapeRecipe::solid_box(0.5);
        let grid = generate_shape(&recipe, 16).unwrap();
        let render = render_view(&grid, 30.0, 16);
        let sketch = crate::data::stylize(&render, Domain::Real, 5);
        let mut state = fresh_state();
        let grids = reconstruct_voxels(
            &state.g2.plan,
            &mut state.g2.params,
            &state.g3.plan,
            &mut state.g3.params,
            &[&sketch],
        )
        .unwrap();
        assert_eq!(grids.len(), 1);
        assert_eq!(grids[0].resolution(), 16);
        let iou = compute_iou(&grids[0], &grid, 0.3).unwrap();
        assert!((0.0..=1.0).contains(&iou));
    }
}
