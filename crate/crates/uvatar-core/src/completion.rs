//! Deterministic map completion and editing: the pluggable stand-ins for the
//! learned inpainting stages. Textures complete by symmetry copy plus
//! harmonic (Laplace) fill, segmentations by symmetry plus seam-aware
//! nearest-label propagation, displacements by a per-label prior fit from
//! example pairs.

use nalgebra::Vector3;
use thiserror::Error;

use crate::body_model::DEFAULT_OFFSET_CAP;
use crate::uv_atlas::{
    ColorImage, DisplacementMap, SegmentationMap, TexelTable, TextureMap, LABEL_SKIN,
};

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("map has zero valid texels")]
    NoValidTexels,
    #[error("map resolution {map} does not match table resolution {table}")]
    ResolutionMismatch { map: usize, table: usize },
    #[error("label {label} outside the palette of {palette} entries")]
    UnknownLabel { label: u8, palette: usize },
    #[error("label {label} is not a garment")]
    NotAGarment { label: u8 },
    #[error("label {label} has no limb mapping for length edits")]
    NoLimbForLabel { label: u8 },
    #[error("swatch image is empty")]
    EmptySwatch,
    #[error("maps disagree on resolution/atlas: {reason}")]
    AtlasMismatch { reason: String },
    #[error("input map must be complete (all texels valid)")]
    IncompleteInput,
    #[error("no training pairs supplied")]
    NoTrainingPairs,
    #[error("diffusion failed to converge")]
    DiffusionDiverged,
}

/// The completion contract: partial map + validity mask (+ condition) to a
/// complete map. Implementations may be deterministic baselines (this crate)
/// or learned models; the baselines preserve valid input texels exactly.
pub trait CompletionModel {
    fn complete_texture(&self, partial: &TextureMap, table: &TexelTable) -> Result<TextureMap, CompletionError>;
    fn complete_segmentation(
        &self,
        partial: &SegmentationMap,
        table: &TexelTable,
    ) -> Result<SegmentationMap, CompletionError>;
    /// Displacement prediction conditioned on a complete segmentation.
    fn predict_displacement(
        &self,
        seg: &SegmentationMap,
        table: &TexelTable,
    ) -> Result<DisplacementMap, CompletionError>;
}

/// Baseline completion: symmetry + diffusion for texture, symmetry + nearest
/// label for segmentation, per-label prior for displacement (zero field when
/// no prior is loaded).
#[derive(Debug, Clone, Default)]
pub struct BaselineCompletion {
    pub displacement_prior: Option<DisplacementPrior>,
}

impl CompletionModel for BaselineCompletion {
    fn complete_texture(&self, partial: &TextureMap, table: &TexelTable) -> Result<TextureMap, CompletionError> {
        complete_texture(partial, table)
    }

    fn complete_segmentation(
        &self,
        partial: &SegmentationMap,
        table: &TexelTable,
    ) -> Result<SegmentationMap, CompletionError> {
        complete_segmentation(partial, table)
    }

    fn predict_displacement(
        &self,
        seg: &SegmentationMap,
        _table: &TexelTable,
    ) -> Result<DisplacementMap, CompletionError> {
        match &self.displacement_prior {
            Some(prior) => Ok(predict_displacement(seg, prior)?.map),
            None => {
                let mut map = DisplacementMap::new(seg.resolution, DEFAULT_OFFSET_CAP)
                    .expect("positive cap");
                for v in &mut map.valid {
                    *v = true;
                }
                Ok(map)
            }
        }
    }
}

fn check_resolution(map_resolution: usize, table: &TexelTable) -> Result<(), CompletionError> {
    if map_resolution != table.resolution() {
        return Err(CompletionError::ResolutionMismatch {
            map: map_resolution,
            table: table.resolution(),
        });
    }
    Ok(())
}

/// Copy every invalid texel from its valid mirror texel. Valid texels are
/// never touched; texels whose mirror is also invalid stay invalid.
pub fn mirror_fill(partial: &TextureMap, table: &TexelTable) -> Result<TextureMap, CompletionError> {
    check_resolution(partial.resolution, table)?;
    let mut out = partial.clone();
    for t in 0..out.pixels.len() {
        if out.valid[t] {
            continue;
        }
        if let Some(m) = table.symmetric(t) {
            if partial.valid[m] {
                out.pixels[t] = partial.pixels[m];
                out.valid[t] = true;
            }
        }
    }
    Ok(out)
}

/// Mirror fill on label maps.
pub fn mirror_fill_segmentation(
    partial: &SegmentationMap,
    table: &TexelTable,
) -> Result<SegmentationMap, CompletionError> {
    check_resolution(partial.resolution, table)?;
    let mut out = partial.clone();
    for t in 0..out.labels.len() {
        if out.valid[t] {
            continue;
        }
        if let Some(m) = table.symmetric(t) {
            if partial.valid[m] {
                out.labels[t] = partial.labels[m];
                out.valid[t] = true;
            }
        }
    }
    Ok(out)
}

/// Solve the discrete Laplace equation on the invalid texels of a full
/// grid: valid texels are Dirichlet boundary, invalid texels take the mean
/// of their 4-neighbors. Conjugate gradients on the grid Laplacian;
/// `values` is updated in place at the invalid positions.
pub fn solve_laplace(
    width: usize,
    height: usize,
    valid: &[bool],
    values: &mut [f64],
    tolerance: f64,
) -> Result<(), CompletionError> {
    let n = width * height;
    assert_eq!(valid.len(), n);
    assert_eq!(values.len(), n);
    if !valid.iter().any(|v| *v) {
        return Err(CompletionError::NoValidTexels);
    }

    // Unknown ordering.
    let mut index = vec![usize::MAX; n];
    let mut unknowns = Vec::new();
    for t in 0..n {
        if !valid[t] {
            index[t] = unknowns.len();
            unknowns.push(t);
        }
    }
    if unknowns.is_empty() {
        return Ok(());
    }

    let neighbors = |t: usize| {
        let (x, y) = (t % width, t / width);
        let mut out = [usize::MAX; 4];
        let mut k = 0;
        if x > 0 {
            out[k] = t - 1;
            k += 1;
        }
        if x + 1 < width {
            out[k] = t + 1;
            k += 1;
        }
        if y > 0 {
            out[k] = t - width;
            k += 1;
        }
        if y + 1 < height {
            out[k] = t + width;
            k += 1;
        }
        (out, k)
    };

    // rhs_i = sum of valid-neighbor values; A = deg I - adjacency over
    // unknowns. Positive definite because the grid is connected and at
    // least one texel is Dirichlet.
    let m = unknowns.len();
    let mut rhs = vec![0.0; m];
    let mut degree = vec![0.0; m];
    for (i, &t) in unknowns.iter().enumerate() {
        let (nbrs, k) = neighbors(t);
        degree[i] = k as f64;
        for &nb in nbrs.iter().take(k) {
            if valid[nb] {
                rhs[i] += values[nb];
            }
        }
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        for (i, &t) in unknowns.iter().enumerate() {
            let (nbrs, k) = neighbors(t);
            let mut acc = degree[i] * x[i];
            for &nb in nbrs.iter().take(k) {
                if !valid[nb] {
                    acc -= x[index[nb]];
                }
            }
            out[i] = acc;
        }
    };

    let mut x = vec![0.0; m];
    for (i, &t) in unknowns.iter().enumerate() {
        x[i] = values[t]; // warm start from whatever the caller left there
    }
    let mut ax = vec![0.0; m];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = (0..m).map(|i| rhs[i] - ax[i]).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let mut ap = vec![0.0; m];
    let max_iters = 20 * (width + height).max(64);
    for _ in 0..max_iters {
        if r.iter().fold(0.0f64, |a, v| a.max(v.abs())) < tolerance {
            break;
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(CompletionError::DiffusionDiverged);
        }
        let alpha = rr / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..m {
            p[i] = r[i] + beta * p[i];
        }
    }
    if r.iter().fold(0.0f64, |a, v| a.max(v.abs())) > tolerance * 10.0 {
        return Err(CompletionError::DiffusionDiverged);
    }
    for (i, &t) in unknowns.iter().enumerate() {
        values[t] = x[i];
    }
    Ok(())
}

/// Harmonic fill of all invalid texels per channel. Output is all-valid;
/// valid input texels are untouched.
pub fn diffuse_fill(partial: &TextureMap) -> Result<TextureMap, CompletionError> {
    if !partial.valid.iter().any(|v| *v) {
        return Err(CompletionError::NoValidTexels);
    }
    let r = partial.resolution;
    let mut out = partial.clone();
    if partial.all_valid() {
        return Ok(out);
    }
    // Mean boundary color as warm start.
    let mut mean = [0.0f64; 3];
    let mut count = 0usize;
    for t in 0..partial.pixels.len() {
        if partial.valid[t] {
            for c in 0..3 {
                mean[c] += partial.pixels[t][c] as f64;
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    for c in 0..3 {
        let mut plane: Vec<f64> = partial
            .pixels
            .iter()
            .zip(&partial.valid)
            .map(|(p, &v)| if v { p[c] as f64 } else { mean[c] })
            .collect();
        solve_laplace(r, r, &partial.valid, &mut plane, 1e-6)?;
        for t in 0..plane.len() {
            if !partial.valid[t] {
                out.pixels[t][c] = plane[t].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    for v in &mut out.valid {
        *v = true;
    }
    Ok(out)
}

/// Texture completion baseline: symmetry copy, then harmonic fill.
/// Deterministic and idempotent; input texels pass through exactly.
pub fn complete_texture(partial: &TextureMap, table: &TexelTable) -> Result<TextureMap, CompletionError> {
    let mirrored = mirror_fill(partial, table)?;
    diffuse_fill(&mirrored)
}

/// Full-grid adjacency including seam links.
fn grid_adjacency(r: usize, table: &TexelTable) -> Vec<Vec<usize>> {
    let mut extra: Vec<Vec<usize>> = vec![Vec::new(); r * r];
    for &(a, b) in table.seam_links() {
        extra[a].push(b);
        extra[b].push(a);
    }
    extra
}

/// Segmentation completion baseline: symmetry copy, then every remaining
/// invalid texel takes the label of its nearest valid texel under the
/// seam-aware adjacency; distance ties resolve to the lowest label.
pub fn complete_segmentation(
    partial: &SegmentationMap,
    table: &TexelTable,
) -> Result<SegmentationMap, CompletionError> {
    if !partial.valid.iter().any(|v| *v) {
        return Err(CompletionError::NoValidTexels);
    }
    let mut out = mirror_fill_segmentation(partial, table)?;
    let r = out.resolution;
    let extra = grid_adjacency(r, table);

    // Synchronous BFS waves: a texel reached at distance d takes the lowest
    // label among its distance d-1 neighbors, which is exactly the
    // lexicographic (distance, label) minimum over seed paths.
    let mut dist = vec![usize::MAX; r * r];
    let mut frontier: Vec<usize> = Vec::new();
    for t in 0..r * r {
        if out.valid[t] {
            dist[t] = 0;
            frontier.push(t);
        }
    }
    let mut d = 0usize;
    while !frontier.is_empty() {
        d += 1;
        let mut next: Vec<usize> = Vec::new();
        let mut push = |t: usize, next: &mut Vec<usize>, dist: &mut [usize]| {
            if dist[t] == usize::MAX {
                dist[t] = d;
                next.push(t);
            }
        };
        for &t in &frontier {
            let (x, y) = (t % r, t / r);
            if x > 0 {
                push(t - 1, &mut next, &mut dist);
            }
            if x + 1 < r {
                push(t + 1, &mut next, &mut dist);
            }
            if y > 0 {
                push(t - r, &mut next, &mut dist);
            }
            if y + 1 < r {
                push(t + r, &mut next, &mut dist);
            }
            for &n in &extra[t] {
                push(n, &mut next, &mut dist);
            }
        }
        // Assign labels for this wave from the previous wave.
        for &t in &next {
            let (x, y) = (t % r, t / r);
            let mut best: Option<u8> = None;
            let mut consider = |n: usize, best: &mut Option<u8>| {
                if dist[t] > 0 && dist[n] == dist[t] - 1 {
                    let l = out.labels[n];
                    *best = Some(match best {
                        None => l,
                        Some(b) => l.min(*b),
                    });
                }
            };
            if x > 0 {
                consider(t - 1, &mut best);
            }
            if x + 1 < r {
                consider(t + 1, &mut best);
            }
            if y > 0 {
                consider(t - r, &mut best);
            }
            if y + 1 < r {
                consider(t + r, &mut best);
            }
            for &n in &extra[t] {
                consider(n, &mut best);
            }
            out.labels[t] = best.expect("wave texel must have a predecessor");
            out.valid[t] = true;
        }
        frontier = next;
    }
    Ok(out)
}

/// Per-label mean displacement prior fit from (segmentation, displacement)
/// pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementPrior {
    pub resolution: usize,
    pub label_count: usize,
    /// label-major, then texel: mean offset where seen, zero otherwise.
    pub mean: Vec<Vector3<f64>>,
    pub seen: Vec<bool>,
}

impl DisplacementPrior {
    pub fn lookup(&self, label: u8, texel: usize) -> Option<Vector3<f64>> {
        if label as usize >= self.label_count {
            return None;
        }
        let i = label as usize * self.resolution * self.resolution + texel;
        if self.seen[i] {
            Some(self.mean[i])
        } else {
            None
        }
    }

    /// True when the label contributed at least one observation anywhere.
    pub fn knows_label(&self, label: u8) -> bool {
        if label as usize >= self.label_count {
            return false;
        }
        let t = self.resolution * self.resolution;
        self.seen[label as usize * t..(label as usize + 1) * t]
            .iter()
            .any(|s| *s)
    }
}

/// Fit the per-label mean displacement at every texel.
pub fn fit_displacement_prior(
    pairs: &[(SegmentationMap, DisplacementMap)],
) -> Result<DisplacementPrior, CompletionError> {
    let Some((first_seg, _)) = pairs.first() else {
        return Err(CompletionError::NoTrainingPairs);
    };
    let resolution = first_seg.resolution;
    let label_count = first_seg.palette.len();
    let texels = resolution * resolution;
    let mut sum = vec![Vector3::zeros(); label_count * texels];
    let mut count = vec![0u32; label_count * texels];
    for (seg, disp) in pairs {
        if seg.resolution != resolution || disp.resolution != resolution {
            return Err(CompletionError::AtlasMismatch {
                reason: format!(
                    "pair resolutions {}x{} vs expected {resolution}",
                    seg.resolution, disp.resolution
                ),
            });
        }
        for t in 0..texels {
            if seg.valid[t] && disp.valid[t] {
                let l = seg.labels[t] as usize;
                if l < label_count {
                    sum[l * texels + t] += disp.decode(t);
                    count[l * texels + t] += 1;
                }
            }
        }
    }
    let mut mean = vec![Vector3::zeros(); label_count * texels];
    let mut seen = vec![false; label_count * texels];
    for i in 0..mean.len() {
        if count[i] > 0 {
            mean[i] = sum[i] / count[i] as f64;
            seen[i] = true;
        }
    }
    Ok(DisplacementPrior { resolution, label_count, mean, seen })
}

/// Prediction result: the displacement map plus any labels the prior had
/// never seen (they predict zero offsets).
#[derive(Debug, Clone)]
pub struct DisplacementPrediction {
    pub map: DisplacementMap,
    pub unseen_labels: Vec<u8>,
}

/// Emit the prior's offset at every texel of a complete segmentation, then
/// relax once (weight 0.5) across label boundaries to avoid offset cliffs.
pub fn predict_displacement(
    seg: &SegmentationMap,
    prior: &DisplacementPrior,
) -> Result<DisplacementPrediction, CompletionError> {
    if !seg.all_valid() {
        return Err(CompletionError::IncompleteInput);
    }
    if seg.resolution != prior.resolution {
        return Err(CompletionError::AtlasMismatch {
            reason: format!("segmentation {} vs prior {}", seg.resolution, prior.resolution),
        });
    }
    let r = seg.resolution;
    let mut values: Vec<Vector3<f64>> = (0..r * r)
        .map(|t| prior.lookup(seg.labels[t], t).unwrap_or_else(Vector3::zeros))
        .collect();

    let mut unseen_labels: Vec<u8> = seg
        .labels
        .iter()
        .filter(|&&l| !prior.knows_label(l))
        .copied()
        .collect();
    unseen_labels.sort_unstable();
    unseen_labels.dedup();

    // One Jacobi relaxation pass restricted to label-boundary texels.
    let snapshot = values.clone();
    for t in 0..r * r {
        let (x, y) = (t % r, t / r);
        let mut neighbor_sum = Vector3::zeros();
        let mut n = 0usize;
        let mut boundary = false;
        let mut visit = |s: usize| {
            neighbor_sum += snapshot[s];
            n += 1;
            if seg.labels[s] != seg.labels[t] {
                boundary = true;
            }
        };
        if x > 0 {
            visit(t - 1);
        }
        if x + 1 < r {
            visit(t + 1);
        }
        if y > 0 {
            visit(t - r);
        }
        if y + 1 < r {
            visit(t + r);
        }
        if boundary && n > 0 {
            values[t] = snapshot[t] * 0.5 + neighbor_sum * (0.5 / n as f64);
        }
    }

    let mut map = DisplacementMap::new(r, DEFAULT_OFFSET_CAP).expect("positive cap");
    for t in 0..r * r {
        map.encode(t, &values[t]);
        map.valid[t] = true;
    }
    Ok(DisplacementPrediction { map, unseen_labels })
}

/// Distance (in BFS steps) to the nearest texel on the other side of the
/// region boundary; texels within `radius` form the blend band.
fn boundary_band(region: &[bool], r: usize, radius: usize) -> Vec<bool> {
    let mut dist = vec![usize::MAX; r * r];
    let mut frontier = Vec::new();
    for t in 0..r * r {
        let (x, y) = (t % r, t / r);
        let mut opposite = false;
        if x > 0 && region[t - 1] != region[t] {
            opposite = true;
        }
        if x + 1 < r && region[t + 1] != region[t] {
            opposite = true;
        }
        if y > 0 && region[t - r] != region[t] {
            opposite = true;
        }
        if y + 1 < r && region[t + r] != region[t] {
            opposite = true;
        }
        if opposite {
            dist[t] = 1;
            frontier.push(t);
        }
    }
    let mut d = 1usize;
    while !frontier.is_empty() && d < radius {
        d += 1;
        let mut next = Vec::new();
        for &t in &frontier {
            let (x, y) = (t % r, t / r);
            for n in [
                (x > 0).then(|| t - 1),
                (x + 1 < r).then(|| t + 1),
                (y > 0).then(|| t - r),
                (y + 1 < r).then(|| t + r),
            ]
            .into_iter()
            .flatten()
            {
                if dist[n] == usize::MAX {
                    dist[n] = d;
                    next.push(n);
                }
            }
        }
        frontier = next;
    }
    dist.iter().map(|&v| v <= radius).collect()
}

/// Overwrite a garment region with a tiled swatch, then blend the 2-texel
/// band at the region boundary through the texture completion path.
pub fn edit_texture_region(
    texture: &TextureMap,
    seg: &SegmentationMap,
    label: u8,
    swatch: &ColorImage,
    table: &TexelTable,
) -> Result<TextureMap, CompletionError> {
    if label as usize >= seg.palette.len() {
        return Err(CompletionError::UnknownLabel { label, palette: seg.palette.len() });
    }
    if swatch.width == 0 || swatch.height == 0 {
        return Err(CompletionError::EmptySwatch);
    }
    if texture.resolution != seg.resolution {
        return Err(CompletionError::AtlasMismatch {
            reason: format!("texture {} vs segmentation {}", texture.resolution, seg.resolution),
        });
    }
    check_resolution(texture.resolution, table)?;
    let r = texture.resolution;
    let region: Vec<bool> = (0..r * r)
        .map(|t| seg.valid[t] && seg.labels[t] == label)
        .collect();
    if !region.iter().any(|v| *v) {
        return Ok(texture.clone());
    }
    let mut out = texture.clone();
    for t in 0..r * r {
        if region[t] {
            let (x, y) = (t % r, t / r);
            out.pixels[t] = swatch.get(x % swatch.width, y % swatch.height);
            out.valid[t] = true;
        }
    }
    let band = boundary_band(&region, r, 2);
    for t in 0..r * r {
        if band[t] {
            out.valid[t] = false;
        }
    }
    complete_texture(&out, table)
}

/// Set the garment extent along a limb: texels with limb coordinate at most
/// `extent` take the garment label, texels beyond revert to skin.
pub fn edit_garment_length(
    seg: &SegmentationMap,
    label: u8,
    extent: f64,
    limb_coords: &[Option<(crate::synth::LimbKind, f64)>],
) -> Result<SegmentationMap, CompletionError> {
    if label as usize >= seg.palette.len() {
        return Err(CompletionError::UnknownLabel { label, palette: seg.palette.len() });
    }
    if !seg.palette.is_garment(label) {
        return Err(CompletionError::NotAGarment { label });
    }
    let kind = match label {
        crate::uv_atlas::LABEL_UPPER => crate::synth::LimbKind::Arm,
        crate::uv_atlas::LABEL_LOWER => crate::synth::LimbKind::Leg,
        _ => return Err(CompletionError::NoLimbForLabel { label }),
    };
    if limb_coords.len() != seg.labels.len() {
        return Err(CompletionError::AtlasMismatch {
            reason: format!("limb coordinates {} vs map {}", limb_coords.len(), seg.labels.len()),
        });
    }
    let mut out = seg.clone();
    for t in 0..out.labels.len() {
        if let Some((k, s)) = limb_coords[t] {
            if k == kind {
                out.labels[t] = if s <= extent { label } else { LABEL_SKIN };
            }
        }
    }
    Ok(out)
}

/// Copy the listed garment labels from subject B onto subject A. Texels
/// where A wore the garment but B does not are invalidated and re-completed.
pub fn swap_garments(
    tex_a: &TextureMap,
    seg_a: &SegmentationMap,
    tex_b: &TextureMap,
    seg_b: &SegmentationMap,
    labels: &[u8],
    table: &TexelTable,
) -> Result<(TextureMap, SegmentationMap), CompletionError> {
    let r = tex_a.resolution;
    if seg_a.resolution != r || tex_b.resolution != r || seg_b.resolution != r {
        return Err(CompletionError::AtlasMismatch {
            reason: "all four maps must share one resolution".into(),
        });
    }
    check_resolution(r, table)?;
    if labels.is_empty() {
        return Ok((tex_a.clone(), seg_a.clone()));
    }
    let in_set = |l: u8| labels.contains(&l);
    let mut tex = tex_a.clone();
    let mut seg = seg_a.clone();
    for t in 0..r * r {
        let b_has = seg_b.valid[t] && in_set(seg_b.labels[t]);
        let a_has = seg_a.valid[t] && in_set(seg_a.labels[t]);
        if b_has {
            tex.pixels[t] = tex_b.pixels[t];
            tex.valid[t] = tex_b.valid[t];
            seg.labels[t] = seg_b.labels[t];
            seg.valid[t] = true;
        } else if a_has {
            tex.valid[t] = false;
            seg.valid[t] = false;
        }
    }
    let tex = complete_texture(&tex, table)?;
    let seg = complete_segmentation(&seg, table)?;
    Ok((tex, seg))
}
