//! Unsupervised classification error, sample and traversal grids, and MMD².

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codes::{assemble, input_batch, sample_code_with, traversal_grid, CodeSelector, GeneratorInput};
use crate::data::{to_byte, ImageBatch};
use crate::error::{Error, Result};
use crate::networks::NetworkBundle;
use crate::tensor::{Real, Tensor};

/// Rows per forward pass when classifying a whole dataset.
const EVAL_CHUNK: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMethod {
    Hungarian,
    Majority,
}

impl FromStr for AssignmentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hungarian" => Ok(Self::Hungarian),
            "majority" => Ok(Self::Majority),
            _ => Err(Error::Argument(format!("unknown assignment method {s:?} (hungarian|majority)"))),
        }
    }
}

/// Cluster → label mapping fitted on a labelled split.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub mapping: Vec<usize>,
    /// `train_confusion[cluster][label]` counts.
    pub train_confusion: Vec<Vec<u64>>,
    pub method: AssignmentMethod,
}

impl ClusterAssignment {
    pub fn label_of(&self, cluster: usize) -> usize {
        self.mapping[cluster]
    }

    /// Fraction of the fitting split whose mapped cluster equals its label.
    pub fn train_accuracy(&self) -> f64 {
        let total: u64 = self.train_confusion.iter().flatten().sum();
        let hit: u64 = self
            .train_confusion
            .iter()
            .enumerate()
            .map(|(c, row)| row[self.mapping[c]])
            .sum();
        hit as f64 / total.max(1) as f64
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cluster index per latent: the argmax of the first categorical posterior head.
pub fn classify_latents<T: Real>(bundle: &NetworkBundle<T>, latents: &Tensor<T>) -> Result<Vec<usize>> {
    if bundle.gan.dq.cat_heads.is_empty() {
        return Err(Error::Unsupported(format!(
            "preset {} has no categorical code to classify with",
            bundle.preset.name.as_str()
        )));
    }
    let (_, posterior) = bundle.discriminate(latents)?;
    let logits = &posterior.cat_logits[0];
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

/// Encodes and classifies `images` in chunks.
pub fn classify_images<T: Real>(bundle: &NetworkBundle<T>, images: &ImageBatch<T>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < images.len() {
        let end = (start + EVAL_CHUNK).min(images.len());
        let z = bundle.encode(&images.slice(start, end))?;
        out.extend(classify_latents(bundle, &z)?);
        start = end;
    }
    Ok(out)
}

pub fn confusion(clusters: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if clusters.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} cluster indices for {} labels",
            clusters.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&c, &l) in clusters.iter().zip(labels) {
        if c >= k || l >= k {
            return Err(Error::Argument(format!("cluster {c} / label {l} outside [0, {k})")));
        }
        m[c][l] += 1;
    }
    Ok(m)
}

/// Hungarian: the bijection maximising matched count. Majority: each cluster's
/// modal label (lowest label on ties, clusters may collide).
pub fn fit_assignment(clusters: &[usize], labels: &[usize], k: usize, method: AssignmentMethod) -> Result<ClusterAssignment> {
    if clusters.is_empty() {
        return Err(Error::Argument("cannot fit an assignment on an empty split".into()));
    }
    if k == 0 {
        return Err(Error::Argument("K must be positive".into()));
    }
    let conf = confusion(clusters, labels, k)?;
    let mapping = match method {
        AssignmentMethod::Hungarian => {
            let weights = Matrix::from_rows(conf.iter().map(|r| r.iter().map(|&v| v as i64).collect::<Vec<_>>()))
                .expect("square confusion matrix");
            kuhn_munkres(&weights).1
        }
        AssignmentMethod::Majority => conf.iter().map(|row| argmax(row)).collect(),
    };
    Ok(ClusterAssignment {
        mapping,
        train_confusion: conf,
        method,
    })
}

/// Fraction of samples whose mapped cluster differs from the label.
pub fn error_rate(clusters: &[usize], labels: &[usize], assignment: &ClusterAssignment) -> Result<f64> {
    if clusters.len() != labels.len() || clusters.is_empty() {
        return Err(Error::Argument(format!(
            "{} cluster indices for {} labels",
            clusters.len(),
            labels.len()
        )));
    }
    let k = assignment.mapping.len();
    let mut wrong = 0usize;
    for (&c, &l) in clusters.iter().zip(labels) {
        if c >= k {
            return Err(Error::Argument(format!("cluster {c} outside [0, {k})")));
        }
        wrong += (assignment.label_of(c) != l) as usize;
    }
    Ok(wrong as f64 / clusters.len() as f64)
}

/// Test error of `bundle` on a labelled split under a fitted assignment.
pub fn test_error<T: Real>(
    bundle: &NetworkBundle<T>,
    images: &ImageBatch<T>,
    labels: &[usize],
    assignment: &ClusterAssignment,
) -> Result<f64> {
    error_rate(&classify_images(bundle, images)?, labels, assignment)
}

/// Full protocol: fit on the training split, score on the test split.
#[derive(Clone, Debug)]
pub struct ClassificationReport {
    pub assignment: ClusterAssignment,
    pub train_accuracy: f64,
    pub test_error: f64,
}

pub fn evaluate_classification<T: Real>(
    bundle: &NetworkBundle<T>,
    train: (&ImageBatch<T>, &[usize]),
    test: (&ImageBatch<T>, &[usize]),
    method: AssignmentMethod,
) -> Result<ClassificationReport> {
    let k = *bundle
        .gan
        .code_spec
        .categoricals
        .first()
        .ok_or_else(|| Error::Unsupported("preset has no categorical code".into()))?;
    let train_clusters = classify_images(bundle, train.0)?;
    let assignment = fit_assignment(&train_clusters, train.1, k, method)?;
    let test_error = test_error(bundle, test.0, test.1, &assignment)?;
    Ok(ClassificationReport {
        train_accuracy: assignment.train_accuracy(),
        assignment,
        test_error,
    })
}

/// Writes a `metric,value` CSV.
pub fn write_report(path: impl AsRef<Path>, rows: &[(&str, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("metric,value\n");
    for (k, v) in rows {
        text.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// An 8-bit raster: `channels` is 1 (grayscale) or 3 (RGB), row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Tiles `images` into `rows × cols` cells, row-major, without gutters. Cells
/// past the last image stay black.
pub fn tile_grid<T: Real>(images: &ImageBatch<T>, rows: usize, cols: usize) -> Result<Raster> {
    let (c, h, w) = images.image_shape();
    if c != 1 && c != 3 {
        return Err(Error::Argument(format!("grids need 1 or 3 channels, got {c}")));
    }
    if images.len() > rows * cols {
        return Err(Error::Argument(format!(
            "{} images do not fit a {rows}×{cols} grid",
            images.len()
        )));
    }
    let (width, height) = (cols * w, rows * h);
    let mut pixels = vec![0u8; width * height * c];
    let t = images.tensor();
    for i in 0..images.len() {
        let img = t.row(i);
        let (gy, gx) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let px = (gy * h + y) * width + gx * w + x;
                    pixels[px * c + ch] = to_byte(img[(ch * h + y) * w + x]);
                }
            }
        }
    }
    Ok(Raster {
        width,
        height,
        channels: c,
        pixels,
    })
}

pub fn write_png(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), raster.width as u32, raster.height as u32);
    enc.set_color(if raster.channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    enc.set_depth(png::BitDepth::Eight);
    let io_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&raster.pixels).map_err(io_err)?;
    writer.finish().map_err(io_err)?;
    Ok(())
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(fmt)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported colour type {other:?}"),
            })
        }
    };
    buf.truncate(info.buffer_size());
    Ok(Raster {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        pixels: buf,
    })
}

/// Decodes generator inputs through `Dec(G(·))`.
pub fn render_inputs<T: Real>(bundle: &NetworkBundle<T>, inputs: &[GeneratorInput]) -> Result<ImageBatch<T>> {
    let x = input_batch::<T>(inputs)?;
    let z = bundle.generate(&x)?;
    bundle.decode(&z)
}

/// Generator inputs for `n` samples drawn from one seeded stream.
pub fn sample_inputs<T: Real>(bundle: &NetworkBundle<T>, n: usize, seed: u64) -> Result<Vec<GeneratorInput>> {
    let spec = &bundle.gan.code_spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| assemble(&sample_code_with(spec, &mut rng), spec)).collect()
}

/// Grid shape for `n` free samples: `ceil(√n)` columns.
pub fn sample_grid_shape(n: usize) -> (usize, usize) {
    let cols = ((n as f64).sqrt().ceil() as usize).max(1);
    (n.div_ceil(cols).max(1), cols)
}

/// `n` samples of `Dec(G(code))` in a near-square grid PNG.
pub fn emit_samples<T: Real>(bundle: &NetworkBundle<T>, n: usize, seed: u64, path: impl AsRef<Path>) -> Result<Raster> {
    if n == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    let images = render_inputs(bundle, &sample_inputs(bundle, n, seed)?)?;
    let (rows, cols) = sample_grid_shape(n);
    let raster = tile_grid(&images, rows, cols)?;
    write_png(&raster, path)?;
    Ok(raster)
}

/// Decoded images of a traversal grid, row-major.
pub fn traversal_images<T: Real>(
    bundle: &NetworkBundle<T>,
    vary: CodeSelector,
    rows: usize,
    cols: usize,
    range: Option<(f64, f64)>,
    seed: u64,
) -> Result<ImageBatch<T>> {
    let inputs = traversal_grid(&bundle.gan.code_spec, vary, rows, cols, range, seed)?;
    render_inputs(bundle, &inputs)
}

/// Traversal grid PNG: the varied code changes across columns, rows are
/// independent draws of everything else.
pub fn emit_traversal<T: Real>(
    bundle: &NetworkBundle<T>,
    vary: CodeSelector,
    rows: usize,
    cols: usize,
    range: Option<(f64, f64)>,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<Raster> {
    let images = traversal_images(bundle, vary, rows, cols, range, seed)?;
    let raster = tile_grid(&images, rows, cols)?;
    write_png(&raster, path)?;
    Ok(raster)
}

/// Sweeps the first categorical code over its K values (one column each,
/// `rows` draws per column), re-encodes the decoded images and reports, per
/// column, whether the modal recovered category is the column's category.
pub fn category_round_trip<T: Real>(bundle: &NetworkBundle<T>, rows: usize, seed: u64) -> Result<Vec<bool>> {
    let k = match bundle.gan.code_spec.categoricals.first() {
        Some(&k) => k,
        None => {
            return Err(Error::Unsupported(format!(
                "preset {} has no categorical code to traverse",
                bundle.preset.name.as_str()
            )))
        }
    };
    let images = traversal_images(bundle, CodeSelector::Categorical(0), rows, k, None, seed)?;
    let predicted = classify_images(bundle, &images)?;
    let mut votes = vec![vec![0usize; k]; k];
    for (i, &p) in predicted.iter().enumerate() {
        votes[i % k][p] += 1;
    }
    Ok(votes.iter().enumerate().map(|(col, v)| argmax(v) == col).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mmd2Result {
    pub value: f64,
    pub kernel_bandwidth: f64,
    pub n_x: usize,
    pub n_y: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Rows of the reference sample used by the median heuristic.
const MEDIAN_ROWS: usize = 1000;

/// Median pairwise Euclidean distance within the first 1000 rows of `x`
/// (1.0 if degenerate).
pub fn median_bandwidth(x: &Tensor<f64>) -> f64 {
    let n = x.rows().min(MEDIAN_ROWS);
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Biased MMD² with kernel `exp(−‖a−b‖²/(2σ²))`. Without a bandwidth, σ is
/// the median pairwise distance of `y` (the reference sample).
pub fn mmd2(x: &Tensor<f64>, y: &Tensor<f64>, bandwidth: Option<f64>) -> Result<Mmd2Result> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Argument("mmd2 needs nonempty samples".into()));
    }
    if x.shape().len() != 2 || y.shape().len() != 2 || x.row_len() != y.row_len() {
        return Err(Error::Argument(format!(
            "mmd2 sample shapes {:?} and {:?} differ in dimension",
            x.shape(),
            y.shape()
        )));
    }
    let sigma = bandwidth.unwrap_or_else(|| median_bandwidth(y));
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("bandwidth must be positive, got {sigma}")));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let mean_k = |a: &Tensor<f64>, b: &Tensor<f64>, symmetric: bool| {
        let mut s = 0.0;
        for i in 0..a.rows() {
            if symmetric {
                s += 1.0;
                for j in i + 1..b.rows() {
                    s += 2.0 * (-gamma * sq_dist(a.row(i), b.row(j))).exp();
                }
            } else {
                for j in 0..b.rows() {
                    s += (-gamma * sq_dist(a.row(i), b.row(j))).exp();
                }
            }
        }
        s / (a.rows() * b.rows()) as f64
    };
    let value = mean_k(x, x, true) + mean_k(y, y, true) - 2.0 * mean_k(x, y, false);
    Ok(Mmd2Result {
        value: value.max(0.0),
        kernel_bandwidth: sigma,
        n_x: x.rows(),
        n_y: y.rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ArchPreset, PresetName};
    use proptest::prelude::*;
    use rand::Rng;

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    fn accuracy(clusters: &[usize], labels: &[usize], mapping: &[usize]) -> f64 {
        clusters.iter().zip(labels).filter(|(&c, &l)| mapping[c] == l).count() as f64 / clusters.len() as f64
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 1.0, 3.0, 2.0]), 2);
        assert_eq!(argmax(&[1.0, 5.0, 5.0]), 1);
        assert_eq!(argmax(&[7.0, 7.0]), 0);
    }

    #[test]
    fn perfect_clusters_map_to_identity() {
        let c: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let a = fit_assignment(&c, &c, 5, AssignmentMethod::Hungarian).unwrap();
        assert_eq!(a.mapping, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.train_accuracy(), 1.0);
        assert_eq!(error_rate(&c, &c, &a).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_confusion() {
        // [[5,1],[2,9]]: cluster 0 holds 5 of label 0 and 1 of label 1
        let mut c = vec![0; 6];
        let mut l = vec![0; 5];
        l.push(1);
        c.extend(vec![1; 11]);
        l.extend(vec![0; 2]);
        l.extend(vec![1; 9]);
        let a = fit_assignment(&c, &l, 2, AssignmentMethod::Hungarian).unwrap();
        assert_eq!(a.train_confusion, vec![vec![5, 1], vec![2, 9]]);
        assert_eq!(a.mapping, vec![0, 1]);
        let best = permutations(2).iter().map(|p| accuracy(&c, &l, p)).fold(0.0, f64::max);
        assert_eq!(best, 14.0 / 17.0);
        assert_eq!(a.train_accuracy(), 14.0 / 17.0);
    }

    #[test]
    fn empty_split_rejected() {
        assert!(fit_assignment(&[], &[], 3, AssignmentMethod::Hungarian).is_err());
    }

    #[test]
    fn majority_can_collide() {
        let c = [0, 0, 1, 1, 1];
        let l = [2, 2, 2, 2, 0];
        let a = fit_assignment(&c, &l, 3, AssignmentMethod::Majority).unwrap();
        assert_eq!(a.mapping[..2], [2, 2]);
        // unconstrained per-cluster choice bounds every bijection from above
        let h = fit_assignment(&c, &l, 3, AssignmentMethod::Hungarian).unwrap();
        assert_eq!(a.train_accuracy(), 1.0 - 1.0 / 5.0);
        assert_eq!(h.train_accuracy(), 3.0 / 5.0);
    }

    #[test]
    fn random_clusters_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let train_c: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let train_l: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let a = fit_assignment(&train_c, &train_l, 10, AssignmentMethod::Hungarian).unwrap();
        let test_c: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let test_l: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let e = error_rate(&test_c, &test_l, &a).unwrap();
        // 1 − 1/K with binomial sd ≈ 0.002
        assert!((e - 0.9).abs() < 0.01, "{e}");
    }

    fn brute_mmd(x: &[Vec<f64>], y: &[Vec<f64>], s: f64) -> f64 {
        let k = |a: &Vec<f64>, b: &Vec<f64>| {
            let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
            (-d / (2.0 * s * s)).exp()
        };
        let mut kxx = 0.0;
        for a in x {
            for b in x {
                kxx += k(a, b);
            }
        }
        let mut kyy = 0.0;
        for a in y {
            for b in y {
                kyy += k(a, b);
            }
        }
        let mut kxy = 0.0;
        for a in x {
            for b in y {
                kxy += k(a, b);
            }
        }
        let (n, m) = (x.len() as f64, y.len() as f64);
        kxx / (n * n) + kyy / (m * m) - 2.0 * kxy / (n * m)
    }

    fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_vec(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn mmd_identical_and_far() {
        let x = tensor(&[vec![0.0, 1.0], vec![2.0, -1.0]]);
        assert!(mmd2(&x, &x, Some(1.0)).unwrap().value.abs() < 1e-15);
        let o = tensor(&[vec![0.0, 0.0]]);
        for d in [1.0, 3.0, 50.0] {
            let p = tensor(&[vec![d, 0.0]]);
            let v = mmd2(&o, &p, Some(1.0)).unwrap().value;
            assert!((v - (2.0 - 2.0 * (-d * d / 2.0f64).exp())).abs() < 1e-15);
        }
        assert_eq!(mmd2(&o, &tensor(&[vec![1e6, 0.0]]), Some(1.0)).unwrap().value, 2.0);
    }

    #[test]
    fn mmd_dimension_mismatch() {
        let a = tensor(&[vec![0.0, 1.0]]);
        let b = tensor(&[vec![0.0, 1.0, 2.0]]);
        assert!(matches!(mmd2(&a, &b, None), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn mmd_matches_double_sum(
            xs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..8),
            ys in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..8),
            s in 0.2f64..3.0,
        ) {
            let r = mmd2(&tensor(&xs), &tensor(&ys), Some(s)).unwrap();
            let b = brute_mmd(&xs, &ys, s);
            prop_assert!((r.value - b.max(0.0)).abs() <= 1e-12 * b.abs().max(1.0));
            let r2 = mmd2(&tensor(&ys), &tensor(&xs), Some(s)).unwrap();
            prop_assert!((r.value - r2.value).abs() <= 1e-12);
            prop_assert!(r.value >= 0.0);
        }

        #[test]
        fn hungarian_beats_every_permutation(
            pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60),
        ) {
            let (c, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let a = fit_assignment(&c, &l, 5, AssignmentMethod::Hungarian).unwrap();
            let mut sorted = a.mapping.clone();
            sorted.sort();
            prop_assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
            let best = permutations(5).iter().map(|p| accuracy(&c, &l, p)).fold(0.0, f64::max);
            prop_assert!((a.train_accuracy() - best).abs() < 1e-12);
            let maj = fit_assignment(&c, &l, 5, AssignmentMethod::Majority).unwrap();
            let mut m = maj.mapping.clone();
            m.sort();
            m.dedup();
            prop_assert!(maj.train_accuracy() >= a.train_accuracy() - 1e-12);
            if m.len() == 5 {
                prop_assert!((maj.train_accuracy() - a.train_accuracy()).abs() < 1e-12);
            }
        }

        #[test]
        fn error_invariant_under_cluster_relabeling(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
            perm_idx in 0usize..24,
        ) {
            let perm = &permutations(4)[perm_idx];
            let (c, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let a = fit_assignment(&c, &l, 4, AssignmentMethod::Hungarian).unwrap();
            let pc: Vec<usize> = c.iter().map(|&x| perm[x]).collect();
            let pa = fit_assignment(&pc, &l, 4, AssignmentMethod::Hungarian).unwrap();
            prop_assert_eq!(error_rate(&c, &l, &a).unwrap(), error_rate(&pc, &l, &pa).unwrap());
        }
    }

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(to_byte(-1.0f64), 0);
        assert_eq!(to_byte(0.0f64), 128);
        assert_eq!(to_byte(1.0f64), 255);
    }

    #[test]
    fn grid_layout_is_row_major() {
        // 3 images of 1×2×2 with constant values, placed in a 2×2 grid
        let vals = [-1.0, 0.0, 1.0];
        let data: Vec<f64> = vals.iter().flat_map(|&v| [v; 4]).collect();
        let imgs = ImageBatch::new(Tensor::from_vec(&[3, 1, 2, 2], data).unwrap()).unwrap();
        let r = tile_grid(&imgs, 2, 2).unwrap();
        assert_eq!((r.width, r.height), (4, 4));
        assert_eq!(r.pixels[0], 0);
        assert_eq!(r.pixels[2], 128);
        assert_eq!(r.pixels[2 * 4], 255);
        assert_eq!(r.pixels[2 * 4 + 2], 0);
    }

    #[test]
    fn category_round_trip_reports_every_column() {
        let b = NetworkBundle::<f64>::build(&ArchPreset::get(PresetName::Tiny), 2).unwrap();
        let cols = category_round_trip(&b, 4, 0).unwrap();
        assert_eq!(cols.len(), b.gan.code_spec.categoricals[0]);
        assert_eq!(cols, category_round_trip(&b, 4, 0).unwrap());
    }

    #[test]
    fn single_sample_png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let b = NetworkBundle::<f32>::build(&ArchPreset::get(PresetName::Mnist), 0).unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        let r = emit_samples(&b, 1, 7, &p1).unwrap();
        emit_samples(&b, 1, 7, &p2).unwrap();
        assert_eq!((r.width, r.height, r.channels), (32, 32, 1));
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(read_png(&p1).unwrap(), r);
        let t = emit_traversal(&b, CodeSelector::Categorical(0), 1, 1, None, 7, dir.path().join("t.png")).unwrap();
        assert_eq!(t, r);
    }

    #[test]
    fn classify_needs_categorical_head() {
        let mut b = NetworkBundle::<f64>::build(&ArchPreset::get(PresetName::Tiny), 0).unwrap();
        let z = Tensor::zeros(&[3, 8]);
        let c = classify_latents(&b, &z).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|&v| v < 3));
        b.gan.dq.cat_heads.clear();
        assert!(matches!(classify_latents(&b, &z), Err(Error::Unsupported(_))));
    }
}
