//! Latent-space tools: interpolation, attribute vectors, manipulation and
//! 2-D embeddings of latent codes.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::batches;
use crate::models::{Encoder, ImageBatch};
use crate::{Error, Result};

fn check_width(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("{what}: latent widths differ ({a} vs {b})")));
    }
    Ok(())
}

/// Exact at both endpoints, and constant when `left == right`.
fn lerp(l: f32, r: f32, a: f32) -> f32 {
    if a < 0.5 {
        l + a * (r - l)
    } else {
        r - (1.0 - a) * (r - l)
    }
}

/// `(1 - a) * left + a * right` for every `a` in `alphas`.
pub fn interpolate(left: ArrayView1<f32>, right: ArrayView1<f32>, alphas: &[f32]) -> Result<Vec<Array1<f32>>> {
    check_width(left.len(), right.len(), "interpolate")?;
    if let Some(a) = alphas.iter().find(|a| !a.is_finite()) {
        return Err(Error::Input(format!("interpolation weight {a} is not finite")));
    }
    Ok(alphas
        .iter()
        .map(|&a| ndarray::Zip::from(&left).and(&right).map_collect(|&l, &r| lerp(l, r, a)))
        .collect())
}

/// `0, 1/(n-1), ..., 1`; eleven steps gives `0, 0.1, ..., 1`.
pub fn alpha_sweep(n: usize) -> Vec<f32> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f32 / (n - 1) as f32).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector {
    pub name: String,
    pub vector: Array1<f32>,
    pub positive_count: usize,
    pub negative_count: usize,
}

/// Posterior means of `images`, encoded in chunks.
pub fn encode_means(enc: &Encoder, images: &ImageBatch) -> Result<Array2<f32>> {
    let n = images.len_of(Axis(0));
    let mut out = Array2::<f32>::zeros((n, enc.latent_dim()));
    let order: Vec<usize> = (0..n).collect();
    for chunk in batches(&order, 64, true) {
        let x = images.slice(ndarray::s![chunk[0]..chunk[0] + chunk.len(), .., .., ..]).to_owned();
        let dist = enc.encode(&x)?;
        out.slice_mut(ndarray::s![chunk[0]..chunk[0] + chunk.len(), ..]).assign(&dist.mean);
    }
    Ok(out)
}

/// Mean of `positives` rows minus mean of `negatives` rows.
pub fn attribute_vector_from_means(
    name: &str,
    positives: ArrayView2<f32>,
    negatives: ArrayView2<f32>,
) -> Result<AttributeVector> {
    if positives.nrows() == 0 || negatives.nrows() == 0 {
        return Err(Error::Input(format!(
            "attribute {name}: need at least one positive and one negative sample, got {} and {}",
            positives.nrows(),
            negatives.nrows()
        )));
    }
    check_width(positives.ncols(), negatives.ncols(), "attribute_vector")?;
    let mean = |m: ArrayView2<f32>| m.mapv(f64::from).mean_axis(Axis(0)).expect("nonempty");
    let diff = mean(positives) - mean(negatives);
    let vector = diff.mapv(|v| v as f32);
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("attribute {name}: vector is not finite")));
    }
    Ok(AttributeVector {
        name: name.to_string(),
        vector,
        positive_count: positives.nrows(),
        negative_count: negatives.nrows(),
    })
}

/// Difference of mean posterior means between two image sets.
pub fn attribute_vector(
    enc: &Encoder,
    positives: &ImageBatch,
    negatives: &ImageBatch,
    name: &str,
) -> Result<AttributeVector> {
    if positives.len_of(Axis(0)) == 0 || negatives.len_of(Axis(0)) == 0 {
        return Err(Error::Input(format!("attribute {name}: empty image set")));
    }
    let p = encode_means(enc, positives)?;
    let n = encode_means(enc, negatives)?;
    attribute_vector_from_means(name, p.view(), n.view())
}

/// `z + alpha * attr`, applied to every row of `z`.
pub fn manipulate(z: &Array2<f32>, attr: &AttributeVector, alpha: f32) -> Result<Array2<f32>> {
    check_width(z.ncols(), attr.vector.len(), "manipulate")?;
    let step = attr.vector.mapv(|v| alpha * v);
    Ok(z + &step.insert_axis(Axis(0)))
}

/// Mean attribute score over `decode(z)` and over `decode(z + alpha * attr)`,
/// with `z` the posterior means of `images` and `score` any batch scorer.
pub fn directional_effect(
    enc: &Encoder,
    dec: &crate::models::Decoder,
    attr: &AttributeVector,
    alpha: f32,
    images: &ImageBatch,
    mut score: impl FnMut(&ImageBatch) -> Result<Array1<f32>>,
) -> Result<(f64, f64)> {
    let z = encode_means(enc, images)?;
    let before = score(&dec.decode(&z)?)?;
    let after = score(&dec.decode(&manipulate(&z, attr, alpha)?)?)?;
    let mean = |a: &Array1<f32>| a.iter().map(|&v| v as f64).sum::<f64>() / a.len().max(1) as f64;
    Ok((mean(&before), mean(&after)))
}

/// t-SNE settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmbedMethod {
    TsneExact(TsneParams),
    Pca,
}

impl EmbedMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            EmbedMethod::TsneExact(_) => "tsne_exact",
            EmbedMethod::Pca => "pca",
        }
    }
}

pub const TSNE_MAX_POINTS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    pub ids: Vec<String>,
    pub points: Vec<[f64; 2]>,
    pub method: String,
}

impl Embedding2D {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,x,y\n");
        for (id, p) in self.ids.iter().zip(&self.points) {
            s.push_str(&format!("{id},{},{}\n", p[0], p[1]));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One 2-D point per row of `vectors`.
pub fn embed_2d(ids: &[String], vectors: ArrayView2<f32>, method: EmbedMethod) -> Result<Embedding2D> {
    let n = vectors.nrows();
    if ids.len() != n {
        return Err(Error::Input(format!("{} ids for {n} vectors", ids.len())));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("embedding input contains non-finite values".into()));
    }
    let x = vectors.mapv(f64::from);
    let points = match method {
        EmbedMethod::Pca => {
            if n == 0 {
                return Err(Error::Input("pca needs at least one vector".into()));
            }
            pca_2d(&x)
        }
        EmbedMethod::TsneExact(p) => {
            if !(3..=TSNE_MAX_POINTS).contains(&n) {
                return Err(Error::Input(format!(
                    "tsne_exact needs between 3 and {TSNE_MAX_POINTS} vectors, got {n}"
                )));
            }
            if !(p.perplexity > 0.0) || p.iterations == 0 {
                return Err(Error::Input("tsne_exact needs perplexity > 0 and iterations > 0".into()));
            }
            tsne_exact(&x, &p)
        }
    };
    Ok(Embedding2D { ids: ids.to_vec(), points, method: method.tag().to_string() })
}

fn pca_2d(x: &Array2<f64>) -> Vec<[f64; 2]> {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = x - &mean.insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n.max(1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Array2::<f64>::zeros((d, 2));
    for (k, &col) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(col);
        // fixed sign: largest-magnitude entry positive
        let pivot = v.iter().fold(0.0f64, |m, &e| if e.abs() > m.abs() { e } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            axes[[i, k]] = sign * v[i];
        }
    }
    let proj = centered.dot(&axes);
    proj.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

/// Row-conditional affinities with per-point bandwidth matched to `perplexity`.
fn conditional_affinities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d2.nrows();
    let target = perplexity.min((n - 1) as f64).ln();
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        let dmin = (0..n).filter(|&j| j != i).map(|j| d2[[i, j]]).fold(f64::INFINITY, f64::min);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let e = (-(d2[[i, j]] - dmin) * beta).exp();
                p[[i, j]] = e;
                sum += e;
                weighted += e * (d2[[i, j]] - dmin);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for j in (0..n).filter(|&j| j != i) {
                p[[i, j]] /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    p
}

fn tsne_exact(x: &Array2<f64>, params: &TsneParams) -> Vec<[f64; 2]> {
    let n = x.nrows();
    let sq = x.map_axis(Axis(1), |r| r.dot(&r));
    let gram = x.dot(&x.t());
    let d2 = Array2::from_shape_fn((n, n), |(i, j)| (sq[i] + sq[j] - 2.0 * gram[[i, j]]).max(0.0));
    let cond = conditional_affinities(&d2, params.perplexity);
    let p = (&cond + &cond.t()).mapv(|v| (v / (2.0 * n as f64)).max(1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Array2::from_shape_simple_fn((n, 2), || normal.sample(&mut rng));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    let mut grad = Array2::<f64>::zeros((n, 2));
    for it in 0..params.iterations {
        let exaggeration = if it < params.exaggeration_iters { params.early_exaggeration } else { 1.0 };
        let momentum = if it < params.exaggeration_iters { 0.5 } else { 0.8 };
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = q;
                num[[j, i]] = q;
                total += 2.0 * q;
            }
        }
        grad.fill(0.0);
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in (0..n).filter(|&j| j != i) {
                let q = num[[i, j]];
                let coef = (exaggeration * p[[i, j]] - (q / total).max(1e-12)) * q;
                gx += coef * (y[[i, 0]] - y[[j, 0]]);
                gy += coef * (y[[i, 1]] - y[[j, 1]]);
            }
            grad[[i, 0]] = 4.0 * gx;
            grad[[i, 1]] = 4.0 * gy;
        }
        for ((g, v), gain) in grad.iter().zip(velocity.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*v > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
            *v = momentum * *v - params.learning_rate * *gain * g;
        }
        y += &velocity;
        let mean = y.mean_axis(Axis(0)).expect("nonempty");
        y -= &mean.insert_axis(Axis(0));
    }
    y.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

/// A named f32 vector with two sample counts, the unit of the named-vector file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedVector {
    pub name: String,
    pub values: Vec<f32>,
    pub counts: [u64; 2],
}

impl From<&AttributeVector> for NamedVector {
    fn from(a: &AttributeVector) -> Self {
        NamedVector {
            name: a.name.clone(),
            values: a.vector.to_vec(),
            counts: [a.positive_count as u64, a.negative_count as u64],
        }
    }
}

impl TryFrom<&NamedVector> for AttributeVector {
    type Error = Error;

    fn try_from(v: &NamedVector) -> Result<Self> {
        if v.counts.contains(&0) || v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("entry {:?} is not a valid attribute vector", v.name)));
        }
        Ok(AttributeVector {
            name: v.name.clone(),
            vector: Array1::from(v.values.clone()),
            positive_count: v.counts[0] as usize,
            negative_count: v.counts[1] as usize,
        })
    }
}

pub const NAMED_VECTOR_MAGIC: &[u8; 4] = b"VWNV";

/// `"VWNV" | u16 version | u32 count | count x (u32 len | name | u32 dim | dim x f32 | u64 | u64)`, little-endian.
pub fn named_vectors_to_bytes(entries: &[NamedVector]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(NAMED_VECTOR_MAGIC);
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.values.len() as u32).to_le_bytes());
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in e.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

pub fn named_vectors_from_bytes(bytes: &[u8]) -> Result<Vec<NamedVector>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(Error::Corrupt {
            offset: pos as u64,
            msg: format!("need {n} more bytes"),
        })?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != NAMED_VECTOR_MAGIC {
        return Err(Error::Format("not a named-vector file".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
    if version != 1 {
        return Err(Error::Format(format!("unsupported named-vector version {version}")));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let dim = u32_at(take(4)?);
        let raw = take(dim.checked_mul(4).ok_or_else(|| Error::Format("dim overflow".into()))?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let a = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let b = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        entries.push(NamedVector { name, values, counts: [a, b] });
    }
    if pos != bytes.len() {
        return Err(Error::Corrupt { offset: pos as u64, msg: "trailing bytes".into() });
    }
    Ok(entries)
}

pub fn write_named_vectors(path: impl AsRef<Path>, entries: &[NamedVector]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, named_vectors_to_bytes(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_named_vectors(path: impl AsRef<Path>) -> Result<Vec<NamedVector>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    named_vectors_from_bytes(&bytes)
}
