//! Image folders, preprocessing, attribute annotations and splits.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView, RgbImage};
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::ImageBatch;
use crate::{Error, Result};

const SUPPORTED: [&str; 3] = ["png", "jpg", "jpeg"];

/// Central square of the shorter side, resized to `target_size` (bilinear).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessSpec {
    pub target_size: u32,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec { target_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub spec: PreprocessSpec,
    /// Files skipped at load time with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    /// Decodes and preprocesses every record into one batch.
    pub fn load_images(&self) -> Result<ImageBatch> {
        let s = self.spec.target_size as usize;
        let mut out = Array4::<f32>::zeros((self.records.len(), 3, s, s));
        for (i, r) in self.records.iter().enumerate() {
            let img = open_image(&r.path)?;
            out.index_axis_mut(Axis(0), i).assign(&preprocess(&img, self.spec));
        }
        Ok(out)
    }

    /// Subset in the order given by `ids`; unknown ids are an error.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let by_id: HashMap<&str, &Record> = self.records.iter().map(|r| (r.id.as_str(), r)).collect();
        let records = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::Input(format!("id {id:?} is not in the dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            records,
            spec: self.spec,
            skipped: Vec::new(),
        })
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes)
        .map_err(|e| Error::Input(format!("cannot decode {}: {e}", path.display())))
}

/// Enumerates `<root>/*.png|jpg|jpeg` sorted by file name, skipping files that
/// fail to decode.
pub fn load_dataset(root: impl AsRef<Path>, spec: PreprocessSpec) -> Result<Dataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Input(format!("data root {} is not a directory", root.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| SUPPORTED.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return Err(Error::Input(format!("no PNG or JPEG images in {}", root.display())));
    }
    let mut records = Vec::with_capacity(paths.len());
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();
    for path in paths {
        let id = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        match open_image(&path) {
            Ok(_) if seen.insert(id.clone()) => records.push(Record { id, path }),
            Ok(_) => skipped.push((path, "duplicate id".to_string())),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path, e.to_string()));
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Input(format!(
            "all {} image files in {} failed to decode",
            skipped.len(),
            root.display()
        )));
    }
    Ok(Dataset {
        records,
        spec,
        skipped,
    })
}

/// Center-crops to a square, resizes, and maps 0..=255 linearly onto [-1, 1].
pub fn preprocess(img: &DynamicImage, spec: PreprocessSpec) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side).to_rgb8();
    let s = spec.target_size;
    let resized = if side == s {
        cropped
    } else {
        image::imageops::resize(&cropped, s, s, FilterType::Triangle)
    };
    let s = s as usize;
    let mut out = Array3::<f32>::zeros((3, s, s));
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Inverse of the value mapping of [`preprocess`], rounding to the nearest level.
pub fn to_rgb_image(x: &Array3<f32>) -> RgbImage {
    let (_, h, w) = x.dim();
    RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let v = |c: usize| (((x[[c, py as usize, px as usize]] + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
        image::Rgb([v(0), v(1), v(2)])
    })
}

/// Per-image binary annotations in the `list_attr_celeba.txt` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<i8>)>,
    index: HashMap<String, usize>,
}

impl AttributeTable {
    pub fn new(names: Vec<String>, rows: Vec<(String, Vec<i8>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(rows.len());
        for (i, (id, values)) in rows.iter().enumerate() {
            if values.len() != names.len() {
                return Err(Error::Input(format!(
                    "row {id:?} has {} values, expected {}",
                    values.len(),
                    names.len()
                )));
            }
            if values.iter().any(|&v| v != 1 && v != -1) {
                return Err(Error::Input(format!("row {id:?} has a value outside {{+1, -1}}")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate id {id:?}")));
            }
        }
        Ok(AttributeTable { names, rows, index })
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| {
            Error::Input(format!(
                "unknown attribute {name:?}; available: {}",
                self.names.join(", ")
            ))
        })
    }

    pub fn row(&self, id: &str) -> Result<&[i8]> {
        self.index
            .get(id)
            .map(|&i| self.rows[i].1.as_slice())
            .ok_or_else(|| Error::Input(format!("id {id:?} has no attribute annotations")))
    }

    pub fn value(&self, id: &str, attr: &str) -> Result<i8> {
        let j = self.attribute_index(attr)?;
        Ok(self.row(id)?[j])
    }

    /// Labels of one attribute for the given ids, in order.
    pub fn labels(&self, ids: &[&str], attr: &str) -> Result<Vec<i8>> {
        let j = self.attribute_index(attr)?;
        ids.iter().map(|id| Ok(self.row(id)?[j])).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n{}\n", self.rows.len(), self.names.join(" "));
        for (id, values) in &self.rows {
            s.push_str(id);
            for v in values {
                s.push_str(if *v > 0 { "  1" } else { " -1" });
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (ln, count_line) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing count line".into(),
        })?;
        let count: usize = count_line.trim().parse().map_err(|_| Error::Parse {
            line: ln,
            msg: format!("expected a row count, got {count_line:?}"),
        })?;
        let (_, names_line) = lines.next().ok_or(Error::Parse {
            line: 2,
            msg: "missing attribute names line".into(),
        })?;
        let names: Vec<String> = names_line.split_whitespace().map(str::to_string).collect();
        if names.is_empty() {
            return Err(Error::Parse {
                line: 2,
                msg: "no attribute names".into(),
            });
        }
        let mut rows = Vec::with_capacity(count);
        let mut last_line = 2;
        for (ln, line) in lines {
            last_line = ln;
            let mut toks = line.split_whitespace();
            let Some(id) = toks.next() else { continue };
            let values = toks
                .map(|t| match t {
                    "1" | "+1" => Ok(1i8),
                    "-1" => Ok(-1i8),
                    other => Err(Error::Parse {
                        line: ln,
                        msg: format!("value {other:?} is not +1 or -1"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != names.len() {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("row has {} values, expected {}", values.len(), names.len()),
                });
            }
            rows.push((id.to_string(), values));
        }
        if rows.len() != count {
            return Err(Error::Parse {
                line: last_line,
                msg: format!("declared {count} rows, found {}", rows.len()),
            });
        }
        AttributeTable::new(names, rows).map_err(|e| Error::Parse {
            line: last_line,
            msg: e.to_string(),
        })
    }
}

pub fn load_attribute_table(path: impl AsRef<Path>) -> Result<AttributeTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AttributeTable::parse(&text)
}

/// Disjoint, exhaustive train/test partition, deterministic under `seed`.
/// Both halves keep the dataset's name order. With a table, every id must be annotated.
pub fn split(
    dataset: &Dataset,
    table: Option<&AttributeTable>,
    test_count: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if test_count >= dataset.len() {
        return Err(Error::Input(format!(
            "test_count {test_count} must be smaller than the dataset size {}",
            dataset.len()
        )));
    }
    if let Some(t) = table {
        for r in &dataset.records {
            t.row(&r.id)?;
        }
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; dataset.len()];
    for &i in &idx[..test_count] {
        is_test[i] = true;
    }
    let pick = |want: bool| Dataset {
        records: dataset
            .records
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == want)
            .map(|(r, _)| r.clone())
            .collect(),
        spec: dataset.spec,
        skipped: Vec::new(),
    };
    Ok((pick(false), pick(true)))
}

/// Split manifest: one id per line.
pub fn write_manifest(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut s = dataset.ids().join("\n");
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    Ok(fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Consecutive batches over `order`; a short final batch is kept only when `keep_last`.
pub fn batches(order: &[usize], batch_size: usize, keep_last: bool) -> Vec<&[usize]> {
    order
        .chunks(batch_size.max(1))
        .filter(|c| keep_last || c.len() == batch_size)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn solid(w: u32, h: u32, v: u8) -> DynamicImage {
        DynamicImage::ImageRgb8(RgbImage::from_pixel(w, h, Rgb([v, v, v])))
    }

    #[test]
    fn aligned_face_size_crops_to_target() {
        let out = preprocess(&solid(178, 218, 0), PreprocessSpec::default());
        assert_eq!(out.dim(), (3, 64, 64));
        assert!(out.iter().all(|&v| v == -1.0));
        let out = preprocess(&solid(178, 218, 255), PreprocessSpec::default());
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn crop_is_central() {
        // left third black, middle white, right third black: the central square is all white
        let img = RgbImage::from_fn(30, 10, |x, _| if (10..20).contains(&x) { Rgb([255; 3]) } else { Rgb([0; 3]) });
        let out = preprocess(&DynamicImage::ImageRgb8(img), PreprocessSpec { target_size: 10 });
        assert!(out.iter().all(|&v| v == 1.0));
    }

    proptest! {
        #[test]
        fn value_mapping_round_trips(r in 0u8..=255, g in 0u8..=255, b in 0u8..=255) {
            let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(4, 4, Rgb([r, g, b])));
            let x = preprocess(&img, PreprocessSpec { target_size: 4 });
            let back = to_rgb_image(&x);
            prop_assert_eq!(back.get_pixel(1, 2).0, [r, g, b]);
            let again = preprocess(&DynamicImage::ImageRgb8(back), PreprocessSpec { target_size: 4 });
            for (a, b) in x.iter().zip(again.iter()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }

    fn table_text(count: usize, rows: usize) -> String {
        let mut s = format!("{count}\nSmiling Male\n");
        for i in 0..rows {
            s.push_str(&format!("{:06}.jpg  1 -1\n", i + 1));
        }
        s
    }

    #[test]
    fn attribute_table_parsing() {
        let t = AttributeTable::parse(&table_text(3, 3)).unwrap();
        assert_eq!(t.names, vec!["Smiling", "Male"]);
        assert_eq!(t.row("000001.jpg").unwrap(), &[1, -1]);
        assert_eq!(t.value("000002.jpg", "Male").unwrap(), -1);
        assert!(t.row("999999.jpg").is_err());
        let err = AttributeTable::parse(&table_text(10, 9)).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        let err = AttributeTable::parse("1\nA B\nx.jpg 1 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = AttributeTable::parse("1\nA B\nx.jpg 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(t.attribute_index("Bald").unwrap_err().to_string().contains("Smiling, Male"));
        assert_eq!(AttributeTable::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn forty_names() {
        let names: Vec<String> = (0..40).map(|i| format!("A{i}")).collect();
        let text = format!("1\n{}\nimg.jpg{}\n", names.join(" "), " -1".repeat(40));
        assert_eq!(AttributeTable::parse(&text).unwrap().names.len(), 40);
    }

    fn fake_dataset(n: usize) -> Dataset {
        Dataset {
            records: (0..n)
                .map(|i| Record {
                    id: format!("{i:04}.png"),
                    path: PathBuf::from(format!("{i:04}.png")),
                })
                .collect(),
            spec: PreprocessSpec::default(),
            skipped: Vec::new(),
        }
    }

    #[test]
    fn split_properties() {
        let d = fake_dataset(1000);
        let (train, test) = split(&d, None, 200, 7).unwrap();
        assert_eq!((train.len(), test.len()), (800, 200));
        let a: HashSet<_> = train.ids().into_iter().collect();
        assert!(test.ids().iter().all(|id| !a.contains(id)));
        let (train2, test2) = split(&d, None, 200, 7).unwrap();
        assert_eq!(train.records, train2.records);
        assert_eq!(test.records, test2.records);
        let (all, none) = split(&d, None, 0, 7).unwrap();
        assert_eq!((all.len(), none.len()), (1000, 0));
        assert!(split(&d, None, 1000, 7).is_err());
    }

    #[test]
    fn split_requires_annotations() {
        let d = fake_dataset(3);
        let t = AttributeTable::new(vec!["A".into()], vec![("0000.png".into(), vec![1])]).unwrap();
        assert!(split(&d, Some(&t), 1, 0).is_err());
    }

    #[test]
    fn batches_drop_or_keep_tail() {
        let order: Vec<usize> = (0..10).collect();
        assert_eq!(batches(&order, 4, false).len(), 2);
        let kept = batches(&order, 4, true);
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[2], &[8, 9]);
    }

    #[test]
    fn folder_loading_skips_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), PreprocessSpec::default()).is_err());
        for i in 0..9 {
            solid(8, 8, 10 * i as u8).save(dir.path().join(format!("img{i}.png"))).unwrap();
        }
        fs::write(dir.path().join("bad.png"), b"not a png").unwrap();
        fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let d = load_dataset(dir.path(), PreprocessSpec { target_size: 8 }).unwrap();
        assert_eq!(d.len(), 9);
        assert_eq!(d.skipped.len(), 1);
        assert_eq!(d.records[0].id, "img0.png");
        let x = d.load_images().unwrap();
        assert_eq!(x.dim(), (9, 3, 8, 8));
        // one all-corrupt folder fails
        let bad = tempfile::tempdir().unwrap();
        fs::write(bad.path().join("x.jpg"), b"junk").unwrap();
        assert!(load_dataset(bad.path(), PreprocessSpec::default()).is_err());
    }
}
