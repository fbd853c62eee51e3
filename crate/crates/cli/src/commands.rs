use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use image::{Rgb, RgbImage};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vaewgan::checkpoint::{decoder_from, encoder_from};
use vaewgan::data::{load_attribute_table, load_dataset, preprocess, split, write_manifest};
use vaewgan::eval::{self, evaluate_attributes, inception_style_score, majority_baseline, SvmConfig};
use vaewgan::latent::{self, alpha_sweep, encode_means, interpolate, read_named_vectors, write_named_vectors};
use vaewgan::latent::{NamedVector, TsneParams};
use vaewgan::models::standard_normal;
use vaewgan::pretrain::{load_perceptual, pretrained_on_shapes, save_perceptual};
use vaewgan::{
    load_checkpoint, save_checkpoint, AttributeTable, AttributeVector, Checkpoint, Dataset, Decoder, EmbedMethod,
    Encoder, ImageBatch, MultiViewExtractor, PerceptualNet, PreprocessSpec, RunOptions, ScoreClassifier,
    StepReport, Trainer,
};

use crate::config::{parse_override, RunConfig};
use crate::grid::{square_cols, tile, to_images};
use crate::{usage, Cli, Command};

const CHUNK: usize = 256;

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = match cli.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Train(a) => train(a, cli.out, cli.seed),
        Command::Generate(a) => generate(a, &out, seed),
        Command::Reconstruct(a) => reconstruct(a, &out),
        Command::Interpolate(a) => interpolate_cmd(a, &out, seed),
        Command::Manipulate(a) => manipulate_cmd(a, &out, seed),
        Command::AttrVector(a) => attr_vector(a, &out, seed),
        Command::Embed(a) => embed(a, &out, seed),
        Command::EvalAttrs(a) => eval_attrs(a, &out, seed),
        Command::Score(a) => score(a, &out),
        Command::Synth(a) => synth(a, &out, seed),
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var("VWGN_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| usage(format!("VWGN_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn require_file(p: &Path) -> anyhow::Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("file {} does not exist", p.display())))
    }
}

fn require_dir(p: &Path, what: &str) -> anyhow::Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist or is not a directory", p.display())))
    }
}

fn out_dir(p: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(p).with_context(|| format!("cannot create output directory {}", p.display()))
}

fn open_checkpoint(p: &Path) -> anyhow::Result<Checkpoint> {
    require_file(p)?;
    load_checkpoint(p).with_context(|| format!("cannot load checkpoint {}", p.display()))
}

fn save_png(img: &RgbImage, path: &Path) -> anyhow::Result<()> {
    img.save(path).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn spec_for(size: usize) -> PreprocessSpec {
    PreprocessSpec { target_size: size as u32 }
}

fn open_dataset(root: &Path, size: usize) -> anyhow::Result<Dataset> {
    require_dir(root, "data root")?;
    let ds = load_dataset(root, spec_for(size))?;
    if !ds.skipped.is_empty() {
        log::warn!("{} of the files in {} were skipped", ds.skipped.len(), root.display());
    }
    Ok(ds)
}

/// Drops records without annotations.
fn annotated(ds: Dataset, table: &AttributeTable) -> anyhow::Result<Dataset> {
    let before = ds.len();
    let records: Vec<_> = ds.records.into_iter().filter(|r| table.row(&r.id).is_ok()).collect();
    if records.len() < before {
        log::warn!("{} images have no annotations and are ignored", before - records.len());
    }
    if records.is_empty() {
        anyhow::bail!("no image in the data root has an annotation row");
    }
    Ok(Dataset {
        records,
        spec: ds.spec,
        skipped: Vec::new(),
    })
}

/// Applies `f` to the dataset's images in chunks and stacks the row outputs.
fn map_rows(
    ds: &Dataset,
    width: usize,
    mut f: impl FnMut(&ImageBatch) -> vaewgan::Result<Array2<f32>>,
) -> anyhow::Result<Array2<f32>> {
    let mut out = Array2::<f32>::zeros((ds.len(), width));
    for (i, chunk) in ds.records.chunks(CHUNK).enumerate() {
        let part = Dataset {
            records: chunk.to_vec(),
            spec: ds.spec,
            skipped: Vec::new(),
        };
        let rows = f(&part.load_images()?)?;
        out.slice_mut(s![i * CHUNK..i * CHUNK + chunk.len(), ..]).assign(&rows);
    }
    Ok(out)
}

fn decode_all(dec: &Decoder, z: &Array2<f32>) -> anyhow::Result<ImageBatch> {
    let parts = z
        .axis_chunks_iter(Axis(0), 64)
        .map(|c| dec.decode(&c.to_owned()))
        .collect::<vaewgan::Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views)?)
}

/// Files and folders, in argument order; undecodable files are skipped with a warning.
fn load_inputs(paths: &[PathBuf], size: usize) -> anyhow::Result<ImageBatch> {
    let mut arrays = Vec::new();
    for p in paths {
        if p.is_dir() {
            let ds = open_dataset(p, size)?;
            for (path, why) in &ds.skipped {
                log::warn!("skipping {}: {why}", path.display());
            }
            for a in ds.load_images()?.axis_iter(Axis(0)) {
                arrays.push(a.to_owned());
            }
            continue;
        }
        match image::open(p) {
            Ok(img) => arrays.push(preprocess(&img, spec_for(size))),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if arrays.is_empty() {
        anyhow::bail!("none of the {} input paths yielded a readable image", paths.len());
    }
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    Ok(ndarray::stack(Axis(0), &views)?)
}

fn train(a: crate::TrainArgs, out: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<()> {
    let mut overrides = a.set.iter().map(|s| parse_override(s)).collect::<anyhow::Result<Vec<_>>>()?;
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    push("paths.data_root", a.data.map(|p| p.display().to_string()));
    push("paths.perceptual", a.perceptual.map(|p| p.display().to_string()));
    push("paths.resume", a.resume.map(|p| p.display().to_string()));
    push("paths.out", out.map(|p| p.display().to_string()));
    push("train.seed", seed.map(|s| s.to_string()));
    push("train.epochs", a.epochs.map(|v| v.to_string()));
    push("train.batch_size", a.batch_size.map(|v| v.to_string()));
    push("train.lr", a.lr.map(|v| v.to_string()));
    push("model.latent_dim", a.latent_dim.map(|v| v.to_string()));
    push("train.loss_taps", a.loss_taps);
    push("train.objective", a.objective);
    push("train.max_steps", a.max_steps.map(|v| v.to_string()));
    push("train.holdout", a.holdout.map(|v| v.to_string()));
    let mut cfg = RunConfig::build(a.config.as_deref(), a.preset.as_deref(), &overrides)?;
    cfg.seed_fallback(env_seed()?);
    cfg.validate()?;
    let out = cfg.paths.out.clone();
    out_dir(&out)?;

    let mut trainer = match &cfg.paths.resume {
        Some(p) => {
            let t = Trainer::from_checkpoint(&open_checkpoint(p)?)?;
            log::info!("resuming at step {} (epoch {})", t.step(), t.completed_epochs() + 1);
            t
        }
        None => {
            let perceptual = perceptual_for(&mut cfg, &out)?;
            Trainer::new(cfg.model.clone(), cfg.train.clone(), perceptual)?
        }
    };
    let root = cfg.paths.data_root.clone().expect("validated");
    let ds = open_dataset(&root, trainer.model_cfg.image_size)?;
    let ds = if cfg.holdout > 0 {
        let (tr, te) = split(&ds, None, cfg.holdout, trainer.train_cfg.seed)?;
        write_manifest(out.join("train_ids.txt"), &tr)?;
        write_manifest(out.join("test_ids.txt"), &te)?;
        tr
    } else {
        ds
    };
    let per_epoch = trainer.train_cfg.steps_per_epoch(ds.len());
    log::info!(
        "{} training images, {per_epoch} steps per epoch, {} epochs",
        ds.len(),
        trainer.train_cfg.epochs
    );
    let images = ds.load_images()?;

    let log_path = out.join("loss_log.csv");
    let appending = cfg.paths.resume.is_some() && log_path.is_file();
    let file = if appending {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("cannot open {}", log_path.display()))?;
    let mut log_file = BufWriter::new(file);
    if !appending {
        writeln!(log_file, "step,kl,rec,gan,total")?;
    }
    let mut write_err = None;
    let opts = RunOptions {
        snapshot_dir: Some(out.clone()),
        max_steps: cfg.max_steps,
    };
    let result = trainer.run(&images, &opts, |r: &StepReport| {
        let l = &r.losses;
        let line = writeln!(log_file, "{},{},{},{},{}", r.step, l.kl, l.rec_total, l.gan, l.total).and_then(|_| log_file.flush());
        if let Err(e) = line {
            write_err.get_or_insert(e);
        }
        log::info!(
            "step {} epoch {} lr {} kl {:.4} rec {:.4} gan {:.4} total {:.4} ({:.2}s)",
            r.step,
            r.epoch,
            r.lr,
            l.kl,
            l.rec_total,
            l.gan,
            l.total,
            r.wall_secs
        );
    });
    if let Some(e) = write_err {
        return Err(e).context(format!("cannot write {}", log_path.display()));
    }
    result?;
    let final_path = out.join("final.ckpt");
    save_checkpoint(&trainer.checkpoint(), &final_path)?;
    println!("trained {} steps; wrote {} and {}", trainer.step(), final_path.display(), log_path.display());
    Ok(())
}

/// Loads the requested perceptual net (adopting its widths and input scale) or
/// pretrains one on the shapes corpus and saves it as `perceptual.ckpt`.
fn perceptual_for(cfg: &mut RunConfig, out: &Path) -> anyhow::Result<PerceptualNet> {
    if let Some(p) = &cfg.paths.perceptual {
        let (net, pcfg) = load_perceptual(p).with_context(|| format!("cannot load perceptual net {}", p.display()))?;
        if pcfg.image_size != cfg.model.image_size || pcfg.channels != cfg.model.channels {
            return Err(usage(format!(
                "perceptual net {} was built for {}x{} images, the model uses {}x{}",
                p.display(),
                pcfg.image_size,
                pcfg.image_size,
                cfg.model.image_size,
                cfg.model.image_size
            )));
        }
        cfg.model.perceptual_widths = pcfg.perceptual_widths;
        cfg.model.perceptual_input_scale = pcfg.perceptual_input_scale;
        return Ok(net);
    }
    log::info!("pretraining the perceptual net on {} procedural shapes", cfg.pretrain_samples);
    let net = pretrained_on_shapes(&cfg.model, cfg.pretrain_samples, &cfg.pretrain)?;
    let path = out.join("perceptual.ckpt");
    save_perceptual(&net, &cfg.model, &path)?;
    log::info!("wrote {}", path.display());
    Ok(net)
}

fn generate(a: crate::GenerateArgs, out: &Path, seed: u64) -> anyhow::Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1".into()));
    }
    if let Some(p) = &a.score_net {
        require_file(p)?;
    }
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let dec = decoder_from(&ckpt)?;
    out_dir(out)?;
    let z = standard_normal(a.count, ckpt.meta.model.latent_dim, &mut ChaCha8Rng::seed_from_u64(seed));
    let images = decode_all(&dec, &z)?;
    save_png(&tile(&to_images(&images), square_cols(a.count)), &out.join("generated.png"))?;
    if a.score {
        let source = a.score_net.as_deref().unwrap_or(&a.checkpoint);
        let (net, _) = load_perceptual(source)?;
        let s = inception_style_score(&ScoreClassifier::new(net), &images, a.count)?;
        println!("inception-style score over {} images: {s:.6}", a.count);
        write_text(&out.join("score.txt"), &format!("{s}\n"))?;
    }
    Ok(())
}

fn models(ckpt: &Checkpoint) -> anyhow::Result<(Encoder, Decoder)> {
    Ok((encoder_from(ckpt)?, decoder_from(ckpt)?))
}

fn reconstruct(a: crate::ReconstructArgs, out: &Path) -> anyhow::Result<()> {
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let (enc, dec) = models(&ckpt)?;
    let x = load_inputs(&a.images, ckpt.meta.model.image_size)?;
    let y = decode_all(&dec, &encode_means(&enc, &x)?)?;
    let n = x.dim().0;
    let mut cells = to_images(&x);
    cells.extend(to_images(&y));
    out_dir(out)?;
    save_png(&tile(&cells, n), &out.join("reconstruction.png"))
}

fn interpolate_cmd(a: crate::InterpolateArgs, out: &Path, seed: u64) -> anyhow::Result<()> {
    if a.frames < 2 {
        return Err(usage("--frames must be at least 2".into()));
    }
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let (enc, dec) = models(&ckpt)?;
    let (left, right) = match (&a.left, &a.right) {
        (Some(l), Some(r)) => {
            let x = load_inputs(&[l.clone(), r.clone()], ckpt.meta.model.image_size)?;
            if x.dim().0 != 2 {
                anyhow::bail!("both endpoint images must be readable");
            }
            let z = encode_means(&enc, &x)?;
            (z.slice(s![0..1, ..]).to_owned(), z.slice(s![1..2, ..]).to_owned())
        }
        _ => {
            if a.rows == 0 {
                return Err(usage("--rows must be at least 1".into()));
            }
            let z = standard_normal(2 * a.rows, ckpt.meta.model.latent_dim, &mut ChaCha8Rng::seed_from_u64(seed));
            (z.slice(s![..a.rows, ..]).to_owned(), z.slice(s![a.rows.., ..]).to_owned())
        }
    };
    let alphas = alpha_sweep(a.frames);
    let mut frames = Vec::new();
    for (l, r) in left.rows().into_iter().zip(right.rows()) {
        frames.extend(interpolate(l, r, &alphas)?);
    }
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    let z = ndarray::stack(Axis(0), &views)?;
    out_dir(out)?;
    save_png(&tile(&to_images(&decode_all(&dec, &z)?), a.frames), &out.join("interpolation.png"))
}

fn find_vector<'a>(entries: &'a [NamedVector], name: &str) -> anyhow::Result<&'a NamedVector> {
    entries.iter().find(|e| e.name == name).ok_or_else(|| {
        let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        usage(format!("unknown attribute {name:?}; available: {}", names.join(", ")))
    })
}

fn manipulate_cmd(a: crate::ManipulateArgs, out: &Path, seed: u64) -> anyhow::Result<()> {
    if a.alpha_steps < 2 {
        return Err(usage("--alpha-steps must be at least 2".into()));
    }
    require_file(&a.vectors)?;
    let entries = read_named_vectors(&a.vectors)?;
    let attrs = a
        .attrs
        .iter()
        .map(|n| Ok(AttributeVector::try_from(find_vector(&entries, n)?)?))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let (enc, dec) = models(&ckpt)?;
    let z = if a.images.is_empty() {
        if a.count == 0 {
            return Err(usage("--count must be at least 1".into()));
        }
        standard_normal(a.count, ckpt.meta.model.latent_dim, &mut ChaCha8Rng::seed_from_u64(seed))
    } else {
        encode_means(&enc, &load_inputs(&a.images, ckpt.meta.model.image_size)?)?
    };
    let alphas: Vec<f32> = alpha_sweep(a.alpha_steps).iter().map(|t| t * a.alpha_max).collect();
    out_dir(out)?;
    for attr in &attrs {
        let columns = alphas
            .iter()
            .map(|&alpha| Ok(to_images(&decode_all(&dec, &latent::manipulate(&z, attr, alpha)?)?)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let mut cells = Vec::with_capacity(z.nrows() * alphas.len());
        for row in 0..z.nrows() {
            cells.extend(columns.iter().map(|c| c[row].clone()));
        }
        save_png(&tile(&cells, alphas.len()), &out.join(format!("manipulate_{}.png", attr.name)))?;
    }
    Ok(())
}

fn check_attrs(table: &AttributeTable, requested: &[String]) -> anyhow::Result<Vec<String>> {
    for n in requested {
        table.attribute_index(n).map_err(|e| usage(e.to_string()))?;
    }
    Ok(if requested.is_empty() { table.names.clone() } else { requested.to_vec() })
}

fn attr_vector(a: crate::AttrVectorArgs, out: &Path, seed: u64) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1".into()));
    }
    require_file(&a.attributes)?;
    require_dir(&a.data, "data root")?;
    let table = load_attribute_table(&a.attributes)?;
    let attrs = check_attrs(&table, &a.attrs)?;
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let enc = encoder_from(&ckpt)?;
    let ds = annotated(open_dataset(&a.data, ckpt.meta.model.image_size)?, &table)?;
    let means = map_rows(&ds, enc.latent_dim(), |x| encode_means(&enc, x))?;
    let ids = ds.ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for name in &attrs {
        let labels = table.labels(&ids, name)?;
        let mut pick = |want: i8| {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == want).collect();
            idx.shuffle(&mut rng);
            idx.truncate(a.n);
            idx.sort_unstable();
            idx
        };
        let (pos, neg) = (pick(1), pick(-1));
        if pos.is_empty() || neg.is_empty() {
            let msg = format!("{name}: {} positive and {} negative images", pos.len(), neg.len());
            if a.attrs.is_empty() {
                log::warn!("skipping {msg}");
                continue;
            }
            anyhow::bail!("cannot build attribute vector for {msg}");
        }
        let v = latent::attribute_vector_from_means(name, means.select(Axis(0), &pos).view(), means.select(Axis(0), &neg).view())?;
        println!("{name}: {} positives, {} negatives, |v| = {:.4}", pos.len(), neg.len(), v.vector.dot(&v.vector).sqrt());
        entries.push(NamedVector::from(&v));
    }
    if entries.is_empty() {
        anyhow::bail!("no attribute has both positive and negative images");
    }
    out_dir(out)?;
    let path = out.join("attr_vectors.vwnv");
    write_named_vectors(&path, &entries)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn embed(a: crate::EmbedArgs, out: &Path, seed: u64) -> anyhow::Result<()> {
    let method = match a.method.as_str() {
        "tsne_exact" => EmbedMethod::TsneExact(TsneParams {
            perplexity: a.perplexity,
            iterations: a.iterations,
            seed,
            ..TsneParams::default()
        }),
        "pca" => EmbedMethod::Pca,
        other => return Err(usage(format!("unknown method {other:?}; expected tsne_exact or pca"))),
    };
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let enc = encoder_from(&ckpt)?;
    let ds = open_dataset(&a.data, ckpt.meta.model.image_size)?;
    if a.n == 0 || a.n > ds.len() {
        return Err(usage(format!("--n must lie in 1..={} (images in {}), got {}", ds.len(), a.data.display(), a.n)));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(a.n);
    idx.sort_unstable();
    let ids: Vec<String> = idx.iter().map(|&i| ds.records[i].id.clone()).collect();
    let sub = ds.subset(&ids)?;
    let means = map_rows(&sub, enc.latent_dim(), |x| encode_means(&enc, x))?;
    let emb = latent::embed_2d(&ids, means.view(), method)?;
    out_dir(out)?;
    write_text(&out.join("embedding.csv"), &emb.to_csv())?;
    if a.scatter {
        save_png(&scatter(&emb.points, &to_images(&sub.load_images()?)), &out.join("embedding.png"))?;
    }
    Ok(())
}

/// Thumbnails placed at their embedding coordinates on a white canvas.
fn scatter(points: &[[f64; 2]], thumbs: &[RgbImage]) -> RgbImage {
    const CANVAS: u32 = 1024;
    const THUMB: u32 = 32;
    let mut img = RgbImage::from_pixel(CANVAS, CANVAS, Rgb([255, 255, 255]));
    let bounds = |k: usize| {
        let lo = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (bx, by) = (bounds(0), bounds(1));
    let span = (CANVAS - THUMB) as f64;
    for (p, t) in points.iter().zip(thumbs) {
        let small = image::imageops::resize(t, THUMB, THUMB, image::imageops::FilterType::Triangle);
        let x = ((p[0] - bx.0) / bx.1 * span).round() as i64;
        let y = ((p[1] - by.0) / by.1 * span).round() as i64;
        image::imageops::replace(&mut img, &small, x, y);
    }
    img
}

fn eval_attrs(a: crate::EvalAttrsArgs, out: &Path, seed: u64) -> anyhow::Result<()> {
    for p in &a.checkpoints {
        require_file(p)?;
    }
    require_file(&a.attributes)?;
    require_dir(&a.data, "data root")?;
    let table = load_attribute_table(&a.attributes)?;
    let attrs = check_attrs(&table, &a.attrs)?;
    let extractor = MultiViewExtractor::from_checkpoints(&a.checkpoints)?;
    let ds = annotated(open_dataset(&a.data, extractor.image_size())?, &table)?;
    let (mut train, test) = split(&ds, Some(&table), a.test_count, seed)?;
    if let Some(n) = a.train_count {
        train.records.truncate(n);
    }
    if train.is_empty() || test.is_empty() {
        return Err(usage("train and test splits must both be nonempty".into()));
    }
    log::info!("{} train / {} test images, feature width {}", train.len(), test.len(), extractor.width());
    let train_x = map_rows(&train, extractor.width(), |x| extractor.encode(x))?;
    let test_x = map_rows(&test, extractor.width(), |x| extractor.encode(x))?;
    let owned = |d: &Dataset| d.ids().into_iter().map(String::from).collect::<Vec<_>>();
    let (train_ids, test_ids) = (owned(&train), owned(&test));
    let classifiers =
        eval::train_attribute_classifiers(train_x.view(), &train_ids, &table, &attrs, &SvmConfig::default())?;
    let report = evaluate_attributes(&classifiers, test_x.view(), &test_ids, &table)?;
    let test_refs = test.ids();
    println!("{:<24} {:>9} {:>9}", "attribute", "accuracy", "majority");
    for (name, acc) in &report.rows {
        let base = majority_baseline(&table.labels(&test_refs, name)?);
        println!("{name:<24} {:>9.4} {base:>9.4}", acc);
    }
    println!("{:<24} {:>9.4}", "average", report.average);
    out_dir(out)?;
    write_manifest(out.join("train_ids.txt"), &train)?;
    write_manifest(out.join("test_ids.txt"), &test)?;
    let named: Vec<NamedVector> = classifiers.iter().map(|c| c.to_named()).collect();
    write_named_vectors(out.join("classifiers.vwnv"), &named)?;
    write_text(&out.join("attribute_accuracy.csv"), &report.to_csv())
}

fn score(a: crate::ScoreArgs, out: &Path) -> anyhow::Result<()> {
    require_file(&a.score_net)?;
    let (net, cfg) = load_perceptual(&a.score_net)?;
    let ds = open_dataset(&a.data, cfg.image_size)?;
    let n = a.n.unwrap_or(ds.len());
    if n == 0 || n > ds.len() {
        return Err(usage(format!("--n must lie in 1..={}, got {n}", ds.len())));
    }
    let images = ds.subset(&ds.ids()[..n].iter().map(|s| s.to_string()).collect::<Vec<_>>())?.load_images()?;
    let s = inception_style_score(&ScoreClassifier::new(net), &images, n)?;
    println!("inception-style score over {n} images: {s:.6}");
    out_dir(out)?;
    write_text(&out.join("score.txt"), &format!("{s}\n"))
}

fn synth(a: crate::SynthArgs, out: &Path, seed: u64) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1".into()));
    }
    out_dir(out)?;
    let table = vaewgan::synth::write_face_folder(out, a.n, seed)?;
    println!("wrote {} faces and list_attr.txt ({} attributes) to {}", a.n, table.names.len(), out.display());
    Ok(())
}
