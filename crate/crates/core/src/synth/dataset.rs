use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use vlamd_tensor::Tensor;

use super::lexicon::build_lexicons;
use super::render::{render_word, RenderSpec};
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainSet;
use crate::vocab::Vocab;

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const EVAL_MANIFEST: &str = "eval.tsv";
pub const METADATA: &str = "dataset.txt";

/// Sample streams of the eval split start here so both splits never share one.
const EVAL_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Iv,
    Oov,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::Iv => "IV",
            Tag::Oov => "OOV",
        })
    }
}

impl Tag {
    pub fn parse(s: &str) -> Option<Tag> {
        match s {
            "IV" => Some(Tag::Iv),
            "OOV" => Some(Tag::Oov),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub transcript: String,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    pub charset: String,
    pub seed: u64,
    pub image_hw: (usize, usize),
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        self.samples
            .iter()
            .map(|s| format!("{}\t{}\t{}\n", s.image_path, s.transcript, s.tag))
            .collect()
    }

    pub fn parse_samples(text: &str, path: &Path) -> Result<Vec<Sample>> {
        let bad = |line: usize, msg: &str| Error::Data {
            path: path.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        };
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(i + 1, "expected path<TAB>transcript<TAB>IV|OOV"));
            }
            let tag = Tag::parse(f[2]).ok_or_else(|| bad(i + 1, "tag must be IV or OOV"))?;
            out.push(Sample {
                image_path: f[0].to_string(),
                transcript: f[1].to_string(),
                tag,
            });
        }
        Ok(out)
    }
}

/// Manifest samples with image paths resolved against the manifest's directory.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub path: PathBuf,
    pub samples: Vec<Sample>,
}

impl LoadedManifest {
    pub fn load(path: &Path) -> Result<LoadedManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(LoadedManifest {
            path: path.to_path_buf(),
            samples: DatasetManifest::parse_samples(&text, path)?,
        })
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        let dir = self.path.parent().unwrap_or(Path::new("."));
        dir.join(&self.samples[i].image_path)
    }
}

/// Writes `image` (`[3, H, W]`, values in `[0, 1]`) as an 8-bit RGB PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Input(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (d[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Reads a PNG into `[3, H, W]` values in `[0, 1]`, checking its size.
pub fn load_png(path: &Path, hw: (usize, usize)) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != hw {
        return Err(Error::Data {
            path: path.to_path_buf(),
            msg: format!("image is {h}x{w}, model expects {}x{}", hw.0, hw.1),
        });
    }
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(data, &[3, h, w])?)
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The words of both splits, before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub eval: Vec<(String, Tag)>,
}

pub fn plan_splits(cfg: &DataConfig) -> Result<SplitPlan> {
    let vocab = Vocab::new(&cfg.charset)?;
    if cfg.n_eval_iv > cfg.n_iv_words {
        return Err(Error::Capacity(format!(
            "data.n_eval_iv={} exceeds data.n_iv_words={}",
            cfg.n_eval_iv, cfg.n_iv_words
        )));
    }
    let (iv, oov) = build_lexicons(
        vocab.chars(),
        cfg.n_iv_words,
        cfg.n_eval_oov,
        (cfg.min_word_len, cfg.max_word_len),
        cfg.seed,
    )?;
    let mut train = Vec::with_capacity(iv.len() * cfg.train_renders);
    for _ in 0..cfg.train_renders {
        train.extend(iv.iter().cloned());
    }
    let eval = iv[..cfg.n_eval_iv]
        .iter()
        .map(|w| (w.clone(), Tag::Iv))
        .chain(oov.into_iter().map(|w| (w, Tag::Oov)))
        .collect();
    Ok(SplitPlan { train, eval })
}

fn emit_split(dir: &Path, split: &str, words: &[(String, Tag)], spec: &RenderSpec, seed: u64, stream_base: u64) -> Result<Vec<Sample>> {
    let img_dir = dir.join(split);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    words
        .par_iter()
        .enumerate()
        .map(|(i, (word, tag))| {
            let mut rng = sample_rng(seed, stream_base + i as u64);
            let img = render_word(word, spec, &mut rng)?;
            let rel = format!("{split}/{i:05}.png");
            save_png(&img, &dir.join(&rel))?;
            Ok(Sample {
                image_path: rel,
                transcript: word.clone(),
                tag: *tag,
            })
        })
        .collect()
}

/// Renders both splits under `cfg.dir` and writes their manifests.
pub fn emit_dataset(cfg: &DataConfig) -> Result<[DatasetManifest; 2]> {
    let plan = plan_splits(cfg)?;
    let spec = RenderSpec::from_config(cfg);
    for w in plan.train.iter().chain(plan.eval.iter().map(|(w, _)| w)) {
        spec.check_layout(w)?;
    }
    let dir = Path::new(&cfg.dir);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train_words: Vec<(String, Tag)> = plan.train.iter().map(|w| (w.clone(), Tag::Iv)).collect();
    let manifests = [
        (TRAIN_MANIFEST, emit_split(dir, "train", &train_words, &spec, cfg.seed, 0)?),
        (EVAL_MANIFEST, emit_split(dir, "eval", &plan.eval, &spec, cfg.seed, EVAL_STREAM_BASE)?),
    ]
    .map(|(name, samples)| {
        (
            name,
            DatasetManifest {
                samples,
                charset: cfg.charset.clone(),
                seed: cfg.seed,
                image_hw: (cfg.height, cfg.width),
            },
        )
    });
    for (name, m) in &manifests {
        let p = dir.join(name);
        fs::write(&p, m.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    let meta = format!(
        "charset={}\nseed={}\nheight={}\nwidth={}\n",
        cfg.charset, cfg.seed, cfg.height, cfg.width
    );
    let p = dir.join(METADATA);
    fs::write(&p, meta).map_err(|e| Error::io(&p, e))?;
    let [(_, train), (_, eval)] = manifests;
    Ok([train, eval])
}

/// Loads every image of a manifest into memory for training.
pub fn load_train_set(manifest: &Path, vocab: &Vocab, hw: (usize, usize)) -> Result<TrainSet> {
    let m = LoadedManifest::load(manifest)?;
    let images = (0..m.samples.len())
        .into_par_iter()
        .map(|i| load_png(&m.image_path(i), hw).map(|t| t.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let targets = m
        .samples
        .iter()
        .map(|s| vocab.encode(&s.transcript))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainSet {
        images,
        targets,
        image_shape: [3, hw.0, hw.1],
    })
}
