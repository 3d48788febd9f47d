//! Correctly-recognized-word rates over IV and OOV buckets.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::DecodeConfig;
use crate::decode::recognize;
use crate::error::{Error, Result};
use crate::model::Vlamd;
use crate::synth::{load_png, LoadedManifest, Tag};

/// Worker-count environment variable for evaluation.
pub const WORKERS_ENV: &str = "VLAMD_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub path: String,
    pub gt: String,
    pub pred: String,
    pub correct: bool,
    pub tag: Tag,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Bucket {
    pub n: usize,
    pub correct: usize,
}

impl Bucket {
    pub fn crw(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub total: Bucket,
    pub iv: Bucket,
    pub oov: Bucket,
    /// In manifest order.
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<SampleRecord>) -> EvalReport {
        let mut iv = Bucket::default();
        let mut oov = Bucket::default();
        for r in &records {
            let b = match r.tag {
                Tag::Iv => &mut iv,
                Tag::Oov => &mut oov,
            };
            b.n += 1;
            b.correct += r.correct as usize;
        }
        EvalReport {
            total: Bucket {
                n: iv.n + oov.n,
                correct: iv.correct + oov.correct,
            },
            iv,
            oov,
            records,
        }
    }

    pub fn crw_total(&self) -> f64 {
        self.total.crw()
    }

    pub fn crw_iv(&self) -> f64 {
        self.iv.crw()
    }

    pub fn crw_oov(&self) -> f64 {
        self.oov.crw()
    }

    pub fn summary(&self) -> String {
        let line = |name: &str, b: &Bucket| format!("{name}\t{}/{}\t{:.2}%", b.correct, b.n, 100.0 * b.crw());
        [line("total", &self.total), line("IV", &self.iv), line("OOV", &self.oov)].join("\n")
    }

    /// `path, gt, pred, correct, tag` per sample.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("path\tgt\tpred\tcorrect\ttag\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.path, r.gt, r.pred, r.correct as u8, r.tag);
        }
        s
    }
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Input(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Recognizes every sample of `manifest` with exact string matching.
pub fn evaluate(model: &Vlamd, manifest: &LoadedManifest, cfg: &DecodeConfig, workers: usize) -> Result<EvalReport> {
    let hw = (model.config.data.height, model.config.data.width);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Input(e.to_string()))?;
    let records = pool.install(|| {
        (0..manifest.samples.len())
            .into_par_iter()
            .map(|i| {
                let s = &manifest.samples[i];
                let image = load_png(&manifest.image_path(i), hw)?;
                let pred = recognize(model, &image, cfg)?;
                Ok(SampleRecord {
                    path: s.image_path.clone(),
                    gt: s.transcript.clone(),
                    correct: pred == s.transcript,
                    pred,
                    tag: s.tag,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(EvalReport::from_records(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(gt: &str, pred: &str, tag: Tag) -> SampleRecord {
        SampleRecord {
            path: String::new(),
            gt: gt.into(),
            pred: pred.into(),
            correct: gt == pred,
            tag,
        }
    }

    #[test]
    fn hand_scored_fixture() {
        // 6 IV (4 right), 4 OOV (1 right)
        let records = vec![
            rec("cat", "cat", Tag::Iv),
            rec("dog", "dog", Tag::Iv),
            rec("bird", "bird", Tag::Iv),
            rec("fish", "fsh", Tag::Iv),
            rec("cow", "cow", Tag::Iv),
            rec("pig", "Pig", Tag::Iv),
            rec("yak", "yak", Tag::Oov),
            rec("emu", "emo", Tag::Oov),
            rec("gnu", "", Tag::Oov),
            rec("owl", "owls", Tag::Oov),
        ];
        let r = EvalReport::from_records(records);
        assert_eq!((r.iv.correct, r.iv.n), (4, 6));
        assert_eq!((r.oov.correct, r.oov.n), (1, 4));
        assert_eq!((r.total.correct, r.total.n), (5, 10));
        assert_eq!(r.crw_total(), 0.5);
        assert!((r.crw_total() * 10.0 - (r.crw_iv() * 6.0 + r.crw_oov() * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn all_correct_is_full_marks() {
        let r = EvalReport::from_records(vec![rec("a1", "a1", Tag::Iv), rec("b2", "b2", Tag::Oov)]);
        assert_eq!((r.crw_total(), r.crw_iv(), r.crw_oov()), (1.0, 1.0, 1.0));
    }
}
