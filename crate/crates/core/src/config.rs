//! Flat `key=value` configuration with dotted keys.
//!
//! Every key has a default and a one-line description in [`KEYS`]; unknown
//! keys are rejected. The same text form is embedded in checkpoints, so a
//! checkpoint always records the full configuration it was trained with.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! simple_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("cannot parse {s:?}: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
simple_value!(usize, u64, f64, bool);

impl ConfigValue for String {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vec<f64> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("cannot parse {p:?}: {e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: String,
    pub charset: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_iv_words: usize,
    pub n_eval_iv: usize,
    pub n_eval_oov: usize,
    pub train_renders: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub glyph_scale: f64,
    pub scale_jitter: f64,
    pub shift_jitter: f64,
    pub spacing: usize,
    pub noise_std: f64,
    pub bg_min: f64,
    pub bg_max: f64,
    pub fg_min: f64,
    pub fg_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: "data".into(),
            charset: "abcdefghijklmnopqrstuvwxyz0123456789".into(),
            seed: 7,
            height: 32,
            width: 100,
            n_iv_words: 512,
            n_eval_iv: 128,
            n_eval_oov: 128,
            train_renders: 1,
            min_word_len: 3,
            max_word_len: 7,
            glyph_scale: 2.0,
            scale_jitter: 0.1,
            shift_jitter: 2.0,
            spacing: 2,
            noise_std: 0.05,
            bg_min: 0.05,
            bg_max: 0.35,
            fg_min: 0.65,
            fg_max: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub c_model: usize,
    pub enc_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Longest decoded sequence, EOS included.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_model: 64,
            enc_layers: 2,
            heads: 4,
            ff_dim: 256,
            max_len: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VladConfig {
    pub hidden: usize,
    pub attn_dim: usize,
    pub fusion_dim: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
}

impl Default for VladConfig {
    fn default() -> Self {
        VladConfig {
            hidden: 64,
            attn_dim: 64,
            fusion_dim: 64,
            mlp_layers: 2,
            mlp_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransDConfig {
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub autoregressive: bool,
}

impl Default for TransDConfig {
    fn default() -> Self {
        TransDConfig {
            layers: 2,
            heads: 4,
            ff_dim: 256,
            mlp_layers: 2,
            mlp_hidden: 64,
            autoregressive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub seed: u64,
    pub out_dir: String,
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.4,
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 128,
            max_steps: 2000,
            milestones: vec![0.6, 0.8],
            decay: 0.1,
            seed: 1,
            out_dir: "runs/default".into(),
            ckpt_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub n_best: usize,
    pub alpha: f64,
    pub max_len: usize,
    pub length_norm: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 8,
            n_best: 5,
            alpha: 0.5,
            max_len: 12,
            length_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub vlad: VladConfig,
    pub transd: TransDConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

macro_rules! keys {
    ($($key:literal => $sec:ident . $field:ident, $doc:literal;)*) => {
        /// Every accepted key with its description, in canonical order.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl Config {
            fn set_raw(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$sec.$field = ConfigValue::parse(value).map_err(|m| Error::config(key, m))?;
                    })*
                    _ => return Err(Error::config(key, "unknown key")),
                }
                Ok(())
            }

            /// Current value of `key` in its text form.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$sec.$field.render()),)*
                    _ => None,
                }
            }
        }
    };
}

keys! {
    "data.dir" => data.dir, "dataset root (train/ and eval/ manifests live here)";
    "data.charset" => data.charset, "ordered recognizable characters";
    "data.seed" => data.seed, "lexicon and rendering seed";
    "data.height" => data.height, "image height in pixels (multiple of 4)";
    "data.width" => data.width, "image width in pixels (multiple of 4)";
    "data.n_iv_words" => data.n_iv_words, "training vocabulary size";
    "data.n_eval_iv" => data.n_eval_iv, "eval samples drawn from the training vocabulary";
    "data.n_eval_oov" => data.n_eval_oov, "eval samples from the held-out vocabulary";
    "data.train_renders" => data.train_renders, "renders per training word";
    "data.min_word_len" => data.min_word_len, "shortest generated word";
    "data.max_word_len" => data.max_word_len, "longest generated word";
    "data.glyph_scale" => data.glyph_scale, "pixels per 5x7 font cell";
    "data.scale_jitter" => data.scale_jitter, "relative per-character scale jitter";
    "data.shift_jitter" => data.shift_jitter, "per-character vertical shift jitter in pixels";
    "data.spacing" => data.spacing, "pixels between characters";
    "data.noise_std" => data.noise_std, "additive gaussian noise";
    "data.bg_min" => data.bg_min, "background intensity lower bound";
    "data.bg_max" => data.bg_max, "background intensity upper bound";
    "data.fg_min" => data.fg_min, "glyph intensity lower bound";
    "data.fg_max" => data.fg_max, "glyph intensity upper bound";
    "model.c_model" => model.c_model, "feature channels C";
    "model.enc_layers" => model.enc_layers, "transformer encoder layers";
    "model.heads" => model.heads, "encoder attention heads";
    "model.ff_dim" => model.ff_dim, "encoder feed-forward width";
    "model.max_len" => model.max_len, "longest decoded sequence including EOS";
    "vlad.hidden" => vlad.hidden, "LSTM hidden size";
    "vlad.attn_dim" => vlad.attn_dim, "additive attention width (VAA and PAA)";
    "vlad.fusion_dim" => vlad.fusion_dim, "gated fusion output width";
    "vlad.mlp_layers" => vlad.mlp_layers, "output MLP depth (1 or 2)";
    "vlad.mlp_hidden" => vlad.mlp_hidden, "output MLP hidden width";
    "transd.layers" => transd.layers, "transformer decoder layers";
    "transd.heads" => transd.heads, "decoder attention heads";
    "transd.ff_dim" => transd.ff_dim, "decoder feed-forward width";
    "transd.mlp_layers" => transd.mlp_layers, "output MLP depth (1 or 2)";
    "transd.mlp_hidden" => transd.mlp_hidden, "output MLP hidden width";
    "transd.autoregressive" => transd.autoregressive, "feed previous-token embeddings (false: queries only)";
    "train.lambda" => train.lambda, "mutual KL weight";
    "train.lr" => train.lr, "base learning rate";
    "train.weight_decay" => train.weight_decay, "decoupled weight decay";
    "train.batch_size" => train.batch_size, "samples per step";
    "train.max_steps" => train.max_steps, "optimizer steps";
    "train.milestones" => train.milestones, "lr decay points as fractions of max_steps";
    "train.decay" => train.decay, "lr factor applied at each milestone";
    "train.seed" => train.seed, "initialization and batch-order seed";
    "train.out_dir" => train.out_dir, "checkpoint and log directory";
    "train.ckpt_every" => train.ckpt_every, "periodic checkpoint interval (0: final only)";
    "decode.beam_width" => decode.beam_width, "co-beam width";
    "decode.n_best" => decode.n_best, "candidates kept per direction";
    "decode.alpha" => decode.alpha, "VLAD weight in the joint score (TransD gets 1-alpha)";
    "decode.max_len" => decode.max_len, "decode length limit including EOS";
    "decode.length_norm" => decode.length_norm, "rank by per-token score";
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_raw(key, value)
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected key=value", n + 1)))?;
            cfg.set_raw(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    /// Canonical text form: every key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k).expect("listed key"));
        }
        out
    }

    /// Commented listing of all defaults.
    pub fn documented_defaults() -> String {
        let cfg = Config::default();
        let mut out = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{k}={}", cfg.get(k).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(k, m));
        let m = &self.model;
        if m.c_model == 0 || !m.c_model.is_multiple_of(2) {
            return bad("model.c_model", "must be a positive even number");
        }
        if m.heads == 0 || !m.c_model.is_multiple_of(m.heads) {
            return bad("model.heads", "must divide model.c_model");
        }
        if self.transd.heads == 0 || !m.c_model.is_multiple_of(self.transd.heads) {
            return bad("transd.heads", "must divide model.c_model");
        }
        if m.max_len == 0 {
            return bad("model.max_len", "must be positive");
        }
        if !self.data.height.is_multiple_of(4) || !self.data.width.is_multiple_of(4) || self.data.height == 0 || self.data.width == 0 {
            return bad("data.height", "height and width must be positive multiples of 4");
        }
        if !(1..=2).contains(&self.vlad.mlp_layers) {
            return bad("vlad.mlp_layers", "must be 1 or 2");
        }
        if !(1..=2).contains(&self.transd.mlp_layers) {
            return bad("transd.mlp_layers", "must be 1 or 2");
        }
        if self.data.min_word_len == 0 || self.data.min_word_len > self.data.max_word_len {
            return bad("data.min_word_len", "need 1 <= min_word_len <= max_word_len");
        }
        if self.data.max_word_len + 1 > m.max_len {
            return bad("data.max_word_len", "words plus EOS must fit model.max_len");
        }
        if self.train.lambda < 0.0 {
            return bad("train.lambda", "must be >= 0");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "must be positive");
        }
        if self.decode.n_best == 0 || self.decode.n_best > self.decode.beam_width {
            return bad("decode.n_best", "need 1 <= n_best <= beam_width");
        }
        if !(0.0..=1.0).contains(&self.decode.alpha) {
            return bad("decode.alpha", "must be in [0, 1]");
        }
        if self.decode.max_len == 0 || self.decode.max_len > m.max_len {
            return bad("decode.max_len", "must be in 1..=model.max_len");
        }
        Ok(())
    }
}
