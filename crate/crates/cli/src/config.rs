//! Layered `key = value` configuration: built-in defaults, then an optional
//! file, then command-line overrides. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::Context;
use wap_core::codebook::{DistillConfig, EtaMode};
use wap_core::finetune::{FinetuneConfig, Freeze};
use wap_core::sap::PoolMode;
use wap_core::ssl::{LambdaShape, SslConfig};
use wap_core::synth::SynthSpec;
use wap_core::wap::{Aggregation, LayerWeighting, WapConfig};

/// Bad keys or values; reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn fmt_clip(c: Option<f64>) -> String {
    c.map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn defaults() -> Vec<(&'static str, String)> {
    let synth = SynthSpec::default();
    let wap = WapConfig::default();
    let ssl = SslConfig::default();
    let ft = FinetuneConfig::default();
    let distill = DistillConfig::default();
    vec![
        ("seed", "0".into()),
        ("threads", "1".into()),
        ("synth.classes", synth.num_classes.to_string()),
        ("synth.per_class", synth.utterances_per_class[0].to_string()),
        ("synth.dim", synth.dim.to_string()),
        ("synth.min_len", synth.min_len.to_string()),
        ("synth.max_len", synth.max_len.to_string()),
        ("synth.separation", synth.separation.to_string()),
        ("synth.noise", synth.noise.to_string()),
        ("synth.sessions", synth.sessions.to_string()),
        ("model.dim", wap.model_dim.to_string()),
        ("model.heads", wap.heads.to_string()),
        ("model.ffn_dim", wap.ffn_dim.to_string()),
        ("model.blocks", wap.blocks.to_string()),
        ("model.max_len", wap.max_len.to_string()),
        ("model.weighting", "softmax".into()),
        ("model.aggregation", "post-pool".into()),
        ("ssl.mask_ratio", ssl.mask_ratio.to_string()),
        ("ssl.ema", ssl.ema.to_string()),
        ("ssl.lambda_start", ssl.lambda_start.to_string()),
        ("ssl.lambda_end", ssl.lambda_end.to_string()),
        ("ssl.lambda_shape", "linear".into()),
        ("ssl.batch_size", ssl.batch_size.to_string()),
        ("ssl.epochs", ssl.epochs.to_string()),
        ("ssl.lr", ssl.lr.to_string()),
        ("ssl.min_lr", ssl.min_lr.to_string()),
        ("ssl.clip", fmt_clip(ssl.clip)),
        ("ssl.codebook_size", ssl.codebook_size.to_string()),
        ("ssl.warmup_batches", ssl.warmup_batches.to_string()),
        ("distill.temperature", distill.temperature.to_string()),
        ("distill.eta", "count".into()),
        ("distill.fixed_eta", "0.05".into()),
        ("distill.dead_threshold", distill.dead_threshold.to_string()),
        ("finetune.classes", "auto".into()),
        ("finetune.batch_size", ft.batch_size.to_string()),
        ("finetune.epochs", ft.epochs.to_string()),
        ("finetune.lr", ft.lr.to_string()),
        ("finetune.min_lr", ft.min_lr.to_string()),
        ("finetune.clip", fmt_clip(ft.clip)),
        ("finetune.sap_heads", ft.sap_heads.to_string()),
        ("finetune.pool", "corrected".into()),
        ("finetune.augment", ft.augment.to_string()),
        ("finetune.augment_ratio", ft.augment_ratio.to_string()),
        ("finetune.freeze", "none".into()),
        ("finetune.fold", "first".into()),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> anyhow::Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(usage(format!("unknown configuration key `{key}`"))),
        }
    }

    /// Applies a `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> anyhow::Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| usage(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `key=value` as given on the command line.
    pub fn apply_assignment(&mut self, s: &str) -> anyhow::Result<()> {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("expected key=value, got `{s}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("registered key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<T> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| usage(format!("invalid value `{raw}` for `{key}`")))
    }

    fn clip(&self, key: &str) -> anyhow::Result<Option<f64>> {
        match self.raw(key) {
            "none" | "off" | "0" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> anyhow::Result<T> {
        let raw = self.raw(key);
        options.iter().find(|(name, _)| *name == raw).map(|&(_, v)| v).ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            usage(format!("`{key}` must be one of {}, got `{raw}`", names.join(", ")))
        })
    }

    /// One `key = value` line per key, sorted.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        self.get("seed")
    }

    pub fn threads(&self) -> anyhow::Result<usize> {
        let t: usize = self.get("threads")?;
        if t == 0 {
            return Err(usage("threads must be >= 1"));
        }
        Ok(t)
    }

    pub fn synth(&self) -> anyhow::Result<SynthSpec> {
        let classes: usize = self.get("synth.classes")?;
        let spec = SynthSpec {
            num_classes: classes,
            utterances_per_class: vec![self.get("synth.per_class")?; classes],
            dim: self.get("synth.dim")?,
            min_len: self.get("synth.min_len")?,
            max_len: self.get("synth.max_len")?,
            separation: self.get("synth.separation")?,
            noise: self.get("synth.noise")?,
            sessions: self.get("synth.sessions")?,
            seed: self.seed()?,
        };
        spec.validate().map_err(|e| usage(e.to_string()))?;
        Ok(spec)
    }

    /// Architecture; `input_dim` is filled in from the data.
    pub fn model(&self) -> anyhow::Result<WapConfig> {
        Ok(WapConfig {
            input_dim: 1,
            model_dim: self.get("model.dim")?,
            heads: self.get("model.heads")?,
            ffn_dim: self.get("model.ffn_dim")?,
            blocks: self.get("model.blocks")?,
            max_len: self.get("model.max_len")?,
            weighting: self
                .choice("model.weighting", &[("softmax", LayerWeighting::Softmax), ("raw", LayerWeighting::Raw)])?,
            aggregation: self.choice(
                "model.aggregation",
                &[("post-pool", Aggregation::PostPool), ("pooled", Aggregation::Pooled)],
            )?,
        })
    }

    pub fn distill(&self) -> anyhow::Result<DistillConfig> {
        let eta = match self.raw("distill.eta") {
            "count" => EtaMode::Count,
            "fixed" => EtaMode::Fixed(self.get("distill.fixed_eta")?),
            other => return Err(usage(format!("`distill.eta` must be count or fixed, got `{other}`"))),
        };
        Ok(DistillConfig {
            temperature: self.get("distill.temperature")?,
            eta,
            dead_threshold: self.get("distill.dead_threshold")?,
        })
    }

    pub fn ssl(&self) -> anyhow::Result<SslConfig> {
        let config = SslConfig {
            mask_ratio: self.get("ssl.mask_ratio")?,
            ema: self.get("ssl.ema")?,
            lambda_start: self.get("ssl.lambda_start")?,
            lambda_end: self.get("ssl.lambda_end")?,
            lambda_shape: self
                .choice("ssl.lambda_shape", &[("linear", LambdaShape::Linear), ("cosine", LambdaShape::Cosine)])?,
            batch_size: self.get("ssl.batch_size")?,
            epochs: self.get("ssl.epochs")?,
            lr: self.get("ssl.lr")?,
            min_lr: self.get("ssl.min_lr")?,
            clip: self.clip("ssl.clip")?,
            codebook_size: self.get("ssl.codebook_size")?,
            distill: self.distill()?,
            warmup_batches: self.get("ssl.warmup_batches")?,
            seed: self.seed()?,
        };
        config.validate().map_err(|e| usage(e.to_string()))?;
        Ok(config)
    }

    /// `classes` is the manifest's class count, used when the key is `auto`.
    pub fn finetune(&self, classes: usize) -> anyhow::Result<FinetuneConfig> {
        let num_classes = match self.raw("finetune.classes") {
            "auto" => classes,
            _ => {
                let n: usize = self.get("finetune.classes")?;
                if n != classes {
                    anyhow::bail!("finetune.classes = {n} but the manifest declares {classes} classes");
                }
                n
            }
        };
        let config = FinetuneConfig {
            num_classes,
            batch_size: self.get("finetune.batch_size")?,
            epochs: self.get("finetune.epochs")?,
            lr: self.get("finetune.lr")?,
            min_lr: self.get("finetune.min_lr")?,
            clip: self.clip("finetune.clip")?,
            sap_heads: self.get("finetune.sap_heads")?,
            pool_mode: self
                .choice("finetune.pool", &[("corrected", PoolMode::Corrected), ("literal", PoolMode::Literal)])?,
            augment: self.get("finetune.augment")?,
            augment_ratio: self.get("finetune.augment_ratio")?,
            freeze: self.choice(
                "finetune.freeze",
                &[("none", Freeze::None), ("head", Freeze::Adapter), ("head-only", Freeze::Adapter)],
            )?,
            seed: self.seed()?,
        };
        config.validate().map_err(|e| usage(e.to_string()))?;
        Ok(config)
    }

    /// Validation session for a single fine-tune run; `first` picks the
    /// lowest session id.
    pub fn fold_session(&self, sessions: &[u32]) -> anyhow::Result<u32> {
        match self.raw("finetune.fold") {
            "first" => sessions.first().copied().context("manifest has no sessions"),
            _ => {
                let s: u32 = self.get("finetune.fold")?;
                if !sessions.contains(&s) {
                    anyhow::bail!("session {s} is not in the manifest");
                }
                Ok(s)
            }
        }
    }

    /// Checks every typed section so bad values fail before any work.
    pub fn validate_all(&self) -> anyhow::Result<()> {
        self.seed()?;
        self.threads()?;
        self.synth()?;
        self.model()?;
        self.ssl()?;
        let classes = match self.raw("finetune.classes") {
            "auto" => 2,
            _ => self.get("finetune.classes")?,
        };
        self.finetune(classes)?;
        match self.raw("finetune.fold") {
            "first" => {}
            _ => {
                self.get::<u32>("finetune.fold")?;
            }
        }
        Ok(())
    }
}
