//! Run configuration: built-in defaults, overridden by a flat `key = value`
//! file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use seq2set::assignment::Scheme;
use seq2set::nnmodel::parse_kernel_sizes;

/// Every accepted key with its default; an empty default means unset.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("data", ""),
    ("val_frac", "0.1"),
    ("epochs", "20"),
    ("batch", "32"),
    ("lr", "0.001"),
    ("scheme", "all"),
    ("lambda_null", "0.2"),
    ("lambda_ot", "8"),
    ("bottleneck", "none"),
    ("hidden", "512"),
    ("kernel_sizes", "3,7,15,30"),
    ("stride", "3"),
    ("max_len", "1000"),
    ("gen_len", "auto"),
    ("embed", ""),
    ("embed_dim", "300"),
    ("label_embed_dim", "auto"),
    ("vocab_size", "500000"),
    ("dropout", "0.2"),
    ("seed", "1"),
    ("deterministic", "false"),
    ("workers", "0"),
    ("out", "run"),
    ("format", "both"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeChoice {
    Fixed(Scheme),
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Kv,
    Both,
}

impl Format {
    pub fn parse(s: &str) -> Result<Format, String> {
        match s {
            "text" => Ok(Format::Text),
            "kv" => Ok(Format::Kv),
            "both" => Ok(Format::Both),
            other => Err(format!("format: expected text, kv or both, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub val_frac: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub scheme: SchemeChoice,
    pub lambda_null: f64,
    pub lambda_ot: f64,
    pub bottleneck: Option<usize>,
    pub hidden: usize,
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    pub max_len: usize,
    /// `None` means the longest label set in the training corpus.
    pub gen_len: Option<usize>,
    pub embed: Option<PathBuf>,
    pub embed_dim: usize,
    /// `None` means the word dimension, with lexical label initialisation.
    pub label_embed_dim: Option<usize>,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub workers: usize,
    pub out: PathBuf,
    pub format: Format,
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
        let key = k.trim().replace('-', "_");
        if !DEFAULTS.iter().any(|(d, _)| *d == key) {
            return Err(format!("config line {}: unknown key `{}`", i + 1, k.trim()));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Layers defaults, the optional file and the flags, then parses the result.
pub fn resolve(file: Option<&Path>, flags: &[(&str, Option<String>)]) -> Result<RunConfig, String> {
    let mut merged: BTreeMap<String, String> = DEFAULTS
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        merged.extend(parse_config_file(&text)?);
    }
    for (k, v) in flags {
        if !merged.contains_key(*k) {
            return Err(format!("unknown key `{k}`"));
        }
        if let Some(v) = v {
            merged.insert(k.to_string(), v.clone());
        }
    }
    from_map(&merged)
}

fn from_map(m: &BTreeMap<String, String>) -> Result<RunConfig, String> {
    let get = |k: &str| m[k].as_str();
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, String> {
        v.parse().map_err(|_| format!("{k}: cannot parse `{v}`"))
    }
    let path = |k: &str| (!get(k).is_empty()).then(|| PathBuf::from(get(k)));
    let optional = |k: &str, none: &str| -> Result<Option<usize>, String> {
        match get(k) {
            v if v == none => Ok(None),
            v => num(k, v).map(Some),
        }
    };
    let scheme = match get("scheme") {
        "auto" => SchemeChoice::Auto,
        v => SchemeChoice::Fixed(v.parse().map_err(|e| format!("scheme: {e}"))?),
    };
    let deterministic = match get("deterministic") {
        "true" | "1" | "yes" => true,
        "false" | "0" | "no" => false,
        v => return Err(format!("deterministic: expected true or false, got `{v}`")),
    };
    Ok(RunConfig {
        data: path("data"),
        val_frac: num("val_frac", get("val_frac"))?,
        epochs: num("epochs", get("epochs"))?,
        batch: num("batch", get("batch"))?,
        lr: num("lr", get("lr"))?,
        scheme,
        lambda_null: num("lambda_null", get("lambda_null"))?,
        lambda_ot: num("lambda_ot", get("lambda_ot"))?,
        bottleneck: optional("bottleneck", "none")?,
        hidden: num("hidden", get("hidden"))?,
        kernel_sizes: parse_kernel_sizes(get("kernel_sizes")).map_err(|e| e.to_string())?,
        stride: num("stride", get("stride"))?,
        max_len: num("max_len", get("max_len"))?,
        gen_len: optional("gen_len", "auto")?,
        embed: path("embed"),
        embed_dim: num("embed_dim", get("embed_dim"))?,
        label_embed_dim: optional("label_embed_dim", "auto")?,
        vocab_size: num("vocab_size", get("vocab_size"))?,
        dropout: num("dropout", get("dropout"))?,
        seed: num("seed", get("seed"))?,
        deterministic,
        workers: num("workers", get("workers"))?,
        out: PathBuf::from(get("out")),
        format: Format::parse(get("format"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_layer_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "# comment\nepochs = 7\nbatch = 4\nlambda-ot = 1\n").unwrap();
        let c = resolve(Some(&file), &[("epochs", Some("3".into())), ("lr", None)]).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch, 4);
        assert_eq!(c.lambda_ot, 1.0);
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.gen_len, None);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(parse_config_file("nonsense = 1")
            .unwrap_err()
            .contains("unknown key"));
        assert!(parse_config_file("epochs 3").is_err());
        assert!(resolve(None, &[("epochs", Some("x".into()))]).is_err());
        assert!(resolve(None, &[("scheme", Some("best".into()))]).is_err());
    }
}
