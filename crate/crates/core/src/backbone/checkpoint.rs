//! BERT checkpoints in the common directory layout: `config.json`,
//! `vocab.txt`, `model.safetensors` (dense weights stored `out × in`).

use std::path::Path;

use safetensors::SafeTensors;
use serde_json::Value;

use super::params::ParamStore;
use super::tokenizer::{Tokenizer, WordPieceTokenizer};
use super::transformer::{names, tensor_layout, Transformer, TransformerConfig};
use super::BackboneError;
use crate::archive::{view_to_matrix, Archive};

/// External names for an internal tensor, most common first, and whether
/// the stored matrix is transposed relative to ours.
fn external_names(internal: &str) -> (Vec<String>, bool) {
    let with_prefix = |s: String| vec![format!("bert.{s}"), s];
    let ln = |base: &str, leaf: &str| {
        let legacy = if leaf == "weight" { "gamma" } else { "beta" };
        let mut v = with_prefix(format!("{base}.{leaf}"));
        v.extend(with_prefix(format!("{base}.{legacy}")));
        v
    };
    let leaf = internal.rsplit('.').next().unwrap_or("");
    match internal {
        names::WORD | names::POSITION | names::TOKEN_TYPE => (with_prefix(format!("{internal}.weight")), false),
        names::EMB_LN_G | names::EMB_LN_B => (ln("embeddings.LayerNorm", leaf), false),
        names::MLM_DENSE_W | names::MLM_DENSE_B => {
            (vec![format!("cls.predictions.transform.dense.{leaf}")], leaf == "weight")
        }
        names::MLM_LN_G | names::MLM_LN_B => {
            let legacy = if leaf == "weight" { "gamma" } else { "beta" };
            (
                vec![
                    format!("cls.predictions.transform.LayerNorm.{leaf}"),
                    format!("cls.predictions.transform.LayerNorm.{legacy}"),
                ],
                false,
            )
        }
        names::MLM_BIAS => (
            vec!["cls.predictions.bias".into(), "cls.predictions.decoder.bias".into()],
            false,
        ),
        names::POOLER_W | names::POOLER_B => (with_prefix(format!("pooler.dense.{leaf}")), leaf == "weight"),
        _ => {
            let rest = internal.strip_prefix("encoder.layer.").expect("layer tensor");
            let (idx, suffix) = rest.split_once('.').expect("layer suffix");
            let base = format!("encoder.layer.{idx}");
            let dense = |m: &str| (with_prefix(format!("{base}.{m}.{leaf}")), leaf == "weight");
            match suffix.rsplit_once('.').map(|(s, _)| s).unwrap_or("") {
                "attention.query" => dense("attention.self.query"),
                "attention.key" => dense("attention.self.key"),
                "attention.value" => dense("attention.self.value"),
                "attention.output" => dense("attention.output.dense"),
                "attention.layer_norm" => (ln(&format!("{base}.attention.output.LayerNorm"), leaf), false),
                "intermediate" => dense("intermediate.dense"),
                "output" => dense("output.dense"),
                "output.layer_norm" => (ln(&format!("{base}.output.LayerNorm"), leaf), false),
                other => unreachable!("unknown layer tensor {other}"),
            }
        }
    }
}

fn load_err(path: &Path, message: impl Into<String>) -> BackboneError {
    BackboneError::Load {
        spec: path.display().to_string(),
        message: message.into(),
    }
}

fn read_config(dir: &Path) -> Result<(TransformerConfig, bool), BackboneError> {
    let path = dir.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| load_err(&path, e.to_string()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| load_err(&path, e.to_string()))?;
    let model_type = v.get("model_type").and_then(Value::as_str).unwrap_or("bert");
    if model_type != "bert" {
        return Err(BackboneError::Capability(format!(
            "checkpoint model_type `{model_type}` is not supported; only BERT-layout encoders load"
        )));
    }
    if let Some(act) = v.get("hidden_act").and_then(Value::as_str) {
        if act != "gelu" {
            return Err(BackboneError::Capability(format!("activation `{act}` is not supported")));
        }
    }
    let int = |k: &str| {
        v.get(k)
            .and_then(Value::as_u64)
            .map(|x| x as usize)
            .ok_or_else(|| load_err(&path, format!("config field `{k}` missing or not an integer")))
    };
    let cfg = TransformerConfig {
        vocab_size: int("vocab_size")?,
        hidden_size: int("hidden_size")?,
        num_layers: int("num_hidden_layers")?,
        num_heads: int("num_attention_heads")?,
        intermediate_size: int("intermediate_size")?,
        max_position: int("max_position_embeddings")?,
        type_vocab_size: int("type_vocab_size").unwrap_or(2),
        layer_norm_eps: v.get("layer_norm_eps").and_then(Value::as_f64).unwrap_or(1e-12),
        causal: false,
    };
    cfg.validate()?;
    let lowercase = ["tokenizer_config.json"]
        .iter()
        .filter_map(|f| std::fs::read_to_string(dir.join(f)).ok())
        .filter_map(|t| serde_json::from_str::<Value>(&t).ok())
        .find_map(|t| t.get("do_lower_case").and_then(Value::as_bool))
        .unwrap_or(true);
    Ok((cfg, lowercase))
}

/// Loads a BERT checkpoint directory into a transformer and tokenizer.
pub fn load_bert_dir(dir: &Path) -> Result<(Transformer, WordPieceTokenizer), BackboneError> {
    if !dir.is_dir() {
        return Err(load_err(dir, "not a directory"));
    }
    let (cfg, lowercase) = read_config(dir)?;
    let tokenizer = WordPieceTokenizer::from_file(&dir.join("vocab.txt"), lowercase, cfg.max_position)?;
    let weights = dir.join("model.safetensors");
    let bytes = std::fs::read(&weights).map_err(|e| load_err(&weights, e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| load_err(&weights, e.to_string()))?;
    let available: std::collections::HashSet<String> = st.names().into_iter().map(str::to_string).collect();

    let mut store = ParamStore::default();
    let layout = tensor_layout(&cfg, true, true);
    let optional = |n: &str| n.starts_with("mlm.") || n.starts_with("pooler.");
    for (name, _, decay) in &layout {
        let (candidates, transposed) = external_names(name);
        let Some(found) = candidates.iter().find(|c| available.contains(*c)) else {
            if optional(name) {
                continue;
            }
            return Err(BackboneError::Capability(format!(
                "checkpoint lacks tensor for {name} (tried {})",
                candidates.join(", ")
            )));
        };
        let view = st.tensor(found).map_err(|e| load_err(&weights, e.to_string()))?;
        let m = view_to_matrix(found, &view).map_err(|e| BackboneError::Checkpoint(e.to_string()))?;
        let m = if transposed { m.t().to_owned() } else { m };
        store.insert(name, m, *decay);
    }
    if tokenizer.vocab_size() != cfg.vocab_size {
        return Err(BackboneError::Capability(format!(
            "vocab.txt has {} entries, config declares {}",
            tokenizer.vocab_size(),
            cfg.vocab_size
        )));
    }
    Ok((Transformer::from_store(cfg, store)?, tokenizer))
}

/// Writes a transformer as a BERT checkpoint directory (`f64` tensors).
pub fn export_bert_dir(net: &Transformer, vocab: &[String], dir: &Path) -> Result<(), BackboneError> {
    let io = |p: &Path, e: std::io::Error| load_err(p, e.to_string());
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let c = &net.config;
    let config = serde_json::json!({
        "model_type": "bert",
        "hidden_act": "gelu",
        "vocab_size": c.vocab_size,
        "hidden_size": c.hidden_size,
        "num_hidden_layers": c.num_layers,
        "num_attention_heads": c.num_heads,
        "intermediate_size": c.intermediate_size,
        "max_position_embeddings": c.max_position,
        "type_vocab_size": c.type_vocab_size,
        "layer_norm_eps": c.layer_norm_eps,
    });
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&config).expect("json"))
        .map_err(|e| io(&cfg_path, e))?;
    let vocab_path = dir.join("vocab.txt");
    std::fs::write(&vocab_path, vocab.join("\n") + "\n").map_err(|e| io(&vocab_path, e))?;
    let mut archive = Archive::default();
    for (name, m) in net.params.iter() {
        let (candidates, transposed) = external_names(name);
        let m = if transposed { m.t().to_owned() } else { m.clone() };
        archive.tensors.insert(candidates[0].clone(), m);
    }
    archive
        .save(&dir.join("model.safetensors"))
        .map_err(|e| BackboneError::Checkpoint(e.to_string()))
}
