//! Loading the datasets a run configuration points at.

use std::path::Path;

use crate::config::TrainConfig;
use crate::data::{
    read_frame_file, read_sequences_file, read_vocab_file, DataKind, Dataset, Normalization, Vocab,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub valid: Option<Dataset>,
    pub vocab: Option<Vocab>,
    pub normalization: Option<Normalization>,
    pub end_id: Option<u32>,
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("`{key}` is not set")))
}

fn missing(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("file not found: {}", path.display())))
    }
}

/// Vocabulary from `vocab_path`; fills in `vocab_size` and checks both
/// delimiters are present.
pub fn load_vocab(config: &mut TrainConfig) -> Result<(Vocab, u32)> {
    let path = required(&config.vocab_path, "vocab_path")?;
    missing(path)?;
    let vocab = read_vocab_file(path)?;
    if config.vocab_size != 0 && config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "vocab_size = {} but {} holds {} tokens",
            config.vocab_size,
            path.display(),
            vocab.len()
        )));
    }
    config.vocab_size = vocab.len();
    for t in [&config.start_token, &config.end_token] {
        if vocab.id(t).is_none() {
            return Err(Error::Data(format!("delimiter {t:?} missing from {}", path.display())));
        }
    }
    let end = vocab.id(&config.end_token).unwrap();
    Ok((vocab, end))
}

/// Reads one split. Frames are normalized with `norm` when given.
pub fn load_split(config: &TrainConfig, path: &Path, norm: Option<Normalization>) -> Result<Dataset> {
    missing(path)?;
    let mut ds = match config.data_kind {
        DataKind::Frames => {
            let ds = read_frame_file(path)?;
            if config.frame_width != 0 && ds.width() != config.frame_width {
                return Err(Error::Data(format!(
                    "{} has frame width {} but the model expects {}",
                    path.display(),
                    ds.width(),
                    config.frame_width
                )));
            }
            ds
        }
        DataKind::Tokens => {
            let v = (config.vocab_size > 0).then_some(config.vocab_size);
            Dataset::ids(DataKind::Tokens, read_sequences_file(path, v)?)
        }
        DataKind::Binary => Dataset::ids(DataKind::Binary, read_sequences_file(path, Some(2))?),
    };
    ds.truncate(config.max_seq_len);
    if let Some(n) = norm {
        n.apply(&mut ds);
    }
    Ok(ds)
}

/// Loads train and (optional) validation splits. Normalization constants
/// are fitted on the training split and reused for validation.
pub fn prepare(config: &mut TrainConfig) -> Result<Prepared> {
    let (vocab, end_id) = match config.data_kind {
        DataKind::Tokens => {
            let (v, e) = load_vocab(config)?;
            (Some(v), Some(e))
        }
        _ => (None, None),
    };
    let train_path = required(&config.train_path, "train_path")?.to_path_buf();
    let mut train = load_split(config, &train_path, None)?;
    if train.is_empty() {
        return Err(Error::Data(format!("{} holds no sequences", train_path.display())));
    }
    let normalization = if config.data_kind == DataKind::Frames {
        config.frame_width = train.width();
        let n = Normalization::fit(&train)?;
        n.apply(&mut train);
        Some(n)
    } else {
        None
    };
    let valid = match config.valid_path.clone() {
        Some(p) => Some(load_split(config, &p, normalization)?),
        None => None,
    };
    Ok(Prepared {
        train,
        valid,
        vocab,
        normalization,
        end_id,
    })
}
