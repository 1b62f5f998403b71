//! Pipeline configuration file. Flags given on the command line win over
//! values here; relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use forumlm::bpe::DEFAULT_VOCAB_SIZE;
use forumlm::decode::{DecodeConfig, DEFAULT_BANNED_WORDS};
use forumlm::format::DEFAULT_RECORD_BUDGET;
use forumlm::lm::{DEFAULT_ALPHA, DEFAULT_ORDER};
use forumlm::study::StudyConfig;
use serde::Deserialize;

pub const CONFIG_ENV: &str = "FORUMLM_CONFIG";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Overrides the seed of every stochastic stage.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub format: FormatSection,
    pub bpe: BpeSection,
    pub lm: LmSection,
    pub generation: GenerationSection,
    pub decode: DecodeConfig,
    pub study: StudyConfig,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training threads (JSON lines).
    pub threads: Option<PathBuf>,
    /// Held-out threads the study draws from.
    pub pool: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub study: Option<PathBuf>,
    pub provenance: Option<PathBuf>,
    pub answers: Option<PathBuf>,
    pub plot_data: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatSection {
    pub budget: usize,
}

impl Default for FormatSection {
    fn default() -> Self {
        FormatSection {
            budget: DEFAULT_RECORD_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeSection {
    pub vocab_size: usize,
}

impl Default for BpeSection {
    fn default() -> Self {
        BpeSection {
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub order: usize,
    pub alpha: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            order: DEFAULT_ORDER,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub banned_words: Vec<String>,
    /// One word per line; added to `banned_words`.
    pub banned_words_file: Option<PathBuf>,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            banned_words: DEFAULT_BANNED_WORDS.iter().map(|w| w.to_string()).collect(),
            banned_words_file: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            addr: "127.0.0.1:8080".into(),
            ui_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn parse(src: &str, base: &Path) -> Result<Self, toml::de::Error> {
        let mut cfg: PipelineConfig = toml::from_str(src)?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.threads,
            &mut p.pool,
            &mut p.vocab,
            &mut p.records,
            &mut p.model,
            &mut p.study,
            &mut p.provenance,
            &mut p.answers,
            &mut p.plot_data,
            &mut self.generation.banned_words_file,
            &mut self.serve.ui_dir,
        ] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_paths() {
        let cfg = PipelineConfig::parse(
            "seed = 7\n[paths]\nvocab = \"v.bpe\"\n[decode]\nbeam_size = 2\n[study]\nnum_threads = 24\n",
            Path::new("/work"),
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.paths.vocab.as_deref(), Some(Path::new("/work/v.bpe")));
        assert_eq!(cfg.decode.beam_size, 2);
        assert_eq!(cfg.decode.top_k, 50);
        assert_eq!(cfg.study.num_threads, 24);
        assert_eq!(cfg.format.budget, 400);
        assert_eq!(cfg.generation.banned_words, vec!["mod".to_string()]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::parse("[format]\nbudgte = 3\n", Path::new(".")).is_err());
    }
}
