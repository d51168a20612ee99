//! Command-line surface. Global flags mirror the shared `RunConfig` keys;
//! per-command flags mirror the keys that command reads. Flags always win
//! over the config file.

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "riskforge",
    version,
    about = "Learned traffic scenario synthesis across risk regimes",
    propagate_version = true
)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Directory artifacts are written to (default: ./out).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Root seed; every random choice in a run derives from it.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Worker thread count (this build runs single-threaded; values above
    /// one are accepted and noted on stderr).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Let a configured LLM endpoint pick attack weights (needs
    /// RISKFORGE_LLM_URL; falls back to the rule engine on any failure).
    #[arg(long, global = true)]
    pub llm: bool,

    /// Use the tighter long-tail cut when banding scenarios.
    #[arg(long = "strict-longtail", global = true)]
    pub strict_longtail: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a corpus from recorded CSV exports or the synthetic generator.
    Ingest {
        /// Recorded trajectory CSV (requires --meta).
        #[arg(long, value_name = "PATH")]
        tracks: Option<PathBuf>,
        /// Recording metadata CSV that pairs with --tracks.
        #[arg(long, value_name = "PATH")]
        meta: Option<PathBuf>,
        /// Synthetic scene count (recorded ingestion ignores this).
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Fit the motion prior on a corpus; writes model.ckpt.
    Train {
        /// Corpus file produced by `ingest`.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
    },
    /// Sample scenarios from the trained prior.
    Generate {
        /// Model checkpoint from `train`.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Corpus supplying the conditioning scenes.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        /// Number of scenarios to emit.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Adversarially optimize latents against conditioning scenes.
    Attack {
        /// Model checkpoint from `train`.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Corpus supplying the scenes under attack.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        /// Number of scenarios to emit.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Band scenario documents (or config-supplied indicator triples).
    Classify {
        /// Directory of scenario documents.
        #[arg(long, value_name = "DIR")]
        scenarios: Option<PathBuf>,
    },
    /// Score a generated batch against a reference batch.
    Evaluate {
        /// Directory of generated scenario documents.
        #[arg(long, value_name = "DIR")]
        generated: Option<PathBuf>,
        /// Reference documents directory, or a corpus file.
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
    },
    /// Export plot-ready CSVs from a directory of scenario documents.
    Report {
        /// Directory of scenario documents.
        #[arg(long, value_name = "DIR")]
        scenarios: Option<PathBuf>,
    },
    /// Closed-loop generation toward a target risk-band mix.
    Distribute {
        /// Model checkpoint from `train`.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Corpus supplying the conditioning scenes.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        /// Total number of scenarios to emit (minimum 10).
        #[arg(long, value_name = "N")]
        budget: Option<usize>,
    },
}

impl Command {
    /// Fold the per-command flags into the config; flags win.
    pub fn apply(&self, cfg: &mut crate::config::RunConfig) {
        match self {
            Command::Ingest { tracks, meta, count } => {
                if tracks.is_some() {
                    cfg.tracks = tracks.clone();
                }
                if meta.is_some() {
                    cfg.recording_meta = meta.clone();
                }
                if count.is_some() {
                    cfg.count = *count;
                }
            }
            Command::Train { corpus } => {
                if corpus.is_some() {
                    cfg.corpus = corpus.clone();
                }
            }
            Command::Generate { model, corpus, count }
            | Command::Attack { model, corpus, count } => {
                if model.is_some() {
                    cfg.checkpoint = model.clone();
                }
                if corpus.is_some() {
                    cfg.corpus = corpus.clone();
                }
                if count.is_some() {
                    cfg.count = *count;
                }
            }
            Command::Classify { scenarios } | Command::Report { scenarios } => {
                if scenarios.is_some() {
                    cfg.scenarios = scenarios.clone();
                }
            }
            Command::Evaluate { generated, reference } => {
                if generated.is_some() {
                    cfg.generated = generated.clone();
                }
                if reference.is_some() {
                    cfg.reference = reference.clone();
                }
            }
            Command::Distribute { model, corpus, budget } => {
                if model.is_some() {
                    cfg.checkpoint = model.clone();
                }
                if corpus.is_some() {
                    cfg.corpus = corpus.clone();
                }
                if budget.is_some() {
                    cfg.budget = *budget;
                }
            }
        }
    }
}
