//! Argument surface for the `dewarp` binary. Parsing lives here so tests
//! can drive the exact CLI paths without spawning a process; the binary's
//! main only parses, dispatches, and maps errors to exit codes.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{
    cmd_demo_reconstruct, cmd_eval, cmd_finetune, cmd_gen_data, cmd_pretrain, cmd_rectify,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dewarp", version, about = "Document unwarping pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command that needs a resolved run configuration.
/// Precedence: preset, then config file, then explicit flags.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Named preset: "paper" or "desk"
    #[arg(long, default_value = "desk")]
    pub preset: String,

    /// key=value config file applied over the preset
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Run seed override
    #[arg(long)]
    pub seed: Option<u64>,

    /// Masking ratio override for pretraining
    #[arg(long)]
    pub mask_ratio: Option<f64>,

    /// Keep encoder weights fixed during fine-tuning
    #[arg(long)]
    pub freeze_encoder: bool,

    /// Fine-tune without a pretrained encoder
    #[arg(long)]
    pub from_scratch: bool,

    /// Corpus directory (overrides the config's data_dir)
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(r) = self.mask_ratio {
            cfg.mask_ratio = r;
        }
        if self.freeze_encoder {
            cfg.freeze_encoder = true;
        }
        if self.from_scratch {
            cfg.from_scratch = true;
        }
        if let Some(d) = &self.data {
            cfg.data_dir = d.to_string_lossy().into_owned();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic distorted-document corpus
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of samples to write
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Re-verify every tenth written sample against the round-trip
        /// certificate
        #[arg(long)]
        spot_check: bool,
        /// Output corpus directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: masked-patch reconstruction pretraining
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to resume from
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: fine-tune the flow-field rectifier
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stage-1 checkpoint providing the encoder (omit with
        /// --from-scratch)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
    },
    /// Unwarp a corpus directory or a single image
    Rectify {
        /// Stage-2 checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory or image file
        input: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rectified outputs against their ground-truth corpus
    Eval {
        /// Directory of .rect.ppm / .flow.flo predictions
        pred_dir: PathBuf,
        /// Ground-truth corpus directory
        #[arg(long)]
        data: PathBuf,
        /// Report file to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Write masked/reconstruction/target triptychs from a stage-1 model
    DemoReconstruct {
        /// Stage-1 checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to render
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

/// Dispatches a parsed CLI to the command layer. Returns the summary text
/// the binary prints on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { cfg, count, spot_check, out } => {
            let cfg = cfg.resolve()?;
            let r = cmd_gen_data(&cfg, count, &out, spot_check)?;
            Ok(format!(
                "wrote {} samples to {} ({} spot-checked)",
                r.manifest.rows.len(),
                out.display(),
                r.spot_checked.len()
            ))
        }
        Command::Pretrain { cfg, checkpoint, out } => {
            let cfg = cfg.resolve()?;
            let corpus = cfg_corpus(&cfg)?;
            let loss = cmd_pretrain(&cfg, &corpus, &out, checkpoint.as_deref(), None)?;
            Ok(format!("pretrained {} epochs, final loss {loss:.6}", cfg.epochs))
        }
        Command::Finetune { cfg, checkpoint, out } => {
            let cfg = cfg.resolve()?;
            let corpus = cfg_corpus(&cfg)?;
            let loss = cmd_finetune(&cfg, &corpus, checkpoint.as_deref(), &out)?;
            Ok(format!("fine-tuned {} epochs, final loss {loss:.6}", cfg.epochs))
        }
        Command::Rectify { checkpoint, input, out } => {
            let r = cmd_rectify(&checkpoint, &input, &out)?;
            let mut msg = format!("rectified {} inputs into {}", r.written.len(), out.display());
            for (stem, err) in &r.failures {
                msg.push_str(&format!("\nfailed {stem}: {err}"));
            }
            if r.written.is_empty() && !r.failures.is_empty() {
                return Err(Error::Validation(format!(
                    "every input failed; first: {}: {}",
                    r.failures[0].0, r.failures[0].1
                )));
            }
            Ok(msg)
        }
        Command::Eval { pred_dir, data, out } => {
            let r = cmd_eval(&pred_dir, &data, &out)?;
            Ok(format!(
                "scored {} samples ({} missing): ms_ssim {:.4}, flow epe {:.4}, cer {:.4}",
                r.rows.len(),
                r.missing.len(),
                r.mean_ms_ssim(),
                r.mean_ld_epe(),
                r.mean_cer()
            ))
        }
        Command::DemoReconstruct { checkpoint, data, out, count } => {
            let written = cmd_demo_reconstruct(&checkpoint, &data, &out, count)?;
            Ok(format!("wrote {} triptychs to {}", written.len(), out.display()))
        }
    }
}

fn cfg_corpus(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.data_dir.is_empty() {
        return Err(Error::Validation(
            "no corpus directory: pass --data or set data_dir in the config".into(),
        ));
    }
    Ok(PathBuf::from(&cfg.data_dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_land_in_the_config() {
        let cli = parse(&[
            "dewarp",
            "pretrain",
            "--preset",
            "desk",
            "--seed",
            "99",
            "--mask-ratio",
            "0.5",
            "--data",
            "/tmp/corpus",
            "--out",
            "/tmp/x.ckpt",
        ]);
        let Command::Pretrain { cfg, .. } = cli.command else { panic!() };
        let cfg = cfg.resolve().unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.mask_ratio, 0.5);
        assert_eq!(cfg.data_dir, "/tmp/corpus");
        assert_eq!((cfg.h, cfg.w, cfg.patch, cfg.dim), (96, 96, 8, 128));
    }

    #[test]
    fn paper_preset_and_mode_flags() {
        let cli = parse(&[
            "dewarp",
            "finetune",
            "--preset",
            "paper",
            "--freeze-encoder",
            "--data",
            "d",
            "--checkpoint",
            "c.ckpt",
            "--out",
            "o.ckpt",
        ]);
        let Command::Finetune { cfg, checkpoint, .. } = cli.command else { panic!() };
        assert_eq!(checkpoint.unwrap(), PathBuf::from("c.ckpt"));
        let cfg = cfg.resolve().unwrap();
        assert!(cfg.freeze_encoder);
        assert_eq!((cfg.h, cfg.w, cfg.patch, cfg.dim, cfg.k1, cfg.k2), (288, 288, 16, 512, 6, 4));
    }

    #[test]
    fn unknown_preset_is_a_validation_error() {
        let cli = parse(&["dewarp", "gen-data", "--preset", "huge", "--out", "x"]);
        let Command::GenData { cfg, .. } = cli.command else { panic!() };
        assert!(matches!(cfg.resolve(), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_corpus_dir_is_reported() {
        let cli = parse(&["dewarp", "pretrain", "--out", "x.ckpt"]);
        assert!(matches!(run(cli), Err(Error::Validation(msg)) if msg.contains("--data")));
    }

    #[test]
    fn config_file_is_applied_between_preset_and_flags() {
        let dir = std::env::temp_dir().join("dewarp-cli-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("run.cfg");
        std::fs::write(&file, "seed=5\nepochs=3\n").unwrap();
        let cli = parse(&[
            "dewarp",
            "gen-data",
            "--config",
            file.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            "x",
        ]);
        let Command::GenData { cfg, .. } = cli.command else { panic!() };
        let cfg = cfg.resolve().unwrap();
        assert_eq!(cfg.epochs, 3, "file applies");
        assert_eq!(cfg.seed, 7, "flag wins over file");
    }
}
