//! Ablation harness: quantizer family/size crossed with masking strategy.
//!
//! Each grid cell trains its own tokenizer and transformer at a reduced
//! budget, then evaluates generation quality, sSR, and restoration accuracy
//! on a shared evaluation set. Cell failures are recorded and the run
//! continues. Cells are independent and may run on worker threads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::protocol::{restoration_accuracy, run_protocol, Conditioning, SsrProtocol};
use crate::eval::report::EvalReport;
use crate::map::SemanticMap;
use crate::maskformer::{train_maskformer, Completer, MaskformerConfig};
use crate::quantizers::{
    train_bitvae, train_vq, BitVaeConfig, MapTokenizer, TrainConfig, VqConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantizerChoice {
    BitVae { bits: usize },
    Vq { codes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskingStrategy {
    Random,
    ObjectAware,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub quantizer: QuantizerChoice,
    pub masking: MaskingStrategy,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let q = match self.quantizer {
            QuantizerChoice::BitVae { bits } => format!("bitvae-b{bits}"),
            QuantizerChoice::Vq { codes } => format!("vqvae-n{codes}"),
        };
        let m = match self.masking {
            MaskingStrategy::Random => "random",
            MaskingStrategy::ObjectAware => "object",
        };
        format!("{q}-{m}")
    }
}

/// The default desk-scale grid: bit tokenizers at 5/6/7 bits and VQ
/// baselines at matched vocabulary sizes, each under both masking
/// strategies.
pub fn default_grid() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for quantizer in [
        QuantizerChoice::BitVae { bits: 5 },
        QuantizerChoice::BitVae { bits: 6 },
        QuantizerChoice::BitVae { bits: 7 },
        QuantizerChoice::Vq { codes: 32 },
        QuantizerChoice::Vq { codes: 64 },
        QuantizerChoice::Vq { codes: 128 },
    ] {
        for masking in [MaskingStrategy::Random, MaskingStrategy::ObjectAware] {
            cells.push(AblationCell { quantizer, masking });
        }
    }
    cells
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationBudget {
    pub vae_epochs: usize,
    pub mt_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub trials: usize,
    pub min_overlap: usize,
}

impl Default for AblationBudget {
    fn default() -> Self {
        AblationBudget {
            vae_epochs: 6,
            mt_epochs: 8,
            batch: 8,
            lr: 2e-3,
            seed: 0,
            val_fraction: 0.1,
            trials: 200,
            min_overlap: 1,
        }
    }
}

/// One finished or failed grid cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum CellOutcome {
    Done { label: String, report: EvalReport },
    Failed { label: String, error: String },
}

impl CellOutcome {
    pub fn label(&self) -> &str {
        match self {
            CellOutcome::Done { label, .. } => label,
            CellOutcome::Failed { label, .. } => label,
        }
    }
}

fn run_cell(
    cell: &AblationCell,
    train_maps: &[SemanticMap],
    eval_maps: &[SemanticMap],
    vae_template: &BitVaeConfig,
    vq_template: &VqConfig,
    mf_template: &MaskformerConfig,
    budget: &AblationBudget,
    fingerprint: &str,
) -> Result<EvalReport> {
    let tcfg = TrainConfig {
        epochs: budget.vae_epochs,
        batch: budget.batch,
        lr: budget.lr,
        seed: budget.seed,
        val_fraction: budget.val_fraction,
    };
    let tokenizer: Box<dyn MapTokenizer> = match cell.quantizer {
        QuantizerChoice::BitVae { bits } => {
            let cfg = BitVaeConfig {
                bits,
                ..vae_template.clone()
            };
            Box::new(train_bitvae(train_maps, &cfg, &tcfg)?.0)
        }
        QuantizerChoice::Vq { codes } => {
            let cfg = VqConfig {
                codes,
                ..vq_template.clone()
            };
            Box::new(train_vq(train_maps, &cfg, &tcfg)?.0)
        }
    };

    let mf_cfg = MaskformerConfig {
        bits: tokenizer.bits(),
        p_obj: match cell.masking {
            MaskingStrategy::Random => 0.0,
            MaskingStrategy::ObjectAware => mf_template.p_obj,
        },
        ..mf_template.clone()
    };
    let mt_tcfg = TrainConfig {
        epochs: budget.mt_epochs,
        ..tcfg
    };
    let (model, _) = train_maskformer(train_maps, tokenizer.as_ref(), &mf_cfg, &mt_tcfg)?;
    let completer = Completer::new(tokenizer.as_ref(), &model);

    let protocol = SsrProtocol {
        trials: budget.trials,
        min_overlap: budget.min_overlap,
        seed: budget.seed,
        conditioning: Conditioning::CorrectTarget,
        ..SsrProtocol::default()
    };
    let outcome = run_protocol(&completer, eval_maps, &protocol)?;
    let restoration = restoration_accuracy(&completer, eval_maps, 0.5, budget.seed)?;
    EvalReport::from_outcome(
        &outcome,
        restoration,
        budget.min_overlap,
        fingerprint,
        budget.seed,
    )
}

/// Run every cell, up to `threads` at a time. The output preserves cell
/// order; failures become [`CellOutcome::Failed`] entries.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    cells: &[AblationCell],
    train_maps: &[SemanticMap],
    eval_maps: &[SemanticMap],
    vae_template: &BitVaeConfig,
    vq_template: &VqConfig,
    mf_template: &MaskformerConfig,
    budget: &AblationBudget,
    threads: usize,
) -> Vec<CellOutcome> {
    let results: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let workers = threads.max(1).min(cells.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let cell = &cells[i];
                let label = cell.label();
                let fingerprint = format!("ablation/{label}");
                let outcome = match run_cell(
                    cell,
                    train_maps,
                    eval_maps,
                    vae_template,
                    vq_template,
                    mf_template,
                    budget,
                    &fingerprint,
                ) {
                    Ok(report) => CellOutcome::Done { label, report },
                    Err(e) => CellOutcome::Failed {
                        label,
                        error: e.to_string(),
                    },
                };
                results.lock().expect("no poisoned lock")[i] = Some(outcome);
            });
        }
    });

    results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|o| o.expect("every cell visited"))
        .collect()
}
