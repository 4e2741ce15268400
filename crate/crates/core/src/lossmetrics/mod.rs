//! Training losses and evaluation metrics.

mod losses;
mod metrics;

pub use losses::{
    combined_loss, cross_entropy_loss, deep_supervision_loss, default_ds_weights, dice_loss, LossConfig, Target,
};
pub use metrics::{composite_dice, dice_score, kidney_dice, tumor_dice, CaseDice, EvalReport};
