//! Distillation losses, optimizers and the teacher/student training loops.

mod cka;
mod loss;
mod optim;
mod pearson;
mod student;
mod teacher;

pub use cka::{cka, cka_var, cka_with, gram, hsic, CkaDenominator};
pub use loss::{
    attention_loss, attention_loss_var, kl_attention, total_loss, AttentionLossKind, DistillPair, LossWeights,
};
pub use optim::{clip_global_norm, collect_gradients, Adam, Sgd};
pub use pearson::{
    inter_loss, inter_loss_var, intra_loss, intra_loss_var, pearson_distance, rowwise_pearson_var, PearsonDistance,
    PEARSON_EPS,
};
pub use student::{
    distill_loss, distill_step, sequence_objective, teacher_targets, DistillConfig, DistillStep, Distiller,
    LossComponents, LossVars, TeacherTargets,
};
pub use teacher::{sequence_for_step, supervised_loss, Augment, TeacherConfig, TeacherStep, TeacherTrainer};
