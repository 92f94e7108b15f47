//! Low-level generative image attacker.

mod baseline;
mod generator;
mod loss;
mod perturb;

pub use baseline::iterative_attack_baseline;
pub use generator::{command_planes, images_to_tensor, Generator, GeneratorSpec};
pub use loss::{
    attack_loss, attack_loss_grad, attack_loss_graph, detector_terms, img_update, AttackLoss, AttackWeights,
    DetectorTerms, PROB_EPS,
};
pub use perturb::{apply_perturbation, discretize, AnchorIndex};
