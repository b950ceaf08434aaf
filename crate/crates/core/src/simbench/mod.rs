//! Deterministic simulated VQA and question-generation backends.

mod server;
mod world;

pub use server::{handle_request, in_process_transport, serve, spawn_server};
pub use world::{
    coco_image_name, make_world, make_world_with, sim_dataset_name, Regime, SimError, SimInstance,
    SimParams, SimWorld, ANSWER_VOCAB, SIM_IMAGE_ROOT,
};
