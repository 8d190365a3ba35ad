#![allow(dead_code)]

pub mod reference;

use egdp_core::auction::EnvConfig;
use egdp_core::data::{build_dataset, generate, DataConfig, Dataset};
use egdp_core::diffusion::ScheduleConfig;
use egdp_core::egcd::EgcdConfig;
use egdp_core::inverse::InvDynConfig;
use egdp_core::train::{ModelConfig, TrainConfig};
use egdp_core::vae::VaeConfig;

pub fn small_env(steps: usize) -> EnvConfig {
    EnvConfig {
        num_agents: 4,
        num_steps: steps,
        impressions_per_step: 30,
        budgets: vec![40.0, 1e9],
        ..EnvConfig::default()
    }
}

/// `seeds * (random + noisy + 1)` trajectories.
pub fn small_data(seeds: usize, random: usize, noisy: usize) -> DataConfig {
    DataConfig {
        train_seeds: seeds,
        random_policies: random,
        noisy_expert_policies: noisy,
        ..DataConfig::default()
    }
}

pub fn dataset(env: &EnvConfig, data: &DataConfig) -> Dataset {
    let (experts, behavior) = generate(env, data).unwrap();
    build_dataset(&behavior, &experts).unwrap()
}

pub fn small_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        lr: 3e-3,
        checkpoint_every: steps.max(1),
        schedule: ScheduleConfig {
            steps: 8,
            ..ScheduleConfig::default()
        },
        model: ModelConfig {
            egcd: EgcdConfig {
                model_dim: 16,
                heads: 2,
                ffn_mult: 2,
                depth: 1,
                use_cross_attention: true,
            },
            vae: VaeConfig { latent_dim: 4 },
            inverse: InvDynConfig { history: 2, hidden: 16 },
        },
        ..TrainConfig::default()
    }
}
