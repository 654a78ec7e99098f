"""Cascaded diversity-guided traffic simulation at desk scale."""
from .conditioning import PoolerParams, SceneEncoding, StepConditionSet, attention_pool, build_step_conditions, toy_scene_encode
from .diffusion import DenoiserSpec, LinearConditionalDenoiser, NoiseSchedule, forward_noise, reverse_step_guided, sample_motions_guided
from .dpp import GuidanceSchedule, build_kernel, dpp_log_prob, dpp_log_prob_grad, guidance_term
from .flow import FlowBatch, FlowSamplerConfig, LinearVelocityField, VelocityFieldSpec, WorldCondition, fit_linear_velocity, motion_aware_rf_loss, sample_flow_guided
from .occupancy import GridConfig, LatentGrid, OccupancyGrid, SlabLatentEncoder, encode_latent, transition_map, voxelize, warp_occupancy, weight_map
from .pipeline import ModelBundle, RolloutSet, TrainConfig, cascaded_inference, closed_loop_simulate, train_toy
from .scenario import Scenario, synth_scenario
from .traffic import AgentState, LaneMap, ViolationRates, quality_score, rmm_aggregate, unicycle_rollout, violation_rates

__version__ = "0.1.0"
