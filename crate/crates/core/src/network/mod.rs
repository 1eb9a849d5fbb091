//! The dual-query network: static and dynamic Gaussian queries refined over
//! coarse-to-fine stages, with hand-written backward passes.

mod attention;
mod layers;
mod model;
mod sampling;
mod weights;

pub use attention::{das_attention, Attention, AttentionCache, AttentionMode};
pub use layers::{
    positional_encoding, positional_encoding_backward, sigmoid, silu, ChildHead, LayerNorm, Linear, Mlp2,
    ParamEntry, ParamLayout, PE_DIM, PE_FREQS,
};
pub use model::{
    backward_pipeline, decode_properties, expand_children, forward_pipeline, init_queries, initial_state,
    refine_stage, refine_stage_backward, refine_stage_traced, DecodedProps, LayerConfig, Network, PipelineOutput,
    QueryState, SceneBounds, StageGrad, StageOutput, StageTrace, StateGrad, BOX_PRIOR, INIT_SPREAD, OFFSET_RANGE,
    SCALE_MAX, SCALE_MIN,
};
pub use sampling::{sample_point_features, FeaturePlane, FeaturePlaneSet, MotionMode, PointSample, Sampler};
pub use weights::{load_params, save_params, WEIGHTS_BLOB, WEIGHTS_MANIFEST, WEIGHTS_VERSION};
