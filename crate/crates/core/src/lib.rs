//! Cooperative-perception dynamic map.
//!
//! The pipeline runs from a kinematic traffic simulator through AV and
//! roadside perception, an in-process publish/subscribe bus and a cloud
//! freshness queue, to linguistic scenes (`LinguisticScene`). On top of the
//! scenes sit the ego-centric relation graphs, a template-driven QA
//! generator, a deterministic spatial query toolbox, the chain-of-prompt
//! orchestrator and the evaluation harness.
//!
//! Conventions: headings are degrees clockwise from north (+y); lane index 0
//! is the rightmost lane; a vehicle's `s` is its front bumper.

pub mod bus;
pub mod perception;
pub mod road;
pub mod scene_graph;
pub mod traffic;
pub mod vocab;
pub mod qa;
pub mod toolbox;
pub mod cop;
pub mod llm;
pub mod eval;
pub mod pipeline;
