pub mod corpus;
pub mod digest;
pub mod gateway;
pub mod ingestion;
pub mod metrics;
pub mod pipeline;
pub mod stages;
pub mod testkit;
pub mod video_prep;
