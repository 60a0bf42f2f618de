//! Skeleton graphs and the graph-convolution feature stream.

pub mod adjacency;
pub mod backbone;
pub mod conv;
pub mod norm;
pub mod topology;

pub use adjacency::{normalize_adjacency, AdjacencyStack, Partition};
pub use backbone::{backbone_forward, backbone_on_tape, init_backbone, BackboneConfig, Mode};
pub use conv::{spatial_graph_conv, temporal_conv};
pub use topology::{GraphTopology, LayoutKind};
