//! Loading, windowing and normalization of graph signal data.

mod dataset;
mod graph;
mod signals;
mod synth;
mod time;

pub use dataset::{
    denormalize, normalize, split_and_window, split_lengths, window_count, Batch, DatasetSplits, ForecastDataset,
    Masked, NormStats, Split,
};
pub use graph::{load_graph, parse_graph_csv, SpatialGraph};
pub use signals::{
    decode_binary, encode_binary, load_signals, parse_signals_csv, write_signals_csv, GraphSignalMatrix,
};
pub use synth::{gen_synthetic, gen_synthetic_with, SynthConfig};
pub use time::{time_features, TimeAxis};
