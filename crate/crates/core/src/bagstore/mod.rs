//! Bags of instance features: the binary file format, dataset manifests and
//! splits, and the synthetic benchmark generator.

mod format;
mod manifest;
mod synthetic;

pub use format::{
    parse_header, read_bag, read_bag_header, write_bag, FeatureBag, BAG_HEADER_LEN, BAG_MAGIC,
    BAG_VERSION,
};
pub use manifest::{split_dataset, DatasetManifest, ManifestEntry, Split, SplitRatios};
pub use synthetic::{gen_synthetic, generate_bags, GeneratedBag, SyntheticDataset, SyntheticSpec};
