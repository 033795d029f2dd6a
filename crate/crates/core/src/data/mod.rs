//! Datasets, class-incremental task splits and client partitions.

mod dataset;
mod partition;
mod shard;

pub use dataset::{load_image_folder, synthetic_blobs_dataset, ChannelStats, ImageShape, LabeledDataset};
pub use partition::{
    dirichlet_partition, iid_partition, mean_client_label_entropy, partition, split_classes_into_tasks,
    PartitionConfig, PartitionMode, TaskSchedule,
};
pub use shard::ClientShard;
