//! File formats: BTSR tensors, PNM images and masks, heatmaps with
//! normalization sidecars, parameter checkpoints, and dataset directories.

pub mod btsr;
pub mod checkpoint;
pub mod dataset;
pub mod pnm;

pub use btsr::{read_btsr, write_btsr};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use dataset::{read_dataset, read_split, write_dataset, write_split, Dataset};
pub use pnm::{read_image, read_mask_pgm, write_heatmap_pgm, write_image, write_mask_pgm};
