//! Volume files, manifests, preprocessing, batching and phantoms.

pub mod batch;
pub mod manifest;
pub mod phantom;
pub mod preprocess;
pub mod volf;

pub use batch::{batch_plan, epoch_order, make_batches, Batch, Loader};
pub use manifest::{Manifest, ManifestRow, Split, VolumeRecord};
pub use phantom::{generate_phantoms, generate_volume, PhantomSpec};
pub use preprocess::{center_window, normalize, resize_slices, Geometry, Preprocessor};
pub use volf::{read_volume, write_volume};
