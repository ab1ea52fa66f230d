//! File formats and the wire protocol.

pub mod nifti;
pub mod stream;

pub use nifti::{
    read_atlas, read_labels, read_volume, write_atlas, write_image, write_labels, write_volume, Image,
    NiftiHeader,
};
pub use stream::{decode_record, encode_record, read_record, write_record, RecordReader};
