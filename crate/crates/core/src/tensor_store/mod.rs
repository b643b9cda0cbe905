//! File formats exchanged between pipeline stages: `.fms` feature stacks and
//! COCO-style annotation JSON.

mod coco;
mod fms;

pub use coco::{
    attach_results, decode_annotations, encode_annotations, read_annotations, read_document, read_results,
    write_annotations, AnnotatedImage, CocoAnnotation, CocoCategory, CocoDocument, CocoImage, DetectionResult,
    ImageRef, BOUNDS_TOLERANCE,
};
pub use fms::{
    decode_feature_stack, decode_header, encode_feature_stack, read_feature_stack, read_header,
    write_feature_stack, FeatureMap, FeatureStack, LevelHeader, FMS_MAGIC,
};
