//! Open-vocabulary classification of 3D proposals: source-prioritized NMS,
//! multi-view embedding aggregation, cosine similarity against text queries,
//! standardized-maximum-similarity filtering and label assignment.

mod axis;
mod features;
mod nms;
mod scoring;

pub use axis::{principal_axis, principal_axis_correction, AxisCorrection};
pub use features::{
    aggregate_feature, select_views, weighted_sum, AggregatedFeature, EmbeddingProvider,
    FrameVisibility, ScaleLevel, ScaleSpec, SkippedView, View, ViewRequest, ViewSelection,
};
pub use nms::combine_and_nms;
pub use scoring::{
    assign_labels, similarity, sms_filter, Prediction, Protocol, SimilarityMatrix, SmsStats,
};

/// Text prompt template applied to every class name.
pub const PROMPT_TEMPLATE: &str = "a blurry photo of {CLASS_NAME} in a room";

pub fn prompt_for(class_name: &str) -> String {
    PROMPT_TEMPLATE.replace("{CLASS_NAME}", class_name)
}

#[cfg(test)]
mod tests {
    #[test]
    fn prompt_substitution() {
        assert_eq!(super::prompt_for("chair"), "a blurry photo of chair in a room");
    }
}
