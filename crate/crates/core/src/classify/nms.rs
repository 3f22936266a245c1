use crate::refine::{point_iou, Proposal};

/// Greedy NMS over the concatenation of point-cloud and image proposals.
///
/// Point-cloud proposals are visited first, then image proposals; within a
/// source the order is descending point count, ties by ascending id. A
/// proposal is suppressed when its point IoU with any already kept proposal
/// is strictly above `iou_threshold`.
pub fn combine_and_nms(
    image: &[Proposal],
    point_cloud: &[Proposal],
    iou_threshold: f64,
) -> Vec<Proposal> {
    fn ordered(props: &[Proposal]) -> Vec<&Proposal> {
        let mut v: Vec<&Proposal> = props.iter().collect();
        v.sort_by_key(|p| (std::cmp::Reverse(p.num_points()), p.id));
        v
    }
    let mut kept: Vec<Proposal> = Vec::new();
    for p in ordered(point_cloud).into_iter().chain(ordered(image)) {
        if kept.iter().all(|k| point_iou(k, p) <= iou_threshold) {
            kept.push(p.clone());
        }
    }
    kept
}
