use super::RunConfig;
use crate::boxes::{decode_box, generate_anchors, Box3};
use crate::data::{preprocess, tile_test_patches, PatchSample, Volume};
use crate::error::Result;
use crate::eval::{stitch_candidates, Candidate};
use crate::nn::{anchor_predictions, Network};

/// Anchors of one patch with `p ≥ cutoff`, decoded to volume coordinates.
pub fn detect_patch(network: &Network, config: &RunConfig, patch: &PatchSample) -> Result<Vec<(Box3, f64)>> {
    let probs = network.forward(&patch.to_tensor())?;
    let s = config.network.output_stride;
    let shape = probs.shape();
    let anchors = generate_anchors([shape[2], shape[3], shape[4]], s, &config.anchor_sizes);
    let per_cell = config.anchor_sizes.len();
    let o = patch.origin.map(|v| v as f64);
    Ok(anchor_predictions(&probs, 0, config.cutoff)
        .into_iter()
        .map(|p| {
            let cell = (p.cell[0] * shape[3] + p.cell[1]) * shape[4] + p.cell[2];
            let b = decode_box(&anchors[cell * per_cell + p.slot].bbox, &p.deltas);
            (Box3 { cx: b.cx + o[0], cy: b.cy + o[1], cz: b.cz + o[2], r: b.r }, p.p)
        })
        .collect())
}

/// Preprocess, tile, run every patch, then stitch with one global NMS.
pub fn detect(network: &Network, config: &RunConfig, volume: &Volume) -> Result<Vec<Candidate>> {
    let normalized = preprocess(volume);
    let mut detections = Vec::new();
    for patch in tile_test_patches(&normalized, config.eval_patch, config.overlap)? {
        detections.extend(detect_patch(network, config, &patch)?);
    }
    Ok(stitch_candidates(&volume.scan_id, &detections, volume.dims(), config.nms_thresh, config.top_k))
}
