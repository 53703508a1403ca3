//! Dataset snapshot derivation from reviewed observations.
//!
//! Verdict rules: `confirm` exports the on-device detections as model
//! annotations, `correct` exports the expert's replacement boxes, and
//! `refute` exports the image with no annotations as a negative example.

use chrono::{DateTime, Utc};
use fieldforge_core::manifest::ProjectManifest;
use fieldforge_core::protocol::{
    AnnotationSource, DatasetSnapshot, LabelCount, SnapshotAnnotation, SnapshotImage,
    SnapshotStats, StoredObservation, Verdict, VerdictCounts,
};

/// Builds a snapshot over the reviewed subset of `observations`, which must
/// already be in listing order. Returns `None` when nothing is reviewed.
pub fn build_snapshot<'a>(
    snapshot_id: u64,
    manifest: &ProjectManifest,
    created_at: DateTime<Utc>,
    observations: impl IntoIterator<Item = &'a StoredObservation>,
) -> Option<DatasetSnapshot> {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut per_verdict = VerdictCounts::default();
    let mut per_label = vec![0u64; manifest.labels.len()];

    for obs in observations {
        let Some(review) = &obs.review else { continue };
        images.push(SnapshotImage {
            content_digest: obs.content_digest.clone(),
            media: obs.media_path.clone(),
        });
        let (dets, source) = match review.verdict {
            Verdict::Confirm => {
                per_verdict.confirm += 1;
                (&obs.detections[..], AnnotationSource::Model)
            }
            Verdict::Correct => {
                per_verdict.correct += 1;
                (&review.corrected_detections[..], AnnotationSource::Expert)
            }
            Verdict::Refute => {
                per_verdict.refute += 1;
                (&[][..], AnnotationSource::Model)
            }
        };
        for det in dets {
            if let Some(c) = per_label.get_mut(det.label_id as usize) {
                *c += 1;
            }
            annotations.push(SnapshotAnnotation {
                content_digest: obs.content_digest.clone(),
                detection: *det,
                source,
            });
        }
    }
    if images.is_empty() {
        return None;
    }

    let per_label = manifest
        .labels
        .iter()
        .zip(per_label)
        .map(|(l, count)| LabelCount {
            label_id: l.id,
            label_name: l.name.clone(),
            count,
        })
        .collect();
    Some(DatasetSnapshot {
        snapshot_id,
        project_id: manifest.project_id.clone(),
        created_at,
        images,
        annotations,
        stats: SnapshotStats {
            per_label,
            per_verdict,
        },
    })
}
