"""Small hand-built videos shared by several test modules."""

import numpy as np

from stket.data import FrameAnnotation, ObjectProposal, RelationshipInstance, VideoAnnotation


def pair_video(predicate_sets, predicate_names=("hold", "drink", "look"), class_names=("person", "cup"),
               video_id="v", track=True, sizes=None):
    """A person and one object over ``len(predicate_sets)`` frames with the given predicate sets."""
    m = len(class_names)
    frames = []
    for t, preds in enumerate(predicate_sets):
        props = [ObjectProposal((10.0, 10.0, 50.0, 90.0), np.eye(m)[0], np.ones(2)),
                 ObjectProposal((40.0, 40.0, 70.0, 70.0), np.eye(m)[1], np.ones(2))]
        rels = [RelationshipInstance(0, 1, tuple(preds), np.zeros((1, 1, 1)), "p" if track else None)] if preds else []
        frames.append(FrameAnnotation(t, props, rels))
    return VideoAnnotation(video_id, frames, list(class_names), list(predicate_names),
                           list(sizes or [len(predicate_names)]))
