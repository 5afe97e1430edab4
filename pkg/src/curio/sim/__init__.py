"""2D tabletop world: objects, rendering, and the four interaction tasks."""

from .objects import (
    KINDS,
    N_TEXTURE_FAMILIES,
    SimObject,
    chord_interval,
    contains,
    segment_hits,
    spawn_object,
)
from .render import CameraView, render
from .grasp import (
    GraspSample,
    N_ANGLE_BINS,
    gen_grasp_dataset,
    grasp_feasible,
)
from .push import (
    PushContact,
    PushSample,
    apply_push,
    gen_push_dataset,
    push_contact,
    sample_push_action,
)
from .poke import PokeSample, fit_line, gen_poke_dataset, gen_poke_sample
from .identity import IdentityPair, gen_identity_dataset, gen_identity_pairs
from .gallery import GalleryView, gen_gallery_dataset

__all__ = [
    "KINDS",
    "N_TEXTURE_FAMILIES",
    "N_ANGLE_BINS",
    "SimObject",
    "spawn_object",
    "contains",
    "chord_interval",
    "segment_hits",
    "CameraView",
    "render",
    "GraspSample",
    "grasp_feasible",
    "gen_grasp_dataset",
    "PushContact",
    "PushSample",
    "sample_push_action",
    "push_contact",
    "apply_push",
    "gen_push_dataset",
    "PokeSample",
    "fit_line",
    "gen_poke_sample",
    "gen_poke_dataset",
    "IdentityPair",
    "gen_identity_pairs",
    "gen_identity_dataset",
    "GalleryView",
    "gen_gallery_dataset",
]
