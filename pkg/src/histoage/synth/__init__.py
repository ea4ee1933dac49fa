"""Ground-truth synthetic cohort and slides."""
from histoage.synth.cohort import GeneratorSpec, gen_subjects, read_cohort, read_truth, write_cohort, write_truth
from histoage.synth.slides import dominant_region, gen_slide, gen_slides

__all__ = [
    "GeneratorSpec", "gen_subjects", "read_cohort", "read_truth", "write_cohort", "write_truth",
    "dominant_region", "gen_slide", "gen_slides",
]
