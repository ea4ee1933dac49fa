"""Stage driver, artifacts and report emission."""
