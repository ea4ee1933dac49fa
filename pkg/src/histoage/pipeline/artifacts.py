"""
artifacts.py
Work-tree layout, stage manifests and the determinism digest.

Every stage writes `manifests/<stage>.json` listing the sha256 of each input it
read and each output it wrote, the config hash and the wall-clock duration.
"""
import hashlib
import json
import logging
import shutil
import time
from pathlib import Path

from histoage import __version__
from histoage.config.settings import PipelineConfig, config_hash
from histoage.utils.errors import MissingArtifactError

logger = logging.getLogger(__name__)

MANIFEST_DIR = "manifests"
LOG_DIR = "logs"
VOLATILE_FIELDS = ("duration_s",)
CHUNK = 1 << 20


class WorkTree:
    """Paths of every artifact under the work directory."""

    def __init__(self, root):
        self.root = Path(root)

    def __truediv__(self, other) -> Path:
        return self.root / other

    @property
    def cohort(self) -> Path:
        return self.root / "synth" / "cohort.csv"

    @property
    def slides(self) -> Path:
        return self.root / "synth" / "slides"

    @property
    def truth(self) -> Path:
        return self.root / "truth" / "truth.json"

    @property
    def masks(self) -> Path:
        return self.root / "truth" / "masks"

    @property
    def slide_index(self) -> Path:
        return self.root / "patches" / "slides.csv"

    def patch_stack(self, scale: str) -> Path:
        return self.root / "patches" / f"{scale}.pch"

    def patch_manifest(self, scale: str) -> Path:
        return self.root / "patches" / f"{scale}_manifest.csv"

    def model(self, scale: str) -> Path:
        return self.root / "models" / f"{scale}.cdl"

    def training_log(self, scale: str) -> Path:
        return self.root / "models" / f"{scale}_training.csv"

    def embeddings(self, scale: str) -> Path:
        return self.root / "embeddings" / f"{scale}.csv"

    def features(self, scale: str) -> Path:
        return self.root / "features" / f"{scale}.csv"

    def inertia(self, scale: str) -> Path:
        return self.root / "features" / f"inertia_{scale}.csv"

    def predictions(self, scale: str) -> Path:
        return self.root / "age" / f"predictions_{scale}.csv"

    def mae(self, scale: str) -> Path:
        return self.root / "age" / f"mae_{scale}.csv"

    @property
    def age_summary(self) -> Path:
        return self.root / "age" / "summary.json"

    @property
    def accuracy(self) -> Path:
        return self.root / "epi" / "accuracy.csv"

    @property
    def disease_probabilities(self) -> Path:
        return self.root / "epi" / "disease_probabilities.csv"

    @property
    def hr_comparison(self) -> Path:
        return self.root / "epi" / "hr_comparison.csv"

    @property
    def hr_overlap(self) -> Path:
        return self.root / "epi" / "hr_overlap.csv"

    def curves(self, arm: str) -> Path:
        return self.root / "epi" / f"survival_curves_{arm}.csv"

    @property
    def kaplan_meier(self) -> Path:
        return self.root / "epi" / "kaplan_meier.csv"

    def ranked(self, scale: str) -> Path:
        return self.root / "attention" / f"ranked_{scale}.csv"

    def regions(self, scale: str) -> Path:
        return self.root / "attention" / f"regions_{scale}.csv"

    @property
    def enrichment(self) -> Path:
        return self.root / "attention" / "enrichment.json"

    @property
    def report(self) -> Path:
        return self.root / "report"

    @property
    def logs(self) -> Path:
        return self.root / LOG_DIR

    def manifest(self, stage: str) -> Path:
        return self.root / MANIFEST_DIR / f"{stage}.json"


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(CHUNK), b""):
            digest.update(block)
    return digest.hexdigest()


def require(path, stage: str = "") -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


def _relative(path: Path, root: Path) -> str:
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return path.resolve().as_posix()


def _expand(paths) -> list:
    files = []
    for path in paths:
        path = Path(path)
        if path.is_dir():
            files.extend(p for p in sorted(path.rglob("*")) if p.is_file())
        elif path.is_file():
            files.append(path)
    return files


class StageRun:
    """
    Context for one stage execution: clears the stage's output directories,
    collects inputs/outputs, and writes the manifest on success.
    """

    def __init__(self, tree: WorkTree, stage: str, config: PipelineConfig, clean=()):
        self.tree = tree
        self.stage = stage
        self.config = config
        self.clean = [Path(c) for c in clean]
        self.inputs = []
        self.outputs = []
        self.notes = []
        self._start = 0.0

    def __enter__(self) -> "StageRun":
        logger.info(f"STAGE START - {self.stage}")
        for directory in self.clean:
            if directory.exists():
                shutil.rmtree(directory)
        self.tree.manifest(self.stage).unlink(missing_ok=True)
        self._start = time.time()
        return self

    def read(self, *paths) -> None:
        for path in paths:
            self.inputs.append(require(path, self.stage))

    def wrote(self, *paths) -> None:
        for path in paths:
            if isinstance(path, (list, tuple)):
                self.outputs.extend(Path(p) for p in path)
            else:
                self.outputs.append(Path(path))

    def note(self, message: str) -> None:
        self.notes.append(message)

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            logger.error(f"STAGE FAILED - {self.stage} - {exc_type.__name__}: {exc}")
            return False
        duration = time.time() - self._start
        write_manifest(self.tree, self.stage, self.config, self.inputs, self.outputs, duration, self.notes)
        logger.info(f"STAGE COMPLETE - {self.stage} - Duration: {int(duration * 1000)}ms")
        return False


def write_manifest(tree: WorkTree, stage: str, config: PipelineConfig, inputs, outputs, duration: float, notes=()) -> Path:
    root = tree.root
    manifest = {
        "stage": stage,
        "version": __version__,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "inputs": {_relative(p, root): file_sha256(p) for p in _expand(inputs)},
        "outputs": {_relative(p, root): file_sha256(p) for p in _expand(outputs)},
        "notes": list(notes),
        "duration_s": round(duration, 3),
    }
    path = tree.manifest(stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(tree: WorkTree, stage: str) -> dict:
    path = require(tree.manifest(stage), stage)
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def declared_outputs(tree: WorkTree) -> set:
    declared = set()
    directory = tree.root / MANIFEST_DIR
    if directory.is_dir():
        for path in sorted(directory.glob("*.json")):
            with open(path, encoding="utf-8") as f:
                declared.update(json.load(f).get("outputs", {}))
    return declared


def _digest_bytes(path: Path, relative: str) -> bytes:
    if relative.startswith(f"{MANIFEST_DIR}/") and path.suffix == ".json":
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
        for name in VOLATILE_FIELDS:
            manifest.pop(name, None)
        return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return path.read_bytes()


def tree_digest(work_dir) -> str:
    """
    SHA-256 over every file under work_dir (relative path + content), skipping
    logs/ and the duration field of stage manifests.
    """
    root = Path(work_dir)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        relative = path.relative_to(root).as_posix()
        if relative.split("/", 1)[0] == LOG_DIR:
            continue
        digest.update(relative.encode("utf-8") + b"\0")
        digest.update(hashlib.sha256(_digest_bytes(path, relative)).digest())
    return digest.hexdigest()
