"""Zero-shot classification: prompt-built class embeddings, cosine argmax,
per-task accuracy, and a comparison table against published baselines.

Class embeddings come from averaging the text embeddings of a few prompt
templates per class.  Classification is a dot product of unit vectors, so the
temperature plays no role at inference.  The three built-in tasks mirror the
label schemes of the MESSIDOR, FIVES and REFUGE evaluations structurally;
no replication of results on the real datasets is claimed.
"""

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import encode_image, encode_text, tokenize
from .syndata import DiseaseLabelVector, ReadabilityLabels, read_ppm
from .training import TrainConfig, embed_pairs

BASELINE_DATASETS = ("MESSIDOR", "FIVES", "REFUGE")

# Published zero-shot accuracy of prior models on the three external
# datasets; rendered verbatim in every report.
BASELINE_TABLE = {
    "CLIP": (0.237, 0.250, 0.470),
    "BiomedCLIP": (0.224, 0.416, 0.540),
    "FLAIR": (0.545, 0.732, 0.899),
    "FLAIR_EK": (0.604, 0.735, 0.920),
    "VisionCLIP": (0.431, 0.739, 0.925),
}

REPORT_FOOTNOTE = "accuracy is top-1 (argmax over class prompts)"


@dataclass
class ZeroShotClass:
    name: str
    templates: tuple

    def __post_init__(self):
        if not self.templates:
            raise ValueError(f"class {self.name!r} has no prompt templates")


@dataclass
class ZeroShotTask:
    """A named classification task over DiseaseLabelVector corpora.

    ``label_rule`` maps a label vector to a class index, or None for samples
    the task excludes (for example multi-label cases in a single-label task).
    """
    name: str
    classes: list
    label_rule: object  # callable DiseaseLabelVector -> int | None

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a task needs at least 2 classes")

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def _dr_grade_rule(labels: DiseaseLabelVector):
    # MESSIDOR-style grading looks only at retinopathy; samples carrying a
    # different disease would leak non-DR cues into the grade classes
    others = set(labels.active()) - {"diabetic_retinopathy_mild",
                                     "diabetic_retinopathy_severe"}
    if others:
        return None
    return labels.dr_grade


def _multi_disease_rule(labels: DiseaseLabelVector):
    active = set(labels.active())
    dr = active & {"diabetic_retinopathy_mild", "diabetic_retinopathy_severe"}
    if not active:
        return 0
    if dr and active == dr:
        return 1
    if active == {"glaucoma"}:
        return 2
    if active == {"age_related_degeneration"}:
        return 3
    return None  # other diseases or multi-label cases


def _glaucoma_rule(labels: DiseaseLabelVector):
    return 1 if labels.get("glaucoma") else 0


def builtin_tasks() -> dict:
    """The three built-in tasks, keyed by name; class orders are fixed."""
    # templates deliberately mirror the caption grammar's phrasing: prompt
    # ensembles sit where the matching captions were embedded in training
    dr = ZeroShotTask(
        name="dr-grading",
        classes=[
            ZeroShotClass("grade 0", (
                "color fundus photograph with no abnormal findings",
                "normal retinal fundus image with no visible disease",
                "healthy fundus with clear optic disc and macula")),
            ZeroShotClass("grade 1", (
                "early diabetic retinopathy",
                "fundus image with early diabetic retinopathy",
                "retinal image showing early diabetic retinopathy")),
            ZeroShotClass("grade 2", (
                "mild diabetic retinopathy with scattered microaneurysms",
                "fundus image with mild diabetic retinopathy",
                "early diabetic retinopathy with small red dots")),
            ZeroShotClass("grade 3", (
                "advanced diabetic retinopathy",
                "fundus image with advanced diabetic retinopathy",
                "retinal image showing advanced diabetic retinopathy")),
            ZeroShotClass("grade 4", (
                "severe diabetic retinopathy with scattered hemorrhages",
                "fundus image with severe diabetic retinopathy",
                "advanced diabetic retinopathy with large hemorrhages")),
        ],
        label_rule=_dr_grade_rule)
    multi = ZeroShotTask(
        name="multi-disease",
        classes=[
            ZeroShotClass("normal", (
                "color fundus photograph with no abnormal findings",
                "normal retinal fundus image with no visible disease",
                "healthy fundus with clear optic disc and macula")),
            ZeroShotClass("diabetic retinopathy", (
                "fundus image with mild diabetic retinopathy",
                "fundus image with severe diabetic retinopathy",
                "severe diabetic retinopathy with scattered hemorrhages",
                "mild diabetic retinopathy with scattered microaneurysms")),
            ZeroShotClass("glaucoma", (
                "fundus image with glaucoma",
                "glaucoma with enlarged optic cup",
                "glaucomatous cupping of the optic disc")),
            ZeroShotClass("age related macular degeneration", (
                "fundus image with age related macular degeneration",
                "age related macular degeneration with drusen deposits",
                "macular drusen of age related degeneration")),
        ],
        label_rule=_multi_disease_rule)
    glaucoma = ZeroShotTask(
        name="glaucoma-screening",
        classes=[
            # class 0 covers everything that is not glaucoma, so its prompt
            # ensemble spans the normal caption plus every other finding;
            # crucially none of these contain a glaucoma marker word
            ZeroShotClass("no glaucoma", (
                "color fundus photograph with no abnormal findings",
                "mild diabetic retinopathy with scattered microaneurysms",
                "severe diabetic retinopathy with scattered hemorrhages",
                "age related macular degeneration with drusen deposits",
                "hypertensive retinopathy with narrowed arterioles",
                "retinal vein occlusion with a pale wedge",
                "pathological myopia with tessellated fundus",
                "hazy media opacity from cataract")),
            ZeroShotClass("glaucoma", (
                "fundus image with glaucoma",
                "glaucoma with enlarged optic cup",
                "glaucomatous cupping of the optic disc")),
        ],
        label_rule=_glaucoma_rule)
    return {t.name: t for t in (dr, multi, glaucoma)}


# task -> the external dataset whose Table-1 column it mirrors
TASK_DATASET = {
    "dr-grading": "MESSIDOR",
    "multi-disease": "FIVES",
    "glaucoma-screening": "REFUGE",
}


# ---------------------------------------------------------------------------
# classification


def build_class_embeddings(config: TrainConfig, params: dict,
                           task: ZeroShotTask, vocab) -> np.ndarray:
    """[C, d] unit-norm class embeddings: mean of template embeddings."""
    rows = []
    for cls in task.classes:
        toks = []
        for tpl in cls.templates:
            if len(tpl.split()) + 2 > config.text.max_seq_len:
                raise ValueError(
                    f"template for class {cls.name!r} exceeds max_seq_len")
            toks.append(tokenize(tpl, vocab, config.text.max_seq_len))
        emb = encode_text(config.text, params, np.stack(toks)).data
        mean = emb.mean(axis=0)
        rows.append(mean / np.linalg.norm(mean))
    return np.stack(rows)


def classify_embeddings(image_emb: np.ndarray, class_emb: np.ndarray) -> np.ndarray:
    """Cosine argmax per image; ties go to the lowest class index."""
    image_emb = np.asarray(image_emb, dtype=np.float64)
    class_emb = np.asarray(class_emb, dtype=np.float64)
    if image_emb.ndim != 2 or class_emb.ndim != 2 \
            or image_emb.shape[1] != class_emb.shape[1]:
        raise ValueError("embedding dimensions do not match")
    norms = np.linalg.norm(class_emb, axis=1)
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ValueError("class embedding rows are not unit-norm")
    return np.argmax(image_emb @ class_emb.T, axis=1)


def classify(config: TrainConfig, params: dict, images,
             class_emb: np.ndarray) -> np.ndarray:
    image_emb = encode_image(config.image, params, np.asarray(images)).data
    return classify_embeddings(image_emb, class_emb)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class TaskResult:
    task: str
    n: int
    n_excluded: int
    accuracy: float
    per_class_accuracy: list       # float per class, None where class empty
    confusion: np.ndarray          # [C, C]; rows = true class


@dataclass
class EvalReport:
    model_id: str
    config_hash: str
    results: list = field(default_factory=list)
    retrieval: dict | None = None


def evaluate_task(config: TrainConfig, params: dict, task: ZeroShotTask,
                  pairs, vocab, batch_size: int = 64) -> TaskResult:
    usable, targets = [], []
    for p in pairs:
        cls = task.label_rule(p.labels)
        if cls is not None:
            usable.append(p)
            targets.append(cls)
    if not usable:
        raise ValueError(f"no usable samples for task {task.name!r}")
    class_emb = build_class_embeddings(config, params, task, vocab)
    preds = []
    for lo in range(0, len(usable), batch_size):
        chunk = usable[lo:lo + batch_size]
        images = np.stack([np.asarray(p.image, dtype=np.float64)
                           for p in chunk])
        preds.append(classify(config, params, images, class_emb))
    preds = np.concatenate(preds)
    targets = np.asarray(targets)
    C = task.num_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (targets, preds), 1)
    per_class = []
    for c in range(C):
        total = int(confusion[c].sum())
        per_class.append(float(confusion[c, c]) / total if total else None)
    return TaskResult(task=task.name, n=len(usable),
                      n_excluded=len(pairs) - len(usable),
                      accuracy=float(np.trace(confusion)) / len(usable),
                      per_class_accuracy=per_class, confusion=confusion)


# ---------------------------------------------------------------------------
# report rendering


def _model_row(report: EvalReport) -> list:
    by_dataset = {TASK_DATASET.get(r.task): r.accuracy for r in report.results}
    return [by_dataset.get(ds) for ds in BASELINE_DATASETS]


def render_report(reports, fmt: str = "text") -> str:
    """Baseline rows plus one row per evaluated model, CSV or aligned text."""
    if fmt not in ("text", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    rows = [(name, [f"{v:.3f}" for v in accs])
            for name, accs in BASELINE_TABLE.items()]
    for rep in reports:
        rows.append((rep.model_id,
                     [f"{v:.3f}" if v is not None else ""
                      for v in _model_row(rep)]))
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["method", *BASELINE_DATASETS])
        for name, cells in rows:
            w.writerow([name, *cells])
        return buf.getvalue()
    width = max(len(name) for name, _ in rows) + 2
    lines = ["".join(["method".ljust(width)]
                     + [ds.rjust(10) for ds in BASELINE_DATASETS])]
    lines.append("-" * (width + 30))
    for name, cells in rows:
        lines.append("".join([name.ljust(width)]
                             + [c.rjust(10) for c in cells]))
    lines.append("")
    lines.append(f"note: {REPORT_FOOTNOTE}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# external dataset ingestion


@dataclass
class EvalSample:
    id: int
    image: np.ndarray
    caption: str
    labels: DiseaseLabelVector
    readability: ReadabilityLabels
    split: str


def _resample_nearest(image: np.ndarray, size: int) -> np.ndarray:
    _, h, w = image.shape
    if (h, w) == (size, size):
        return image
    ri = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    ci = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return image[:, ri[:, None], ci[None, :]]


def load_external_dataset(manifest_path, size: int = 64) -> list:
    """Manifest.jsonl + PPM images -> evaluation samples at the given size."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    samples = []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                labels = DiseaseLabelVector.from_ints(rec["labels"])
                readability = ReadabilityLabels.from_ints(rec["readability"])
                sid = int(rec["id"])
                caption = rec["caption"]
                image_path = root / rec["image_path"]
                split = rec.get("split", "test")
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as err:
                raise ValueError(f"{manifest_path}:{lineno}: bad record: {err}") \
                    from err
            if not image_path.exists():
                raise FileNotFoundError(
                    f"{manifest_path}:{lineno}: missing image {image_path}")
            image = _resample_nearest(read_ppm(image_path), size)
            samples.append(EvalSample(id=sid, image=image, caption=caption,
                                      labels=labels, readability=readability,
                                      split=split))
    return samples
