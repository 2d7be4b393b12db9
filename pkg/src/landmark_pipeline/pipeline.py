"""End-to-end retrieval and recognition pipelines with reproducible runs.

Stages exchange plain files inside the output directory (no hidden state),
and every run writes ``manifest.json`` holding the result-affecting config,
its hash, the seed, and SHA-256 checksums of all inputs and outputs. The
worker-count setting is deliberately not part of the manifest: results are
required to be independent of it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from landmark_pipeline import metrics as metrics_mod
from landmark_pipeline import vector_ops
from landmark_pipeline.cleaning import DEFAULT_K, DEFAULT_T_FREQUENCY, DEFAULT_VERIFY_CAP
from landmark_pipeline.dataset.containers import DescriptorMatrix, Prediction
from landmark_pipeline.dataset.io import load_descriptors, load_labels, load_local_features
from landmark_pipeline.geometry import RansacConfig
from landmark_pipeline.knn import knn_search, to_ranked_list, write_ranked_csv
from landmark_pipeline.metric_math import DEFAULT_GEM_P, DEFAULT_MARGIN, DEFAULT_SCALE
from landmark_pipeline.recognition import (
    DEFAULT_DISTRACTOR_THRESHOLD,
    DEFAULT_KNN,
    DEFAULT_T,
    DistractorConfig,
    RecognitionConfig,
    recognize_batch,
    suppress_distractors,
    write_predictions,
)
from landmark_pipeline.rerank import rerank_batch

SUBMISSION_CAP = 100

# Fields that never influence computed results and therefore stay outside
# the manifest and its config hash.
_NON_REPRODUCIBILITY_FIELDS = {"threads", "out_dir"}


@dataclass
class PipelineConfig:
    """Union of every stage's knobs plus input/output paths.

    Defaults follow the pipeline's standard constants: cleaning k=1000 and
    t_frequency=2, inlier threshold 30, voting t=70 over 3 neighbors,
    distractor threshold 30, submission cap 100, GeM p=3, margin 0.3,
    multi-scale factors 0.75/1.0/1.25.
    """

    mode: str = "both"
    train: str = ""
    index: str = ""
    test: str = ""
    labels: str = ""
    features: str = ""
    relevance_truth: str = ""
    recognition_truth: str = ""
    ensemble_train: list[str] = field(default_factory=list)
    ensemble_index: list[str] = field(default_factory=list)
    ensemble_test: list[str] = field(default_factory=list)
    out_dir: str = "pipeline-out"
    seed: int = 0
    threads: int = 1
    scales: list[float] = field(default_factory=lambda: list(vector_ops.DEFAULT_SCALES))
    dba_k: int = 0
    qe_k: int = 0
    qe_alpha: float = vector_ops.DEFAULT_QE_ALPHA
    cap: int = SUBMISSION_CAP
    knn: int = DEFAULT_KNN
    t: float = DEFAULT_T
    use_spatial: bool = True
    spatial_outside_sum: bool = False
    distractor_threshold: int = DEFAULT_DISTRACTOR_THRESHOLD
    clean_k: int = DEFAULT_K
    verify_cap: int = DEFAULT_VERIFY_CAP
    t_frequency: int = DEFAULT_T_FREQUENCY
    ransac_iterations: int = 1000
    reprojection_tolerance: float = 3.0
    inlier_threshold: int = 30
    match_distance_max: float = 0.8
    mutual_check: bool = True
    gem_p: float = DEFAULT_GEM_P
    margin: float = DEFAULT_MARGIN
    margin_scale: float = DEFAULT_SCALE
    loss_variant: str = "arc"

    def ransac_config(self) -> RansacConfig:
        return RansacConfig(
            iterations=self.ransac_iterations,
            reprojection_tolerance=self.reprojection_tolerance,
            inlier_threshold=self.inlier_threshold,
            match_distance_max=self.match_distance_max,
            mutual_check=self.mutual_check,
            seed=self.seed,
        )

    def recognition_config(self) -> RecognitionConfig:
        return RecognitionConfig(
            knn=self.knn,
            t=self.t,
            use_spatial=self.use_spatial,
            spatial_outside_sum=self.spatial_outside_sum,
            ransac=self.ransac_config(),
        )


_LIST_FIELDS = {"ensemble_train", "ensemble_index", "ensemble_test", "scales"}


def parse_config_value(name: str, raw: str, target_type):
    if name in _LIST_FIELDS:
        items = [part.strip() for part in raw.split(",") if part.strip()]
        return [float(p) for p in items] if name == "scales" else items
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def load_config(path) -> PipelineConfig:
    """Parse a flat ``key=value`` config file; unknown keys are rejected."""
    fields = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    types = {
        name: type(getattr(PipelineConfig(), name))
        for name in fields
    }
    cfg = PipelineConfig()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        setattr(cfg, key, parse_config_value(key, raw.strip(), types[key]))
    return cfg


def save_config(cfg: PipelineConfig, path) -> None:
    lines = []
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def reproducible_config(cfg: PipelineConfig) -> dict:
    out = {}
    for f in dataclasses.fields(PipelineConfig):
        if f.name in _NON_REPRODUCIBILITY_FIELDS:
            continue
        out[f.name] = getattr(cfg, f.name)
    return out


def config_hash(cfg: PipelineConfig) -> str:
    canonical = json.dumps(reproducible_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(cfg: PipelineConfig, out_dir: Path, input_paths: list[str]) -> Path:
    outputs = {}
    for p in sorted(out_dir.iterdir()):
        if p.name == "manifest.json" or p.is_dir():
            continue
        outputs[p.name] = _sha256(p)
    manifest = {
        "config": reproducible_config(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "inputs": {str(p): _sha256(p) for p in sorted(set(input_paths)) if p},
        "outputs": outputs,
    }
    path = out_dir / "manifest.json"
    path.write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return path


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for exit-code mapping."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as err:
        raise StageError(name, err) from err


def _load_normalized(path: str, ensemble: list[str]) -> DescriptorMatrix:
    if ensemble:
        models = [vector_ops.l2_normalize(load_descriptors(p)) for p in ensemble]
        return vector_ops.concat_ensemble(models)
    return vector_ops.l2_normalize(load_descriptors(path))


@dataclass
class StageMetric:
    stage: str
    metric: str
    value: float


def run_retrieval_pipeline(cfg: PipelineConfig) -> list[StageMetric]:
    """Ensemble -> DBA/QE -> search -> recognize test+index -> re-rank.

    Each stage's output lands in ``out_dir``; when relevance truth is given
    the returned list carries one mAP@cap row per ranking stage.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [
        cfg.train, cfg.index, cfg.test, cfg.labels, cfg.features,
        cfg.relevance_truth,
        *cfg.ensemble_train, *cfg.ensemble_index, *cfg.ensemble_test,
    ]

    train = _stage("ingest", _load_normalized, cfg.train, cfg.ensemble_train)
    index = _stage("ingest", _load_normalized, cfg.index, cfg.ensemble_index)
    test = _stage("ingest", _load_normalized, cfg.test, cfg.ensemble_test)
    labels = _stage("ingest", load_labels, cfg.labels)
    features = _stage("ingest", load_local_features, cfg.features) if cfg.use_spatial else None

    baseline = _stage(
        "search",
        lambda: [to_ranked_list(nl) for nl in knn_search(test, index, k=cfg.cap)],
    )
    write_ranked_csv(baseline, out_dir / "ranked_baseline.csv")

    index_cur, test_cur, augmented = index, test, None
    if cfg.dba_k > 0 or cfg.qe_k > 0:
        def augment():
            db = vector_ops.dba(index, cfg.dba_k) if cfg.dba_k > 0 else index
            q = vector_ops.alpha_qe(test, db, cfg.qe_k, cfg.qe_alpha) if cfg.qe_k > 0 else test
            return db, q

        index_cur, test_cur = _stage("augment", augment)
        augmented = _stage(
            "search",
            lambda: [to_ranked_list(nl) for nl in knn_search(test_cur, index_cur, k=cfg.cap)],
        )
        write_ranked_csv(augmented, out_dir / "ranked_augmented.csv")

    rec_cfg = cfg.recognition_config()
    test_preds = _stage(
        "recognize",
        recognize_batch,
        test_cur, train, labels, rec_cfg,
        features=features, threads=cfg.threads,
    )
    index_preds = _stage(
        "recognize",
        recognize_batch,
        index_cur, train, labels, rec_cfg,
        features=features, threads=cfg.threads,
    )
    write_predictions(test_preds, out_dir / "preds_test.csv")
    write_predictions(index_preds, out_dir / "preds_index.csv")

    current = augmented if augmented is not None else baseline
    reranked = _stage(
        "rerank",
        rerank_batch,
        current,
        {p.query_id: p for p in test_preds},
        {p.query_id: p for p in index_preds},
        cfg.cap,
    )
    write_ranked_csv(reranked, out_dir / "ranked_reranked.csv")

    stage_metrics: list[StageMetric] = []
    if cfg.relevance_truth:
        truth = _stage("evaluate", metrics_mod.read_relevance, cfg.relevance_truth)
        rows = [("baseline", baseline)]
        if augmented is not None:
            rows.append(("dba_qe", augmented))
        rows.append(("reranked", reranked))
        for stage_name, ranked in rows:
            value = _stage("evaluate", metrics_mod.map_at_k, ranked, truth, cfg.cap)
            stage_metrics.append(StageMetric(stage_name, f"mAP@{cfg.cap}", value))
        _write_metrics(stage_metrics, out_dir / "retrieval_metrics.csv")

    write_manifest(cfg, out_dir, inputs)
    return stage_metrics


def run_recognition_pipeline(cfg: PipelineConfig) -> list[StageMetric]:
    """Soft-voting -> distractor suppression, with GAP before/after."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [cfg.train, cfg.test, cfg.labels, cfg.features, cfg.recognition_truth,
              *cfg.ensemble_train, *cfg.ensemble_test]

    train = _stage("ingest", _load_normalized, cfg.train, cfg.ensemble_train)
    test = _stage("ingest", _load_normalized, cfg.test, cfg.ensemble_test)
    labels = _stage("ingest", load_labels, cfg.labels)
    features = _stage("ingest", load_local_features, cfg.features) if cfg.use_spatial else None

    preds = _stage(
        "recognize",
        recognize_batch,
        test, train, labels, cfg.recognition_config(),
        features=features, threads=cfg.threads,
    )
    write_predictions(preds, out_dir / "preds_raw.csv")
    final = _stage(
        "suppress",
        suppress_distractors,
        preds,
        DistractorConfig(frequency_threshold=cfg.distractor_threshold),
    )
    write_predictions(final, out_dir / "preds_final.csv")

    stage_metrics: list[StageMetric] = []
    if cfg.recognition_truth:
        truth = _stage("evaluate", metrics_mod.read_recognition_truth, cfg.recognition_truth)
        stage_metrics.append(
            StageMetric("soft_voting", "GAP", _stage("evaluate", metrics_mod.gap, preds, truth))
        )
        stage_metrics.append(
            StageMetric("suppressed", "GAP", _stage("evaluate", metrics_mod.gap, final, truth))
        )
        _write_metrics(stage_metrics, out_dir / "recognition_metrics.csv")

    write_manifest(cfg, out_dir, inputs)
    return stage_metrics


def _write_metrics(rows: list[StageMetric], path: Path) -> None:
    lines = ["stage,metric,value"]
    lines += [f"{r.stage},{r.metric},{r.value:.6f}" for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
